use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bodyfit::fixtures;
use bodyfit::mesh::{to_obj_string, Vec3};

fn bodyfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bodyfit")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_obj(path: &Path, mesh: &bodyfit::mesh::TriMesh) -> String {
    fs::write(path, to_obj_string(mesh)).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn eval_reports_zero_for_separated_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let object = write_obj(
        &dir.path().join("object.obj"),
        &fixtures::translated(&fixtures::icosphere(1, 0.2), Vec3::new(2.0, 0.0, 0.0)),
    );
    let body = write_obj(&dir.path().join("body.obj"), &fixtures::cylinder(0.5, 1.0, 16, 4));
    let map = dir.path().join("map.txt");
    let out = bodyfit(&["eval", "--object", &object, "--body", &body, "--map", map.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("Dp=0\n"), "{text}");
    assert!(text.contains("vertices=42"), "{text}");
    assert_eq!(fs::read_to_string(&map).unwrap().lines().count(), 42);
}

#[test]
fn eval_reports_penetration_for_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let object = write_obj(&dir.path().join("object.obj"), &fixtures::torus(0.6, 0.2, 16, 8));
    let body = write_obj(&dir.path().join("body.obj"), &fixtures::cylinder(0.5, 1.0, 16, 4));
    let out = bodyfit(&["eval", "--object", &object, "--body", &body, "--contact-indices", "0,1"]);
    assert!(out.status.success());
    let dp: f64 = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("Dp="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dp > 0.0);
}

#[test]
fn gradcheck_passes_on_the_bundled_fixture() {
    let out = bodyfit(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn render_writes_eight_views() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_obj(&dir.path().join("sphere.obj"), &fixtures::icosphere(2, 1.0));
    let views = dir.path().join("views");
    let out = bodyfit(&["render", "--mesh", &mesh, "--out-dir", views.to_str().unwrap(), "--resolution", "32"]);
    assert!(out.status.success());
    for k in 0..8 {
        let data = fs::read(views.join(format!("view_{k}.pgm"))).unwrap();
        assert!(data.starts_with(b"P"));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bodyfit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bodyfit(&["eval", "--object", "x.obj"]).status.code(), Some(2));
    assert_eq!(bodyfit(&["gradcheck", "--step", "0"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[meshes]\ntemplate = \"t.obj\"\nunknown_key = 1\n").unwrap();
    assert_eq!(bodyfit(&["deform", config.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_one() {
    let out = bodyfit(&["eval", "--object", "/nonexistent/a.obj", "--body", "/nonexistent/b.obj"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(bodyfit(&["deform", "/nonexistent/run.toml"]).status.code(), Some(1));
}

#[test]
fn two_stage_deform_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_obj(&dir.path().join("template.obj"), &fixtures::torus(0.7, 0.2, 16, 8));
    write_obj(&dir.path().join("guidance.obj"), &fixtures::torus(0.65, 0.15, 16, 8));
    write_obj(&dir.path().join("limb.obj"), &fixtures::cylinder(0.5, 1.0, 16, 4));
    fs::write(
        dir.path().join("run.toml"),
        r#"[meshes]
template = "template.obj"
guidance = "guidance.obj"
body = "limb.obj"

[contacts]
indices = [32, 36, 40, 44]

[weights]
alpha = 1e-4

[optimizer]
mode = "two-stage"
iterations = 5
samples = 128
pin = 0
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bodyfit(&[
        "deform",
        dir.path().join("run.toml").to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("Dp="));
    let record = fs::read_to_string(out_dir.join("record.csv")).unwrap();
    assert!(record.lines().any(|l| l.starts_with("semantic,")));
    assert!(record.lines().any(|l| l.starts_with("body,")));
    for name in ["final.obj", "timings.csv", "penetration.txt"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}
