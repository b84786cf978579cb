use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bodyfit::body_loss::{eval_metrics, write_penetration_map};
use bodyfit::config::{ConfigError, RunConfig};
use bodyfit::gradcheck::{run_gradcheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
use bodyfit::guidance::{frame_meshes, render_views, CameraSet, GuidanceTarget, ResamplePolicy, SilhouetteImage};
use bodyfit::mesh::{load_mesh, load_points, write_mesh, TriMesh};
use bodyfit::optimize::{run_optimization, run_two_stage, RunOutput};
use bodyfit::sdf::{build_body, contacts_from_indices, BodySpec};

#[derive(Parser)]
#[command(name = "bodyfit", version, about = "Deform a template mesh to match a design target while fitting a body")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an optimization described by a TOML config file.
    Deform {
        config: PathBuf,
        /// Overrides the output directory from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Penetration and contact metrics of an object against a body.
    Eval {
        #[arg(long)]
        object: PathBuf,
        #[command(flatten)]
        body: BodyArgs,
        /// Write per-vertex signed distances here.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Write soft silhouettes of a mesh from the default eight views.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// Softness in pixels.
        #[arg(long, default_value_t = 0.5)]
        sigma_pixels: f64,
    },
    /// Finite-difference checks of every loss term on the bundled fixture.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct BodyArgs {
    #[arg(long)]
    body: PathBuf,
    /// OBJ whose vertices are the contact points.
    #[arg(long, conflicts_with = "contact_indices")]
    contacts: Option<PathBuf>,
    /// Comma-separated body vertex indices used as contact points.
    #[arg(long, value_delimiter = ',')]
    contact_indices: Option<Vec<usize>>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Deform { config, output_dir } => deform(&config, output_dir),
        Command::Eval { object, body, map } => eval(&object, &body, map.as_deref()),
        Command::Render {
            mesh,
            out_dir,
            resolution,
            sigma_pixels,
        } => render(&mesh, &out_dir, resolution, sigma_pixels),
        Command::Gradcheck { seed, step, tolerance } => gradcheck(seed, step, tolerance),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_body(path: &Path, contacts: Option<&Path>, indices: Option<&[usize]>) -> Result<BodySpec, Failure> {
    let mesh = load_mesh(path)?;
    let points = match (contacts, indices) {
        (Some(p), _) => load_points(p)?,
        (None, Some(ids)) => contacts_from_indices(&mesh, ids)?,
        (None, None) => Vec::new(),
    };
    Ok(build_body(mesh, points)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_silhouettes(mesh: &TriMesh, cameras: &CameraSet, sigma: f64, dir: &Path) -> Result<usize, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let renders = render_views(mesh, cameras, sigma)?;
    for (k, r) in renders.iter().enumerate() {
        r.image.write_pgm(dir.join(format!("view_{k}.pgm")))?;
    }
    Ok(renders.len())
}

fn deform(config_path: &Path, output_dir: Option<PathBuf>) -> Result<ExitCode, Failure> {
    let cfg = RunConfig::load(config_path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
        other => Failure::Usage(other.to_string()),
    })?;
    let out_dir = output_dir.unwrap_or_else(|| cfg.output_dir());
    let template = load_mesh(cfg.resolve(&cfg.meshes.template))?;
    let guidance = cfg.meshes.guidance.as_ref().map(|p| load_mesh(cfg.resolve(p))).transpose()?;
    let body = match &cfg.meshes.body {
        Some(p) => {
            let contacts = cfg.contacts.points.as_ref().map(|c| cfg.resolve(c));
            Some(load_body(&cfg.resolve(p), contacts.as_deref(), cfg.contacts.indices.as_deref())?)
        }
        None => None,
    };

    let mut objective = cfg.objective();
    if objective.snapshot_every > 0 {
        objective.snapshot_dir = Some(out_dir.join(&cfg.output.snapshots));
    }
    let mut silhouettes = None;
    if let Some(spec) = &cfg.cameras {
        let mut framed: Vec<&TriMesh> = vec![&template];
        framed.extend(guidance.as_ref());
        let frame = frame_meshes(&framed).ok_or_else(|| Failure::Runtime("nothing to frame".into()))?;
        let (cameras, sigma) = spec.build(frame)?;
        if let Some(paths) = &spec.silhouettes {
            let images = paths
                .iter()
                .enumerate()
                .map(|(k, p)| SilhouetteImage::load(cfg.resolve(p), k))
                .collect::<Result<Vec<_>, _>>()?;
            silhouettes = Some(images);
        }
        objective.cameras = Some(cameras);
        objective.sigma = sigma;
    }
    let target = GuidanceTarget {
        mesh: guidance,
        silhouettes,
        sample_count: objective.samples,
        resample: ResamplePolicy::PerIteration { seed: objective.seed },
    };

    let out: RunOutput = match cfg.optimizer.mode.second_stage_start() {
        None => run_optimization(&template, body.as_ref(), &target, &objective)?,
        Some(start) => {
            let body = body.as_ref().ok_or_else(|| Failure::Usage("two-stage runs need a body".into()))?;
            run_two_stage(&template, body, &target, &objective, start)?
        }
    };

    fs::create_dir_all(&out_dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_mesh(&out.mesh, out_dir.join(&cfg.output.mesh))?;
    write_text(&out_dir.join(&cfg.output.record), &out.record.to_csv())?;
    write_text(&out_dir.join(&cfg.output.timings), &out.record.timings_csv())?;
    if let Some(body) = &body {
        let metrics = eval_metrics(&out.mesh, body)?;
        write_penetration_map(out_dir.join(&cfg.output.penetration_map), &metrics.signed_distances)?;
        println!("Dp={} Dc={}", metrics.dp, metrics.dc);
    }
    if cfg.output.silhouettes {
        if let Some(cameras) = &objective.cameras {
            write_silhouettes(&out.mesh, cameras, objective.sigma, &out_dir.join("silhouettes"))?;
        }
    }
    if let Some(last) = out.record.rows.last() {
        println!("iterations={} final_loss={}", out.record.len(), last.total);
    }
    println!("wrote {}", out_dir.join(&cfg.output.mesh).display());
    Ok(ExitCode::SUCCESS)
}

fn eval(object: &Path, args: &BodyArgs, map: Option<&Path>) -> Result<ExitCode, Failure> {
    let mesh = load_mesh(object)?;
    let body = load_body(&args.body, args.contacts.as_deref(), args.contact_indices.as_deref())?;
    let metrics = eval_metrics(&mesh, &body)?;
    println!("Dp={}", metrics.dp);
    println!("Dc={}", metrics.dc);
    println!("vertices={}", metrics.vertex_count);
    if let Some(path) = map {
        write_penetration_map(path, &metrics.signed_distances)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn render(mesh_path: &Path, out_dir: &Path, resolution: usize, sigma_pixels: f64) -> Result<ExitCode, Failure> {
    if !(sigma_pixels > 0.0) {
        return Err(Failure::Usage("--sigma-pixels must be positive".into()));
    }
    let mesh = load_mesh(mesh_path)?;
    let cameras = CameraSet::framing(&[&mesh], resolution)?;
    let sigma = sigma_pixels * cameras.cameras[0].pixel_size();
    let n = write_silhouettes(&mesh, &cameras, sigma, out_dir)?;
    println!("wrote {n} views to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64, step: f64, tolerance: f64) -> Result<ExitCode, Failure> {
    if !(step > 0.0) {
        return Err(Failure::Usage("--step must be positive".into()));
    }
    let report = run_gradcheck(seed, step)?;
    for t in &report.terms {
        println!("{:<14} max_rel_error={:.3e} entries={}", t.name, t.max_rel_error, t.entries);
    }
    let worst = report.max_rel_error();
    let pass = report.passes(tolerance);
    println!("max_rel_error={worst:.3e} tolerance={tolerance:e} {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
