use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crossreg::autodiff::{checkpoint, ParamStore};
use crossreg::config::{parse_kv, RunConfig};
use crossreg::data::{self, PerturbMode, PerturbSpec, PreparedInput, Scene, SceneConfig};
use crossreg::eval::{self, ModelPredictor};
use crossreg::geometry::{PoseQT, SphericalConfig};
use crossreg::registration::Model;
use crossreg::sampling::knn_exactness_benchmark;
use crossreg::training::{self, LossParams};
use crossreg::Error;

#[derive(Parser)]
#[command(name = "crossreg", version, about = "Image to point cloud registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "large")]
        mode: String,
        /// key=value overrides of the perturbation ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write metric, recall and histogram CSVs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: String,
    },
    /// Register one image and point cloud.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Range-image rows and columns used for neighbor search.
        #[arg(long, default_value_t = 16)]
        grid_rows: usize,
        #[arg(long, default_value_t = 96)]
        grid_cols: usize,
        /// Vertical field of view above and below the horizon, degrees.
        #[arg(long, default_value_t = 15.0)]
        fov_up: f64,
        #[arg(long, default_value_t = 25.0)]
        fov_down: f64,
    },
    /// Compare the windowed neighbor search with the exhaustive one.
    BenchKnn {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with the process exit code it maps to.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => 2,
            Error::Io(_) | Error::MalformedFile { .. } | Error::UnknownParameter(_) => 3,
            _ => 4,
        };
        Failure(code, e.to_string())
    }
}

fn data_err(msg: impl Into<String>) -> Failure {
    Failure(3, msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen { out, n, seed, mode, config } => gen(&out, n, seed, &mode, config.as_deref()),
        Cmd::Train { data, config, out } => train(&data, config.as_deref(), &out),
        Cmd::Eval { data, ckpt, out } => evaluate(&data, &ckpt, &out),
        Cmd::Infer {
            ckpt,
            cloud,
            image,
            intrinsics,
            grid_rows,
            grid_cols,
            fov_up,
            fov_down,
        } => SphericalConfig::new(grid_rows, grid_cols, fov_up, fov_down)
            .map_err(Failure::from)
            .and_then(|sph| infer(&ckpt, &cloud, &image, &intrinsics, sph)),
        Cmd::BenchKnn { n, trials, k, seed } => bench_knn(n, trials, k, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn gen(out: &Path, n: usize, seed: u64, mode: &str, config: Option<&Path>) -> Result<(), Failure> {
    let mut spec = PerturbSpec::for_mode(PerturbMode::parse(mode)?);
    if let Some(path) = config {
        for (k, v) in parse_kv(&read_text(path)?)? {
            if k == "mode" {
                // The command-line mode wins; a conflicting file is an error.
                if PerturbMode::parse(&v)? != spec.mode {
                    return Err(Failure(2, format!("config mode '{v}' conflicts with --mode {mode}")));
                }
            } else if !spec.set(&k, &v)? {
                return Err(Failure(2, format!("unknown key '{k}'")));
            }
        }
    }
    spec.validate()?;
    let dirs = data::generate_dataset(out, n, seed, &SceneConfig::desk(spec))?;
    let digest = manifest(out, &dirs)?;
    fs::write(out.join("MANIFEST"), format!("{digest}\n")).map_err(Error::from)?;
    println!("wrote {} scenes to {}", dirs.len(), out.display());
    println!("manifest sha256 {digest}");
    Ok(())
}

/// SHA-256 over every scene file, in sorted order, keyed by relative path.
fn manifest(root: &Path, dirs: &[PathBuf]) -> Result<String, Failure> {
    let mut h = Sha256::new();
    for d in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(d).map_err(Error::from)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(Error::from)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(&f).map_err(Error::from)?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn metrics_log(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

fn build(cfg: &RunConfig) -> Result<(Model, ParamStore, LossParams), Failure> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg.model, cfg.train.seed)?;
    let lp = LossParams::new(&mut store, &cfg.train)?;
    Ok((model, store, lp))
}

fn load_data(dir: &Path) -> Result<Vec<Scene>, Failure> {
    let scenes = data::load_dataset(dir)?;
    if scenes.is_empty() {
        return Err(data_err(format!("no scenes under {}", dir.display())));
    }
    Ok(scenes)
}

fn train(data_dir: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_kv(&read_text(path)?)?;
    }
    let scenes = load_data(data_dir)?;
    let (model, mut store, lp) = build(&cfg)?;
    let mut log = Vec::new();
    let rep = training::train(&model, &mut store, &lp, &scenes, &cfg.train, Some(&mut log))?;
    checkpoint::save(&rep.best, out)?;
    fs::write(sidecar(out), cfg.to_kv()).map_err(Error::from)?;
    fs::write(metrics_log(out), &log).map_err(Error::from)?;
    println!(
        "trained {} steps; best epoch {} (RTE {:.6}); checkpoint {}",
        rep.steps,
        rep.best_epoch,
        rep.best_rte,
        out.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Model, ParamStore), Failure> {
    let mut cfg = RunConfig::default();
    cfg.apply_kv(&read_text(&sidecar(ckpt))?)?;
    let (model, mut store, _) = build(&cfg)?;
    checkpoint::load_into(&mut store, ckpt)?;
    Ok((model, store))
}

fn evaluate(data_dir: &Path, ckpt: &Path, prefix: &str) -> Result<(), Failure> {
    let (model, store) = load_model(ckpt)?;
    let scenes = load_data(data_dir)?;
    let rep = eval::report(
        &ModelPredictor {
            model: &model,
            store: &store,
        },
        &scenes,
    )?;
    for (suffix, text) in [("metrics", &rep.metrics), ("recall", &rep.recall), ("hist", &rep.hist)] {
        fs::write(format!("{prefix}_{suffix}.csv"), text).map_err(Error::from)?;
    }
    print!("{}", rep.metrics);
    Ok(())
}

fn print_pose(label: &str, p: &PoseQT) {
    let q = p.q().to_array();
    let t = p.t();
    println!("{label}q {:.9} {:.9} {:.9} {:.9}", q[0], q[1], q[2], q[3]);
    println!("{label}t {:.9} {:.9} {:.9}", t.x, t.y, t.z);
}

fn infer(ckpt: &Path, cloud: &Path, image: &Path, intrinsics: &Path, spherical: SphericalConfig) -> Result<(), Failure> {
    let (model, store) = load_model(ckpt)?;
    let cloud = data::load_kitti_bin(cloud)?;
    let (rgb, height, width) = data::read_ppm(image)?;
    let scene = Scene {
        cloud,
        image: rgb,
        height,
        width,
        intrinsics: data::read_intrinsics(intrinsics)?,
        gt_pose: PoseQT::identity(),
        spherical,
        seed: 0,
        mode: PerturbMode::LargeRange,
    };
    let input = PreparedInput::new(&scene, model.cfg.point_in_ch)?;
    let (coarse, fine) = model.predict(&store, &input.input())?;
    print_pose("", &fine);
    print_pose("coarse_", &coarse);
    print_pose("fine_", &fine);
    Ok(())
}

fn bench_knn(n: usize, trials: usize, k: usize, seed: u64) -> Result<(), Failure> {
    if n == 0 || trials == 0 || k == 0 {
        return Err(Failure(2, "--n, --trials and --k must be positive".into()));
    }
    let r = knn_exactness_benchmark(n, trials, k, seed)?;
    println!("points {n} trials {trials} k {k}");
    println!("windowed {:.6} s  exhaustive {:.6} s", r.grid_secs, r.brute_secs);
    println!("exactness {:.6} ({}/{})", r.exactness(), r.exact, r.trials);
    if r.exact != r.trials {
        return Err(Failure(4, format!("{} of {} trials disagree", r.trials - r.exact, r.trials)));
    }
    Ok(())
}
