use std::fs;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dragnoise_core::bench::{run_case, BenchCase, BenchConfig};
use dragnoise_core::data::gen_dataset;
use dragnoise_core::diffusion::{train, Diffusion, TrainConfig};
use dragnoise_core::drag::{DragEngine, DragInstruction, DragParams, DragStatus};
use dragnoise_core::probe::{paired_t_test, probe_report, ProbeConfig};
use dragnoise_core::unet::{FeatureTap, UNet};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, save_ddim_state};
use crate::edit::{parse_points, run_drag};
use crate::image_io::{load_image, save_image, to_mask};
use crate::server;

#[derive(Debug, Parser)]
#[command(
    name = "dragnoise",
    version,
    about = "Drag editing on a toy ring diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy model on generated rings.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Unconditional DDIM sample.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// DDIM inversion to step `t`, written as a DNCK state file.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 35)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drag edit. Exit code 0 when converged, 2 when max steps ran out.
    Drag(DragArgs),
    /// Feature-replacement study over held-out rings.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "EncoderBlock1,Bottleneck"
        )]
        taps: Vec<FeatureTap>,
        #[arg(long = "t0", value_delimiter = ',', default_value = "45,35,25")]
        t0: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        images: usize,
        /// Dataset seed for the held-out images.
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ring-shrinking benchmark, each case with and without propagation.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        anchors: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Where finished results are also written as PNG.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Drag jobs allowed to run at once.
        #[arg(long, default_value_t = 2)]
        max_jobs: usize,
    },
}

#[derive(Debug, clap::Args)]
pub struct DragArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `x1,y1:x2,y2;...` anchor:objective pairs in pixels.
    #[arg(long)]
    pub points: String,
    /// Image where nonzero pixels are editable.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 35)]
    pub t_edit: usize,
    #[arg(long, default_value_t = 10)]
    pub t_refine: usize,
    /// Override only at `t_edit`.
    #[arg(long)]
    pub no_propagate: bool,
    /// Optimized tap.
    #[arg(long, default_value = "Bottleneck")]
    pub tap: FeatureTap,
    #[arg(long, default_value = "DecoderBlock3")]
    pub supervision_tap: FeatureTap,
    #[arg(long, default_value_t = 80)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub r1: usize,
    #[arg(long, default_value_t = 3)]
    pub r2: usize,
    #[arg(long, default_value_t = 1.0)]
    pub stop_dist: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report with metrics, losses and trajectory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print one progress line per iteration to stderr.
    #[arg(long)]
    pub progress: bool,
}

impl DragArgs {
    pub fn params(&self) -> DragParams {
        DragParams {
            t_edit: self.t_edit,
            t_refine: self.t_refine,
            r1: self.r1,
            r2: self.r2,
            lambda: self.lambda,
            lr: self.lr,
            max_steps: self.max_steps,
            stop_dist_px: self.stop_dist,
            supervision_tap: self.supervision_tap,
            optimized_tap: self.tap,
            propagate: !self.no_propagate,
        }
    }
}

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Parse `std::env::args` and run. Usage errors exit with 1 so that 2 keeps
/// meaning "drag hit max steps".
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode, BoxError> {
    match cli.command {
        Command::Train { config, out, log } => cmd_train(config.as_deref(), &out, log.as_deref()),
        Command::Sample { ckpt, seed, out } => {
            let net = load_checkpoint(&ckpt)?;
            let s = net.config.image_size;
            let x =
                Diffusion::default().generate(&net, seed, &[1, net.config.in_channels, s, s])?;
            save_image(&x, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Invert {
            ckpt,
            image,
            t,
            out,
        } => {
            let net = load_checkpoint(&ckpt)?;
            let x0 = load_image(&image)?;
            let z = Diffusion::default().invert(&net, &x0, t)?;
            save_ddim_state(&z, t, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Drag(args) => cmd_drag(&args),
        Command::Probe {
            ckpt,
            taps,
            t0,
            images,
            seed,
            out,
        } => cmd_probe(&ckpt, taps, t0, images, seed, &out),
        Command::Bench {
            ckpt,
            cases,
            seed,
            anchors,
            out,
        } => cmd_bench(&ckpt, cases, seed, anchors, &out),
        Command::Serve {
            ckpt,
            port,
            host,
            data_dir,
            max_jobs,
        } => {
            let net = load_checkpoint(&ckpt)?;
            let model = ckpt
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let state = server::AppState::new(net, model, max_jobs, data_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(state, SocketAddr::new(host, port)))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_train(config: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<ExitCode, BoxError> {
    let cfg: TrainConfig = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("log.jsonl"));
    let mut log_file = fs::File::create(&log_path)?;
    let data = gen_dataset::<f32>(cfg.dataset_size, cfg.dataset_seed, cfg.arch.image_size)?;
    let net = train::<f32, BoxError>(&cfg, &data, |rec, trainer| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log_file, "{line}")?;
        eprintln!("{line}");
        let step = trainer.steps_taken();
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            let p = out.with_extension(format!("step{step}.dnck"));
            save_checkpoint(&trainer.net, &p)?;
        }
        Ok(())
    })?;
    save_checkpoint(&net, out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_drag(args: &DragArgs) -> Result<ExitCode, BoxError> {
    let pairs = parse_points(&args.points)?;
    let net = load_checkpoint(&args.ckpt)?;
    let image = load_image(&args.image)?;
    let mut instruction = DragInstruction::new(pairs);
    if let Some(m) = &args.mask {
        instruction = instruction.with_mask(to_mask(&load_image(m)?)?);
    }
    let diffusion = Diffusion::default();
    let (edited, report) = run_drag(
        &net,
        &diffusion,
        &image,
        &instruction,
        &args.params(),
        |_| {},
        |p| {
            if args.progress {
                eprintln!("{}", serde_json::to_string(p).expect("progress serializes"));
            }
        },
    )?;
    save_image(&edited, &args.out)?;
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    eprintln!(
        "{} after {} iterations, md {:.3}, fidelity {:.5}",
        report.status.as_str(),
        report.iterations,
        report.md,
        report.fidelity
    );
    Ok(match report.status {
        DragStatus::Converged => ExitCode::SUCCESS,
        _ => ExitCode::from(2),
    })
}

fn cmd_probe(
    ckpt: &Path,
    taps: Vec<FeatureTap>,
    t0: Vec<usize>,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<ExitCode, BoxError> {
    let net = load_checkpoint(ckpt)?;
    let diffusion = Diffusion::default();
    let data = gen_dataset::<f32>(n, seed, net.config.image_size)?;
    fs::create_dir_all(out)?;
    let mut records = fs::File::create(out.join("records.jsonl"))?;
    let config = ProbeConfig {
        taps: taps.clone(),
        start_steps: t0.clone(),
        keep_images: true,
    };
    let mut io_err = None;
    let result = probe_report(&net, &diffusion, &data.images, &config, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(records, "{line}") {
            io_err.get_or_insert(e);
        }
        eprintln!("{line}");
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    for (id, x) in data.images.iter().enumerate() {
        save_image(x, &out.join(format!("img{id:02}_input.pgm")))?;
    }
    for (id, tap, t0, img) in &result.images {
        let name = match tap {
            Some(tap) => format!("img{id:02}_{tap}_t{t0}.pgm"),
            None => format!("img{id:02}_baseline.pgm"),
        };
        save_image(img, &out.join(name))?;
    }
    let mut comparisons = Vec::new();
    if n >= 2 {
        for &tap in &taps {
            let mut steps = t0.clone();
            steps.sort_unstable();
            for w in steps.windows(2) {
                let test = paired_t_test(&result.errors(tap, w[0]), &result.errors(tap, w[1]))?;
                comparisons
                    .push(json!({"tap": tap, "lower_t0": w[0], "higher_t0": w[1], "test": test}));
            }
        }
    }
    let summary = json!({
        "summary": result.summary,
        "baseline_mse": result.baseline,
        "t0_comparisons": comparisons,
    });
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for s in &result.summary {
        eprintln!(
            "{:>14} t0={:>2}: mse {:.5} ± {:.5} (n={})",
            s.tap.to_string(),
            s.t0,
            s.mean,
            s.std,
            s.n
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(
    ckpt: &Path,
    cases: usize,
    seed: u64,
    anchors: usize,
    out: &Path,
) -> Result<ExitCode, BoxError> {
    let net: UNet<f32> = load_checkpoint(ckpt)?;
    let diffusion = Diffusion::default();
    let engine = DragEngine::new(&net, &diffusion);
    let cfg = BenchConfig {
        anchors,
        ..BenchConfig::default()
    };
    let mut file = fs::File::create(out)?;
    for i in 0..cases as u64 {
        let case = BenchCase::generate(seed + i, net.config.image_size, &cfg)?;
        for propagate in [true, false] {
            let params = DragParams {
                propagate,
                ..DragParams::default()
            };
            let (rec, _) = run_case(&engine, &case, &params)?;
            let line = serde_json::to_string(&rec)?;
            writeln!(file, "{line}")?;
            eprintln!("{line}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
