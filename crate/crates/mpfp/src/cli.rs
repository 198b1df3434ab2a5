//! The `mpfp` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mpfp_core::fusion::{FusionRule, FusionSpec};
use mpfp_core::metrics::Interpolation;
use mpfp_core::pyramid::{neck_parameters, scale_config, Model, Neck, SCALE_TABLE};
use serde::Serialize;

use crate::bench::{self, BenchSpec};
use crate::config::RunConfig;
use crate::eval::{evaluate_split, write_outputs};
use crate::gradsuite::{self, SuiteOptions};
use crate::synth::{self, Split};
use crate::train::{log_csv, train};
use crate::{checkpoint, Error};

#[derive(Debug, Parser)]
#[command(name = "mpfp", version, about = "Weakly supervised detection with multiple-patch losses and cross-wise pyramids")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compound scaling coefficient, 0 through 6.
    #[arg(long, global = true)]
    pub psi: Option<u8>,
    #[arg(long, global = true, value_parser = parse_fusion)]
    pub fusion: Option<FusionRule>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    Synth,
    /// Train on the dataset, then evaluate on its test split.
    Train,
    /// Evaluate the checkpoint in the output directory on the test split.
    Eval,
    /// Time the fusion kernels.
    FuseBench {
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Print the compound scaling table with neck parameter counts.
    ScaleTable,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Random instances per op kind.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

fn parse_fusion(s: &str) -> Result<FusionRule, String> {
    s.parse().map_err(|e: mpfp_core::Error| e.to_string())
}

/// Failures sorted by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

/// Config file, then flags.
pub fn effective_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e),
            other => Failure::Usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = g.psi {
        cfg.psi = p;
    }
    if let Some(f) = g.fusion {
        cfg.fusion = f;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

fn interpolation(cfg: &RunConfig) -> Interpolation {
    if cfg.eleven_point {
        Interpolation::ElevenPoint
    } else {
        Interpolation::AllPoints
    }
}

#[derive(Serialize)]
struct ScaleRow {
    psi: u8,
    input_size: usize,
    width: usize,
    depth: usize,
    cross_wise_neck_parameters: usize,
    baseline_neck_parameters: usize,
}

fn scale_table(cfg: &RunConfig, out: &mut impl std::io::Write) -> crate::Result<()> {
    let spec = FusionSpec {
        theta: cfg.theta,
        ..FusionSpec::new(cfg.fusion)
    };
    let mut rows = Vec::with_capacity(SCALE_TABLE.len());
    for psi in 0..SCALE_TABLE.len() as u8 {
        let p = scale_config(psi)?;
        rows.push(ScaleRow {
            psi,
            input_size: p.input_size,
            width: p.width,
            depth: p.depth,
            cross_wise_neck_parameters: neck_parameters(&p, Neck::CrossWise, &spec)?,
            baseline_neck_parameters: neck_parameters(&p, Neck::Baseline, &spec)?,
        });
    }
    let text = serde_json::to_string_pretty(&rows)?;
    writeln!(out, "{text}").map_err(io(Path::new("<stdout>")))?;
    write_file(&cfg.out.join("scale_table.json"), text.as_bytes())?;
    let model = Model::build(cfg.model_config(cfg.synth.classes.len(), cfg.synth.image_side)?)?;
    let graph = serde_json::json!({ "config": cfg, "summary": model.summary() });
    write_file(&cfg.out.join("graph.json"), &serde_json::to_vec_pretty(&graph)?)
}

fn run_command(cmd: &Command, cfg: &RunConfig, out: &mut impl std::io::Write) -> Result<(), Failure> {
    let say = |out: &mut dyn std::io::Write, s: String| writeln!(out, "{s}").map_err(io(Path::new("<stdout>")));
    match cmd {
        Command::Synth => {
            let index = synth::generate(&cfg.synth, &cfg.out)?;
            say(out, format!("wrote {} images to {}", index.images.len(), cfg.out.display()))?;
        }
        Command::Train => {
            let data = synth::load(&cfg.dataset)?;
            write_file(&cfg.out.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;
            let ckpt = cfg.out.join("checkpoint");
            let outcome = train(cfg, &data, Some(&ckpt), |epoch, recs| {
                let loss: f64 = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len().max(1) as f64;
                eprintln!("epoch {epoch}: mean batch loss {loss:.6}");
            })?;
            write_file(&cfg.out.join("loss_log.csv"), log_csv(&outcome.log).as_bytes())?;
            let ev = evaluate_split(&outcome.model, &outcome.params, &data, Split::Test, cfg.nms_iou, interpolation(cfg))?;
            write_outputs(&cfg.out, &data, &ev)?;
            say(out, format!("test mAP@0.5 {:.4}", ev.metrics.map))?;
        }
        Command::Eval => {
            let data = synth::load(&cfg.dataset)?;
            let (params, _) = checkpoint::load(&cfg.out.join("checkpoint"))?;
            let model = Model::build(cfg.model_config(data.classes(), data.index.spec.image_side)?)?;
            if params.names() != model.init_params(0).names() {
                return Err(Failure::Runtime(Error::Corrupt {
                    path: cfg.out.join("checkpoint"),
                    detail: "parameters do not match the configured model".into(),
                }));
            }
            let ev = evaluate_split(&model, &params, &data, Split::Test, cfg.nms_iou, interpolation(cfg))?;
            write_outputs(&cfg.out, &data, &ev)?;
            say(out, format!("test mAP@0.5 {:.4}", ev.metrics.map))?;
        }
        Command::FuseBench { reps, channels, side } => {
            if *reps == 0 || *channels == 0 || *side == 0 {
                return Err(Failure::Usage("reps, channels and side must be positive".into()));
            }
            let rows = bench::run(&BenchSpec {
                reps: *reps,
                channels: *channels,
                side: *side,
                seed: cfg.seed,
                ..BenchSpec::default()
            })?;
            let csv = bench::to_csv(&rows);
            write_file(&cfg.out.join("fuse_bench.csv"), csv.as_bytes())?;
            say(out, csv.trim_end().to_string())?;
            if let Some(r) = bench::instant_over_softmax(&rows) {
                say(out, format!("instant/softmax median ratio {r:.3}"))?;
            }
        }
        Command::ScaleTable => scale_table(cfg, out)?,
        Command::Gradcheck { trials } => {
            let entries = gradsuite::run_all(&SuiteOptions {
                trials: *trials,
                seed: cfg.seed,
                ..SuiteOptions::default()
            })?;
            for e in &entries {
                say(
                    out,
                    format!(
                        "{} {:<24} max rel error {:.3e} (< {:.0e}), {} checked, {} skipped",
                        if e.passed { "PASS" } else { "FAIL" },
                        e.name,
                        e.max_rel_error,
                        e.tolerance,
                        e.checked,
                        e.skipped
                    ),
                )?;
            }
            write_file(&cfg.out.join("gradcheck.json"), &serde_json::to_vec_pretty(&entries)?)?;
            let failed = entries.iter().filter(|e| !e.passed).count();
            if failed > 0 {
                return Err(Failure::Runtime(Error::Gradcheck(format!("{failed} checks failed"))));
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut impl std::io::Write, err: &mut impl std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = effective_config(&cli.global).and_then(|mut cfg| {
        // `synth` writes the dataset itself, so its output is the dataset.
        if matches!(cli.command, Command::Synth) && cli.global.out.is_none() {
            cfg.out = cfg.dataset.clone();
        }
        if cli.global.dump_config {
            let text = serde_json::to_string_pretty(&cfg).map_err(Error::from)?;
            writeln!(out, "{text}").map_err(|e| Failure::Runtime(io(Path::new("<stdout>"))(e)))?;
            return Ok(());
        }
        run_command(&cli.command, &cfg, out)
    });
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "{f}");
            f.exit_code()
        }
    }
}
