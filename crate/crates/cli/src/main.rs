//! `lfp`: data generation, distance analysis, training, tiled inference,
//! evaluation and the self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfp_core::analysis::{dataset_distance_stats, load_trimap_alpha_pairs};
use lfp_core::config::{AppConfig, Preset};
use lfp_core::datagen::{generate_samples, read_samples, write_sample, AssetFolder, AssetSource};
use lfp_core::inference::infer;
use lfp_core::io::{read_image, read_trimap, write_alpha, write_image};
use lfp_core::metrics::evaluate_dirs;
use lfp_core::model::NetworkModel;
use lfp_core::selfcheck::run_check;
use lfp_core::training::{pretrain_propagating, train_three_stage, Checkpoint, OptimizerState, Stage, TrainSink};
use lfp_core::{LfpError, Result};

/// Stable process exit codes.
mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const GEOMETRY: u8 = 5;
    pub const CHECK_FAILED: u8 = 6;
    pub const DATA: u8 = 7;
}

const DETERMINISTIC_ENV: &str = "LFP_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "lfp", version, about = "Long-range feature propagating matting toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: tiny, small or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one key, e.g. `--set inference.overlap=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for initialization, data generation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize training samples.
    Generate {
        /// Dataset root to create
        #[arg(long)]
        out: PathBuf,
        /// Folder with fg/, alpha/ and bg/ PNGs; procedural scenes when absent.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Number of samples; defaults to `datagen.samples`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Distances from unknown pixels to the nearest known region.
    Analyze {
        /// Dataset root with trimap/ and alpha/.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the report and plot
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the propagating network, then run the three training stages.
    Train {
        /// Dataset written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Skip propagating-network pretraining.
        #[arg(long)]
        skip_pretrain: bool,
    },
    /// Predict alpha, foreground and background by tiled inference.
    Infer {
        /// Image PNG, or a directory of them.
        #[arg(long)]
        image: PathBuf,
        /// Trimap PNG, or a directory with matching file names.
        #[arg(long)]
        trimap: PathBuf,
        /// Directory for alpha/, raw_alpha/, fg/ and bg/
        #[arg(long)]
        out: PathBuf,
        /// Trained parameters; freshly initialized ones when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// SAD, MSE, Grad and Conn over the unknown region.
    Eval {
        /// Predicted alpha PNGs
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth alpha PNGs with matching file names
        #[arg(long)]
        gt: PathBuf,
        /// Trimap PNGs with matching file names
        #[arg(long)]
        trimaps: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient and oracle property suite.
    Check {
        /// Directory for logs and the checkpoint; a temporary one when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &LfpError) -> u8 {
    match e {
        LfpError::Config { .. } | LfpError::Parameter(_) => exit::CONFIG,
        LfpError::Io { .. } | LfpError::Image { .. } => exit::IO,
        LfpError::Geometry(_) | LfpError::Dimension { .. } => exit::GEOMETRY,
        LfpError::Data(_)
        | LfpError::TrimapCode { .. }
        | LfpError::EmptyStatistics { .. }
        | LfpError::Checkpoint(_)
        | LfpError::Range(_)
        | LfpError::Serde(_) => exit::DATA,
        LfpError::ResourceExhausted { .. } => exit::INTERNAL,
    }
}

fn resolve(g: &Global) -> Result<AppConfig> {
    let preset = g.preset.as_deref().map(Preset::parse).transpose()?;
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("core.seed={seed}"));
    }
    if let Ok(v) = std::env::var(DETERMINISTIC_ENV) {
        let on = !matches!(v.as_str(), "" | "0" | "false");
        overrides.push(format!("core.deterministic={on}"));
    }
    AppConfig::load(g.config.as_deref(), preset, &overrides)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| LfpError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| LfpError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn generate(cfg: &AppConfig, out: &Path, assets: Option<&Path>, count: Option<usize>) -> Result<()> {
    let source = match assets {
        Some(root) => AssetSource::Folder(AssetFolder::open(root)?),
        None => cfg.procedural_source(),
    };
    let n = count.unwrap_or(cfg.datagen.samples);
    mkdir(out)?;
    cfg.echo(out)?;
    let samples = generate_samples(&source, n, &cfg.augment_config())?;
    for s in &samples {
        write_sample(out, s)?;
    }
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn analyze(cfg: &AppConfig, data: &Path, out: &Path) -> Result<()> {
    let pairs = load_trimap_alpha_pairs(data)?;
    let stats = dataset_distance_stats(&pairs, cfg.analysis.threshold)?;
    mkdir(out)?;
    cfg.echo(out)?;
    let report = stats.report(cfg.analysis.threshold);
    write_text(&out.join("distance_report.json"), &serde_json::to_string_pretty(&report)?)?;
    stats.save_plot(&out.join("distance_cdf.png"), cfg.analysis.plot_max_distance)?;
    for c in &report.curves {
        let p: Vec<String> = c.percentiles.iter().map(|(q, d)| format!("p{q}={d:.1}")).collect();
        println!("{:<14} {:>8} px  {}", c.name, c.pixels, p.join(" "));
    }
    println!("{} samples used, {} skipped", report.samples_used, report.samples_skipped);
    Ok(())
}

fn train(cfg: &AppConfig, data: &Path, out: &Path, init: Option<&Path>, skip_pretrain: bool) -> Result<()> {
    let samples = read_samples(data)?;
    let net = cfg.network()?;
    let tc = cfg.train_config();
    mkdir(out)?;
    cfg.echo(out)?;
    let ckpt_dir = out.join("checkpoints");
    if tc.checkpoint_every > 0 {
        mkdir(&ckpt_dir)?;
    }
    let log_path = out.join("train.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| LfpError::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut sink = TrainSink {
        log: &mut log,
        checkpoint_dir: (tc.checkpoint_every > 0).then_some(ckpt_dir.as_path()),
    };
    let start = match init {
        Some(p) => Checkpoint::load(p)?,
        None => Checkpoint {
            params: net.init_params(cfg.core.seed)?,
            optimizer: OptimizerState::default(),
            config: cfg.to_json(),
            stage: Stage::Pretrain,
            step: 0,
        },
    };
    let mut summaries = Vec::new();
    let pre = if skip_pretrain || net.propagating().is_none() {
        start
    } else {
        let (c, s) = pretrain_propagating(&net, start.params, &samples, &tc, cfg.to_json(), &mut sink)?;
        c.save(&out.join("pretrain.ckpt"))?;
        summaries.push(s);
        c
    };
    let (done, stages) = train_three_stage(&net, &pre, &samples, &tc, &mut sink)?;
    summaries.extend(stages);
    done.save(&out.join("final.ckpt"))?;
    write_text(&out.join("stages.json"), &serde_json::to_string_pretty(&summaries)?)?;
    for s in &summaries {
        println!(
            "{:<9} {:>6} steps  loss {} -> {}",
            s.stage.name(),
            s.steps,
            s.first_loss.map_or("-".into(), |v| format!("{v:.5}")),
            s.last_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| LfpError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn run_infer(cfg: &AppConfig, image: &Path, trimap: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let net = cfg.network()?;
    let params = match checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            c.params.check_layout(&net.specs())?;
            c.params
        }
        None => net.init_params(cfg.core.seed)?,
    };
    let model = NetworkModel { net, params };
    let jobs: Vec<(PathBuf, PathBuf, String)> = if image.is_dir() {
        png_names(image)?
            .into_iter()
            .map(|n| (image.join(&n), trimap.join(&n), n))
            .collect()
    } else {
        let name = image.file_name().map_or("alpha.png".into(), |n| n.to_string_lossy().into_owned());
        vec![(image.to_path_buf(), trimap.to_path_buf(), name)]
    };
    if jobs.is_empty() {
        return Err(LfpError::Data(format!("no PNG images under {}", image.display())));
    }
    for d in ["alpha", "raw_alpha", "fg", "bg"] {
        mkdir(&out.join(d))?;
    }
    cfg.echo(out)?;
    for (ip, tp, name) in jobs {
        let img = read_image(&ip)?;
        let tri = read_trimap(&tp)?;
        if img.dims() != tri.dims() {
            return Err(LfpError::Geometry(format!(
                "{} is {:?} but {} is {:?}",
                ip.display(),
                img.dims(),
                tp.display(),
                tri.dims()
            )));
        }
        let o = infer(&img, &tri, &model, &cfg.inference)?;
        write_alpha(out.join("alpha").join(&name), &o.alpha)?;
        write_alpha(out.join("raw_alpha").join(&name), &o.raw_alpha)?;
        write_image(out.join("fg").join(&name), &o.fg)?;
        write_image(out.join("bg").join(&name), &o.bg)?;
        println!("{name}: {} tiles, {} evaluated", o.tiles, o.evaluated);
    }
    Ok(())
}

fn eval(pred: &Path, gt: &Path, trimaps: &Path, out: Option<&Path>) -> Result<()> {
    let report = evaluate_dirs(pred, gt, trimaps)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn check(cfg: &AppConfig, out: Option<&Path>) -> Result<bool> {
    let tmp;
    let dir = match out {
        Some(p) => p,
        None => {
            tmp = tempfile::tempdir().map_err(|e| LfpError::Io {
                path: std::env::temp_dir(),
                source: e,
            })?;
            tmp.path()
        }
    };
    mkdir(dir)?;
    cfg.echo(dir)?;
    let report = run_check(cfg, dir)?;
    for r in &report.results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = resolve(&cli.global)?;
    if cfg.core.deterministic {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Generate { out, assets, count } => generate(&cfg, &out, assets.as_deref(), count)?,
        Command::Analyze { data, out } => analyze(&cfg, &data, &out)?,
        Command::Train {
            data,
            out,
            init,
            skip_pretrain,
        } => train(&cfg, &data, &out, init.as_deref(), skip_pretrain)?,
        Command::Infer {
            image,
            trimap,
            out,
            checkpoint,
        } => run_infer(&cfg, &image, &trimap, &out, checkpoint.as_deref())?,
        Command::Eval { pred, gt, trimaps, out } => eval(&pred, &gt, &trimaps, out.as_deref())?,
        Command::Check { out } => {
            if !check(&cfg, out.as_deref())? {
                return Ok(exit::CHECK_FAILED);
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
