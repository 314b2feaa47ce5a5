//! Command line front end: dataset synthesis, training, cross-validation,
//! prediction, and loss-map export.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or data error,
//! 3 numeric failure (non-finite loss, degenerate statistics). Every command
//! that produces an output directory writes a `run.lock` with the canonical
//! configuration, and directories appear atomically (built under a temporary
//! name, then renamed).

use clap::{Args, Parser, Subcommand};
use lumipower_core::checkpoint::{load_checkpoint, save_checkpoint};
use lumipower_core::data::{load_dataset, load_manifest, preprocess_image, write_folds, LoadedDataset};
use lumipower_core::error::{Error, Result};
use lumipower_core::eval::{
    mean_predictor_rows, run_cross_validation, summarize, variant_name, write_scatter,
    write_summary, CvOutcome,
};
use lumipower_core::model::{HeadKind, ModelSpec, ParamSet};
use lumipower_core::powermap::{cell_loss_table, export_map, total_relative_loss, CellGrid};
use lumipower_core::runconfig::{Precision, RunConfig};
use lumipower_core::synth::generate_dataset;
use lumipower_core::tensor::{Element, Tape};
use lumipower_core::train::train_model;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lumipower",
    about = "Module power estimation from luminescence images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key=value lines, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `train.epochs=20`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| Error::io(path.clone(), source))?;
                RunConfig::parse_text(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_args(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known per-cell power losses.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory (images/, manifest.csv, cells.csv).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples; overrides `synth.count`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one model on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest CSV; overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint output path. The epoch log goes to `<out>.log.csv`
        /// and the config echo to `<out>.run.lock`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified three-fold cross-validation of both heads plus the
    /// mean-predictor baseline.
    Cv {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest CSV; overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; overrides `out.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict relative and absolute power for one image.
    Predict {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Module image (16-bit grayscale PNG or PGM).
        #[arg(long)]
        image: PathBuf,
        /// Nominal module power in watt-peak.
        #[arg(long, value_name = "WP")]
        p_nom: f64,
    },
    /// Export the per-cell power-loss map for one image.
    Map {
        /// Checkpoint file (must hold a regression-map model).
        #[arg(long)]
        ckpt: PathBuf,
        /// Module image (16-bit grayscale PNG or PGM).
        #[arg(long)]
        image: PathBuf,
        /// Nominal module power in watt-peak.
        #[arg(long, value_name = "WP")]
        p_nom: f64,
        /// Cell grid as ROWSxCOLS, e.g. 6x10.
        #[arg(long)]
        grid: String,
        /// Output directory (map.csv, map.png, cells.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a finished cross-validation directory.
    Report {
        /// Directory written by `cv`.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; --help and --version
            // exit 0, everything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_numeric() { 3 } else { 2 });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, n } => {
            let mut cfg = config.load()?;
            if let Some(n) = n {
                cfg.synth_count = n;
            }
            cmd_synth(&cfg, &out)
        }
        Command::Train { config, manifest, out } => {
            let mut cfg = config.load()?;
            if let Some(m) = manifest {
                cfg.data_manifest = m.to_string_lossy().into_owned();
            }
            match cfg.train_precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &out),
                Precision::F64 => cmd_train::<f64>(&cfg, &out),
            }
        }
        Command::Cv { config, manifest, out } => {
            let mut cfg = config.load()?;
            if let Some(m) = manifest {
                cfg.data_manifest = m.to_string_lossy().into_owned();
            }
            if let Some(o) = out {
                cfg.out_dir = o.to_string_lossy().into_owned();
            }
            match cfg.train_precision {
                Precision::F32 => cmd_cv::<f32>(&cfg),
                Precision::F64 => cmd_cv::<f64>(&cfg),
            }
        }
        Command::Predict { ckpt, image, p_nom } => cmd_predict(&ckpt, &image, p_nom),
        Command::Map { ckpt, image, p_nom, grid, out } => {
            cmd_map(&ckpt, &image, p_nom, &grid, &out)
        }
        Command::Report { dir } => cmd_report(&dir),
    }
}

/// Builds `dir` atomically: `fill` populates a temporary sibling, which is
/// renamed into place on success. Refuses to replace anything but a previous
/// run's output.
fn build_dir(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if dir.exists() {
        if !dir.join("run.lock").exists() {
            return Err(Error::Config(format!(
                "{} already exists and is not a previous run's output; refusing to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().ok_or_else(|| {
        Error::Config(format!("{} is not a valid output directory name", dir.display()))
    })?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let filled = fill(&tmp);
    if let Err(e) = filled {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn write_lock(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("run.lock");
    std::fs::write(&path, cfg.canonical_text()).map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth_config()?;
    build_dir(out, |tmp| {
        let manifest = generate_dataset(&synth, tmp)?;
        write_lock(tmp, cfg)?;
        println!(
            "wrote {} samples to {}",
            manifest.entries.len(),
            out.display()
        );
        Ok(())
    })
}

fn load_data(cfg: &RunConfig) -> Result<LoadedDataset> {
    if cfg.data_manifest.is_empty() {
        return Err(Error::Config(
            "no dataset given: pass --manifest or set data.manifest".into(),
        ));
    }
    let manifest = load_manifest(Path::new(&cfg.data_manifest))?;
    load_dataset(&manifest)
}

fn cmd_train<T: Element>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.model_spec()?;
    let train_cfg = cfg.train_config();
    let data = load_data(cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut set: ParamSet<T> = spec.init_params(train_cfg.seed);
    let report = train_model(&spec, &mut set, &data, &all, &[], &train_cfg)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(out, cfg, &set)?;
    let log = sibling(out, ".log.csv");
    report.write_csv(&log)?;
    let lock = sibling(out, ".run.lock");
    std::fs::write(&lock, cfg.canonical_text()).map_err(|e| Error::io(&lock, e))?;
    if let Some(stats) = report.epochs.last() {
        println!("final train loss {}", stats.train_loss);
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_cv<T: Element>(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let train_cfg = cfg.train_config();
    let out = PathBuf::from(&cfg.out_dir);

    let mut variants: Vec<(HeadKind, CvOutcome)> = Vec::new();
    for head in [HeadKind::EmbeddingLinear, HeadKind::RegressionMap] {
        let mut spec = cfg.model_spec()?;
        spec.head = head;
        let outcome = run_cross_validation::<T>(&spec, &data, &train_cfg, cfg.cv_fold_seed)?;
        variants.push((head, outcome));
    }

    build_dir(&out, |tmp| {
        let folds = &variants[0].1.folds;
        let baseline = mean_predictor_rows(&data, folds);
        let mut summaries = vec![summarize("baseline", &baseline)];
        write_scatter(&tmp.join("scatter_baseline.csv"), &baseline)?;
        for (head, outcome) in &variants {
            let name = variant_name(*head);
            summaries.push(summarize(name, &outcome.rows));
            write_scatter(&tmp.join(format!("scatter_{name}.csv")), &outcome.rows)?;
            for (fold, report) in outcome.fold_reports.iter().enumerate() {
                report.write_csv(&tmp.join(format!("train_{name}_fold{fold}.csv")))?;
            }
        }
        write_summary(&tmp.join("summary.csv"), &summaries)?;
        write_folds(&tmp.join("folds.csv"), folds)?;
        write_lock(tmp, cfg)?;
        for s in &summaries {
            println!(
                "{:>18}: MAE {:.2}% ({:.2} Wp), RMSE {:.2}% ({:.2} Wp)",
                s.variant, s.mae_pct, s.mae_wp, s.rmse_pct, s.rmse_wp
            );
        }
        println!("results written to {}", out.display());
        Ok(())
    })
}

/// Loads a checkpoint and preprocesses `image` to the stored input size.
/// Inference runs in 64-bit regardless of the stored precision; widening is
/// exact.
fn forward_image(
    ckpt: &Path,
    image: &Path,
) -> Result<(RunConfig, ModelSpec, f64, Option<(Vec<f64>, (usize, usize))>)> {
    let (cfg, set): (RunConfig, ParamSet<f64>) = load_checkpoint(ckpt)?;
    let spec = cfg.model_spec()?;
    let img = preprocess_image(image, spec.in_hw)?;
    let mut tape = Tape::<f64>::new();
    tape.set_grad_enabled(false);
    let ids = set.bind(&mut tape)?;
    let x = tape.leaf(img, &[1, 1, spec.in_hw.0, spec.in_hw.1], false)?;
    let mut buffers = set.buffers.clone();
    let out = spec.forward(&mut tape, &ids, &mut buffers, x, false)?;
    let y = tape.data(out.y_hat)[0];
    let map = out.map.map(|m| {
        let s = tape.shape(m);
        (tape.data(m).to_vec(), (s[2], s[3]))
    });
    Ok((cfg, spec, y, map))
}

fn cmd_predict(ckpt: &Path, image: &Path, p_nom: f64) -> Result<()> {
    if !(p_nom.is_finite() && p_nom > 0.0) {
        return Err(Error::Config(format!("nominal power {p_nom} must be positive")));
    }
    let (_, _, y, _) = forward_image(ckpt, image)?;
    println!("y_hat = {y:.6}");
    println!("p_mpp = {:.3} Wp", y * p_nom);
    Ok(())
}

fn parse_grid(grid: &str) -> Result<CellGrid> {
    let (r, c) = grid
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("grid {grid:?} must look like 6x10")))?;
    let rows = r.trim().parse().map_err(|_| Error::Config(format!("bad grid rows {r:?}")))?;
    let cols = c.trim().parse().map_err(|_| Error::Config(format!("bad grid cols {c:?}")))?;
    CellGrid::new(rows, cols)
}

fn cmd_map(ckpt: &Path, image: &Path, p_nom: f64, grid: &str, out: &Path) -> Result<()> {
    if !(p_nom.is_finite() && p_nom > 0.0) {
        return Err(Error::Config(format!("nominal power {p_nom} must be positive")));
    }
    let grid = parse_grid(grid)?;
    let (cfg, _, y, map) = forward_image(ckpt, image)?;
    let (map, (mh, mw)) = map.ok_or_else(|| {
        Error::Config("this checkpoint holds an embedding-head model without a loss map".into())
    })?;
    build_dir(out, |tmp| {
        export_map(tmp, &map, mh, mw, grid, p_nom, 32)?;
        write_lock(tmp, &cfg)?;
        let total = total_relative_loss(&map);
        println!("y_hat = {y:.6}");
        println!("p_mpp = {:.3} Wp", y * p_nom);
        println!("total predicted loss = {:.3} Wp", total * p_nom);
        let mut cells = cell_loss_table(&map, mh, mw, grid, p_nom)?;
        cells.sort_by(|a, b| b.loss_wp.total_cmp(&a.loss_wp));
        for c in cells.iter().take(3).filter(|c| c.loss_wp > 0.0) {
            println!("  worst cell {}{}: {:.3} Wp", c.row_label, c.col_label, c.loss_wp);
        }
        println!("map written to {}", out.display());
        Ok(())
    })
}

fn cmd_report(dir: &Path) -> Result<()> {
    let summary = dir.join("summary.csv");
    let mut rdr = csv::Reader::from_path(&summary)
        .map_err(|source| Error::Csv { path: summary.clone(), source })?;
    let headers = rdr
        .headers()
        .map_err(|source| Error::Csv { path: summary.clone(), source })?
        .clone();
    println!("cross-validation summary ({})", dir.display());
    let mut printed = 0;
    for record in rdr.records() {
        let record = record.map_err(|source| Error::Csv { path: summary.clone(), source })?;
        let get = |name: &str| -> f64 {
            headers
                .iter()
                .position(|h| h == name)
                .and_then(|i| record.get(i))
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::NAN)
        };
        let variant = record.get(0).unwrap_or("?");
        println!(
            "  {variant:>18}: MAE {:.2}% +- {:.2} ({:.2} Wp +- {:.2}), RMSE {:.2}% ({:.2} Wp)",
            get("mae_pct"),
            get("mae_std_pct"),
            get("mae_wp"),
            get("mae_std_wp"),
            get("rmse_pct"),
            get("rmse_wp"),
        );
        printed += 1;
    }
    if printed == 0 {
        return Err(Error::Data(format!("{} holds no summary rows", summary.display())));
    }
    let lock = dir.join("run.lock");
    if let Ok(text) = std::fs::read_to_string(&lock) {
        let interesting = ["train.epochs", "train.lr", "synth.count", "model.head"];
        let picked: Vec<&str> = text
            .lines()
            .filter(|l| interesting.iter().any(|k| l.starts_with(k)))
            .collect();
        if !picked.is_empty() {
            println!("  config: {}", picked.join(", "));
        }
    }
    Ok(())
}
