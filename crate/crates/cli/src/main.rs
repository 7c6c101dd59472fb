mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quadra::autobuild::{self, parse_config, replace_layers, DatasetId, ModelConfig, ReduceOptions, Removal};
use quadra::data::{self, DataBundle, Dataset};
use quadra::diagnostics::{activation_attention, collect_gradient_stats, emit_csv, emit_gradient_stats, emit_pgm};
use quadra::quadneuron::NeuronFamily;
use quadra::tensor::Tensor;
use quadra::trainer::{
    self, load_checkpoint, profile_memory, save_checkpoint, write_metrics_csv, BackpropMode, TrainOptions,
};
use quadra::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "quadra",
    version,
    about = "Train, convert, profile and inspect quadratic networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "QUADRA_OUT")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and gradient statistics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the dataset files (unused for points2d).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, default_value = "hybrid")]
        mode: BackpropMode,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only the first N samples of each split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Convert a first-order config to quadratic neurons, optionally
    /// training it and removing layers by RI.
    Convert {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        family: NeuronFamily,
        #[arg(long)]
        reduce: bool,
        /// Largest tolerated accuracy drop while reducing.
        #[arg(long, default_value_t = 0.01)]
        budget: f64,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Project AUTO and HYBRID cached bytes for a config.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Flag modes whose peak exceeds this many bytes.
        #[arg(long)]
        budget_bytes: Option<usize>,
        /// Also write profile.csv here.
        #[arg(long, env = "QUADRA_OUT")]
        out_dir: Option<PathBuf>,
    },
    /// Emit attention maps and gradient statistics from a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-split image index; repeatable.
        #[arg(long)]
        attention: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Use a constant image with this value instead of dataset images.
        #[arg(long)]
        constant: Option<f64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Samples used for the gradient statistics.
        #[arg(long, default_value_t = 128)]
        stats_batch: usize,
        #[command(flatten)]
        out: OutDir,
    },
}

/// Exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Numeric { .. } | Error::DegreeViolation { .. } => 2,
        Error::Io { .. } | Error::Ingest { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (component, result) = match cli.command {
        Command::Train {
            config,
            data_dir,
            out,
            mode,
            seed,
            limit,
        } => (
            "train",
            cmd_train(&config, data_dir.as_deref(), &out.out_dir, mode, seed, limit),
        ),
        Command::Convert {
            config,
            family,
            reduce,
            budget,
            data_dir,
            limit,
            out,
        } => (
            "convert",
            cmd_convert(
                &config,
                family,
                reduce,
                budget,
                data_dir.as_deref(),
                limit,
                &out.out_dir,
            ),
        ),
        Command::Profile {
            config,
            batch,
            budget_bytes,
            out_dir,
        } => ("profile", cmd_profile(&config, batch, budget_bytes, out_dir.as_deref())),
        Command::Inspect {
            checkpoint,
            attention,
            layer,
            constant,
            data_dir,
            stats_batch,
            out,
        } => (
            "inspect",
            cmd_inspect(
                &checkpoint,
                &attention,
                layer,
                constant,
                data_dir.as_deref(),
                stats_batch,
                &out.out_dir,
            ),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quadra {component}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_config(path: &Path) -> Result<ModelConfig, Error> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn data_dir(id: DatasetId, dir: Option<&Path>) -> Result<PathBuf, Error> {
    match (id, dir) {
        (DatasetId::Points2d, d) => Ok(d.map(Path::to_path_buf).unwrap_or_default()),
        (_, Some(d)) => Ok(d.to_path_buf()),
        (id, None) => Err(Error::Config(format!("dataset {} needs --data-dir", id.tag()))),
    }
}

fn load_data(cfg: &ModelConfig, dir: &Path, limit: Option<usize>) -> Result<DataBundle, Error> {
    let (train, test) = data::load_raw(cfg.train.dataset, dir, cfg.train.seed)?;
    let cut = |d: Dataset| match limit {
        Some(n) if n < d.len() => d.take(n),
        _ => d,
    };
    Ok(DataBundle::new(cut(train), cut(test)))
}

fn cmd_train(
    config: &Path,
    dir: Option<&Path>,
    out: &Path,
    mode: BackpropMode,
    seed: Option<u64>,
    limit: Option<usize>,
) -> Result<(), Error> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = data_dir(cfg.train.dataset, dir)?;
    let data = load_data(&cfg, &dir, limit)?;
    create_dir(out)?;
    RunManifest::new(&cfg, mode, &dir, &data, out, limit)?.write(&out.join(manifest::FILE))?;
    let opts = TrainOptions {
        mode,
        ..TrainOptions::default()
    };
    let outcome = trainer::train(&cfg, &data, &opts)?;
    write_metrics_csv(&outcome.history, &out.join("metrics.csv"))?;
    emit_gradient_stats(&outcome.stats, &out.join("stats"))?;
    save_checkpoint(&outcome.model, &out.join("checkpoint"))?;
    match outcome.diverged {
        Some(e) => {
            log::error!("checkpoint holds the last finite model");
            Err(e)
        }
        None => {
            if let Some(last) = outcome.history.last() {
                log::info!("final test accuracy {:.4}", last.test_acc);
            }
            Ok(())
        }
    }
}

fn cmd_convert(
    config: &Path,
    family: NeuronFamily,
    reduce: bool,
    budget: f64,
    dir: Option<&Path>,
    limit: Option<usize>,
    out: &Path,
) -> Result<(), Error> {
    let cfg = read_config(config)?;
    let converted = replace_layers(&cfg, family)?;
    create_dir(out)?;
    let cfg_path = out.join(format!("{}.cfg", converted.name));
    if !reduce {
        write_file(&cfg_path, converted.to_string())?;
        log::info!("wrote {}", cfg_path.display());
        return Ok(());
    }
    let data = load_data(&converted, &data_dir(converted.train.dataset, dir)?, limit)?;
    let opts = ReduceOptions {
        budget,
        ..ReduceOptions::default()
    };
    let trained = trainer::train(&converted, &data, &opts.train)?;
    if let Some(e) = trained.diverged {
        return Err(e);
    }
    let outcome = autobuild::reduce(&trained.model, &data, &opts)?;
    write_file(&cfg_path, outcome.config.to_string())?;
    let ri_rows = outcome.reports.iter().enumerate().flat_map(|(it, rows)| {
        rows.iter().map(move |r| {
            vec![
                it.to_string(),
                r.rank.to_string(),
                r.layer.to_string(),
                r.p_mpar.to_string(),
                r.p_tlat.to_string(),
                r.delta_acc.to_string(),
                r.ri.to_string(),
            ]
        })
    });
    emit_csv(
        &["iteration", "rank", "layer", "p_mpar", "p_tlat", "delta_acc", "ri"],
        ri_rows,
        &out.join("ri_report.csv"),
    )?;
    emit_csv(
        &Removal::HEADER,
        outcome.removals.iter().map(Removal::record),
        &out.join("removals.csv"),
    )?;
    log::info!(
        "{} -> {} layers, accuracy {:.4} -> {:.4}",
        converted.layers.len(),
        outcome.config.layers.len(),
        outcome.base_accuracy,
        outcome.final_accuracy
    );
    Ok(())
}

fn cmd_profile(config: &Path, batch: usize, budget: Option<usize>, out: Option<&Path>) -> Result<(), Error> {
    let cfg = read_config(config)?;
    let ledger = profile_memory(&cfg, batch)?.with_budget(budget);
    println!("model {} batch {batch}", cfg.name);
    println!("{:>6} {:>14} {:>14}", "unit", "auto_bytes", "hybrid_bytes");
    let mut rows = Vec::new();
    for (i, (a, h)) in ledger.auto.per_layer.iter().zip(&ledger.hybrid.per_layer).enumerate() {
        let unit = if i == cfg.layers.len() {
            "head".to_string()
        } else {
            i.to_string()
        };
        println!("{unit:>6} {a:>14} {h:>14}");
        rows.push(vec![unit, a.to_string(), h.to_string()]);
    }
    println!(
        "{:>6} {:>14} {:>14}",
        "loss", ledger.auto.loss_bytes, ledger.hybrid.loss_bytes
    );
    println!(
        "peak auto {} hybrid {}",
        ledger.auto.peak_bytes, ledger.hybrid.peak_bytes
    );
    if let Some(xb) = &ledger.hybrid_xb {
        println!("peak hybrid keeping only X and B {}", xb.peak_bytes);
    }
    println!("parameter bytes {} (gradients the same)", ledger.param_bytes);
    println!("saving {:.1}%", 100.0 * ledger.saving());
    for mode in [BackpropMode::Auto, BackpropMode::Hybrid] {
        if ledger.over_budget(mode) {
            println!(
                "warning: {mode} peak exceeds the budget of {} bytes",
                budget.unwrap_or(0)
            );
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        rows.push(vec![
            "loss".into(),
            ledger.auto.loss_bytes.to_string(),
            ledger.hybrid.loss_bytes.to_string(),
        ]);
        rows.push(vec![
            "peak".into(),
            ledger.auto.peak_bytes.to_string(),
            ledger.hybrid.peak_bytes.to_string(),
        ]);
        emit_csv(&["unit", "auto_bytes", "hybrid_bytes"], rows, &dir.join("profile.csv"))?;
    }
    Ok(())
}

fn cmd_inspect(
    checkpoint: &Path,
    attention: &[usize],
    layer: usize,
    constant: Option<f64>,
    dir: Option<&Path>,
    stats_batch: usize,
    out: &Path,
) -> Result<(), Error> {
    let model = load_checkpoint(checkpoint, BackpropMode::Hybrid)?;
    let id = model.config.train.dataset;
    let data = match (id, dir) {
        (DatasetId::Points2d, _) | (_, Some(_)) => Some(load_data(&model.config, &data_dir(id, dir)?, None)?),
        _ => None,
    };
    if data.is_none() && constant.is_none() && !attention.is_empty() {
        return Err(Error::Config("--attention needs --data-dir or --constant".into()));
    }
    create_dir(out)?;
    for &idx in attention {
        let image = match (constant, &data) {
            (Some(v), _) => Tensor::full(&id.input_shape(), v),
            (None, Some(d)) => {
                if idx >= d.test.len() {
                    return Err(Error::Input(format!(
                        "image index {idx} out of range ({} test images)",
                        d.test.len()
                    )));
                }
                d.test.batch(&[idx]).0
            }
            (None, None) => unreachable!("checked above"),
        };
        let map = activation_attention(&model, &image, layer, idx)?;
        let path = out.join(map.file_name());
        emit_pgm(&map, &path)?;
        log::info!("wrote {}", path.display());
    }
    match &data {
        Some(d) => {
            let n = stats_batch.clamp(2, d.test.len());
            let idx: Vec<usize> = (0..n).collect();
            let (x, labels) = d.test.batch(&idx);
            let mut m = model.clone();
            let step = m.step(x, &labels)?;
            let rows = collect_gradient_stats(&model, &step.grads, 0);
            emit_gradient_stats(&rows, &out.join("stats"))?;
        }
        None => log::warn!("no dataset available; skipping gradient statistics"),
    }
    Ok(())
}
