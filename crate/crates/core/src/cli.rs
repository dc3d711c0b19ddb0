//! The `lcp` command-line tool. Exit codes: 0 success, 1 usage error,
//! 2 data error.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cellstats::{self, TrainingSetMeta};
use crate::ensemble::{self, EnsembleDataset, SyntheticSpec};
use crate::evalbench::{self, BenchConfig, ErrorReport, HeldoutCase};
use crate::pmc::{self, FieldMethod, LcpMeta, McConfig};
use crate::render::{self, ColormapSpec};
use crate::surrogate::{self, MlpConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "lcp", about = "Level-crossing probability: Monte Carlo, surrogate, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ensemble from a JSON spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed given in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Min-max normalize a dataset over all members and timesteps.
    Normalize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cell means and covariances of one timestep.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo LCP field.
    Pmc {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iso: f64,
        #[arg(long, default_value_t = 8000)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker count; serial when absent.
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a training set from the first timesteps.
    BuildTrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Use timesteps [0, t-train); defaults to every timestep.
        #[arg(long)]
        t_train: Option<usize>,
        #[arg(long, default_value = "0.1:0.9:0.1")]
        isos: String,
        #[arg(long, default_value_t = 8000)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        drop_zero_lcp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a surrogate model.
    Train {
        #[arg(long = "train")]
        train_set: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// k-fold cross-validation, optionally followed by a final model on all samples.
    Cv {
        #[arg(long = "train")]
        train_set: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        final_model: Option<PathBuf>,
    },
    /// Surrogate LCP field.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iso: f64,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time serial MC, parallel MC and the surrogate.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iso: f64,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long, default_value = "1000,2000,4000,8000")]
        r_values: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pixel-wise error between two saved fields.
    Report {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Error versus training-set fraction, evaluated on later timesteps.
    Ablate {
        #[arg(long = "train")]
        train_set: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Evaluate on timesteps [t-train, T).
        #[arg(long)]
        t_train: usize,
        #[arg(long, default_value = "0.1:0.9:0.1")]
        isos: String,
        #[arg(long, default_value_t = 8000)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "0.1:1.0:0.1")]
        fractions: String,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved field to a PPM image.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
}

#[derive(Debug, Args)]
struct TrainOpts {
    /// JSON file with optional "model" (layer widths) and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "train-seed")]
    train_seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: MlpConfig,
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
struct GenFile {
    #[serde(flatten)]
    spec: SyntheticSpec,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

type CliResult<T = ()> = Result<T, CliError>;

trait OrData<T> {
    fn data(self) -> CliResult<T>;
}

impl<T, E: Display> OrData<T> for Result<T, E> {
    fn data(self) -> CliResult<T> {
        self.map_err(|e| CliError::Data(e.to_string()))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runs the tool on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            1
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn parse_range(text: &str) -> CliResult<Vec<f64>> {
    let bad = || usage(format!("expected start:stop:step or a comma list, got {text:?}"));
    if text.contains(',') {
        return text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad());
    }
    let nums = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    match nums.as_slice() {
        [v] => Ok(vec![*v]),
        [start, stop, step] if *step > 0.0 && stop >= start => Ok(cellstats::isovalue_range(*start, *stop, *step)),
        _ => Err(bad()),
    }
}

/// Loads a manifest and normalizes it in memory if needed.
fn load_normalized(path: &Path) -> CliResult<EnsembleDataset> {
    let ds = ensemble::load_dataset(path).data()?;
    if ds.normalized {
        Ok(ds)
    } else {
        ensemble::normalize_global(ds).data()
    }
}

fn local_step(ds: &EnsembleDataset, t: usize) -> CliResult<usize> {
    t.checked_sub(ds.first_timestep)
        .filter(|&l| l < ds.timesteps)
        .ok_or_else(|| {
            CliError::Data(format!(
                "timestep {t} not in dataset range [{}, {})",
                ds.first_timestep,
                ds.first_timestep + ds.timesteps
            ))
        })
}

fn train_configs(opts: &TrainOpts) -> CliResult<(MlpConfig, TrainConfig)> {
    let mut file = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).data()?;
            serde_json::from_str::<TrainFile>(&text).data()?
        }
        None => TrainFile::default(),
    };
    if let Some(e) = opts.epochs {
        file.train.epochs = e;
    }
    if let Some(b) = opts.batch_size {
        file.train.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        file.train.learning_rate = lr;
    }
    if let Some(s) = opts.train_seed {
        file.train.seed = s;
    }
    Ok((file.model, file.train))
}

fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::Gen { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).data()?;
            let g: GenFile = serde_json::from_str(&text).data()?;
            let ds = ensemble::generate_synthetic(&g.spec, seed.unwrap_or(g.seed)).data()?;
            ds.save(&out).data()?;
            println!(
                "wrote {} ({} members x {} steps, {}x{})",
                out.display(),
                ds.members,
                ds.timesteps,
                ds.width,
                ds.height
            );
        }
        Command::Normalize { dataset, out } => {
            let ds = ensemble::normalize_global(ensemble::load_dataset(&dataset).data()?).data()?;
            ds.save(&out).data()?;
            println!("normalized with min {} max {}", ds.norm_min, ds.norm_max);
        }
        Command::Stats { dataset, t, out } => {
            let ds = load_normalized(&dataset)?;
            let grid = cellstats::field_statistics(&ds, local_step(&ds, t)?).data()?;
            let mean_trace = grid.cells.iter().map(|c| c.trace()).sum::<f64>() / grid.len() as f64;
            println!("{}x{} cells, mean covariance trace {mean_trace:.6e}", grid.cells_w, grid.cells_h);
            if let Some(out) = out {
                cellstats::save_stats_grid(&out, &grid, t).data()?;
            }
        }
        Command::Pmc {
            dataset,
            iso,
            r,
            seed,
            parallel,
            t,
            out,
        } => {
            let ds = load_normalized(&dataset)?;
            let grid = cellstats::field_statistics(&ds, local_step(&ds, t)?).data()?;
            let mc = McConfig::new(r, seed);
            mc.validate().map_err(|e| usage(e.to_string()))?;
            let start = Instant::now();
            let (field, method) = match parallel {
                Some(0) => return Err(usage("--parallel needs at least 1 worker")),
                Some(w) => (pmc::lcp_field_parallel(&grid, iso, &mc, w).data()?, FieldMethod::McParallel),
                None => (pmc::lcp_field_serial(&grid, iso, &mc).data()?, FieldMethod::McSerial),
            };
            let elapsed = start.elapsed().as_secs_f64();
            let meta = LcpMeta {
                cells_w: field.cells_w,
                cells_h: field.cells_h,
                isovalue: iso,
                r,
                seed,
                method,
            };
            pmc::save_lcp_field(&out, &field, &meta).data()?;
            println!("wrote {} in {elapsed:.3}s", out.display());
        }
        Command::BuildTrain {
            dataset,
            t_train,
            isos,
            r,
            seed,
            drop_zero_lcp,
            out,
        } => {
            let ds = load_normalized(&dataset)?;
            let isovalues = parse_range(&isos)?;
            let steps: Vec<usize> = (0..t_train.unwrap_or(ds.timesteps).min(ds.timesteps)).collect();
            let mc = McConfig::new(r, seed);
            let mut samples = cellstats::build_training_set(&ds, &steps, &isovalues, &mc).data()?;
            if drop_zero_lcp {
                samples = cellstats::drop_zero_lcp(samples);
            }
            let meta = TrainingSetMeta {
                count: samples.len(),
                isovalues,
                source_manifest: dataset.display().to_string(),
                mc_seed: seed,
                r,
            };
            cellstats::save_training_set(&out, &samples, &meta).data()?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train {
            train_set,
            opts,
            out,
            history,
        } => {
            let (samples, _) = cellstats::load_training_set(&train_set).data()?;
            let (mcfg, tcfg) = train_configs(&opts)?;
            let (model, hist) = surrogate::train_with(&samples, &mcfg, &tcfg, |e, l| {
                eprintln!("epoch {:>4}  loss {l:.6e}", e + 1);
            })
            .data()?;
            surrogate::save_model(&model, &out).data()?;
            if let Some(h) = history {
                let mut text = String::from("epoch,loss\n");
                for (i, l) in hist.iter().enumerate() {
                    text.push_str(&format!("{},{l}\n", i + 1));
                }
                std::fs::write(h, text).data()?;
            }
            println!("wrote {} ({} parameters)", out.display(), model.parameter_count());
        }
        Command::Cv {
            train_set,
            opts,
            folds,
            out,
            final_model,
        } => {
            let (samples, _) = cellstats::load_training_set(&train_set).data()?;
            let (mcfg, mut tcfg) = train_configs(&opts)?;
            if let Some(k) = folds {
                tcfg.folds = k;
            }
            if tcfg.folds < 2 {
                return Err(usage("--folds must be at least 2"));
            }
            let metrics = surrogate::cross_validate(&samples, &mcfg, &tcfg).data()?;
            let mut text = String::from("fold,train_loss,val_loss,val_median_abs_err\n");
            for m in &metrics {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    m.fold, m.train_loss, m.val_loss, m.val_median_abs_err
                ));
            }
            print!("{text}");
            if let Some(o) = out {
                std::fs::write(o, &text).data()?;
            }
            if let Some(path) = final_model {
                let (model, _) = surrogate::train(&samples, &mcfg, &tcfg).data()?;
                surrogate::save_model(&model, &path).data()?;
                println!("wrote final model {}", path.display());
            }
        }
        Command::Predict {
            model,
            dataset,
            iso,
            t,
            out,
        } => {
            let model = surrogate::load_model(&model).data()?;
            let ds = load_normalized(&dataset)?;
            let grid = cellstats::field_statistics(&ds, local_step(&ds, t)?).data()?;
            let field = surrogate::predict_field(&model, &grid, iso).data()?;
            let meta = LcpMeta {
                cells_w: field.cells_w,
                cells_h: field.cells_h,
                isovalue: iso,
                r: 0,
                seed: 0,
                method: FieldMethod::Surrogate,
            };
            pmc::save_lcp_field(&out, &field, &meta).data()?;
            println!("wrote {}", out.display());
        }
        Command::Bench {
            dataset,
            iso,
            t,
            r_values,
            workers,
            model,
            reps,
            seed,
            out,
        } => {
            let r_values = r_values
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("cannot parse --r-values {r_values:?}")))?;
            if reps < 1 || workers == Some(0) {
                return Err(usage("--reps and --workers must be at least 1"));
            }
            let start = Instant::now();
            let ds = load_normalized(&dataset)?;
            let grid = cellstats::field_statistics(&ds, local_step(&ds, t)?).data()?;
            let load_s = start.elapsed().as_secs_f64();
            let cfg = BenchConfig {
                isovalue: iso,
                r_values,
                workers: workers.unwrap_or_else(crate::par::available_workers),
                repetitions: reps,
                seed,
            };
            let report = evalbench::bench(&grid, &cfg, model.as_deref(), load_s).data()?;
            print!("{}", report.to_csv());
            if let Some(o) = out {
                report.write_csv(&o).data()?;
            }
        }
        Command::Report {
            pred,
            truth,
            out,
            histogram,
        } => {
            let (p, _) = pmc::load_lcp_field(&pred).data()?;
            let (g, _) = pmc::load_lcp_field(&truth).data()?;
            let report = evalbench::error_report(&p, &g).data()?;
            println!("{}\n{}", ErrorReport::CSV_HEADER, report.csv_row());
            if let Some(o) = out {
                report.write_csv(&o).data()?;
            }
            if let Some(h) = histogram {
                report.write_histogram_csv(&h).data()?;
            }
        }
        Command::Ablate {
            train_set,
            dataset,
            t_train,
            isos,
            r,
            seed,
            fractions,
            opts,
            out,
        } => {
            let (samples, _) = cellstats::load_training_set(&train_set).data()?;
            let fractions = parse_range(&fractions)?;
            let isovalues = parse_range(&isos)?;
            let ds = load_normalized(&dataset)?;
            let (_, test) = ensemble::split_time(&ds, t_train).data()?;
            let mc = McConfig::new(r, seed);
            let mut cases = Vec::new();
            for t in 0..test.timesteps {
                let stats = cellstats::field_statistics(&test, t).data()?;
                let truths = pmc::lcp_fields_multi(&stats, &isovalues, &mc).data()?;
                for (truth, &s) in truths.into_iter().zip(&isovalues) {
                    cases.push(HeldoutCase {
                        stats: stats.clone(),
                        isovalue: s,
                        truth,
                    });
                }
            }
            let (mcfg, tcfg) = train_configs(&opts)?;
            let reports = evalbench::ablate_training_size(&samples, &fractions, &mcfg, &tcfg, &cases).data()?;
            let mut text = format!("fraction,{}\n", ErrorReport::CSV_HEADER);
            for (f, rep) in &reports {
                text.push_str(&format!("{f},{}\n", rep.csv_row()));
            }
            print!("{text}");
            if let Some(o) = out {
                std::fs::write(o, text).data()?;
            }
        }
        Command::Render {
            field,
            out,
            scale,
            gamma,
        } => {
            if scale < 1 || !(gamma > 0.0) {
                return Err(usage("--scale must be >= 1 and --gamma > 0"));
            }
            let (f, _) = pmc::load_lcp_field(&field).data()?;
            let cmap = ColormapSpec {
                gamma,
                ..ColormapSpec::default()
            };
            let img = render::render_lcp(&f, &cmap, scale);
            img.save_ppm(&out).data()?;
            println!("wrote {}x{} image {}", img.width, img.height, out.display());
        }
    }
    Ok(())
}
