//! Command-line front end: sample synthetic data, train, evaluate bounds,
//! classify sequences, and run exact small-instance oracles.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dst_core::format::{decode_data, decode_model, decode_topology, encode_data, encode_model};
use dst_core::learning::{classify, em_fit, eval_bounds, initialize_params, Dataset, EmConfig};
use dst_core::oracle::{exact_loglik_enumerate, TinyLimits};
use dst_core::topology::Topology;
use dst_core::DstError;

#[derive(Parser)]
#[command(name = "dst", version, about = "Dynamical systems trees", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic observation sequences from a model
    Sample {
        /// Model file
        #[arg(long)]
        model: PathBuf,
        /// Sequence length T (steps after the initial one)
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output data file (a directory when --sequences > 1)
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences to sample
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
    /// Fit a model with variational EM
    Train {
        /// Topology file (a model file also works; its params are ignored)
        #[arg(long)]
        topology: PathBuf,
        /// Data file or directory of per-sequence data files
        #[arg(long)]
        data: PathBuf,
        /// Output model file
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        overrelax: bool,
        #[arg(long)]
        offset_origin: bool,
        /// Print the bound trace as CSV (iter,bound) instead of JSON
        #[arg(long)]
        csv: bool,
        /// Also write the fit report to this file
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate per-sequence evidence bounds of a fixed model
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        offset_origin: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Classify sequences by the highest-bound model
    Classify {
        /// Comma-separated model files
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        offset_origin: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Exact log-likelihood by exhaustive enumeration (tiny models only)
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cap on the number of joint discrete paths
        #[arg(long)]
        max_paths: Option<u128>,
    },
}

/// Shared numeric knobs. Precedence: flags > environment (DST_SEED,
/// DST_EM_TOL) > built-in defaults.
#[derive(Args)]
struct Tuning {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    e_tol: Option<f64>,
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Eigenvalue floor for re-estimated covariances
    #[arg(long)]
    floor: Option<f64>,
}

impl Tuning {
    fn config(&self, overrelax: bool) -> Result<EmConfig, CliError> {
        let mut c = EmConfig::default();
        if let Some(s) = env_parse::<u64>("DST_SEED")? {
            c.seed = s;
        }
        if let Some(t) = env_parse::<f64>("DST_EM_TOL")? {
            c.em_tol = t;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.e_tol {
            c.e_tol = t;
        }
        if let Some(t) = self.em_tol {
            c.em_tol = t;
        }
        if let Some(n) = self.max_sweeps {
            c.max_sweeps = n;
        }
        if let Some(n) = self.max_iters {
            c.max_em_iters = n;
        }
        if let Some(f) = self.floor {
            c.covariance_floor = f;
        }
        c.overrelax = overrelax;
        Ok(c)
    }
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    match std::env::var(name) {
        Ok(v) => v.parse().map(Some).map_err(|_| CliError {
            code: 1,
            kind: "usage".into(),
            message: format!("environment variable {} is not a valid value: {}", name, v),
        }),
        Err(_) => Ok(None),
    }
}

struct CliError {
    code: u8,
    kind: String,
    message: String,
}

impl From<DstError> for CliError {
    fn from(e: DstError) -> Self {
        let (code, kind) = match &e {
            DstError::DeadChainState { .. }
            | DstError::SingularPrecision { .. }
            | DstError::MonotonicityViolated { .. }
            | DstError::DegenerateRegression { .. } => (3, "numerical"),
            _ => (2, "data"),
        };
        CliError {
            code,
            kind: kind.into(),
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 2,
        kind: "data".into(),
        message: format!("{}: {}", path.display(), e),
    }
}

/// Rounds to 9 significant digits so printed numbers are stable and short.
fn sig9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{:.8e}", x).parse().unwrap()
    } else {
        x
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Writes atomically: temp file in the same directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        )),
        None => PathBuf::from(format!(".{}.tmp", path.display())),
    };
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Loads a dataset from a single file or a directory of files (lexicographic
/// order), applying the origin offset when requested.
fn load_dataset(
    path: &Path,
    topology: &Topology,
    offset_origin: bool,
) -> Result<Dataset, CliError> {
    let mut sequences = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(CliError {
                code: 2,
                kind: "data".into(),
                message: format!("{}: empty data directory", path.display()),
            });
        }
        for p in entries {
            sequences.push(decode_data(&read_to_string(&p)?, topology)?);
        }
    } else {
        sequences.push(decode_data(&read_to_string(path)?, topology)?);
    }
    if offset_origin {
        for s in &mut sequences {
            s.offset_origin();
        }
    }
    Ok(Dataset { sequences })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample {
            model,
            steps,
            seed,
            out,
            sequences,
        } => {
            let model = decode_model(&read_to_string(&model)?)?;
            let mut seed = match seed {
                Some(s) => s,
                None => env_parse::<u64>("DST_SEED")?.unwrap_or(0),
            };
            if sequences == 1 {
                let (_, obs) = model.sample_sequence(steps, seed)?;
                write_atomic(&out, &encode_data(&obs))?;
            } else {
                fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
                for i in 0..sequences {
                    let (_, obs) = model.sample_sequence(steps, seed)?;
                    write_atomic(&out.join(format!("{:04}.json", i)), &encode_data(&obs))?;
                    seed = seed.wrapping_add(1);
                }
            }
            println!("{}", json!({"sequences": sequences, "T": steps}));
            Ok(())
        }
        Command::Train {
            topology,
            data,
            out,
            tuning,
            overrelax,
            offset_origin,
            csv,
            report,
        } => {
            let config = tuning.config(overrelax)?;
            let topology = decode_topology(&read_to_string(&topology)?)?;
            let dataset = load_dataset(&data, &topology, offset_origin)?;
            let init = initialize_params(&topology, &dataset, config.seed)?;
            let (fitted, fit) = em_fit(&init, &dataset, &config)?;
            write_atomic(&out, &encode_model(&fitted))?;
            let report_doc = json!({
                "iters_run": fit.iters_run,
                "converged": fit.converged,
                "bound_per_iter": fit.bound_per_iter.iter().map(|&b| sig9(b)).collect::<Vec<_>>(),
                "eta_trace": fit.eta_trace.iter().map(|&e| sig9(e)).collect::<Vec<_>>(),
            });
            if let Some(p) = report {
                write_atomic(&p, &serde_json::to_string_pretty(&report_doc).unwrap())?;
            }
            if csv {
                println!("iter,bound");
                for (i, b) in fit.bound_per_iter.iter().enumerate() {
                    println!("{},{:.8e}", i, b);
                }
            } else {
                println!("{}", report_doc);
            }
            Ok(())
        }
        Command::Eval {
            model,
            data,
            offset_origin,
            tuning,
        } => {
            let config = tuning.config(false)?;
            let model = decode_model(&read_to_string(&model)?)?;
            let dataset = load_dataset(&data, &model.topology, offset_origin)?;
            let bounds = eval_bounds(&model, &dataset, &config)?;
            let total: f64 = bounds.iter().sum();
            println!(
                "{}",
                json!({
                    "bounds": bounds.iter().map(|&b| sig9(b)).collect::<Vec<_>>(),
                    "total": sig9(total),
                })
            );
            Ok(())
        }
        Command::Classify {
            models,
            data,
            offset_origin,
            tuning,
        } => {
            if models.is_empty() {
                return Err(CliError {
                    code: 1,
                    kind: "usage".into(),
                    message: "--models requires at least one model file".into(),
                });
            }
            let config = tuning.config(false)?;
            let models = models
                .iter()
                .map(|p| decode_model(&read_to_string(p)?).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()?;
            let dataset = load_dataset(&data, &models[0].topology, offset_origin)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for obs in &dataset.sequences {
                let outcome = classify(&models, obs, &config);
                labels.push(outcome.label);
                rows.push(json!({
                    "label": outcome.label,
                    "tie": outcome.tie,
                    "scores": outcome.scores.iter().map(|&s| sig9(s)).collect::<Vec<_>>(),
                    "errors": outcome.errors,
                }));
            }
            println!("{}", json!({"labels": labels, "results": rows}));
            Ok(())
        }
        Command::Oracle {
            model,
            data,
            max_paths,
        } => {
            let model = decode_model(&read_to_string(&model)?)?;
            let obs = decode_data(&read_to_string(&data)?, &model.topology)?;
            let mut limits = TinyLimits::default();
            if let Some(m) = max_paths {
                limits.max_total_discrete_paths = m;
            }
            let ll = exact_loglik_enumerate(&model, &obs, &limits)?;
            println!("{}", json!({"loglik": sig9(ll)}));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    json!({"error": {"code": 1, "kind": "usage", "message": e.to_string()}})
                );
                return ExitCode::from(1);
            }
            // --help / --version
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"code": e.code, "kind": e.kind, "message": e.message}})
            );
            ExitCode::from(e.code)
        }
    }
}
