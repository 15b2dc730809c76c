use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use conscope::server::{self, AppState};
use conscope::table::render_report;
use conscope_core::conscore::{compute_report, ConScoreOptions};
use conscope_core::dataio::{load_run, read_run_data, validate_run, write_run};
use conscope_core::probes::DEFAULT_LOGISTIC_RIDGE;
use conscope_core::reduce::project_view;
use conscope_core::simgen::{generate_instance, resample_deconfound, INSTANCE_COUNT};
use serde_json::json;

/// Confounder scoring for model representations.
#[derive(Parser)]
#[command(name = "conscope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate simulated runs with a known confounder.
    #[command(group(ArgGroup::new("which").required(true).args(["instance", "all"])))]
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=INSTANCE_COUNT as i64))]
        instance: Option<u32>,
        /// Write all instances into instance_1 .. instance_8 under --out.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score covariates of a run and write the report as JSON.
    Conscore {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the last checkpoint.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Comma-separated covariate names, or "all".
        #[arg(long, default_value = "all")]
        covariates: String,
        /// Defaults to 1e-8 * trace(H^T H) / d.
        #[arg(long)]
        ridge_ols: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_LOGISTIC_RIDGE)]
        ridge_logistic: f64,
        #[arg(long, default_value_t = 0)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebalance a run over a binary covariate and the label.
    Deconfound {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        covariate: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a run directory and list every problem found.
    Validate {
        #[arg(long)]
        run: PathBuf,
    },
    /// PCA-project a checkpoint and write coordinates as JSON.
    Project {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API over one or more runs.
    Serve {
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of static UI assets served at /.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate {
            instance,
            all,
            n,
            seed,
            out,
        } => {
            if all {
                for id in 1..=INSTANCE_COUNT {
                    simulate_one(id, n, seed, &out.join(format!("instance_{id}")))?;
                }
            } else {
                simulate_one(instance.expect("clap enforces the group"), n, seed, &out)?;
            }
        }
        Command::Conscore {
            run,
            checkpoint,
            covariates,
            ridge_ols,
            ridge_logistic,
            permutations,
            seed,
            out,
        } => {
            let loaded = load_run(&run).with_context(|| format!("loading {}", run.display()))?;
            let selection: Option<Vec<String>> = match covariates.trim() {
                "all" => None,
                list => Some(
                    list.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect(),
                ),
            };
            if let Some(r) = ridge_ols {
                if !(r.is_finite() && r >= 0.0) {
                    bail!("--ridge-ols must be finite and >= 0");
                }
            }
            if !(ridge_logistic.is_finite() && ridge_logistic > 0.0) {
                bail!("--ridge-logistic must be finite and > 0");
            }
            let options = ConScoreOptions {
                ridge_ols,
                ridge_logistic,
                permutations,
                seed,
            };
            let report = compute_report(
                &loaded,
                checkpoint.as_deref(),
                selection.as_deref(),
                &options,
            )?;
            write_file(&out, &report.to_json())?;
            print!("{}", render_report(&report));
            println!("{}", out.display());
        }
        Command::Deconfound {
            run,
            covariate,
            seed,
            out,
        } => {
            let loaded = load_run(&run).with_context(|| format!("loading {}", run.display()))?;
            let selection = [covariate.clone()];
            let options = ConScoreOptions::default();
            let before = compute_report(&loaded, None, Some(&selection), &options)?;
            let balanced = resample_deconfound(&loaded, &covariate, seed)?;
            let after = compute_report(&balanced, None, Some(&selection), &options)?;
            write_run(&balanced, &out)?;
            println!(
                "{covariate}: n {} -> {}  score {:.4} -> {:.4}",
                loaded.meta.n, balanced.meta.n, before.entries[0].score, after.entries[0].score
            );
            println!("{}", out.display());
        }
        Command::Validate { run } => {
            let data = read_run_data(&run).with_context(|| format!("reading {}", run.display()))?;
            let report = validate_run(&data);
            if report.is_empty() {
                println!("OK");
            } else {
                print!("{report}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Project {
            run,
            checkpoint,
            dims,
            out,
        } => {
            let loaded = load_run(&run).with_context(|| format!("loading {}", run.display()))?;
            let ckpt = match checkpoint.as_deref() {
                None => loaded.last_checkpoint(),
                Some(label) => match loaded.checkpoint(label) {
                    Some(c) => c,
                    None => bail!("unknown checkpoint '{label}'"),
                },
            };
            let view = project_view(
                ckpt.label(),
                &ckpt.representations.values,
                &ckpt.final_layer.weights,
                dims,
            )?;
            let body = json!({
                "run_id": loaded.meta.run_id,
                "sample_ids": loaded.labels.sample_ids,
                "view": view,
            });
            let mut text = serde_json::to_string_pretty(&body)?;
            text.push('\n');
            write_file(&out, &text)?;
            println!(
                "checkpoint {}  dims {dims}  approximate {}",
                view.checkpoint, view.approximate
            );
            for (i, r) in view.explained_ratio.iter().enumerate() {
                println!("PC{}  {:.4}", i + 1, r);
            }
            if let Some(w) = &view.warning {
                eprintln!("warning: {w}");
            }
            println!("{}", out.display());
        }
        Command::Serve {
            run,
            port,
            host,
            static_dir,
        } => {
            let runs = run
                .iter()
                .map(|p| load_run(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let state = Arc::new(AppState::new(runs).map_err(anyhow::Error::msg)?);
            let app = server::router(state, static_dir);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                server::serve(listener, app).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate_one(id: u32, n: usize, seed: u64, out: &Path) -> Result<()> {
    let bundle = generate_instance(id, n, seed)?;
    write_run(&bundle.run, out)?;
    println!("{}", out.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
