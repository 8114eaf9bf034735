use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use homog_cli::commands;
use homog_cli::config::ExperimentConfig;
use homog_cli::experiments::{run_experiment, thread_count};
use homog_core::coarse_grain::Reference;
use homog_core::percolation::{GridParams, GridStrategy};
use homog_core::Point;

#[derive(Parser)]
#[command(
    name = "homog",
    version,
    about = "Discrete Dirichlet energies on Poisson clouds: sampling, cell problems, grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Blocks,
    RegularCells,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefName {
    Constant,
    Linear,
    Quadratic,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a Poisson cloud and write it in the cloud text format.
    Sample {
        #[arg(long)]
        gamma: f64,
        #[arg(long, num_args = 4, value_names = ["CX", "CY", "W", "H"], allow_negative_numbers = true)]
        window: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        padding: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the Dirichlet energy of a field on a region.
    Energy {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, num_args = 4, value_names = ["CX", "CY", "W", "H"], allow_negative_numbers = true)]
        region: Vec<f64>,
        #[arg(long)]
        radius: f64,
    },
    /// Solve the cell problem on the centered square of side T; prints JSON.
    Cell {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long = "T")]
        size: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long, num_args = 2, value_names = ["FX", "FY"], allow_negative_numbers = true)]
        xi: Vec<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Sweep sizes, seeds and directions; prints the xi CSV.
    Xi {
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long = "T", value_delimiter = ',', required = true)]
        sizes: Vec<f64>,
        #[arg(long)]
        seeds: u64,
        /// Comma-separated: e1, e2, diag or x:y.
        #[arg(long, value_delimiter = ',', default_value = "e1,e2,diag")]
        dirs: Vec<String>,
        #[arg(long, default_value_t = 0)]
        master_seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble and validate a regular grid; prints JSON.
    Grid {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long = "Lambda", default_value_t = 12)]
        big_lambda: u32,
        #[arg(long, default_value_t = 20.0)]
        upsilon: f64,
        #[arg(long, value_enum, default_value = "regular-cells")]
        strategy: Strategy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-restricted distances of a field to a reference function; prints CSV.
    Converge {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long = "ref", value_enum)]
        reference: RefName,
        /// Gradient of the linear reference.
        #[arg(long, num_args = 2, default_values_t = [1.0, 0.0], allow_negative_numbers = true)]
        xi: Vec<f64>,
        /// Value of the constant reference.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        value: f64,
        #[arg(long, num_args = 4, default_values_t = [0.0, 0.0, 1.0, 1.0], allow_negative_numbers = true)]
        region: Vec<f64>,
    },
    /// Run an experiment config and write its files plus a manifest.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Verify manifests against their files and summarize them.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Concatenate the tables of this schema name into `--out`.
        #[arg(long, requires = "out")]
        concat: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let text = match Cli::parse().command {
        Command::Sample {
            gamma,
            window,
            padding,
            seed,
            out,
        } => commands::sample(
            gamma,
            commands::window_from(&window)?,
            padding,
            seed,
            out.as_deref(),
        )?,
        Command::Energy {
            cloud,
            field,
            region,
            radius,
        } => commands::energy(&cloud, &field, commands::window_from(&region)?, radius)?,
        Command::Cell {
            cloud,
            size,
            lambda,
            xi,
            tol,
        } => commands::cell(&cloud, size, lambda, Point::new(xi[0], xi[1]), tol)?,
        Command::Xi {
            gamma,
            lambda,
            sizes,
            seeds,
            dirs,
            master_seed,
            tol,
            threads,
            out,
        } => {
            let dirs = dirs
                .iter()
                .map(|d| commands::parse_direction(d))
                .collect::<Result<Vec<_>, _>>()?;
            let csv = commands::xi(
                gamma,
                lambda,
                sizes,
                seeds,
                dirs,
                master_seed,
                tol,
                thread_count(threads),
            )?;
            match out {
                Some(p) => {
                    std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
                    String::new()
                }
                None => csv,
            }
        }
        Command::Grid {
            cloud,
            eps,
            t,
            alpha,
            lambda,
            big_lambda,
            upsilon,
            strategy,
            out,
        } => {
            let params = GridParams {
                eps,
                t,
                alpha,
                lambda,
                big_lambda,
                upsilon,
                strategy: match strategy {
                    Strategy::Blocks => GridStrategy::Blocks,
                    Strategy::RegularCells => GridStrategy::RegularCells,
                },
            };
            let json = commands::grid(&cloud, params)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
                    String::new()
                }
                None => json,
            }
        }
        Command::Converge {
            cloud,
            field,
            grid,
            t,
            reference,
            xi,
            value,
            region,
        } => {
            let reference = match reference {
                RefName::Constant => Reference::Constant { value },
                RefName::Linear => Reference::Linear { xi: [xi[0], xi[1]] },
                RefName::Quadratic => Reference::Quadratic,
            };
            commands::converge(
                &cloud,
                &field,
                &grid,
                t,
                reference,
                commands::window_from(&region)?,
            )?
        }
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if threads.is_some() {
                cfg.threads = threads;
            }
            let m = run_experiment(&cfg)?;
            let mut s = format!(
                "{} -> {} ({} files, {} failed rows)\n",
                m.kind,
                cfg.output_dir
                    .join(homog_cli::manifest::MANIFEST_FILE)
                    .display(),
                m.files.len(),
                m.failed_rows.len()
            );
            for f in &m.files {
                s.push_str(&format!("  {} {}\n", f.path, f.sha256));
            }
            s
        }
        Command::Report {
            manifests,
            concat,
            out,
        } => {
            let paths: Vec<&std::path::Path> = manifests.iter().map(|p| p.as_path()).collect();
            let concat = concat.as_deref().zip(out.as_deref());
            commands::report(&paths, concat)?
        }
    };
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}
