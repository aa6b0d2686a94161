use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use treefactor::grid::{build_grid_domain, generate_map, GridSpec, MapCase, MapParams};
use treefactor::io::{read_json, read_map, write_json, write_map, write_probes, ApproxFile};
use treefactor::pipeline::{approximate, check_approximation, region_probes, ApproxConfig};
use treefactor::quasimetric::{build_weight_graph, GraphOptions};
use treefactor::quotient::{build_quotient, check_tree, default_tau, TreeFile};
use treefactor::smoothing::Smoothness;
use treefactor::Error;

#[derive(Parser)]
#[command(name = "treefactor", version, about = "Rank-one factorization and smooth approximation of sampled maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    /// Every node of the box.
    Box,
    /// Nodes strictly inside the box.
    OpenBox,
    /// Nodes strictly inside the ball inscribed in the box.
    Disk,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a built-in map on a grid.
    Generate {
        #[arg(long)]
        case: MapCase,
        /// Nodes per axis, e.g. `129x129`.
        #[arg(long)]
        shape: String,
        #[arg(long, value_enum, default_value = "open-box")]
        domain: Domain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the quotient tree of a map.
    Factor {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 1)]
        subdivision: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and verify the smooth approximation.
    Approx {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[command(flatten)]
        options: Options,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Re-check a stored approximation against its map.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        approx: PathBuf,
        #[command(flatten)]
        options: Options,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(clap::Args)]
struct Options {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    strict_rank: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 1)]
    subdivision: usize,
    /// Number of random probes for the rank statistics.
    #[arg(long, default_value_t = 1000)]
    probe_count: usize,
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Use the polynomial transition profile instead of the C-infinity one.
    #[arg(long)]
    polynomial: bool,
    /// Add stage timings to the report.
    #[arg(long)]
    timings: bool,
}

impl Options {
    fn config(&self, epsilon: f64) -> ApproxConfig {
        let mut c = ApproxConfig {
            epsilon,
            tau: self.tau,
            subdivision: self.subdivision,
            seed: self.seed,
            strict_rank: self.strict_rank,
            probes: self.probe_count,
            timings: self.timings,
            smoothness: if self.polynomial { Smoothness::Polynomial } else { Smoothness::CInfinity },
            ..Default::default()
        };
        if let Some(t) = self.rank_tol {
            c.rank_tol = t;
        }
        c
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>, Error> {
    s.split(['x', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad shape `{s}`"))))
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Generate { case, shape, domain, out } => {
            let shape = parse_shape(&shape)?;
            let spec = GridSpec::with_shape(&shape);
            let d = build_grid_domain(&spec, |x| match domain {
                Domain::Box => true,
                Domain::OpenBox => x.iter().all(|&c| c > 0.0 && c < 1.0),
                Domain::Disk => x.iter().map(|c| (c - 0.5) * (c - 0.5)).sum::<f64>() < 0.25,
            })?;
            write_map(&out, &generate_map(case, &d, &MapParams::default())?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Factor { input, tau, subdivision, seed, out } => {
            let map = read_map(&input)?;
            let graph = build_weight_graph(&map, GraphOptions { subdivision, diagonals: false });
            let zf = build_quotient(&graph, &map, tau.unwrap_or_else(|| default_tau(&graph)))?;
            write_json(&out, &TreeFile::from(&zf))?;
            let check = check_tree(&zf, 20_000, treefactor::pipeline::TREE_TOLERANCE, seed);
            log::info!("{} classes, four-point defect {:e}", zf.num_classes(), check.max_four_point_defect);
            if !check.pass {
                eprintln!("quotient is not a metric tree (four-point defect {})", check.max_four_point_defect);
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Approx { input, epsilon, options, out, report, probes } => {
            let map = read_map(&input)?;
            let config = options.config(epsilon);
            let approx = approximate(&map, &config)?;
            write_json(&out, &ApproxFile::new(&approx))?;
            write_json(&report, &approx.report)?;
            if let Some(path) = probes {
                let points = region_probes(&map, &approx.omega_eps, config.probes, config.seed);
                write_probes(&path, &approx.f, &points)?;
            }
            if !approx.report.within_tolerance {
                eprintln!("sup error {} above 2 eps + discretization slack", approx.report.verification.sup_error);
                return Ok(ExitCode::from(4));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { input, approx, options, report } => {
            let map = read_map(&input)?;
            let file: ApproxFile = read_json(&approx)?;
            let f = file.to_map(&map)?;
            let emb = file.composition.as_ref().map(|c| c.embedding.clone().into());
            let config = options.config(file.epsilon);
            let r = check_approximation(&map, &f, emb.as_ref(), file.delta, &config)?;
            write_json(&report, &r)?;
            if !r.within_tolerance {
                eprintln!("sup error {} above 2 eps + discretization slack", r.verification.sup_error);
                return Ok(ExitCode::from(4));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
