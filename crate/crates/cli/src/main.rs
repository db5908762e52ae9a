//! `orbitfl` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orbitfl::analysis::{bound_baseline, bound_emsfl, compare_schemes, crossover_zeta_sq, BoundParams};
use orbitfl::channel::{doppler, ergodic_capacity, mean_snr, shannon_upper, window_bytes, Slot};
use orbitfl::data::global_view;
use orbitfl::experiment::{prepare, ExperimentConfig, Prepared};
use orbitfl::federation::{metrics_csv, EventKind, RunOutput, Simulation};
use orbitfl::moe::accuracy;
use orbitfl::Error;

#[derive(Parser)]
#[command(
    name = "orbitfl",
    version,
    about = "Expert-split federated MoE training over satellite links"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare data, split experts and train; writes all output files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Relevance, truncation and expert assignment only.
    Split {
        #[command(flatten)]
        common: Common,
        /// Also write assignment.txt into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Link rates, window budgets and a contact-plan preview.
    Linkbudget {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate both convergence bounds and the heterogeneity crossover.
    Bounds {
        /// Bound constants (TOML).
        #[arg(long)]
        params: PathBuf,
        /// Comma-separated cycle counts.
        #[arg(long = "t", default_value = "")]
        t: String,
        /// Validate and compute without printing.
        #[arg(long)]
        quiet: bool,
    },
    /// Run every config in a directory under every seed and write a report.
    Compare {
        /// Directory of experiment configs; labels are the file stems.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Output directory for report.csv and per-run outputs.
        #[arg(long)]
        out: PathBuf,
        /// Only print warnings and errors.
        #[arg(long)]
        quiet: bool,
    },
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) | Error::Validation(_) | Error::Parse(_) | Error::Domain(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_err(msg: String) -> Failure {
    Failure { code: 2, message: msg }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> CliResult<Vec<T>> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
    if items.is_empty() {
        return Err(config_err(format!("{what} list is empty")));
    }
    items
        .iter()
        .map(|x| x.parse().map_err(|_| config_err(format!("invalid {what} value {x:?}"))))
        .collect()
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn matrix_text(name: &str, m: &[Vec<f64>]) -> String {
    let mut out = format!("{name} (rows: experts, columns: clusters)\n");
    for (e, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!("  expert {}: {}\n", e + 1, cells.join(" ")));
    }
    out
}

fn summary_text(p: &Prepared, out: &RunOutput) -> CliResult<String> {
    let cfg = &p.config;
    let view = global_view(&p.datasets);
    let final_loss = out.logs.last().and_then(|l| l.loss_global).unwrap_or(out.initial_loss);
    let infeasible = out.logs.iter().filter(|l| l.event == EventKind::Infeasible).count();
    let mut s = String::new();
    s.push_str(&format!("scheme: {}\n", cfg.scheme));
    s.push_str(&format!("seed: {}\n", cfg.seed));
    s.push_str(&format!("rounds: {}\n", p.plan.rounds()));
    s.push_str(&format!("cycles: {}\n", cfg.train.cycles));
    s.push_str(&format!("initial_loss: {}\n", out.initial_loss));
    s.push_str(&format!("final_loss: {final_loss}\n"));
    s.push_str(&format!("final_accuracy: {}\n", accuracy(&out.params, &view)?));
    s.push_str(&format!(
        "total_bytes_up: {}\n",
        out.logs.iter().map(|l| l.bytes_up).sum::<u64>()
    ));
    s.push_str(&format!(
        "max_loaded_params: {}\n",
        out.logs.iter().map(|l| l.params_loaded_max).max().unwrap_or(0)
    ));
    s.push_str(&format!("infeasible_rounds: {infeasible}\n"));
    match &p.ratios {
        Some(r) => s.push_str(&format!("gamma: {}\n", r.gamma)),
        None => s.push_str("gamma: undefined\n"),
    }
    s.push_str(&format!(
        "warnings: {}\n",
        p.warnings.len() + usize::from(infeasible > 0)
    ));
    for w in &p.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    if infeasible > 0 {
        s.push_str(&format!(
            "warning: {infeasible} rounds had uploads over the window budget\n"
        ));
    }
    Ok(s)
}

fn cmd_run(common: &Common, out_dir: &Path) -> CliResult {
    let cfg = load_config(&common.config, common.seed)?;
    let p = prepare(&cfg)?;
    warn_all(&p.warnings);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut sim = Simulation::new(
        cfg.scheme,
        p.model.clone(),
        &p.datasets,
        p.plan.clone(),
        p.assignment.clone(),
        p.hyper.clone(),
        p.train_seed(),
    )?;
    let initial_loss = sim.global_loss()?;
    sim.run_to_end()?;
    let checkpoint = sim.checkpoint();
    let out = sim.into_output(initial_loss);
    write(out_dir, "metrics.csv", metrics_csv(&out.logs))?;
    write(out_dir, "assignment.txt", p.assignment.export())?;
    write(out_dir, "contactplan.txt", p.plan.export())?;
    write(out_dir, "checkpoint.bin", checkpoint)?;
    let summary = summary_text(&p, &out)?;
    write(out_dir, "summary.txt", &summary)?;
    if !common.quiet {
        print!("{summary}");
    }
    Ok(())
}

fn cmd_split(common: &Common, out_dir: Option<&Path>) -> CliResult {
    let cfg = load_config(&common.config, common.seed)?;
    let p = prepare(&cfg)?;
    warn_all(&p.warnings);
    if !common.quiet {
        print!("{}", matrix_text("relevance p", &p.relevance));
        print!("{}", matrix_text("truncated p", &p.truncated));
        print!("{}", matrix_text("assignment probabilities", &p.probs.probs));
        println!("cap per cluster: {}", p.cap);
        println!("assignment (expert,cluster):");
        print!("{}", p.assignment.export());
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(dir, "assignment.txt", p.assignment.export())?;
    }
    Ok(())
}

fn cmd_linkbudget(common: &Common) -> CliResult {
    let cfg = load_config(&common.config, common.seed)?;
    let budget = cfg
        .link
        .budget
        .clone()
        .ok_or_else(|| config_err("link.budget: required by linkbudget".into()))?;
    let geometry = cfg.link.geometry.clone().unwrap_or_default();
    let plan = cfg.contact_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for c in 0..cfg.data.clusters {
        let theta = geometry.peak_elevation(c);
        let upper = shannon_upper(&budget, theta, &geometry)?;
        if !common.quiet {
            println!("cluster {} (peak elevation {theta} deg)", c + 1);
            if theta < budget.theta_min_deg {
                println!(
                    "  below the elevation threshold of {} deg: no contact",
                    budget.theta_min_deg
                );
                continue;
            }
            let snr = mean_snr(&budget, theta, &geometry)?;
            let erg = ergodic_capacity(&budget, theta, &geometry, 10_000, &mut rng)?;
            println!("  mean SNR: {:.3} dB", 10.0 * snr.log10());
            println!("  Shannon rate: {:.3} Mbit/s", upper / 1e6);
            println!(
                "  ergodic rate: {:.3} Mbit/s (+/- {:.3})",
                erg.rate_bps / 1e6,
                erg.std_error_bps / 1e6
            );
            println!("  Doppler at peak: {:.1} Hz", doppler(theta, &budget, &geometry));
            println!(
                "  window: {} s, {} bytes",
                cfg.link.window_s,
                window_bytes(upper, cfg.link.window_s)
            );
        }
    }
    if plan.all_idle() {
        eprintln!("warning: every slot of the contact plan is idle");
    }
    if !common.quiet {
        println!("contact plan (first cycle):");
        for t in 1..=plan.cycle_len().min(plan.rounds()) {
            match plan.slot(t) {
                Slot::Idle => println!("  round {t}: IDLE"),
                Slot::Connected {
                    cluster, budget_bytes, ..
                } => println!(
                    "  round {t}: cluster {} ({} bytes per device)",
                    cluster + 1,
                    budget_bytes.map_or_else(|| "unlimited".to_string(), |b| b.to_string())
                ),
            }
        }
    }
    Ok(())
}

fn cmd_bounds(params: &Path, t_list: &str, quiet: bool) -> CliResult {
    let ts: Vec<usize> = parse_list("T", t_list)?;
    let text = fs::read_to_string(params).map_err(|e| config_err(format!("{}: {e}", params.display())))?;
    let p: BoundParams = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", params.display())))?;
    p.validate()?;
    let mut rows = vec!["T,bound_emsfl,bound_baseline".to_string()];
    for &t in &ts {
        rows.push(format!("{t},{},{}", bound_emsfl(&p, t)?, bound_baseline(&p, t)?));
    }
    let crossover = crossover_zeta_sq(&p, ts[0])?;
    if !quiet {
        for r in rows {
            println!("{r}");
        }
        match crossover {
            Some(z) => println!("crossover zeta_e_sq: {z}"),
            None => println!("crossover zeta_e_sq: none"),
        }
    }
    Ok(())
}

fn cmd_compare(dir: &Path, seeds: &str, out_dir: &Path, quiet: bool) -> CliResult {
    let seeds: Vec<u64> = parse_list("seed", seeds)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| config_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(config_err(format!("{}: no .toml configs", dir.display())));
    }
    let configs = paths
        .iter()
        .map(|p| {
            let label = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            load_config(p, None).map(|c| (label, c))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = compare_schemes(&configs, &seeds)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write(out_dir, "report.csv", report.to_csv())?;
    write(out_dir, "report.txt", report.to_text())?;
    for r in &report.runs {
        let run_dir = out_dir.join("runs").join(format!("{}_seed{}", r.label, r.seed));
        fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
        write(&run_dir, "metrics.csv", &r.metrics_csv)?;
    }
    if !quiet {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, out } => cmd_run(common, out),
        Command::Split { common, out } => cmd_split(common, out.as_deref()),
        Command::Linkbudget { common } => cmd_linkbudget(common),
        Command::Bounds { params, t, quiet } => cmd_bounds(params, t, *quiet),
        Command::Compare {
            config,
            seeds,
            out,
            quiet,
        } => cmd_compare(config, seeds, out, *quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
