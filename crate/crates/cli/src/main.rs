//! `wada`: experiment runner for the ascent-descent adversarial training
//! solver. Subcommands: `train`, `chaos`, `attack-eval`, `gen-data`.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use wada_core::averaging::Averager;
use wada_core::dynamics::{run, RunTrace, SolverState};
use wada_core::eval::{accuracy, nash_gap, pgd_attack};
use wada_core::measures::{BoxDomain, ParamMeasure};
use wada_core::ot::{chaos_metric, ChaosMode, ChaosSnapshot};
use wada_core::seed::stream_seed;

use config::{ExperimentConfig, RawConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "wada", about = "Ascent-descent particle solver for adversarial learning games", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment: init, solve, average, evaluate, write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the parallel sections (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Replace every seed derived from the config.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Particle-count convergence study against the largest count.
    Chaos {
        #[arg(long)]
        config: PathBuf,
        /// Ascending particle counts; the largest is the reference.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Distance backend: `sliced` (default) or `exact`.
        #[arg(long, default_value = "sliced")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Clean and PGD-attacked accuracy of a trained averaged ensemble.
    AttackEval {
        #[arg(long)]
        config: PathBuf,
        /// Directory containing avg_nu.csv from a train run.
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset CSV.
    GenData {
        /// `regression_1d` or `two_moons`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            threads,
            seed_override,
        } => with_pool(threads, || cmd_train(&config, out, seed_override)),
        Command::Chaos {
            config,
            counts,
            seeds,
            mode,
            out,
            threads,
        } => with_pool(threads, || cmd_chaos(&config, &counts, seeds, &mode, out)),
        Command::AttackEval {
            config,
            model_dir,
            out,
        } => cmd_attack_eval(&config, &model_dir, out),
        Command::GenData {
            kind,
            n,
            noise_std,
            seed,
            out,
        } => cmd_gen_data(&kind, n, noise_std, seed, &out),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

fn with_pool<F>(threads: Option<usize>, f: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<(), CliError> + Send,
{
    match threads {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::runtime(e.to_string()))?;
            pool.install(f)
        }
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let raw = RawConfig::load(path)?;
    let mut cfg = raw.resolve()?;
    if let Some(seed) = seed_override {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn write_measures(
    dir: &Path,
    stem_pi: &str,
    stem_nu: &str,
    pi: &wada_core::CouplingMeasure,
    nu: &ParamMeasure,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    pi.write_csv(&mut buf)?;
    write_file(&dir.join(stem_pi), &buf)?;
    let mut buf = Vec::new();
    nu.write_csv(&mut buf)?;
    write_file(&dir.join(stem_nu), &buf)?;
    Ok(())
}

fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunTrace, SolverState, Averager), CliError> {
    let data = cfg.build_dataset()?;
    let state = wada_core::data::init_state(&data, &cfg.init)?;
    let mut averager = Averager::new(cfg.averaging, cfg.solver.seed);
    let (trace, final_state) = run(state, &cfg.model, &cfg.solver, &mut averager)?;
    Ok((trace, final_state, averager))
}

fn cmd_train(
    config_path: &Path,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config_path, seed_override)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    write_file(
        &cfg.out_dir.join("config.resolved.cfg"),
        cfg.to_config_text().as_bytes(),
    )?;

    let (trace, _final_state, averager) = run_experiment(&cfg)?;

    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_file(&cfg.out_dir.join("trace.csv"), &buf)?;
    for snap in &trace.snapshots {
        write_measures(
            &cfg.out_dir,
            &format!("snap_{}_pi.csv", snap.step),
            &format!("snap_{}_nu.csv", snap.step),
            &snap.pi,
            &snap.nu,
        )?;
    }
    let averaged = averager.finalize()?;
    write_measures(
        &cfg.out_dir,
        "avg_pi.csv",
        "avg_nu.csv",
        &averaged.pi_bar,
        &averaged.nu_bar,
    )?;
    println!(
        "train: {} steps, {} checkpoints, {} snapshots absorbed",
        cfg.solver.max_steps,
        trace.rows.len(),
        averaged.snapshots_used
    );
    if let Some(last) = trace.rows.last() {
        println!(
            "final payoff {:.6}, mass residuals pi {:.3e} nu {:.3e}",
            last.payoff, last.mass_residual_pi, last.mass_residual_nu
        );
    }

    if cfg.eval.nash_gap {
        let report = nash_gap(
            &averaged.pi_bar,
            &averaged.nu_bar,
            &cfg.model,
            &cfg.nash_gap_opts(),
        )?;
        write_file(&cfg.out_dir.join("report.json"), report.to_json().as_bytes())?;
        println!(
            "nash gap {:.6} (r_a {:.4}, r_m {:.4})",
            report.gap, report.r_a, report.r_m
        );
    }
    if cfg.eval.pgd_enabled {
        let data = cfg.build_dataset()?;
        let json = attack_eval_json(&cfg, &averaged.nu_bar, &data)?;
        write_file(&cfg.out_dir.join("attack_eval.json"), json.as_bytes())?;
    }
    Ok(())
}

fn attack_eval_json(
    cfg: &ExperimentConfig,
    nu_bar: &ParamMeasure,
    data: &wada_core::Dataset,
) -> Result<String, CliError> {
    let clean = accuracy(nu_bar, data, cfg.eval.accuracy_threshold, &cfg.model)?;
    let attacked_data = pgd_attack(nu_bar, data, &cfg.eval.pgd, cfg.eval.pgd_epsilon, &cfg.model)?;
    let attacked = accuracy(nu_bar, &attacked_data, cfg.eval.accuracy_threshold, &cfg.model)?;
    println!(
        "clean accuracy {:.4}, pgd accuracy {:.4} (steps {}, step size {}, epsilon {})",
        clean, attacked, cfg.eval.pgd.steps, cfg.eval.pgd.step_size, cfg.eval.pgd_epsilon
    );
    Ok(format!(
        "{{\n  \"clean_accuracy\": {clean},\n  \"pgd_accuracy\": {attacked},\n  \"pgd_steps\": {},\n  \"pgd_step_size\": {},\n  \"pgd_epsilon\": {}\n}}\n",
        cfg.eval.pgd.steps, cfg.eval.pgd.step_size, cfg.eval.pgd_epsilon
    ))
}

fn cmd_chaos(
    config_path: &Path,
    counts: &[usize],
    seeds: u64,
    mode: &str,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if counts.len() < 2 {
        return Err(CliError::config(
            "need >= 2 counts (the largest is the reference)",
        ));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::config("counts must be strictly ascending"));
    }
    if seeds == 0 {
        return Err(CliError::config("need at least one seed"));
    }
    let mode = match mode {
        "sliced" => ChaosMode::Sliced {
            n_projections: 24,
            seed: 9,
        },
        "exact" => ChaosMode::Exact {
            max_support: wada_core::ot::DEFAULT_MAX_SUPPORT,
        },
        other => {
            return Err(CliError::config(format!(
                "mode `{other}` (valid modes: sliced, exact)"
            )))
        }
    };
    let mut cfg = load_config(config_path, None)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", cfg.out_dir.display())))?;

    let base_seed = cfg.solver.seed;
    let mut sups: Vec<Vec<f64>> = vec![Vec::new(); counts.len() - 1];
    for s in 0..seeds {
        let seed = stream_seed(base_seed, "chaos-family", s);
        let mut snapshot_sets: Vec<Vec<ChaosSnapshot>> = Vec::with_capacity(counts.len());
        for &count in counts {
            let mut run_cfg = cfg.clone();
            run_cfg.override_seed(seed);
            run_cfg.init.n_attacks = count;
            run_cfg.init.m_particles = count;
            let (trace, _, _) = run_experiment(&run_cfg)?;
            snapshot_sets.push(
                trace
                    .snapshots
                    .iter()
                    .map(|snap| ChaosSnapshot::from_measures(snap.step, &snap.pi, &snap.nu))
                    .collect(),
            );
        }
        let reference = snapshot_sets.pop().expect("at least two counts");
        for (i, snaps) in snapshot_sets.iter().enumerate() {
            let series = chaos_metric(snaps, &reference, mode)?;
            let mut buf = Vec::new();
            series.write_csv(&mut buf)?;
            write_file(
                &cfg.out_dir.join(format!("chaos_c{}_s{}.csv", counts[i], s)),
                &buf,
            )?;
            sups[i].push(series.sup());
        }
    }

    let mut summary = String::from("count,median_sup,min_sup,max_sup\n");
    println!("count  median_sup");
    for (i, &count) in counts[..counts.len() - 1].iter().enumerate() {
        let median = wada_core::numerics::median(&sups[i]);
        let min = sups[i].iter().cloned().fold(f64::INFINITY, f64::min);
        let max = sups[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        summary.push_str(&format!("{count},{median},{min},{max}\n"));
        println!("{count:<6} {median:.6}");
    }
    write_file(&cfg.out_dir.join("chaos_summary.csv"), summary.as_bytes())?;
    Ok(())
}

fn cmd_attack_eval(
    config_path: &Path,
    model_dir: &Path,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config_path, None)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    let nu_path = model_dir.join("avg_nu.csv");
    if !nu_path.exists() {
        return Err(CliError::runtime(format!(
            "missing model: {} not found",
            nu_path.display()
        )));
    }
    let data = cfg.build_dataset()?;
    let file = fs::File::open(&nu_path)
        .map_err(|e| CliError::io(format!("cannot open {}: {e}", nu_path.display())))?;
    let nu_bar = ParamMeasure::read_csv(
        std::io::BufReader::new(file),
        BoxDomain::default_theta(data.input_dim()),
    )?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let json = attack_eval_json(&cfg, &nu_bar, &data)?;
    write_file(&cfg.out_dir.join("attack_eval.json"), json.as_bytes())?;
    Ok(())
}

fn cmd_gen_data(kind: &str, n: usize, noise_std: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let data = match kind {
        "regression_1d" => wada_core::data::gen_regression_1d(n, noise_std, seed)?,
        "two_moons" => wada_core::data::gen_two_moons(n, noise_std, seed)?,
        other => {
            return Err(CliError::config(format!(
                "kind `{other}` (valid kinds: regression_1d, two_moons)"
            )))
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    write_file(out, &buf)?;
    println!("wrote {} points to {}", data.len(), out.display());
    Ok(())
}
