//! Flat sectioned key-value experiment configuration.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments. Every
//! key can be overridden through the environment as `WADA_<SECTION>_<KEY>`
//! (both upper-cased), which is how CI sweeps inject parameters. The parsed
//! and overridden configuration serializes back to the same grammar for the
//! resolved-config snapshot written into each run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use wada_core::data::{DataSchema, Dataset, InitSpec, Nu0Spec, Pi0Spec};
use wada_core::dynamics::{SolverConfig, StepSchedule};
use wada_core::eval::{AdversaryOpts, LearnerOpts, NashGapOpts, PgdConfig};
use wada_core::measures::BoxDomain;
use wada_core::payoff::{Activation, AttackTarget, Loss, PayoffModel};
use wada_core::AveragerKind;

use crate::error::CliError;

#[derive(Clone, Debug)]
pub enum DatasetSpec {
    Regression1d { n: usize, noise_std: f64, seed: u64 },
    TwoMoons { n: usize, noise_std: f64, seed: u64 },
    Csv { path: PathBuf, input_dim: usize },
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub nash_gap: bool,
    pub adversary: AdversaryOpts,
    pub learner: LearnerOpts,
    pub pgd_enabled: bool,
    pub pgd: PgdConfig,
    pub pgd_epsilon: f64,
    pub accuracy_threshold: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub init: InitSpec,
    pub model: PayoffModel,
    pub solver: SolverConfig,
    pub averaging: AveragerKind,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

/// Raw `(section, key) -> value` map with provenance-preserving order.
pub struct RawConfig {
    entries: BTreeMap<(String, String), String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(idx) => &raw_line[..idx],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    CliError::config(format!(
                        "{}:{}: malformed section header `{raw_line}`",
                        origin.display(),
                        lineno + 1
                    ))
                })?;
                section = name.trim().to_lowercase();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!(
                    "{}:{}: expected `key = value`, got `{raw_line}`",
                    origin.display(),
                    lineno + 1
                ))
            })?;
            if section.is_empty() {
                return Err(CliError::config(format!(
                    "{}:{}: key `{}` appears before any [section]",
                    origin.display(),
                    lineno + 1,
                    key.trim()
                )));
            }
            entries.insert(
                (section.clone(), key.trim().to_lowercase()),
                value.trim().to_string(),
            );
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut raw = Self::parse(&text, path)?;
        raw.apply_env_overrides();
        Ok(raw)
    }

    /// `WADA_<SECTION>_<KEY>` environment overrides. The section name is
    /// matched greedily against known sections so keys may contain
    /// underscores.
    pub fn apply_env_overrides(&mut self) {
        const SECTIONS: [&str; 7] = [
            "dataset", "init", "model", "solver", "averaging", "eval", "output",
        ];
        for (name, value) in std::env::vars() {
            let Some(rest) = name.strip_prefix("WADA_") else {
                continue;
            };
            for section in SECTIONS {
                let prefix = format!("{}_", section.to_uppercase());
                if let Some(key) = rest.strip_prefix(&prefix) {
                    self.entries
                        .insert((section.into(), key.to_lowercase()), value.clone());
                    break;
                }
            }
        }
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
    }

    fn parse_with<T, F>(&self, section: &str, key: &str, default: T, f: F) -> Result<T, CliError>
    where
        F: FnOnce(&str) -> Result<T, String>,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => f(v).map_err(|msg| {
                CliError::config(format!("[{section}] {key} = `{v}`: {msg}"))
            }),
        }
    }

    fn f64_of(&self, section: &str, key: &str, default: f64) -> Result<f64, CliError> {
        self.parse_with(section, key, default, |v| {
            v.parse::<f64>().map_err(|e| e.to_string())
        })
    }

    fn usize_of(&self, section: &str, key: &str, default: usize) -> Result<usize, CliError> {
        self.parse_with(section, key, default, |v| {
            v.parse::<usize>().map_err(|e| e.to_string())
        })
    }

    fn u64_of(&self, section: &str, key: &str, default: u64) -> Result<u64, CliError> {
        self.parse_with(section, key, default, |v| {
            v.parse::<u64>().map_err(|e| e.to_string())
        })
    }

    fn bool_of(&self, section: &str, key: &str, default: bool) -> Result<bool, CliError> {
        self.parse_with(section, key, default, |v| match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err("expected true/false".into()),
        })
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let seed = self.u64_of("solver", "seed", 0)?;

        let dataset = {
            let kind = self.get("dataset", "kind").unwrap_or("regression_1d");
            let n = self.usize_of("dataset", "n", 32)?;
            let noise_std = self.f64_of("dataset", "noise_std", 0.25)?;
            match kind {
                "regression_1d" => DatasetSpec::Regression1d { n, noise_std, seed },
                "two_moons" => DatasetSpec::TwoMoons { n, noise_std, seed },
                "csv" => DatasetSpec::Csv {
                    path: self
                        .get("dataset", "path")
                        .ok_or_else(|| CliError::config("[dataset] kind = csv requires `path`"))?
                        .into(),
                    input_dim: self.usize_of("dataset", "input_dim", 1)?,
                },
                other => {
                    return Err(CliError::config(format!(
                        "[dataset] kind = `{other}` (valid kinds: regression_1d, two_moons, csv)"
                    )))
                }
            }
        };
        let d_prime = match &dataset {
            DatasetSpec::Regression1d { .. } => 1,
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::Csv { input_dim, .. } => *input_dim,
        };

        let nu0 = self.parse_with("init", "nu0", Nu0Spec::UniformBox, |v| {
            let parts: Vec<&str> = v.split(':').collect();
            match parts.as_slice() {
                ["uniform_box"] => Ok(Nu0Spec::UniformBox),
                ["gaussian_clipped", mean, std] => Ok(Nu0Spec::GaussianClipped {
                    mean: mean.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?,
                    std: std.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?,
                }),
                _ => Err("expected uniform_box or gaussian_clipped:<mean>:<std>".into()),
            }
        })?;
        let pi0 = self.parse_with("init", "pi0", Pi0Spec::Diagonal, |v| {
            let parts: Vec<&str> = v.split(':').collect();
            match parts.as_slice() {
                ["diagonal"] => Ok(Pi0Spec::Diagonal),
                ["conditional_noise", std] => Ok(Pi0Spec::ConditionalNoise {
                    std: std.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?,
                }),
                _ => Err("expected diagonal or conditional_noise:<std>".into()),
            }
        })?;
        let init = InitSpec {
            nu0,
            pi0,
            n_attacks: self.usize_of("init", "n_attacks", 4)?,
            m_particles: self.usize_of("init", "m_particles", 32)?,
            seed,
            theta_box: BoxDomain::default_theta(d_prime),
        };

        let activation = self.parse_with("model", "activation", Activation::Sigmoid, |v| match v {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "squared_relu" => Ok(Activation::SquaredRelu),
            _ => Err("expected sigmoid, relu, or squared_relu".into()),
        })?;
        let loss = self.parse_with("model", "loss", Loss::Squared, |v| match v {
            "squared" => Ok(Loss::Squared),
            "logistic" => Ok(Loss::Logistic),
            _ => Err("expected squared or logistic".into()),
        })?;
        let attack_target = self.parse_with("model", "attack_target", AttackTarget::FullZ, |v| {
            match v {
                "full_z" => Ok(AttackTarget::FullZ),
                "x_only" => Ok(AttackTarget::XOnly),
                _ => Err("expected full_z or x_only".into()),
            }
        })?;
        let c_a = self.f64_of("model", "c_a", 1.0)?;
        if c_a <= 0.0 {
            return Err(CliError::config("[model] c_a must be positive"));
        }
        let model = PayoffModel::new(activation, loss, c_a, attack_target);

        let schedule = self.parse_with(
            "solver",
            "schedule",
            StepSchedule::InverseT { eta0: 0.1 },
            |v| {
                let parts: Vec<&str> = v.split(':').collect();
                let eta0 = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| e.to_string())
                        .and_then(|x| if x > 0.0 { Ok(x) } else { Err("eta0 must be positive".into()) })
                };
                match parts.as_slice() {
                    ["constant", x] => Ok(StepSchedule::Constant { eta0: eta0(x)? }),
                    ["inverse_t", x] => Ok(StepSchedule::InverseT { eta0: eta0(x)? }),
                    _ => Err("expected constant:<eta0> or inverse_t:<eta0>".into()),
                }
            },
        )?;
        let kappa = self.f64_of("solver", "kappa", 0.25)?;
        if kappa <= 0.0 {
            return Err(CliError::config("[solver] kappa must be positive"));
        }
        let inner_repeats = self.usize_of("solver", "inner_repeats", 1)?;
        if inner_repeats == 0 {
            return Err(CliError::config("[solver] inner_repeats must be at least 1"));
        }
        let solver = SolverConfig {
            schedule,
            kappa,
            inner_repeats,
            ascent_uses_eta: self.bool_of("solver", "ascent_uses_eta", true)?,
            ascent_dt: self.f64_of("solver", "ascent_dt", 0.05)?,
            max_steps: self.u64_of("solver", "max_steps", 1000)?,
            checkpoint_every: self.u64_of("solver", "checkpoint_every", 10)?,
            snapshot_every: self.u64_of("solver", "snapshot_every", 100)?,
            seed,
        };

        let averaging = self.parse_with("averaging", "kind", AveragerKind::FullMixture, |v| {
            let parts: Vec<&str> = v.split(':').collect();
            match parts.as_slice() {
                ["full_mixture"] => Ok(AveragerKind::FullMixture),
                ["weights_only"] => Ok(AveragerKind::WeightsOnly),
                ["rsr", cap] => {
                    let cap: usize = cap.parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
                    if cap == 0 {
                        return Err("rsr capacity must be at least 1".into());
                    }
                    Ok(AveragerKind::RsrCapped(cap))
                }
                _ => Err("expected full_mixture, weights_only, or rsr:<cap>".into()),
            }
        })?;

        let eval = EvalConfig {
            nash_gap: self.bool_of("eval", "nash_gap", false)?,
            adversary: AdversaryOpts {
                restarts: self.usize_of("eval", "br_restarts", 8)?,
                max_iters: self.usize_of("eval", "br_max_iters", 200)?,
                seed,
            },
            learner: LearnerOpts {
                epochs: self.usize_of("eval", "refit_epochs", 5)?,
                steps_per_epoch: self.usize_of("eval", "refit_steps_per_epoch", 20)?,
                update_weights: self.bool_of("eval", "refit_update_weights", false)?,
                kappa,
            },
            pgd_enabled: self.bool_of("eval", "pgd_enabled", false)?,
            pgd: PgdConfig {
                steps: self.usize_of("eval", "pgd_steps", 20)?,
                step_size: self.f64_of("eval", "pgd_step_size", 0.04)?,
            },
            pgd_epsilon: self.f64_of("eval", "pgd_epsilon", 0.3)?,
            accuracy_threshold: self.f64_of("eval", "accuracy_threshold", 0.5)?,
        };

        let out_dir: PathBuf = self.get("output", "dir").unwrap_or("runs/out").into();

        Ok(ExperimentConfig {
            dataset,
            init,
            model,
            solver,
            averaging,
            eval,
            out_dir,
        })
    }
}

impl ExperimentConfig {
    pub fn build_dataset(&self) -> Result<Dataset, CliError> {
        let data = match &self.dataset {
            DatasetSpec::Regression1d { n, noise_std, seed } => {
                wada_core::data::gen_regression_1d(*n, *noise_std, *seed)?
            }
            DatasetSpec::TwoMoons { n, noise_std, seed } => {
                wada_core::data::gen_two_moons(*n, *noise_std, *seed)?
            }
            DatasetSpec::Csv { path, input_dim } => {
                let schema = DataSchema {
                    input_dim: *input_dim,
                    z_box: BoxDomain::default_z(*input_dim),
                };
                wada_core::data::load_csv_path(path, &schema)?
            }
        };
        Ok(data)
    }

    /// Serialize back to the config grammar with every field resolved.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[dataset]");
        match &self.dataset {
            DatasetSpec::Regression1d { n, noise_std, .. } => {
                let _ = writeln!(s, "kind = regression_1d\nn = {n}\nnoise_std = {noise_std}");
            }
            DatasetSpec::TwoMoons { n, noise_std, .. } => {
                let _ = writeln!(s, "kind = two_moons\nn = {n}\nnoise_std = {noise_std}");
            }
            DatasetSpec::Csv { path, input_dim } => {
                let _ = writeln!(s, "kind = csv\npath = {}\ninput_dim = {input_dim}", path.display());
            }
        }
        let _ = writeln!(s, "\n[init]");
        match self.init.nu0 {
            Nu0Spec::UniformBox => {
                let _ = writeln!(s, "nu0 = uniform_box");
            }
            Nu0Spec::GaussianClipped { mean, std } => {
                let _ = writeln!(s, "nu0 = gaussian_clipped:{mean}:{std}");
            }
        }
        match self.init.pi0 {
            Pi0Spec::Diagonal => {
                let _ = writeln!(s, "pi0 = diagonal");
            }
            Pi0Spec::ConditionalNoise { std } => {
                let _ = writeln!(s, "pi0 = conditional_noise:{std}");
            }
        }
        let _ = writeln!(
            s,
            "n_attacks = {}\nm_particles = {}",
            self.init.n_attacks, self.init.m_particles
        );
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(
            s,
            "activation = {}\nloss = {}\nc_a = {}\nattack_target = {}",
            match self.model.activation {
                Activation::Sigmoid => "sigmoid",
                Activation::Relu => "relu",
                Activation::SquaredRelu => "squared_relu",
            },
            match self.model.loss {
                Loss::Squared => "squared",
                Loss::Logistic => "logistic",
            },
            self.model.c_a,
            match self.model.attack_target {
                AttackTarget::FullZ => "full_z",
                AttackTarget::XOnly => "x_only",
            }
        );
        let _ = writeln!(s, "\n[solver]");
        let _ = writeln!(
            s,
            "schedule = {}",
            match self.solver.schedule {
                StepSchedule::Constant { eta0 } => format!("constant:{eta0}"),
                StepSchedule::InverseT { eta0 } => format!("inverse_t:{eta0}"),
            }
        );
        let _ = writeln!(
            s,
            "kappa = {}\ninner_repeats = {}\nascent_uses_eta = {}\nascent_dt = {}\nmax_steps = {}\ncheckpoint_every = {}\nsnapshot_every = {}\nseed = {}",
            self.solver.kappa,
            self.solver.inner_repeats,
            self.solver.ascent_uses_eta,
            self.solver.ascent_dt,
            self.solver.max_steps,
            self.solver.checkpoint_every,
            self.solver.snapshot_every,
            self.solver.seed
        );
        let _ = writeln!(s, "\n[averaging]");
        let _ = writeln!(
            s,
            "kind = {}",
            match self.averaging {
                AveragerKind::FullMixture => "full_mixture".to_string(),
                AveragerKind::WeightsOnly => "weights_only".to_string(),
                AveragerKind::RsrCapped(cap) => format!("rsr:{cap}"),
            }
        );
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(
            s,
            "nash_gap = {}\nbr_restarts = {}\nbr_max_iters = {}\nrefit_epochs = {}\nrefit_steps_per_epoch = {}\nrefit_update_weights = {}\npgd_enabled = {}\npgd_steps = {}\npgd_step_size = {}\npgd_epsilon = {}\naccuracy_threshold = {}",
            self.eval.nash_gap,
            self.eval.adversary.restarts,
            self.eval.adversary.max_iters,
            self.eval.learner.epochs,
            self.eval.learner.steps_per_epoch,
            self.eval.learner.update_weights,
            self.eval.pgd_enabled,
            self.eval.pgd.steps,
            self.eval.pgd.step_size,
            self.eval.pgd_epsilon,
            self.eval.accuracy_threshold
        );
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.out_dir.display());
        s
    }

    /// Propagate a seed override into every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        self.init.seed = seed;
        self.solver.seed = seed;
        self.eval.adversary.seed = seed;
        match &mut self.dataset {
            DatasetSpec::Regression1d { seed: s, .. } | DatasetSpec::TwoMoons { seed: s, .. } => {
                *s = seed;
            }
            DatasetSpec::Csv { .. } => {}
        }
    }

    pub fn nash_gap_opts(&self) -> NashGapOpts {
        NashGapOpts {
            adversary: self.eval.adversary,
            learner: self.eval.learner,
        }
    }
}
