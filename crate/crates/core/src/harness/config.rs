//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{FedZooError, Result};
use crate::estimators::{FdParams, GammaSchedule, StepRule, TheoryParams};
use crate::federation::{ActiveQueryConfig, Algorithm, FederationConfig, DEFAULT_TRAJECTORY_WINDOW};
use crate::kernel::KernelParams;

/// Environment variable that replaces `output_dir` when set and non-empty.
pub const OUTPUT_DIR_ENV: &str = "FEDZOO_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    #[default]
    InverseIteration,
    Constant,
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticsLevel {
    #[default]
    Off,
    /// One row per client and round, taken at the last local iteration.
    Round,
    /// One row per client and local iteration.
    Iteration,
}

/// Every knob of an experiment. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub clients: usize,
    pub heterogeneity: f64,
    pub noise_std: f64,

    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub local_iterations: usize,
    pub learning_rate: f64,
    /// Adam unless overridden; the library-level default is plain GD.
    pub step_rule: StepRule,

    pub gamma_schedule: GammaKind,
    pub gamma_constant: f64,
    /// Heterogeneity bound for the theoretical schedule; estimated from the suite when absent.
    pub theory_g: Option<f64>,
    pub theory_omega: f64,
    /// Defaults to `1 / lengthscale²`.
    pub theory_kappa: Option<f64>,
    pub theory_rho: f64,
    pub theory_epsilon: f64,

    pub prox_gamma: f64,
    pub fd_smoothing: f64,
    pub fd_directions: usize,
    pub active_candidates: usize,
    pub active_radius: f64,
    pub active_select: usize,
    pub active_per_iteration: bool,
    pub active_post_aggregation: bool,
    pub features: usize,
    pub lengthscale: f64,
    pub gp_noise_variance: f64,
    /// Most recent observations kept per client GP; `0` keeps all of them.
    pub trajectory_window: usize,

    /// Start point in normalized coordinates; drawn per seed when absent.
    pub x0: Option<Vec<f64>>,
    pub workers: usize,
    pub shared_client_seeds: bool,

    pub output_dir: PathBuf,
    pub emit_plots: bool,
    pub diagnostics: DiagnosticsLevel,
    pub dump_coefficients: bool,
    pub error_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        ExperimentConfig {
            dim: 30,
            clients: 5,
            heterogeneity: 5.0,
            noise_std: 0.01,
            algorithms: Algorithm::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            rounds: fed.rounds,
            local_iterations: fed.local_iterations,
            learning_rate: fed.learning_rate,
            step_rule: StepRule::Adam,
            gamma_schedule: GammaKind::default(),
            gamma_constant: 1.0,
            theory_g: None,
            theory_omega: 1.0,
            theory_kappa: None,
            theory_rho: 0.9,
            theory_epsilon: 0.0,
            prox_gamma: fed.prox_gamma,
            fd_smoothing: fed.fd.smoothing,
            fd_directions: fed.fd.directions,
            active_candidates: fed.active.candidates,
            active_radius: fed.active.radius,
            active_select: fed.active.select,
            active_per_iteration: fed.active.per_iteration,
            active_post_aggregation: fed.active.post_aggregation,
            features: fed.features,
            lengthscale: fed.kernel.lengthscale,
            gp_noise_variance: fed.gp_noise_variance,
            trajectory_window: DEFAULT_TRAJECTORY_WINDOW,
            x0: None,
            workers: fed.workers,
            shared_client_seeds: false,
            output_dir: PathBuf::from("results"),
            emit_plots: false,
            diagnostics: DiagnosticsLevel::Off,
            dump_coefficients: false,
            error_threshold: 0.05,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FedZooError::config(field, format!("must be positive, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(FedZooError::config(field, "must be at least 1"))
    }
}

impl ExperimentConfig {
    /// Parses TOML text. Parse failures are config errors; the message carries
    /// the offending key and location.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.to_string();
            let field = field_from_message(&message).unwrap_or_else(|| "config".to_string());
            FedZooError::config(field, message.trim_end().to_string())
        })
    }

    /// Reads, parses, applies the output-directory override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedZooError::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env_override();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env_override(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    /// Checks every field without running anything. The output directory must
    /// be creatable and writable.
    pub fn validate(&self) -> Result<()> {
        self.validate_fields()?;
        check_writable(&self.output_dir)
    }

    /// Field checks only; no filesystem access.
    pub fn validate_fields(&self) -> Result<()> {
        at_least_one("dim", self.dim)?;
        at_least_one("clients", self.clients)?;
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(FedZooError::config("heterogeneity", format!("must be >= 0, got {}", self.heterogeneity)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(FedZooError::config("noise_std", format!("must be >= 0, got {}", self.noise_std)));
        }
        if self.algorithms.is_empty() {
            return Err(FedZooError::config("algorithms", "must name at least one algorithm"));
        }
        for (i, a) in self.algorithms.iter().enumerate() {
            if self.algorithms[..i].contains(a) {
                return Err(FedZooError::config("algorithms", format!("`{a}` is listed twice")));
            }
        }
        if self.seeds.is_empty() {
            return Err(FedZooError::config("seeds", "must list at least one seed"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(FedZooError::config("seeds", format!("seed {s} is listed twice")));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != self.dim {
                return Err(FedZooError::config("x0", format!("needs {} entries, got {}", self.dim, x0.len())));
            }
            if let Some(v) = x0.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(FedZooError::config("x0", format!("entries must lie in [0, 1], got {v}")));
            }
        }
        if let Some(g) = self.theory_g {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(FedZooError::config("theory_g", format!("must be >= 0, got {g}")));
            }
        }
        if let Some(k) = self.theory_kappa {
            positive("theory_kappa", k)?;
        }
        positive("error_threshold", self.error_threshold)?;
        // Everything else is checked by the federation layer with matching names.
        let mut probe = self.federation(Algorithm::Fzoos, 0, 1.0);
        probe.validate()?;
        probe.algorithm = Algorithm::FedZo;
        probe.validate()
    }

    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            lengthscale: self.lengthscale,
        }
    }

    /// The schedule for one run; `estimated_g` fills in a missing `theory_g`.
    pub fn gamma(&self, estimated_g: f64) -> GammaSchedule {
        match self.gamma_schedule {
            GammaKind::InverseIteration => GammaSchedule::InverseIteration,
            GammaKind::Constant => GammaSchedule::Constant(self.gamma_constant),
            GammaKind::Theoretical => GammaSchedule::Theoretical(TheoryParams {
                heterogeneity: self.theory_g.unwrap_or(estimated_g),
                omega: self.theory_omega,
                kappa: self
                    .theory_kappa
                    .unwrap_or(1.0 / (self.lengthscale * self.lengthscale)),
                rho: self.theory_rho,
                epsilon: self.theory_epsilon,
                clients: self.clients,
                local_iterations: self.local_iterations,
            }),
        }
    }

    /// Federation settings for one algorithm and seed.
    pub fn federation(&self, algorithm: Algorithm, seed: u64, estimated_g: f64) -> FederationConfig {
        FederationConfig {
            algorithm,
            rounds: self.rounds,
            local_iterations: self.local_iterations,
            learning_rate: self.learning_rate,
            step_rule: self.step_rule,
            gamma: self.gamma(estimated_g),
            prox_gamma: self.prox_gamma,
            fd: FdParams {
                smoothing: self.fd_smoothing,
                directions: self.fd_directions,
            },
            active: ActiveQueryConfig {
                candidates: self.active_candidates,
                radius: self.active_radius,
                select: self.active_select,
                per_iteration: self.active_per_iteration,
                post_aggregation: self.active_post_aggregation,
            },
            features: self.features,
            kernel: self.kernel(),
            gp_noise_variance: self.gp_noise_variance,
            trajectory_window: (self.trajectory_window > 0).then_some(self.trajectory_window),
            master_seed: seed,
            workers: self.workers,
            shared_client_seeds: self.shared_client_seeds,
            record_iterations: self.diagnostics != DiagnosticsLevel::Off,
        }
    }
}

/// Pulls a key name out of a TOML deserialization message.
fn field_from_message(message: &str) -> Option<String> {
    if let Some(rest) = message.split("unknown field `").nth(1) {
        return rest.split('`').next().map(str::to_string);
    }
    if let Some(rest) = message.split("unknown variant `").nth(1) {
        return rest.split('`').next().map(str::to_string);
    }
    // Spanned errors quote the offending line, e.g. `1 | learning_rate = "x"`.
    message.lines().find_map(|line| {
        let (_, body) = line.split_once(" | ")?;
        let (key, _) = body.split_once('=')?;
        let key = key.trim();
        (!key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')).then(|| key.to_string())
    })
}

/// The directory exists (or can be created) and accepts new files.
fn check_writable(dir: &Path) -> Result<()> {
    let not_writable = |reason: String| FedZooError::config("output_dir", format!("{}: {reason}", dir.display()));
    let mut existing = dir;
    while !existing.exists() {
        match existing.parent() {
            Some(p) if !p.as_os_str().is_empty() => existing = p,
            _ => {
                existing = Path::new(".");
                break;
            }
        }
    }
    if !existing.is_dir() {
        return Err(not_writable(format!("{} is not a directory", existing.display())));
    }
    let probe = existing.join(format!(".fedzoo-write-probe-{}", std::process::id()));
    std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&probe)
        .map_err(|e| not_writable(format!("not writable ({e})")))?;
    let _ = std::fs::remove_file(&probe);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: FedZooError) -> String {
        match err {
            FedZooError::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate_fields().unwrap();
    }

    #[test]
    fn keys_are_read() {
        let cfg = ExperimentConfig::from_toml_str(
            "dim = 2\nclients = 2\nrounds = 2\nlocal_iterations = 2\nalgorithms = [\"fedzo\", \"fzoos\"]\n\
             seeds = [7]\nstep_rule = \"gd\"\ngamma_schedule = \"constant\"\ngamma_constant = 0.5\n\
             diagnostics = \"iteration\"\ntrajectory_window = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.dim, 2);
        assert_eq!(cfg.algorithms, vec![Algorithm::FedZo, Algorithm::Fzoos]);
        assert_eq!(cfg.step_rule, StepRule::Gd);
        let fed = cfg.federation(Algorithm::Fzoos, 7, 0.0);
        assert_eq!(fed.gamma, GammaSchedule::Constant(0.5));
        assert_eq!(fed.trajectory_window, None);
        assert!(fed.record_iterations);
        assert_eq!(fed.master_seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::from_toml_str("learnin_rate = 0.1\n").unwrap_err();
        assert_eq!(field_of(err), "learnin_rate");
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = ExperimentConfig::from_toml_str("rounds = 3\nlearning_rate = \"fast\"\n").unwrap_err();
        assert_eq!(field_of(err), "learning_rate");
    }

    type Mutation = Box<dyn Fn(&mut ExperimentConfig)>;

    #[test]
    fn validation_names_fields() {
        let cases: Vec<(&str, Mutation)> = vec![
            ("learning_rate", Box::new(|c| c.learning_rate = -1.0)),
            ("dim", Box::new(|c| c.dim = 0)),
            ("seeds", Box::new(|c| c.seeds.clear())),
            ("algorithms", Box::new(|c| c.algorithms.clear())),
            ("heterogeneity", Box::new(|c| c.heterogeneity = -0.5)),
            ("x0", Box::new(|c| c.x0 = Some(vec![0.5]))),
            ("fd_directions", Box::new(|c| c.fd_directions = 0)),
            ("active_radius", Box::new(|c| c.active_radius = 0.0)),
            ("gamma_constant", Box::new(|c| {
                c.gamma_schedule = GammaKind::Constant;
                c.gamma_constant = 2.0;
            })),
            ("theory_rho", Box::new(|c| {
                c.gamma_schedule = GammaKind::Theoretical;
                c.theory_rho = 0.0;
            })),
            ("error_threshold", Box::new(|c| c.error_threshold = 0.0)),
        ];
        for (field, mutate) in cases {
            let mut cfg = ExperimentConfig::default();
            mutate(&mut cfg);
            assert_eq!(field_of(cfg.validate_fields().unwrap_err()), field);
        }
    }

    #[test]
    fn output_dir_must_be_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        let cfg = ExperimentConfig {
            output_dir: file.join("sub"),
            ..ExperimentConfig::default()
        };
        assert_eq!(field_of(cfg.validate().unwrap_err()), "output_dir");
        let ok = ExperimentConfig {
            output_dir: dir.path().join("new/nested"),
            ..ExperimentConfig::default()
        };
        ok.validate().unwrap();
        assert!(!dir.path().join("new").exists());
    }
}
