//! Run configuration and the `solve`, `train` and `check` commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checks::{run_checks, CheckSettings, Hooks, CHECK_NAMES};
use crate::dp::{em_solve, EStepMethod, ImprovementMode, SolverConfig};
use crate::envs::{make_chain, make_gridworld, make_random_mdp, make_twist2, Environment, FiniteMdpEnv, PendulumEnv, PendulumParams};
use crate::error::{Error, Result};
use crate::io::{fmt_real, CsvTable};
use crate::mdp::{discount_transform, FiniteMdp};
use crate::sampled::{final_return, metrics_table, train, Algorithm, TrainConfig};
use crate::tables::{TabularPolicy, Temperature};
use crate::util::mean_sd;
use crate::variational::OperatorMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Exit code for an error: numerical failures abort with 3, everything else
/// is a configuration or input problem.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Chain,
    Twist2,
    Gridworld,
    Random,
    File,
    Pendulum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSection {
    pub kind: EnvKind,
    /// Gridworld side length.
    pub size: usize,
    /// MDP document for `kind = "file"`, relative to the config file.
    pub path: Option<PathBuf>,
    pub n_states: usize,
    pub n_actions: usize,
    pub layers: usize,
    pub seed: u64,
    /// Applies the discount transform when set.
    pub gamma: Option<f64>,
    /// Episode length cap for sampled training on finite MDPs.
    pub step_cap: usize,
    /// Pendulum episode length.
    pub episode_cap: usize,
}

impl Default for MdpSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::Chain,
            size: 3,
            path: None,
            n_states: 6,
            n_actions: 2,
            layers: 3,
            seed: 0,
            gamma: None,
            step_cap: 100,
            episode_cap: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub eta: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub improvement: ImprovementMode,
    pub method: EStepMethod,
    pub mode: OperatorMode,
    pub em_iterations: usize,
    pub lambda: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::default();
        Self {
            eta: 1.0,
            tolerance: c.tolerance,
            max_sweeps: c.max_sweeps,
            improvement: c.improvement,
            method: EStepMethod::ModelBasedPi,
            mode: OperatorMode::ModelBased,
            em_iterations: 5,
            lambda: 0.0,
        }
    }
}

impl SolverSection {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            max_sweeps: self.max_sweeps,
            improvement: self.improvement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    /// Suites to run; empty means all.
    pub names: Vec<String>,
    pub instances: usize,
    /// Replaces one implementation with a corrupted one.
    pub inject_fault: Option<String>,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            instances: CheckSettings::default().instances,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mdp: MdpSection,
    pub solver: SolverSection,
    pub train: TrainConfig,
    pub check: CheckSection,
    /// Directory for resolving relative paths; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_string())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate_solver(&self) -> Result<()> {
        if !(self.solver.eta > 0.0 && self.solver.eta.is_finite()) {
            return Err(Error::config("solver.eta", "must be positive and finite"));
        }
        self.solver.solver_config().validate()?;
        if self.solver.em_iterations == 0 {
            return Err(Error::config("solver.em_iterations", "must be at least 1"));
        }
        if !(self.solver.lambda >= 0.0 && self.solver.lambda.is_finite()) {
            return Err(Error::config("solver.lambda", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// The finite MDP described by `[mdp]`, discount-transformed when
    /// `gamma` is set.
    pub fn finite_mdp(&self) -> Result<FiniteMdp> {
        let m = &self.mdp;
        let mdp = match m.kind {
            EnvKind::Chain => make_chain(),
            EnvKind::Twist2 => make_twist2(),
            EnvKind::Gridworld => {
                make_gridworld(m.size).map_err(|e| Error::config("mdp.size", e.to_string()))?
            }
            EnvKind::Random => make_random_mdp(m.n_states, m.n_actions, m.layers, m.seed)
                .map_err(|e| Error::config("mdp.n_states", e.to_string()))?,
            EnvKind::File => {
                let rel = m.path.as_ref().ok_or_else(|| Error::config("mdp.path", "required for kind = \"file\""))?;
                let path = self.base_dir.join(rel);
                if !path.exists() {
                    return Err(Error::config("mdp.path", format!("{} does not exist", path.display())));
                }
                FiniteMdp::load(&path)?
            }
            EnvKind::Pendulum => return Err(Error::config("mdp.kind", "pendulum is not a finite MDP")),
        };
        match m.gamma {
            None => Ok(mdp),
            Some(g) if g > 0.0 && g < 1.0 => discount_transform(&mdp, g),
            Some(_) => Err(Error::config("mdp.gamma", "must lie in (0, 1)")),
        }
    }

    pub fn environment(&self) -> Result<Box<dyn Environment>> {
        match self.mdp.kind {
            EnvKind::Pendulum => {
                if self.mdp.episode_cap == 0 {
                    return Err(Error::config("mdp.episode_cap", "must be at least 1"));
                }
                Ok(Box::new(PendulumEnv::new(PendulumParams {
                    episode_cap: self.mdp.episode_cap,
                    ..Default::default()
                })))
            }
            _ => {
                if self.mdp.step_cap == 0 {
                    return Err(Error::config("mdp.step_cap", "must be at least 1"));
                }
                Ok(Box::new(FiniteMdpEnv::new(self.finite_mdp()?, self.mdp.step_cap)))
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(Error::from)
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::config("--out", format!("cannot create {}: {e}", out.display())))
}

/// Policy rows as CSV: `state,<action names...>`.
fn policy_table(mdp: &FiniteMdp, pi: &TabularPolicy) -> CsvTable {
    let mut header = vec!["state"];
    header.extend(mdp.action_names().iter().map(String::as_str));
    let mut t = CsvTable::new(&header);
    for x in 0..mdp.n_states() {
        let mut row = vec![mdp.state_names()[x].clone()];
        row.extend(pi.row(x).iter().map(|&p| fmt_real(p)));
        t.push(row);
    }
    t
}

/// Exact EM on the configured finite MDP. Writes `iterations.csv`
/// (iteration, residual, elbo, log_likelihood), `policy.csv` (the final
/// variational policy `q_c*`), `baseline.csv` (the baseline after the last
/// M-step) and `value.csv`.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate_solver()?;
    let mdp = cfg.finite_mdp()?;
    mdp.ensure_valid()?;
    let eta = Temperature::new(cfg.solver.eta)?;
    let pi0 = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let records = em_solve(
        &mdp,
        eta,
        &pi0,
        cfg.solver.em_iterations,
        cfg.solver.lambda,
        &cfg.solver.solver_config(),
        cfg.solver.method,
        cfg.solver.mode,
    )?;
    prepare_out(out)?;
    let mut iters = CsvTable::new(&["iteration", "residual", "elbo", "log_likelihood"]);
    for r in &records {
        iters.push(vec![
            r.iteration.to_string(),
            fmt_real(r.solution.residual),
            fmt_real(r.elbo),
            fmt_real(r.log_likelihood),
        ]);
    }
    iters.write(out.join("iterations.csv"))?;
    let last = records.last().expect("at least one EM iteration");
    policy_table(&mdp, &last.solution.q_c_star).write(out.join("policy.csv"))?;
    let next = crate::dp::m_step_exact(&mdp, &last.solution, &last.baseline, cfg.solver.lambda)?;
    policy_table(&mdp, &next).write(out.join("baseline.csv"))?;
    let mut values = CsvTable::new(&["state", "value"]);
    for x in 0..mdp.n_states() {
        values.push(vec![mdp.state_names()[x].clone(), fmt_real(last.solution.v_pi.get(x))]);
    }
    values.write(out.join("value.csv"))?;
    Ok(())
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Vmbpo => "vmbpo",
        Algorithm::VmbpoMfe => "vmbpo_mfe",
    }
}

/// Final returns per seed from [`cmd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub seeds: Vec<u64>,
    pub final_returns: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Trains once per seed, writing `metrics_seed<k>.csv` for each and
/// `summary.csv` with the mean and standard deviation of final returns.
pub fn cmd_train(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<TrainSummary> {
    if seeds.is_empty() {
        return Err(Error::config("--seed", "give at least one seed"));
    }
    cfg.train.validate()?;
    let env = cfg.environment()?;
    prepare_out(out)?;
    let mut finals = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = train(env.as_ref(), &cfg.train, seed)?;
        metrics_table(&outcome.metrics).write(out.join(format!("metrics_seed{seed}.csv")))?;
        finals.push(final_return(&outcome.metrics));
    }
    let (mean, sd) = mean_sd(&finals);
    let sd = if finals.len() > 1 { sd } else { 0.0 };
    let mut summary = CsvTable::new(&["algorithm", "seed", "final_return"]);
    for (s, f) in seeds.iter().zip(&finals) {
        summary.push(vec![algorithm_name(cfg.train.algorithm).into(), s.to_string(), fmt_real(*f)]);
    }
    summary.push(vec![algorithm_name(cfg.train.algorithm).into(), "mean".into(), fmt_real(mean)]);
    summary.push(vec![algorithm_name(cfg.train.algorithm).into(), "sd".into(), fmt_real(sd)]);
    summary.write(out.join("summary.csv"))?;
    Ok(TrainSummary {
        seeds: seeds.to_vec(),
        final_returns: finals,
        mean,
        sd,
    })
}

/// Runs the configured suites once per seed. Returns the printed report and
/// whether every suite passed; the report is also written to `checks.txt`.
pub fn cmd_check(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<(String, bool)> {
    let hooks = match &cfg.check.inject_fault {
        None => Hooks::default(),
        Some(f) => Hooks::with_fault(f)?,
    };
    if cfg.check.instances == 0 {
        return Err(Error::config("check.instances", "must be at least 1"));
    }
    let names: Vec<String> = if cfg.check.names.is_empty() {
        CHECK_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        for n in &cfg.check.names {
            if !CHECK_NAMES.contains(&n.as_str()) {
                return Err(Error::config("check.names", format!("unknown check {n:?}")));
            }
        }
        cfg.check.names.clone()
    };
    let seeds = if seeds.is_empty() { &[0][..] } else { seeds };
    let mut report = String::new();
    let mut all = true;
    for &seed in seeds {
        let settings = CheckSettings {
            seed,
            instances: cfg.check.instances,
        };
        for r in run_checks(&names, &settings, &hooks)? {
            all &= r.passed;
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            writeln!(report, "{verdict} {} seed={seed} {}", r.name, r.detail).expect("write to string");
        }
    }
    prepare_out(out)?;
    write_file(&out.join("checks.txt"), &report)?;
    Ok((report, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.mdp.kind, EnvKind::Chain);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let e = RunConfig::from_toml_str("[solver]\ntolerence = 1e-3\n").unwrap_err();
        match e {
            Error::Config { field, .. } => assert_eq!(field, "tolerence"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonpositive_tolerance_names_the_field() {
        let c = RunConfig::from_toml_str("[solver]\ntolerance = 0.0\n").unwrap();
        match c.validate_solver().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "solver.tolerance"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pendulum_is_not_solvable() {
        let c = RunConfig::from_toml_str("[mdp]\nkind = \"pendulum\"\n").unwrap();
        assert!(matches!(c.finite_mdp(), Err(Error::Config { .. })));
        assert!(c.environment().is_ok());
    }

    #[test]
    fn gamma_adds_the_exit() {
        let c = RunConfig::from_toml_str("[mdp]\nkind = \"chain\"\ngamma = 0.9\n").unwrap();
        let m = c.finite_mdp().unwrap();
        assert!(m.n_states() >= 2);
        let bad = RunConfig::from_toml_str("[mdp]\ngamma = 1.5\n").unwrap();
        assert!(matches!(bad.finite_mdp(), Err(Error::Config { .. })));
    }

    #[test]
    fn exit_codes_split_numerical_from_config() {
        let num = Error::NonFinite {
            what: "q loss".into(),
            step: 3,
        };
        assert_eq!(exit_code(&num), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::config("x", "y")), EXIT_CONFIG);
    }
}
