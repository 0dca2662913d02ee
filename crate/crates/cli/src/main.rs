//! `rlhf-lab` command line: world files, verification campaigns, threshold
//! and budget calibration, finite-class PAC-Bayes bounds, and OU checks.
//!
//! Exit status is 0 when every check passes, 1 when a check or campaign
//! target fails, and 2 for usage or input errors.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use rlhf_lab::bounds::{finite_class_kl, pacbayes_bound, FiniteClassSpec, OuSpec};
use rlhf_lab::calibration::{
    alpha, budget_prefill_decode, budget_uniform, budget_variance, clip_everything, empirical_tau,
    optimal_tau, variance_decomposition, Allocation, CostModel, VarianceDecomposition,
};
use rlhf_lab::campaign::{
    noisy_reward_model, parse_targets, random_ou_instances, random_policy, run_campaign,
    to_report_json, CampaignConfig, OuCheck,
};
use rlhf_lab::config::{load_world, WorldConfig};
use rlhf_lab::objectives::{truncation_mass, ClipPenaltySpec};
use rlhf_lab::sampling::{
    draw_sample, read_rollout_dump, rollout_records, write_rollout_dump, SampleBudget,
};
use rlhf_lab::world::{build_world, Policy, TabularWorld};

#[derive(Parser)]
#[command(
    name = "rlhf-lab",
    version,
    about = "Clipped-KL RLHF objectives, bounds and calibration on tabular worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, check or sample from world files.
    #[command(subcommand)]
    World(WorldCmd),
    /// Run a seeded verification campaign and write CSV and JSON reports.
    Verify(VerifyArgs),
    /// Calibrate the clipping threshold or the rollout allocation.
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
    /// Evaluate the finite-class PAC-Bayes bound.
    Pacbayes(PacBayesArgs),
    /// Check OU stationary covariances and the Gaussian KL bound.
    Ou(OuArgs),
}

#[derive(Subcommand)]
enum WorldCmd {
    /// Write a world file holding the generated tables.
    Gen(WorldGenArgs),
    /// Validate a world file and print its summary.
    Check { path: PathBuf },
    /// Sample rollouts from a world and write them as JSONL.
    Dump(DumpArgs),
}

#[derive(Args)]
struct WorldGenArgs {
    #[arg(long, default_value_t = 8)]
    n_prompts: usize,
    #[arg(long, default_value_t = 16)]
    n_responses: usize,
    #[arg(long, default_value = "dirichlet(0.5), uniform-reward")]
    generator: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct BudgetArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    delta: f64,
}

impl BudgetArgs {
    fn budget(&self) -> anyhow::Result<SampleBudget> {
        Ok(SampleBudget::new(self.n, self.k, self.delta)?)
    }
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// Logit perturbation scale around the reference policy.
    #[arg(long, default_value_t = 2.0)]
    logit_scale: f64,
    #[arg(long, default_value_t = 0)]
    policy_seed: u64,
}

impl PolicyArgs {
    fn policy(&self, world: &TabularWorld) -> anyhow::Result<Policy> {
        Ok(random_policy(world, self.logit_scale, self.policy_seed)?)
    }
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    world: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Reward-model noise; rewards are exact when zero.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; falls back to the config's seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Comma-separated subset of lemma2,lemma3,lemma4,eq12,theorem1,theorem2-finite,ou,calibration.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CalibrateCmd {
    /// Clipping threshold from a rollout dump or exactly from a world.
    Tau(TauArgs),
    /// Rollouts per prompt under a fixed compute budget.
    Budget(BudgetCmdArgs),
}

#[derive(Args)]
struct TauArgs {
    #[arg(long, conflicts_with = "world", required_unless_present = "world")]
    from_dump: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct BudgetCmdArgs {
    #[arg(long)]
    budget: f64,
    #[arg(long)]
    c_prefill: f64,
    #[arg(long)]
    c_decode: f64,
    #[arg(long, requires = "sigma_rollout_sq", conflicts_with = "world")]
    sigma_prompt_sq: Option<f64>,
    #[arg(long, requires = "sigma_prompt_sq")]
    sigma_rollout_sq: Option<f64>,
    /// World whose exact variance decomposition feeds the variance-aware rule.
    #[arg(long)]
    world: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
}

#[derive(Args)]
struct PacBayesArgs {
    /// Number of pre-registered candidates.
    #[arg(long)]
    m: usize,
    /// `uniform`, `dirac:<index>`, or comma-separated posterior weights.
    #[arg(long, default_value = "uniform")]
    posterior: String,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    avg_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    avg_clip: f64,
}

#[derive(Args)]
struct OuArgs {
    /// TOML instance file; random instances are drawn when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Error that maps to exit status 1 rather than 2.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<CheckFailed>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::World(cmd) => world(cmd),
        Command::Verify(args) => verify(args),
        Command::Calibrate(CalibrateCmd::Tau(args)) => calibrate_tau(args),
        Command::Calibrate(CalibrateCmd::Budget(args)) => calibrate_budget(args),
        Command::Pacbayes(args) => pacbayes(args),
        Command::Ou(args) => ou(args),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_world_file(path: &Path) -> anyhow::Result<TabularWorld> {
    load_world(&read(path)?).with_context(|| path.display().to_string())
}

fn emit(out: Option<&Path>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(body.as_bytes())?),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    print!("{}", to_report_json(value)?);
    Ok(())
}

fn world(cmd: WorldCmd) -> anyhow::Result<()> {
    match cmd {
        WorldCmd::Gen(a) => {
            let gen = a.generator.parse()?;
            let w = build_world(a.n_prompts, a.n_responses, &gen, a.seed)?;
            emit(a.out.as_deref(), &WorldConfig::from_world(&w).to_toml()?)
        }
        WorldCmd::Check { path } => {
            let w = load_world_file(&path)?;
            println!(
                "ok: {} prompts x {} responses",
                w.n_prompts(),
                w.n_responses()
            );
            Ok(())
        }
        WorldCmd::Dump(a) => {
            let w = load_world_file(&a.world)?;
            let policy = a.policy.policy(&w)?;
            let model = noisy_reward_model(&w, a.noise, a.seed)?;
            let sample = draw_sample(&w, &policy, &a.budget.budget()?, a.seed)?;
            let records = rollout_records(&w, &policy, model.table(), a.tau, &sample)?;
            let mut buf = Vec::new();
            write_rollout_dump(&mut buf, &records)?;
            emit(a.out.as_deref(), std::str::from_utf8(&buf)?)
        }
    }
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => CampaignConfig::parse(&read(p)?).with_context(|| p.display().to_string())?,
        None => CampaignConfig::default(),
    };
    if let Some(t) = a.trials {
        config.trials = t;
    }
    if let Some(list) = &a.targets {
        config.targets = parse_targets(list)?;
    }
    config.validate()?;
    let seed = a.seed.or(config.seed).unwrap_or(0);

    let result = match run_campaign(&config, seed) {
        Ok(r) => r,
        Err(e @ rlhf_lab::LabError::TrialFailed { .. }) => {
            return Err(CheckFailed(e.to_string()).into())
        }
        Err(e) => return Err(e.into()),
    };
    let (csv, json) = result.write_reports(&a.out)?;
    print!("{}", result.to_csv());
    eprintln!("wrote {} and {}", csv.display(), json.display());

    let failing = result.failing_targets();
    if !failing.is_empty() {
        let names: Vec<String> = failing.iter().map(ToString::to_string).collect();
        bail!(CheckFailed(format!("failing targets: {}", names.join(","))));
    }
    Ok(())
}

#[derive(Serialize)]
struct TauReport {
    source: &'static str,
    alpha: f64,
    two_alpha: f64,
    clip_everything: bool,
    tau_hat: f64,
    /// Fraction of rollouts whose `|ell|` exceeds `tau_hat`.
    clip_fraction: f64,
    records: usize,
    /// A threshold read off the same rollouts it is applied to is a heuristic:
    /// the bounds assume a data-independent threshold.
    heuristic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    truncation_mass: Option<f64>,
}

fn calibrate_tau(a: TauArgs) -> anyhow::Result<()> {
    let budget = a.budget.budget()?;
    let alpha_val = alpha(&budget)?;
    let report = if let Some(path) = &a.from_dump {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records =
            read_rollout_dump(BufReader::new(file)).with_context(|| path.display().to_string())?;
        let mags: Vec<f64> = records.iter().map(|r| r.ell.abs()).collect();
        let tau_hat = empirical_tau(&mags, alpha_val)?;
        let clipped = mags.iter().filter(|&&m| m > tau_hat).count();
        TauReport {
            source: "dump",
            alpha: alpha_val,
            two_alpha: 2.0 * alpha_val,
            clip_everything: clip_everything(alpha_val),
            tau_hat,
            clip_fraction: clipped as f64 / mags.len() as f64,
            records: mags.len(),
            heuristic: true,
            truncation_mass: None,
        }
    } else {
        let path = a.world.as_ref().expect("clap enforces one source");
        let w = load_world_file(path)?;
        let policy = a.policy.policy(&w)?;
        let tau = optimal_tau(&w, &policy, &budget)?;
        let law = rlhf_lab::objectives::MagnitudeLaw::of_log_ratio(&w, &policy)?;
        TauReport {
            source: "world",
            alpha: alpha_val,
            two_alpha: 2.0 * alpha_val,
            clip_everything: clip_everything(alpha_val),
            tau_hat: tau,
            clip_fraction: law.prob_greater(tau),
            records: 0,
            heuristic: false,
            truncation_mass: Some(truncation_mass(&w, &policy, tau)?),
        }
    };
    print_json(&report)
}

#[derive(Serialize)]
struct BudgetReport {
    ratio: f64,
    uniform: Allocation,
    prefill_decode: Allocation,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<VarianceAllocation>,
}

#[derive(Serialize)]
struct VarianceAllocation {
    sigma_prompt_sq: f64,
    sigma_rollout_sq: f64,
    allocation: Allocation,
}

fn calibrate_budget(a: BudgetCmdArgs) -> anyhow::Result<()> {
    let cost = CostModel::new(a.budget, a.c_prefill, a.c_decode)?;
    let var = match (a.sigma_prompt_sq, a.sigma_rollout_sq, &a.world) {
        (Some(p), Some(r), _) => Some(VarianceDecomposition {
            sigma_prompt_sq: p,
            sigma_rollout_sq: r,
        }),
        (_, _, Some(path)) => {
            let w = load_world_file(path)?;
            let policy = a.policy.policy(&w)?;
            let spec = ClipPenaltySpec::new(a.beta, a.tau)?;
            Some(variance_decomposition(&w, &policy, w.r_star(), &spec)?)
        }
        _ => None,
    };
    if let Some(v) = &var {
        if !(v.sigma_prompt_sq >= 0.0 && v.sigma_rollout_sq >= 0.0) {
            bail!("variances must be nonnegative");
        }
    }
    let report = BudgetReport {
        ratio: cost.ratio(),
        uniform: budget_uniform(&cost),
        prefill_decode: budget_prefill_decode(&cost),
        variance: var.map(|v| VarianceAllocation {
            sigma_prompt_sq: v.sigma_prompt_sq,
            sigma_rollout_sq: v.sigma_rollout_sq,
            allocation: budget_variance(&cost, &v),
        }),
    };
    print_json(&report)
}

fn parse_posterior(text: &str, m: usize) -> anyhow::Result<FiniteClassSpec> {
    let text = text.trim();
    if text == "uniform" {
        return Ok(FiniteClassSpec::uniform(m)?);
    }
    if let Some(idx) = text.strip_prefix("dirac:") {
        return Ok(FiniteClassSpec::dirac(m, idx.trim().parse()?)?);
    }
    let weights = text
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .context("posterior must be `uniform`, `dirac:<index>` or a weight list")?;
    if weights.len() != m {
        bail!("posterior has {} weights but m = {m}", weights.len());
    }
    Ok(FiniteClassSpec::new(weights)?)
}

#[derive(Serialize)]
struct PacBayesOut {
    m: usize,
    kl: f64,
    bound: f64,
}

fn pacbayes(a: PacBayesArgs) -> anyhow::Result<()> {
    let class = parse_posterior(&a.posterior, a.m)?;
    let spec = ClipPenaltySpec::new(a.beta, a.tau)?;
    let kl = finite_class_kl(&class);
    let bound = pacbayes_bound(kl, &a.budget.budget()?, &spec, a.avg_shift, a.avg_clip)?;
    print_json(&PacBayesOut { m: a.m, kl, bound })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OuFile {
    theta_hat: Vec<f64>,
    theta_0: Vec<f64>,
    lambda: Vec<Vec<f64>>,
    hessian: Vec<Vec<f64>>,
    sigma_g: Vec<Vec<f64>>,
    epsilon: f64,
    m_lo: Option<f64>,
    m_hi: Option<f64>,
}

fn matrix(name: &str, rows: &[Vec<f64>], d: usize) -> anyhow::Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        bail!("{name} must be {d}x{d}");
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl OuFile {
    fn spec(&self) -> anyhow::Result<OuSpec> {
        let d = self.theta_hat.len();
        if self.theta_0.len() != d {
            bail!("theta_0 must have {d} entries");
        }
        let hessian = matrix("hessian", &self.hessian, d)?;
        let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
        let spec = OuSpec {
            theta_hat: DVector::from_vec(self.theta_hat.clone()),
            theta_0: DVector::from_vec(self.theta_0.clone()),
            lambda: matrix("lambda", &self.lambda, d)?,
            sigma_g: matrix("sigma_g", &self.sigma_g, d)?,
            hessian,
            epsilon: self.epsilon,
            m_lo: self.m_lo.unwrap_or_else(|| eig.min()),
            m_hi: self.m_hi.unwrap_or_else(|| eig.max()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Serialize)]
struct OuOut {
    dim: usize,
    #[serde(flatten)]
    check: OuCheck,
    pass: bool,
}

fn ou(a: OuArgs) -> anyhow::Result<()> {
    let specs = match &a.config {
        Some(p) => {
            let file: OuFile =
                toml::from_str(&read(p)?).with_context(|| p.display().to_string())?;
            vec![file.spec()?]
        }
        None => {
            if a.dim == 0 {
                bail!("dim must be positive");
            }
            random_ou_instances(a.seed, a.dim, a.instances)
        }
    };
    let mut out = Vec::with_capacity(specs.len());
    for spec in &specs {
        let check = OuCheck::evaluate(spec)?;
        out.push(OuOut {
            dim: spec.dim(),
            pass: check.passed(),
            check,
        });
    }
    print_json(&out)?;
    let failed = out.iter().filter(|o| !o.pass).count();
    if failed > 0 {
        bail!(CheckFailed(format!(
            "{failed} of {} OU instances failed",
            out.len()
        )));
    }
    Ok(())
}
