//! Seeded verification campaigns.
//!
//! Each trial draws a fresh world, policy, reward model and evaluation sample
//! from a seed derived from `(master seed, trial index)`, evaluates every
//! requested target, and records whether its bound or identity held. Trials
//! run in parallel; tallies are reduced in trial order so reports are
//! byte-identical for a given master seed.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    finite_class_report, fixed_policy_bound, kappa_bound, lyapunov_residual, ou_exact_kl,
    ou_kl_bound, ou_stationary_cov, prompt_bound, rollout_bound, sampling_bound, sandwich_margins,
    CandidateTerms, FiniteClassSpec, OuSpec, HELD_SLACK,
};
use crate::calibration::{
    b_value, budget_prefill_decode, budget_variance, grid_argmin, optimal_tau_for_law,
    prefill_decode_proxy, variance_proxy, CostModel, VarianceDecomposition,
};
use crate::config::parse_toml;
use crate::error::{LabError, Result};
use crate::objectives::{population_kappa, population_objective, ClipPenaltySpec, MagnitudeLaw};
use crate::sampling::{
    conditional_objective, draw_paired_samples, draw_sample, empirical_kappa, empirical_objective,
    SampleBudget,
};
use crate::world::{build_world, Policy, RewardModel, Table, TabularWorld, WorldGenerator};

/// Minimum trials for a coverage test to mean anything.
pub const MIN_PROBABILISTIC_TRIALS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Lemma2,
    Lemma3,
    Lemma4,
    Eq12,
    Theorem1,
    Theorem2Finite,
    Ou,
    Calibration,
}

impl Target {
    pub const ALL: [Target; 8] = [
        Target::Lemma2,
        Target::Lemma3,
        Target::Lemma4,
        Target::Eq12,
        Target::Theorem1,
        Target::Theorem2Finite,
        Target::Ou,
        Target::Calibration,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Lemma2 => "lemma2",
            Target::Lemma3 => "lemma3",
            Target::Lemma4 => "lemma4",
            Target::Eq12 => "eq12",
            Target::Theorem1 => "theorem1",
            Target::Theorem2Finite => "theorem2-finite",
            Target::Ou => "ou",
            Target::Calibration => "calibration",
        }
    }

    /// Probabilistic targets hold with probability `1 - delta`; the rest are
    /// deterministic identities that must never fail.
    pub fn is_probabilistic(&self) -> bool {
        !matches!(self, Target::Ou | Target::Calibration)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| LabError::config(format!("unknown target `{s}`"), None))
    }
}

pub fn parse_targets(list: &str) -> Result<BTreeSet<Target>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub generator: String,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            n_prompts: 8,
            n_responses: 16,
            generator: "dirichlet(0.5), uniform-reward".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Standard deviation of the Gaussian logit perturbation around `log pi_ref`.
    pub logit_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { logit_scale: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelSection {
    /// Standard deviation of `r_hat - r_star` before clamping to [0,1]; zero
    /// gives a perfect reward model.
    pub noise: f64,
}

impl Default for RewardModelSection {
    fn default() -> Self {
        Self { noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySection {
    pub beta: f64,
    pub tau: f64,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self {
            beta: 0.2,
            tau: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiniteClassSection {
    pub candidates: usize,
}

impl Default for FiniteClassSection {
    fn default() -> Self {
        Self { candidates: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuSection {
    pub max_dim: usize,
}

impl Default for OuSection {
    fn default() -> Self {
        Self { max_dim: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub tau_grid_points: usize,
    pub k_grid_points: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            tau_grid_points: 1000,
            k_grid_points: 10_000,
        }
    }
}

/// Everything a campaign needs besides the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub trials: u64,
    pub targets: BTreeSet<Target>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub world: WorldSection,
    pub policy: PolicySection,
    pub reward_model: RewardModelSection,
    pub budget: SampleBudget,
    pub penalty: PenaltySection,
    pub finite_class: FiniteClassSection,
    pub ou: OuSection,
    pub calibration: CalibrationSection,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            trials: 2000,
            targets: [
                Target::Lemma2,
                Target::Lemma3,
                Target::Lemma4,
                Target::Eq12,
                Target::Theorem1,
            ]
            .into_iter()
            .collect(),
            seed: None,
            world: WorldSection::default(),
            policy: PolicySection::default(),
            reward_model: RewardModelSection::default(),
            budget: SampleBudget {
                n: 50,
                k: 4,
                delta: 0.1,
            },
            penalty: PenaltySection::default(),
            finite_class: FiniteClassSection::default(),
            ou: OuSection::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

impl CampaignConfig {
    pub fn parse(source: &str) -> Result<Self> {
        let cfg: Self = parse_toml(source)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(LabError::config("no targets selected", None));
        }
        if self.trials == 0 {
            return Err(LabError::config("trials must be positive", None));
        }
        if self.trials < MIN_PROBABILISTIC_TRIALS
            && self.targets.iter().any(Target::is_probabilistic)
        {
            return Err(LabError::config(
                format!("probabilistic targets need at least {MIN_PROBABILISTIC_TRIALS} trials"),
                None,
            ));
        }
        self.budget.validate()?;
        let spec = self.spec()?;
        if self.targets.iter().any(Target::is_probabilistic) {
            spec.finite_tau()?;
        }
        self.generator()?;
        if self.world.n_prompts < 2 || self.world.n_responses < 2 {
            return Err(LabError::InvalidCount(
                "campaign worlds need at least 2x2".into(),
            ));
        }
        if !(self.policy.logit_scale.is_finite() && self.policy.logit_scale >= 0.0) {
            return Err(LabError::config(
                "logit_scale must be finite and nonnegative",
                None,
            ));
        }
        if !(self.reward_model.noise.is_finite() && self.reward_model.noise >= 0.0) {
            return Err(LabError::config(
                "reward noise must be finite and nonnegative",
                None,
            ));
        }
        if self.finite_class.candidates < 2 {
            return Err(LabError::config(
                "finite class needs at least 2 candidates",
                None,
            ));
        }
        if self.ou.max_dim == 0 {
            return Err(LabError::config("ou.max_dim must be positive", None));
        }
        if self.calibration.tau_grid_points < 2 || self.calibration.k_grid_points < 2 {
            return Err(LabError::config("grids need at least 2 points", None));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ClipPenaltySpec> {
        ClipPenaltySpec::new(self.penalty.beta, self.penalty.tau)
    }

    pub fn generator(&self) -> Result<WorldGenerator> {
        self.world.generator.parse()
    }

    /// Canonical TOML rendering; field order is fixed by the struct.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("campaign config always serialises")
    }

    /// Hex SHA-256 of the canonical form, insensitive to formatting and key order.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index` under a master seed.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

fn sub_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed.wrapping_add(label.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

const WORLD_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;
const REWARD_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;
const CANDIDATE_STREAM: u64 = 5;
const OU_STREAM: u64 = 6;
const CALIBRATION_STREAM: u64 = 7;

/// Policy with logits `log pi_ref + scale * N(0,1)`.
pub fn random_policy(world: &TabularWorld, scale: f64, seed: u64) -> Result<Policy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi_ref = world.pi_ref();
    Policy::from_logits(Table::from_fn(
        world.n_prompts(),
        world.n_responses(),
        |x, y| {
            let z: f64 = rng.sample(StandardNormal);
            pi_ref.get(x, y).ln() + scale * z
        },
    ))
}

/// Reward model `clamp(r_star + noise * N(0,1), 0, 1)`.
pub fn noisy_reward_model(world: &TabularWorld, noise: f64, seed: u64) -> Result<RewardModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_star = world.r_star();
    RewardModel::new(Table::from_fn(
        world.n_prompts(),
        world.n_responses(),
        |x, y| {
            let z: f64 = rng.sample(StandardNormal);
            (r_star.get(x, y) + noise * z).clamp(0.0, 1.0)
        },
    ))
}

/// Outcome of one target on one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Check {
    pub actual: f64,
    pub bound: f64,
    pub held: bool,
    /// Sampling, shift and clip terms where the target has them.
    pub terms: Option<[f64; 3]>,
}

impl Check {
    fn against(actual: f64, bound: f64) -> Self {
        Self {
            actual,
            bound,
            held: actual <= bound + HELD_SLACK,
            terms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub seed: u64,
    pub checks: Vec<(Target, Check)>,
}

struct TrialContext {
    world: TabularWorld,
    policy: Policy,
    model: RewardModel,
}

impl TrialContext {
    fn draw(config: &CampaignConfig, seed: u64) -> Result<Self> {
        let world = build_world(
            config.world.n_prompts,
            config.world.n_responses,
            &config.generator()?,
            sub_seed(seed, WORLD_STREAM),
        )?;
        let policy = random_policy(
            &world,
            config.policy.logit_scale,
            sub_seed(seed, POLICY_STREAM),
        )?;
        let model = noisy_reward_model(
            &world,
            config.reward_model.noise,
            sub_seed(seed, REWARD_STREAM),
        )?;
        Ok(Self {
            world,
            policy,
            model,
        })
    }
}

/// Runs one trial in isolation; `(config, seed)` fully determines it.
pub fn run_trial(config: &CampaignConfig, trial: u64, seed: u64) -> Result<TrialOutcome> {
    let ctx = TrialContext::draw(config, seed)?;
    let spec = config.spec()?;
    let budget = &config.budget;
    let (world, policy, model) = (&ctx.world, &ctx.policy, &ctx.model);
    let reward = model.table();

    let needs_sample = config.targets.iter().any(|t| {
        matches!(
            t,
            Target::Lemma2 | Target::Lemma3 | Target::Lemma4 | Target::Eq12 | Target::Theorem1
        )
    });
    let sample = if needs_sample {
        Some(draw_sample(
            world,
            policy,
            budget,
            sub_seed(seed, SAMPLE_STREAM),
        )?)
    } else {
        None
    };

    let mut checks = Vec::with_capacity(config.targets.len());
    for &target in &config.targets {
        let check = match target {
            Target::Lemma2 => {
                let s = sample.as_ref().unwrap();
                let emp = empirical_objective(world, policy, reward, &spec, s)?;
                let cond = conditional_objective(world, policy, reward, &spec, &s.prompts)?;
                Check::against((emp - cond).abs(), rollout_bound(budget, &spec)?)
            }
            Target::Lemma3 => {
                let s = sample.as_ref().unwrap();
                let cond = conditional_objective(world, policy, reward, &spec, &s.prompts)?;
                let pop = population_objective(world, policy, reward, &spec)?.value;
                Check::against((cond - pop).abs(), prompt_bound(budget, &spec)?)
            }
            Target::Lemma4 => {
                let s = sample.as_ref().unwrap();
                let emp = empirical_objective(world, policy, reward, &spec, s)?;
                let pop = population_objective(world, policy, reward, &spec)?.value;
                Check::against((emp - pop).abs(), sampling_bound(budget, &spec)?)
            }
            Target::Eq12 => {
                let s = sample.as_ref().unwrap();
                let tau = spec.finite_tau()?;
                let emp = empirical_kappa(world, policy, tau, s)?;
                let pop = population_kappa(world, policy, tau)?;
                Check::against((emp - pop).abs(), kappa_bound(budget, tau)?)
            }
            Target::Theorem1 => {
                let r = fixed_policy_bound(world, policy, model, &spec, budget, sample.as_ref())?;
                Check {
                    actual: r.actual_gap.unwrap_or(0.0),
                    bound: r.total_bound,
                    held: r.held,
                    terms: Some([r.sampling_term, r.shift_term, r.clip_term]),
                }
            }
            Target::Theorem2Finite => finite_class_check(config, &ctx, &spec, seed)?,
            Target::Ou => ou_check(config, sub_seed(seed, OU_STREAM))?,
            Target::Calibration => {
                calibration_check(config, &ctx, sub_seed(seed, CALIBRATION_STREAM))?
            }
        };
        checks.push((target, check));
    }
    Ok(TrialOutcome {
        trial,
        seed,
        checks,
    })
}

/// Finite-class PAC-Bayes check with data-dependent posteriors: Dirac on the
/// empirical argmax and argmin, and the uniform posterior. Candidates are
/// drawn before, and independently of, the evaluation sample.
fn finite_class_check(
    config: &CampaignConfig,
    ctx: &TrialContext,
    spec: &ClipPenaltySpec,
    seed: u64,
) -> Result<Check> {
    let m = config.finite_class.candidates;
    let cand_seed = sub_seed(seed, CANDIDATE_STREAM);
    let candidates: Vec<Policy> = (0..m)
        .map(|i| {
            random_policy(
                &ctx.world,
                config.policy.logit_scale,
                sub_seed(cand_seed, i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let samples = draw_paired_samples(
        &ctx.world,
        &candidates,
        &config.budget,
        sub_seed(seed, SAMPLE_STREAM),
    )?;
    let terms: Vec<CandidateTerms> = candidates
        .iter()
        .zip(&samples)
        .map(|(p, s)| CandidateTerms::evaluate(&ctx.world, p, &ctx.model, spec, s))
        .collect::<Result<_>>()?;
    let argmax = (0..m)
        .max_by(|&a, &b| terms[a].j_hat.total_cmp(&terms[b].j_hat))
        .unwrap();
    let argmin = (0..m)
        .min_by(|&a, &b| terms[a].j_hat.total_cmp(&terms[b].j_hat))
        .unwrap();

    let selected = finite_class_report(
        &FiniteClassSpec::dirac(m, argmax)?,
        &terms,
        &config.budget,
        spec,
    )?;
    let mut held = selected.held;
    for q in [
        FiniteClassSpec::dirac(m, argmin)?,
        FiniteClassSpec::uniform(m)?,
    ] {
        held &= finite_class_report(&q, &terms, &config.budget, spec)?.held;
    }
    Ok(Check {
        actual: selected.actual_gap,
        bound: selected.bound,
        held,
        terms: Some([
            selected.bound - selected.avg_shift - selected.avg_clip,
            selected.avg_shift,
            selected.avg_clip,
        ]),
    })
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.1
}

/// Random commuting `(H, Sigma_g)` sharing an eigenbasis, with Gaussian prior.
pub fn random_ou_spec(rng: &mut ChaCha8Rng, d: usize) -> OuSpec {
    let v = random_orthogonal(rng, d);
    let m = rng.random_range(0.1..1.0);
    let big_m = m * rng.random_range(1.0..10.0);
    let mut h: Vec<f64> = (0..d).map(|_| rng.random_range(m..=big_m)).collect();
    h[0] = m;
    if d > 1 {
        h[d - 1] = big_m;
    }
    let g: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal).exp())
        .collect();
    let hessian = &v * DMatrix::from_diagonal(&DVector::from_vec(h.clone())) * v.transpose();
    let sigma_g = &v * DMatrix::from_diagonal(&DVector::from_vec(g)) * v.transpose();
    let sym = |a: DMatrix<f64>| (&a + a.transpose()) * 0.5;
    let (lo, hi) = h.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    OuSpec {
        theta_hat: DVector::from_fn(d, |_, _| rng.sample(StandardNormal)),
        theta_0: DVector::from_fn(d, |_, _| rng.sample(StandardNormal)),
        lambda: random_spd(rng, d),
        hessian: sym(hessian),
        sigma_g: sym(sigma_g),
        epsilon: rng.random_range(0.01..0.5),
        m_lo: lo,
        m_hi: hi,
    }
}

/// `count` random instances of dimension `d` from one seed.
pub fn random_ou_instances(seed: u64, d: usize, count: usize) -> Vec<OuSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_ou_spec(&mut rng, d)).collect()
}

/// Result of the OU numerical checks on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuCheck {
    pub residual: f64,
    pub residual_tol: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub exact_kl: f64,
    pub kl_bound: f64,
}

impl OuCheck {
    pub fn evaluate(spec: &OuSpec) -> Result<Self> {
        let sigma = ou_stationary_cov(spec)?;
        let g_norm = nalgebra::SymmetricEigen::new(spec.sigma_g.clone())
            .eigenvalues
            .amax();
        let (lower_margin, upper_margin) = sandwich_margins(spec, &sigma);
        Ok(Self {
            residual: lyapunov_residual(spec, &sigma),
            residual_tol: 1e-9 * spec.epsilon * g_norm,
            lower_margin,
            upper_margin,
            exact_kl: ou_exact_kl(spec)?,
            kl_bound: ou_kl_bound(spec)?,
        })
    }

    pub fn passed(&self) -> bool {
        self.residual <= self.residual_tol
            && self.lower_margin >= -1e-9
            && self.upper_margin >= -1e-9
            && self.exact_kl <= self.kl_bound + 1e-9
    }
}

fn ou_check(config: &CampaignConfig, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=config.ou.max_dim);
    let spec = random_ou_spec(&mut rng, d);
    let general = OuCheck::evaluate(&spec)?;

    // isotropic curvature: the bound is attained
    let mut iso = spec.clone();
    iso.hessian = DMatrix::identity(d, d) * spec.m_lo;
    iso.m_hi = spec.m_lo;
    let tight = OuCheck::evaluate(&iso)?;
    let equal = (tight.exact_kl - tight.kl_bound).abs() <= 1e-9;

    Ok(Check {
        actual: general.exact_kl,
        bound: general.kl_bound,
        held: general.passed() && tight.passed() && equal,
        terms: None,
    })
}

/// Checks the threshold rule on the trial's exact `|ell|` law and the two
/// allocation closed forms on a random cost model.
fn calibration_check(config: &CampaignConfig, ctx: &TrialContext, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let law = MagnitudeLaw::of_log_ratio(&ctx.world, &ctx.policy)?;
    let two_alpha: f64 = rng.random_range(0.01..0.99);
    let a = two_alpha / 2.0;
    let beta: f64 = rng.random_range(0.05..2.0);
    let tau = optimal_tau_for_law(&law, a);

    let mut held = law.prob_greater(tau) <= two_alpha && two_alpha <= law.prob_at_least(tau);

    let points = config.calibration.tau_grid_points;
    let max = law.max_value();
    let at_opt = b_value(&law, beta, a, tau);
    let grid_min = (0..points)
        .map(|i| b_value(&law, beta, a, max * i as f64 / (points - 1) as f64))
        .fold(f64::INFINITY, f64::min);
    held &= at_opt <= grid_min + HELD_SLACK;

    // halving alpha (bigger budget) never lowers the threshold
    held &= optimal_tau_for_law(&law, a / 2.0) >= tau;
    held &= optimal_tau_for_law(&law, 0.5 + rng.random_range(0.0..1.0)) == 0.0;

    let ratio = 10f64.powf(rng.random_range(-2.0..3.0));
    let cost = CostModel::new(1e6, ratio, 1.0)?;
    let k_points = config.calibration.k_grid_points;
    let pd = budget_prefill_decode(&cost);
    let (k_grid, step) = grid_argmin(
        |k| prefill_decode_proxy(&cost, k),
        (4.0 * pd.k_star).max(10.0),
        k_points,
    );
    held &= (k_grid - pd.k_star).abs() <= step;

    let var = VarianceDecomposition {
        sigma_prompt_sq: 10f64.powf(rng.random_range(-3.0..0.0)),
        sigma_rollout_sq: 10f64.powf(rng.random_range(-3.0..0.0)),
    };
    let vr = budget_variance(&cost, &var);
    let (k_grid, step) = grid_argmin(
        |k| variance_proxy(&cost, &var, k),
        (4.0 * vr.k_star).max(10.0),
        k_points,
    );
    held &= (k_grid - vr.k_star).abs() <= step;

    Ok(Check {
        actual: at_opt,
        bound: grid_min,
        held,
        terms: None,
    })
}

/// A trial that failed a target, with what is needed to replay it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialRef {
    pub trial: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSummary {
    pub target: Target,
    pub trials: u64,
    pub failures: u64,
    pub delta: f64,
    pub slack_threshold: f64,
    pub pass: bool,
    pub mean_actual: f64,
    pub mean_bound: f64,
    pub max_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_terms: Option<[f64; 3]>,
    pub failing_trials: Vec<TrialRef>,
}

/// `delta + 3 sqrt(delta (1 - delta) / trials)`.
pub fn slack_threshold(delta: f64, trials: u64) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub artifact_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignResult {
    pub provenance: Provenance,
    pub config: String,
    pub targets: Vec<TargetSummary>,
}

impl CampaignResult {
    pub fn all_pass(&self) -> bool {
        self.targets.iter().all(|t| t.pass)
    }

    pub fn failing_targets(&self) -> Vec<Target> {
        self.targets
            .iter()
            .filter(|t| !t.pass)
            .map(|t| t.target)
            .collect()
    }

    pub fn target(&self, t: Target) -> Option<&TargetSummary> {
        self.targets.iter().find(|s| s.target == t)
    }
}

/// Runs every trial and tallies the failures per target.
pub fn run_campaign(config: &CampaignConfig, master_seed: u64) -> Result<CampaignResult> {
    config.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(master_seed, i);
            run_trial(config, i, seed).map_err(|e| LabError::TrialFailed {
                trial: i,
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let trials = config.trials;
    let targets = config
        .targets
        .iter()
        .enumerate()
        .map(|(slot, &target)| {
            let delta = if target.is_probabilistic() {
                config.budget.delta
            } else {
                0.0
            };
            let mut failures = 0u64;
            let mut sum_actual = 0.0;
            let mut sum_bound = 0.0;
            let mut max_ratio: f64 = 0.0;
            let mut sum_terms: Option<[f64; 3]> = None;
            let mut failing_trials = Vec::new();
            for o in &outcomes {
                let (_, c) = o.checks[slot];
                if !c.held {
                    failures += 1;
                    failing_trials.push(TrialRef {
                        trial: o.trial,
                        seed: o.seed,
                    });
                }
                sum_actual += c.actual;
                sum_bound += c.bound;
                if c.bound > 0.0 {
                    max_ratio = max_ratio.max(c.actual / c.bound);
                }
                if let Some(t) = c.terms {
                    let acc = sum_terms.get_or_insert([0.0; 3]);
                    for (a, v) in acc.iter_mut().zip(t) {
                        *a += v;
                    }
                }
            }
            let n = trials as f64;
            let threshold = slack_threshold(delta, trials);
            TargetSummary {
                target,
                trials,
                failures,
                delta,
                slack_threshold: threshold,
                pass: failures as f64 / n <= threshold,
                mean_actual: sum_actual / n,
                mean_bound: sum_bound / n,
                max_ratio,
                mean_terms: sum_terms.map(|t| t.map(|v| v / n)),
                failing_trials,
            }
        })
        .collect();

    Ok(CampaignResult {
        provenance: Provenance {
            config_hash: config.hash(),
            master_seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        config: config.canonical(),
        targets,
    })
}

/// Rounds to 12 significant digits.
pub fn sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(sig12).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// JSON with every float rounded to 12 significant digits.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

impl CampaignResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,trials,failures,delta,threshold,pass\n");
        for t in &self.targets {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.target,
                t.trials,
                t.failures,
                sig12(t.delta),
                sig12(t.slack_threshold),
                t.pass
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        to_report_json(self)
    }

    /// Report file stem: config hash prefix and master seed.
    pub fn file_stem(&self) -> String {
        format!(
            "campaign-{}-seed{}",
            &self.provenance.config_hash[..16],
            self.provenance.master_seed
        )
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`. A report that already
    /// exists must match byte for byte; it is never rewritten with new content.
    pub fn write_reports(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        for (path, body) in [(&csv_path, self.to_csv()), (&json_path, self.to_json()?)] {
            match fs::read_to_string(path) {
                Ok(existing) if existing == body => {}
                Ok(_) => {
                    return Err(LabError::Io(std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        format!("{} exists with different content", path.display()),
                    )))
                }
                Err(_) => fs::write(path, body)?,
            }
        }
        Ok((csv_path, json_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_parse_and_print() {
        let set = parse_targets("lemma2,theorem2-finite, ou").unwrap();
        assert_eq!(
            set.into_iter().collect::<Vec<_>>(),
            vec![Target::Lemma2, Target::Theorem2Finite, Target::Ou]
        );
        assert!(parse_targets("lemma9").is_err());
    }

    #[test]
    fn hash_ignores_formatting_and_order() {
        let a = "trials = 200\ntargets = [\"lemma4\", \"lemma2\"]\n[budget]\nn = 10\nk = 2\ndelta = 0.1\n";
        let b = "[budget]\ndelta = 0.1\nk = 2\nn = 10\n\n\n[penalty]\nbeta = 0.2\n\ntargets=[\"lemma2\",\"lemma4\"]\n";
        // `b` puts targets inside [penalty]: rejected as unknown field
        assert!(CampaignConfig::parse(b).is_err());
        let b =
            "targets=[ \"lemma2\",\"lemma4\" ]\ntrials=200\n[budget]\ndelta = 0.1\nk = 2\nn = 10\n";
        let (ca, cb) = (
            CampaignConfig::parse(a).unwrap(),
            CampaignConfig::parse(b).unwrap(),
        );
        assert_eq!(ca.hash(), cb.hash());
        let mut cc = ca.clone();
        cc.trials = 201;
        assert_ne!(ca.hash(), cc.hash());
    }

    #[test]
    fn rejects_too_few_trials() {
        let cfg = CampaignConfig {
            trials: 50,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let det = CampaignConfig {
            trials: 10,
            targets: [Target::Ou].into_iter().collect(),
            ..Default::default()
        };
        assert!(det.validate().is_ok());
    }

    #[test]
    fn slack_threshold_value() {
        assert!((slack_threshold(0.1, 2000) - 0.120125).abs() < 1e-6);
        assert_eq!(slack_threshold(0.0, 10), 0.0);
    }

    #[test]
    fn trial_replays_in_isolation() {
        let cfg = CampaignConfig {
            trials: 100,
            targets: Target::ALL.into_iter().collect(),
            ..Default::default()
        };
        let seed = trial_seed(3, 17);
        let a = run_trial(&cfg, 17, seed).unwrap();
        let b = run_trial(&cfg, 17, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checks.len(), 8);
    }

    #[test]
    fn sig12_rounding() {
        assert_eq!(sig12(0.1234567890123456), 0.123456789012);
        assert_eq!(sig12(0.0), 0.0);
        assert_eq!(sig12(1e-300 * 1.23456789012345), 1.23456789012e-300);
    }
}
