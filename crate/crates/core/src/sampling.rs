//! Seeded Monte Carlo estimators over `n` prompts and `K` rollouts per prompt.
//!
//! A master seed is split into one prompt stream and one rollout stream per
//! prompt slot, so changing `K` never perturbs the prompt draw. Rollouts are
//! realised by inverse-CDF from stored uniforms, which lets several policies
//! be evaluated on common random numbers when a paired comparison is wanted.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::{clip, log_ratio, prompt_value, ClipPenaltySpec};
use crate::world::{Policy, Table, TabularWorld};

/// Evaluation budget: `n` prompts, `k` rollouts each, judged at confidence `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBudget {
    pub n: usize,
    pub k: usize,
    pub delta: f64,
}

impl SampleBudget {
    pub fn new(n: usize, k: usize, delta: f64) -> Result<Self> {
        let b = Self { n, k, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(LabError::InvalidBudget(format!(
                "n and K must be positive (n={}, K={})",
                self.n, self.k
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LabError::InvalidBudget(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Prompt indices and an `n x K` matrix of response indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvalSample {
    pub prompts: Vec<usize>,
    pub rollouts: Vec<Vec<usize>>,
    pub seed: u64,
}

impl EvalSample {
    pub fn n(&self) -> usize {
        self.prompts.len()
    }

    pub fn k(&self) -> usize {
        self.rollouts.first().map_or(0, Vec::len)
    }

    /// `(x_i, y_ij)` pairs in sample order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.prompts
            .iter()
            .zip(&self.rollouts)
            .flat_map(|(&x, row)| row.iter().map(move |&y| (x, y)))
    }

    fn check_against(&self, world: &TabularWorld) -> Result<()> {
        if self.prompts.is_empty() || self.rollouts.len() != self.prompts.len() {
            return Err(LabError::ShapeMismatch(
                "sample prompts and rollouts disagree".into(),
            ));
        }
        let k = self.k();
        if k == 0 || self.rollouts.iter().any(|r| r.len() != k) {
            return Err(LabError::ShapeMismatch("ragged rollout matrix".into()));
        }
        if self.prompts.iter().any(|&x| x >= world.n_prompts())
            || self
                .rollouts
                .iter()
                .flatten()
                .any(|&y| y >= world.n_responses())
        {
            return Err(LabError::ShapeMismatch(
                "sample index outside the world".into(),
            ));
        }
        Ok(())
    }
}

/// Smallest index whose ascending cumulative mass exceeds `u`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated total
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Prompt draw plus the rollout uniforms, before any policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise {
    prompts: Vec<usize>,
    uniforms: Vec<Vec<f64>>,
    seed: u64,
}

impl SampleNoise {
    pub fn draw(world: &TabularWorld, budget: &SampleBudget, seed: u64) -> Result<Self> {
        budget.validate()?;
        let mut prompt_rng = ChaCha8Rng::seed_from_u64(seed);
        prompt_rng.set_stream(0);
        let prompts: Vec<usize> = (0..budget.n)
            .map(|_| inverse_cdf(world.rho(), prompt_rng.random::<f64>()))
            .collect();
        let uniforms = (0..budget.n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                (0..budget.k).map(|_| rng.random::<f64>()).collect()
            })
            .collect();
        Ok(Self {
            prompts,
            uniforms,
            seed,
        })
    }

    pub fn prompts(&self) -> &[usize] {
        &self.prompts
    }

    /// Realises the rollouts of `policy` on these prompts.
    pub fn realise(&self, policy: &Policy) -> EvalSample {
        let rollouts = self
            .prompts
            .iter()
            .zip(&self.uniforms)
            .map(|(&x, us)| {
                let row = policy.probs().row(x);
                us.iter().map(|&u| inverse_cdf(row, u)).collect()
            })
            .collect();
        EvalSample {
            prompts: self.prompts.clone(),
            rollouts,
            seed: self.seed,
        }
    }
}

/// `x_i ~ rho` i.i.d., then `y_ij ~ pi(.|x_i)` i.i.d.; deterministic in `seed`.
pub fn draw_sample(
    world: &TabularWorld,
    policy: &Policy,
    budget: &SampleBudget,
    seed: u64,
) -> Result<EvalSample> {
    world.check_policy(policy)?;
    Ok(SampleNoise::draw(world, budget, seed)?.realise(policy))
}

/// Samples for several policies on common prompts and rollout uniforms.
pub fn draw_paired_samples(
    world: &TabularWorld,
    policies: &[Policy],
    budget: &SampleBudget,
    seed: u64,
) -> Result<Vec<EvalSample>> {
    let noise = SampleNoise::draw(world, budget, seed)?;
    policies
        .iter()
        .map(|p| {
            world.check_policy(p)?;
            Ok(noise.realise(p))
        })
        .collect()
}

/// `(1/nK) sum_ij [r(x_i, y_ij) - beta * clip(ell(x_i, y_ij), tau)]`.
pub fn empirical_objective(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    spec: &ClipPenaltySpec,
    sample: &EvalSample,
) -> Result<f64> {
    world.check_policy(policy)?;
    world.check_reward(reward)?;
    sample.check_against(world)?;
    let k = sample.k() as f64;
    let mut total = 0.0;
    for (&x, row) in sample.prompts.iter().zip(&sample.rollouts) {
        let mut inner = 0.0;
        for &y in row {
            let ell = log_ratio(policy, world.pi_ref(), x, y)?;
            inner += reward.get(x, y) - spec.beta() * clip(ell, spec.tau());
        }
        total += inner / k;
    }
    Ok(total / sample.n() as f64)
}

/// Infinite-rollout analogue: the mean of exact per-prompt values.
pub fn conditional_objective(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    spec: &ClipPenaltySpec,
    prompts: &[usize],
) -> Result<f64> {
    world.check_policy(policy)?;
    world.check_reward(reward)?;
    if prompts.is_empty() {
        return Err(LabError::EmptySample);
    }
    if prompts.iter().any(|&x| x >= world.n_prompts()) {
        return Err(LabError::ShapeMismatch(
            "prompt index outside the world".into(),
        ));
    }
    let mut cache = vec![None; world.n_prompts()];
    let mut total = 0.0;
    for &x in prompts {
        let g = match cache[x] {
            Some(g) => g,
            None => {
                let g = prompt_value(world, policy, reward, spec, x)?;
                cache[x] = Some(g);
                g
            }
        };
        total += g;
    }
    Ok(total / prompts.len() as f64)
}

/// Sample mean of the clipped log ratio.
pub fn empirical_kappa(
    world: &TabularWorld,
    policy: &Policy,
    tau: f64,
    sample: &EvalSample,
) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(LabError::InvalidThreshold(tau));
    }
    world.check_policy(policy)?;
    sample.check_against(world)?;
    let k = sample.k() as f64;
    let mut total = 0.0;
    for (&x, row) in sample.prompts.iter().zip(&sample.rollouts) {
        let mut inner = 0.0;
        for &y in row {
            inner += clip(log_ratio(policy, world.pi_ref(), x, y)?, tau);
        }
        total += inner / k;
    }
    Ok(total / sample.n() as f64)
}

/// One line of a rollout dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt: usize,
    pub response: usize,
    pub reward: f64,
    pub ell: f64,
    pub ell_tau: f64,
}

pub fn rollout_records(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    tau: f64,
    sample: &EvalSample,
) -> Result<Vec<RolloutRecord>> {
    world.check_reward(reward)?;
    sample.check_against(world)?;
    sample
        .pairs()
        .map(|(x, y)| {
            let ell = log_ratio(policy, world.pi_ref(), x, y)?;
            Ok(RolloutRecord {
                prompt: x,
                response: y,
                reward: reward.get(x, y),
                ell,
                ell_tau: clip(ell, tau),
            })
        })
        .collect()
}

/// Writes one JSON object per line, in sample order.
pub fn write_rollout_dump<W: Write>(mut out: W, records: &[RolloutRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_rollout_dump<R: BufRead>(input: R) -> Result<Vec<RolloutRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line)
            .map_err(|e| LabError::config(format!("rollout dump: {e}"), Some(i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(LabError::EmptySample);
    }
    Ok(records)
}
