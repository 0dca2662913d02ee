//! Exact evaluation of log-ratios, clipping, regularised objectives and the
//! clipping bias, all by enumeration over the world's support.

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::world::{Policy, Table, TabularWorld};

/// KL-penalty strength and clipping threshold. `tau = +inf` means unclipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipPenaltySpec {
    beta: f64,
    tau: f64,
}

impl ClipPenaltySpec {
    pub fn new(beta: f64, tau: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(LabError::InvalidBeta(beta));
        }
        if tau.is_nan() || tau < 0.0 {
            return Err(LabError::InvalidThreshold(tau));
        }
        Ok(Self { beta, tau })
    }

    pub fn unclipped(beta: f64) -> Result<Self> {
        Self::new(beta, f64::INFINITY)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_clipped(&self) -> bool {
        self.tau.is_finite()
    }

    pub fn finite_tau(&self) -> Result<f64> {
        if self.is_clipped() {
            Ok(self.tau)
        } else {
            Err(LabError::UnclippedThreshold)
        }
    }

    /// Same strength with the clipping removed.
    pub fn without_clipping(&self) -> Self {
        Self {
            beta: self.beta,
            tau: f64::INFINITY,
        }
    }

    /// Width `1 + 2*beta*tau` of the interval holding each per-rollout term.
    pub fn range_factor(&self) -> Result<f64> {
        Ok(1.0 + 2.0 * self.beta * self.finite_tau()?)
    }
}

/// `value = reward_term - beta * penalty_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub reward_term: f64,
    pub penalty_term: f64,
}

/// `log pi(y|x) - log ref(y|x)`.
pub fn log_ratio(policy: &Policy, reference: &Table, x: usize, y: usize) -> Result<f64> {
    let r = reference.get(x, y);
    if r <= 0.0 {
        return Err(LabError::AbsoluteContinuity { x, y });
    }
    Ok(policy.log_prob(x, y) - r.ln())
}

/// Symmetric clip to `[-tau, tau]`; boundary values are left untouched.
pub fn clip_log_ratio(ell: f64, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(LabError::InvalidThreshold(tau));
    }
    Ok(clip(ell, tau))
}

#[inline]
pub(crate) fn clip(ell: f64, tau: f64) -> f64 {
    ell.max(-tau).min(tau)
}

/// Calls `f(x, y, mass, ell)` for every atom of the policy-induced law with
/// positive mass.
pub(crate) fn for_each_supported(
    world: &TabularWorld,
    policy: &Policy,
    mut f: impl FnMut(usize, usize, f64, f64),
) -> Result<()> {
    world.check_policy(policy)?;
    let rho = world.rho();
    for (x, &px) in rho.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        for y in 0..world.n_responses() {
            let mass = px * policy.prob(x, y);
            if mass == 0.0 {
                continue;
            }
            let ell = log_ratio(policy, world.pi_ref(), x, y)?;
            f(x, y, mass, ell);
        }
    }
    Ok(())
}

/// Enumerated `E_{D_theta}[r - beta * clip(ell, tau)]`.
pub fn population_objective(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    spec: &ClipPenaltySpec,
) -> Result<ObjectiveValue> {
    world.check_reward(reward)?;
    let mut reward_term = 0.0;
    let mut penalty_term = 0.0;
    for_each_supported(world, policy, |x, y, mass, ell| {
        reward_term += mass * reward.get(x, y);
        penalty_term += mass * clip(ell, spec.tau);
    })?;
    Ok(ObjectiveValue {
        value: reward_term - spec.beta * penalty_term,
        reward_term,
        penalty_term,
    })
}

/// Per-prompt conditional value `E_{Y~pi(.|x)}[r(x,Y) - beta * clip(ell, tau)]`.
pub fn prompt_value(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    spec: &ClipPenaltySpec,
    x: usize,
) -> Result<f64> {
    let mut v = 0.0;
    for y in 0..world.n_responses() {
        let p = policy.prob(x, y);
        if p == 0.0 {
            continue;
        }
        let ell = log_ratio(policy, world.pi_ref(), x, y)?;
        v += p * (reward.get(x, y) - spec.beta * clip(ell, spec.tau));
    }
    Ok(v)
}

/// `KL(pi(.|x) || ref(.|x))` by enumeration.
pub fn exact_kl(policy: &Policy, reference: &Table, x: usize) -> Result<f64> {
    let mut kl = 0.0;
    for y in 0..reference.cols() {
        let p = policy.prob(x, y);
        if p == 0.0 {
            continue;
        }
        kl += p * log_ratio(policy, reference, x, y)?;
    }
    Ok(kl.max(0.0))
}

/// `T(tau) = E_{D_theta}[(|ell| - tau)_+]`.
pub fn truncation_mass(world: &TabularWorld, policy: &Policy, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(LabError::InvalidThreshold(tau));
    }
    let mut t = 0.0;
    for_each_supported(world, policy, |_, _, mass, ell| {
        t += mass * (ell.abs() - tau).max(0.0);
    })?;
    Ok(t)
}

/// `beta * E_{D_theta}|ell - clip(ell, tau)|`, the clipping error term.
pub fn clipping_error(
    world: &TabularWorld,
    policy: &Policy,
    spec: &ClipPenaltySpec,
) -> Result<f64> {
    let mut t = 0.0;
    for_each_supported(world, policy, |_, _, mass, ell| {
        t += mass * (ell - clip(ell, spec.tau)).abs();
    })?;
    Ok(spec.beta * t)
}

/// Signed clipping bias `beta * E_{D_theta}[ell - clip(ell, tau)]`.
pub fn signed_clip_bias(
    world: &TabularWorld,
    policy: &Policy,
    spec: &ClipPenaltySpec,
) -> Result<f64> {
    let mut t = 0.0;
    for_each_supported(world, policy, |_, _, mass, ell| {
        t += mass * (ell - clip(ell, spec.tau));
    })?;
    Ok(spec.beta * t)
}

/// Population mean of the clipped log ratio, `E_{D_theta}[clip(ell, tau)]`.
pub fn population_kappa(world: &TabularWorld, policy: &Policy, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(LabError::InvalidThreshold(tau));
    }
    let mut k = 0.0;
    for_each_supported(world, policy, |_, _, mass, ell| k += mass * clip(ell, tau))?;
    Ok(k)
}

/// Discrete law of a nonnegative variable, atoms sorted ascending and merged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MagnitudeLaw {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl MagnitudeLaw {
    /// Builds a law from `(value, mass)` pairs; equal values are merged and
    /// zero masses dropped. Masses are expected to sum to one.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(LabError::EmptySample);
        }
        if atoms
            .iter()
            .any(|(v, p)| !(v.is_finite() && *v >= 0.0 && p.is_finite() && *p >= 0.0))
        {
            return Err(LabError::world(
                "law",
                "atoms must be finite and nonnegative",
            ));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut probs: Vec<f64> = Vec::with_capacity(atoms.len());
        for (v, p) in atoms {
            if p == 0.0 {
                continue;
            }
            match values.last() {
                Some(&last) if last == v => *probs.last_mut().unwrap() += p,
                _ => {
                    values.push(v);
                    probs.push(p);
                }
            }
        }
        if values.is_empty() {
            return Err(LabError::EmptySample);
        }
        Ok(Self { values, probs })
    }

    /// Law of `|ell|` under the policy-induced distribution.
    pub fn of_log_ratio(world: &TabularWorld, policy: &Policy) -> Result<Self> {
        let mut atoms = Vec::new();
        for_each_supported(world, policy, |_, _, mass, ell| {
            atoms.push((ell.abs(), mass))
        })?;
        Self::from_atoms(atoms)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Tail masses summed from the top atom down; `tails[i] = P(U >= values[i])`.
    fn tails_at_least(&self) -> Vec<f64> {
        let mut tails = vec![0.0; self.values.len()];
        let mut acc = 0.0;
        for i in (0..self.values.len()).rev() {
            acc += self.probs[i];
            tails[i] = acc;
        }
        tails
    }

    /// `P(U > t)`, summed from the top atom down.
    pub fn prob_greater(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in (0..self.values.len()).rev() {
            if self.values[i] <= t {
                break;
            }
            acc += self.probs[i];
        }
        acc
    }

    /// `P(U >= t)`, summed from the top atom down.
    pub fn prob_at_least(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in (0..self.values.len()).rev() {
            if self.values[i] < t {
                break;
            }
            acc += self.probs[i];
        }
        acc
    }

    /// `E[(U - t)_+]`.
    pub fn truncation_mass(&self, t: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| p * (v - t).max(0.0))
            .sum()
    }

    /// Smallest atom `t` with `P(U > t) <= level`. Because tails are summed
    /// in a single top-down pass, the returned atom satisfies
    /// `P(U > t) <= level <= P(U >= t)` exactly whenever `level < P(U >= min atom)`.
    pub fn upper_tail_quantile(&self, level: f64) -> f64 {
        let tails = self.tails_at_least();
        // P(U > values[i]) = tails[i + 1]
        for i in 0..self.values.len() {
            let greater = tails.get(i + 1).copied().unwrap_or(0.0);
            if greater <= level {
                return self.values[i];
            }
        }
        self.max_value()
    }
}
