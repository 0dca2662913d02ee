//! Practical rules derived from the bounds: the width `alpha(n, K, delta)`,
//! the clipping trade-off curve `B(tau)` and its minimiser, the empirical
//! threshold rule, and rollout-allocation rules under three cost models.

use serde::Serialize;

use crate::bounds::two_stage_width;
use crate::error::{LabError, Result};
use crate::objectives::{clip, for_each_supported, ClipPenaltySpec, MagnitudeLaw};
use crate::sampling::SampleBudget;
use crate::world::{Policy, Table, TabularWorld};

/// `sqrt(log(4/delta)/(2n)) + sqrt(log(4/delta)/(2nK))`.
pub fn alpha(budget: &SampleBudget) -> Result<f64> {
    budget.validate()?;
    Ok(two_stage_width((4.0 / budget.delta).ln(), budget))
}

/// `2 alpha >= 1`: every log ratio should be clipped to zero.
pub fn clip_everything(alpha_val: f64) -> bool {
    2.0 * alpha_val >= 1.0
}

/// `B(tau) = (1 + 2 beta tau) alpha + beta T(tau)` for a given law of `|ell|`.
pub fn b_value(law: &MagnitudeLaw, beta: f64, alpha_val: f64, tau: f64) -> f64 {
    (1.0 + 2.0 * beta * tau) * alpha_val + beta * law.truncation_mass(tau)
}

/// `B(tau)` on an ascending grid of thresholds.
pub fn b_curve(
    world: &TabularWorld,
    policy: &Policy,
    beta: f64,
    budget: &SampleBudget,
    tau_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if tau_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(LabError::UnsortedGrid);
    }
    if let Some(&t) = tau_grid.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(LabError::InvalidThreshold(t));
    }
    ClipPenaltySpec::new(beta, 0.0)?;
    let a = alpha(budget)?;
    let law = MagnitudeLaw::of_log_ratio(world, policy)?;
    Ok(tau_grid
        .iter()
        .map(|&t| (t, b_value(&law, beta, a, t)))
        .collect())
}

/// Minimiser of `B` for a discrete law: the smallest atom `t` with
/// `P(|ell| > t) <= 2 alpha`, or zero when `2 alpha >= 1`.
pub fn optimal_tau_for_law(law: &MagnitudeLaw, alpha_val: f64) -> f64 {
    if clip_everything(alpha_val) {
        return 0.0;
    }
    law.upper_tail_quantile(2.0 * alpha_val)
}

/// Budget-aware optimal clipping threshold under the exact law of `|ell|`.
pub fn optimal_tau(world: &TabularWorld, policy: &Policy, budget: &SampleBudget) -> Result<f64> {
    let law = MagnitudeLaw::of_log_ratio(world, policy)?;
    Ok(optimal_tau_for_law(&law, alpha(budget)?))
}

/// Empirical `(1 - 2 alpha)`-quantile of log-ratio magnitudes: the smallest
/// order statistic `u_(k)` with `k/N >= 1 - 2 alpha`.
pub fn empirical_tau(magnitudes: &[f64], alpha_val: f64) -> Result<f64> {
    if magnitudes.is_empty() {
        return Err(LabError::EmptySample);
    }
    if !(alpha_val.is_finite() && alpha_val >= 0.0) {
        return Err(LabError::InvalidBudget(format!(
            "alpha must be nonnegative, got {alpha_val}"
        )));
    }
    if clip_everything(alpha_val) {
        return Ok(0.0);
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let level = 1.0 - 2.0 * alpha_val;
    let mut k = ((level * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= level {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < level {
        k += 1;
    }
    Ok(sorted[k - 1])
}

/// Budget `B` with per-prompt prefill and per-rollout decode costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub budget: f64,
    pub c_prefill: f64,
    pub c_decode: f64,
}

impl CostModel {
    pub fn new(budget: f64, c_prefill: f64, c_decode: f64) -> Result<Self> {
        for (name, v) in [
            ("budget", budget),
            ("c_prefill", c_prefill),
            ("c_decode", c_decode),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::InvalidCost(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(Self {
            budget,
            c_prefill,
            c_decode,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.c_prefill / self.c_decode
    }

    /// Largest `n` with `n (c_prefill + K c_decode) <= B`.
    pub fn prompts_for(&self, k: u64) -> u64 {
        (self.budget / (self.c_prefill + k as f64 * self.c_decode)).floor() as u64
    }
}

/// A rollout allocation: continuous optimum, its rounding, and the prompt count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub k_star: f64,
    pub k_rounded: u64,
    pub n_star: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
}

/// Nearest integer with halves rounded down, clamped to at least one.
pub fn round_k(k: f64) -> u64 {
    ((k - 0.5).ceil()).max(1.0) as u64
}

/// Uniform per-rollout cost: `K* = 1`, `n* = floor(B / c_decode)`.
pub fn budget_uniform(cost: &CostModel) -> Allocation {
    Allocation {
        k_star: 1.0,
        k_rounded: 1,
        n_star: (cost.budget / cost.c_decode).floor() as u64,
        advisory: None,
    }
}

/// Prefill/decode proxy `F(K) = (c_p + K c_d)(1 + K^{-1/2})^2`.
pub fn prefill_decode_proxy(cost: &CostModel, k: f64) -> f64 {
    (cost.c_prefill + k * cost.c_decode) * (1.0 + 1.0 / k.sqrt()).powi(2)
}

/// `K* = max(1, (c_prefill / c_decode)^{2/3})`.
pub fn budget_prefill_decode(cost: &CostModel) -> Allocation {
    let k_star = cost.ratio().powf(2.0 / 3.0).max(1.0);
    let k_rounded = round_k(k_star);
    Allocation {
        k_star,
        k_rounded,
        n_star: cost.prompts_for(k_rounded),
        advisory: None,
    }
}

/// Prompt-level and rollout-level variance of the per-rollout term `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDecomposition {
    pub sigma_prompt_sq: f64,
    pub sigma_rollout_sq: f64,
}

/// Exact two-stage decomposition of `Z = r - beta clip(ell, tau)`.
pub fn variance_decomposition(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    spec: &ClipPenaltySpec,
) -> Result<VarianceDecomposition> {
    let tau = spec.finite_tau()?;
    world.check_reward(reward)?;
    let n_prompts = world.n_prompts();
    let mut cond_mean = vec![0.0; n_prompts];
    let mut z_values: Vec<(usize, f64, f64)> = Vec::new();
    for_each_supported(world, policy, |x, y, _, ell| {
        let z = reward.get(x, y) - spec.beta() * clip(ell, tau);
        let p = policy.prob(x, y);
        cond_mean[x] += p * z;
        z_values.push((x, p, z));
    })?;
    let mut cond_var = vec![0.0; n_prompts];
    for &(x, p, z) in &z_values {
        let d = z - cond_mean[x];
        cond_var[x] += p * d * d;
    }
    let rho = world.rho();
    let mean: f64 = rho.iter().zip(&cond_mean).map(|(r, m)| r * m).sum();
    let sigma_prompt_sq = rho
        .iter()
        .zip(&cond_mean)
        .map(|(r, m)| r * (m - mean) * (m - mean))
        .sum();
    let sigma_rollout_sq = rho.iter().zip(&cond_var).map(|(r, v)| r * v).sum();
    Ok(VarianceDecomposition {
        sigma_prompt_sq,
        sigma_rollout_sq,
    })
}

/// Variance proxy `G(K) = (c_p + K c_d)(sigma_prompt^2 + sigma_rollout^2 / K)`.
pub fn variance_proxy(cost: &CostModel, var: &VarianceDecomposition, k: f64) -> f64 {
    (cost.c_prefill + k * cost.c_decode) * (var.sigma_prompt_sq + var.sigma_rollout_sq / k)
}

/// `K* = max(1, sqrt((c_prefill/c_decode) (sigma_rollout^2 / sigma_prompt^2)))`.
///
/// With zero prompt variance the proxy keeps decreasing in `K`; the whole
/// budget then goes to rollouts of a single prompt, reported as an advisory.
pub fn budget_variance(cost: &CostModel, var: &VarianceDecomposition) -> Allocation {
    if var.sigma_rollout_sq <= 0.0 {
        return Allocation {
            k_star: 1.0,
            k_rounded: 1,
            n_star: cost.prompts_for(1),
            advisory: None,
        };
    }
    if var.sigma_prompt_sq <= 0.0 {
        let k = (cost.budget / cost.c_decode - cost.ratio())
            .floor()
            .max(1.0);
        return Allocation {
            k_star: k,
            k_rounded: k as u64,
            n_star: 1,
            advisory: Some("prompt variance zero: allocate all budget to rollouts".into()),
        };
    }
    let k_star = (cost.ratio() * var.sigma_rollout_sq / var.sigma_prompt_sq)
        .sqrt()
        .max(1.0);
    let k_rounded = round_k(k_star);
    Allocation {
        k_star,
        k_rounded,
        n_star: cost.prompts_for(k_rounded),
        advisory: None,
    }
}

/// Grid minimiser of a proxy over `K` in `[1, k_max]` with `points` nodes.
pub fn grid_argmin(f: impl Fn(f64) -> f64, k_max: f64, points: usize) -> (f64, f64) {
    let step = (k_max - 1.0) / (points - 1) as f64;
    let mut best = (1.0, f(1.0));
    for i in 1..points {
        let k = 1.0 + i as f64 * step;
        let v = f(k);
        if v < best.1 {
            best = (k, v);
        }
    }
    (best.0, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_examples() {
        let a = alpha(&SampleBudget::new(100, 1, 0.05).unwrap()).unwrap();
        assert!((a - 0.296041).abs() < 1e-6);
        let big_k = alpha(&SampleBudget::new(100, 1 << 40, 0.05).unwrap()).unwrap();
        assert!((big_k - (80f64.ln() / 200.0).sqrt()).abs() < 1e-6);
        assert!(clip_everything(0.5));
        assert!(!clip_everything(0.49));
    }

    #[test]
    fn optimal_tau_two_point_law() {
        let law = MagnitudeLaw::from_atoms(vec![(0.1, 0.9), (5.0, 0.1)]).unwrap();
        assert_eq!(optimal_tau_for_law(&law, 0.025), 5.0);
        assert_eq!(optimal_tau_for_law(&law, 0.25), 0.1);
        assert_eq!(optimal_tau_for_law(&law, 0.5), 0.0);
        assert_eq!(optimal_tau_for_law(&law, 3.0), 0.0);
        // grid search on B confirms both
        for (a, want) in [(0.025, 5.0), (0.25, 0.1)] {
            let best = (0..=5000)
                .map(|i| i as f64 * 0.001)
                .map(|t| (t, b_value(&law, 1.0, a, t)))
                .fold(
                    (0.0, f64::INFINITY),
                    |acc, p| if p.1 < acc.1 { p } else { acc },
                );
            assert!(b_value(&law, 1.0, a, want) <= best.1 + 1e-12);
        }
    }

    #[test]
    fn empirical_tau_examples() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_tau(&xs, 0.6).unwrap(), 0.0);
        assert_eq!(empirical_tau(&xs, 0.1).unwrap(), 8.0);
        assert_eq!(empirical_tau(&[2.5; 7], 0.2).unwrap(), 2.5);
        assert_eq!(empirical_tau(&xs, 0.0).unwrap(), 10.0);
        assert!(matches!(
            empirical_tau(&[], 0.1),
            Err(LabError::EmptySample)
        ));
    }

    #[test]
    fn uniform_budget() {
        let c = CostModel::new(500.0, 3.0, 1.0).unwrap();
        let a = budget_uniform(&c);
        assert_eq!((a.k_rounded, a.n_star), (1, 500));
        let c2 = CostModel::new(1000.0, 3.0, 1.0).unwrap();
        assert_eq!(budget_uniform(&c2).n_star, 1000);
    }

    #[test]
    fn prefill_decode_spot_values() {
        let a = budget_prefill_decode(&CostModel::new(1000.0, 8.0, 1.0).unwrap());
        assert!((a.k_star - 4.0).abs() < 1e-12);
        assert_eq!(a.k_rounded, 4);
        assert_eq!(a.n_star, 83);
        let a = budget_prefill_decode(&CostModel::new(1000.0, 27.0, 1.0).unwrap());
        assert!((a.k_star - 9.0).abs() < 1e-12);
        assert_eq!(a.k_rounded, 9);
        let a = budget_prefill_decode(&CostModel::new(1000.0, 2.0, 2.0).unwrap());
        assert_eq!(a.k_star, 1.0);
        let a = budget_prefill_decode(&CostModel::new(1000.0, 1.0, 5.0).unwrap());
        assert_eq!(a.k_star, 1.0);
    }

    #[test]
    fn prefill_decode_matches_grid() {
        let c = CostModel::new(1000.0, 8.0, 1.0).unwrap();
        let (k, step) = grid_argmin(|k| prefill_decode_proxy(&c, k), 100.0, 10_000);
        assert!((k - 4.0).abs() <= step);
        let c = CostModel::new(1000.0, 27.0, 1.0).unwrap();
        let (k, step) = grid_argmin(|k| prefill_decode_proxy(&c, k), 100.0, 10_000);
        assert!((k - 9.0).abs() <= step);
    }

    #[test]
    fn variance_budget_spot_values() {
        let c = CostModel::new(1000.0, 4.0, 1.0).unwrap();
        let v = VarianceDecomposition {
            sigma_prompt_sq: 0.01,
            sigma_rollout_sq: 0.09,
        };
        let a = budget_variance(&c, &v);
        assert!((a.k_star - 6.0).abs() < 1e-12);
        assert_eq!(a.k_rounded, 6);
        let (k, step) = grid_argmin(|k| variance_proxy(&c, &v, k), 100.0, 10_000);
        assert!((k - 6.0).abs() <= step);

        let none = VarianceDecomposition {
            sigma_prompt_sq: 0.3,
            sigma_rollout_sq: 0.0,
        };
        assert_eq!(budget_variance(&c, &none).k_star, 1.0);
        let c1 = CostModel::new(100.0, 1.0, 1.0).unwrap();
        let eq = VarianceDecomposition {
            sigma_prompt_sq: 0.2,
            sigma_rollout_sq: 0.2,
        };
        assert_eq!(budget_variance(&c1, &eq).k_star, 1.0);
    }

    #[test]
    fn variance_budget_degenerate_prompt_variance() {
        let c = CostModel::new(100.0, 4.0, 2.0).unwrap();
        let v = VarianceDecomposition {
            sigma_prompt_sq: 0.0,
            sigma_rollout_sq: 0.5,
        };
        let a = budget_variance(&c, &v);
        assert_eq!(a.k_rounded, 48);
        assert_eq!(a.n_star, 1);
        assert!(a.advisory.is_some());
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_k(2.5), 2);
        assert_eq!(round_k(2.5000001), 3);
        assert_eq!(round_k(3.9999999999999996), 4);
        assert_eq!(round_k(0.2), 1);
    }

    #[test]
    fn b_curve_rejects_unsorted() {
        let w =
            crate::world::build_world(2, 2, &crate::world::WorldGenerator::UNIFORM_ALL, 0).unwrap();
        let p = Policy::from_probs(w.pi_ref()).unwrap();
        let b = SampleBudget::new(10, 1, 0.1).unwrap();
        assert!(matches!(
            b_curve(&w, &p, 0.1, &b, &[1.0, 0.5]),
            Err(LabError::UnsortedGrid)
        ));
    }
}
