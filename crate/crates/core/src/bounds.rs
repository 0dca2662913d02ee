//! Closed-form generalisation bounds: the sampling terms, reward shift,
//! clipping error, the fixed-policy assembly, PAC-Bayes complexity for finite
//! candidate classes, and the Ornstein-Uhlenbeck (OU) stationary covariance
//! with its KL bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::divergences::{
    cholesky_checked, coverage, gaussian_kl, log_det_spd, reward_train_error, CoverageReport,
};
use crate::error::{LabError, Result};
use crate::objectives::{clipping_error, population_objective, ClipPenaltySpec};
use crate::sampling::{empirical_objective, EvalSample, SampleBudget};
use crate::world::{Policy, RewardModel, TabularWorld};

/// Additive slack on every bound comparison.
pub const HELD_SLACK: f64 = 1e-9;

fn hoeffding_width(log_term: f64, count: f64) -> f64 {
    (log_term / (2.0 * count)).sqrt()
}

/// Rollout sampling error: `(1+2 beta tau) sqrt(log(2/delta) / (2nK))`.
pub fn rollout_bound(budget: &SampleBudget, spec: &ClipPenaltySpec) -> Result<f64> {
    budget.validate()?;
    let log_term = (2.0 / budget.delta).ln();
    Ok(spec.range_factor()? * hoeffding_width(log_term, (budget.n * budget.k) as f64))
}

/// Prompt sampling error: `(1+2 beta tau) sqrt(log(2/delta) / (2n))`.
pub fn prompt_bound(budget: &SampleBudget, spec: &ClipPenaltySpec) -> Result<f64> {
    budget.validate()?;
    let log_term = (2.0 / budget.delta).ln();
    Ok(spec.range_factor()? * hoeffding_width(log_term, budget.n as f64))
}

/// `sqrt(L / (2n)) + sqrt(L / (2nK))` for a given log term `L`.
pub(crate) fn two_stage_width(log_term: f64, budget: &SampleBudget) -> f64 {
    hoeffding_width(log_term, budget.n as f64)
        + hoeffding_width(log_term, (budget.n * budget.k) as f64)
}

/// Combined sampling error with a `log(4/delta)` union over both stages.
pub fn sampling_bound(budget: &SampleBudget, spec: &ClipPenaltySpec) -> Result<f64> {
    budget.validate()?;
    Ok(spec.range_factor()? * two_stage_width((4.0 / budget.delta).ln(), budget))
}

/// Concentration of the clipped log-ratio mean: range `2 tau`.
pub fn kappa_bound(budget: &SampleBudget, tau: f64) -> Result<f64> {
    budget.validate()?;
    if tau.is_nan() || tau < 0.0 {
        return Err(LabError::InvalidThreshold(tau));
    }
    if tau.is_infinite() {
        return Err(LabError::UnclippedThreshold);
    }
    Ok(2.0 * tau * two_stage_width((4.0 / budget.delta).ln(), budget))
}

/// `C_cov * sqrt(L2_train)`.
pub fn shift_bound(cov: &CoverageReport, l2_train: f64) -> f64 {
    cov.c_cov * l2_train.max(0.0).sqrt()
}

/// Per-term breakdown of a generalisation bound and whether it held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub actual_gap: Option<f64>,
    pub sampling_term: f64,
    pub shift_term: f64,
    pub clip_term: f64,
    pub total_bound: f64,
    pub held: bool,
}

impl BoundReport {
    pub fn assemble(
        actual_gap: Option<f64>,
        sampling_term: f64,
        shift_term: f64,
        clip_term: f64,
    ) -> Self {
        let total_bound = sampling_term + shift_term + clip_term;
        let held = actual_gap.is_none_or(|g| g <= total_bound + HELD_SLACK);
        Self {
            actual_gap,
            sampling_term,
            shift_term,
            clip_term,
            total_bound,
            held,
        }
    }
}

/// Fixed-policy bound: sampling + reward shift + clipping error. When a
/// sample is supplied, `actual_gap = |J_hat^{phi,tau}_{n,K} - J*|`.
pub fn fixed_policy_bound(
    world: &TabularWorld,
    policy: &Policy,
    model: &RewardModel,
    spec: &ClipPenaltySpec,
    budget: &SampleBudget,
    sample: Option<&EvalSample>,
) -> Result<BoundReport> {
    let sampling_term = sampling_bound(budget, spec)?;
    let cov = coverage(world, policy)?;
    let shift_term = shift_bound(&cov, reward_train_error(world, model)?);
    let clip_term = clipping_error(world, policy, spec)?;
    let actual_gap = match sample {
        Some(s) => {
            let j_hat = empirical_objective(world, policy, model.table(), spec, s)?;
            let j_star =
                population_objective(world, policy, world.r_star(), &spec.without_clipping())?;
            Some((j_hat - j_star.value).abs())
        }
        None => None,
    };
    Ok(BoundReport::assemble(
        actual_gap,
        sampling_term,
        shift_term,
        clip_term,
    ))
}

/// Finite candidate class with a uniform prior and posterior `Q`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteClassSpec {
    posterior: Vec<f64>,
}

impl FiniteClassSpec {
    pub fn new(posterior: Vec<f64>) -> Result<Self> {
        if posterior.len() < 2 {
            return Err(LabError::InvalidPosterior(
                "need at least two candidates".into(),
            ));
        }
        if posterior.iter().any(|q| !q.is_finite() || *q < 0.0)
            || (posterior.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(LabError::InvalidPosterior(
                "posterior must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(Self { posterior })
    }

    pub fn dirac(m_candidates: usize, index: usize) -> Result<Self> {
        if index >= m_candidates {
            return Err(LabError::InvalidPosterior(format!(
                "candidate {index} out of range for M = {m_candidates}"
            )));
        }
        let mut q = vec![0.0; m_candidates];
        q[index] = 1.0;
        Self::new(q)
    }

    pub fn uniform(m_candidates: usize) -> Result<Self> {
        Self::new(vec![1.0 / m_candidates as f64; m_candidates])
    }

    pub fn m_candidates(&self) -> usize {
        self.posterior.len()
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }
}

/// `KL(Q || Uniform_M) = sum_m q_m log(q_m M)`, with `0 log 0 = 0`.
pub fn finite_class_kl(spec: &FiniteClassSpec) -> f64 {
    let m = spec.m_candidates() as f64;
    spec.posterior
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * (q * m).ln())
        .sum::<f64>()
        .max(0.0)
}

/// PAC-Bayes bound with complexity `KL(Q||P)` and union term `log(8/delta)`,
/// plus the posterior-averaged shift and clipping terms.
pub fn pacbayes_bound(
    kl_qp: f64,
    budget: &SampleBudget,
    spec: &ClipPenaltySpec,
    avg_shift: f64,
    avg_clip: f64,
) -> Result<f64> {
    budget.validate()?;
    if !(kl_qp.is_finite() && kl_qp >= 0.0) {
        return Err(LabError::InvalidPosterior(format!(
            "KL must be finite and nonnegative, got {kl_qp}"
        )));
    }
    let log_term = kl_qp + (8.0 / budget.delta).ln();
    Ok(spec.range_factor()? * two_stage_width(log_term, budget) + avg_shift + avg_clip)
}

/// Posterior-level quantities for a finite candidate class on one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacBayesReport {
    pub kl_qp: f64,
    pub j_hat_q: f64,
    pub j_star_q: f64,
    pub actual_gap: f64,
    pub avg_shift: f64,
    pub avg_clip: f64,
    pub bound: f64,
    pub held: bool,
}

/// Per-candidate ingredients of the PAC-Bayes bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateTerms {
    pub j_hat: f64,
    pub j_star: f64,
    pub shift: f64,
    pub clip: f64,
}

impl CandidateTerms {
    pub fn evaluate(
        world: &TabularWorld,
        policy: &Policy,
        model: &RewardModel,
        spec: &ClipPenaltySpec,
        sample: &EvalSample,
    ) -> Result<Self> {
        let l2 = reward_train_error(world, model)?;
        Ok(Self {
            j_hat: empirical_objective(world, policy, model.table(), spec, sample)?,
            j_star: population_objective(world, policy, world.r_star(), &spec.without_clipping())?
                .value,
            shift: shift_bound(&coverage(world, policy)?, l2),
            clip: clipping_error(world, policy, spec)?,
        })
    }
}

/// Mixes candidate terms under `Q` and evaluates the PAC-Bayes bound.
pub fn finite_class_report(
    class: &FiniteClassSpec,
    terms: &[CandidateTerms],
    budget: &SampleBudget,
    spec: &ClipPenaltySpec,
) -> Result<PacBayesReport> {
    if terms.len() != class.m_candidates() {
        return Err(LabError::ShapeMismatch(format!(
            "{} candidate terms for M = {}",
            terms.len(),
            class.m_candidates()
        )));
    }
    let mix = |f: fn(&CandidateTerms) -> f64| -> f64 {
        class
            .posterior
            .iter()
            .zip(terms)
            .map(|(q, t)| q * f(t))
            .sum()
    };
    let kl_qp = finite_class_kl(class);
    let j_hat_q = mix(|t| t.j_hat);
    let j_star_q = mix(|t| t.j_star);
    let avg_shift = mix(|t| t.shift);
    let avg_clip = mix(|t| t.clip);
    let bound = pacbayes_bound(kl_qp, budget, spec, avg_shift, avg_clip)?;
    let actual_gap = (j_hat_q - j_star_q).abs();
    Ok(PacBayesReport {
        kl_qp,
        j_hat_q,
        j_star_q,
        actual_gap,
        avg_shift,
        avg_clip,
        bound,
        held: actual_gap <= bound + HELD_SLACK,
    })
}

/// Local OU model of late-stage SGD around `theta_hat` with Gaussian prior
/// `N(theta_0, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuSpec {
    pub theta_hat: DVector<f64>,
    pub theta_0: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub sigma_g: DMatrix<f64>,
    pub epsilon: f64,
    pub m_lo: f64,
    pub m_hi: f64,
}

fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

impl OuSpec {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// Checks shapes, positivity, commutation and the curvature sandwich.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0
            || self.theta_0.len() != d
            || self.lambda.shape() != (d, d)
            || self.hessian.shape() != (d, d)
            || self.sigma_g.shape() != (d, d)
        {
            return Err(LabError::ShapeMismatch("OU dimensions disagree".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(LabError::InvalidOuSpec("step size must be positive".into()));
        }
        if !(self.m_lo > 0.0 && self.m_lo <= self.m_hi && self.m_hi.is_finite()) {
            return Err(LabError::InvalidOuSpec(
                "need 0 < m_lo <= m_hi < inf".into(),
            ));
        }
        cholesky_checked("lambda", &self.lambda)?;
        cholesky_checked("hessian", &self.hessian)?;
        cholesky_checked("sigma_g", &self.sigma_g)?;
        let comm = &self.hessian * &self.sigma_g - &self.sigma_g * &self.hessian;
        if comm.amax() > 1e-9 * frobenius(&self.hessian) * frobenius(&self.sigma_g) {
            return Err(LabError::NotCommuting);
        }
        let eig = SymmetricEigen::new(self.hessian.clone()).eigenvalues;
        let tol = 1e-12 * self.m_hi.max(1.0);
        if eig
            .iter()
            .any(|&h| h < self.m_lo - tol || h > self.m_hi + tol)
        {
            return Err(LabError::InvalidOuSpec(
                "Hessian spectrum outside [m_lo, m_hi]".into(),
            ));
        }
        Ok(())
    }
}

/// Solves `H S + S H = eps * Sigma_g` in the eigenbasis of `H`.
pub fn ou_stationary_cov(spec: &OuSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let eig = SymmetricEigen::new(spec.hessian.clone());
    let v = &eig.eigenvectors;
    let h = &eig.eigenvalues;
    let rotated = v.transpose() * &spec.sigma_g * v;
    let d = spec.dim();
    let solved = DMatrix::from_fn(d, d, |i, j| spec.epsilon * rotated[(i, j)] / (h[i] + h[j]));
    let sigma = v * solved * v.transpose();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// `max |H S + S H - eps Sigma_g|`.
pub fn lyapunov_residual(spec: &OuSpec, sigma: &DMatrix<f64>) -> f64 {
    (&spec.hessian * sigma + sigma * &spec.hessian - &spec.sigma_g * spec.epsilon).amax()
}

/// Smallest eigenvalues of `S - (eps/2M) Sigma_g` and `(eps/2m) Sigma_g - S`.
pub fn sandwich_margins(spec: &OuSpec, sigma: &DMatrix<f64>) -> (f64, f64) {
    let lower = sigma - &spec.sigma_g * (spec.epsilon / (2.0 * spec.m_hi));
    let upper = &spec.sigma_g * (spec.epsilon / (2.0 * spec.m_lo)) - sigma;
    let min_eig = |m: DMatrix<f64>| {
        let sym = (&m + m.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    };
    (min_eig(lower), min_eig(upper))
}

/// Upper bound on `KL(N(theta_hat, S) || N(theta_0, lambda))` from the
/// curvature sandwich.
pub fn ou_kl_bound(spec: &OuSpec) -> Result<f64> {
    spec.validate()?;
    let d = spec.dim() as f64;
    let chol_lambda = cholesky_checked("lambda", &spec.lambda)?;
    let chol_g = cholesky_checked("sigma_g", &spec.sigma_g)?;
    let diff = &spec.theta_hat - &spec.theta_0;
    let quad = diff.dot(&chol_lambda.solve(&diff));
    let trace = chol_lambda.solve(&spec.sigma_g).trace();
    Ok(0.5
        * (quad + spec.epsilon / (2.0 * spec.m_lo) * trace - d + log_det_spd(&chol_lambda)
            - log_det_spd(&chol_g)
            - d * (spec.epsilon / (2.0 * spec.m_hi)).ln()))
}

/// Exact KL of the OU stationary law from the prior.
pub fn ou_exact_kl(spec: &OuSpec) -> Result<f64> {
    let sigma = ou_stationary_cov(spec)?;
    gaussian_kl(&spec.theta_hat, &sigma, &spec.theta_0, &spec.lambda)
}
