//! Chi-square divergence and coverage coefficients, the reward-model
//! training error, and the KL divergence between Gaussians.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::world::{JointDist, Policy, RewardModel, TabularWorld};

/// Coverage coefficients of a policy relative to the reward-model training law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub chi_sq: f64,
    pub c_cov: f64,
    pub c_prompt: f64,
    pub c_pol: f64,
}

/// `chi^2(Q || P) = sum_{P > 0} (Q/P - 1)^2 P`.
pub fn chi_square(q: &JointDist, p: &JointDist) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(LabError::ShapeMismatch(
            "chi-square arguments differ in shape".into(),
        ));
    }
    let (rows, cols) = p.shape();
    let mut chi = 0.0;
    for x in 0..rows {
        for y in 0..cols {
            let (qm, pm) = (q.get(x, y), p.get(x, y));
            if pm == 0.0 {
                if qm > 0.0 {
                    return Err(LabError::CoverageViolated { x, y });
                }
                continue;
            }
            let d = qm / pm - 1.0;
            chi += d * d * pm;
        }
    }
    Ok(chi)
}

/// Second moment of the density ratio, `E_P[(Q/P)^2]`, enumerated directly.
pub fn ratio_second_moment(q: &JointDist, p: &JointDist) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(LabError::ShapeMismatch(
            "density ratio arguments differ in shape".into(),
        ));
    }
    let (rows, cols) = p.shape();
    let mut m = 0.0;
    for x in 0..rows {
        for y in 0..cols {
            let (qm, pm) = (q.get(x, y), p.get(x, y));
            if pm == 0.0 {
                if qm > 0.0 {
                    return Err(LabError::CoverageViolated { x, y });
                }
                continue;
            }
            m += qm * qm / pm;
        }
    }
    Ok(m)
}

/// `C_cov = sqrt(1 + chi^2(D_theta || D_train))` and its prompt/policy factors.
pub fn coverage(world: &TabularWorld, policy: &Policy) -> Result<CoverageReport> {
    world.check_policy(policy)?;
    let chi_sq = chi_square(&world.policy_joint(policy)?, &world.train_joint()?)?;

    let mut prompt_moment = 0.0;
    let mut c_pol_sq: f64 = 0.0;
    for (x, (&r, &rl)) in world.rho().iter().zip(world.rho_label()).enumerate() {
        if rl == 0.0 {
            if r > 0.0 {
                return Err(LabError::CoverageViolated { x, y: 0 });
            }
            continue;
        }
        prompt_moment += r * r / rl;
        let mut row_moment = 0.0;
        for y in 0..world.n_responses() {
            let (pt, pr) = (policy.prob(x, y), world.pi_ref().get(x, y));
            if pr == 0.0 {
                if pt > 0.0 {
                    return Err(LabError::CoverageViolated { x, y });
                }
                continue;
            }
            row_moment += pt * pt / pr;
        }
        c_pol_sq = c_pol_sq.max(row_moment);
    }

    Ok(CoverageReport {
        chi_sq,
        c_cov: (1.0 + chi_sq).sqrt(),
        c_prompt: prompt_moment.sqrt(),
        c_pol: c_pol_sq.sqrt(),
    })
}

/// `E_{D_train}[(r_hat - r_star)^2]`.
pub fn reward_train_error(world: &TabularWorld, model: &RewardModel) -> Result<f64> {
    let err = model.error_against(world)?;
    world.train_joint()?.expect(&err.map(|e| e * e))
}

pub(crate) fn cholesky_checked(
    name: &str,
    m: &DMatrix<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(LabError::NotPositiveDefinite(format!(
            "{name} is not square"
        )));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(LabError::NotPositiveDefinite(format!(
            "{name} is not symmetric"
        )));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| LabError::NotPositiveDefinite(name.to_string()))
}

pub(crate) fn log_det_spd(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// `KL(N(mu_q, sigma_q) || N(mu_p, sigma_p))`, log-determinants via Cholesky.
pub fn gaussian_kl(
    mu_q: &DVector<f64>,
    sigma_q: &DMatrix<f64>,
    mu_p: &DVector<f64>,
    sigma_p: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_q.len();
    if mu_p.len() != d || sigma_q.shape() != (d, d) || sigma_p.shape() != (d, d) {
        return Err(LabError::ShapeMismatch(
            "Gaussian dimensions disagree".into(),
        ));
    }
    let chol_q = cholesky_checked("sigma_q", sigma_q)?;
    let chol_p = cholesky_checked("sigma_p", sigma_p)?;
    let trace = chol_p.solve(sigma_q).trace();
    let diff = mu_q - mu_p;
    let quad = diff.dot(&chol_p.solve(&diff));
    let kl = 0.5 * (trace + quad - d as f64 + log_det_spd(&chol_p) - log_det_spd(&chol_q));
    Ok(kl)
}
