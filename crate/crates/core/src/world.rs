//! Finite RLHF worlds: prompt and response alphabets, the prompt
//! distributions, the reference policy, the oracle reward, and softmax
//! policies over the same alphabet.
//!
//! Every distribution is stored as a dense table so that population
//! quantities can be enumerated exactly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Absolute tolerance for constructed probability vectors and rows.
pub const NORMALISATION_TOL: f64 = 1e-12;

/// Dense row-major table indexed by (prompt, response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(LabError::ShapeMismatch("ragged table rows".into()));
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for x in 0..rows {
            for y in 0..cols {
                data.push(f(x, y));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.cols + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.cols..(x + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn expect_shape(&self, shape: (usize, usize), what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(LabError::ShapeMismatch(format!(
                "{what}: expected {}x{}, got {}x{}",
                shape.0, shape.1, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

fn check_prob_vector(field: &str, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(LabError::world(field, format!("has invalid entry at {i}")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > NORMALISATION_TOL {
        return Err(LabError::world(field, "not normalised"));
    }
    Ok(())
}

fn check_row_stochastic(field: &str, t: &Table) -> Result<()> {
    for (x, row) in t.iter_rows().enumerate() {
        check_prob_vector(field, row)
            .map_err(|_| LabError::world(field, format!("row {x} not normalised")))?;
    }
    Ok(())
}

fn check_unit_interval(field: &str, t: &Table) -> Result<()> {
    if let Some(i) = t.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
        let (x, y) = (i / t.cols(), i % t.cols());
        return Err(LabError::world(
            field,
            format!("entry ({x},{y}) outside [0,1]"),
        ));
    }
    Ok(())
}

/// A finite world: prompt distributions, reference policy and oracle reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularWorld {
    rho: Vec<f64>,
    rho_label: Vec<f64>,
    pi_ref: Table,
    r_star: Table,
}

impl TabularWorld {
    pub fn new(rho: Vec<f64>, rho_label: Vec<f64>, pi_ref: Table, r_star: Table) -> Result<Self> {
        let n_prompts = rho.len();
        if n_prompts == 0 || pi_ref.cols() == 0 {
            return Err(LabError::InvalidCount(
                "world needs at least one prompt and response".into(),
            ));
        }
        if rho_label.len() != n_prompts {
            return Err(LabError::world("rho_label", "length differs from rho"));
        }
        if pi_ref.rows() != n_prompts {
            return Err(LabError::world("pi_ref", "row count differs from rho"));
        }
        if r_star.shape() != pi_ref.shape() {
            return Err(LabError::world("r_star", "shape differs from pi_ref"));
        }
        check_prob_vector("rho", &rho)?;
        check_prob_vector("rho_label", &rho_label)?;
        check_row_stochastic("pi_ref", &pi_ref)?;
        check_unit_interval("r_star", &r_star)?;
        Ok(Self {
            rho,
            rho_label,
            pi_ref,
            r_star,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.rho.len()
    }

    pub fn n_responses(&self) -> usize {
        self.pi_ref.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pi_ref.shape()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn rho_label(&self) -> &[f64] {
        &self.rho_label
    }

    pub fn pi_ref(&self) -> &Table {
        &self.pi_ref
    }

    pub fn r_star(&self) -> &Table {
        &self.r_star
    }

    /// Policy-induced joint law `rho(x) * pi(y|x)`.
    pub fn policy_joint(&self, policy: &Policy) -> Result<JointDist> {
        joint(&self.rho, policy.probs())
    }

    /// Reward-model training law `rho_label(x) * pi_ref(y|x)`.
    pub fn train_joint(&self) -> Result<JointDist> {
        joint(&self.rho_label, &self.pi_ref)
    }

    pub(crate) fn check_policy(&self, policy: &Policy) -> Result<()> {
        policy.probs().expect_shape(self.shape(), "policy")
    }

    pub(crate) fn check_reward(&self, reward: &Table) -> Result<()> {
        reward.expect_shape(self.shape(), "reward")
    }
}

/// Softmax policy over responses, one logit row per prompt.
///
/// Log-probabilities are kept alongside the probabilities so log-ratios stay
/// finite even when a probability underflows to zero in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Policy {
    logits: Table,
    probs: Table,
    log_probs: Table,
}

impl Policy {
    pub fn from_logits(logits: Table) -> Result<Self> {
        if let Some(i) = logits.values().iter().position(|v| !v.is_finite()) {
            return Err(LabError::InvalidLogits(format!(
                "non-finite entry at ({},{})",
                i / logits.cols().max(1),
                i % logits.cols().max(1)
            )));
        }
        if logits.rows() == 0 || logits.cols() == 0 {
            return Err(LabError::InvalidLogits("empty logit table".into()));
        }
        let (rows, cols) = logits.shape();
        let mut log_probs = Vec::with_capacity(rows * cols);
        for row in logits.iter_rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            log_probs.extend(row.iter().map(|v| v - lse));
        }
        let log_probs = Table {
            rows,
            cols,
            data: log_probs,
        };
        let mut probs = log_probs.map(f64::exp);
        // renormalise so each row sums to one up to a single rounding
        for x in 0..rows {
            let s: f64 = probs.row(x).iter().sum();
            for v in &mut probs.data[x * cols..(x + 1) * cols] {
                *v /= s;
            }
        }
        Ok(Self {
            logits,
            probs,
            log_probs,
        })
    }

    /// Policy whose probabilities equal a strictly positive row-stochastic table.
    pub fn from_probs(probs: &Table) -> Result<Self> {
        if probs.values().iter().any(|&p| p <= 0.0) {
            return Err(LabError::InvalidLogits(
                "probabilities must be strictly positive".into(),
            ));
        }
        Self::from_logits(probs.map(f64::ln))
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn probs(&self) -> &Table {
        &self.probs
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs.get(x, y)
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs.get(x, y)
    }
}

/// Softmax realisation of a policy from a logit table.
pub fn policy_from_logits(logits: Table) -> Result<Policy> {
    Policy::from_logits(logits)
}

/// Proxy reward table; entries lie in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardModel {
    r_hat: Table,
}

impl RewardModel {
    pub fn new(r_hat: Table) -> Result<Self> {
        check_unit_interval("r_hat", &r_hat)?;
        Ok(Self { r_hat })
    }

    pub fn table(&self) -> &Table {
        &self.r_hat
    }

    /// Pointwise error `r_hat - r_star` against a world's oracle reward.
    pub fn error_against(&self, world: &TabularWorld) -> Result<Table> {
        world.check_reward(&self.r_hat)?;
        let r_star = world.r_star();
        Ok(Table::from_fn(
            world.n_prompts(),
            world.n_responses(),
            |x, y| self.r_hat.get(x, y) - r_star.get(x, y),
        ))
    }
}

/// Joint law over (prompt, response) pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointDist {
    mass: Table,
}

impl JointDist {
    pub fn new(mass: Table) -> Result<Self> {
        if mass.values().iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(LabError::world(
                "joint",
                "has a negative or non-finite mass",
            ));
        }
        let total: f64 = mass.values().iter().sum();
        if (total - 1.0).abs() > NORMALISATION_TOL {
            return Err(LabError::world("joint", "not normalised"));
        }
        Ok(Self { mass })
    }

    pub fn mass(&self) -> &Table {
        &self.mass
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.mass.get(x, y)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mass.shape()
    }

    /// Expectation of a table under this law.
    pub fn expect(&self, f: &Table) -> Result<f64> {
        f.expect_shape(self.shape(), "integrand")?;
        Ok(self
            .mass
            .values()
            .iter()
            .zip(f.values())
            .map(|(m, v)| m * v)
            .sum())
    }
}

/// `mass[x][y] = prompt_dist[x] * response_rows[x][y]`.
pub fn joint(prompt_dist: &[f64], response_rows: &Table) -> Result<JointDist> {
    if prompt_dist.len() != response_rows.rows() {
        return Err(LabError::ShapeMismatch(format!(
            "prompt distribution has {} entries, rows table has {}",
            prompt_dist.len(),
            response_rows.rows()
        )));
    }
    let mass = Table::from_fn(response_rows.rows(), response_rows.cols(), |x, y| {
        prompt_dist[x] * response_rows.get(x, y)
    });
    JointDist::new(mass)
}

/// Per-prompt convex combination of behaviour policies.
pub fn mixture_ref(components: &[&Table], weights: &[f64]) -> Result<Table> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(LabError::InvalidMixtureWeights(format!(
            "{} components but {} weights",
            components.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > NORMALISATION_TOL
    {
        return Err(LabError::InvalidMixtureWeights(
            "weights must be nonnegative and sum to 1".into(),
        ));
    }
    let shape = components[0].shape();
    for c in components {
        c.expect_shape(shape, "mixture component")?;
    }
    Ok(Table::from_fn(shape.0, shape.1, |x, y| {
        components
            .iter()
            .zip(weights)
            .map(|(c, w)| w * c.get(x, y))
            .sum()
    }))
}

/// How the prompt distributions and reference rows are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistributionGen {
    Uniform,
    Dirichlet(f64),
}

/// How the oracle reward table is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardGen {
    /// i.i.d. uniform on [0,1).
    Uniform,
    /// Taken verbatim from a world config file.
    ConfigTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldGenerator {
    pub distributions: DistributionGen,
    pub rewards: RewardGen,
}

impl WorldGenerator {
    pub const UNIFORM_ALL: Self = Self {
        distributions: DistributionGen::Uniform,
        rewards: RewardGen::Uniform,
    };

    pub fn dirichlet(alpha: f64) -> Self {
        Self {
            distributions: DistributionGen::Dirichlet(alpha),
            rewards: RewardGen::Uniform,
        }
    }
}

impl fmt::Display for WorldGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::UNIFORM_ALL {
            return f.write_str("uniform-all");
        }
        match self.distributions {
            DistributionGen::Uniform => f.write_str("uniform")?,
            DistributionGen::Dirichlet(a) => write!(f, "dirichlet({a})")?,
        }
        match self.rewards {
            RewardGen::Uniform => f.write_str(", uniform-reward"),
            RewardGen::ConfigTable => f.write_str(", config-table"),
        }
    }
}

impl FromStr for WorldGenerator {
    type Err = LabError;

    /// Accepts `uniform-all`, or `<dist>, <reward>` with `<dist>` one of
    /// `uniform` / `dirichlet(a)` and `<reward>` one of `uniform-reward` /
    /// `config-table`. The reward part defaults to `uniform-reward`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "uniform-all" {
            return Ok(Self::UNIFORM_ALL);
        }
        let mut parts = s.split(',').map(str::trim);
        let dist = parts.next().unwrap_or_default();
        let distributions = if dist == "uniform" {
            DistributionGen::Uniform
        } else if let Some(inner) = dist
            .strip_prefix("dirichlet(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let alpha: f64 = inner.trim().parse().map_err(|_| {
                LabError::config(format!("bad dirichlet concentration `{inner}`"), None)
            })?;
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(LabError::config(
                    "dirichlet concentration must be positive",
                    None,
                ));
            }
            DistributionGen::Dirichlet(alpha)
        } else {
            return Err(LabError::config(
                format!("unknown distribution generator `{dist}`"),
                None,
            ));
        };
        let rewards = match parts.next() {
            None | Some("uniform-reward") => RewardGen::Uniform,
            Some("config-table") => RewardGen::ConfigTable,
            Some(other) => {
                return Err(LabError::config(
                    format!("unknown reward generator `{other}`"),
                    None,
                ))
            }
        };
        if parts.next().is_some() {
            return Err(LabError::config(
                format!("trailing generator terms in `{s}`"),
                None,
            ));
        }
        Ok(Self {
            distributions,
            rewards,
        })
    }
}

fn draw_simplex(rng: &mut ChaCha8Rng, len: usize, gen: DistributionGen) -> Vec<f64> {
    match gen {
        DistributionGen::Uniform => vec![1.0 / len as f64; len],
        DistributionGen::Dirichlet(alpha) => {
            let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
            // Redraw on underflow so every atom keeps positive mass.
            loop {
                let g: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
                let total: f64 = g.iter().sum();
                if total > 0.0 && g.iter().all(|&v| v / total > 0.0) {
                    return g.into_iter().map(|v| v / total).collect();
                }
            }
        }
    }
}

/// Draws a world from a generator; a pure function of `(generator, seed)`.
pub fn build_world(
    n_prompts: usize,
    n_responses: usize,
    generator: &WorldGenerator,
    seed: u64,
) -> Result<TabularWorld> {
    if n_prompts < 2 || n_responses < 2 {
        return Err(LabError::InvalidCount(format!(
            "need at least 2 prompts and 2 responses, got {n_prompts}x{n_responses}"
        )));
    }
    if generator.rewards == RewardGen::ConfigTable {
        return Err(LabError::world(
            "r_star",
            "config-table rewards need a world config file",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = draw_simplex(&mut rng, n_prompts, generator.distributions);
    let rho_label = draw_simplex(&mut rng, n_prompts, generator.distributions);
    let pi_ref_rows: Vec<Vec<f64>> = (0..n_prompts)
        .map(|_| draw_simplex(&mut rng, n_responses, generator.distributions))
        .collect();
    let pi_ref = Table::from_rows(pi_ref_rows)?;
    let r_star = Table::from_fn(n_prompts, n_responses, |_, _| rng.random::<f64>());
    TabularWorld::new(rho, rho_label, pi_ref, r_star)
}
