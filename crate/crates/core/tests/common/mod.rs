//! Random instances and brute-force oracles shared by the integration tests.
//!
//! The oracles work on raw probability tables with plain loops and share no
//! code with the library beyond table accessors.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlhf_lab::campaign::{noisy_reward_model, random_policy};
use rlhf_lab::world::{build_world, DistributionGen, RewardGen, WorldGenerator};
use rlhf_lab::{Policy, RewardModel, Table, TabularWorld};

pub struct Instance {
    pub world: TabularWorld,
    pub policy: Policy,
    pub model: RewardModel,
    pub beta: f64,
    pub tau: f64,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// World sizes 2..=6 x 2..=10, Dirichlet concentration in [0.2, 2], logit
/// scale in [0.1, 3], reward noise in [0, 0.3].
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n_p = r.random_range(2..=6);
    let n_r = r.random_range(2..=10);
    let gen = WorldGenerator {
        distributions: DistributionGen::Dirichlet(r.random_range(0.2..2.0)),
        rewards: RewardGen::Uniform,
    };
    let world = build_world(n_p, n_r, &gen, r.random()).unwrap();
    let policy = random_policy(&world, r.random_range(0.1..3.0), r.random()).unwrap();
    let model = noisy_reward_model(&world, r.random_range(0.0..0.3), r.random()).unwrap();
    Instance {
        world,
        policy,
        model,
        beta: r.random_range(0.01..2.0),
        tau: r.random_range(0.1..5.0),
    }
}

/// `(x, y, D_theta mass, ell)` over the support of `D_theta`.
pub fn support(world: &TabularWorld, policy: &Policy) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for x in 0..world.n_prompts() {
        for y in 0..world.n_responses() {
            let p = policy.probs().get(x, y);
            let mass = world.rho()[x] * p;
            if mass > 0.0 {
                let ell = p.ln() - world.pi_ref().get(x, y).ln();
                out.push((x, y, mass, ell));
            }
        }
    }
    out
}

pub fn clamp(ell: f64, tau: f64) -> f64 {
    if ell > tau {
        tau
    } else if ell < -tau {
        -tau
    } else {
        ell
    }
}

/// `E_{D_theta}[r - beta clip(ell, tau)]`; `tau = inf` leaves `ell` as is.
pub fn objective(
    world: &TabularWorld,
    policy: &Policy,
    reward: &Table,
    beta: f64,
    tau: f64,
) -> f64 {
    support(world, policy)
        .into_iter()
        .map(|(x, y, m, ell)| m * (reward.get(x, y) - beta * clamp(ell, tau)))
        .sum()
}

/// `E_{D_theta}[(|ell| - tau)_+]`.
pub fn truncation(world: &TabularWorld, policy: &Policy, tau: f64) -> f64 {
    support(world, policy)
        .into_iter()
        .map(|(_, _, m, ell)| m * (ell.abs() - tau).max(0.0))
        .sum()
}

pub fn max_abs_ell(world: &TabularWorld, policy: &Policy) -> f64 {
    support(world, policy)
        .into_iter()
        .map(|(_, _, _, ell)| ell.abs())
        .fold(0.0, f64::max)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
