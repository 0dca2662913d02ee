//! Property tests for the library's structural invariants.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use rlhf_lab::bounds::{prompt_bound, rollout_bound, sampling_bound};
use rlhf_lab::calibration::{alpha, empirical_tau, optimal_tau};
use rlhf_lab::campaign::{CampaignConfig, Target};
use rlhf_lab::divergences::gaussian_kl;
use rlhf_lab::objectives::{clip_log_ratio, exact_kl, truncation_mass};
use rlhf_lab::sampling::draw_sample;
use rlhf_lab::world::policy_from_logits;
use rlhf_lab::{ClipPenaltySpec, SampleBudget, Table};

fn logits() -> impl Strategy<Value = Table> {
    (1usize..5, 2usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0f64..20.0, r * c)
            .prop_map(move |v| Table::from_fn(r, c, |x, y| v[x * c + y]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_ignores_row_shifts(t in logits(), shifts in prop::collection::vec(-1e4f64..1e4, 5)) {
        let shifted = Table::from_fn(t.rows(), t.cols(), |x, y| t.get(x, y) + shifts[x]);
        let (a, b) = (policy_from_logits(t).unwrap(), policy_from_logits(shifted).unwrap());
        for (p, q) in a.probs().values().iter().zip(b.probs().values()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
        for row in a.probs().iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_excess_is_positive_part(ell in -50.0f64..50.0, tau in 0.0f64..20.0) {
        let c = clip_log_ratio(ell, tau).unwrap();
        prop_assert!(c.abs() <= tau);
        prop_assert!(((ell - c).abs() - (ell.abs() - tau).max(0.0)).abs() <= 1e-12);
        prop_assert_eq!(clip_log_ratio(ell, f64::INFINITY).unwrap(), ell);
    }

    #[test]
    fn truncation_mass_is_nonincreasing_and_lipschitz(seed in any::<u64>(), t1 in 0.0f64..6.0, dt in 0.0f64..3.0) {
        let inst = random_instance(seed);
        let a = truncation_mass(&inst.world, &inst.policy, t1).unwrap();
        let b = truncation_mass(&inst.world, &inst.policy, t1 + dt).unwrap();
        prop_assert!(a - b >= -1e-12);
        prop_assert!(a - b <= dt + 1e-12);
        prop_assert!((a - truncation(&inst.world, &inst.policy, t1)).abs() <= 1e-12);
    }

    #[test]
    fn exact_kl_is_nonnegative_mean_log_ratio(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (w, p) = (&inst.world, &inst.policy);
        for x in 0..w.n_prompts() {
            let kl = exact_kl(p, w.pi_ref(), x).unwrap();
            let mean: f64 = (0..w.n_responses())
                .map(|y| {
                    let q = p.probs().get(x, y);
                    if q > 0.0 { q * (q.ln() - w.pi_ref().get(x, y).ln()) } else { 0.0 }
                })
                .sum();
            prop_assert!(kl >= 0.0);
            prop_assert!(rel_close(kl, mean, 1e-10));
        }
    }

    #[test]
    fn change_of_measure(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (w, p) = (&inst.world, &inst.policy);
        let q = w.policy_joint(p).unwrap();
        let tr = w.train_joint().unwrap();
        let f = inst.model.table();
        let direct = q.expect(f).unwrap();
        let mut weighted = 0.0;
        for x in 0..w.n_prompts() {
            for y in 0..w.n_responses() {
                if tr.get(x, y) > 0.0 {
                    weighted += tr.get(x, y) * (q.get(x, y) / tr.get(x, y)) * f.get(x, y);
                }
            }
        }
        prop_assert!(rel_close(direct, weighted, 1e-10));
    }

    #[test]
    fn sampling_bound_monotone_and_split(
        n in 1usize..500, k in 1usize..64, delta in 0.001f64..0.9,
        beta in 0.0f64..2.0, tau in 0.0f64..5.0,
    ) {
        let spec = ClipPenaltySpec::new(beta, tau).unwrap();
        let b = SampleBudget::new(n, k, delta).unwrap();
        let v = sampling_bound(&b, &spec).unwrap();
        prop_assert!(sampling_bound(&SampleBudget::new(n + 1, k, delta).unwrap(), &spec).unwrap() < v);
        prop_assert!(sampling_bound(&SampleBudget::new(n, k + 1, delta).unwrap(), &spec).unwrap() < v);
        prop_assert!(sampling_bound(&b, &ClipPenaltySpec::new(beta + 0.1, tau + 0.1).unwrap()).unwrap() > v);
        // a union over the two stages at delta/2 each
        let half = SampleBudget::new(n, k, delta / 2.0).unwrap();
        let split = prompt_bound(&half, &spec).unwrap() + rollout_bound(&half, &spec).unwrap();
        prop_assert!(rel_close(split, v, 1e-12));
        prop_assert!(ClipPenaltySpec::unclipped(beta).map(|s| sampling_bound(&b, &s).is_err()).unwrap());
    }

    #[test]
    fn optimal_tau_grows_with_budget(seed in any::<u64>(), n in 1usize..200, k in 1usize..16) {
        let inst = random_instance(seed);
        let small = SampleBudget::new(n, k, 0.1).unwrap();
        let t0 = optimal_tau(&inst.world, &inst.policy, &small).unwrap();
        let t1 = optimal_tau(&inst.world, &inst.policy, &SampleBudget::new(n * 2, k, 0.1).unwrap()).unwrap();
        let t2 = optimal_tau(&inst.world, &inst.policy, &SampleBudget::new(n, k * 2, 0.1).unwrap()).unwrap();
        prop_assert!(t1 >= t0 && t2 >= t0);
        prop_assert!(t0 <= max_abs_ell(&inst.world, &inst.policy));
    }

    #[test]
    fn empirical_tau_order_statistic(mags in prop::collection::vec(0.0f64..10.0, 1..200), a in 0.0f64..0.6) {
        let tau = empirical_tau(&mags, a).unwrap();
        if 2.0 * a >= 1.0 {
            prop_assert_eq!(tau, 0.0);
        } else {
            prop_assert!(mags.contains(&tau));
            let above = mags.iter().filter(|&&m| m > tau).count() as f64 / mags.len() as f64;
            prop_assert!(above <= 2.0 * a + 1e-12);
            let mut rev = mags.clone();
            rev.reverse();
            prop_assert_eq!(empirical_tau(&rev, a).unwrap(), tau);
        }
    }

    #[test]
    fn gaussian_kl_nonnegative(d in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut spd = || {
            let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(d, d) * 0.05
        };
        let (sq, sp) = (spd(), spd());
        let mq = DVector::from_fn(d, |i, _| i as f64 * 0.3);
        let mp = DVector::zeros(d);
        prop_assert!(gaussian_kl(&mq, &sq, &mp, &sp).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&mq, &sq, &mq, &sq).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn samples_are_seed_deterministic(seed in any::<u64>(), draw in any::<u64>()) {
        let inst = random_instance(seed);
        let b = SampleBudget::new(7, 3, 0.1).unwrap();
        let s1 = draw_sample(&inst.world, &inst.policy, &b, draw).unwrap();
        let s2 = draw_sample(&inst.world, &inst.policy, &b, draw).unwrap();
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn config_hash_ignores_layout(trials in 100u64..5000, n in 1usize..100, pad in 0usize..4) {
        let cfg = CampaignConfig {
            trials,
            targets: [Target::Lemma4, Target::Ou].into_iter().collect(),
            budget: SampleBudget::new(n, 2, 0.1).unwrap(),
            ..Default::default()
        };
        let text = cfg.canonical();
        let padded: String = text
            .lines()
            .map(|l| format!("{}{l}{}\n", " ".repeat(pad), " ".repeat(pad)))
            .collect::<String>()
            .replace("\n[", "\n# section\n\n[");
        let reparsed = CampaignConfig::parse(&padded).unwrap();
        prop_assert_eq!(reparsed.hash(), cfg.hash());
    }
}

#[test]
fn alpha_matches_unit_range_sampling_bound() {
    let b = SampleBudget::new(100, 1, 0.05).unwrap();
    let zero = ClipPenaltySpec::new(0.0, 1.0).unwrap();
    assert!(rel_close(
        alpha(&b).unwrap(),
        sampling_bound(&b, &zero).unwrap(),
        1e-15
    ));
}
