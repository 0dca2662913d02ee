use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlhf-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn world_gen_then_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "world",
            "gen",
            "--n-prompts",
            "3",
            "--n-responses",
            "4",
            "--seed",
            "9",
            "--out",
            "w.toml",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let check = run(dir.path(), &["world", "check", "w.toml"]);
    assert!(check.status.success());
    assert_eq!(
        String::from_utf8_lossy(&check.stdout).trim(),
        "ok: 3 prompts x 4 responses"
    );
}

#[test]
fn invalid_world_is_an_input_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "rho = [0.5, 0.4]\nrho_label = [0.5, 0.5]\npi_ref = [[0.5, 0.5], [0.5, 0.5]]\nr_star = [[0.1, 0.2], [0.3, 0.4]]\n",
    )
    .unwrap();
    let out = run(dir.path(), &["world", "check", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("rho not normalised") && err.contains("line 1"),
        "{err}"
    );
}

#[test]
fn dump_then_calibrate_tau() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["world", "gen", "--out", "w.toml"])
        .status
        .success());
    let dump = run(
        dir.path(),
        &[
            "world",
            "dump",
            "--world",
            "w.toml",
            "--n",
            "100",
            "--k",
            "4",
            "--delta",
            "0.05",
            "--out",
            "rollouts.jsonl",
        ],
    );
    assert!(
        dump.status.success(),
        "{}",
        String::from_utf8_lossy(&dump.stderr)
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("rollouts.jsonl"))
            .unwrap()
            .lines()
            .count(),
        400
    );

    let out = run(
        dir.path(),
        &[
            "calibrate",
            "tau",
            "--from-dump",
            "rollouts.jsonl",
            "--n",
            "100",
            "--k",
            "4",
            "--delta",
            "0.05",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    let alpha = v["alpha"].as_f64().unwrap();
    let expected = ((80f64).ln() / 200.0).sqrt() + ((80f64).ln() / 800.0).sqrt();
    assert!((alpha - expected).abs() < 1e-11);
    assert!(v["tau_hat"].as_f64().unwrap() >= 0.0);
    assert!(v["clip_fraction"].as_f64().unwrap() <= 2.0 * alpha + 1e-12);
    assert_eq!(v["records"], 400);

    let exact = run(
        dir.path(),
        &[
            "calibrate",
            "tau",
            "--world",
            "w.toml",
            "--n",
            "100",
            "--k",
            "4",
            "--delta",
            "0.05",
        ],
    );
    assert!(exact.status.success());
    assert_eq!(json(&exact)["heuristic"], false);
}

#[test]
fn calibrate_budget_spot_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "calibrate",
            "budget",
            "--budget",
            "1000",
            "--c-prefill",
            "4",
            "--c-decode",
            "1",
            "--sigma-prompt-sq",
            "1",
            "--sigma-rollout-sq",
            "9",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["uniform"]["k_rounded"], 1);
    assert_eq!(v["variance"]["allocation"]["k_rounded"], 6);
    let eight = json(&run(
        dir.path(),
        &[
            "calibrate",
            "budget",
            "--budget",
            "1000",
            "--c-prefill",
            "8",
            "--c-decode",
            "1",
        ],
    ));
    assert_eq!(eight["prefill_decode"]["k_rounded"], 4);
}

#[test]
fn verify_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.cfg"),
        "trials = 200\ntargets = [\"lemma4\", \"ou\"]\n",
    )
    .unwrap();
    let a = run(
        dir.path(),
        &["verify", "--config", "c.cfg", "--seed", "7", "--out", "a"],
    );
    let b = run(
        dir.path(),
        &["verify", "--config", "c.cfg", "--seed", "7", "--out", "b"],
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for name in names {
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
}

#[test]
fn verify_default_targets_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "verify",
            "--targets",
            "lemma2,lemma3,lemma4,eq12,theorem1",
            "--out",
            "r",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
}

#[test]
fn verify_usage_and_trial_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(dir.path(), &["verify", "--targets", "lemma9"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["verify", "--trials", "50"]).status.code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));

    fs::write(
        dir.path().join("huge.cfg"),
        "trials = 100\n[policy]\nlogit_scale = 1e308\n",
    )
    .unwrap();
    let out = run(dir.path(), &["verify", "--config", "huge.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trial") && err.contains("seed"), "{err}");
}

#[test]
fn pacbayes_dirac_kl() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "pacbayes",
            "--m",
            "8",
            "--posterior",
            "dirac:3",
            "--n",
            "100",
            "--k",
            "1",
            "--delta",
            "0.05",
            "--beta",
            "0",
            "--tau",
            "1",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert!((v["kl"].as_f64().unwrap() - 8f64.ln()).abs() < 1e-11);
    let uniform = json(&run(
        dir.path(),
        &[
            "pacbayes", "--m", "8", "--n", "100", "--k", "1", "--delta", "0.05", "--beta", "0",
            "--tau", "1",
        ],
    ));
    assert!(
        (uniform["bound"].as_f64().unwrap() - 2.0 * ((160f64).ln() / 200.0).sqrt()).abs() < 1e-11
    );
}

#[test]
fn ou_random_and_file_instances() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["ou", "--dim", "3", "--instances", "5", "--seed", "1"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(&out).as_array().unwrap().len(), 5);

    fs::write(
        dir.path().join("ou.toml"),
        "theta_hat = [1.0]\ntheta_0 = [0.0]\nlambda = [[1.0]]\nhessian = [[2.0]]\nsigma_g = [[1.0]]\nepsilon = 0.5\n",
    )
    .unwrap();
    let v = json(&run(dir.path(), &["ou", "--config", "ou.toml"]));
    let inst = &v[0];
    assert_eq!(inst["pass"], true);
    // scalar case: the bound is attained
    assert!(
        (inst["exact_kl"].as_f64().unwrap() - inst["kl_bound"].as_f64().unwrap()).abs() < 1e-11
    );
    let bad = "theta_hat = [1.0]\ntheta_0 = [0.0]\nlambda = [[-1.0]]\nhessian = [[2.0]]\nsigma_g = [[1.0]]\nepsilon = 0.5\n";
    fs::write(dir.path().join("bad.toml"), bad).unwrap();
    assert_eq!(
        run(dir.path(), &["ou", "--config", "bad.toml"])
            .status
            .code(),
        Some(2)
    );
}
