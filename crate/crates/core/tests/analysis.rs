use bridgeflow::analysis::{self, SdeConfig};

fn config(seed: u64) -> SdeConfig {
    SdeConfig {
        sigma_min: 0.1,
        sigma: 0.5,
        z0: vec![0.0, 1.0],
        z1: vec![1.0, -1.0],
        checkpoints: vec![0.25, 0.5, 0.75, 0.9],
        paths: 4000,
        dt: 1e-3,
        seed,
    }
}

#[test]
fn sde_marginals_follow_the_bridge() {
    let rep = analysis::sde_moment_check(&config(1)).unwrap();
    assert!(rep.max_z() < 4.5, "{rep:?}");
}

/// Both SDEs share the drift of the mean, so their means agree; the
/// alternative one only matches its own Ito variance.
#[test]
fn alternative_sde_shares_the_mean() {
    let cfg = config(2);
    let sde = analysis::sde_moment_check(&cfg).unwrap();
    let alt = analysis::alt_sde_check(&cfg).unwrap();
    for (a, b) in sde.rows.iter().zip(&alt.rows) {
        assert_eq!(a.t, b.t);
        assert!(a.mean_z < 4.5 && b.mean_z < 4.5, "{a:?} {b:?}");
        assert!(b.var_ito_z < 4.5, "{b:?}");
    }
}

#[test]
fn variance_lemma_equality_case() {
    let rep = analysis::lemma1_check(200_000, 3).unwrap();
    assert!(rep.diff.abs() < 4.0 * rep.se, "{rep:?}");
    assert!((rep.var_lhs - 1.25).abs() < 0.02);
}
