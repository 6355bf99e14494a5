mod common;

use common::*;
use sitn::autodiff::Graph;
use sitn::params::ParamStore;
use sitn::ssl::{i2c_space_loss, i2i_loss, ContrastConfig, InterestSpace};
use sitn::tensor::Matrix;

#[test]
fn losses_match_reference_on_random_small_cases() {
    for (name, worst) in oracle_sweep(60) {
        assert!(worst <= 1e-6, "{name}: max abs deviation {worst:e}");
    }
}

#[test]
fn identical_instances_give_2n_ln_n() {
    let cfg = ContrastConfig::default();
    for n in 1..=6 {
        let p = Matrix::filled(n, 3, 0.4);
        let mut g = Graph::new();
        let a = g.constant(p.clone());
        let b = g.constant(p);
        let l = i2i_loss(&mut g, a, b, &cfg).unwrap();
        let expected = 2.0 * n as f64 * (n as f64).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-6, "n={n}");
    }
}

#[test]
fn single_instance_single_cluster_gives_ln2_per_direction() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let sp = InterestSpace::init(&mut store, "s", 1, 1, 3, false, &mut rng).unwrap();
    let mut g = Graph::new();
    let ps = g.constant(Matrix::row_vector(&[0.3, -1.2, 0.5]));
    let pt = g.constant(Matrix::row_vector(&[1.1, 0.2, -0.7]));
    let cfg = ContrastConfig { temperature: 0.3, normalize: false };
    let t = i2c_space_loss(&mut g, &store, ps, pt, &sp, &cfg).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((g.scalar(t.s2t) - ln2).abs() < 1e-6);
    assert!((g.scalar(t.t2s) - ln2).abs() < 1e-6);
}

#[test]
fn reference_i2i_matches_hand_computed_pair() {
    // n=2, D=1, tau=1: p_s = [1, 0], p_t = [1, 2]
    let ps = vec![vec![1.0], vec![0.0]];
    let pt = vec![vec![1.0], vec![2.0]];
    let s2t = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln() - (1.0f64 / 2.0).ln();
    let t2s = -(1f64.exp() / (1f64.exp() + 1.0)).ln() - (1.0 / (2f64.exp() + 1.0)).ln();
    assert!((ref_i2i(&ps, &pt, 1.0) - (s2t + t2s)).abs() < 1e-12);
}
