use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajreg_core::advreg::{inner_maximize, project_ball};
use trajreg_core::{Activation, Mlp, PerturbationConfig};

#[test]
fn every_ascent_iterate_stays_in_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let nets: Vec<Mlp> = (0..8)
        .map(|s| Mlp::init(&[5, 16, 16, 2], Activation::Tanh, s).unwrap())
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..100_000 {
        let net = &nets[trial % nets.len()];
        let epsilon = 10f64.powf(rng.random_range(-4.0..0.0));
        let cfg = PerturbationConfig {
            epsilon,
            sigma: epsilon * rng.random_range(0.1..3.0),
            k_steps: rng.random_range(1..=3),
            eta_delta: epsilon * 10f64.powf(rng.random_range(-1.0..2.0)),
            alpha: 1.0,
            perturb_dims: None,
        };
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = inner_maximize(net, &z, &cfg, &mut rng).unwrap();
        for d in &tape.deltas[1..] {
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(n - epsilon);
        }
    }
    assert!(worst <= 1e-12, "max excess {worst:e}");
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..8), eps in 1e-3f64..5.0) {
        let p = project_ball(&v, eps);
        let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= eps * (1.0 + 1e-15));
        let again = project_ball(&p, eps);
        for (a, b) in again.iter().zip(&p) {
            prop_assert!((a - b).abs() <= 1e-15 * eps.max(b.abs()));
        }
        if n < eps * (1.0 - 1e-12) {
            prop_assert_eq!(p, v);
        }
    }
}
