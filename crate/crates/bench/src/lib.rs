//! Fixtures shared by the criterion benches in `benches/`.

use std::f64::consts::PI;

use trajreg_core::advreg::{BcData, Sample};
use trajreg_core::eval::RolloutCase;
use trajreg_core::{Activation, CartPole, CartPoleParams, Mlp, QuadraticCost, StateVector, System};

pub fn cart_pole() -> System {
    System::CartPole(CartPole::new(CartPoleParams::default()).unwrap())
}

pub fn swing_up_cost(goal: f64) -> QuadraticCost {
    let sys = cart_pole();
    QuadraticCost::diagonal(
        &[0.1, 0.01, 1.0, 0.01],
        &[0.01],
        &[100.0, 10.0, 1000.0, 10.0],
        sys.goal_state(&[goal]).unwrap(),
    )
    .unwrap()
}

pub fn hanging() -> StateVector {
    StateVector::from_column_slice(&[0.0, 0.0, PI, 0.0])
}

/// Policy with cart-pole input and output sizes.
pub fn policy(hidden: usize) -> Mlp {
    Mlp::init(&[5, hidden, hidden, 1], Activation::Tanh, 3).unwrap()
}

/// `n` deterministic samples spread over the swing-up region.
pub fn samples(n: usize) -> BcData {
    let samples = (0..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            Sample {
                z: vec![(7.0 * s).sin(), (3.0 * s).cos(), PI * s, (11.0 * s).sin(), 0.1],
                u: vec![5.0 * (5.0 * s).sin()],
            }
        })
        .collect();
    BcData::new(samples, 1)
}

pub fn rollout_cases(n: usize) -> Vec<RolloutCase> {
    (0..n)
        .map(|i| {
            let goal = 0.3 * (i as f64 / n as f64 - 0.5);
            let mut x0 = hanging();
            x0[2] += 0.05 * i as f64;
            RolloutCase {
                x0,
                goal: vec![goal],
                cost: swing_up_cost(goal),
            }
        })
        .collect()
}
