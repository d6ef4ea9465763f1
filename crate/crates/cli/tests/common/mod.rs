#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Two-link reaching around the hanging pose.
pub const ARM: &str = r#"
seed = 3

[model]
kind = "planar_arm"

[cost]
q = [1.0, 1.0, 0.1, 0.1]
r = [0.01, 0.01]
q_final = [100.0, 100.0, 1.0, 1.0]

[dataset]
n_trajectories = 32
horizon = 100
x0_low = [-1.8708, -0.3, 0.0, 0.0]
x0_high = [-1.2708, 0.3, 0.0, 0.0]
goal_low = [-2.3708, -0.8]
goal_high = [-0.7708, 0.8]

[policy]
hidden = [32, 32]

[admm]
max_iterations = 3

[training]
epochs = 100
batch_size = 128
learning_rate = 0.01
regularizer = "sar"

[training.perturbation]
epsilon = 0.05
sigma = 0.025
k_steps = 1
eta_delta = 0.05
alpha = 1.0
perturb_dims = 4

[eval]
rollouts = 100
lipschitz_epsilon = 0.05
lipschitz_points = 100
disturbances = [{ kind = "sensor", zeta = 0.01 }]
"#;

/// A few seconds of end-to-end work for CLI plumbing tests.
pub fn tiny_arm() -> String {
    ARM.replace("n_trajectories = 32", "n_trajectories = 4")
        .replace("horizon = 100", "horizon = 20")
        .replace("hidden = [32, 32]", "hidden = [8]")
        .replace("max_iterations = 3", "max_iterations = 2")
        .replace("epochs = 100", "epochs = 4")
        .replace("rollouts = 100", "rollouts = 3")
        .replace("lipschitz_points = 100", "lipschitz_points = 4")
}

pub fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn trajreg(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajreg"));
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("TRAJREG_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
