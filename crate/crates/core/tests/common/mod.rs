//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dflshield_core::model::{example_loss, ModelParams};
use dflshield_core::scenario::{run_sim, RunOutput, ScenarioConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::factorial::binomial;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> ScenarioConfig {
    let p = scenario_dir().join(format!("{name}.toml"));
    ScenarioConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn run(cfg: &ScenarioConfig) -> RunOutput {
    run_sim(cfg, Some(&scenario_dir())).expect("simulated run")
}

/// A short 6-node scenario for invariant checks.
pub fn small(security: dflshield_core::ids::SecuritySetting) -> ScenarioConfig {
    let mut c = scenario("baseline-8").with_security(security);
    c.scenario.name = "small".into();
    c.scenario.nodes = 6;
    c.scenario.rounds = 4;
    c
}

/// Coordinate-wise arithmetic mean of `own` and `received`, summed left to right.
pub fn naive_mean(own: &ModelParams, received: &[ModelParams]) -> Vec<f64> {
    let mut acc = own.to_flat();
    for p in received {
        for (a, v) in acc.iter_mut().zip(p.to_flat()) {
            *a += v;
        }
    }
    let n = (received.len() + 1) as f64;
    acc.iter().map(|a| a / n).collect()
}

/// Central finite difference of the example loss in every coordinate.
pub fn fd_gradient(params: &ModelParams, x: &[f64], label: usize, h: f64) -> Vec<f64> {
    let flat = params.to_flat();
    (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let p = ModelParams::from_flat(&params.arch, &plus).unwrap();
            let m = ModelParams::from_flat(&params.arch, &minus).unwrap();
            (example_loss(&p, x, label) - example_loss(&m, x, label)) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

/// Pearson chi-square goodness-of-fit p-value against equal expected counts.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Probability that `n` distinct draws from `m` all land among `a`: `C(a,n)/C(m,n)`.
pub fn all_adjacent_probability(m: u64, a: u64, n: u64) -> f64 {
    if n > a {
        return 0.0;
    }
    binomial(a, n) / binomial(m, n)
}
