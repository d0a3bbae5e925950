mod common;

use common::{fd_gradient, naive_mean, rel_err};
use dflshield_core::model::{
    aggregate_fedavg, gradient, mean_loss, train_local, Activation, BlobSpec, Dataset, Head,
    ModelArchitecture, ModelParams, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_arch(rng: &mut ChaCha8Rng, activations: &[Activation]) -> ModelArchitecture {
    let depth = rng.gen_range(0..3);
    let mut sizes = vec![rng.gen_range(1..6)];
    sizes.extend((0..depth).map(|_| rng.gen_range(1..9)));
    sizes.push(rng.gen_range(2..5));
    let act = activations[rng.gen_range(0..activations.len())];
    let head = if rng.gen_bool(0.5) {
        Head::SoftmaxCrossEntropy
    } else {
        Head::LinearSquared
    };
    ModelArchitecture::new(sizes, act).unwrap().with_head(head)
}

#[test]
fn fedavg_matches_naive_mean_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let all = [Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Identity];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let arch = random_arch(&mut rng, &all);
        let own = ModelParams::init(&arch, &mut rng).unwrap();
        let k = rng.gen_range(0..12);
        let received: Vec<ModelParams> = (0..k)
            .map(|_| {
                let mut p = ModelParams::init(&arch, &mut rng).unwrap();
                let scale = 10f64.powi(rng.gen_range(-3..4));
                p.values_mut().for_each(|v| *v *= scale);
                p
            })
            .collect();
        let got = aggregate_fedavg(&own, &received).unwrap().to_flat();
        let want = naive_mean(&own, &received);
        let e = rel_err(&got, &want);
        worst = worst.max(e);
        assert!(e <= 1e-12, "relative error {e:e} with {k} received sets");
    }
    println!("worst FedAvg relative error {worst:e}");
}

#[test]
fn gradients_match_finite_differences_on_20_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let smooth = [Activation::Tanh, Activation::Sigmoid, Activation::Identity];
    for m in 0..20 {
        let arch = random_arch(&mut rng, &smooth);
        let params = ModelParams::init(&arch, &mut rng).unwrap();
        let x: Vec<f64> = (0..arch.inputs()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let label = rng.gen_range(0..arch.outputs());
        let (g, _) = gradient(&params, &x, label).unwrap();
        let fd = fd_gradient(&params, &x, label, 1e-5);
        let e = rel_err(&g.to_flat(), &fd);
        assert!(e <= 1e-4, "model {m}: relative error {e:e}");
    }
}

#[test]
fn local_training_lowers_the_loss() {
    let data = Dataset::gaussian_blobs(BlobSpec {
        samples: 300,
        classes: 3,
        dims: 4,
        spread: 1.6,
        center_box: 5.0,
        seed: 42,
    });
    let arch = ModelArchitecture::new(vec![4, 16, 3], Activation::Tanh).unwrap();
    let theta = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainConfig {
        local_epochs: 3,
        ..TrainConfig::default()
    };
    let trained = train_local(&theta, &data, &cfg, 9).unwrap();
    assert!(mean_loss(&trained, &data) < 0.5 * mean_loss(&theta, &data));
}

fn params_strategy() -> impl Strategy<Value = (ModelParams, Vec<ModelParams>, u64)> {
    (any::<u64>(), 0usize..8).prop_map(|(seed, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = ModelArchitecture::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        let own = ModelParams::init(&arch, &mut rng).unwrap();
        let rec = (0..k).map(|_| ModelParams::init(&arch, &mut rng).unwrap()).collect();
        (own, rec, seed)
    })
}

proptest! {
    #[test]
    fn fedavg_ignores_arrival_order((own, mut received, seed) in params_strategy()) {
        let a = aggregate_fedavg(&own, &received).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in (1..received.len()).rev() {
            received.swap(i, rng.gen_range(0..=i));
        }
        let b = aggregate_fedavg(&own, &received).unwrap();
        prop_assert_eq!(a.to_flat(), b.to_flat());
    }

    #[test]
    fn fedavg_stays_within_coordinate_bounds((own, received, _) in params_strategy()) {
        let out = aggregate_fedavg(&own, &received).unwrap().to_flat();
        let sets: Vec<Vec<f64>> = std::iter::once(own.to_flat())
            .chain(received.iter().map(ModelParams::to_flat))
            .collect();
        for (i, v) in out.iter().enumerate() {
            let lo = sets.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min);
            let hi = sets.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *v && *v <= hi);
        }
    }

    #[test]
    fn params_survive_the_wire((own, _, _) in params_strategy()) {
        let back = ModelParams::from_bytes(&own.to_bytes()).unwrap();
        prop_assert_eq!(back, own);
    }
}
