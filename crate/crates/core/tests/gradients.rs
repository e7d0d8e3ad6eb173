use copa_core::nn::{grad_check, grad_check_fn, mlp_init, Activation, FusionArch, FusionNet, LayerSpec, Target};
use copa_core::rng::rng_from_seed;
use copa_core::scm::Sample;
use copa_core::train::{objective_loss_grad, Objective};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random_samples(arch: &FusionArch, n: usize, seed: u64) -> (Vec<Sample>, Vec<Vec<f64>>) {
    let mut r = rng_from_seed(seed);
    let samples = (0..n)
        .map(|_| Sample {
            x: (0..arch.x_dim).map(|_| r.random_range(-2.0..2.0)).collect(),
            y: r.random_range(0..arch.classes),
            z: (0..arch.z_dim).map(|_| f64::from(r.random_range(0..2u8))).collect(),
            site_id: "s".into(),
        })
        .collect();
    let prevs = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..arch.classes).map(|_| r.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (samples, prevs)
}

fn fusion_error(arch: FusionArch, objective: Objective, seed: u64) -> f64 {
    let mut net = FusionNet::new(arch, seed).unwrap();
    // move away from the zero-bias initialization
    let mut r = rng_from_seed(seed ^ 0xabc);
    net.params.iter_mut().for_each(|p| *p += r.random_range(-0.3..0.3));
    let (samples, prevs) = random_samples(&arch, 16, seed);
    let refs: Vec<&Sample> = samples.iter().collect();
    let prefs: Vec<&[f64]> = prevs.iter().map(Vec::as_slice).collect();
    let (_, analytic) = objective_loss_grad(&net, &refs, &prefs, objective).unwrap();
    let mut probe = net.clone();
    grad_check_fn(
        &net.params,
        &analytic,
        |v| {
            probe.params.copy_from_slice(v);
            objective_loss_grad(&probe, &refs, &prefs, objective).unwrap().0
        },
        H,
        seed,
    )
}

fn arch(z_dim: usize, act: Activation, classes: usize) -> FusionArch {
    FusionArch {
        x_dim: 2,
        z_dim,
        rep_dim: 10,
        backbone_activation: act,
        classes,
    }
}

#[test]
fn fusion_network_objectives() {
    let objectives = [
        Objective::Plain,
        Objective::Adjusted { normalize: true },
        Objective::Adjusted { normalize: false },
    ];
    for act in [Activation::Identity, Activation::Relu] {
        for z_dim in [0, 1] {
            for classes in [2, 3] {
                for objective in objectives {
                    for seed in 0..INSTANCES {
                        let e = fusion_error(arch(z_dim, act, classes), objective, seed);
                        assert!(e < TOL, "{act:?} z{z_dim} k{classes} {objective:?} seed {seed}: {e}");
                    }
                }
            }
        }
    }
}

#[test]
fn auxiliary_prevalence_network() {
    let specs = [
        LayerSpec::new(1, 20, Activation::Relu),
        LayerSpec::new(20, 20, Activation::Relu),
        LayerSpec::new(20, 20, Activation::Relu),
        LayerSpec::new(20, 2, Activation::Softmax),
    ];
    for seed in 0..INSTANCES {
        let mut params = mlp_init(&specs, seed).unwrap();
        let mut r = rng_from_seed(seed + 100);
        params.values.iter_mut().for_each(|p| *p += r.random_range(-0.1..0.1));
        let batch: Vec<(Vec<f64>, Target)> = (0..12)
            .map(|_| (vec![r.random_range(-2.0..2.0)], Target::Class(r.random_range(0..2))))
            .collect();
        let e = grad_check(&params, &batch, H).unwrap();
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn soft_targets() {
    let specs = [
        LayerSpec::new(3, 4, Activation::Relu),
        LayerSpec::new(4, 3, Activation::Softmax),
    ];
    for seed in 0..INSTANCES {
        let params = mlp_init(&specs, seed).unwrap();
        let mut r = rng_from_seed(seed + 7);
        let batch: Vec<(Vec<f64>, Target)> = (0..8)
            .map(|_| {
                let a: f64 = r.random_range(0.0..1.0);
                let b: f64 = r.random_range(0.0..1.0 - a);
                (
                    (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
                    Target::Dist(vec![a, b, 1.0 - a - b]),
                )
            })
            .collect();
        assert!(grad_check(&params, &batch, H).unwrap() < TOL);
    }
}

#[test]
fn large_step_is_less_accurate_but_finite() {
    let a = arch(1, Activation::Relu, 2);
    let net = FusionNet::new(a, 3).unwrap();
    let (samples, prevs) = random_samples(&a, 8, 3);
    let refs: Vec<&Sample> = samples.iter().collect();
    let prefs: Vec<&[f64]> = prevs.iter().map(Vec::as_slice).collect();
    let obj = Objective::Adjusted { normalize: true };
    let (_, g) = objective_loss_grad(&net, &refs, &prefs, obj).unwrap();
    let mut probe = net.clone();
    let e = grad_check_fn(
        &net.params,
        &g,
        |v| {
            probe.params.copy_from_slice(v);
            objective_loss_grad(&probe, &refs, &prefs, obj).unwrap().0
        },
        0.1,
        0,
    );
    assert!(e.is_finite());
}
