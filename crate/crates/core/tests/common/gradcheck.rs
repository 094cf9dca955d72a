//! Finite-difference checks shared by the gradient tests and the
//! acceptance suite. Each function returns the relative error of every
//! random instance.

use super::{finite_difference, relative_error, rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shiftguard::data::FeatureMatrix;
use shiftguard::models::{
    cw_objective, train_mlp, train_priornet, CwConfig, Differentiable, MlpConfig, MlpModel, PriorNetConfig,
    PriorNetModel,
};

pub const TRIALS: u64 = 50;
pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

struct Instance {
    x: FeatureMatrix,
    labels: Vec<u8>,
    hidden: Vec<usize>,
    skip: bool,
}

fn instance(r: &mut ChaCha8Rng) -> Instance {
    let d = r.random_range(2..5);
    let n = r.random_range(3..8);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random::<bool>())).collect();
    labels[0] = 0;
    labels[1] = 1;
    let depth = r.random_range(1..3);
    Instance {
        x: FeatureMatrix::from_rows(&rows).unwrap(),
        labels,
        hidden: (0..depth).map(|_| r.random_range(2..6)).collect(),
        skip: r.random::<bool>(),
    }
}

fn random_params(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn mlp(r: &mut ChaCha8Rng, inst: &Instance) -> MlpModel {
    let cfg = MlpConfig {
        layer_sizes: inst.hidden.clone(),
        dropout_rate: 0.0,
        use_skip_connections: inst.skip,
        epochs: 1,
        batch_size: None,
        ..MlpConfig::default()
    };
    let mut m = train_mlp(&inst.x, &inst.labels, &cfg).unwrap();
    let p = random_params(r, m.params().len());
    m.set_params(p).unwrap();
    m
}

fn priornet(r: &mut ChaCha8Rng, inst: &Instance, ood: &FeatureMatrix) -> PriorNetModel {
    let cfg = PriorNetConfig {
        layer_sizes: inst.hidden.clone(),
        use_skip_connections: inst.skip,
        lambda_weight: 1.0,
        epochs: 1,
        dropout_rate: 0.0,
        batch_size: None,
        ..PriorNetConfig::default()
    };
    let mut m = train_priornet(&inst.x, &inst.labels, ood, &cfg).unwrap();
    let p = random_params(r, m.params().len());
    m.set_params(p).unwrap();
    m
}

pub fn mlp_parameter_errors(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..TRIALS)
        .map(|_| {
            let inst = instance(&mut r);
            let m = mlp(&mut r, &inst);
            let (_, grad) = m.loss_and_gradient(&inst.x, &inst.labels).unwrap();
            let fd = finite_difference(
                |p| {
                    let mut probe = m.clone();
                    probe.set_params(p.to_vec()).unwrap();
                    probe.loss(&inst.x, &inst.labels).unwrap()
                },
                m.params(),
                H,
            );
            relative_error(&grad, &fd)
        })
        .collect()
}

pub fn mlp_input_errors(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..TRIALS)
        .map(|_| {
            let inst = instance(&mut r);
            let m = mlp(&mut r, &inst);
            let x = inst.x.row(0);
            let dz = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let vjp = m.logit_vjp(x, dz);
            let fd = finite_difference(
                |v| {
                    let z = Differentiable::logits(&m, v);
                    dz[0] * z[0] + dz[1] * z[1]
                },
                x,
                H,
            );
            relative_error(&vjp, &fd)
        })
        .collect()
}

/// Errors of the in-domain and the weighted out-of-domain terms.
pub fn priornet_errors(seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng(seed);
    (0..TRIALS)
        .map(|_| {
            let inst = instance(&mut r);
            let ood_rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..inst.x.cols()).map(|_| r.random_range(-4.0..4.0)).collect())
                .collect();
            let ood = FeatureMatrix::from_rows(&ood_rows).unwrap();
            let m = priornet(&mut r, &inst, &ood);
            let loss = m.loss(&inst.x, &inst.labels, &ood).unwrap();
            let eval = |p: &[f64]| {
                let mut probe = m.clone();
                probe.set_params(p.to_vec()).unwrap();
                probe.loss(&inst.x, &inst.labels, &ood).unwrap()
            };
            let fd_in = finite_difference(|p| eval(p).in_domain, m.params(), H);
            let fd_out = finite_difference(|p| eval(p).ood, m.params(), H);
            (
                relative_error(&loss.in_domain_grad, &fd_in),
                relative_error(&loss.ood_grad, &fd_out),
            )
        })
        .collect()
}

pub fn cw_errors(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..TRIALS)
        .map(|_| {
            let inst = instance(&mut r);
            let m = mlp(&mut r, &inst);
            let x = inst.x.row(0).to_vec();
            let original = u8::from({
                let z = Differentiable::logits(&m, &x);
                z[1] > z[0]
            });
            let delta: Vec<f64> = (0..x.len()).map(|_| r.random_range(-0.5..0.5)).collect();
            let cfg = CwConfig {
                c: r.random_range(0.5..3.0),
                kappa: 0.0,
                ..CwConfig::default()
            };
            let (_, grad) = cw_objective(&m, &x, &delta, original, &cfg);
            let fd = finite_difference(|d| cw_objective(&m, &x, d, original, &cfg).0, &delta, H);
            relative_error(&grad, &fd)
        })
        .collect()
}
