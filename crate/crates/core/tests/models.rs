mod common;

use common::rng;
use rand::Rng;
use shiftguard::data::{generate_synthetic, split, standardize, FeatureMatrix, Split};
use shiftguard::models::{
    cw_attack, ensemble_predict, priornet_alphas, train_ensemble, train_mlp, train_priornet, train_stumps, CwConfig,
    LinearModel, MlpConfig, ModelDocument, PriorNetConfig, SavedModel,
};

fn blobs(seed: u64) -> (FeatureMatrix, Vec<u8>, FeatureMatrix, Vec<u8>) {
    let data = split(&generate_synthetic(1200, 4, 3.0, seed).unwrap(), (0.6, 0.1, 0.3), seed).unwrap();
    let data = standardize(&data).unwrap();
    let tr = data.subset(Split::Train);
    let te = data.subset(Split::Test);
    (tr.features, tr.labels, te.features, te.labels)
}

fn accuracy(pred: impl Iterator<Item = u8>, truth: &[u8]) -> f64 {
    pred.zip(truth).filter(|(p, t)| p == *t).count() as f64 / truth.len() as f64
}

#[test]
fn stumps_learn_blobs_on_raw_features() {
    let data = split(&generate_synthetic(1200, 4, 3.0, 1).unwrap(), (0.6, 0.1, 0.3), 1).unwrap();
    let tr = data.subset(Split::Train);
    let te = data.subset(Split::Test);
    let m = train_stumps(&tr.features, &tr.labels, 80, 0.3).unwrap();
    let acc = accuracy(
        te.features.iter_rows().map(|r| u8::from(m.score(r).unwrap() > 0.5)),
        &te.labels,
    );
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn ensemble_members_differ_and_average() {
    let (x, y, xt, _) = blobs(2);
    let cfg = MlpConfig {
        epochs: 10,
        ..MlpConfig::default()
    };
    let e = train_ensemble(&x, &y, &cfg, 4, 9).unwrap();
    assert_eq!(e.members.len(), 4);
    assert_ne!(e.members[0].params(), e.members[1].params());
    let out = ensemble_predict(&e, xt.row(0)).unwrap();
    let mean = out.member_probs.iter().map(|p| p.benign()).sum::<f64>() / 4.0;
    assert!((out.mean_probs.benign() - mean).abs() < 1e-12);
}

#[test]
fn priornet_is_less_concentrated_off_distribution() {
    let (x, y, xt, yt) = blobs(3);
    let mut r = rng(3);
    let ood_rows: Vec<Vec<f64>> = (0..3000)
        .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0) * 6.0).collect())
        .collect();
    let ood = FeatureMatrix::from_rows(&ood_rows).unwrap();
    let cfg = PriorNetConfig {
        epochs: 150,
        batch_size: Some(64),
        ..PriorNetConfig::default()
    };
    let m = train_priornet(&x, &y, &ood, &cfg).unwrap();
    let acc = accuracy(
        xt.iter_rows().map(|row| {
            let a = priornet_alphas(&m, row).unwrap().alphas();
            u8::from(a[1] > a[0])
        }),
        &yt,
    );
    assert!(acc > 0.9, "{acc}");
    let mean_a0 = |rows: &FeatureMatrix| {
        rows.iter_rows()
            .map(|row| priornet_alphas(&m, row).unwrap().alpha0())
            .sum::<f64>()
            / rows.rows() as f64
    };
    let far: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..4).map(|_| r.random_range(-6.0..6.0)).collect())
        .collect();
    let (inside, outside) = (mean_a0(&xt), mean_a0(&FeatureMatrix::from_rows(&far).unwrap()));
    assert!(inside > 2.0 * outside, "in {inside} far {outside}");
}

#[test]
fn cw_flips_most_mlp_predictions() {
    let (x, y, xt, _) = blobs(4);
    let m = train_mlp(
        &x,
        &y,
        &MlpConfig {
            epochs: 30,
            ..MlpConfig::default()
        },
    )
    .unwrap();
    let cfg = CwConfig {
        steps: 200,
        ..CwConfig::default()
    };
    let outcomes: Vec<_> = (0..50).map(|i| cw_attack(&m, xt.row(i), &cfg).unwrap()).collect();
    let success = outcomes.iter().filter(|o| o.success).count();
    assert!(success >= 40, "{success}/50");
    for o in outcomes.iter().filter(|o| o.success) {
        let z = m.logits(&o.adversarial).unwrap();
        assert_eq!(u8::from(z[1] > z[0]), o.target_class);
    }
}

#[test]
fn linear_attack_approaches_the_minimal_perturbation() {
    // For z = Wx + b the smallest flip has norm |margin| / ‖w₀ − w₁‖.
    let m = LinearModel::new([vec![1.0, 0.0], vec![-1.0, 0.0]], [0.0, 0.0]).unwrap();
    let x = [0.8, 0.3];
    let o = cw_attack(
        &m,
        &x,
        &CwConfig {
            steps: 500,
            step_size: 0.01,
            c: 5.0,
            ..CwConfig::default()
        },
    )
    .unwrap();
    assert!(o.success);
    assert!(o.perturbation_norm >= 0.8 - 1e-12);
    assert!(o.perturbation_norm < 0.9, "{}", o.perturbation_norm);
}

#[test]
fn saved_models_round_trip() {
    let (x, y, xt, _) = blobs(5);
    let mlp = train_mlp(
        &x,
        &y,
        &MlpConfig {
            epochs: 3,
            ..MlpConfig::default()
        },
    )
    .unwrap();
    let doc = ModelDocument::new(SavedModel::Mlp(mlp.clone()));
    let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
    let SavedModel::Mlp(restored) = back.model else {
        panic!("wrong kind")
    };
    for row in xt.iter_rows().take(20) {
        assert_eq!(mlp.logits(row).unwrap(), restored.logits(row).unwrap());
    }
    let mut tampered: serde_json::Value = serde_json::from_str(&doc.to_json().unwrap()).unwrap();
    tampered["version"] = 99.into();
    assert!(ModelDocument::from_json(&tampered.to_string()).is_err());
}
