use shiftguard::conformal::NcmKind;
use shiftguard::data::{generate_synthetic, split, standardize, ShiftSpec, Split};
use shiftguard::harness::{
    emit_report, evaluate, run_experiment, run_matrix, sweep_csv, train_models, BaseModel, ExperimentReport,
    ExperimentSpec, Pipeline, ReportFormat,
};
use shiftguard::models::{train_mlp, MlpConfig};
use tempfile::TempDir;

fn quick(pipeline: Pipeline, calibrated: bool) -> ExperimentSpec {
    let mut s = ExperimentSpec {
        name: Some("quick".into()),
        pipeline,
        calibrated,
        base_models: vec![BaseModel::Stumps, BaseModel::Ensemble],
        seed: 7,
        ensemble_size: 3,
        ..ExperimentSpec::default()
    };
    s.dataset.n = 1500;
    s.mlp.epochs = 30;
    s.stumps.rounds = 40;
    if pipeline == Pipeline::IceUncertaintyNcm {
        s.ncm_kind = Some(NcmKind::KnowledgeUncertainty);
    }
    s
}

#[test]
fn identical_specs_give_byte_identical_reports() {
    let spec = quick(Pipeline::IceUncertaintyNcm, true);
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let dir = TempDir::new().unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    emit_report(&a, &pa, ReportFormat::Json).unwrap();
    emit_report(&a, &pb, ReportFormat::Json).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let back = ExperimentReport::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn matrix_of_pipelines_and_calibration() {
    let specs: Vec<ExperimentSpec> = Pipeline::ALL
        .iter()
        .flat_map(|&p| [true, false].map(|c| quick(p, c)))
        .collect();
    let out = run_matrix(&specs).unwrap();
    assert_eq!(out.results.len(), 8);
    assert_eq!(out.table.len(), 8);
    for (spec, r) in specs.iter().zip(&out.results) {
        let r = r.as_ref().unwrap();
        let solo = run_experiment(spec).unwrap();
        assert_eq!(r, &solo, "{}", spec.display_name());
        let q = r.quad;
        assert_eq!(q.ca + q.cr + q.ir + q.ia, r.provenance.split_sizes[2]);
    }
}

#[test]
fn matrix_isolates_a_failing_spec() {
    let good = quick(Pipeline::ProbThreshold, false);
    let mut bad = good.clone();
    bad.pipeline = Pipeline::IceUncertaintyNcm;
    bad.base_models = vec![BaseModel::Stumps];
    let out = run_matrix(&[good, bad]).unwrap();
    assert!(out.results[0].is_ok());
    assert!(out.results[1].is_err());
    assert!(out.table[1].error.is_some());
}

#[test]
fn unshifted_test_f1_tracks_validation_f1() {
    let mut spec = quick(Pipeline::ProbThreshold, true);
    spec.dataset.n = 6000;
    let r = run_experiment(&spec).unwrap();
    assert!(
        (r.test_metrics.f1 - r.validation_metrics.f1).abs() < 2.0,
        "{} vs {}",
        r.test_metrics.f1,
        r.validation_metrics.f1
    );
}

#[test]
fn ice_acceptance_matches_validity_when_unshifted() {
    let mut spec = quick(Pipeline::IceProbNcm, true);
    spec.dataset.n = 6000;
    let trained = train_models(&spec).unwrap();
    let s = ExperimentSpec {
        ncm_kind: Some(NcmKind::NegPredictedProbability),
        ..spec
    };
    let r = evaluate(&s, &trained).unwrap();
    let tau = r.decision.value;
    assert!(
        (r.acceptance_rate - (1.0 - tau)).abs() < 0.03,
        "tau {tau} acceptance {}",
        r.acceptance_rate
    );
}

#[test]
fn shift_changes_only_the_test_rows() {
    let base = quick(Pipeline::ProbThreshold, false);
    let shifted = ExperimentSpec {
        shift: ShiftSpec::affine(2.0, 3),
        ..base.clone()
    };
    let trained = train_models(&base).unwrap();
    let a = evaluate(&base, &trained).unwrap();
    let b = evaluate(&shifted, &trained).unwrap();
    assert_eq!(a.provenance.fusion_weight, Some(0.5));
    assert_eq!(b.provenance.fusion_weight, Some(0.8));

    let pinned = ExperimentSpec {
        fusion_weight: Some(0.5),
        ..shifted
    };
    let c = evaluate(&pinned, &trained).unwrap();
    assert_eq!(a.validation_metrics, c.validation_metrics);
    assert_ne!(a.test_metrics, c.test_metrics);
}

#[test]
fn sweep_csv_has_the_plot_columns() {
    let r = run_experiment(&quick(Pipeline::ProbThreshold, false)).unwrap();
    let csv = sweep_csv(&r.sweep_curve).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("theta,ca_pct,cr_pct,h"));
    assert_eq!(lines.count(), r.sweep_curve.len());
}

#[test]
fn well_separated_classes_are_learned() {
    let data = split(&generate_synthetic(1000, 2, 6.0, 1).unwrap(), (0.6, 0.1, 0.3), 2).unwrap();
    let data = standardize(&data).unwrap();
    let train = data.subset(Split::Train);
    let test = data.subset(Split::Test);
    let cfg = MlpConfig {
        epochs: 60,
        ..MlpConfig::default()
    };
    let m = train_mlp(&train.features, &train.labels, &cfg).unwrap();
    assert!(m.accuracy(&test.features, &test.labels).unwrap() >= 0.99);
}

#[test]
fn indistinguishable_classes_stay_near_chance() {
    let data = split(&generate_synthetic(2000, 4, 0.0, 3).unwrap(), (0.5, 0.0001, 0.4999), 4).unwrap();
    let data = standardize(&data).unwrap();
    let train = data.subset(Split::Train);
    let test = data.subset(Split::Test);
    let cfg = MlpConfig {
        epochs: 20,
        ..MlpConfig::default()
    };
    let m = train_mlp(&train.features, &train.labels, &cfg).unwrap();
    let acc = m.accuracy(&test.features, &test.labels).unwrap();
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn strength_two_shift_collapses_f1_in_typical_draws() {
    // Individual shift draws vary a lot, so check the median over seeds.
    let mut drops: Vec<f64> = (0..5u64)
        .map(|seed| {
            let base = ExperimentSpec {
                seed,
                ..ExperimentSpec::default()
            };
            let trained = train_models(&base).unwrap();
            let before = evaluate(&base, &trained).unwrap().test_metrics.f1;
            let shifted = ExperimentSpec {
                shift: ShiftSpec::affine(2.0, seed),
                ..base
            };
            before - evaluate(&shifted, &trained).unwrap().test_metrics.f1
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] >= 10.0, "{drops:?}");
}
