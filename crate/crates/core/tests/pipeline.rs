//! End-to-end behavior on a small lab: training logs, evaluation records,
//! experiment table shapes and determinism.

use mateloc::channel::ScenarioSpec;
use mateloc::checkpoint::load_checkpoint;
use mateloc::evaluation::{error_summary, evaluate, evaluate_with, EvalMode, EvalOptions};
use mateloc::experiment::{rows_to_csv, Experiment, Lab, LabConfig, ModelKind, Protocol, CSV_HEADER};
use mateloc::mateformer::MateformerConfig;
use mateloc::model::Sampling;
use mateloc::training::{Schedule, TrainConfig};
use mateloc::Error;

fn small_config() -> LabConfig {
    let analogy = TrainConfig {
        batch_size: 4,
        steps: 30,
        learning_rate: 1e-3,
        schedule: Schedule::constant(),
        neighbors: 16,
        p_range: [4, 16],
        q_range: [1, 4],
        log_every: 10,
        ..LabConfig::default().analogy_train
    };
    LabConfig {
        scenarios: ScenarioSpec::desk_family().into_iter().take(3).collect(),
        train_samples: 200,
        test_samples: 40,
        mateformer: MateformerConfig { depth: 2, d_model: 8, d_ff: 8, heads: 2, ..LabConfig::default().mateformer },
        d2l_hidden: vec![16],
        d2l_train: TrainConfig { batch_size: 8, ..analogy.clone() },
        fine_tune: TrainConfig { steps: 20, ..analogy.clone() },
        analogy_train: analogy,
        eval: EvalOptions { neighbors: 16, ..EvalOptions::default() },
        random_k: 16,
        ..LabConfig::default()
    }
}

fn lab() -> Lab {
    Lab::generate(small_config()).unwrap()
}

fn both() -> Vec<ModelKind> {
    vec![ModelKind::Mateformer, ModelKind::D2lRaw]
}

#[test]
fn cross_scenario_emits_two_rows_per_model() {
    let mut lab = lab();
    let rows = lab.run(&Experiment::new(Protocol::CrossScenario { train: 1, eval: 2 }, both())).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| r.mean_m.is_finite() && r.count == 40));
    let csv = rows_to_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let mut lab = lab();
    let noise = Protocol::NoiseSweep { scenario: 1, values: vec![0.0, 0.1, 0.4] };
    assert_eq!(lab.run(&Experiment::new(noise, both())).unwrap().len(), 3 * 2);
    let initial = Protocol::InitialErrorSweep { scenario: 1, values: vec![0.0, 1.0, 2.0, 4.0] };
    // Data-to-label models have no coarse location to perturb.
    assert_eq!(lab.run(&Experiment::new(initial, both())).unwrap().len(), 4);
    let near = Protocol::NeighborSweep { scenario: 1, values: vec![4, 8] };
    let rows = lab.run(&Experiment::new(near, both())).unwrap();
    assert_eq!(rows.iter().map(|r| r.sweep_value.as_str()).collect::<Vec<_>>(), ["4", "8"]);
}

#[test]
fn transfer_and_joint_shapes() {
    let mut lab = lab();
    let rows = lab.run(&Experiment::new(Protocol::Transfer { source: 1, target: 2 }, both())).unwrap();
    // Steps 0, 10, 20, two scenarios each, two models.
    assert_eq!(rows.len(), 3 * 2 * 2);
    let joint = Protocol::Joint { train: vec![1, 2], held_out: 3 };
    let rows = lab.run(&Experiment::new(joint, both())).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| r.eval_scenario == 3));
    let modes = lab.run(&Experiment::new(Protocol::SamplingModes { scenario: 1 }, both())).unwrap();
    assert_eq!(modes.len(), 3);
}

#[test]
fn rerunning_reproduces_identical_tables() {
    let exp = Experiment::new(Protocol::NoiseSweep { scenario: 1, values: vec![0.0, 0.2] }, both());
    let a = rows_to_csv(&lab().run(&exp).unwrap());
    let b = rows_to_csv(&lab().run(&exp).unwrap());
    assert_eq!(a, b);
}

#[test]
fn training_log_rows_sit_on_the_logging_grid() {
    let mut lab = lab();
    lab.model(ModelKind::Mateformer, &[1], Sampling::Neighborhood).unwrap();
    let (_, log) = &lab.logs[0];
    assert_eq!(log.rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 10, 20, 30]);
    assert!(log.rows.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn evaluation_records_are_consistent() {
    let mut lab = lab();
    let near = lab.model(ModelKind::Mateformer, &[1], Sampling::Neighborhood).unwrap();
    let random = lab.model(ModelKind::Mateformer, &[1], Sampling::Random).unwrap();
    let pool = lab.pool(1).unwrap();
    let test = lab.test(1).unwrap().samples();
    let opts = EvalOptions { neighbors: 16, noise_sigma: 0.05, seed: 9, chunk: 7 };

    // l = 0 searches around the true location.
    let r0 = evaluate(&near, pool, test, EvalMode::Neighborhood { l: 0.0 }, &opts).unwrap();
    assert!(r0.records.iter().all(|r| r.centers == vec![r.truth]));

    // Summaries are recomputable from the records.
    let errors: Vec<f64> = r0.records.iter().map(|r| r.error).collect();
    assert_eq!(error_summary(&errors).unwrap(), r0.summary);

    // Iterative: the first center is the random-mode prediction, every
    // later center is the previous pass's prediction.
    let k = 16;
    let it = evaluate_with(&random, &near, pool, test, EvalMode::Iterative { k, passes: 2 }, &opts).unwrap();
    let rnd = evaluate(&random, pool, test, EvalMode::Random { k }, &opts).unwrap();
    for (a, b) in it.records.iter().zip(&rnd.records) {
        assert_eq!(a.centers.len(), 2);
        assert_eq!(a.centers[0], b.prediction);
    }
    let one_pass = evaluate_with(&random, &near, pool, test, EvalMode::Iterative { k, passes: 1 }, &opts).unwrap();
    for (a, b) in it.records.iter().zip(&one_pass.records) {
        assert_eq!(a.centers[1], b.prediction);
    }
}

#[test]
fn untrained_models_give_finite_errors_and_modes_are_checked() {
    let lab = lab();
    let cfg = TrainConfig { steps: 0, ..small_config().analogy_train };
    let pool = lab.pool(1).unwrap();
    let test = lab.test(1).unwrap().samples();
    let (mf, _) = mateloc::training::train(&lab.model_config(ModelKind::Mateformer), &cfg, &[pool], &[]).unwrap();
    let (d2l, _) = mateloc::training::train(&lab.model_config(ModelKind::D2lAd), &cfg, &[pool], &[]).unwrap();
    let opts = EvalOptions { neighbors: 16, ..EvalOptions::default() };
    let r = evaluate(&mf, pool, test, EvalMode::Neighborhood { l: 1.0 }, &opts).unwrap();
    assert!(r.records.iter().all(|r| r.error.is_finite()));
    assert!(evaluate(&d2l, pool, test, EvalMode::Direct, &opts).unwrap().summary.mean.is_finite());
    assert!(matches!(evaluate(&mf, pool, test, EvalMode::Direct, &opts), Err(Error::ModeMismatch(_))));
    assert!(matches!(
        evaluate(&d2l, pool, test, EvalMode::Neighborhood { l: 1.0 }, &opts),
        Err(Error::ModeMismatch(_))
    ));
}

#[test]
fn unknown_scenarios_and_missing_checkpoints_are_named() {
    let mut lab = lab();
    let exp = Experiment::new(Protocol::SingleScenario { scenario: 9 }, both());
    assert!(matches!(lab.run(&exp), Err(Error::UnknownScenario(9))));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    match load_checkpoint(&missing) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, missing.with_extension("json")),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
}
