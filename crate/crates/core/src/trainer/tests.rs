use super::*;
use crate::emulator::{build_rc_network, generate_dataset, EmulatorModel, ExcitationConfig};
use crate::ssm::NeuralSsm;

fn small_data(days: usize) -> (crate::emulator::BuildingParams, crate::emulator::Generated) {
    let params = build_rc_network(3, 4).unwrap();
    let cfg = ExcitationConfig {
        days,
        seed: 4,
        ..ExcitationConfig::default()
    };
    let generated = generate_dataset(&params, &cfg).unwrap();
    (params, generated)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        steps: 30,
        eval_every: 10,
        horizon: 8,
        layers: 2,
        width: 6,
        n_x: 6,
        weights: WeightKind::Pf,
        ..TrainConfig::default()
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = small_config();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, back);
    let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
    assert_eq!(partial.steps, 7);
    assert_eq!(partial.learning_rate, 0.003);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 7}"#).is_err());
}

#[test]
fn off_grid_horizon_warns_and_bad_values_fail() {
    let mut cfg = TrainConfig::default();
    assert!(cfg.validate().unwrap().is_empty());
    cfg.horizon = 7;
    assert_eq!(cfg.validate().unwrap().len(), 1);
    cfg.learning_rate = 0.0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = TrainConfig::default();
    cfg.lambda_min = 1.2;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.q_dx = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn training_lowers_loss_and_keeps_bounds() {
    let (_, generated) = small_data(6);
    let cfg = small_config();
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let spec = cfg.model_spec(3, 6, 1);
    let mut model = NeuralSsm::<f64>::init(spec, 1).unwrap();
    let outcome = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(outcome.log.steps.len(), 30);
    assert_eq!(
        outcome.log.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
        vec![0, 10, 20, 30]
    );
    let first = outcome.log.steps[..5].iter().map(|s| s.loss.total).sum::<f64>();
    let last = outcome.log.steps[25..].iter().map(|s| s.loss.total).sum::<f64>();
    assert!(last < first, "loss {first} -> {last}");
    assert!(outcome.bounds_held());
    let best = outcome
        .log
        .evals
        .iter()
        .map(|e| e.dev_open_loop_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(outcome.best_dev_mse, best);
    let again = open_loop_simulate(&model, &data.dev).unwrap().mse();
    assert!((again - best).abs() <= 1e-12 * best.max(1.0));
}

#[test]
fn single_step_returns_better_of_initial_and_updated() {
    let (_, generated) = small_data(6);
    let cfg = TrainConfig {
        steps: 1,
        ..small_config()
    };
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let mut model = NeuralSsm::<f64>::init(cfg.model_spec(3, 6, 1), 2).unwrap();
    let outcome = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(outcome.log.evals.len(), 2);
    let (a, b) = (outcome.log.evals[0].dev_open_loop_mse, outcome.log.evals[1].dev_open_loop_mse);
    assert_eq!(outcome.best_dev_mse, a.min(b));
    assert_eq!(outcome.best_step, if b < a { 1 } else { 0 });
}

#[test]
fn training_is_deterministic() {
    let (_, generated) = small_data(6);
    let cfg = TrainConfig {
        steps: 8,
        ..small_config()
    };
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let run = || {
        let mut m = NeuralSsm::<f64>::init(cfg.model_spec(3, 6, 1), 3).unwrap();
        train(&mut m, &data, &cfg).unwrap();
        snapshot(&m)
    };
    assert_eq!(run(), run());
}

#[test]
fn horizon_mismatch_is_config_error() {
    let (_, generated) = small_data(6);
    let cfg = small_config();
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let mut spec = cfg.model_spec(3, 6, 1);
    spec.horizon = 16;
    let mut model = NeuralSsm::<f64>::init(spec, 1).unwrap();
    assert!(matches!(train(&mut model, &data, &cfg), Err(Error::Config(_))));
}

#[test]
fn emulator_scores_zero_error() {
    let (params, generated) = small_data(6);
    let data = Prepared::new(&generated.dataset, 8).unwrap();
    let model = EmulatorModel::new(params, &generated, 8, true).with_stats(data.stats.clone());
    let eval = evaluate(&model, &data.test, &data.stats).unwrap();
    assert!(eval.n_step_mse < 1e-20, "{eval:?}");
    assert!(eval.open_loop_mse < 1e-20, "{eval:?}");
    assert!(eval.open_loop_rmse_k < 1e-8);
}

#[test]
fn training_log_csv_marks_evaluation_rows() {
    let (_, generated) = small_data(6);
    let cfg = TrainConfig {
        steps: 4,
        eval_every: 2,
        ..small_config()
    };
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let mut model = NeuralSsm::<f64>::init(cfg.model_spec(3, 6, 1), 1).unwrap();
    let outcome = train(&mut model, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    outcome.log.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,,,,,,,"));
    assert!(lines[2].ends_with(",,,"));
    assert!(lines[3].ends_with(",true"));
    assert!(lines[5].ends_with(",true"));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_, generated) = small_data(6);
    let cfg = TrainConfig {
        steps: 3,
        ..small_config()
    };
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let mut model = NeuralSsm::<f64>::init(cfg.model_spec(3, 6, 1), 5).unwrap();
    let outcome = train(&mut model, &data, &cfg).unwrap();
    let ckpt = Checkpoint {
        model,
        config: cfg.clone(),
        stats: data.stats.clone(),
        dev_open_loop_mse: outcome.best_dev_mse,
        best_step: outcome.best_step,
        data: Some("train.csv".into()),
    };
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    assert!(!dir.path().join(format!("{MANIFEST}.tmp")).exists());
    let back = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert_eq!(snapshot(&back.model), snapshot(&ckpt.model));
    assert_eq!(back.stats, ckpt.stats);
    assert_eq!(back.config, cfg);
    let a = open_loop_simulate(&ckpt.model, &data.test).unwrap();
    let b = open_loop_simulate(&back.model, &data.test).unwrap();
    assert_eq!(a.pred_y, b.pred_y);
}

#[test]
fn checkpoint_rejects_missing_or_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::<f64>::load(dir.path()), Err(Error::Io(_))));
    let (_, generated) = small_data(6);
    let cfg = small_config();
    let data = Prepared::new(&generated.dataset, cfg.horizon).unwrap();
    let model = NeuralSsm::<f64>::init(cfg.model_spec(3, 6, 1), 5).unwrap();
    let ckpt = Checkpoint {
        model,
        config: cfg,
        stats: data.stats,
        dev_open_loop_mse: 1.0,
        best_step: 0,
        data: None,
    };
    ckpt.save(dir.path()).unwrap();
    let first = ckpt.model.params()[0].name.clone();
    std::fs::write(dir.path().join(format!("{first}.csv")), "1,2\n").unwrap();
    assert!(Checkpoint::<f64>::load(dir.path()).is_err());
}

#[test]
fn grid_has_48_distinct_cells() {
    let grid = default_grid();
    assert_eq!(grid.len(), 48);
    let set: std::collections::HashSet<_> = grid.iter().collect();
    assert_eq!(set.len(), 48);
    let c = grid.iter().find(|c| !c.constrained).unwrap().apply(&TrainConfig::default());
    assert_eq!(c.weights, WeightKind::Linear);
    assert_eq!((c.q_ineq_y, c.q_ineq_u, c.q_ineq_d), (0.0, 0.0, 0.0));
}

#[test]
fn sweep_records_per_run_failures() {
    let (_, generated) = small_data(6);
    let base = TrainConfig {
        steps: 2,
        eval_every: 2,
        ..small_config()
    };
    let cells = vec![
        GridCell {
            structure: Structure::Structured,
            block: BlockKind::Mlp,
            horizon: 8,
            constrained: true,
        },
        GridCell {
            structure: Structure::Unstructured,
            block: BlockKind::Rnn,
            horizon: 8,
            constrained: false,
        },
        GridCell {
            structure: Structure::Structured,
            block: BlockKind::Mlp,
            horizon: 4000,
            constrained: true,
        },
    ];
    let results = sweep(
        &generated.dataset,
        &base,
        &SweepOptions {
            cells,
            seeds: vec![0, 1],
            jobs: 2,
        },
    )
    .unwrap();
    assert_eq!(results.len(), 6);
    assert!(results[..4].iter().all(|r| r.error.is_none() && r.test_open_loop_mse.is_some()));
    assert!(results[4..].iter().all(|r| r.error.is_some()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&results, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 7);
}
