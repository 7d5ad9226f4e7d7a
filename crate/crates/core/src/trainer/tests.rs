use super::*;
use crate::model::ModelConfig;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::synth::linear_buckets;

fn toy_model(dropout: f64, seed: u64) -> DenoiseModel<f64> {
    let config = ModelConfig {
        k: 4,
        d_model: 16,
        heads: 2,
        blocks: 1,
        denoise_layers: 2,
        dropout,
        use_attention: true,
    };
    DenoiseModel::new(config, ScheduleSpec::new(ScheduleKind::TruncatedLinear, 50), seed).unwrap()
}

fn table() -> ScheduleTable {
    ScheduleTable::build(ScheduleSpec::new(ScheduleKind::TruncatedLinear, 50)).unwrap()
}

#[test]
fn timesteps_are_uniform() {
    let mut rng = seeded(11);
    let mut counts = [0usize; 10];
    for _ in 0..100_000 {
        let t = sample_timestep(&mut rng, 10);
        assert!((1..=10).contains(&t));
        counts[t - 1] += 1;
    }
    let expected = 10_000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 9 degrees of freedom
    assert!(chi2 < 21.666, "chi2 = {chi2}, counts {counts:?}");
    assert!((0..1000).all(|_| sample_timestep(&mut rng, 1) == 1));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = linear_buckets(3, 6, 4, 2);
    let model = toy_model(0.1, 3);
    let before = model.params().to_vec();
    let adamw = AdamWConfig {
        lr: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = TrainState::new(model, adamw, 4);
    train_step(&mut state, &ds.groups, &table(), LossKind::ListNet).unwrap();
    assert_eq!(state.model.params(), &before[..]);
    assert_eq!(state.optimizer.steps_taken(), 1);
}

#[test]
fn small_steps_decrease_the_loss() {
    let ds = linear_buckets(20, 8, 4, 5);
    let table = table();
    let mut rng = seeded(6);
    let adamw = AdamWConfig {
        lr: 1e-3,
        ..AdamWConfig::default()
    };
    let mut wins = 0;
    for trial in 0..20 {
        let batch = [ds.groups[trial].clone()];
        let draws = [Draw {
            t: sample_timestep(&mut rng, 50),
            eps: standard_normal(&mut rng, batch[0].n()),
        }];
        let mut state = TrainState::new(toy_model(0.0, 100 + trial as u64), adamw, 0);
        let before = batch_loss(&state.model, &batch, &draws, &table, LossKind::Mse).unwrap();
        train_step_with(&mut state, &batch, &draws, &table, LossKind::Mse).unwrap();
        let after = batch_loss(&state.model, &batch, &draws, &table, LossKind::Mse).unwrap();
        wins += usize::from(after < before);
    }
    assert!(wins >= 18, "{wins}/20 steps decreased the loss");
}

#[test]
fn step_loss_matches_batch_loss_without_dropout() {
    let ds = linear_buckets(4, 5, 4, 8);
    let table = table();
    let mut rng = seeded(9);
    let draws: Vec<Draw> = ds
        .groups
        .iter()
        .map(|g| Draw {
            t: sample_timestep(&mut rng, 50),
            eps: standard_normal(&mut rng, g.n()),
        })
        .collect();
    let model = toy_model(0.0, 1);
    let expected = batch_loss(&model, &ds.groups, &draws, &table, LossKind::RankNet).unwrap();
    let mut state = TrainState::new(model, AdamWConfig::default(), 0);
    let got = train_step_with(&mut state, &ds.groups, &draws, &table, LossKind::RankNet).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn bad_batches_are_rejected() {
    let mut state = TrainState::new(toy_model(0.0, 1), AdamWConfig::default(), 0);
    assert!(matches!(
        train_step_with(&mut state, &[], &[], &table(), LossKind::Mse),
        Err(Error::Contract(_))
    ));
    let ds = linear_buckets(1, 3, 4, 1);
    assert!(train_step_with(&mut state, &ds.groups, &[], &table(), LossKind::Mse).is_err());
}

#[test]
fn long_lists_are_capped_in_order() {
    let ds = linear_buckets(1, 30, 4, 3);
    let g = &ds.groups[0];
    let mut rng = seeded(1);
    assert!(cap_list(g, 30, &mut rng).is_none());
    let cut = cap_list(g, 7, &mut rng).unwrap();
    assert_eq!(cut.n(), 7);
    assert_eq!(cut.qid, g.qid);
    let idx: Vec<usize> = cut.docs.iter().map(|d| d.doc_index).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}

fn short_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 4,
        loss: LossKind::ListNet,
        eval_every: 2,
        seed,
        max_list_len: 6,
        adamw: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        eval_steps: Some(4),
    }
}

#[test]
fn fit_bookkeeping_and_determinism() {
    let train = linear_buckets(10, 8, 4, 21);
    let valid = linear_buckets(4, 8, 4, 22);
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(5);
    let mut seen = 0;
    let model = toy_model(0.1, 7);
    let count = model.num_parameters();
    let a = fit(model.clone(), &train, &valid, &cfg, Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!(seen, 5);
    assert_eq!(a.log.len(), 5);
    let evaluated: Vec<usize> = a.log.iter().filter(|e| e.valid_ndcg10.is_some()).map(|e| e.epoch).collect();
    assert_eq!(evaluated, vec![2, 4, 5]);
    let max = a.log.iter().filter_map(|e| e.valid_ndcg10).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_ndcg10, max);
    assert_eq!(a.log[a.best_epoch - 1].valid_ndcg10, Some(max));
    assert_eq!(a.best.num_parameters(), count);

    let path = a.best_path.clone().unwrap();
    let loaded = DenoiseModel::<f64>::load(&path).unwrap();
    assert_eq!(loaded.params(), a.best.params());

    let b = fit(model, &train, &valid, &cfg, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.params(), b.best.params());
}

#[test]
fn fit_rejects_bad_inputs() {
    let train = linear_buckets(4, 5, 4, 1);
    let wide = linear_buckets(4, 5, 6, 1);
    let model = toy_model(0.0, 1);
    assert!(matches!(
        fit(model.clone(), &train, &wide, &short_config(0), None, |_| {}),
        Err(Error::Incompatible(_))
    ));
    let mut cfg = short_config(0);
    cfg.adamw.lr = 0.0;
    assert!(matches!(fit(model.clone(), &train, &train, &cfg, None, |_| {}), Err(Error::Validation(_))));
    cfg = short_config(0);
    cfg.epochs = 0;
    assert!(fit(model, &train, &train, &cfg, None, |_| {}).is_err());
}
