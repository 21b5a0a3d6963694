use flowseg::checkpoint::Checkpoint;
use flowseg::dataset::Triplet;
use flowseg::flow::FlowMode;
use flowseg::model::VelocityNet;
use flowseg::rng::stream;
use flowseg::synth::sample_triplet;
use flowseg::train::{history_csv, train, TrainConfig};

fn samples(seed: u64, n: u64, size: usize) -> Vec<Triplet> {
    (0..n)
        .map(|i| sample_triplet(&mut stream(seed, 0, i), size, size, 1, 0.3).unwrap().triplet)
        .collect()
}

fn tiny(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        widths: vec![8, 16],
        time_embed_dim: 16,
        eval_every: 5,
        halving_steps: vec![10],
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = (samples(1, 24, 16), samples(2, 4, 16));
    let a = train(&tiny(12), &tr, &va, |_| {}).unwrap();
    let b = train(&tiny(12), &tr, &va, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    let bytes = |o: &flowseg::train::TrainOutcome| Checkpoint::from_net(&o.net, serde_json::Value::Null).to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = train(&TrainConfig { seed: 1, ..tiny(12) }, &tr, &va, |_| {}).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn history_has_one_row_per_iteration_and_halves_lr() {
    let (tr, va) = (samples(3, 16, 16), samples(4, 4, 16));
    let mut seen = 0;
    let out = train(&tiny(12), &tr, &va, |_| seen += 1).unwrap();
    assert_eq!(seen, 12);
    assert_eq!(out.history.len(), 12);
    assert_eq!(out.history[9].lr, 1e-3);
    assert_eq!(out.history[10].lr, 5e-4);
    let with_val: Vec<u64> = out.history.iter().filter(|r| r.val.is_some()).map(|r| r.iteration).collect();
    assert_eq!(with_val, vec![4, 9, 11]);
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn loss_goes_down() {
    let (tr, va) = (samples(5, 32, 16), samples(6, 4, 16));
    let out = train(&tiny(60), &tr, &va, |_| {}).unwrap();
    let early: f64 = out.history[..10].iter().map(|r| r.loss).sum();
    let late: f64 = out.history[50..].iter().map(|r| r.loss).sum();
    assert!(late < early, "{early} -> {late}");
}

#[test]
fn conflicting_configs_are_rejected() {
    let tr = samples(7, 4, 16);
    let bad = [
        TrainConfig { batch_size: 1, ..tiny(1) },
        TrainConfig { mode: FlowMode::Denoising, use_image_concat: false, ..tiny(1) },
        TrainConfig { prompt_dropout: 1.5, ..tiny(1) },
        TrainConfig { halving_steps: vec![5, 5], ..tiny(1) },
        TrainConfig { codec_factor: 3, ..tiny(1) },
    ];
    for cfg in bad {
        assert!(train(&cfg, &tr, &[], |_| {}).is_err(), "{cfg:?}");
    }
    assert!(train(&tiny(1), &[], &[], |_| {}).is_err());
}

#[test]
fn denoising_and_pooled_codec_train() {
    let (tr, va) = (samples(8, 8, 16), samples(9, 2, 16));
    let cfg = TrainConfig {
        mode: FlowMode::Denoising,
        codec_factor: 2,
        ..tiny(3)
    };
    let out = train(&cfg, &tr, &va, |_| {}).unwrap();
    assert!(out.history.iter().all(|r| r.loss.is_finite()));
    assert!(out.history[2].val.is_some());
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let tr = samples(10, 4, 16);
    let cfg = tiny(0);
    let out = train(&cfg, &tr, &[], |_| {}).unwrap();
    assert!(out.history.is_empty());
    let init = VelocityNet::<f32>::new(cfg.model_config(1), cfg.seed).unwrap();
    let bytes = |n: &VelocityNet<f32>| Checkpoint::from_net(n, serde_json::Value::Null).to_bytes().unwrap();
    assert_eq!(bytes(&out.net), bytes(&init));
}
