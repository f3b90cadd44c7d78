use adaptkit::train::{generate_toy_task, Trainer};
use adaptkit::*;

fn setup(adapters: &[&str]) -> Model {
    let mut m = Model::new(ModelConfig::desk(), 1).unwrap();
    for name in adapters {
        m.add_adapter(name, AdapterType::TextTask, "pfeiffer").unwrap();
    }
    m.add_head("cls", HeadKind::Classification { num_classes: 2 }).unwrap();
    m
}

fn small_cfg(mode: TrainMode, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, 3);
    cfg.max_steps = steps;
    cfg.batch_size = 4;
    cfg
}

fn adapter_digest(m: &Model, name: &str) -> String {
    adaptkit::params::digest_parameters(m.adapter(name).unwrap().parameters())
}

#[test]
fn adapter_training_leaves_the_base_untouched() {
    let task = generate_toy_task("copy-first-label", 0).unwrap();
    let mut m = setup(&["a"]);
    m.train_adapter(&["a"]).unwrap();
    let base = m.base_digest();
    let before = adapter_digest(&m, "a");
    train(&mut m, "cls", &task, &small_cfg(TrainMode::AdapterOnly, 20)).unwrap();
    assert_eq!(m.base_digest(), base);
    assert_ne!(adapter_digest(&m, "a"), before);
    assert!(m.adapter("a").unwrap().trained);
}

#[test]
fn gradients_reach_every_trainable_adapter_in_a_stack() {
    let task = generate_toy_task("majority-token", 0).unwrap();
    let mut m = setup(&["a", "b", "idle"]);
    m.set_active(&["a", "b", "idle"]).unwrap();
    m.train_adapter(&["a", "b"]).unwrap();
    let idle = adapter_digest(&m, "idle");
    let (a, b) = (adapter_digest(&m, "a"), adapter_digest(&m, "b"));
    train(&mut m, "cls", &task, &small_cfg(TrainMode::AdapterOnly, 2)).unwrap();
    assert_ne!(adapter_digest(&m, "a"), a);
    assert_ne!(adapter_digest(&m, "b"), b);
    assert_eq!(adapter_digest(&m, "idle"), idle);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let task = generate_toy_task("majority-token", 1).unwrap();
    let mut m = setup(&["a"]);
    m.train_adapter(&["a"]).unwrap();
    let before = adaptkit::params::digest_parameters(m.parameters());
    let mut cfg = small_cfg(TrainMode::AdapterOnly, 3);
    cfg.learning_rate = 0.0;
    train(&mut m, "cls", &task, &cfg).unwrap();
    assert_eq!(adaptkit::params::digest_parameters(m.parameters()), before);
}

#[test]
fn training_is_deterministic() {
    let task = generate_toy_task("parity-of-token", 2).unwrap();
    let run = || {
        let mut m = setup(&["a"]);
        m.train_adapter(&["a"]).unwrap();
        let log = train(&mut m, "cls", &task, &small_cfg(TrainMode::AdapterOnly, 5)).unwrap();
        (log, adapter_digest(&m, "a"))
    };
    assert_eq!(run(), run());
}

#[test]
fn first_step_reports_the_untrained_loss() {
    let task = generate_toy_task("majority-token", 4).unwrap();
    let mut m = setup(&["a"]);
    m.train_adapter(&["a"]).unwrap();
    let cfg = small_cfg(TrainMode::AdapterOnly, 1);
    let idx = adaptkit::train::batch_indices(cfg.seed, task.train.len(), cfg.batch_size, 1);
    let batch: Vec<_> = idx[0].iter().map(|&i| &task.train[i]).collect();
    let mut trainer = Trainer::new(&m, "cls", &cfg).unwrap();
    let untrained = trainer.loss(&m, &batch).unwrap();
    let reported = trainer.step(&mut m, &batch).unwrap();
    assert_eq!(untrained.to_bits(), reported.to_bits());
    assert!(trainer.loss(&m, &batch).unwrap() != untrained);
}

#[test]
fn optimizer_state_only_covers_adapter_and_head() {
    let task = generate_toy_task("majority-token", 0).unwrap();
    let mut m = setup(&["a"]);
    m.train_adapter(&["a"]).unwrap();
    let cfg = small_cfg(TrainMode::AdapterOnly, 1);
    let mut trainer = Trainer::new(&m, "cls", &cfg).unwrap();
    let batch: Vec<_> = task.train.iter().take(2).collect();
    trainer.step(&mut m, &batch).unwrap();
    let names = trainer.optimizer().state_names();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.starts_with("a/") || n.starts_with("head.cls/")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("head.cls/")));
}

#[test]
fn adapter_mode_requires_an_active_frozen_stack() {
    let m = setup(&["a"]);
    let cfg = small_cfg(TrainMode::AdapterOnly, 1);
    assert!(matches!(Trainer::new(&m, "cls", &cfg), Err(Error::NoActiveStack)));
    let mut m = setup(&["a"]);
    m.set_active(&["a"]).unwrap();
    assert!(matches!(Trainer::new(&m, "cls", &cfg), Err(Error::NoActiveStack)));
    m.train_adapter(&["a"]).unwrap();
    m.unfreeze();
    assert!(matches!(Trainer::new(&m, "cls", &cfg), Err(Error::NoActiveStack)));
}

#[test]
fn full_finetuning_updates_the_base() {
    let task = generate_toy_task("majority-token", 0).unwrap();
    let mut m = setup(&[]);
    let base = m.base_digest();
    train(&mut m, "cls", &task, &small_cfg(TrainMode::FullFinetune, 2)).unwrap();
    assert_ne!(m.base_digest(), base);
}

#[test]
fn final_metric_is_reproduced_by_reevaluation() {
    let task = generate_toy_task("copy-first-label", 5).unwrap();
    let mut m = setup(&["a"]);
    m.train_adapter(&["a"]).unwrap();
    let log = train(&mut m, "cls", &task, &small_cfg(TrainMode::AdapterOnly, 10)).unwrap();
    assert_eq!(evaluate(&m, "cls", &task.dev, Metric::Accuracy).unwrap(), log.dev_metric);
    for p in m.adapter("a").unwrap().parameters() {
        assert!(p.value().data().iter().all(|v| (*v as f32) as f64 == *v));
    }
}
