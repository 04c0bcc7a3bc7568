use super::*;
use crate::synth_data::{generate_corpus, GenConfig};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        model: ModelConfig {
            side: 16,
            latent_dim: 4,
            embed_dim: 8,
            mask_channels: 4,
            trunk_channels: 4,
            feature_channels: 8,
            mlp_hidden: 6,
            expert_hidden: 3,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data(seed: u64, count: usize) -> Dataset {
    generate_corpus(&GenConfig {
        seed,
        count,
        side: 16,
        ..GenConfig::default()
    })
    .unwrap()
}

fn snapshot(t: &Trainer) -> Vec<(String, Vec<u32>)> {
    t.model
        .store
        .iter()
        .map(|(n, v)| (n.to_string(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut cfg = tiny_config(1);
    cfg.optimizer.lr = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let before = snapshot(&t);
    let d = data(2, 8);
    let batch: Vec<_> = d.records.iter().collect();
    t.train_step(&batch).unwrap();
    assert_eq!(snapshot(&t), before);
    assert_eq!(t.step, 1);
}

#[test]
fn unselected_expert_is_untouched() {
    let mut t = Trainer::new(tiny_config(3)).unwrap();
    // All-zero scores tie, so expert 0 is always chosen.
    let w = t.model.params.router;
    t.model.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let before = snapshot(&t);
    let d = data(4, 8);
    let batch: Vec<_> = d.records.iter().collect();
    t.train_step(&batch).unwrap();
    let after = snapshot(&t);
    let d_lat = t.config.model.latent_dim;
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        if name.starts_with("expert3.") || name.starts_with("expert2.") || name.starts_with("expert1.") {
            assert_eq!(a, b, "{name} moved");
        }
        if name == "router.weight" {
            assert_eq!(a[3 * d_lat..], b[3 * d_lat..]);
        }
        if name.starts_with("expert0.fc2") {
            assert_ne!(a, b, "{name} should train");
        }
    }
    assert_eq!(t.counter.counts(), vec![8, 0, 0, 0]);
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let (tr, va) = (data(5, 12), data(6, 4));
    let a = train(&tiny_config(7), &tr, &va).unwrap();
    let b = train(&tiny_config(7), &tr, &va).unwrap();
    assert_eq!(write_checkpoint(&a.checkpoint).unwrap(), write_checkpoint(&b.checkpoint).unwrap());
    assert_eq!(a.log, b.log);
    let c = train(&tiny_config(8), &tr, &va).unwrap();
    assert_ne!(write_checkpoint(&a.checkpoint).unwrap(), write_checkpoint(&c.checkpoint).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tr, va) = (data(9, 10), data(10, 3));
    let mut cfg = tiny_config(11);
    cfg.epochs = 10;
    let full = train(&cfg, &tr, &va).unwrap();
    cfg.epochs = 5;
    let half = train(&cfg, &tr, &va).unwrap();
    let bytes = write_checkpoint(&half.checkpoint).unwrap();
    let rest = resume(read_checkpoint(&bytes).unwrap(), 10, &tr, &va).unwrap();
    assert_eq!(
        write_checkpoint(&full.checkpoint).unwrap(),
        write_checkpoint(&rest.checkpoint).unwrap()
    );
    assert_eq!(full.log[5..], rest.log[..]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (tr, va) = (data(12, 8), data(13, 2));
    let out = train(&tiny_config(14), &tr, &va).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.smck");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(write_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    for r in &va.records {
        let a = out.checkpoint.model.predict(r, None, None).unwrap();
        let b = back.model.predict(r, None, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn mismatched_expert_count_is_reported() {
    let t = Trainer::new(tiny_config(15)).unwrap();
    let ckpt = t.checkpoint();
    let mut other = ckpt.config.model.clone();
    other.experts = 2;
    assert!(matches!(ckpt.check_compatible(&other), Err(Error::ConfigMismatch(_))));
    assert!(ckpt.check_compatible(&ckpt.config.model).is_ok());
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let t = Trainer::new(tiny_config(16)).unwrap();
    let bytes = write_checkpoint(&t.checkpoint()).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));

    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let renamed = text.replacen("\"expert0.bias\"", "\"expert0.bogo\"", 1);
    assert_ne!(renamed, text);
    let bad = renamed.into_bytes();
    match read_checkpoint(&bad) {
        Err(Error::Format { message, .. }) => assert!(message.contains("unknown tensor"), "{message}"),
        other => panic!("expected format error, got {:?}", other.map(|c| c.step)),
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut cfg = tiny_config(17);
    cfg.optimizer.lr = 1e30;
    cfg.epochs = 5;
    match train(&cfg, &data(18, 16), &data(19, 2)) {
        Err(Error::Diverged { step, block }) => {
            assert!(step >= 1);
            assert!(!block.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn top1_balancing_needs_a_batch() {
    let mut cfg = tiny_config(0);
    cfg.batch_size = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.balance_weight = 0.0;
    assert!(cfg.validate().is_ok());
}

#[test]
fn zero_balance_weight_logs_cross_entropy_only() {
    let mut cfg = tiny_config(20);
    cfg.balance_weight = 0.0;
    let out = train(&cfg, &data(21, 8), &data(22, 2)).unwrap();
    for l in &out.log {
        assert_eq!(l.train_loss, l.train_ce);
    }
}

#[test]
fn epoch_counts_match_top_k() {
    let mut cfg = tiny_config(23);
    cfg.model.topk = 2;
    cfg.epochs = 1;
    let out = train(&cfg, &data(24, 10), &data(25, 2)).unwrap();
    assert_eq!(out.log[0].expert_evaluations, 20);
}
