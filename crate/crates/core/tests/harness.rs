use smop_core::checkpoint::{read_checkpoint, write_checkpoint};
use smop_core::config::TrainConfig;
use smop_core::data::{Dataset, Task};
use smop_core::decoder::{beam_search, greedy_decode, DecoderScorer};
use smop_core::harness::{
    corpus_ter, dataset_for, evaluate, evaluate_dataset, expert_sweep, noise_sweep, train, train_with, Decode,
    Model, DEFAULT_SNR_LEVELS,
};
use smop_core::optim::{clip_global_norm, cosine_lr, AdamW};
use smop_core::params::ParamStore;
use smop_core::report::{losses_csv, metrics_csv, noise_csv, routing_csv, sweep_csv};
use smop_core::smop::Variant;
use smop_core::tensor::Tensor;

/// Scaled-down configuration that trains in well under a second.
fn small() -> TrainConfig {
    let mut c = TrainConfig {
        n_train: 24,
        n_val: 8,
        n_test: 8,
        epochs: 2,
        batch_size: 8,
        max_decode_len: 12,
        ..TrainConfig::default()
    };
    c.decoder.d_model = 16;
    c.decoder.n_heads = 2;
    c.decoder.d_ff = 32;
    c.smop.d_llm = 16;
    c.pretrain.steps = 10;
    c.pretrain.batch_size = 4;
    c
}

fn trainable_values(store: &ParamStore) -> Vec<Tensor> {
    store.trainable_ids().into_iter().map(|id| store.get(id).clone()).collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = small();
    cfg.learning_rate = Some(0.0);
    cfg.epochs = 3;
    let ds = dataset_for(&cfg).unwrap();
    let before = trainable_values(&Model::new(cfg.clone()).unwrap().store);
    let out = train(&cfg, &ds).unwrap();
    assert_eq!(trainable_values(&out.model.store), before);
    let first = &out.metrics.epochs[0];
    for e in &out.metrics.epochs[1..] {
        assert_eq!(e.val, first.val);
        // Batch composition changes the balance term, not the NLL.
        assert!((e.train.nll - first.train.nll).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let ds = dataset_for(&cfg).unwrap();
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(losses_csv(&a.metrics), losses_csv(&b.metrics));
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_checkpoint(&a.model, &mut ca).unwrap();
    write_checkpoint(&b.model, &mut cb).unwrap();
    assert_eq!(ca, cb);

    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(metrics_csv(&train(&other, &ds).unwrap().metrics), metrics_csv(&a.metrics));
}

#[test]
fn training_reduces_loss_and_keeps_base_frozen() {
    let mut cfg = small();
    cfg.epochs = 4;
    cfg.learning_rate = Some(3e-3);
    let ds = dataset_for(&cfg).unwrap();
    let digest = Model::new(cfg.clone()).unwrap().store.frozen_digest();
    let mut seen = Vec::new();
    let out = train_with(&cfg, &ds, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(out.metrics.frozen_digest, digest);
    assert_eq!(out.model.store.frozen_digest(), digest);
    let e = &out.metrics.epochs;
    assert!(e.last().unwrap().train.nll < e[0].train.nll);
    assert_eq!(out.metrics.steps.len(), 4 * 3);
    assert!(out.metrics.steps.iter().all(|p| p.is_finite()));
    assert!(e.last().unwrap().lr < 1e-8 * 3e-3);
}

#[test]
fn trainable_set_is_projector_and_adapters() {
    for variant in [Variant::Jejr, Variant::Dedr, Variant::Jedr] {
        let mut cfg = small();
        cfg.smop.variant = variant;
        let m = Model::new(cfg).unwrap();
        for id in m.store.ids() {
            let p = m.store.param(id);
            let expected = p.name.starts_with("smop.") || p.name.contains("lora");
            assert_eq!(p.trainable, expected, "{}", p.name);
        }
    }
}

#[test]
fn overfits_a_tiny_training_set() {
    let mut cfg = small();
    cfg.n_train = 10;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    cfg.learning_rate = Some(3e-3);
    cfg.decoder = TrainConfig::default().decoder;
    cfg.smop.d_llm = 32;
    cfg.pretrain.steps = 0;
    let mut ds = dataset_for(&cfg).unwrap();
    ds.test = ds.train.clone();
    ds.val.clear();
    let out = train(&cfg, &ds).unwrap();
    assert_eq!(out.metrics.test_ter, 0.0, "final nll {}", out.metrics.epochs.last().unwrap().train.nll);
}

#[test]
fn untrained_model_is_near_chance() {
    let mut cfg = TrainConfig::default();
    cfg.pretrain.steps = 0;
    cfg.n_train = 1;
    cfg.n_val = 0;
    let ds = dataset_for(&cfg).unwrap();
    let m = Model::new(cfg).unwrap();
    let ter = evaluate(&m, &ds.test, Decode::Greedy).unwrap().ter;
    assert!(ter >= 0.8, "{ter}");
}

#[test]
fn batched_greedy_matches_single_decodes() {
    let cfg = small();
    let ds = dataset_for(&cfg).unwrap();
    let out = train(&cfg, &ds).unwrap();
    let m = &out.model;
    let zs = m.project(&ds.test, None).unwrap();
    let batched = m.transcribe(&ds.test, Decode::Greedy).unwrap();
    let beams = m.transcribe(&ds.test, Decode::Beam { width: 3, temperature: 0.6 }).unwrap();
    for ((z, b), bm) in zs.iter().zip(&batched).zip(&beams) {
        let scorer = DecoderScorer::new(&m.decoder, &m.store, z.clone(), m.task());
        assert_eq!(&greedy_decode(&scorer, cfg.max_decode_len, 1.0).unwrap(), b);
        assert_eq!(&beam_search(&scorer, 3, 0.6, cfg.max_decode_len).unwrap().tokens, bm);
    }
}

#[test]
fn corpus_ter_weights_by_reference_length() {
    let refs: Vec<&[usize]> = vec![&[1, 2], &[1, 2, 3, 4, 5, 6]];
    let hyps = vec![vec![], vec![1, 2, 3, 4, 5, 6]];
    assert!((corpus_ter(&refs, &hyps).unwrap() - 0.25).abs() < 1e-15);
    assert!(corpus_ter(&refs, &hyps[..1]).is_err());
}

#[test]
fn evaluation_reports_routing() {
    let cfg = small();
    let ds = dataset_for(&cfg).unwrap();
    let m = Model::new(cfg.clone()).unwrap();
    let ev = evaluate_dataset(&m, &ds, Decode::Greedy).unwrap();
    assert_eq!(ev.hypotheses.len(), ds.test.len());
    assert_eq!(ev.routing.len(), 2);
    let csv = routing_csv(&ev.routing);
    assert_eq!(csv.lines().count(), 1 + 3 + 3);
    assert!(evaluate(&m, &[], Decode::Greedy).is_err());

    let mut audio_only = cfg.clone();
    audio_only.task = Task::Asr;
    let m = Model::new(audio_only).unwrap();
    let ev = evaluate(&m, &ds.test, Decode::Greedy).unwrap();
    assert_eq!(ev.routing.len(), 1);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let cfg = small();
    let m = Model::new(cfg.clone()).unwrap();
    let mut spec = cfg.data.clone();
    spec.d_video = 10;
    let ds = Dataset::generate(&spec, 1, [1, 0, 2], Task::Avsr).unwrap();
    assert_eq!(evaluate_dataset(&m, &ds, Decode::Greedy).unwrap_err().kind(), "config");
    assert_eq!(train(&cfg, &ds).unwrap_err().kind(), "config");
}

#[test]
fn non_finite_loss_aborts_training() {
    let cfg = small();
    let mut ds = dataset_for(&cfg).unwrap();
    for s in &mut ds.train {
        s.audio.data_mut()[0] = f64::NAN;
    }
    let err = train(&cfg, &ds).unwrap_err();
    assert_eq!(err.kind(), "diverged");
    assert!(err.to_string().contains("nll"));
}

#[test]
fn noise_sweep_shape_and_clean_row() {
    let cfg = small();
    let ds = dataset_for(&cfg).unwrap();
    let m = train(&cfg, &ds).unwrap().model;
    let rows = noise_sweep(&m, &ds, &DEFAULT_SNR_LEVELS, Decode::Greedy).unwrap();
    assert_eq!(rows.len(), 5);
    let csv = noise_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,snr_7.5,snr_5,snr_2.5,snr_0,snr_-2.5");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("AVSR,"));
    assert_eq!(lines[1].split(',').count(), 6);

    let clean = noise_sweep(&m, &ds, &[f64::INFINITY], Decode::Greedy).unwrap();
    assert_eq!(clean[0].ter, evaluate(&m, &ds.test, Decode::Greedy).unwrap().ter);
    assert_eq!(noise_sweep(&m, &ds, &[], Decode::Greedy).unwrap_err().kind(), "empty");
}

#[test]
fn expert_sweep_keeps_activation_constant() {
    let mut cfg = small();
    cfg.epochs = 1;
    cfg.smop.variant = Variant::Jejr;
    let ds = dataset_for(&cfg).unwrap();
    assert_eq!(expert_sweep(&cfg, &ds, &[4, 1]).unwrap_err().kind(), "config");
    let rows = expert_sweep(&cfg, &ds, &[2, 4, 8]).unwrap();
    assert_eq!(rows.len(), 3);
    let act = rows[0].accounting.activated_expert_params;
    assert!(rows.iter().all(|r| r.accounting.activated_expert_params == act));
    assert_eq!(rows[0].accounting.total_expert_params, act);
    assert_eq!(rows[2].accounting.total_expert_params, 4 * act);
    assert_eq!(sweep_csv(&rows).lines().count(), 4);
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = small();
    let ds = dataset_for(&cfg).unwrap();
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    smop_core::checkpoint::save(&out.model, &path).unwrap();
    let back = smop_core::checkpoint::load(&path).unwrap();
    assert_eq!(back.config, out.model.config);
    assert_eq!(back.store.params(), out.model.store.params());
    assert_eq!(
        back.transcribe(&ds.test, Decode::Greedy).unwrap(),
        out.model.transcribe(&ds.test, Decode::Greedy).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"SMOP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(read_checkpoint(&bad[..]).unwrap_err().kind(), "format");
    let mut future = bytes.clone();
    future[4] = 9;
    assert_eq!(read_checkpoint(&future[..]).unwrap_err().kind(), "format");
    assert_eq!(read_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err().kind(), "format");
}

#[test]
fn config_toml_roundtrip_and_validation() {
    let cfg = small();
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());

    let partial = TrainConfig::from_toml("task = \"VSR\"\n[smop]\nvariant = \"JEDR\"\ntop_k = 1\n").unwrap();
    assert_eq!(partial.task, Task::Vsr);
    assert_eq!(partial.smop.variant, Variant::Jedr);
    assert_eq!(partial.lr(), 5e-4);
    assert_eq!(TrainConfig::default().lr(), 1e-3);

    for bad in [
        "bogus = 1",
        "[smop]\ntop_k = 9",
        "[smop]\nd_llm = 48",
        "[data]\nd_audio = 4",
        "batch_size = 0",
        "learning_rate = -1.0",
        "task = \"LIPS\"",
    ] {
        assert_eq!(TrainConfig::from_toml(bad).unwrap_err().kind(), "config", "{bad}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let base = 1e-3;
    assert_eq!(cosine_lr(base, 0, 100), base);
    assert!(cosine_lr(base, 99, 100) <= 1e-8 * base);
    assert!((cosine_lr(base, 50, 101) - 0.5 * base).abs() < 1e-18);
    let mut prev = base;
    for s in 1..100 {
        let lr = cosine_lr(base, s, 100);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn adamw_first_step_reference() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]), true);
    let mut opt = AdamW::new(&store, vec![id], 0.9, 0.999, 1e-8, 0.1);
    let g = vec![0.3, -0.1, 0.0];
    opt.step(&mut store, std::slice::from_ref(&g), 0.01);
    for (j, &p0) in [1.0, -2.0, 0.5].iter().enumerate() {
        let decayed = p0 - 0.01 * 0.1 * p0;
        // Bias-corrected first step moves by lr·g/(|g|+eps).
        let expected = decayed - 0.01 * g[j] / (g[j].abs() + 1e-8);
        assert!((store.get(id).data()[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![vec![3.0], vec![4.0]];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut small = vec![vec![0.1, 0.2]];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small, vec![vec![0.1, 0.2]]);
}
