mod common;

use std::path::Path;

use common::*;
use recse::objective::combine;
use recse::pipeline::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, train, FeatureStore,
    Optimizer, OptimizerKind, PipelineError, StepMode, StepTrace, StoreRecord, TrainConfig,
};
use recse::tensor::SeededRng;
use recse::text::gen_synth_corpus;

const CORPUS: [&str; 8] = [
    "the red fox runs home",
    "a blue bird sings loud",
    "one old man reads books",
    "that young girl paints walls",
    "the tall tree bends slowly",
    "a quiet river flows south",
    "some green hills roll on",
    "this brave dog guards sheep",
];

fn small_cfg(mode: StepMode) -> TrainConfig {
    TrainConfig {
        mode,
        batch_size: 4,
        epochs: 2,
        eval_every_steps: 2,
        learning_rate: 0.01,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn optimizer_moves_only_with_gradient() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut model = tiny_model(&CORPUS, 1);
        let before = checkpoint_bytes(&model);
        let mut opt = Optimizer::new(kind, 0.01);
        assert!(!opt.step(&mut model), "{kind}");
        assert_eq!(checkpoint_bytes(&model), before);

        let prep = prepared(&CORPUS, &model);
        let batch: Vec<_> = prep.iter().take(4).collect();
        let store = FeatureStore::build(&CORPUS, &model).unwrap();
        let cfg = small_cfg(StepMode::Staged);
        recse::pipeline::accumulate_gradients(&mut model, Some(&store), &batch, &cfg, 1).unwrap();
        assert!(opt.step(&mut model), "{kind}");
        assert_ne!(checkpoint_bytes(&model), before);
        assert!(model.params().iter().all(|(_, p)| p.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0))));
    }
}

#[test]
fn metrics_log_replays_combined_loss() {
    let model = tiny_model(&CORPUS, 2);
    let cfg = small_cfg(StepMode::Staged);
    let mut log = String::new();
    let out = train(model, &CORPUS, &[], None, &cfg, |t| {
        log.push_str(&t.to_log_line());
        log.push('\n');
    })
    .unwrap();
    assert_eq!(out.traces.len(), 4);
    for (line, trace) in log.lines().zip(&out.traces) {
        let parsed = StepTrace::from_log_line(line).unwrap();
        let (combined, gate) = combine(parsed.losses.l_cl, parsed.losses.l_re, cfg.loss.lambda);
        assert_eq!(combined.to_bits(), parsed.losses.combined.to_bits());
        assert_eq!(gate, parsed.losses.gate_re_active);
        assert_eq!(parsed.losses, trace.losses);
        assert_eq!(parsed.peaks, trace.peaks);
    }
}

#[test]
fn staged_peaks_stay_below_joint() {
    let model = tiny_model(&CORPUS, 3);
    let staged = train(model.clone(), &CORPUS, &[], None, &small_cfg(StepMode::Staged), |_| {}).unwrap();
    let joint = train(model, &CORPUS, &[], None, &small_cfg(StepMode::Joint), |_| {}).unwrap();
    for (s, j) in staged.traces.iter().zip(&joint.traces) {
        assert!((s.losses.combined - j.losses.combined).abs() < 1e-10);
        assert!(s.peaks.max() < j.peaks.max());
    }
}

#[test]
fn best_checkpoint_tracks_dev_history() {
    let data = gen_synth_corpus(&SeededRng::new(3), 24);
    let model = tiny_model(&data.corpus.iter().map(String::as_str).collect::<Vec<_>>(), 3);
    let cfg = TrainConfig { batch_size: 8, epochs: 2, eval_every_steps: 1, ..small_cfg(StepMode::Staged) };
    let out = train(model, &data.corpus, &data.pairs, None, &cfg, |_| {}).unwrap();
    let best = out.dev_history.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_dev_rho(), Some(best));
    assert_eq!(out.dev_history[0].0, 0);
    assert_eq!(recse::eval::dev_spearman(&out.best, &data.pairs).unwrap(), best);
}

#[test]
fn store_round_trip_and_damage() {
    let model = tiny_model(&CORPUS, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    let store = recse::pipeline::stage1_build_store(&CORPUS, &model, &path).unwrap();
    assert_eq!(store.len(), CORPUS.len());
    let back = FeatureStore::read(&path).unwrap();
    assert_eq!(back.to_bytes(), store.to_bytes());
    assert_eq!(back.checksum(), store.checksum());

    let bytes = store.to_bytes();
    let p = Path::new("s");
    assert!(matches!(FeatureStore::from_bytes(&bytes[..bytes.len() - 3], p), Err(PipelineError::Corruption { .. })));
    assert!(matches!(FeatureStore::from_bytes(b"nope", p), Err(PipelineError::Format { .. })));
    assert!(matches!(FeatureStore::read(&dir.path().join("missing")), Err(PipelineError::Io { .. })));

    let mut dup = FeatureStore::new(store.l_max());
    let rec = store.records()[0].clone();
    dup.insert(rec.clone()).unwrap();
    assert!(matches!(dup.insert(rec), Err(PipelineError::Collision(_))));
    let short = StoreRecord { source_hash: 1, mask_pos: 0, x_star: vec![0.0; 2] };
    assert!(dup.insert(short).is_err());
}

#[test]
fn missing_store_entry_is_a_staging_error() {
    let model = tiny_model(&CORPUS, 5);
    let store = FeatureStore::build(&CORPUS[..6], &model).unwrap();
    let err = train(model, &CORPUS, &[], Some(store), &small_cfg(StepMode::Staged), |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Staging { .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny_model(&CORPUS, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&model));
    for ((_, a), (_, b)) in model.params().iter().zip(back.params()) {
        assert_eq!(a.name(), b.name());
        let bits = |p: &recse::tensor::Param| p.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.vocab.tokens(), model.vocab.tokens());
    assert_eq!(back.config, model.config);

    let bytes = checkpoint_bytes(&model);
    for at in [20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&bad, &path), Err(PipelineError::Corruption { .. })), "byte {at}");
    }
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 9], &path), Err(PipelineError::Corruption { .. })));
    assert!(matches!(checkpoint_from_bytes(b"RECSE-STORE", &path), Err(PipelineError::Format { .. })));
}

#[test]
fn augmented_mode_needs_no_store() {
    let model = tiny_model(&CORPUS, 7);
    let cfg = small_cfg(StepMode::Augmented { extra_passes: 1 });
    let out = train(model, &CORPUS, &[], None, &cfg, |_| {}).unwrap();
    assert!(out.traces.iter().all(|t| t.losses.l_re == 0.0 && t.moved));
}
