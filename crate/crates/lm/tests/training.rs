use ratplus_core::patterns::{PatternAssignment, SparsePatternSpec};
use ratplus_lm::checkpoint::{read_checkpoint, write_checkpoint};
use ratplus_lm::decode::Decoder;
use ratplus_lm::model::{forward_lm_with, Model, ModelConfig};
use ratplus_lm::train::{adapt, eval_nll, eval_nll_batched, train_joint, AdaptSpec, TrainMode, TrainSpec};
use ratplus_lm::{synth_task_generate, TaskKind};

fn spec(mode: TrainMode, steps: usize) -> TrainSpec {
    let mut sparse = SparsePatternSpec::dilated(4).with_sinks(0);
    sparse.active_length = 4;
    TrainSpec {
        mode,
        dense_spec: SparsePatternSpec::dense(),
        sparse_spec: sparse,
        peak_lr: 3e-3,
        final_lr: 3e-4,
        warmup_fraction: 0.1,
        batch: 2,
        steps,
        seed: 5,
        share_batch: true,
        weight_decay: 0.1,
        grad_clip: 1.0,
    }
}

#[test]
fn equal_seeds_give_bitwise_equal_traces() {
    let corpus = synth_task_generate(TaskKind::Copy, 4000, 2, None).unwrap();
    for mode in [TrainMode::Joint, TrainMode::SummedLoss, TrainMode::DenseOnly] {
        let run = || {
            let mut m = Model::init(ModelConfig::small(corpus.vocab(), 16, 2, 2, 32), 1).unwrap();
            let trace = train_joint(&mut m, &corpus, &spec(mode, 6)).unwrap();
            (trace, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.loss.is_finite()));
        assert_eq!(ma.embed, mb.embed);
    }
}

#[test]
fn training_lowers_held_out_loss() {
    let corpus = synth_task_generate(TaskKind::CharLm, 20_000, 3, None).unwrap();
    let (train, held) = corpus.split(0.9).unwrap();
    let mut m = Model::init(ModelConfig::small(corpus.vocab(), 16, 2, 2, 32), 1).unwrap();
    let before = eval_nll(&m, &held, &SparsePatternSpec::dense()).unwrap();
    train_joint(&mut m, &train, &spec(TrainMode::Joint, 60)).unwrap();
    let after = eval_nll(&m, &held, &SparsePatternSpec::dense()).unwrap();
    assert!(after < before - 0.3, "{before} -> {after}");
}

#[test]
fn eval_is_invariant_to_batching() {
    let corpus = synth_task_generate(TaskKind::CharLm, 3000, 4, None).unwrap();
    let m = Model::init(ModelConfig::small(corpus.vocab(), 16, 2, 2, 64), 2).unwrap();
    let s = SparsePatternSpec::dilated(2);
    let whole = eval_nll(&m, &corpus, &s).unwrap();
    for b in [1, 3, 7] {
        assert!((eval_nll_batched(&m, &corpus, &s, b).unwrap() - whole).abs() <= 1e-9);
    }
}

#[test]
fn adaptation_improves_target_pattern_on_undertrained_model() {
    let corpus = synth_task_generate(TaskKind::CharLm, 12_000, 5, None).unwrap();
    let (train, held) = corpus.split(0.9).unwrap();
    let mut m = Model::init(ModelConfig::small(corpus.vocab(), 16, 2, 2, 64), 3).unwrap();
    train_joint(&mut m, &train, &spec(TrainMode::DenseOnly, 20)).unwrap();
    let target = SparsePatternSpec::dilated(4);
    let before = eval_nll(&m, &held, &target).unwrap();
    let a = AdaptSpec { target_spec: target, lr: 1e-3, tokens_budget: 8 * 4 * 64, batch: 4, seed: 1, weight_decay: 0.0, grad_clip: 1.0 };
    let trace = adapt(&mut m, &train, &a).unwrap();
    assert_eq!(trace.len(), 8);
    assert!(trace.iter().all(|r| r.lr == 1e-3));
    assert!(eval_nll(&m, &held, &target).unwrap() < before);
}

#[test]
fn checkpoint_roundtrip_keeps_f32_precision() {
    let m = Model::init(ModelConfig::small(20, 8, 2, 2, 16), 6).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config, m.config);
    for ((_, a), (_, b)) in m.tensors().into_iter().zip(back.tensors()) {
        assert!(a.max_abs_diff(b) <= 1e-8);
    }
    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
}

#[test]
fn cached_generation_matches_full_forward_under_mixed_patterns() {
    let mut cfg = ModelConfig::small(15, 16, 2, 2, 64);
    cfg.init_std = 0.2;
    let m = Model::init(cfg, 8).unwrap();
    let mut assign = PatternAssignment::uniform(2, SparsePatternSpec::dilated(8).with_window(3));
    assign.per_layer[1] = SparsePatternSpec::dilated(2).with_sinks(2);
    let tokens: Vec<usize> = (0..64).map(|i| (i * i + 3) % 15).collect();
    let (full, _) = forward_lm_with(&m, &tokens, &assign).unwrap();
    let mut dec = Decoder::new(&m, &assign).unwrap();
    for (t, &tok) in tokens.iter().enumerate() {
        let l = dec.step(tok).unwrap();
        let err = l.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "t={t}: {err}");
    }
}
