use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::generate_corpus;
use crate::eval::MetricReport;
use crate::tensor::AdamW;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        aligner: AlignerConfig { dim_h: 16, heads: 2 },
        decoder: DecoderConfig { dim_m: 16, n_g: 1, n_l: 1, heads: 2, max_context: 512 },
    }
}

fn small_corpus_config() -> CorpusConfig {
    CorpusConfig { max_phonemes: 6, max_duration: 3, ref_frames: 4, ..CorpusConfig::default() }
}

fn train_config(variant: Variant, stage: Stage) -> TrainConfig {
    let mut t = TrainConfig { variant, stage, batch_size: 2, steps: 4, ..TrainConfig::default() };
    t.optimizer.lr = 3e-3;
    t
}

fn data(n: usize) -> Vec<Utterance> {
    generate_corpus(11, n, &small_corpus_config()).unwrap()
}

fn model(variant: Variant, seed: u64) -> Model {
    Model::new(variant, &tiny_model_config(), &small_corpus_config(), seed).unwrap()
}

fn param_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    store.ids().flat_map(|id| store.get(id).data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).collect()
}

#[test]
fn fresh_losses_are_finite_and_nonnegative() {
    let d = data(3);
    for variant in Variant::ALL {
        let m = model(variant, 1);
        for u in &d {
            let mut g = Graph::new(&m.store);
            let (a, dec) = m.losses(&mut g, u, Stage::Scratch).unwrap();
            assert_eq!(a.is_some(), variant == Variant::Full);
            for v in a.into_iter().chain([dec]) {
                let x = g.value(v).item();
                assert!(x.is_finite() && x >= 0.0, "{variant}: {x}");
            }
        }
    }
}

#[test]
fn variants_own_the_expected_parameters() {
    let has = |m: &Model, prefix: &str| m.store.ids().any(|id| m.store.name(id).starts_with(prefix));
    let full = model(Variant::Full, 0);
    let plain = model(Variant::NoVisual, 0);
    let prefix = model(Variant::VisualPrefix, 0);
    assert!(has(&full, "aligner.") && !has(&full, "decoder.lip_proj"));
    assert!(!has(&plain, "aligner.") && !has(&plain, "decoder.lip_proj"));
    assert!(!has(&prefix, "aligner.") && has(&prefix, "decoder.lip_proj"));
}

#[test]
fn step_reports_batch_means() {
    let d = data(2);
    let mut m = model(Variant::Full, 2);
    let mut expect = (0.0, 0.0);
    for u in &d {
        let mut g = Graph::new(&m.store);
        let (a, dec) = m.losses(&mut g, u, Stage::Scratch).unwrap();
        expect.0 += g.value(a.unwrap()).item() as f64 / 2.0;
        expect.1 += g.value(dec).item() as f64 / 2.0;
    }
    let cfg = train_config(Variant::Full, Stage::Scratch);
    let mut opt = AdamW::new(cfg.optimizer, &m.store);
    let batch: Vec<&Utterance> = d.iter().collect();
    let got = train_step(&mut m, &mut opt, &batch, &cfg).unwrap();
    assert!((got.align - expect.0).abs() < 1e-9 && (got.decoder - expect.1).abs() < 1e-9);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn frozen_stage_leaves_decoder_bits_untouched() {
    let d = data(4);
    let m = model(Variant::Full, 3);
    let before: Vec<(String, Vec<f32>)> = m
        .store
        .ids()
        .map(|id| (m.store.name(id).to_string(), m.store.get(id).data().to_vec()))
        .collect();
    let mut t = Trainer::new(m, train_config(Variant::Full, Stage::Frozen)).unwrap();
    t.train(&d, |_, _| {}).unwrap();
    let mut aligner_moved = false;
    for (id, (name, old)) in t.model.store.ids().zip(&before) {
        let now = t.model.store.get(id).data();
        if name.starts_with("decoder.") {
            assert!(now.iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} changed");
        } else {
            aligner_moved |= now != old.as_slice();
        }
    }
    assert!(aligner_moved);
}

#[test]
fn single_batch_overfit() {
    let d = data(4);
    let batch: Vec<&Utterance> = d.iter().collect();
    let mut m = model(Variant::Full, 4);
    let cfg = train_config(Variant::Full, Stage::Scratch);
    let mut opt = AdamW::new(cfg.optimizer, &m.store);
    let first = train_step(&mut m, &mut opt, &batch, &cfg).unwrap().total(&cfg);
    let mut last = first;
    for _ in 1..300 {
        last = train_step(&mut m, &mut opt, &batch, &cfg).unwrap().total(&cfg);
    }
    assert!(last < 0.05 * first, "summed loss {first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let d = data(1);
    let mut m = model(Variant::NoVisual, 5);
    let id = m.store.find("decoder.context_proj.weight").unwrap();
    m.store.get_mut(id).data_mut()[0] = f32::NAN;
    let before = param_bytes(&m.store);
    let cfg = train_config(Variant::NoVisual, Stage::Scratch);
    let mut opt = AdamW::new(cfg.optimizer, &m.store);
    let err = train_step(&mut m, &mut opt, &[&d[0]], &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Numeric(_)), "{err}");
    assert_eq!(param_bytes(&m.store), before);
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn trainer_validates_its_inputs() {
    let mismatch = Trainer::new(model(Variant::Full, 0), train_config(Variant::NoVisual, Stage::Scratch));
    assert!(matches!(mismatch, Err(PipelineError::Config(_))));
    let pretrain_full = Trainer::new(model(Variant::Full, 0), train_config(Variant::Full, Stage::Pretrain));
    assert!(matches!(pretrain_full, Err(PipelineError::Config(_))));
    let frozen_plain = Trainer::new(model(Variant::NoVisual, 0), train_config(Variant::NoVisual, Stage::Frozen));
    assert!(matches!(frozen_plain, Err(PipelineError::Config(_))));
    let mut bad = train_config(Variant::Full, Stage::Scratch);
    bad.optimizer.lr = 0.0;
    assert!(bad.validate().is_err());
    bad = train_config(Variant::Full, Stage::Scratch);
    bad.steps = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn stage_and_variant_tags_parse() {
    for s in Stage::ALL {
        assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert!("warmup".parse::<Stage>().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stage": "warmup"}"#).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
}

#[test]
fn init_copies_shared_decoder_weights() {
    let source = model(Variant::NoVisual, 7);
    let mut target = model(Variant::Full, 8);
    let n = target.init_from(&source.store).unwrap();
    assert_eq!(n, source.store.len());
    for id in source.store.ids() {
        let t = target.store.find(source.store.name(id)).unwrap();
        assert_eq!(target.store.get(t), source.store.get(id));
    }
    let mut wide = ModelConfig::default();
    wide.decoder.dim_m = 32;
    let other = Model::new(Variant::NoVisual, &wide, &small_corpus_config(), 0).unwrap();
    assert!(matches!(target.init_from(&other.store), Err(PipelineError::Incompatible(_))));
}

// --- sampling -------------------------------------------------------------

fn cfg_k(k: usize, temperature: f64) -> SamplerConfig {
    SamplerConfig { k, temperature, seed: 0 }
}

#[test]
fn k_one_is_argmax_and_leaves_rng_alone() {
    let logits = [0.1, 2.0, -1.0, 2.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let untouched = rng.clone();
    for _ in 0..10 {
        assert_eq!(top_k_sample(&logits, &cfg_k(1, 1.0), &mut rng).unwrap(), 1);
    }
    assert_eq!(rng.next_u64(), untouched.clone().next_u64());
}

#[test]
fn ties_rank_lower_ids_first() {
    let logits = [1.0, 3.0, 3.0, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let t = top_k_sample(&logits, &cfg_k(2, 1.0), &mut rng).unwrap();
        assert!(t == 1 || t == 2, "{t}");
    }
}

#[test]
fn near_zero_temperature_is_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..65).map(|i| ((i * 37) % 65) as f64 * 0.01).collect();
    let best = (0..65).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
    for _ in 0..10_000 {
        assert_eq!(top_k_sample(&logits, &cfg_k(65, 1e-6), &mut rng).unwrap(), best);
    }
}

#[test]
fn two_way_frequency_matches_three_to_one() {
    let logits = [3f64.ln(), 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let zeros = (0..n).filter(|_| top_k_sample(&logits, &cfg_k(2, 1.0), &mut rng).unwrap() == 0).count();
    let freq = zeros as f64 / n as f64;
    assert!((freq - 0.75).abs() <= 0.01, "{freq}");
}

#[test]
fn sampler_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(top_k_sample(&[1.0], &cfg_k(0, 1.0), &mut rng).is_err());
    assert!(top_k_sample(&[1.0], &cfg_k(1, 0.0), &mut rng).is_err());
    assert!(top_k_sample(&[], &cfg_k(1, 1.0), &mut rng).is_err());
    assert!(matches!(top_k_sample(&[f64::NAN, 1.0], &cfg_k(2, 1.0), &mut rng), Err(PipelineError::Numeric(_))));
    assert_eq!(top_k_sample(&[0.0, 5.0], &cfg_k(1000, 1e-3), &mut rng).unwrap(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_stay_in_the_top_k(logits in prop::collection::vec(-5.0f64..5.0, 2..20), k in 1usize..25, seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let allowed = &order[..k.min(logits.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let t = top_k_sample(&logits, &cfg_k(k, 0.7), &mut rng).unwrap();
            prop_assert!(allowed.contains(&t));
        }
    }
}

// --- generation -------------------------------------------------------------

#[test]
fn full_generation_matches_video_length() {
    let d = data(6);
    let m = model(Variant::Full, 9);
    for (i, u) in d.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let g = generate(&m, &u.phonemes, &u.lips, &u.reference, &SamplerConfig::default(), &mut rng).unwrap();
        assert_eq!(g.grid.frames(), u.video_frames());
        let exp = g.expansion.unwrap();
        assert_eq!(exp.len(), u.video_frames());
        assert!(!g.stopped_by_eos);
        assert!(g.grid.tokens().iter().all(|&t| (t as usize) < m.corpus.codebook_size));
    }
}

#[test]
fn eos_variants_respect_the_cap() {
    let d = data(4);
    for variant in [Variant::NoVisual, Variant::VisualPrefix] {
        let m = model(variant, 10);
        for u in &d {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let g = generate(&m, &u.phonemes, &u.lips, &u.reference, &SamplerConfig::default(), &mut rng).unwrap();
            assert!(g.expansion.is_none());
            assert!(g.grid.frames() >= 1 && g.grid.frames() <= 2 * u.video_frames());
            assert_eq!(g.stopped_by_eos, g.grid.frames() < 2 * u.video_frames());
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let d = data(2);
    let m = model(Variant::NoVisual, 12);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate(&m, &d[0].phonemes, &d[0].lips, &d[0].reference, &SamplerConfig::default(), &mut rng).unwrap()
    };
    assert_eq!(run(5), run(5));
    let greedy = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = SamplerConfig { k: 1, ..SamplerConfig::default() };
        generate(&m, &d[0].phonemes, &d[0].lips, &d[0].reference, &s, &mut rng).unwrap()
    };
    assert_eq!(greedy(1), greedy(2));
}

// --- checkpoints ------------------------------------------------------------

fn trained(steps: u64) -> (Trainer, Vec<Utterance>) {
    let d = data(6);
    let mut cfg = train_config(Variant::Full, Stage::Scratch);
    cfg.steps = steps;
    let mut t = Trainer::new(model(Variant::Full, 13), cfg).unwrap();
    t.train(&d, |_, _| {}).unwrap();
    (t, d)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (t, _) = trained(2);
    let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let again = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(again.to_bytes().unwrap(), bytes);
    let restored = again.to_trainer().unwrap();
    assert_eq!(param_bytes(&restored.model.store), param_bytes(&t.model.store));
    assert_eq!(Checkpoint::from_trainer(&restored).to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_foreign_bytes() {
    let (t, _) = trained(1);
    let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(PipelineError::Incompatible(_))));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&wrong_magic), Err(PipelineError::Incompatible(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(PipelineError::Incompatible(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(PipelineError::Incompatible(_))));
}

#[test]
fn weights_only_checkpoint_cannot_resume() {
    let (t, _) = trained(1);
    let ck = Checkpoint::from_model(&t.model, &t.config, 1);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(param_bytes(&back.to_model().unwrap().store), param_bytes(&t.model.store));
    assert!(matches!(back.to_trainer(), Err(PipelineError::Incompatible(_))));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (straight, d) = trained(5);
    let (mut half, _) = trained(3);
    half.config.steps = 5;
    let bytes = Checkpoint::from_trainer(&half).to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().to_trainer().unwrap();
    resumed.train(&d, |_, _| {}).unwrap();
    assert_eq!(resumed.steps_done(), 5);
    assert_eq!(param_bytes(&resumed.model.store), param_bytes(&straight.model.store));
    assert_eq!(
        Checkpoint::from_trainer(&resumed).to_bytes().unwrap(),
        Checkpoint::from_trainer(&straight).to_bytes().unwrap()
    );
}

#[test]
fn frozen_flags_survive_checkpoints() {
    let d = data(3);
    let mut t = Trainer::new(model(Variant::Full, 14), train_config(Variant::Full, Stage::Frozen)).unwrap();
    t.train(&d, |_, _| {}).unwrap();
    let back = Checkpoint::from_bytes(&Checkpoint::from_trainer(&t).to_bytes().unwrap()).unwrap().to_trainer().unwrap();
    for id in back.model.store.ids() {
        let name = back.model.store.name(id);
        assert_eq!(back.model.store.is_trainable(id), !name.starts_with("decoder."), "{name}");
    }
}

#[test]
fn rng_state_round_trips_mid_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    rng.set_stream(7);
    for _ in 0..13 {
        rng.next_u32();
    }
    let mut back = RngState::capture(&rng).restore().unwrap();
    assert_eq!(back.next_u64(), rng.next_u64());
    let bad = RngState { seed: "zz".into(), stream: 0, word_pos: "0".into() };
    assert!(bad.restore().is_err());
}

// --- experiments ------------------------------------------------------------

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        corpus: small_corpus_config(),
        model: tiny_model_config(),
        train: TrainConfig { steps: 3, batch_size: 2, ..TrainConfig::default() },
        pretrain_steps: 2,
        pretrain_multiplier: 2,
        sampler: SamplerConfig::default(),
        data_seed: 1,
        model_seed: 2,
        n_train: 6,
        n_eval: 3,
    }
}

#[test]
fn ablation_report_covers_every_plan() {
    let cfg = tiny_experiment();
    let mut plans = ExperimentPlan::visual_integration();
    plans.extend(ExperimentPlan::training_configuration());
    let mut finished = Vec::new();
    let report = run_ablation(&cfg, &plans, |e| {
        if let AblationEvent::Finished(r) = e {
            finished.push(r.name.clone())
        }
    })
    .unwrap();
    let names: Vec<_> = report.results.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["full", "no_visual", "visual_prefix", "scratch", "pretrain_adapt", "frozen"]);
    assert_eq!(finished, names);
    // "scratch" reuses the "full" run
    assert_eq!(report.results[0].metrics, report.results[3].metrics);
    let full = &report.results[0].metrics;
    assert_eq!(full.duration_error, 0.0);
    assert!(full.alignment_frame_accuracy.is_some());
    assert!(report.results[1].metrics.alignment_frame_accuracy.is_none());
    assert_eq!(report.checks.len(), 4);
    assert!(report.checks[0].passed);
    assert!(report.summary_table().lines().count() >= 1 + 6 + 4);
}

#[test]
fn adapt_needs_a_pretrained_model() {
    let cfg = tiny_experiment();
    let (train, held) = cfg.datasets().unwrap();
    let plan = ExperimentPlan::new("a", Variant::Full, Stage::Adapt);
    let err = run_experiment(&plan, &cfg, &train, &held, None, |_, _| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
    assert!(ExperimentPlan::new("p", Variant::Full, Stage::Pretrain).validate().is_err());
    assert!(ExperimentPlan::new("f", Variant::NoVisual, Stage::Frozen).validate().is_err());
}

#[test]
fn evaluation_is_reproducible() {
    let cfg = tiny_experiment();
    let (_, held) = cfg.datasets().unwrap();
    let m = model(Variant::NoVisual, 3);
    let a = evaluate(&m, &held, &cfg.sampler).unwrap();
    let b = evaluate(&m, &held, &cfg.sampler).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.report.count, held.len());
    let loss = heldout_decoder_loss(&m, &held, Stage::Scratch).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}

fn result(variant: Variant, stage: Stage, loss: f64, acc: f64, sl: f64, dur: f64) -> ExperimentResult {
    ExperimentResult {
        name: format!("{variant}-{stage}"),
        variant,
        stage,
        steps: 1,
        final_losses: StepLosses::default(),
        heldout_decoder_loss: loss,
        metrics: MetricReport {
            alignment_frame_accuracy: None,
            token_accuracy: acc,
            speaker_token_accuracy: acc,
            mcd_dtw: sl,
            mcd_dtw_sl: sl,
            duration_error: dur,
            count: 1,
        },
    }
}

#[test]
fn checks_apply_the_directional_thresholds() {
    let good = [
        result(Variant::Full, Stage::Scratch, 10.0, 0.9, 1.0, 0.0),
        result(Variant::NoVisual, Stage::Scratch, 20.0, 0.3, 2.0, 0.4),
        result(Variant::Full, Stage::Adapt, 8.0, 0.9, 1.0, 0.0),
        result(Variant::Full, Stage::Frozen, 30.0, 0.1, 9.0, 0.0),
    ];
    assert!(ablation_checks(&good, 64).iter().all(|c| c.passed));
    let bad = [
        result(Variant::Full, Stage::Scratch, 10.0, 0.9, 2.0, 0.1),
        result(Variant::NoVisual, Stage::Scratch, 20.0, 0.3, 2.0, 0.4),
        result(Variant::Full, Stage::Adapt, 8.01, 0.9, 1.0, 0.0),
        result(Variant::Full, Stage::Frozen, 30.0, 0.2, 9.0, 0.0),
    ];
    assert!(ablation_checks(&bad, 64).iter().all(|c| !c.passed));
    assert!(ablation_checks(&bad[1..2], 64).is_empty());
}
