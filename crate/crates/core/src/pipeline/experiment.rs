use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{generate, Generation, SamplerConfig};
use super::train::{StepLosses, Trainer};
use super::{Model, ModelConfig, PipelineError, Result, Stage, TrainConfig};
use crate::data::{generate_corpus, split_corpus, utterance_seed, Codec, CorpusConfig, FeatureDecoder, Utterance};
use crate::decoder::Variant;
use crate::eval::{score_utterance, MetricReport, Scored, UtteranceMetrics};
use crate::tensor::Graph;

/// Everything an ablation run depends on besides the plans themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Budget of every scratch or adaptation run; variant and stage are set per plan.
    pub train: TrainConfig,
    pub pretrain_steps: u64,
    /// Pretraining corpus size as a multiple of `n_train`.
    pub pretrain_multiplier: usize,
    pub sampler: SamplerConfig,
    pub data_seed: u64,
    pub model_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_steps: 3000,
            pretrain_multiplier: 5,
            sampler: SamplerConfig::default(),
            data_seed: 0,
            model_seed: 0,
            n_train: 2000,
            n_eval: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(PipelineError::Config("n_train and n_eval must be positive".into()));
        }
        if self.pretrain_steps == 0 || self.pretrain_multiplier == 0 {
            return Err(PipelineError::Config("pretraining needs positive steps and corpus size".into()));
        }
        Ok(())
    }

    /// Seed of the pretraining corpus, disjoint from the main corpus stream.
    pub fn pretrain_data_seed(&self) -> u64 {
        utterance_seed(self.data_seed, u64::MAX)
    }

    /// Main corpus split into (train, held-out).
    pub fn datasets(&self) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let all = generate_corpus(self.data_seed, self.n_train + self.n_eval, &self.corpus)?;
        Ok(split_corpus(all, self.n_eval)?)
    }

    pub fn pretrain_dataset(&self) -> Result<Vec<Utterance>> {
        Ok(generate_corpus(self.pretrain_data_seed(), self.pretrain_multiplier * self.n_train, &self.corpus)?)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { steps: self.pretrain_steps, variant: Variant::NoVisual, stage: Stage::Pretrain, ..self.train.clone() }
    }
}

/// One ablation arm: a variant trained with a stage (adapt and frozen imply pretraining first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub variant: Variant,
    pub stage: Stage,
}

impl ExperimentPlan {
    pub fn new(name: impl Into<String>, variant: Variant, stage: Stage) -> Self {
        Self { name: name.into(), variant, stage }
    }

    /// Visual-integration arms.
    pub fn visual_integration() -> Vec<Self> {
        vec![
            Self::new("full", Variant::Full, Stage::Scratch),
            Self::new("no_visual", Variant::NoVisual, Stage::Scratch),
            Self::new("visual_prefix", Variant::VisualPrefix, Stage::Scratch),
        ]
    }

    /// Training-configuration arms of the full model.
    pub fn training_configuration() -> Vec<Self> {
        vec![
            Self::new("scratch", Variant::Full, Stage::Scratch),
            Self::new("pretrain_adapt", Variant::Full, Stage::Adapt),
            Self::new("frozen", Variant::Full, Stage::Frozen),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Pretrain {
            return Err(PipelineError::Config(format!("plan {}: pretraining is implied by adapt/frozen", self.name)));
        }
        if self.stage == Stage::Frozen && !self.variant.uses_aligner() {
            return Err(PipelineError::Config(format!("plan {}: frozen stage needs the full variant", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub variant: Variant,
    pub stage: Stage,
    pub steps: u64,
    pub final_losses: StepLosses,
    pub heldout_decoder_loss: f64,
    pub metrics: MetricReport,
}

/// Generations and scores of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub ids: Vec<String>,
    pub generations: Vec<Generation>,
    pub per_utterance: Vec<UtteranceMetrics>,
    pub report: MetricReport,
}

/// Sampler stream for the `index`-th utterance of an evaluation set.
pub fn sampler_rng(sampler: &SamplerConfig, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(utterance_seed(sampler.seed, index as u64))
}

pub fn evaluate(model: &Model, data: &[Utterance], sampler: &SamplerConfig) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(PipelineError::Config("no evaluation data".into()));
    }
    let codec = Codec::new(&model.corpus);
    let features = FeatureDecoder::new(&model.corpus);
    let mut out = EvalOutput { ids: Vec::new(), generations: Vec::new(), per_utterance: Vec::new(), report: empty_report() };
    for (i, u) in data.iter().enumerate() {
        let mut rng = sampler_rng(sampler, i);
        let gen = generate(model, &u.phonemes, &u.lips, &u.reference, sampler, &mut rng)?;
        let scored = Scored {
            id: &u.id,
            generated: &gen.grid,
            target: &u.target,
            gt_phonemes: &u.gt_expansion.ids,
            speaker: u.speaker,
            predicted_expansion: gen.expansion.as_ref().map(|e| e.ids.as_slice()),
        };
        out.per_utterance.push(score_utterance(&codec, &features, &scored)?);
        out.ids.push(u.id.clone());
        out.generations.push(gen);
    }
    out.report = MetricReport::aggregate(&out.per_utterance)?;
    Ok(out)
}

fn empty_report() -> MetricReport {
    MetricReport {
        alignment_frame_accuracy: None,
        token_accuracy: 0.0,
        speaker_token_accuracy: 0.0,
        mcd_dtw: 0.0,
        mcd_dtw_sl: 0.0,
        duration_error: 0.0,
        count: 0,
    }
}

/// Mean teacher-forced decoder loss over `data` with the layout `stage` trains on.
pub fn heldout_decoder_loss(model: &Model, data: &[Utterance], stage: Stage) -> Result<f64> {
    if data.is_empty() {
        return Err(PipelineError::Config("no held-out data".into()));
    }
    let mut total = 0.0;
    for u in data {
        let mut g = Graph::new(&model.store);
        let seq = model.training_prompt(u, stage)?;
        let loss = model.decoder.decoder_loss(&mut g, &seq)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains the text-to-speech decoder that adaptation and frozen runs start from.
pub fn pretrain(cfg: &ExperimentConfig, data: &[Utterance], on_step: impl FnMut(u64, &StepLosses)) -> Result<Model> {
    let model = Model::new(Variant::NoVisual, &cfg.model, &cfg.corpus, cfg.model_seed)?;
    let mut trainer = Trainer::new(model, cfg.pretrain_config())?;
    trainer.train(data, on_step)?;
    Ok(trainer.model)
}

/// Trains one plan and evaluates it on the held-out split.
pub fn run_experiment(
    plan: &ExperimentPlan,
    cfg: &ExperimentConfig,
    train: &[Utterance],
    heldout: &[Utterance],
    pretrained: Option<&Model>,
    mut on_step: impl FnMut(u64, &StepLosses),
) -> Result<(ExperimentResult, Model, EvalOutput)> {
    plan.validate()?;
    let mut model = Model::new(plan.variant, &cfg.model, &cfg.corpus, cfg.model_seed)?;
    if plan.stage.needs_init() {
        let source = pretrained
            .ok_or_else(|| PipelineError::Config(format!("plan {} needs a pretrained decoder", plan.name)))?;
        if model.init_from(&source.store)? == 0 {
            return Err(PipelineError::Incompatible("pretrained model shares no parameters".into()));
        }
    }
    let train_cfg = TrainConfig { variant: plan.variant, stage: plan.stage, ..cfg.train.clone() };
    let mut trainer = Trainer::new(model, train_cfg)?;
    let mut last = StepLosses::default();
    trainer.train(train, |step, losses| {
        last = *losses;
        on_step(step, losses);
    })?;
    let model = trainer.model;
    let heldout_loss = heldout_decoder_loss(&model, heldout, plan.stage)?;
    let eval = evaluate(&model, heldout, &cfg.sampler)?;
    let result = ExperimentResult {
        name: plan.name.clone(),
        variant: plan.variant,
        stage: plan.stage,
        steps: cfg.train.steps,
        final_losses: last,
        heldout_decoder_loss: heldout_loss,
        metrics: eval.report.clone(),
    };
    Ok((result, model, eval))
}

/// Pass/fail of one directional comparison between ablation arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn find<'a>(results: &'a [ExperimentResult], variant: Variant, stage: Stage) -> Option<&'a ExperimentResult> {
    results.iter().find(|r| r.variant == variant && r.stage == stage)
}

/// Directional checks whose arms are all present in `results`.
pub fn ablation_checks(results: &[ExperimentResult], codebook_size: usize) -> Vec<Check> {
    let mut checks = Vec::new();
    let full = find(results, Variant::Full, Stage::Scratch);
    if let Some(f) = full {
        let d = f.metrics.duration_error;
        checks.push(Check {
            name: "full_duration_error_zero".into(),
            passed: d == 0.0,
            detail: format!("full duration_error = {d}"),
        });
    }
    if let (Some(f), Some(n)) = (full, find(results, Variant::NoVisual, Stage::Scratch)) {
        let (a, b) = (f.metrics.mcd_dtw_sl, n.metrics.mcd_dtw_sl);
        checks.push(Check {
            name: "full_mcd_dtw_sl_below_no_visual".into(),
            passed: a < b,
            detail: format!("full {a:.4} vs no_visual {b:.4}"),
        });
    }
    if let (Some(s), Some(p)) = (full, find(results, Variant::Full, Stage::Adapt)) {
        let (a, b) = (p.heldout_decoder_loss, s.heldout_decoder_loss);
        checks.push(Check {
            name: "pretrain_adapt_loss_ratio".into(),
            passed: a <= 0.8 * b,
            detail: format!("pretrain+adapt {a:.4} vs scratch {b:.4} (ratio {:.3}, need <= 0.8)", a / b),
        });
    }
    if let Some(fz) = find(results, Variant::Full, Stage::Frozen) {
        let bound = 1.0 / codebook_size as f64 + 0.1;
        let acc = fz.metrics.token_accuracy;
        checks.push(Check {
            name: "frozen_token_accuracy_near_chance".into(),
            passed: acc <= bound,
            detail: format!("frozen token_accuracy {acc:.4} (bound {bound:.4})"),
        });
    }
    checks
}

/// Comparative report over several plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub results: Vec<ExperimentResult>,
    pub checks: Vec<Check>,
}

impl AblationReport {
    /// Fixed-width table of the headline metrics, one row per plan.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<14} {:<8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "plan", "variant", "stage", "align_acc", "tok_acc", "spk_acc", "mcd_dtw", "mcd_sl", "dur_err"
        );
        for r in &self.results {
            let m = &r.metrics;
            let align = m.alignment_frame_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "{:<16} {:<14} {:<8} {:>9} {:>9.4} {:>9.4} {:>9.3} {:>9.3} {:>9.4}\n",
                r.name,
                r.variant.as_str(),
                r.stage.as_str(),
                align,
                m.token_accuracy,
                m.speaker_token_accuracy,
                m.mcd_dtw,
                m.mcd_dtw_sl,
                m.duration_error
            ));
        }
        for c in &self.checks {
            s.push_str(&format!("[{}] {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }
}

/// Progress notifications of [`run_ablation`].
#[derive(Debug, Clone, PartialEq)]
pub enum AblationEvent<'a> {
    Pretrain { step: u64, losses: StepLosses },
    Train { plan: &'a str, step: u64, losses: StepLosses },
    Finished(&'a ExperimentResult),
}

/// Runs every plan on one seeded data split, pretraining once if any plan needs it.
///
/// Plans with the same variant and stage are trained once and reported under each name.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    plans: &[ExperimentPlan],
    mut on_event: impl FnMut(AblationEvent<'_>),
) -> Result<AblationReport> {
    cfg.validate()?;
    if plans.is_empty() {
        return Err(PipelineError::Config("no plans to run".into()));
    }
    for p in plans {
        p.validate()?;
    }
    let (train, heldout) = cfg.datasets()?;
    let pretrained = if plans.iter().any(|p| p.stage.needs_init()) {
        let data = cfg.pretrain_dataset()?;
        Some(pretrain(cfg, &data, |step, losses| on_event(AblationEvent::Pretrain { step, losses: *losses }))?)
    } else {
        None
    };
    let mut results: Vec<ExperimentResult> = Vec::new();
    for plan in plans {
        let result = match find(&results, plan.variant, plan.stage) {
            Some(done) => ExperimentResult { name: plan.name.clone(), ..done.clone() },
            None => {
                let (r, _, _) = run_experiment(plan, cfg, &train, &heldout, pretrained.as_ref(), |step, losses| {
                    on_event(AblationEvent::Train { plan: &plan.name, step, losses: *losses })
                })?;
                r
            }
        };
        on_event(AblationEvent::Finished(&result));
        results.push(result);
    }
    let checks = ablation_checks(&results, cfg.corpus.codebook_size);
    Ok(AblationReport { config: cfg.clone(), results, checks })
}
