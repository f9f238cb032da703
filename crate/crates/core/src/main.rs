use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vslm::data::{read_corpus, write_corpus, Codec, CorpusConfig, CorpusHeader, DataError, FeatureDecoder, TokenGrid, Utterance};
use vslm::decoder::Variant;
use vslm::eval::{score_utterance, write_csv, MetricError, MetricReport, Scored};
use vslm::pipeline::{
    generate, run_ablation, sampler_rng, AblationEvent, Checkpoint, ExperimentConfig, ExperimentPlan, Model, ModelConfig,
    PipelineError, SamplerConfig, Stage, TrainConfig, Trainer,
};
use vslm::tensor::TensorError;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_INCOMPATIBLE: u8 = 4;

/// Synthetic visual text-to-speech: data generation, training, inference, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "vslm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as JSONL (header line, then one utterance per line).
    GenData {
        /// Run config JSON; only its `corpus` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus JSONL to write.
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        /// Corpus seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus a per-step loss log.
    Train {
        /// Run config JSON (model, train and corpus sections).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training corpus written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Pretrained checkpoint whose matching parameters initialize the model.
        #[arg(long, conflicts_with = "resume")]
        init_ckpt: Option<PathBuf>,
        /// Checkpoint with optimizer state to continue up to `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.variant` (full, no_visual, visual_prefix).
        #[arg(long)]
        variant: Option<Variant>,
        /// Overrides `train.stage` (scratch, pretrain, adapt, frozen).
        #[arg(long)]
        stage: Option<Stage>,
        /// CSV log path [default: <out-ckpt>.log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate token grids for every utterance of a corpus.
    Infer {
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus whose phonemes, lips and references prompt the model.
        #[arg(long)]
        data: PathBuf,
        /// JSONL output, one generation per line.
        #[arg(long)]
        out: PathBuf,
        /// Top-k cutoff; 1 is greedy decoding.
        #[arg(long, default_value_t = 30)]
        k: usize,
        /// Softmax temperature applied before the cutoff.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Sampling seed; each utterance draws from its own derived stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score generations against a corpus; writes <out>/metrics.csv and <out>/report.json.
    Eval {
        /// Generations written by `infer`.
        #[arg(long)]
        generated: PathBuf,
        /// Corpus holding the ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the visual-integration and training-configuration ablations end to end.
    Ablate {
        /// Run config JSON; the `ablation` section sizes the data and pretraining.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report.json, summary.txt, summary.csv and config.json.
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated subset of: full, no_visual, visual_prefix, scratch, pretrain_adapt, frozen.
        #[arg(long, value_delimiter = ',')]
        plans: Option<Vec<String>>,
    },
}

/// Unified run configuration. Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Corpus knobs; when absent, commands reading a dataset use the dataset's own.
    corpus: Option<CorpusConfig>,
    model: ModelConfig,
    train: TrainConfig,
    sampler: SamplerConfig,
    ablation: AblationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationSettings {
    n_train: usize,
    n_eval: usize,
    pretrain_steps: u64,
    pretrain_multiplier: usize,
    data_seed: u64,
    model_seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            n_train: e.n_train,
            n_eval: e.n_eval,
            pretrain_steps: e.pretrain_steps,
            pretrain_multiplier: e.pretrain_multiplier,
            data_seed: e.data_seed,
            model_seed: e.model_seed,
        }
    }
}

/// An error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Self { code: classify(&error), error }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow!("{msg}") }
}

fn incompatible(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_INCOMPATIBLE, error: anyhow!("{msg}") }
}

fn classify(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            match p {
                PipelineError::Numeric(_) => return EXIT_NUMERIC,
                PipelineError::Incompatible(_) => return EXIT_INCOMPATIBLE,
                PipelineError::Tensor(_) | PipelineError::Data(_) | PipelineError::Metric(_) => continue,
                _ => return EXIT_USAGE,
            }
        }
        if let Some(TensorError::NonFinite { .. }) = cause.downcast_ref::<TensorError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_USAGE
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { config, out, n, seed } => gen_data(config.as_deref(), &out, n, seed),
        Command::Train { config, data, out_ckpt, init_ckpt, resume, variant, stage, log } => {
            let args = TrainArgs { data, out_ckpt, init_ckpt, resume, variant, stage, log };
            train(config.as_deref(), args)
        }
        Command::Infer { ckpt, data, out, k, temperature, seed } => {
            infer(&ckpt, &data, &out, SamplerConfig { k, temperature, seed })
        }
        Command::Eval { generated, data, out } => eval(&generated, &data, &out),
        Command::Ablate { config, out_dir, plans } => ablate(config.as_deref(), &out_dir, plans),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(c) = &cfg.corpus {
        c.validate().map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    }
    Ok(cfg)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_corpus(path: &Path) -> Result<(CorpusHeader, Vec<Utterance>), Failure> {
    let f = File::open(path).map_err(|e| usage(format!("cannot open dataset {}: {e}", path.display())))?;
    read_corpus(BufReader::new(f)).map_err(|e: DataError| usage(format!("dataset {}: {e}", path.display())))
}

fn gen_data(config: Option<&Path>, out: &Path, n: usize, seed: u64) -> CmdResult {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut cfg = load_config(config)?;
    let corpus = cfg.corpus.get_or_insert_with(CorpusConfig::default).clone();
    let utterances = vslm::data::generate_corpus(seed, n, &corpus)?;
    write_corpus(create(out)?, &CorpusHeader::new(corpus, seed, n), &utterances)?;
    write_json(&sidecar(out, ".config.json"), &cfg)?;
    eprintln!("wrote {n} utterances to {}", out.display());
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    out_ckpt: PathBuf,
    init_ckpt: Option<PathBuf>,
    resume: Option<PathBuf>,
    variant: Option<Variant>,
    stage: Option<Stage>,
    log: Option<PathBuf>,
}

fn train(config: Option<&Path>, args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(config)?;
    let (header, data) = load_corpus(&args.data)?;
    match &cfg.corpus {
        Some(c) if *c != header.config => {
            return Err(incompatible("config corpus section differs from the dataset header"));
        }
        _ => cfg.corpus = Some(header.config.clone()),
    }
    if let Some(s) = args.stage {
        cfg.train.stage = s;
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    } else if cfg.train.stage == Stage::Pretrain {
        cfg.train.variant = Variant::NoVisual;
    }
    cfg.train.validate().map_err(usage)?;

    let mut trainer = if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path)?;
        let mut t = ck.to_trainer()?;
        let saved = &t.config;
        if saved.variant != cfg.train.variant || saved.stage != cfg.train.stage || t.model.corpus != header.config {
            return Err(incompatible(format!(
                "checkpoint {} was trained as {}/{} on a different setup",
                path.display(),
                saved.variant,
                saved.stage
            )));
        }
        t.config.steps = cfg.train.steps;
        cfg.train = t.config.clone();
        cfg.model = t.model.config.clone();
        t
    } else {
        let mut model = Model::new(cfg.train.variant, &cfg.model, &header.config, cfg.train.seed)?;
        match (&args.init_ckpt, cfg.train.stage.needs_init()) {
            (Some(path), _) => {
                let source = Checkpoint::load(path)?.to_model()?;
                if source.corpus != header.config {
                    return Err(incompatible(format!("{} was trained on a different corpus config", path.display())));
                }
                let n = model.init_from(&source.store)?;
                eprintln!("initialized {n} parameters from {}", path.display());
            }
            (None, true) => {
                return Err(usage(format!("stage {} needs --init-ckpt", cfg.train.stage)));
            }
            (None, false) => {}
        }
        Trainer::new(model, cfg.train.clone())?
    };

    let log_path = args.log.clone().unwrap_or_else(|| sidecar(&args.out_ckpt, ".log.csv"));
    let mut log = create(&log_path)?;
    writeln!(log, "step,align_loss,decoder_loss")?;
    let mut io_error = None;
    trainer.train(&data, |step, l| {
        if let Err(e) = writeln!(log, "{step},{},{}", l.align, l.decoder) {
            io_error.get_or_insert(e);
        }
        if step % 100 == 0 {
            eprintln!("step {step}: align {:.4} decoder {:.4}", l.align, l.decoder);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log.flush()?;
    Checkpoint::from_trainer(&trainer).save(&args.out_ckpt)?;
    write_json(&sidecar(&args.out_ckpt, ".config.json"), &cfg)?;
    eprintln!("saved {} after {} steps", args.out_ckpt.display(), trainer.steps_done());
    Ok(())
}

/// One line of the inference output.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedRecord {
    id: String,
    /// `frames x n_q` codec tokens.
    tokens: Vec<Vec<u32>>,
    /// Predicted frame-level phoneme ids (full variant only).
    p_exp: Option<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct InferConfig<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    variant: Variant,
    sampler: &'a SamplerConfig,
}

fn infer(ckpt: &Path, data: &Path, out: &Path, sampler: SamplerConfig) -> CmdResult {
    sampler.validate().map_err(usage)?;
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let (header, utterances) = load_corpus(data)?;
    if header.config != model.corpus {
        return Err(incompatible(format!("{} was trained on a different corpus config than {}", ckpt.display(), data.display())));
    }
    let mut w = create(out)?;
    for (i, u) in utterances.iter().enumerate() {
        let mut rng = sampler_rng(&sampler, i);
        let g = generate(&model, &u.phonemes, &u.lips, &u.reference, &sampler, &mut rng)?;
        let rec = GeneratedRecord { id: u.id.clone(), tokens: g.grid.to_frames(), p_exp: g.expansion.map(|e| e.ids) };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_json(&sidecar(out, ".config.json"), &InferConfig { ckpt, data, variant: model.variant, sampler: &sampler })?;
    eprintln!("wrote {} generations to {}", utterances.len(), out.display());
    Ok(())
}

fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>, Failure> {
    let f = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| usage(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn eval(generated: &Path, data: &Path, out: &Path) -> CmdResult {
    let records = read_generated(generated)?;
    let (header, utterances) = load_corpus(data)?;
    let by_id: HashMap<&str, &Utterance> = utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let unmatched: Vec<&str> = records.iter().map(|r| r.id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !unmatched.is_empty() {
        return Err(usage(format!("generated ids missing from the dataset: {}", unmatched.join(", "))));
    }
    if records.is_empty() {
        return Err(usage("no generated utterance matches the dataset"));
    }
    let cfg = &header.config;
    let codec = Codec::new(cfg);
    let features = FeatureDecoder::new(cfg);
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let u = by_id[r.id.as_str()];
        let grid = TokenGrid::from_frames(cfg.n_q, cfg.codebook_size, &r.tokens)
            .map_err(|e| usage(format!("generation {}: {e}", r.id)))?;
        if grid.frames() == 0 {
            return Err(usage(format!("generation {} is empty", r.id)));
        }
        let scored = Scored {
            id: &r.id,
            generated: &grid,
            target: &u.target,
            gt_phonemes: &u.gt_expansion.ids,
            speaker: u.speaker,
            predicted_expansion: r.p_exp.as_deref(),
        };
        rows.push(score_utterance(&codec, &features, &scored).map_err(|e: MetricError| usage(format!("{}: {e}", r.id)))?);
    }
    fs::create_dir_all(out)?;
    write_csv(create(&out.join("metrics.csv"))?, &rows)?;
    let report = MetricReport::aggregate(&rows)?;
    write_json(&out.join("report.json"), &report)?;
    eprintln!(
        "{} utterances: token_accuracy {:.4}, mcd_dtw {:.4}, duration_error {:.4}",
        report.count, report.token_accuracy, report.mcd_dtw, report.duration_error
    );
    Ok(())
}

fn known_plans() -> Vec<ExperimentPlan> {
    let mut plans = ExperimentPlan::visual_integration();
    plans.extend(ExperimentPlan::training_configuration());
    plans
}

fn ablate(config: Option<&Path>, out_dir: &Path, names: Option<Vec<String>>) -> CmdResult {
    let mut cfg = load_config(config)?;
    let corpus = cfg.corpus.get_or_insert_with(CorpusConfig::default).clone();
    let a = &cfg.ablation;
    let experiment = ExperimentConfig {
        corpus,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        pretrain_steps: a.pretrain_steps,
        pretrain_multiplier: a.pretrain_multiplier,
        sampler: cfg.sampler.clone(),
        data_seed: a.data_seed,
        model_seed: a.model_seed,
        n_train: a.n_train,
        n_eval: a.n_eval,
    };
    experiment.validate().map_err(usage)?;
    let all = known_plans();
    let plans = match names {
        None => all,
        Some(names) => {
            let mut chosen = Vec::new();
            for n in names {
                match all.iter().find(|p| p.name == n) {
                    Some(p) if !chosen.contains(p) => chosen.push(p.clone()),
                    Some(_) => bail_usage(format!("plan {n} listed twice"))?,
                    None => bail_usage(format!("unknown plan {n}"))?,
                }
            }
            chosen
        }
    };
    fs::create_dir_all(out_dir)?;
    let report = run_ablation(&experiment, &plans, |event| match event {
        AblationEvent::Pretrain { step, losses } if step % 250 == 0 => {
            eprintln!("pretrain step {step}: decoder {:.4}", losses.decoder)
        }
        AblationEvent::Train { plan, step, losses } if step % 250 == 0 => {
            eprintln!("{plan} step {step}: align {:.4} decoder {:.4}", losses.align, losses.decoder)
        }
        AblationEvent::Finished(r) => eprintln!("{} done: token_accuracy {:.4}", r.name, r.metrics.token_accuracy),
        _ => {}
    })?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    let table = report.summary_table();
    fs::write(out_dir.join("summary.txt"), &table)?;
    let mut csv = create(&out_dir.join("summary.csv"))?;
    writeln!(csv, "plan,variant,stage,heldout_decoder_loss,alignment_frame_accuracy,token_accuracy,speaker_token_accuracy,mcd_dtw,mcd_dtw_sl,duration_error")?;
    for r in &report.results {
        let m = &r.metrics;
        let align = m.alignment_frame_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.name, r.variant, r.stage, r.heldout_decoder_loss, align, m.token_accuracy, m.speaker_token_accuracy,
            m.mcd_dtw, m.mcd_dtw_sl, m.duration_error
        )?;
    }
    csv.flush()?;
    print!("{table}");
    Ok(())
}

fn bail_usage(msg: String) -> Result<(), Failure> {
    Err(usage(msg))
}
