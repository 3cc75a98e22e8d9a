//! Instance construction, the training loop, pre-training followed by
//! fine-tuning, prediction and cross-validation.

mod optim;
mod task;

pub use optim::{clip_grad_norm, grad_norm, linear_schedule, AdamW};
pub use task::{Pretrain, Proto, Reflex, Task, TaskRegistry, Words};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{progressive_align, AlignmentError};
use crate::dataio::{CognateSet, DataError, Dataset};
use crate::encoding::{decode, encode, DecodedWord, EncodingError, Mode, TokenGrid, TokenRows, Vocabulary};
use crate::metrics::{evaluate, EvalReport, MetricsError, Prediction, Scores};
use crate::model::{init_params, loss_and_gradients, predict_ids, ModelConfig, ModelError, Params};
use crate::phonology::{Phoneme, SoundClassModel};
use crate::trimming::{trim, TrimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("TooFewWords: cognate set `{set}` of {family} cannot form a training instance")]
    TooFewWords { family: String, set: String },
    #[error("NoProtoLanguage: {0} declares no proto-language column")]
    NoProtoLanguage(String),
    #[error("UnknownTask: `{0}`")]
    UnknownTask(String),
    #[error("VocabMismatch: {0}")]
    VocabMismatch(String),
    #[error("NoInstances: the data yields no training instance")]
    NoInstances,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NonFiniteLoss: loss diverged in epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Trim(#[from] TrimError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// global gradient-norm bound; 0 disables clipping
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn with(batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size,
            epochs,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }

    pub fn pretrain() -> Self {
        Self::with(64, 48)
    }

    pub fn finetune() -> Self {
        Self::with(48, 9)
    }

    /// Proto-language reconstruction trained from scratch.
    pub fn proto() -> Self {
        Self::with(64, 24)
    }

    pub fn reflex() -> Self {
        Self::with(64, 32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.max_grad_norm >= 0.0) {
            return bad("weight_decay and max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

/// One encoded grid with the word it should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub grid: TokenGrid,
    pub family: String,
    pub set_id: String,
    pub target_language: String,
    pub gold: Option<Vec<Phoneme>>,
}

fn aligned_rows(words: &Words, model: &SoundClassModel, trimmed: bool) -> Result<TokenRows, TrainError> {
    let msa = progressive_align(words, model)?;
    Ok(if trimmed {
        trim(&msa)?.token_rows()
    } else {
        msa.token_rows()
    })
}

fn instances_for(
    set: &CognateSet,
    task: &dyn Task,
    mode: Mode,
    vocab: &Vocabulary,
    model: &SoundClassModel,
) -> Result<Vec<Instance>, TrainError> {
    let make = |grid, target: &str| Instance {
        grid,
        family: set.family.clone(),
        set_id: set.id.clone(),
        target_language: target.to_string(),
        gold: set.word(target).map(<[Phoneme]>::to_vec),
    };
    match mode {
        Mode::Train => {
            let targets = task.training_targets(set)?;
            if targets.is_empty() {
                return Ok(Vec::new());
            }
            let rows = aligned_rows(&task.training_words(set), model, true)?;
            targets
                .iter()
                .map(|t| Ok(make(encode(&rows, t, vocab, Mode::Train)?, t)))
                .collect()
        }
        Mode::Infer => {
            let mut out = Vec::new();
            for t in task.evaluation_targets(set) {
                let context = task.context_words(set, &t);
                if context.is_empty() {
                    continue;
                }
                let rows = aligned_rows(&context, model, false)?;
                out.push(make(encode(&rows, &t, vocab, Mode::Infer)?, &t));
            }
            Ok(out)
        }
    }
}

/// Train mode: trimmed alignments with the hidden word as labels. Infer
/// mode: untrimmed alignments of the visible words plus a `[MASK]` row.
/// Sets are processed in parallel; the output order follows the input.
pub fn make_instances(
    datasets: &[Dataset],
    task: &dyn Task,
    mode: Mode,
    vocab: &Vocabulary,
    model: &SoundClassModel,
) -> Result<Vec<Instance>, TrainError> {
    let sets: Vec<&CognateSet> = datasets.iter().flat_map(|d| &d.sets).collect();
    let per_set: Vec<Result<Vec<Instance>, TrainError>> = sets
        .par_iter()
        .map(|s| instances_for(s, task, mode, vocab, model))
        .collect();
    let mut out = Vec::new();
    for r in per_set {
        out.extend(r?);
    }
    Ok(out)
}

/// Vocabulary over the trimmed training alignments of every source, with
/// a language token for every column of every dataset.
pub fn build_vocabulary(sources: &[(&[Dataset], &dyn Task)], model: &SoundClassModel) -> Result<Vocabulary, TrainError> {
    let mut languages: Vec<String> = Vec::new();
    let mut corpus: Vec<TokenRows> = Vec::new();
    for (datasets, task) in sources {
        for d in *datasets {
            for l in &d.languages {
                if !languages.contains(l) {
                    languages.push(l.clone());
                }
            }
        }
        let sets: Vec<&CognateSet> = datasets.iter().flat_map(|d| &d.sets).collect();
        let rows: Vec<Result<Option<TokenRows>, TrainError>> = sets
            .par_iter()
            .map(|s| {
                if task.training_targets(s)?.is_empty() {
                    return Ok(None);
                }
                aligned_rows(&task.training_words(s), model, true).map(Some)
            })
            .collect();
        for r in rows {
            corpus.extend(r?);
        }
    }
    Ok(Vocabulary::build(&corpus, &languages)?)
}

/// Mini-batch training with seeded shuffling and dropout, AdamW and a
/// linearly decaying learning rate. Returns the final parameters and the
/// mean loss of every epoch.
pub fn train(
    mut params: Params<f32>,
    instances: &[Instance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Params<f32>, Vec<f64>), TrainError> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_steps = cfg.epochs * instances.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut weighted, mut positions) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let grids: Vec<&TokenGrid> = batch.iter().map(|&i| &instances[i].grid).collect();
            let supervised: usize = grids.iter().map(|g| g.supervised()).sum();
            let (loss, mut grads) = loss_and_gradients(&params, &grids, Some(&mut rng))?;
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let lr = linear_schedule(cfg.learning_rate, opt.steps() as usize, total_steps);
            opt.step(&mut params, &grads, lr);
            weighted += f64::from(loss) * supervised as f64;
            positions += supervised;
        }
        let mean = weighted / positions as f64;
        if !mean.is_finite() {
            return Err(TrainError::NonFiniteLoss(epoch));
        }
        log::info!("epoch {epoch}/{}: loss {mean:.4}", cfg.epochs);
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok((params, losses))
}

/// A trained model with its vocabulary and loss curve.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub params: Params<f32>,
    pub vocab: Vocabulary,
    pub losses: Vec<f64>,
}

/// Build the vocabulary and instances, initialise from `cfg.seed` and train.
pub fn fit(
    datasets: &[Dataset],
    task: &dyn Task,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    sound: &SoundClassModel,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Fitted, TrainError> {
    let vocab = build_vocabulary(&[(datasets, task)], sound)?;
    let instances = make_instances(datasets, task, Mode::Train, &vocab, sound)?;
    let params = init_params(&model_config.with_vocab_size(vocab.len()), cfg.seed)?;
    let (params, losses) = train(params, &instances, cfg, on_epoch)?;
    Ok(Fitted { params, vocab, losses })
}

/// Continue training `params` (whose ids follow `params_vocab`) on
/// instances encoded with `data_vocab`; the two must agree id for id.
pub fn finetune(
    params: Params<f32>,
    params_vocab: &Vocabulary,
    data_vocab: &Vocabulary,
    instances: &[Instance],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(Params<f32>, Vec<f64>), TrainError> {
    if params.config.vocab_size != params_vocab.len() {
        return Err(TrainError::VocabMismatch(format!(
            "model has {} token embeddings, its vocabulary {} tokens",
            params.config.vocab_size,
            params_vocab.len()
        )));
    }
    if params_vocab != data_vocab {
        let first = (0..params_vocab.len().max(data_vocab.len()))
            .find(|&i| params_vocab.tokens().get(i) != data_vocab.tokens().get(i))
            .unwrap_or(0);
        return Err(TrainError::VocabMismatch(format!("vocabularies first differ at id {first}")));
    }
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    train(params, instances, cfg, on_epoch)
}

#[derive(Debug, Clone)]
pub struct PretrainedFit {
    pub params: Params<f32>,
    pub vocab: Vocabulary,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
}

/// Pre-train on reflex prediction over the daughter words of both corpora,
/// then fine-tune on proto-language reconstruction. One vocabulary covers
/// both phases.
pub fn pretrain_then_finetune(
    reflex: &[Dataset],
    proto: &[Dataset],
    model_config: &ModelConfig,
    cfg_pre: &TrainConfig,
    cfg_fine: &TrainConfig,
    sound: &SoundClassModel,
) -> Result<PretrainedFit, TrainError> {
    let vocab = build_vocabulary(&[(reflex, &Pretrain), (proto, &Pretrain), (proto, &Proto)], sound)?;
    let mut pre = make_instances(reflex, &Pretrain, Mode::Train, &vocab, sound)?;
    pre.extend(make_instances(proto, &Pretrain, Mode::Train, &vocab, sound)?);
    let params = init_params(&model_config.with_vocab_size(vocab.len()), cfg_pre.seed)?;
    let (params, pretrain_losses) = if cfg_pre.epochs == 0 {
        (params, Vec::new())
    } else {
        train(params, &pre, cfg_pre, |_, _| {})?
    };
    let fine = make_instances(proto, &Proto, Mode::Train, &vocab, sound)?;
    let (params, finetune_losses) = finetune(params, &vocab, &vocab, &fine, cfg_fine, |_, _| {})?;
    Ok(PretrainedFit {
        params,
        vocab,
        pretrain_losses,
        finetune_losses,
    })
}

/// Most likely word for `target` given the attested `words`.
pub fn predict(
    params: &Params<f32>,
    vocab: &Vocabulary,
    words: &Words,
    target: &str,
    sound: &SoundClassModel,
) -> Result<DecodedWord, TrainError> {
    let context: Words = words.iter().filter(|(l, _)| l != target).cloned().collect();
    let rows = aligned_rows(&context, sound, false)?;
    let grid = encode(&rows, target, vocab, Mode::Infer)?;
    let mut word = decode(&predict_ids(params, &grid)?, vocab);
    word.language = Some(target.to_string());
    Ok(word)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub family: String,
    pub set_id: String,
    pub language: String,
    pub predicted: Vec<Phoneme>,
    pub gold: Option<Vec<Phoneme>>,
}

/// Decode the argmax prediction of every instance.
pub fn predict_instances(
    params: &Params<f32>,
    vocab: &Vocabulary,
    instances: &[Instance],
) -> Result<Vec<PredictionRecord>, TrainError> {
    instances
        .par_iter()
        .map(|inst| {
            let ids = predict_ids(params, &inst.grid)?;
            Ok(PredictionRecord {
                family: inst.family.clone(),
                set_id: inst.set_id.clone(),
                language: inst.target_language.clone(),
                predicted: decode(&ids, vocab).phonemes,
                gold: inst.gold.clone(),
            })
        })
        .collect()
}

/// Metrics over the records that carry a gold word.
pub fn score_records(records: &[PredictionRecord], sound: &SoundClassModel) -> Result<EvalReport, TrainError> {
    let pairs: Vec<Prediction> = records
        .iter()
        .filter_map(|r| {
            r.gold.as_ref().map(|g| Prediction {
                family: r.family.clone(),
                pred: r.predicted.clone(),
                gold: g.clone(),
            })
        })
        .collect();
    Ok(evaluate(&pairs, sound)?)
}

/// Predict every evaluation target of `datasets` and score against gold.
pub fn evaluate_model(
    params: &Params<f32>,
    vocab: &Vocabulary,
    datasets: &[Dataset],
    task: &dyn Task,
    sound: &SoundClassModel,
) -> Result<(EvalReport, Vec<PredictionRecord>), TrainError> {
    let instances = make_instances(datasets, task, Mode::Infer, vocab, sound)?;
    let records = predict_instances(params, vocab, &instances)?;
    Ok((score_records(&records, sound)?, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub mean: Scores,
    /// sample standard deviation over folds
    pub std: Scores,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize_folds(folds: Vec<EvalReport>) -> CvReport {
    let pick = |f: fn(&EvalReport) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (ed, ed_sd) = pick(|r| r.ed);
    let (ned, ned_sd) = pick(|r| r.ned);
    let (bc, bc_sd) = pick(|r| r.bc);
    CvReport {
        mean: Scores { ed, ned, bc },
        std: Scores {
            ed: ed_sd,
            ned: ned_sd,
            bc: bc_sd,
        },
        folds,
    }
}

/// k-fold cross-validation at cognate-set granularity. Every dataset is
/// partitioned separately and fold `i` gathers part `i` of each.
pub fn cross_validate(
    datasets: &[Dataset],
    task: &dyn Task,
    k: usize,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    sound: &SoundClassModel,
    mut on_fold: impl FnMut(usize, &EvalReport),
) -> Result<CvReport, TrainError> {
    let parts: Vec<Vec<Dataset>> = datasets
        .iter()
        .map(|d| d.folds(k, cfg.seed))
        .collect::<Result<_, _>>()?;
    let mut reports = Vec::with_capacity(k);
    for i in 0..k {
        let test: Vec<Dataset> = parts.iter().map(|p| p[i].clone()).collect();
        let train_sets: Vec<Dataset> = parts
            .iter()
            .map(|p| {
                let rest: Vec<&Dataset> = p.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| d).collect();
                Dataset::merge(&rest).expect("k >= 2 leaves a training part")
            })
            .collect();
        let fitted = fit(&train_sets, task, model_config, cfg, sound, |_, _| {})?;
        let (report, _) = evaluate_model(&fitted.params, &fitted.vocab, &test, task, sound)?;
        log::info!("fold {}/{k}: ED {:.4} NED {:.4} BC {:.4}", i + 1, report.ed, report.ned, report.bc);
        on_fold(i + 1, &report);
        reports.push(report);
    }
    Ok(summarize_folds(reports))
}
