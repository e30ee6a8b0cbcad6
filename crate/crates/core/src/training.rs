//! Two-phase training: the joint embedding maps stay at their initial values
//! for the first phase and train with everything else in the second.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_records, Corpus, CorpusConfig, FeatureBlock, Sample};
use crate::error::{Error, Result};
use crate::joint_embedding::{l2_loss, ranking_loss, FeatLossKind, LossConfig};
use crate::model::{ModelConfig, RetrievalModel, DIALOG_EMBEDDING, VIDEO_EMBEDDING};
use crate::numerics::{Adam, AdamConfig, Container, Moments, ParamStore, Tape, Tensor, Var};
use crate::retrieval::{evaluate_split, mean_rank, rank_of, EvalReport, VideoIndex};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundSampling {
    /// `t` uniform over `0..T`; the decoder predicts question `t + 1`.
    Uniform,
    /// Always the full dialog; the decoder predicts the last question.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Epochs without validation improvement before a phase stops early.
    pub patience: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub feat_loss: FeatLossKind,
    pub round_sampling: RoundSampling,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            phase1_epochs: 15,
            phase2_epochs: 15,
            patience: 5,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            feat_loss: FeatLossKind::Ranking,
            round_sampling: RoundSampling::Uniform,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("train config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_loss == FeatLossKind::Ranking && self.batch_size < 2 {
            return Err(Error::invalid("ranking loss needs batch_size >= 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Model config with the feature width implied by the corpus blocks.
    pub fn model_for(&self, corpus: &CorpusConfig) -> ModelConfig {
        let mut m = self.model.clone();
        m.feature_dim = m.feature_blocks.iter().map(|&b| corpus.block_dim(b)).sum();
        m
    }
}

/// Encoded training and validation samples with their vocabulary.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, blocks: &[FeatureBlock]) -> Result<Self> {
        let vocab = corpus.vocabulary()?;
        Ok(TrainData {
            train: encode_records(&corpus.train, &vocab, blocks),
            val: encode_records(&corpus.val, &vocab, blocks),
            vocab,
        })
    }
}

/// One batch entry: a sample index and the round its history stops at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub sample: usize,
    pub round: usize,
}

fn draw_round<R: Rng + ?Sized>(policy: RoundSampling, rounds: usize, rng: &mut R) -> usize {
    match policy {
        RoundSampling::Uniform => rng.random_range(0..rounds),
        RoundSampling::Final => rounds,
    }
}

/// `batch_size` distinct samples, each with a sampled round.
pub fn make_batch<R: Rng + ?Sized>(
    samples: &[Sample],
    batch_size: usize,
    policy: RoundSampling,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    if samples.len() < batch_size {
        return Err(Error::invalid(format!(
            "batch of {batch_size} from {} samples",
            samples.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, samples.len(), batch_size).into_vec();
    items_for(samples, &picked, policy, rng)
}

fn items_for<R: Rng + ?Sized>(
    samples: &[Sample],
    picked: &[usize],
    policy: RoundSampling,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    picked
        .iter()
        .map(|&i| {
            let rounds = samples[i].rounds.len();
            if rounds == 0 {
                return Err(Error::invalid(format!("sample {} has no dialog", samples[i].id)));
            }
            Ok(BatchItem {
                sample: i,
                round: draw_round(policy, rounds, rng),
            })
        })
        .collect()
}

/// Loss nodes of one batch.
pub struct BatchLoss {
    pub dialog: Var,
    pub feat: Var,
    pub total: Var,
}

/// Records the full forward pass of a batch on `tape`, reading parameters
/// from `store` (normally `model.params`).
pub fn batch_loss(
    tape: &mut Tape,
    model: &RetrievalModel,
    store: &ParamStore,
    samples: &[Sample],
    batch: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let emb = tape.param(store, model.embedding);
    let mut dialog_terms = Vec::with_capacity(batch.len());
    let mut dialogs = Vec::with_capacity(batch.len());
    let mut videos = Vec::with_capacity(batch.len());
    for item in batch {
        let sample = &samples[item.sample];
        let state = sample.dialog(item.round);
        let s = model.encoder.encode_history(tape, store, emb, &state)?;
        let next = item.round.min(sample.rounds.len() - 1);
        let target = sample.rounds[next].question.framed();
        let out = model.decoder.teacher_forced(tape, store, emb, s, &target)?;
        dialog_terms.push(out.loss);
        dialogs.push(model.dialog_emb.forward(tape, store, s)?);
        let x = tape.constant(Tensor::vector(sample.features.clone()));
        videos.push(model.video_emb.forward(tape, store, x)?);
    }
    let dialog_sum = tape.add_all(&dialog_terms)?;
    let dialog = tape.scale(dialog_sum, 1.0 / batch.len() as f64);
    let feat = match cfg.feat_loss {
        FeatLossKind::Ranking => ranking_loss(tape, &dialogs, &videos, &cfg.loss)?.0,
        FeatLossKind::L2 => l2_loss(tape, &dialogs, &videos)?,
    };
    let total = crate::joint_embedding::total_loss(tape, dialog, feat, &cfg.loss)?;
    Ok(BatchLoss { dialog, feat, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub dialog_loss: f64,
    pub feat_loss: f64,
    pub total: f64,
}

/// Forward, backward and one Adam update over the unfrozen groups.
pub fn train_step(
    model: &mut RetrievalModel,
    adam: &mut Adam,
    samples: &[Sample],
    batch: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let losses = batch_loss(&mut tape, model, &model.params, samples, batch, cfg)?;
    let dialog_loss = tape.value(losses.dialog).item()?;
    let feat_loss = tape.value(losses.feat).item()?;
    let total = tape.value(losses.total).item()?;
    if !total.is_finite() {
        let ids: Vec<String> = batch
            .iter()
            .map(|b| format!("{}@{}", samples[b.sample].id, b.round))
            .collect();
        return Err(Error::NonFinite(format!(
            "loss (dialog {dialog_loss}, feat {feat_loss}) on batch [{}]",
            ids.join(", ")
        )));
    }
    let grads = tape.backward(losses.total)?;
    model.params.zero_grads();
    model.params.accumulate(&tape, &grads);
    adam.step(&mut model.params)?;
    Ok(StepLosses {
        step: adam.step_count(),
        dialog_loss,
        feat_loss,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub mean_total: f64,
    pub val_mean_rank: f64,
    pub seconds: f64,
}

/// Mean GT rank over `samples` with the full dialog, ranked among the
/// samples themselves.
pub fn final_round_mean_rank(model: &RetrievalModel, samples: &[Sample]) -> Result<f64> {
    let index = VideoIndex::build(model, samples)?;
    let ranks = samples
        .iter()
        .map(|s| rank_of(&model.embed_dialog(&s.dialog(s.rounds.len()))?, &index, &s.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_rank(&ranks)?.0)
}

pub struct Trainer {
    pub model: RetrievalModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub data: TrainData,
    pub log: Vec<StepLosses>,
    pub history: Vec<EpochRecord>,
    rng: ChaCha8Rng,
    best: Option<(f64, Vec<(String, Tensor)>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus_cfg: &CorpusConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.model_for(corpus_cfg);
        if let Some(s) = data.train.first() {
            if s.features.len() != model_cfg.feature_dim {
                return Err(Error::shape(
                    "train",
                    format!(
                        "features of width {} for a model expecting {}",
                        s.features.len(),
                        model_cfg.feature_dim
                    ),
                ));
            }
        }
        let model = RetrievalModel::new(model_cfg, data.vocab.clone(), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Trainer {
            model,
            adam: Adam::new(config.adam),
            config,
            data,
            log: Vec::new(),
            history: Vec::new(),
            rng,
            best: None,
        })
    }

    /// Freezes the joint embedding maps for phase 1 and releases them for
    /// phase 2.
    pub fn set_phase(&mut self, phase: u8) {
        let frozen = phase == 1;
        self.model.params.set_frozen(DIALOG_EMBEDDING, frozen);
        self.model.params.set_frozen(VIDEO_EMBEDDING, frozen);
    }

    /// One pass over a fresh permutation of the training set.
    pub fn run_epoch(&mut self, phase: u8) -> Result<EpochRecord> {
        self.set_phase(phase);
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let min_batch = if self.config.feat_loss == FeatLossKind::Ranking {
            2
        } else {
            1
        };
        let mut totals = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch = items_for(&self.data.train, chunk, self.config.round_sampling, &mut self.rng)?;
            let losses = train_step(&mut self.model, &mut self.adam, &self.data.train, &batch, &self.config)?;
            totals.push(losses.total);
            self.log.push(losses);
        }
        let val_mean_rank = if self.data.val.is_empty() {
            f64::NAN
        } else {
            final_round_mean_rank(&self.model, &self.data.val)?
        };
        let record = EpochRecord {
            phase,
            epoch: self.history.len() + 1,
            mean_total: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
            val_mean_rank,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "phase {} epoch {}: loss {:.4}, val MeanR {:.2} ({:.1}s)",
            record.phase,
            record.epoch,
            record.mean_total,
            record.val_mean_rank,
            record.seconds
        );
        if val_mean_rank.is_finite() && self.best.as_ref().is_none_or(|(b, _)| val_mean_rank < *b) {
            self.best = Some((val_mean_rank, self.model.params.named_values()));
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// Up to `epochs` epochs, stopping after `patience` epochs without a new
    /// best validation MeanR within this phase.
    pub fn run_phase(&mut self, phase: u8, epochs: usize) -> Result<()> {
        let mut phase_best = f64::INFINITY;
        let mut since_best = 0;
        for _ in 0..epochs {
            let rec = self.run_epoch(phase)?;
            if rec.val_mean_rank < phase_best {
                phase_best = rec.val_mean_rank;
                since_best = 0;
            } else {
                since_best += 1;
                if self.config.patience > 0 && since_best >= self.config.patience {
                    log::info!("phase {phase}: early stop after {} stale epochs", since_best);
                    break;
                }
            }
        }
        Ok(())
    }

    /// Restores the parameters with the best validation MeanR.
    pub fn restore_best(&mut self) -> Result<()> {
        if let Some((_, params)) = &self.best {
            self.model.params.load_named(params)?;
        }
        Ok(())
    }

    pub fn train_two_phase(mut self) -> Result<Checkpoint> {
        self.run_phase(1, self.config.phase1_epochs)?;
        self.run_phase(2, self.config.phase2_epochs)?;
        self.restore_best()?;
        self.set_phase(2);
        Ok(self.into_checkpoint())
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        let last = self.history.last();
        Checkpoint {
            epoch: last.map_or(0, |r| r.epoch),
            phase: last.map_or(1, |r| r.phase),
            model: self.model,
            adam: self.adam,
            train_config: self.config,
            history: self.history,
            log: self.log,
        }
    }
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[StepLosses]) -> Result<()> {
    let mut out = String::from("step,dialog_loss,feat_loss,total\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.dialog_loss, r.feat_loss, r.total));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Model, optimizer state and training history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: RetrievalModel,
    pub adam: Adam,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub phase: u8,
    pub history: Vec<EpochRecord>,
    pub log: Vec<StepLosses>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train_config: TrainConfig,
    epoch: usize,
    phase: u8,
    history: Vec<EpochRecord>,
    adam_step: u64,
    /// Per-parameter update counts; absent entries never received an update.
    adam_steps: Vec<Option<u64>>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let names: Vec<String> = self.model.params.iter().map(|(_, p)| p.name.clone()).collect();
        let mut adam_steps = Vec::with_capacity(names.len());
        let mut moment_tensors = Vec::new();
        for (i, name) in names.iter().enumerate() {
            match self.adam.moments(i) {
                Some(m) => {
                    adam_steps.push(Some(m.steps));
                    moment_tensors.push((format!("adam.m/{name}"), Tensor::vector(m.m.clone())));
                    moment_tensors.push((format!("adam.v/{name}"), Tensor::vector(m.v.clone())));
                }
                None => adam_steps.push(None),
            }
        }
        let meta = serde_json::to_value(CheckpointMeta {
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            phase: self.phase,
            history: self.history.clone(),
            adam_step: self.adam.step_count(),
            adam_steps,
        })?;
        let mut c = self.model.to_container(meta)?;
        c.tensors.extend(moment_tensors);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (model, extra) = RetrievalModel::from_container(c)?;
        let meta: CheckpointMeta = serde_json::from_value(extra)?;
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        if meta.adam_steps.len() != names.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        let mut moments = Vec::with_capacity(names.len());
        for (name, steps) in names.iter().zip(&meta.adam_steps) {
            moments.push(match steps {
                Some(steps) => {
                    let get = |kind: &str| {
                        c.get(&format!("adam.{kind}/{name}"))
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| Error::Format(format!("missing optimizer moment for `{name}`")))
                    };
                    Some(Moments {
                        m: get("m")?,
                        v: get("v")?,
                        steps: *steps,
                    })
                }
                None => None,
            });
        }
        let adam = Adam::restore(meta.train_config.adam, meta.adam_step, moments);
        Ok(Checkpoint {
            model,
            adam,
            train_config: meta.train_config,
            epoch: meta.epoch,
            phase: meta.phase,
            history: meta.history,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Trains one configuration and evaluates it on the test split.
pub fn train_and_evaluate(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Checkpoint, EvalReport)> {
    let data = TrainData::from_corpus(corpus, &cfg.model.feature_blocks)?;
    let vocab = data.vocab.clone();
    let ckpt = Trainer::new(cfg.clone(), &corpus.config, data)?.train_two_phase()?;
    let test = encode_records(&corpus.test, &vocab, &cfg.model.feature_blocks);
    let report = evaluate_split(&ckpt.model, &test, corpus.config.rounds)?;
    Ok((ckpt, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub report: EvalReport,
}

/// Configurations compared against each other: the proposed model, the
/// basic model, the basic model with L2 loss and the flat LSTM.
pub fn baseline_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    use crate::dialog_model::EncoderVariant;
    let with = |variant: EncoderVariant, feat_loss: FeatLossKind| {
        let mut c = base.clone();
        c.model.variant = variant;
        c.feat_loss = feat_loss;
        c
    };
    vec![
        ("proposed".into(), with(EncoderVariant::Proposed, FeatLossKind::Ranking)),
        ("basic".into(), with(EncoderVariant::Basic, FeatLossKind::Ranking)),
        ("basic+l2".into(), with(EncoderVariant::Basic, FeatLossKind::L2)),
        ("flat".into(), with(EncoderVariant::Flat, FeatLossKind::Ranking)),
    ]
}

pub fn run_baseline_suite(corpus: &Corpus, base: &TrainConfig) -> Result<Vec<BaselineRow>> {
    baseline_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            log::info!("training {name}");
            let (_, report) = train_and_evaluate(corpus, &cfg)?;
            let last = report.last().clone();
            Ok(BaselineRow {
                name,
                r_at_1: last.r_at_1,
                r_at_5: last.r_at_5,
                r_at_10: last.r_at_10,
                mean_rank: last.mean_rank,
                report,
            })
        })
        .collect()
}

/// `name,R@1,R@5,R@10,MeanR` at the final round.
pub fn baseline_table_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("model,R@1,R@5,R@10,MeanR\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.r_at_1, r.r_at_5, r.r_at_10, r.mean_rank
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::dialog_model::EncoderVariant;
    use crate::numerics::grad_check_store;

    fn tiny_corpus(seed: u64, train: usize) -> Corpus {
        build_corpus(&CorpusConfig {
            train,
            val: 8,
            test: 8,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            phase1_epochs: 1,
            phase2_epochs: 1,
            seed,
            model: ModelConfig {
                word_dim: 4,
                hidden_dim: 4,
                decoder_hidden: 8,
                joint_dim: 5,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn trainer(seed: u64, cfg: TrainConfig, train: usize) -> Trainer {
        let corpus = tiny_corpus(seed, train);
        let data = TrainData::from_corpus(&corpus, &cfg.model.feature_blocks).unwrap();
        Trainer::new(cfg, &corpus.config, data).unwrap()
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::from_toml("batch_size = 8\n[model]\nvariant = \"flat\"\n").unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.model.variant, EncoderVariant::Flat);
        assert_eq!(cfg.loss.b, 1000.0);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("batch_size = 1").is_err());
        assert!(TrainConfig::from_toml("[model]\nvariant = \"deep\"").is_err());
    }

    #[test]
    fn batches_have_distinct_samples() {
        let c = tiny_corpus(0, 64);
        let vocab = c.vocabulary().unwrap();
        let samples = encode_records(&c.train, &vocab, &FeatureBlock::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&samples, 32, RoundSampling::Uniform, &mut rng).unwrap();
        let ids: std::collections::HashSet<_> = b.iter().map(|i| i.sample).collect();
        assert_eq!(ids.len(), 32);
        let f = make_batch(&samples, 8, RoundSampling::Final, &mut rng).unwrap();
        assert!(f.iter().all(|i| i.round == 10));
        assert!(make_batch(&samples, 65, RoundSampling::Final, &mut rng).is_err());
    }

    #[test]
    fn uniform_rounds_are_uniform() {
        let c = tiny_corpus(1, 20);
        let vocab = c.vocabulary().unwrap();
        let samples = encode_records(&c.train, &vocab, &FeatureBlock::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        let mut draws = 0;
        while draws < 10_000 {
            for item in make_batch(&samples, 10, RoundSampling::Uniform, &mut rng).unwrap() {
                counts[item.round] += 1;
                draws += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.1).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut cfg = tiny_config(2);
        cfg.loss.a = 0.0;
        cfg.loss.b = 0.0;
        let mut t = trainer(2, cfg.clone(), 8);
        let before = t.model.params.named_values();
        let batch = items_for(&t.data.train, &[0, 1, 2, 3], RoundSampling::Uniform, &mut t.rng).unwrap();
        train_step(&mut t.model, &mut t.adam, &t.data.train, &batch, &cfg).unwrap();
        assert_eq!(before, t.model.params.named_values());
    }

    #[test]
    fn phase_one_freezes_joint_maps() {
        let mut t = trainer(3, tiny_config(3), 16);
        let ve = t.model.params.group_snapshot(VIDEO_EMBEDDING);
        let de = t.model.params.group_snapshot(DIALOG_EMBEDDING);
        let enc = t.model.params.group_snapshot(crate::model::HISTORY_ENCODER);
        t.run_epoch(1).unwrap();
        t.run_epoch(1).unwrap();
        assert_eq!(ve, t.model.params.group_snapshot(VIDEO_EMBEDDING));
        assert_eq!(de, t.model.params.group_snapshot(DIALOG_EMBEDDING));
        assert_ne!(enc, t.model.params.group_snapshot(crate::model::HISTORY_ENCODER));
        t.run_epoch(2).unwrap();
        assert_ne!(ve, t.model.params.group_snapshot(VIDEO_EMBEDDING));
        assert_ne!(de, t.model.params.group_snapshot(DIALOG_EMBEDDING));
    }

    #[test]
    fn loss_decreases_on_a_tiny_corpus() {
        let mut improved = 0;
        for seed in 0..3 {
            let mut cfg = tiny_config(seed);
            cfg.adam.lr = 0.01;
            let mut t = trainer(seed, cfg.clone(), 20);
            t.set_phase(2);
            let mut totals = Vec::new();
            for _ in 0..50 {
                let batch = make_batch(&t.data.train, 4, RoundSampling::Uniform, &mut t.rng).unwrap();
                totals.push(
                    train_step(&mut t.model, &mut t.adam, &t.data.train, &batch, &cfg)
                        .unwrap()
                        .total,
                );
            }
            let head: f64 = totals[..10].iter().sum();
            let tail: f64 = totals[40..].iter().sum();
            if tail < head {
                improved += 1;
            }
        }
        assert!(improved >= 2);
    }

    #[test]
    fn same_seed_same_curve() {
        let run = || {
            let mut t = trainer(4, tiny_config(4), 12);
            t.run_epoch(1).unwrap();
            t.run_epoch(2).unwrap();
            t.log.iter().map(|l| l.total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_pipeline_gradient() {
        for variant in EncoderVariant::ALL {
            let mut cfg = tiny_config(5);
            cfg.model.variant = variant;
            let mut t = trainer(5, cfg.clone(), 8);
            let batch = items_for(&t.data.train, &[0, 1, 2, 3], RoundSampling::Uniform, &mut t.rng).unwrap();
            let model = t.model.clone();
            let samples = t.data.train.clone();
            let err = grad_check_store(&mut t.model.params, 6, |tape, store| {
                Ok(batch_loss(tape, &model, store, &samples, &batch, &cfg)?.total)
            })
            .unwrap();
            assert!(err < 1e-4, "{variant}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut t = trainer(6, tiny_config(6), 8);
        t.run_epoch(1).unwrap();
        t.run_epoch(2).unwrap();
        let ckpt = t.into_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 2);
        assert_eq!(back.phase, 2);
        assert_eq!(back.history, ckpt.history);
        assert_eq!(back.model.params.named_values(), ckpt.model.params.named_values());
        assert_eq!(back.adam.step_count(), ckpt.adam.step_count());
        for i in 0..ckpt.model.params.len() {
            assert_eq!(back.adam.moments(i), ckpt.adam.moments(i));
        }
        let corpus = tiny_corpus(6, 8);
        let samples = encode_records(&corpus.test, &ckpt.model.vocab, &FeatureBlock::ALL);
        let a = evaluate_split(&ckpt.model, &samples, 10).unwrap();
        let b = evaluate_split(&back.model, &samples, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log_csv(
            &p,
            &[StepLosses {
                step: 1,
                dialog_loss: 2.0,
                feat_loss: 0.5,
                total: 504.0,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "step,dialog_loss,feat_loss,total\n1,2,0.5,504\n");
    }

    #[test]
    fn baseline_suite_has_four_rows() {
        let corpus = tiny_corpus(7, 8);
        let rows = run_baseline_suite(&corpus, &tiny_config(7)).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["proposed", "basic", "basic+l2", "flat"]);
        let csv = baseline_table_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().all(|l| l.split(',').count() == 5));
        assert_eq!(rows[2].report.rounds.len(), 11);
    }
}
