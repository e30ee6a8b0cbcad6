//! Synthetic corpus of near-duplicate "videos".
//!
//! Each video is a [`SceneSpec`] drawn from a small attribute grammar. Its
//! features are a sum of per-attribute signature vectors over a few frames
//! plus Gaussian noise, max-pooled over time inside three blocks that stand
//! in for motion, appearance and audio descriptors. Captions and dialogs are
//! rendered from templates, so answers carry exactly the attributes that
//! separate similar videos.

pub mod grammar;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dialog_model::{DialogRound, DialogState};
use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSequence, Vocabulary};

pub use grammar::{
    gen_caption, gen_dialog, oracle_answer, parse_caption, parse_question, sample_scene, Attribute, QaPair,
    QuestionTemplate, SceneSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBlock {
    Motion,
    Appearance,
    Audio,
}

impl FeatureBlock {
    pub const ALL: [FeatureBlock; 3] = [Self::Motion, Self::Appearance, Self::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Self::Motion => "motion",
            Self::Appearance => "appearance",
            Self::Audio => "audio",
        }
    }

    /// Block that carries an attribute's signature.
    pub fn of(attr: Attribute) -> FeatureBlock {
        match attr {
            Attribute::Location | Attribute::Prop => Self::Appearance,
            Attribute::Audio => Self::Audio,
            _ => Self::Motion,
        }
    }
}

impl fmt::Display for FeatureBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature block `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub motion_dim: usize,
    pub appearance_dim: usize,
    pub audio_dim: usize,
    pub noise_sigma: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub frames: usize,
    pub rounds: usize,
    /// Near-duplicate group size within a split.
    pub group_size: usize,
    /// Probability that a sibling keeps the group's location, and separately
    /// its actor count.
    pub keep_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            motion_dim: 64,
            appearance_dim: 128,
            audio_dim: 8,
            noise_sigma: 0.1,
            train: 2000,
            val: 200,
            test: 200,
            seed: 0,
            frames: 8,
            rounds: 10,
            group_size: 20,
            keep_prob: 0.9,
        }
    }
}

impl CorpusConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CorpusConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("corpus config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn block_dim(&self, block: FeatureBlock) -> usize {
        match block {
            FeatureBlock::Motion => self.motion_dim,
            FeatureBlock::Appearance => self.appearance_dim,
            FeatureBlock::Audio => self.audio_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for block in FeatureBlock::ALL {
            let values: usize = Attribute::ALL
                .iter()
                .filter(|&&a| FeatureBlock::of(a) == block)
                .map(|a| a.values().len())
                .sum();
            if self.block_dim(block) < values {
                return Err(Error::invalid(format!(
                    "{block} block needs at least {values} dims, got {}",
                    self.block_dim(block)
                )));
            }
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if self.frames == 0 || self.group_size == 0 {
            return Err(Error::invalid("frames and group_size must be positive"));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Error::invalid("corpus has no records"));
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::invalid("keep_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Max-pooled feature blocks of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub motion: Vec<f64>,
    pub appearance: Vec<f64>,
    pub audio: Vec<f64>,
}

impl Features {
    pub fn block(&self, block: FeatureBlock) -> &[f64] {
        match block {
            FeatureBlock::Motion => &self.motion,
            FeatureBlock::Appearance => &self.appearance,
            FeatureBlock::Audio => &self.audio,
        }
    }

    fn block_mut(&mut self, block: FeatureBlock) -> &mut Vec<f64> {
        match block {
            FeatureBlock::Motion => &mut self.motion,
            FeatureBlock::Appearance => &mut self.appearance,
            FeatureBlock::Audio => &mut self.audio,
        }
    }

    /// Concatenation of the chosen blocks in the given order.
    pub fn select(&self, blocks: &[FeatureBlock]) -> Vec<f64> {
        blocks.iter().flat_map(|&b| self.block(b).iter().copied()).collect()
    }

    pub fn concat(&self) -> Vec<f64> {
        self.select(&FeatureBlock::ALL)
    }
}

/// Seeded signature of every attribute value: a unit-norm, non-negative
/// vector on a coordinate slice of its block that no other value uses.
#[derive(Clone, Debug)]
pub struct SignatureTable {
    entries: BTreeMap<(Attribute, String), (FeatureBlock, usize, Vec<f64>)>,
}

impl SignatureTable {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
        let mut entries = BTreeMap::new();
        for block in FeatureBlock::ALL {
            let attrs: Vec<Attribute> = Attribute::ALL
                .into_iter()
                .filter(|&a| FeatureBlock::of(a) == block)
                .collect();
            let count: usize = attrs.iter().map(|a| a.values().len()).sum();
            let width = cfg.block_dim(block) / count;
            let mut start = 0;
            for attr in attrs {
                for value in attr.values() {
                    let mut sig: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng).abs()).collect();
                    let norm = sig.iter().map(|x| x * x).sum::<f64>().sqrt();
                    sig.iter_mut().for_each(|x| *x /= norm);
                    entries.insert((attr, value), (block, start, sig));
                    start += width;
                }
            }
        }
        Ok(SignatureTable { entries })
    }

    fn get(&self, attr: Attribute, value: &str) -> &(FeatureBlock, usize, Vec<f64>) {
        self.entries
            .get(&(attr, value.to_string()))
            .expect("scene values come from the grammar")
    }
}

/// Per-frame features and their pooled summary.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub frames: Vec<Features>,
    pub pooled: Features,
}

/// Frames in which an attribute's signature is present.
fn active_frames(attr: Attribute, frames: usize) -> std::ops::Range<usize> {
    let edge = (frames / 4).max(1);
    match attr {
        Attribute::PreAction => 0..edge,
        Attribute::PostAction => frames - edge..frames,
        _ => 0..frames,
    }
}

pub fn synth_features<R: Rng + ?Sized>(
    scene: &SceneSpec,
    table: &SignatureTable,
    cfg: &CorpusConfig,
    rng: &mut R,
) -> Result<SynthVideo> {
    scene.validate()?;
    let empty = Features {
        motion: vec![0.0; cfg.motion_dim],
        appearance: vec![0.0; cfg.appearance_dim],
        audio: vec![0.0; cfg.audio_dim],
    };
    let mut frames = vec![empty; cfg.frames];
    for attr in Attribute::ALL {
        let (block, start, sig) = table.get(attr, &scene.value(attr));
        for f in active_frames(attr, cfg.frames) {
            let dst = frames[f].block_mut(*block);
            for (k, s) in sig.iter().enumerate() {
                dst[start + k] += s;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for frame in &mut frames {
            for block in FeatureBlock::ALL {
                for x in frame.block_mut(block) {
                    *x += noise.sample(rng);
                }
            }
        }
    }
    let mut pooled = frames[0].clone();
    for frame in &frames[1..] {
        for block in FeatureBlock::ALL {
            for (p, x) in pooled.block_mut(block).iter_mut().zip(frame.block(block)) {
                *p = p.max(*x);
            }
        }
    }
    Ok(SynthVideo { frames, pooled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub scene: SceneSpec,
    pub caption: String,
    pub dialog: Vec<QaPair>,
    pub features: Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

/// Generates all three splits. Scenes are unique across the corpus; each
/// split is made of groups of near-duplicate scenes sharing action and prop.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let table = SignatureTable::new(cfg)?;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut seen: HashSet<SceneSpec> = HashSet::new();
    let mut make_split = |split: Split, n: usize| -> Result<Vec<VideoRecord>> {
        let mut out = Vec::with_capacity(n);
        let mut base: Option<SceneSpec> = None;
        for i in 0..n {
            let mut tries = 0;
            let scene = loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::invalid("scene grammar exhausted"));
                }
                let s = match &base {
                    Some(b) if i % cfg.group_size != 0 => grammar::sample_sibling(b, cfg.keep_prob, &mut scene_rng),
                    _ => sample_scene(&mut scene_rng),
                };
                if seen.insert(s.clone()) {
                    break s;
                }
            };
            if i % cfg.group_size == 0 {
                base = Some(scene.clone());
            }
            let dialog = gen_dialog(&scene, cfg.rounds, &mut scene_rng)?;
            let video = synth_features(&scene, &table, cfg, &mut noise_rng)?;
            out.push(VideoRecord {
                id: format!("{}-{i:04}", split.name()),
                caption: gen_caption(&scene),
                scene,
                dialog,
                features: video.pooled,
            });
        }
        Ok(out)
    };
    let train = make_split(Split::Train, cfg.train)?;
    let val = make_split(Split::Val, cfg.val)?;
    let test = make_split(Split::Test, cfg.test)?;
    Ok(Corpus {
        config: cfg.clone(),
        train,
        val,
        test,
    })
}

fn write_jsonl(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<VideoRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[VideoRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let ids = |rs: &[VideoRecord]| rs.iter().map(|r| r.id.clone()).collect();
        Manifest {
            config: self.config.clone(),
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            write_jsonl(&dir.join(format!("{}.jsonl", split.name())), self.split(split))?;
        }
        let mut manifest = serde_json::to_string_pretty(&self.manifest())?;
        manifest.push('\n');
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            splits.push(read_jsonl(&dir.join(format!("{}.jsonl", split.name())))?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Corpus {
            config: manifest.config,
            train,
            val,
            test,
        })
    }

    /// Vocabulary over the training captions, questions and answers.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let seqs: Vec<Vec<String>> = self
            .train
            .iter()
            .flat_map(|r| {
                std::iter::once(tokenize(&r.caption))
                    .chain(r.dialog.iter().flat_map(|qa| [tokenize(&qa.q), tokenize(&qa.a)]))
            })
            .collect();
        Vocabulary::build(seqs.iter().map(Vec::as_slice), 1)
    }

    pub fn find(&self, id: &str) -> Option<&VideoRecord> {
        Split::ALL.into_iter().flat_map(|s| self.split(s)).find(|r| r.id == id)
    }
}

/// A record in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub caption: TokenSequence,
    pub rounds: Vec<DialogRound>,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn encode(record: &VideoRecord, vocab: &Vocabulary, blocks: &[FeatureBlock]) -> Self {
        Sample {
            id: record.id.clone(),
            caption: vocab.encode_text(&record.caption),
            rounds: record
                .dialog
                .iter()
                .map(|qa| DialogRound {
                    question: vocab.encode_text(&qa.q),
                    answer: vocab.encode_text(&qa.a),
                })
                .collect(),
            features: record.features.select(blocks),
        }
    }

    pub fn dialog(&self, t: usize) -> DialogState {
        DialogState {
            caption: self.caption.clone(),
            rounds: self.rounds[..t.min(self.rounds.len())].to_vec(),
        }
    }
}

pub fn encode_records(records: &[VideoRecord], vocab: &Vocabulary, blocks: &[FeatureBlock]) -> Vec<Sample> {
    records.iter().map(|r| Sample::encode(r, vocab, blocks)).collect()
}
