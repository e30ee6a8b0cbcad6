//! The full retrieval model: word embedding, history encoder, the two joint
//! embedding maps and the question decoder, all in one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureBlock, Features};
use crate::dialog_model::{
    CachedState, DialogRound, DialogState, EncoderState, EncoderVariant, HistoryEncoder, QuestionDecoder,
};
use crate::error::{Error, Result};
use crate::joint_embedding::Affine;
use crate::numerics::{Container, ParamId, ParamStore, Tape, Var};
use crate::text::{self, TokenSequence, Vocabulary};

pub const WORD_EMBEDDING: &str = "word_embedding";
pub const HISTORY_ENCODER: &str = "history_encoder";
pub const DIALOG_EMBEDDING: &str = "dialog_embedding";
pub const VIDEO_EMBEDDING: &str = "video_embedding";
pub const QUESTION_DECODER: &str = "question_decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: EncoderVariant,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub decoder_hidden: usize,
    pub joint_dim: usize,
    pub feature_blocks: Vec<FeatureBlock>,
    pub feature_dim: usize,
    pub max_question_len: usize,
}

impl Default for ModelConfig {
    /// Desk-scale widths. The decoder is twice the encoder hidden size so the
    /// proposed history vector feeds it without a projection.
    fn default() -> Self {
        ModelConfig {
            variant: EncoderVariant::Proposed,
            word_dim: 32,
            hidden_dim: 64,
            decoder_hidden: 128,
            joint_dim: 64,
            feature_blocks: FeatureBlock::ALL.to_vec(),
            feature_dim: 200,
            max_question_len: 20,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 300-d words, 512-d encoders, 1024-d decoder and
    /// joint space.
    pub fn full_size() -> Self {
        ModelConfig {
            word_dim: 300,
            hidden_dim: 512,
            decoder_hidden: 1024,
            joint_dim: 1024,
            ..Self::default()
        }
    }

    pub fn history_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Proposed => 2 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_dim,
            self.hidden_dim,
            self.decoder_hidden,
            self.joint_dim,
            self.feature_dim,
            self.max_question_len,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if self.feature_blocks.is_empty() {
            return Err(Error::invalid("no feature blocks selected"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: HistoryEncoder,
    pub decoder: QuestionDecoder,
    pub dialog_emb: Affine,
    pub video_emb: Affine,
}

impl RetrievalModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = params.register(
            "word_embedding",
            WORD_EMBEDDING,
            text::init_embedding(vocab.len(), config.word_dim, &mut rng),
        )?;
        let encoder = HistoryEncoder::register(
            &mut params,
            HISTORY_ENCODER,
            config.variant,
            config.word_dim,
            config.hidden_dim,
            &mut rng,
        )?;
        let history_dim = encoder.output_dim();
        let decoder = QuestionDecoder::register(
            &mut params,
            QUESTION_DECODER,
            history_dim,
            config.word_dim,
            config.decoder_hidden,
            vocab.len(),
            &mut rng,
        )?;
        let dialog_emb = Affine::register(
            &mut params,
            "dialog_emb",
            DIALOG_EMBEDDING,
            history_dim,
            config.joint_dim,
            &mut rng,
        )?;
        let video_emb = Affine::register(
            &mut params,
            "video_emb",
            VIDEO_EMBEDDING,
            config.feature_dim,
            config.joint_dim,
            &mut rng,
        )?;
        Ok(RetrievalModel {
            config,
            vocab,
            params,
            embedding,
            encoder,
            decoder,
            dialog_emb,
            video_emb,
        })
    }

    pub fn video_input(&self, features: &Features) -> Vec<f64> {
        features.select(&self.config.feature_blocks)
    }

    fn embedding_var(&self, tape: &mut Tape) -> Var {
        tape.param(&self.params, self.embedding)
    }

    /// Joint-space embedding of a pooled feature vector.
    pub fn embed_video(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let x = tape.constant(crate::Tensor::vector(features.to_vec()));
        let y = self.video_emb.forward(&mut tape, &self.params, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Encoder state after the caption alone.
    pub fn begin_dialog(&self, caption: &TokenSequence) -> Result<CachedState> {
        let mut tape = Tape::inference();
        let emb = self.embedding_var(&mut tape);
        let st = self.encoder.begin(&mut tape, &self.params, emb, &caption.ids)?;
        Ok(st.cache(&tape))
    }

    pub fn push_round(&self, state: &CachedState, round: &DialogRound) -> Result<CachedState> {
        let mut tape = Tape::inference();
        let emb = self.embedding_var(&mut tape);
        let st = EncoderState::restore(&mut tape, state);
        let next = self.encoder.push_round(&mut tape, &self.params, emb, &st, round)?;
        Ok(next.cache(&tape))
    }

    pub fn history_vector(&self, state: &CachedState) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let st = EncoderState::restore(&mut tape, state);
        let s = self.encoder.history_vector(&mut tape, &st)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Joint-space embedding of the dialog held in `state`.
    pub fn embed_state(&self, state: &CachedState) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let st = EncoderState::restore(&mut tape, state);
        let s = self.encoder.history_vector(&mut tape, &st)?;
        let y = self.dialog_emb.forward(&mut tape, &self.params, s)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Full re-encode of a dialog into the joint space.
    pub fn embed_dialog(&self, dialog: &DialogState) -> Result<Vec<f64>> {
        let mut state = self.begin_dialog(&dialog.caption)?;
        for round in &dialog.rounds {
            state = self.push_round(&state, round)?;
        }
        self.embed_state(&state)
    }

    /// Greedy next question for the dialog held in `state`.
    pub fn generate_question(&self, state: &CachedState) -> Result<TokenSequence> {
        let mut tape = Tape::inference();
        let emb = self.embedding_var(&mut tape);
        let st = EncoderState::restore(&mut tape, state);
        let s = self.encoder.history_vector(&mut tape, &st)?;
        let ids = self
            .decoder
            .greedy(&mut tape, &self.params, emb, s, self.config.max_question_len)?;
        let source_text = self.vocab.decode_text(&ids);
        Ok(TokenSequence { ids, source_text })
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        Ok(Container::new(
            self.params.named_values(),
            serde_json::json!({
                "model": self.config,
                "vocab": self.vocab.tokens(),
                "extra": extra,
            }),
        ))
    }

    /// Rebuilds a model from a container written by [`to_container`](Self::to_container),
    /// returning it with the container's extra metadata.
    pub fn from_container(container: &Container) -> Result<(Self, serde_json::Value)> {
        let meta = &container.meta;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Format("missing model config".into()))?,
        )?;
        let tokens: Vec<String> = serde_json::from_value(
            meta.get("vocab")
                .cloned()
                .ok_or_else(|| Error::Format("missing vocabulary".into()))?,
        )?;
        let mut model = RetrievalModel::new(config, Vocabulary::from_tokens(tokens)?, 0)?;
        model.params.load_named(&container.tensors)?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container(serde_json::Value::Null)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_container(&Container::load(path)?)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn vocab() -> Vocabulary {
        let corpus = [tokenize(
            "a man reading a book in the kitchen what is the person doing ? they are reading",
        )];
        Vocabulary::build(corpus.iter().map(Vec::as_slice), 1).unwrap()
    }

    fn tiny(variant: EncoderVariant) -> ModelConfig {
        ModelConfig {
            variant,
            word_dim: 4,
            hidden_dim: 5,
            decoder_hidden: 10,
            joint_dim: 6,
            feature_dim: 7,
            ..ModelConfig::default()
        }
    }

    fn dialog(v: &Vocabulary) -> DialogState {
        let mut d = DialogState::new(v.encode_text("a man reading a book in the kitchen"));
        d.rounds.push(DialogRound {
            question: v.encode_text("what is the person doing ?"),
            answer: v.encode_text("they are reading"),
        });
        d
    }

    #[test]
    fn groups_are_registered() {
        let m = RetrievalModel::new(tiny(EncoderVariant::Proposed), vocab(), 1).unwrap();
        let groups = m.params.groups();
        for g in [
            WORD_EMBEDDING,
            HISTORY_ENCODER,
            DIALOG_EMBEDDING,
            VIDEO_EMBEDDING,
            QUESTION_DECODER,
        ] {
            assert!(groups.contains(g), "{g}");
        }
        assert!(m.decoder.init.is_none());
        let basic = RetrievalModel::new(tiny(EncoderVariant::Basic), vocab(), 1).unwrap();
        assert!(basic.decoder.init.is_some());
    }

    #[test]
    fn save_load_reproduces_outputs_bitwise() {
        let v = vocab();
        for variant in EncoderVariant::ALL {
            let m = RetrievalModel::new(tiny(variant), v.clone(), 3).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.bin");
            m.save(&path).unwrap();
            let back = RetrievalModel::load(&path).unwrap();
            let d = dialog(&v);
            assert_eq!(m.embed_dialog(&d).unwrap(), back.embed_dialog(&d).unwrap());
            let f = vec![0.3; 7];
            assert_eq!(m.embed_video(&f).unwrap(), back.embed_video(&f).unwrap());
            let st = m.begin_dialog(&d.caption).unwrap();
            assert_eq!(m.generate_question(&st).unwrap(), back.generate_question(&st).unwrap());
        }
    }

    #[test]
    fn seeds_change_initialisation() {
        let a = RetrievalModel::new(tiny(EncoderVariant::Proposed), vocab(), 1).unwrap();
        let b = RetrievalModel::new(tiny(EncoderVariant::Proposed), vocab(), 2).unwrap();
        let d = dialog(&vocab());
        assert_ne!(a.embed_dialog(&d).unwrap(), b.embed_dialog(&d).unwrap());
    }

    #[test]
    fn video_dimension_is_checked() {
        let m = RetrievalModel::new(tiny(EncoderVariant::Flat), vocab(), 1).unwrap();
        assert!(m.embed_video(&[1.0; 6]).is_err());
    }

    #[test]
    fn zero_width_is_rejected() {
        let cfg = ModelConfig {
            joint_dim: 0,
            ..ModelConfig::default()
        };
        assert!(RetrievalModel::new(cfg, vocab(), 0).is_err());
    }
}
