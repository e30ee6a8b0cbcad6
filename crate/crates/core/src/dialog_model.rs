//! History encoder and question decoder.
//!
//! The hierarchical encoder runs a sentence-level LSTM over the caption and
//! over each round (question and answer joined by `SEP`), then feeds those
//! sentence features through a state-level LSTM. The flat baseline runs a
//! single LSTM over every token of the history.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{self, TokenSequence, EOS, PAD, SEP, SOS, UNK};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogRound {
    pub question: TokenSequence,
    pub answer: TokenSequence,
}

impl DialogRound {
    /// `question SEP answer`.
    pub fn sentence_ids(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.question.len() + self.answer.len() + 1);
        ids.extend_from_slice(&self.question.ids);
        ids.push(SEP);
        ids.extend_from_slice(&self.answer.ids);
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogState {
    pub caption: TokenSequence,
    pub rounds: Vec<DialogRound>,
}

impl DialogState {
    pub fn new(caption: TokenSequence) -> Self {
        DialogState {
            caption,
            rounds: Vec::new(),
        }
    }

    pub fn t(&self) -> usize {
        self.rounds.len()
    }

    /// The state after the first `t` rounds.
    pub fn truncated(&self, t: usize) -> DialogState {
        DialogState {
            caption: self.caption.clone(),
            rounds: self.rounds[..t.min(self.rounds.len())].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// Final state-encoder hidden concatenated with its step-0 output.
    Proposed,
    /// Final state-encoder hidden only.
    Basic,
    /// One LSTM over all history tokens.
    Flat,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [Self::Proposed, Self::Basic, Self::Flat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Basic => "basic",
            Self::Flat => "flat",
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown encoder variant `{s}`")))
    }
}

/// Single-layer LSTM cell. Gate blocks are laid out `[input, forget, output, candidate]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let g = 4 * hidden_dim;
        Ok(LstmCell {
            wx: store.register(
                &format!("{prefix}.wx"),
                group,
                Tensor::uniform(&[input_dim, g], bound, rng),
            )?,
            wh: store.register(
                &format!("{prefix}.wh"),
                group,
                Tensor::uniform(&[hidden_dim, g], bound, rng),
            )?,
            b: store.register(&format!("{prefix}.b"), group, Tensor::uniform(&[g], bound, rng))?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(&[self.hidden_dim]));
        let c = tape.constant(Tensor::zeros(&[self.hidden_dim]));
        (h, c)
    }

    /// One step from a precomputed `x Wx + b`.
    fn step_projected(&self, tape: &mut Tape, store: &ParamStore, xproj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = tape.param(store, self.wh);
        let hh = tape.matmul(h, wh)?;
        let gates = tape.add(xproj, hh)?;
        let n = self.hidden_dim;
        let i = tape.slice(gates, 0, n)?;
        let f = tape.slice(gates, n, 2 * n)?;
        let o = tape.slice(gates, 2 * n, 3 * n)?;
        let g = tape.slice(gates, 3 * n, 4 * n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = tape.param(store, self.wx);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, wx)?;
        let xproj = tape.add(xw, b)?;
        self.step_projected(tape, store, xproj, h, c)
    }

    /// Runs over the rows of `xs` (`[len, input_dim]`); returns every hidden
    /// state and the final cell state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: Var, h0: Var, c0: Var) -> Result<(Vec<Var>, Var)> {
        let wx = tape.param(store, self.wx);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(xs, wx)?;
        let xproj = tape.add(xw, b)?;
        let len = tape.value(xs).rows();
        let (mut h, mut c) = (h0, c0);
        let mut hs = Vec::with_capacity(len);
        for r in 0..len {
            let xr = tape.row(xproj, r)?;
            (h, c) = self.step_projected(tape, store, xr, h, c)?;
            hs.push(h);
        }
        Ok((hs, c))
    }
}

/// Final hidden state of `cell` run over the embedded tokens.
pub fn encode_sentence(
    tape: &mut Tape,
    store: &ParamStore,
    embedding: Var,
    cell: &LstmCell,
    ids: &[u32],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    let xs = text::embed_tokens(tape, embedding, ids)?;
    let (h0, c0) = cell.zero_state(tape);
    let (hs, _) = cell.run(tape, store, xs, h0, c0)?;
    Ok(*hs.last().expect("non-empty"))
}

/// Encoder state bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    pub h: Var,
    pub c: Var,
    /// State-encoder output at step 0 (hierarchical variants).
    pub first: Option<Var>,
    pub rounds: usize,
}

/// Tape-free snapshot of an [`EncoderState`], used to continue encoding
/// across requests.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub first: Option<Vec<f64>>,
    pub rounds: usize,
}

impl EncoderState {
    pub fn cache(&self, tape: &Tape) -> CachedState {
        CachedState {
            h: tape.value(self.h).data().to_vec(),
            c: tape.value(self.c).data().to_vec(),
            first: self.first.map(|f| tape.value(f).data().to_vec()),
            rounds: self.rounds,
        }
    }

    pub fn restore(tape: &mut Tape, cached: &CachedState) -> Self {
        EncoderState {
            h: tape.constant(Tensor::vector(cached.h.clone())),
            c: tape.constant(Tensor::vector(cached.c.clone())),
            first: cached.first.as_ref().map(|f| tape.constant(Tensor::vector(f.clone()))),
            rounds: cached.rounds,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    pub variant: EncoderVariant,
    /// Sentence encoder; for the flat variant, the single history LSTM.
    pub sentence: LstmCell,
    pub state: Option<LstmCell>,
}

impl HistoryEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: &str,
        variant: EncoderVariant,
        word_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sentence = LstmCell::register(store, "history.sentence", group, word_dim, hidden_dim, rng)?;
        let state = match variant {
            EncoderVariant::Flat => None,
            _ => Some(LstmCell::register(
                store,
                "history.state",
                group,
                hidden_dim,
                hidden_dim,
                rng,
            )?),
        };
        Ok(HistoryEncoder {
            variant,
            sentence,
            state,
        })
    }

    pub fn output_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Proposed => 2 * self.sentence.hidden_dim,
            _ => self.sentence.hidden_dim,
        }
    }

    fn state_cell(&self) -> &LstmCell {
        self.state.as_ref().expect("hierarchical variant has a state encoder")
    }

    /// Round 0: the caption alone.
    pub fn begin(&self, tape: &mut Tape, store: &ParamStore, embedding: Var, caption: &[u32]) -> Result<EncoderState> {
        if caption.is_empty() {
            return Err(Error::invalid("caption is empty"));
        }
        match self.variant {
            EncoderVariant::Flat => {
                let (h0, c0) = self.sentence.zero_state(tape);
                self.flat_continue(tape, store, embedding, caption, h0, c0, 0)
            }
            _ => {
                let f0 = encode_sentence(tape, store, embedding, &self.sentence, caption)?;
                let cell = self.state_cell();
                let (h0, c0) = cell.zero_state(tape);
                let (h, c) = cell.step(tape, store, f0, h0, c0)?;
                Ok(EncoderState {
                    h,
                    c,
                    first: Some(h),
                    rounds: 0,
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn flat_continue(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        ids: &[u32],
        h: Var,
        c: Var,
        rounds: usize,
    ) -> Result<EncoderState> {
        let xs = text::embed_tokens(tape, embedding, ids)?;
        let (hs, c) = self.sentence.run(tape, store, xs, h, c)?;
        Ok(EncoderState {
            h: *hs.last().expect("non-empty"),
            c,
            first: None,
            rounds,
        })
    }

    /// Extends the history by one round.
    pub fn push_round(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        state: &EncoderState,
        round: &DialogRound,
    ) -> Result<EncoderState> {
        let ids = round.sentence_ids();
        match self.variant {
            EncoderVariant::Flat => {
                let mut joined = Vec::with_capacity(ids.len() + 1);
                joined.push(SEP);
                joined.extend_from_slice(&ids);
                self.flat_continue(tape, store, embedding, &joined, state.h, state.c, state.rounds + 1)
            }
            _ => {
                let f = encode_sentence(tape, store, embedding, &self.sentence, &ids)?;
                let (h, c) = self.state_cell().step(tape, store, f, state.h, state.c)?;
                Ok(EncoderState {
                    h,
                    c,
                    first: state.first,
                    rounds: state.rounds + 1,
                })
            }
        }
    }

    pub fn history_vector(&self, tape: &mut Tape, state: &EncoderState) -> Result<Var> {
        match self.variant {
            EncoderVariant::Proposed => {
                let first = state
                    .first
                    .ok_or_else(|| Error::invalid("proposed encoder state lacks the step-0 output"))?;
                tape.concat(&[state.h, first])
            }
            _ => Ok(state.h),
        }
    }

    /// Encodes the caption and every round of `dialog`.
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        dialog: &DialogState,
    ) -> Result<Var> {
        let mut st = self.begin(tape, store, embedding, &dialog.caption.ids)?;
        for round in &dialog.rounds {
            st = self.push_round(tape, store, embedding, &st, round)?;
        }
        self.history_vector(tape, &st)
    }
}

pub struct DecoderOutput {
    /// `[steps, vocab]` unnormalised scores.
    pub logits: Var,
    /// Mean negative log-likelihood over non-PAD targets.
    pub loss: Var,
}

/// LSTM decoder whose initial hidden state is the history vector, projected
/// when its width differs from the decoder's.
#[derive(Clone, Debug)]
pub struct QuestionDecoder {
    pub cell: LstmCell,
    pub init: Option<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab_size: usize,
}

impl QuestionDecoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: &str,
        history_dim: usize,
        word_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let cell = LstmCell::register(store, "decoder.cell", group, word_dim, hidden_dim, rng)?;
        let init = if history_dim != hidden_dim {
            Some((
                store.register(
                    "decoder.init.w",
                    group,
                    Tensor::uniform(&[history_dim, hidden_dim], bound, rng),
                )?,
                store.register("decoder.init.b", group, Tensor::uniform(&[hidden_dim], bound, rng))?,
            ))
        } else {
            None
        };
        let out_w = store.register(
            "decoder.out.w",
            group,
            Tensor::uniform(&[hidden_dim, vocab_size], bound, rng),
        )?;
        let out_b = store.register("decoder.out.b", group, Tensor::uniform(&[vocab_size], bound, rng))?;
        Ok(QuestionDecoder {
            cell,
            init,
            out_w,
            out_b,
            vocab_size,
        })
    }

    fn initial_hidden(&self, tape: &mut Tape, store: &ParamStore, s: Var) -> Result<Var> {
        match self.init {
            Some((w, b)) => {
                let w = tape.param(store, w);
                let b = tape.param(store, b);
                let p = tape.matmul(s, w)?;
                tape.add(p, b)
            }
            None => {
                if tape.value(s).len() != self.cell.hidden_dim {
                    return Err(Error::shape(
                        "decoder",
                        format!(
                            "history vector of width {} for decoder hidden {}",
                            tape.value(s).len(),
                            self.cell.hidden_dim
                        ),
                    ));
                }
                Ok(s)
            }
        }
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let w = tape.param(store, self.out_w);
        let b = tape.param(store, self.out_b);
        let l = tape.matmul(hidden, w)?;
        tape.add(l, b)
    }

    /// Teacher-forced pass over `gt` (framed `SOS .. EOS`).
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        s: Var,
        gt: &[u32],
    ) -> Result<DecoderOutput> {
        if gt.len() < 2 || gt[0] != SOS {
            return Err(Error::invalid("target question must start with SOS"));
        }
        if !gt.contains(&EOS) {
            return Err(Error::invalid("target question has no EOS"));
        }
        let inputs = &gt[..gt.len() - 1];
        let targets = &gt[1..];
        let xs = text::embed_tokens(tape, embedding, inputs)?;
        let h0 = self.initial_hidden(tape, store, s)?;
        let c0 = tape.constant(Tensor::zeros(&[self.cell.hidden_dim]));
        let (hs, _) = self.cell.run(tape, store, xs, h0, c0)?;
        let hidden = tape.stack_rows(&hs)?;
        let logits = self.project(tape, store, hidden)?;
        let logp = tape.log_softmax(logits);
        let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD).collect();
        if keep.is_empty() {
            return Err(Error::invalid("target question has no non-PAD tokens"));
        }
        let kept_targets: Vec<usize> = keep.iter().map(|&i| targets[i] as usize).collect();
        let rows = if keep.len() == targets.len() {
            logp
        } else {
            tape.gather_rows(logp, &keep)?
        };
        let picked = tape.pick_per_row(rows, &kept_targets)?;
        let mean = tape.mean(picked);
        let loss = tape.scale(mean, -1.0);
        Ok(DecoderOutput { logits, loss })
    }

    /// Argmax decoding from `SOS` until `EOS` or `max_len` tokens. Reserved
    /// tokens other than `EOS` are never emitted.
    pub fn greedy(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        s: Var,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut h = self.initial_hidden(tape, store, s)?;
        let mut c = tape.constant(Tensor::zeros(&[self.cell.hidden_dim]));
        let mut prev = SOS;
        let mut out = Vec::new();
        for _ in 0..max_len.max(1) {
            let x = text::embed_tokens(tape, embedding, &[prev])?;
            let x = tape.row(x, 0)?;
            (h, c) = self.cell.step(tape, store, x, h, c)?;
            let logits = self.project(tape, store, h)?;
            let next = argmax_allowed(tape.value(logits).data());
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }
}

fn argmax_allowed(logits: &[f64]) -> u32 {
    let banned = [PAD, SOS, UNK, SEP];
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if banned.contains(&(i as u32)) {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_store};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const WORD: usize = 5;
    const HID: usize = 4;
    const VOCAB: usize = 12;

    struct Fixture {
        store: ParamStore,
        emb: ParamId,
        enc: HistoryEncoder,
    }

    fn fixture(variant: EncoderVariant, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store
            .register("emb", "word", text::init_embedding(VOCAB, WORD, &mut rng))
            .unwrap();
        let enc = HistoryEncoder::register(&mut store, "he", variant, WORD, HID, &mut rng).unwrap();
        Fixture { store, emb, enc }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            source_text: String::new(),
        }
    }

    fn dialog(rounds: usize) -> DialogState {
        let mut d = DialogState::new(seq(&[5, 6, 7]));
        for r in 0..rounds {
            let r = r as u32;
            d.rounds.push(DialogRound {
                question: seq(&[8, 9 + (r % 3)]),
                answer: seq(&[5 + (r % 7), 11]),
            });
        }
        d
    }

    fn history(fx: &Fixture, d: &DialogState) -> Vec<f64> {
        let mut t = Tape::inference();
        let e = t.param(&fx.store, fx.emb);
        let s = fx.enc.encode_history(&mut t, &fx.store, e, d).unwrap();
        t.value(s).data().to_vec()
    }

    #[test]
    fn single_token_sentence_is_one_cell_step() {
        let fx = fixture(EncoderVariant::Basic, 1);
        let mut t = Tape::inference();
        let e = t.param(&fx.store, fx.emb);
        let f = encode_sentence(&mut t, &fx.store, e, &fx.enc.sentence, &[6]).unwrap();
        let x = text::embed_tokens(&mut t, e, &[6]).unwrap();
        let x = t.row(x, 0).unwrap();
        let (h0, c0) = fx.enc.sentence.zero_state(&mut t);
        let (h, _) = fx.enc.sentence.step(&mut t, &fx.store, x, h0, c0).unwrap();
        assert_eq!(t.value(f).data(), t.value(h).data());
    }

    #[test]
    fn empty_sentence_is_an_error() {
        let fx = fixture(EncoderVariant::Basic, 1);
        let mut t = Tape::inference();
        let e = t.param(&fx.store, fx.emb);
        assert!(encode_sentence(&mut t, &fx.store, e, &fx.enc.sentence, &[]).is_err());
    }

    #[test]
    fn identical_sentences_give_identical_features() {
        let fx = fixture(EncoderVariant::Basic, 2);
        let mut t = Tape::inference();
        let e = t.param(&fx.store, fx.emb);
        let a = encode_sentence(&mut t, &fx.store, e, &fx.enc.sentence, &[5, 9, 10]).unwrap();
        let b = encode_sentence(&mut t, &fx.store, e, &fx.enc.sentence, &[5, 9, 10]).unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn sentence_gradient_matches_finite_differences() {
        let mut fx = fixture(EncoderVariant::Basic, 3);
        let emb = fx.emb;
        let cell = fx.enc.sentence.clone();
        let err = grad_check_store(&mut fx.store, 1000, |t, store| {
            let e = t.param(store, emb);
            let f = encode_sentence(t, store, e, &cell, &[5, 7, 9])?;
            let sq = t.mul(f, f)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn history_vector_widths() {
        for (variant, width) in [
            (EncoderVariant::Proposed, 2 * HID),
            (EncoderVariant::Basic, HID),
            (EncoderVariant::Flat, HID),
        ] {
            let fx = fixture(variant, 4);
            assert_eq!(fx.enc.output_dim(), width);
            assert_eq!(history(&fx, &dialog(3)).len(), width);
        }
        assert!("lstm2".parse::<EncoderVariant>().is_err());
    }

    #[test]
    fn round_zero_halves_are_equal_for_proposed() {
        let fx = fixture(EncoderVariant::Proposed, 5);
        let s = history(&fx, &dialog(0));
        assert_eq!(s[..HID], s[HID..]);
    }

    #[test]
    fn caption_half_ignores_rounds() {
        let fx = fixture(EncoderVariant::Proposed, 6);
        let full = history(&fx, &dialog(4));
        let mut other = dialog(4);
        for r in &mut other.rounds {
            r.answer = seq(&[10, 10, 10]);
        }
        let perturbed = history(&fx, &other);
        assert_eq!(full[HID..], perturbed[HID..]);
        assert_ne!(full[..HID], perturbed[..HID]);
    }

    #[test]
    fn history_at_t_ignores_future_rounds() {
        let fx = fixture(EncoderVariant::Proposed, 7);
        let mut a = dialog(5);
        let s_a = history(&fx, &a.truncated(2));
        a.rounds[3].answer = seq(&[9, 9]);
        let s_b = history(&fx, &a.truncated(2));
        assert_eq!(s_a, s_b);
    }

    #[test]
    fn appending_a_round_changes_history() {
        for variant in EncoderVariant::ALL {
            let mut changed = 0;
            for seed in 0..100 {
                let fx = fixture(variant, 100 + seed);
                let d = dialog(3);
                if history(&fx, &d.truncated(2)) != history(&fx, &d) {
                    changed += 1;
                }
            }
            assert_eq!(changed, 100, "{variant}");
        }
    }

    #[test]
    fn incremental_encoding_matches_full_reencode() {
        for variant in EncoderVariant::ALL {
            let fx = fixture(variant, 8);
            let d = dialog(6);
            let mut tape = Tape::inference();
            let e = tape.param(&fx.store, fx.emb);
            let mut cached = fx
                .enc
                .begin(&mut tape, &fx.store, e, &d.caption.ids)
                .unwrap()
                .cache(&tape);
            for t in 1..=d.t() {
                let mut tape = Tape::inference();
                let e = tape.param(&fx.store, fx.emb);
                let st = EncoderState::restore(&mut tape, &cached);
                let st = fx
                    .enc
                    .push_round(&mut tape, &fx.store, e, &st, &d.rounds[t - 1])
                    .unwrap();
                let s = fx.enc.history_vector(&mut tape, &st).unwrap();
                let full = history(&fx, &d.truncated(t));
                for (x, y) in tape.value(s).data().iter().zip(&full) {
                    assert!((x - y).abs() < 1e-9);
                }
                cached = st.cache(&tape);
            }
        }
    }

    fn decoder_fixture(history_dim: usize, vocab: usize, seed: u64) -> (ParamStore, ParamId, QuestionDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store
            .register("emb", "word", text::init_embedding(vocab, WORD, &mut rng))
            .unwrap();
        let dec = QuestionDecoder::register(&mut store, "qd", history_dim, WORD, 2 * HID, vocab, &mut rng).unwrap();
        (store, emb, dec)
    }

    #[test]
    fn projection_only_when_widths_differ() {
        assert!(decoder_fixture(2 * HID, VOCAB, 1).2.init.is_none());
        assert!(decoder_fixture(HID, VOCAB, 1).2.init.is_some());
    }

    #[test]
    fn target_without_eos_is_rejected() {
        let (store, emb, dec) = decoder_fixture(2 * HID, VOCAB, 2);
        let mut t = Tape::new();
        let e = t.param(&store, emb);
        let s = t.constant(Tensor::zeros(&[2 * HID]));
        assert!(dec.teacher_forced(&mut t, &store, e, s, &[SOS, 6, 7]).is_err());
    }

    fn constant_logit_decoder(live: &[u32]) -> (ParamStore, ParamId, QuestionDecoder) {
        // zero output weights make every step's logits equal to the bias
        let (mut store, emb, dec) = decoder_fixture(2 * HID, VOCAB, 3);
        store.value_mut(dec.out_w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let bias = store.value_mut(dec.out_b).data_mut();
        bias.iter_mut().for_each(|x| *x = -1e6);
        for &i in live {
            bias[i as usize] = 0.0;
        }
        (store, emb, dec)
    }

    fn loss_of(store: &ParamStore, emb: ParamId, dec: &QuestionDecoder, target: &[u32]) -> f64 {
        let mut t = Tape::new();
        let e = t.param(store, emb);
        let s = t.constant(Tensor::zeros(&[2 * HID]));
        let out = dec.teacher_forced(&mut t, store, e, s, target).unwrap();
        t.value(out.loss).item().unwrap()
    }

    #[test]
    fn uniform_over_two_tokens_gives_log_two() {
        let (store, emb, dec) = constant_logit_decoder(&[7, EOS]);
        let loss = loss_of(&store, emb, &dec, &[SOS, 7, EOS]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn certain_targets_give_zero_loss() {
        let (store, emb, dec) = constant_logit_decoder(&[EOS]);
        assert_eq!(loss_of(&store, emb, &dec, &[SOS, EOS]), 0.0);
    }

    /// Scalar reference: softmax cross-entropy computed directly from logits.
    fn scalar_ce(logits: &Tensor, targets: &[u32]) -> f64 {
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = logits.row(r);
            let mut z = 0.0;
            for &v in row {
                z += v.exp();
            }
            total += -(row[y as usize].exp() / z).ln();
        }
        total / targets.len() as f64
    }

    #[test]
    fn loss_matches_scalar_cross_entropy() {
        let (store, emb, dec) = decoder_fixture(HID, VOCAB, 5);
        let target = [SOS, 6, 9, 10, 7, EOS];
        let mut t = Tape::new();
        let e = t.param(&store, emb);
        let s = t.constant(Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]));
        let out = dec.teacher_forced(&mut t, &store, e, s, &target).unwrap();
        let logits = t.value(out.logits).clone();
        let reference = scalar_ce(&logits, &target[1..]);
        assert!((t.value(out.loss).item().unwrap() - reference).abs() < 1e-10);
        let probs = t.softmax(out.logits);
        for r in 0..target.len() - 1 {
            let sum: f64 = t.value(probs).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_loss_gradient() {
        let (mut store, emb, dec) = decoder_fixture(HID, VOCAB, 6);
        let err = grad_check_store(&mut store, 60, |t, store| {
            let e = t.param(store, emb);
            let s = t.constant(Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]));
            Ok(dec.teacher_forced(t, store, e, s, &[SOS, 6, 9, 7, EOS])?.loss)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // gradient w.r.t. the history vector itself
        let (store, emb, dec) = decoder_fixture(HID, VOCAB, 7);
        let err = grad_check(
            |t, p| {
                let e = t.param(&store, emb);
                Ok(dec.teacher_forced(t, &store, e, p[0], &[SOS, 8, EOS])?.loss)
            },
            &[Tensor::vector(vec![0.5, 0.1, -0.4, 0.2])],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let (store, emb, dec) = decoder_fixture(2 * HID, VOCAB, 8);
        let run = || {
            let mut t = Tape::inference();
            let e = t.param(&store, emb);
            let s = t.constant(Tensor::vector(vec![0.2; 2 * HID]));
            dec.greedy(&mut t, &store, e, s, 7).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.len() <= 7);
        assert!(a.iter().all(|&id| id != PAD && id != SOS));
    }
}
