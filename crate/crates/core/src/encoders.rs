//! The surrogate dual encoder: a small convolutional image tower and a
//! mean-pooled token-embedding text tower projecting into one shared unit
//! sphere, plus the word-level tokenizer and contrastive fine-tuning.
//!
//! A frozen encoder (`&DualEncoder`) is safe for concurrent embedding calls;
//! [`DualEncoder::fine_tune`] consumes the encoder, so exclusive access
//! during training is enforced by ownership.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::corpus::LabeledCorpus;
use crate::graph::{Tape, Var};
use crate::math;
use crate::nn::{harvest_grads, Adam, Conv2d, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type TokenId = usize;

pub const PAD_TOKEN: TokenId = 0;
pub const UNK_TOKEN: TokenId = 1;

/// Fine-tuning recipe used for toy suspect models.
pub const TOY_FT_EPOCHS: usize = 60;
pub const TOY_FT_LR: f64 = 3e-3;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownTokenId { id: usize, vocab: usize },
    #[error("image shape {got:?} does not match encoder input {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("embedding rows have width {got}, encoder expects {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpora share {0} image(s); model pair needs disjoint content")]
    OverlappingCorpora(usize),
    #[error("image sides must be divisible by 8, got {0}x{1}")]
    UnsupportedImageShape(usize, usize),
}

/// Whitespace/punctuation word tokenizer with a fixed vocabulary.
///
/// Unknown words map to [`UNK_TOKEN`] so that queries built from one corpus
/// can still be scored by a model built from another.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    pub const MAX_VOCAB: usize = 4096;

    /// Build from raw texts. Words are lowercased and split on
    /// non-alphanumeric characters; the most frequent words are kept when the
    /// cap is exceeded, and the final vocabulary is sorted so construction is
    /// order-independent.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for word in split_words(text) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, u64)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(Self::MAX_VOCAB - 2);
        let mut selected: Vec<String> = words.into_iter().map(|(w, _)| w).collect();
        selected.sort_unstable();

        let mut vocab = vec!["<pad>".to_string(), "<unk>".to_string()];
        vocab.extend(selected);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    /// Vocabulary over a corpus: captions plus class names.
    pub fn from_corpus(corpus: &LabeledCorpus) -> Self {
        let mut texts: Vec<&str> = corpus.captions().collect();
        for name in corpus.class_names() {
            texts.push(name);
        }
        Self::build(texts)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// Inverse of `tokenize` up to whitespace normalization for lowercase
    /// in-vocabulary text.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_TOKEN)
            .map(|&id| self.vocab.get(id).map(|w| w.as_str()).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(|s| s.as_str())
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            words.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Width settings for the two towers. The shared embedding width is the only
/// dimension other components see.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArch {
    pub embed_dim: usize,
    pub conv1_ch: usize,
    pub conv2_ch: usize,
    pub txt_hidden: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            embed_dim: 64,
            conv1_ch: 8,
            conv2_ch: 16,
            txt_hidden: 64,
        }
    }
}

impl EncoderArch {
    /// A second architecture used for cross-model transfer smoke tests.
    pub fn wide() -> Self {
        EncoderArch {
            embed_dim: 64,
            conv1_ch: 12,
            conv2_ch: 24,
            txt_hidden: 96,
        }
    }
}

#[derive(Clone, Debug)]
struct ImageTower {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

#[derive(Clone, Debug)]
struct TextTower {
    hidden: Linear,
    out: Linear,
}

/// Dual encoder into a shared embedding space.
///
/// Both towers end in L2 normalization, so cosine similarity equals the dot
/// product of the outputs. The temperature is stored as `ln(1/τ)` so τ stays
/// strictly positive.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    arch: EncoderArch,
    image_shape: (usize, usize),
    tokenizer: Tokenizer,
    token_embed: Tensor,
    img: ImageTower,
    txt: TextTower,
    log_scale: Tensor,
}

/// Per-tape bindings of the encoder parameters, inserted once per graph.
pub struct EncoderVars {
    pub tok: Var,
    img: [[Var; 2]; 3],
    txt: [[Var; 2]; 2],
    pub log_scale: Var,
}

impl DualEncoder {
    /// Fresh encoder with seeded Gaussian init. `1/τ` starts at 14.
    pub fn new(
        arch: EncoderArch,
        image_shape: (usize, usize),
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let (h, w) = image_shape;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(EncoderError::UnsupportedImageShape(h, w));
        }
        let mut rng = Rng::new(seed ^ 0x656e_6300_0000_0000); // "enc"
        let d = arch.embed_dim;
        let flat = arch.conv2_ch * (h / 8) * (w / 8);
        let token_embed = Tensor::randn(
            &[tokenizer.vocab_size(), d],
            1.0 / math::sqrt(d as f64),
            &mut rng,
        );
        let img = ImageTower {
            conv1: Conv2d::new(3, arch.conv1_ch, 2, &mut rng),
            conv2: Conv2d::new(arch.conv1_ch, arch.conv2_ch, 2, &mut rng),
            fc: Linear::new(flat, d, &mut rng),
        };
        let txt = TextTower {
            hidden: Linear::new(d, arch.txt_hidden, &mut rng),
            out: Linear::new(arch.txt_hidden, d, &mut rng),
        };
        Ok(DualEncoder {
            arch,
            image_shape,
            tokenizer,
            token_embed,
            img,
            txt,
            log_scale: Tensor::scalar(math::ln(14.0)),
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Trainable temperature τ (> 0 by construction).
    pub fn tau(&self) -> f64 {
        math::exp(-self.log_scale.item())
    }

    /// Raw token-embedding matrix H (V×d).
    pub fn token_embed(&self) -> &Tensor {
        &self.token_embed
    }

    /// Parameter tensors in declared (checkpoint) order.
    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.token_embed,
            &self.img.conv1.w,
            &self.img.conv1.b,
            &self.img.conv2.w,
            &self.img.conv2.b,
            &self.img.fc.w,
            &self.img.fc.b,
            &self.txt.hidden.w,
            &self.txt.hidden.b,
            &self.txt.out.w,
            &self.txt.out.b,
            &self.log_scale,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.token_embed,
            &mut self.img.conv1.w,
            &mut self.img.conv1.b,
            &mut self.img.conv2.w,
            &mut self.img.conv2.b,
            &mut self.img.fc.w,
            &mut self.img.fc.b,
            &mut self.txt.hidden.w,
            &mut self.txt.hidden.b,
            &mut self.txt.out.w,
            &mut self.txt.out.b,
            &mut self.log_scale,
        ]
    }

    /// Stable hash over all parameters, used as artifact provenance.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params() {
            h ^= p.content_hash();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn param_hash_hex(&self) -> String {
        format!("{:016x}", self.param_hash())
    }

    // ---- graph forward passes ----

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let tok = if trainable {
            tape.param(self.token_embed.clone())
        } else {
            tape.leaf(self.token_embed.clone())
        };
        let img = [
            self.img.conv1.bind(tape, trainable),
            self.img.conv2.bind(tape, trainable),
            self.img.fc.bind(tape, trainable),
        ];
        let txt = [
            self.txt.hidden.bind(tape, trainable),
            self.txt.out.bind(tape, trainable),
        ];
        let log_scale = if trainable {
            tape.param(self.log_scale.clone())
        } else {
            tape.leaf(self.log_scale.clone())
        };
        EncoderVars {
            tok,
            img,
            txt,
            log_scale,
        }
    }

    /// Image batch N×3×H×W → unit-norm rows N×d.
    pub fn g_embed_images(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Var {
        let n = tape.value(x).shape()[0];
        let h = self.img.conv1.forward_with(tape, &vars.img[0], x);
        let h = tape.relu(h);
        let h = self.img.conv2.forward_with(tape, &vars.img[1], h);
        let h = tape.relu(h);
        let h = tape.avg_pool2(h, 2);
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat]);
        let h = Linear::forward(tape, &vars.img[2], h);
        tape.normalize_rows(h)
    }

    /// Token-embedding rows S×d → pooled pre-projection features 1×hidden.
    /// This is the text tower with its final projection removed.
    pub fn g_text_pre_projection(&self, tape: &mut Tape, vars: &EncoderVars, seq: Var) -> Var {
        let h = Linear::forward(tape, &vars.txt[0], seq);
        let h = tape.relu(h);
        let pooled = tape.mean_axis0(h);
        let hidden = tape.value(pooled).numel();
        tape.reshape(pooled, &[1, hidden])
    }

    /// Continuous path: embedding rows S×d → unit vector 1×d. Differentiable
    /// with respect to `seq`, which is what prompt learning trains through.
    pub fn g_embed_vec_seq(&self, tape: &mut Tape, vars: &EncoderVars, seq: Var) -> Var {
        let pooled = self.g_text_pre_projection(tape, vars, seq);
        let out = Linear::forward(tape, &vars.txt[1], pooled);
        tape.normalize_rows(out)
    }

    /// Token path: ids are looked up in H and routed through the continuous
    /// path, so the two routes agree exactly on identical rows.
    pub fn g_embed_token_seq(&self, tape: &mut Tape, vars: &EncoderVars, ids: &[TokenId]) -> Var {
        let seq = tape.gather_rows(vars.tok, ids.to_vec());
        self.g_embed_vec_seq(tape, vars, seq)
    }

    // ---- inference wrappers ----

    fn expect_image_shape(&self) -> Vec<usize> {
        vec![3, self.image_shape.0, self.image_shape.1]
    }

    /// Embed one image to a unit vector of length d.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor, EncoderError> {
        let want = self.expect_image_shape();
        if image.shape() != want.as_slice() {
            return Err(EncoderError::ShapeMismatch {
                got: image.shape().to_vec(),
                want,
            });
        }
        let batch = image
            .clone()
            .reshape(&[1, 3, self.image_shape.0, self.image_shape.1]);
        Ok(self.embed_images(&batch)?.reshape(&[self.arch.embed_dim]))
    }

    /// Embed a batch N×3×H×W to N×d unit rows.
    pub fn embed_images(&self, batch: &Tensor) -> Result<Tensor, EncoderError> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.image_shape {
            return Err(EncoderError::ShapeMismatch {
                got: s.to_vec(),
                want: vec![
                    s.first().copied().unwrap_or(1),
                    3,
                    self.image_shape.0,
                    self.image_shape.1,
                ],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.leaf(batch.clone());
        let out = self.g_embed_images(&mut tape, &vars, x);
        Ok(tape.value(out).clone())
    }

    /// Embed a token sequence to a unit vector of length d.
    pub fn embed_tokens(&self, ids: &[TokenId]) -> Result<Tensor, EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        let v = self.tokenizer.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(EncoderError::UnknownTokenId { id: bad, vocab: v });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.g_embed_token_seq(&mut tape, &vars, ids);
        Ok(tape.value(out).clone().reshape(&[self.arch.embed_dim]))
    }

    /// Embed raw d-width rows (the continuous-prompt path, bypassing H).
    pub fn embed_vectors(&self, seq: &Tensor) -> Result<Tensor, EncoderError> {
        if seq.shape().len() != 2 || seq.shape()[0] == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if seq.shape()[1] != self.arch.embed_dim {
            return Err(EncoderError::WidthMismatch {
                got: seq.shape()[1],
                want: self.arch.embed_dim,
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let s = tape.leaf(seq.clone());
        let out = self.g_embed_vec_seq(&mut tape, &vars, s);
        Ok(tape.value(out).clone().reshape(&[self.arch.embed_dim]))
    }

    /// Tokenize and embed a text query.
    pub fn embed_text(&self, text: &str) -> Result<Tensor, EncoderError> {
        let ids = self.tokenizer.tokenize(text);
        self.embed_tokens(&ids)
    }

    // ---- training ----

    /// Symmetric in-batch contrastive fine-tuning. Consumes the encoder and
    /// returns the updated one together with per-epoch mean losses.
    /// Deterministic in `seed`; zero epochs returns the encoder unchanged.
    pub fn fine_tune(
        self,
        corpus: &LabeledCorpus,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<(Self, Vec<f64>), EncoderError> {
        if corpus.is_empty() {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut enc = self;
        let mut trace = Vec::with_capacity(epochs);
        if epochs == 0 {
            return Ok((enc, trace));
        }
        let (h, w) = enc.image_shape;
        let token_ids: Vec<Vec<TokenId>> = corpus
            .samples()
            .iter()
            .map(|s| enc.tokenizer.tokenize(&s.caption))
            .collect();
        if let Some(i) = token_ids.iter().position(|t| t.is_empty()) {
            // captions are non-empty by corpus invariant, but a pathological
            // all-punctuation caption would land here
            let _ = i;
            return Err(EncoderError::EmptySequence);
        }

        let mut rng = Rng::new(seed ^ 0x6669_6e65_7475_6e65); // "finetune"
        let mut opt = Adam::new(lr);
        const BATCH: usize = 64;

        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut steps = 0usize;

            let mut start = 0;
            while start < order.len() {
                let mut end = (start + BATCH).min(order.len());
                // avoid a trailing singleton: InfoNCE needs at least 2
                if order.len() - end == 1 {
                    end = order.len();
                }
                let batch_idx = &order[start..end];
                start = end;
                if batch_idx.len() < 2 {
                    break;
                }

                let n = batch_idx.len();
                let mut img_data = Vec::with_capacity(n * 3 * h * w);
                for &i in batch_idx {
                    img_data.extend_from_slice(corpus.samples()[i].image.data());
                }
                let images = Tensor::from_vec(&[n, 3, h, w], img_data);

                let mut tape = Tape::new();
                let vars = enc.bind(&mut tape, true);
                let x = tape.leaf(images);
                let img_embs = enc.g_embed_images(&mut tape, &vars, x);
                let txt_rows: Vec<Var> = batch_idx
                    .iter()
                    .map(|&i| enc.g_embed_token_seq(&mut tape, &vars, &token_ids[i]))
                    .collect();
                let txt_embs = tape.concat_rows(&txt_rows);

                let logits = tape.matmul_nt(img_embs, txt_embs);
                let scale = tape.exp(vars.log_scale);
                let logits = tape.mul_scalar_var(logits, scale);

                let diag: Vec<usize> = (0..n).collect();
                let lsm_r = tape.log_softmax_rows(logits);
                let pick_r = tape.pick_per_row(lsm_r, diag.clone());
                let ce_r = tape.mean_all(pick_r);
                let logits_t = tape.transpose(logits);
                let lsm_c = tape.log_softmax_rows(logits_t);
                let pick_c = tape.pick_per_row(lsm_c, diag);
                let ce_c = tape.mean_all(pick_c);
                let total = tape.add(ce_r, ce_c);
                let loss = tape.scale(total, -0.5);

                tape.backward(loss);
                epoch_loss += tape.value(loss).item();
                steps += 1;

                let bound = enc.bound_vars(&vars);
                let grads = harvest_grads(&tape, &bound);
                drop(tape);
                let mut params = enc.params_mut();
                opt.step(
                    &mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(),
                    &grads,
                );
                // conventional contrastive cap on the logit scale (1/τ ≤ 100)
                let ls = enc.log_scale.data_mut();
                ls[0] = ls[0].min(math::ln(100.0));
            }
            trace.push(epoch_loss / steps.max(1) as f64);
        }
        Ok((enc, trace))
    }

    fn bound_vars(&self, vars: &EncoderVars) -> Vec<Var> {
        let mut out = vec![vars.tok];
        for pair in &vars.img {
            out.extend_from_slice(pair);
        }
        for pair in &vars.txt {
            out.extend_from_slice(pair);
        }
        out.push(vars.log_scale);
        out
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64, EncoderError> {
    if a.numel() != b.numel() {
        return Err(EncoderError::LengthMismatch(a.numel(), b.numel()));
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::ZeroVector);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Train a malicious/benign toy pair: identical initialization (including the
/// shared union vocabulary), then fine-tuning on the protected corpus and on
/// the disjoint other corpus respectively. Errors if the corpora share any
/// image.
///
/// The pair's pre-fine-tune state is freshly seeded here, independent of any
/// surrogate. Use [`make_model_pair_from`] for the configuration where
/// suspects fine-tune the same pre-trained base the fingerprint owner used.
pub fn make_model_pair(
    corpus_protected: &LabeledCorpus,
    corpus_other: &LabeledCorpus,
    seed: u64,
) -> Result<(DualEncoder, DualEncoder), EncoderError> {
    let mut texts: Vec<&str> = corpus_protected.captions().collect();
    texts.extend(corpus_other.captions());
    for name in corpus_protected
        .class_names()
        .iter()
        .chain(corpus_other.class_names())
    {
        texts.push(name);
    }
    let tokenizer = Tokenizer::build(texts);
    let base = DualEncoder::new(
        EncoderArch::default(),
        corpus_protected.image_shape(),
        tokenizer,
        seed,
    )?;
    make_model_pair_from(base, corpus_protected, corpus_other, seed)
}

/// As [`make_model_pair`], but both suspects fine-tune the given base model.
/// This mirrors the usual situation where every party starts from the same
/// published pre-trained checkpoint.
pub fn make_model_pair_from(
    base: DualEncoder,
    corpus_protected: &LabeledCorpus,
    corpus_other: &LabeledCorpus,
    seed: u64,
) -> Result<(DualEncoder, DualEncoder), EncoderError> {
    if corpus_protected.is_empty() || corpus_other.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let shared: BTreeSet<u64> = corpus_protected
        .samples()
        .iter()
        .map(|s| s.image.content_hash())
        .collect();
    let overlap = corpus_other
        .samples()
        .iter()
        .filter(|s| shared.contains(&s.image.content_hash()))
        .count();
    if overlap > 0 {
        return Err(EncoderError::OverlappingCorpora(overlap));
    }
    let (malicious, _) =
        base.clone()
            .fine_tune(corpus_protected, TOY_FT_EPOCHS, TOY_FT_LR, seed ^ 0xa1)?;
    let (benign, _) = base.fine_tune(corpus_other, TOY_FT_EPOCHS, TOY_FT_LR, seed ^ 0xb2)?;
    Ok((malicious, benign))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_encoder(seed: u64) -> DualEncoder {
        let tok = Tokenizer::build(["a photo of a crimson disk", "an azure square here"]);
        DualEncoder::new(
            EncoderArch {
                embed_dim: 16,
                conv1_ch: 4,
                conv2_ch: 6,
                txt_hidden: 12,
            },
            (16, 16),
            tok,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_round_trip() {
        let tok = Tokenizer::build(["a photo of a crimson disk"]);
        let ids = tok.tokenize("a photo of a crimson disk");
        assert_eq!(tok.detokenize(&ids), "a photo of a crimson disk");
    }

    #[test]
    fn tokenizer_unknown_words_map_to_unk() {
        let tok = Tokenizer::build(["a photo"]);
        let ids = tok.tokenize("a zebra");
        assert_eq!(ids[1], UNK_TOKEN);
    }

    #[test]
    fn tokenizer_deterministic_order() {
        let a = Tokenizer::build(["b a c", "c b"]);
        let b = Tokenizer::build(["c b", "b a c"]);
        assert_eq!(a, b);
    }

    #[test]
    fn embed_image_unit_norm_and_deterministic() {
        let enc = tiny_encoder(5);
        let mut rng = Rng::new(9);
        let img = Tensor::randn(&[3, 16, 16], 0.2, &mut rng)
            .into_data()
            .iter()
            .map(|v| v.abs().min(1.0))
            .collect::<Vec<_>>();
        let img = Tensor::from_vec(&[3, 16, 16], img);
        let e1 = enc.embed_image(&img).unwrap();
        let e2 = enc.embed_image(&img).unwrap();
        assert_eq!(e1, e2);
        assert!((e1.l2_norm() - 1.0).abs() <= 1e-6, "norm {}", e1.l2_norm());
    }

    #[test]
    fn embed_image_rejects_wrong_shape() {
        let enc = tiny_encoder(5);
        let img = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(
            enc.embed_image(&img),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn token_and_vector_paths_agree() {
        let enc = tiny_encoder(6);
        let ids = enc.tokenizer().tokenize("a photo of a crimson disk");
        let by_tokens = enc.embed_tokens(&ids).unwrap();
        let d = enc.embed_dim();
        let mut rows = Vec::new();
        for &id in &ids {
            rows.extend_from_slice(&enc.token_embed().data()[id * d..(id + 1) * d]);
        }
        let seq = Tensor::from_vec(&[ids.len(), d], rows);
        let by_vectors = enc.embed_vectors(&seq).unwrap();
        assert_eq!(by_tokens, by_vectors);
    }

    #[test]
    fn embed_tokens_error_paths() {
        let enc = tiny_encoder(5);
        assert!(matches!(
            enc.embed_tokens(&[]),
            Err(EncoderError::EmptySequence)
        ));
        let v = enc.tokenizer().vocab_size();
        assert!(matches!(
            enc.embed_tokens(&[v + 3]),
            Err(EncoderError::UnknownTokenId { .. })
        ));
    }

    #[test]
    fn cosine_sim_identities() {
        let v = Tensor::from_vec(&[3], alloc::vec![0.3, -0.4, 0.5]);
        let mut neg = v.clone();
        for x in neg.data_mut() {
            *x = -*x;
        }
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let zero = Tensor::zeros(&[3]);
        assert!(matches!(
            cosine_sim(&v, &zero),
            Err(EncoderError::ZeroVector)
        ));
    }

    #[test]
    fn fine_tune_zero_epochs_is_identity() {
        let enc = tiny_encoder(7);
        let before = enc.param_hash();
        let corpus = crate::corpus::synth_toy_corpus(2, 3, (16, 16), 4).unwrap();
        let (after, trace) = enc.fine_tune(&corpus, 0, 1e-3, 1).unwrap();
        assert_eq!(after.param_hash(), before);
        assert!(trace.is_empty());
    }

    #[test]
    fn fine_tune_deterministic() {
        let corpus = crate::corpus::synth_toy_corpus(3, 4, (16, 16), 4).unwrap();
        let run = || {
            let enc = tiny_encoder(7);
            let (enc, trace) = enc.fine_tune(&corpus, 3, 1e-3, 42).unwrap();
            (enc.param_hash(), trace)
        };
        let (h1, t1) = run();
        let (h2, t2) = run();
        assert_eq!(h1, h2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn gradient_of_image_probe_matches_fd() {
        use crate::gradcheck;
        let enc = tiny_encoder(8);
        let mut rng = Rng::new(4);
        let img = Tensor::from_vec(
            &[1, 3, 16, 16],
            (0..3 * 256).map(|_| rng.range(0.2, 0.8)).collect(),
        );
        let probe = Tensor::randn(&[16], 1.0, &mut rng);

        let eval = |x: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape, false);
            let xv = tape.param(x.clone());
            let emb = enc.g_embed_images(&mut tape, &vars, xv);
            let p = tape.leaf(probe.clone().reshape(&[1, 16]));
            let prod = tape.mul(emb, p);
            let loss = tape.sum_all(prod);
            tape.backward(loss);
            (tape.value(loss).item(), tape.grad(xv).unwrap().clone())
        };
        let (_, analytic) = eval(&img);
        let err = gradcheck::check_grad(&img, &analytic, |x| eval(x).0, gradcheck::FD_STEP);
        assert!(err <= gradcheck::FD_TOL, "rel err {err}");
    }

    #[test]
    fn gradient_of_text_vectors_matches_fd() {
        use crate::gradcheck;
        let enc = tiny_encoder(9);
        let mut rng = Rng::new(5);
        let seq = Tensor::randn(&[4, 16], 0.5, &mut rng);
        let probe = Tensor::randn(&[16], 1.0, &mut rng);

        let eval = |s: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape, false);
            let sv = tape.param(s.clone());
            let emb = enc.g_embed_vec_seq(&mut tape, &vars, sv);
            let p = tape.leaf(probe.clone().reshape(&[1, 16]));
            let prod = tape.mul(emb, p);
            let loss = tape.sum_all(prod);
            tape.backward(loss);
            (tape.value(loss).item(), tape.grad(sv).unwrap().clone())
        };
        let (_, analytic) = eval(&seq);
        let err = gradcheck::check_grad(&seq, &analytic, |s| eval(s).0, gradcheck::FD_STEP);
        assert!(err <= gradcheck::FD_TOL, "rel err {err}");
    }

    #[test]
    fn model_pair_rejects_overlap() {
        let c = crate::corpus::synth_toy_corpus(2, 3, (16, 16), 4).unwrap();
        assert!(matches!(
            make_model_pair(&c, &c, 1),
            Err(EncoderError::OverlappingCorpora(_))
        ));
    }
}
