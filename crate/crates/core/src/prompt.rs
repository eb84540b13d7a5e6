//! Modality-aware aligned prompt learning.
//!
//! One continuous prefix prompt P_c (n rows of the token-embedding width) is
//! trained on the frozen surrogate so that perturbed source images are
//! re-matched to the adversarial label, under a textual constraint that
//! anchors each position to its nearest real-token embedding. The trained
//! prompt is then projected to a discrete, readable token sequence through a
//! three-layer network over the restricted vocabulary of the perturbed
//! corpus.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::corpus::LabeledCorpus;
use crate::encoders::{DualEncoder, TokenId, Tokenizer, PAD_TOKEN, UNK_TOKEN};
use crate::gop::{g_ce_mean, g_cosine_logits, GopArtifact};
use crate::graph::{Tape, Var};
use crate::math;
use crate::nn::{harvest_grads, Adam, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("restricted vocabulary is empty")]
    EmptyVocabulary,
    #[error("anchor set is empty")]
    EmptyAnchors,
    #[error("perturbed corpus is empty")]
    EmptyCorpus,
    #[error("prompt length must be at least 1")]
    ZeroLength,
    #[error("no discrete tokens; prompt was not projected")]
    EmptyTokens,
    #[error("weight {name} = {value} must be non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("label {0:?} not present in corpus")]
    MissingLabel(String),
    #[error("class prompt list is empty")]
    NoPrompts,
    #[error("duplicate prompt for class {0}")]
    DuplicateClass(usize),
    #[error("prompt for unknown class index {label} (have {classes})")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("perturbed image {index} exceeds budget: |x'-x| = {dev} > sigma {sigma}")]
    BudgetViolated { index: usize, dev: f64, sigma: f64 },
    #[error("prompt rows have width {got}, encoder expects {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error("perturbation error: {0}")]
    Gop(#[from] crate::gop::GopError),
}

/// Prompt initialization per the usual context-optimization recipes.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PromptInit {
    /// Seeded Gaussian rows scaled like the token embeddings.
    Random,
    /// Token-embedding rows of a literal string ("a photo of a", "A B C D",
    /// ...), zero-padded when shorter than the prompt length.
    Literal(String),
}

/// Hyperparameters for prompt learning and discrete projection.
/// Defaults: n=4, λ=1.3, ω=0.08, a 4-token hand-crafted init.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptConfig {
    pub n: usize,
    pub lambda: f64,
    pub omega: f64,
    pub steps: usize,
    pub lr: f64,
    pub proj_steps: usize,
    pub proj_lr: f64,
    pub init: PromptInit,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            n: 4,
            lambda: 1.3,
            omega: 0.08,
            steps: 300,
            lr: 0.05,
            proj_steps: 500,
            proj_lr: 0.02,
            init: PromptInit::Literal("a photo of a".to_string()),
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.n == 0 {
            return Err(PromptError::ZeroLength);
        }
        if self.lambda < 0.0 {
            return Err(PromptError::NegativeWeight {
                name: "lambda",
                value: self.lambda,
            });
        }
        if self.omega < 0.0 {
            return Err(PromptError::NegativeWeight {
                name: "omega",
                value: self.omega,
            });
        }
        Ok(())
    }
}

/// The learned prompt: continuous rows, their discrete interpretation as
/// probability rows over the restricted vocabulary, and the argmax tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub p_c: Tensor,
    pub n: usize,
    pub lambda: f64,
    pub omega: f64,
    /// n×N_D; each row is a probability vector over `restricted_vocab`.
    pub res: Tensor,
    /// Restricted vocabulary as ids into the encoder vocabulary, ascending.
    pub restricted_vocab: Vec<TokenId>,
    /// Per-position argmax of `res`, as ids into the encoder vocabulary.
    pub discrete_tokens: Vec<TokenId>,
}

impl PromptState {
    pub fn content_hash(&self) -> u64 {
        let mut h = self.p_c.content_hash() ^ self.res.content_hash().rotate_left(13);
        for &t in self.restricted_vocab.iter().chain(&self.discrete_tokens) {
            h ^= t as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^ self.lambda.to_bits() ^ self.omega.to_bits().rotate_left(7)
    }
}

/// A prompt state together with the labels and surrogate it was extracted
/// under; the unit that gets persisted and later checked against the
/// perturbation artifact at verification time.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptArtifact {
    pub state: PromptState,
    pub k_o: String,
    pub k_adv: String,
    pub seed: u64,
    pub surrogate_hash: String,
}

impl PromptArtifact {
    pub fn content_hash(&self) -> u64 {
        let mut h = self.state.content_hash() ^ self.seed.rotate_left(21);
        for b in self
            .k_o
            .bytes()
            .chain(self.k_adv.bytes())
            .chain(self.surrogate_hash.bytes())
        {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// The perturbed source-class corpus 𝒟′ used for prompt alignment, plus the
/// restricted vocabulary (caption tokens of 𝒟′ and all class names).
#[derive(Clone, Debug)]
pub struct GopPromptCorpus {
    pub adv_images: Vec<Tensor>,
    pub captions: Vec<String>,
    pub restricted_vocab: Vec<TokenId>,
    pub class_names: Vec<String>,
    pub k_o: usize,
    pub k_adv: usize,
    pub sigma: f64,
}

/// Apply the perturbation to every source-class image and collect the
/// restricted vocabulary. Each perturbed image is checked against the budget.
pub fn build_gop_corpus(
    corpus: &LabeledCorpus,
    artifact: &GopArtifact,
    tokenizer: &Tokenizer,
) -> Result<GopPromptCorpus, PromptError> {
    let k_o = corpus
        .label_index(&artifact.k_o)
        .ok_or_else(|| PromptError::MissingLabel(artifact.k_o.clone()))?;
    let k_adv = corpus
        .label_index(&artifact.k_adv)
        .ok_or_else(|| PromptError::MissingLabel(artifact.k_adv.clone()))?;

    let mut adv_images = Vec::new();
    let mut captions = Vec::new();
    let mut vocab: alloc::collections::BTreeSet<TokenId> = alloc::collections::BTreeSet::new();
    for (index, s) in corpus
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == k_o)
    {
        let adv = artifact.apply(&s.image)?;
        let dev = adv.max_abs_diff(&s.image);
        if dev > artifact.sigma + 1e-6 {
            return Err(PromptError::BudgetViolated {
                index,
                dev,
                sigma: artifact.sigma,
            });
        }
        vocab.extend(tokenizer.tokenize(&s.caption));
        adv_images.push(adv);
        captions.push(s.caption.clone());
    }
    if adv_images.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    for name in corpus.class_names() {
        vocab.extend(tokenizer.tokenize(name));
    }
    vocab.remove(&PAD_TOKEN);
    vocab.remove(&UNK_TOKEN);
    if vocab.is_empty() {
        return Err(PromptError::EmptyVocabulary);
    }
    Ok(GopPromptCorpus {
        adv_images,
        captions,
        restricted_vocab: vocab.into_iter().collect(),
        class_names: corpus.class_names().to_vec(),
        k_o,
        k_adv,
        sigma: artifact.sigma,
    })
}

/// One class query: the prompt prefix concatenated with the embedded class
/// name, `w_i = {p_1, …, p_n, H(k_i)}`.
#[derive(Clone, Debug)]
pub struct ClassPrompt {
    pub label: usize,
    pub rows: Tensor,
}

pub fn class_prompt(
    enc: &DualEncoder,
    p_c: &Tensor,
    class_name: &str,
    label: usize,
) -> Result<ClassPrompt, PromptError> {
    let d = enc.embed_dim();
    if p_c.shape().len() != 2 || p_c.shape()[1] != d {
        return Err(PromptError::WidthMismatch {
            got: p_c.shape().last().copied().unwrap_or(0),
            want: d,
        });
    }
    let ids = enc.tokenizer().tokenize(class_name);
    let mut rows = Vec::with_capacity((p_c.shape()[0] + ids.len()) * d);
    rows.extend_from_slice(p_c.data());
    for &id in &ids {
        rows.extend_from_slice(&enc.token_embed().data()[id * d..(id + 1) * d]);
    }
    let total = p_c.shape()[0] + ids.len();
    Ok(ClassPrompt {
        label,
        rows: Tensor::from_vec(&[total, d], rows),
    })
}

/// Class prompts for every label of a label set, in label order.
pub fn class_prompts_for(
    enc: &DualEncoder,
    p_c: &Tensor,
    class_names: &[String],
) -> Result<Vec<ClassPrompt>, PromptError> {
    class_names
        .iter()
        .enumerate()
        .map(|(label, name)| class_prompt(enc, p_c, name, label))
        .collect()
}

/// Softmaxed class probabilities of an image embedding against the class
/// prompts: softmax over classes of `sim(x, f_t(w_i)) / τ`.
///
/// The normalizer is summed in value-sorted order, so the output is exactly
/// permutation-equivariant in the prompt list.
pub fn predict_prob(
    enc: &DualEncoder,
    x_emb: &Tensor,
    prompts: &[ClassPrompt],
    tau: f64,
) -> Result<Vec<f64>, PromptError> {
    if prompts.is_empty() {
        return Err(PromptError::NoPrompts);
    }
    let mut seen = alloc::collections::BTreeSet::new();
    for p in prompts {
        if !seen.insert(p.label) {
            return Err(PromptError::DuplicateClass(p.label));
        }
    }
    let mut logits = Vec::with_capacity(prompts.len());
    for p in prompts {
        let t = enc.embed_vectors(&p.rows)?;
        let sim = crate::encoders::cosine_sim(x_emb, &t)?;
        logits.push(sim / tau);
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let denom: f64 = sorted.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Nearest restricted-vocabulary token (squared-L2) for each prompt row.
/// Ties break toward the lowest token id.
pub fn nearest_anchor_ids(
    p_c: &Tensor,
    token_embed: &Tensor,
    restricted: &[TokenId],
) -> Result<Vec<TokenId>, PromptError> {
    if restricted.is_empty() {
        return Err(PromptError::EmptyVocabulary);
    }
    let d = token_embed.shape()[1];
    let mut out = Vec::with_capacity(p_c.shape()[0]);
    for row in p_c.data().chunks(d) {
        let mut best = restricted[0];
        let mut best_d = f64::INFINITY;
        for &id in restricted {
            let trow = &token_embed.data()[id * d..(id + 1) * d];
            let dist: f64 = row.iter().zip(trow).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = id;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn gather_token_rows(token_embed: &Tensor, ids: &[TokenId]) -> Tensor {
    let d = token_embed.shape()[1];
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(&token_embed.data()[id * d..(id + 1) * d]);
    }
    Tensor::from_vec(&[ids.len(), d], data)
}

/// Textual-constraint graph: negated mean over batch and positions of the
/// anchor log-softmax attraction.
pub fn g_loss_textual(tape: &mut Tape, x_embs: Var, anchors: Var, tau: f64) -> Var {
    let logits = g_cosine_logits(tape, x_embs, anchors, tau);
    let lsm = tape.log_softmax_rows(logits);
    let mean = tape.mean_all(lsm);
    tape.scale(mean, -1.0)
}

/// Readability pressure: batch-and-position-meaned negative log-softmax of
/// the image–anchor similarities. Anchors are the nearest token embeddings of
/// the current prompt rows and are treated as constants for the step.
pub fn loss_textual_constraint(
    x_embs: &Tensor,
    anchors: &Tensor,
    tau: f64,
) -> Result<f64, PromptError> {
    if anchors.shape().first().copied().unwrap_or(0) == 0 {
        return Err(PromptError::EmptyAnchors);
    }
    if x_embs.shape().first().copied().unwrap_or(0) == 0 {
        return Err(PromptError::EmptyCorpus);
    }
    let mut tape = Tape::new();
    let x = tape.leaf(x_embs.clone());
    let a = tape.leaf(anchors.clone());
    let l = g_loss_textual(&mut tape, x, a, tau);
    Ok(tape.value(l).item())
}

struct PromptGraph {
    loss: Var,
    constraint: Var,
    alignment: Var,
}

/// Shared graph for the composite prompt objective
/// `L_p = λ·L_c + CE(predict, k_adv)`.
#[allow(clippy::too_many_arguments)]
fn g_prompt_loss(
    tape: &mut Tape,
    enc: &DualEncoder,
    enc_vars: &crate::encoders::EncoderVars,
    x_embs: Var,
    p_c: Var,
    class_token_rows: &[Tensor],
    k_adv: usize,
    anchors: Var,
    lambda: f64,
    tau: f64,
) -> PromptGraph {
    let n_samples = tape.value(x_embs).shape()[0];
    let mut class_embs = Vec::with_capacity(class_token_rows.len());
    for rows in class_token_rows {
        let tail = tape.leaf(rows.clone());
        let seq = tape.concat_rows(&[p_c, tail]);
        class_embs.push(enc.g_embed_vec_seq(tape, enc_vars, seq));
    }
    let text_matrix = tape.concat_rows(&class_embs);
    let sims = tape.matmul_nt(x_embs, text_matrix);
    let logits = tape.scale(sims, 1.0 / tau);
    let alignment = g_ce_mean(tape, logits, &vec![k_adv; n_samples]);
    let constraint = g_loss_textual(tape, x_embs, anchors, tau);
    let weighted = tape.scale(constraint, lambda);
    let loss = tape.add(weighted, alignment);
    PromptGraph {
        loss,
        constraint,
        alignment,
    }
}

/// Value of the composite prompt objective at the given prompt rows, with
/// anchors recomputed from those rows.
pub fn loss_prompt(
    enc: &DualEncoder,
    gop_corpus: &GopPromptCorpus,
    p_c: &Tensor,
    lambda: f64,
    tau: f64,
) -> Result<f64, PromptError> {
    if lambda < 0.0 {
        return Err(PromptError::NegativeWeight {
            name: "lambda",
            value: lambda,
        });
    }
    let x_embs = embed_gop_images(enc, gop_corpus)?;
    let anchor_ids = nearest_anchor_ids(p_c, enc.token_embed(), &gop_corpus.restricted_vocab)?;
    let anchors = gather_token_rows(enc.token_embed(), &anchor_ids);
    let class_rows = class_token_rows(enc, &gop_corpus.class_names);

    let mut tape = Tape::new();
    let enc_vars = enc.bind(&mut tape, false);
    let x = tape.leaf(x_embs);
    let p = tape.leaf(p_c.clone());
    let a = tape.leaf(anchors);
    let g = g_prompt_loss(
        &mut tape,
        enc,
        &enc_vars,
        x,
        p,
        &class_rows,
        gop_corpus.k_adv,
        a,
        lambda,
        tau,
    );
    Ok(tape.value(g.loss).item())
}

/// Surrogate embeddings of every perturbed image in 𝒟′, one unit row each.
pub fn embed_gop_images(
    enc: &DualEncoder,
    gop_corpus: &GopPromptCorpus,
) -> Result<Tensor, PromptError> {
    if gop_corpus.adv_images.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    let (h, w) = enc.image_shape();
    let n = gop_corpus.adv_images.len();
    let mut data = Vec::with_capacity(n * 3 * h * w);
    for img in &gop_corpus.adv_images {
        data.extend_from_slice(img.data());
    }
    Ok(enc.embed_images(&Tensor::from_vec(&[n, 3, h, w], data))?)
}

/// Raw token-embedding rows of each class name, used as the constant tails
/// of the class prompts.
pub fn class_token_rows(enc: &DualEncoder, class_names: &[String]) -> Vec<Tensor> {
    class_names
        .iter()
        .map(|name| {
            let ids = enc.tokenizer().tokenize(name);
            gather_token_rows(enc.token_embed(), &ids)
        })
        .collect()
}

/// Graph entry point for the composite prompt objective; the scalar node it
/// returns is `λ·L_c + CE(predict, k_adv)` with anchors held constant for
/// the step.
#[allow(clippy::too_many_arguments)]
pub fn g_prompt_objective(
    tape: &mut Tape,
    enc: &DualEncoder,
    enc_vars: &crate::encoders::EncoderVars,
    x_embs: Var,
    p_c: Var,
    class_rows: &[Tensor],
    k_adv: usize,
    anchors: Var,
    lambda: f64,
    tau: f64,
) -> Var {
    g_prompt_loss(
        tape, enc, enc_vars, x_embs, p_c, class_rows, k_adv, anchors, lambda, tau,
    )
    .loss
}

/// Graph entry point for the projection objective.
pub fn g_projection_objective(
    tape: &mut Tape,
    enc: &DualEncoder,
    enc_vars: &crate::encoders::EncoderVars,
    res: Var,
    h_restricted: Var,
    p_c: Var,
    omega: f64,
) -> Var {
    g_proj_loss(tape, enc, enc_vars, res, h_restricted, p_c, omega)
}

/// Rows of the token-embedding matrix for a set of token ids.
pub fn token_rows(enc: &DualEncoder, ids: &[TokenId]) -> Tensor {
    gather_token_rows(enc.token_embed(), ids)
}

/// Per-step record of the prompt optimization.
#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptTrace {
    pub loss: Vec<f64>,
    pub constraint: Vec<f64>,
    pub alignment: Vec<f64>,
}

/// Optimize the continuous prompt on the frozen surrogate, then project it to
/// the discrete interpretation. Deterministic in the config seed; zero steps
/// leaves the initialization untouched.
pub fn train_prompt(
    enc: &DualEncoder,
    gop_corpus: &GopPromptCorpus,
    config: &PromptConfig,
) -> Result<(PromptState, PromptTrace), PromptError> {
    config.validate()?;
    let x_embs = embed_gop_images(enc, gop_corpus)?;
    let class_rows = class_token_rows(enc, &gop_corpus.class_names);
    let tau = enc.tau();
    let mut rng = Rng::new(config.seed ^ 0x7072_6f6d_7074_0000); // "prompt"
    let mut p_c = init_prompt(enc, &config.init, config.n, &mut rng);
    let mut opt = Adam::new(config.lr);
    let mut trace = PromptTrace::default();

    for _ in 0..config.steps {
        let anchor_ids = nearest_anchor_ids(&p_c, enc.token_embed(), &gop_corpus.restricted_vocab)?;
        let anchors = gather_token_rows(enc.token_embed(), &anchor_ids);

        let mut tape = Tape::new();
        let enc_vars = enc.bind(&mut tape, false);
        let x = tape.leaf(x_embs.clone());
        let p = tape.param(p_c.clone());
        let a = tape.leaf(anchors);
        let g = g_prompt_loss(
            &mut tape,
            enc,
            &enc_vars,
            x,
            p,
            &class_rows,
            gop_corpus.k_adv,
            a,
            config.lambda,
            tau,
        );
        tape.backward(g.loss);
        trace.loss.push(tape.value(g.loss).item());
        trace.constraint.push(tape.value(g.constraint).item());
        trace.alignment.push(tape.value(g.alignment).item());
        let grads = harvest_grads(&tape, &[p]);
        drop(tape);
        opt.step(&mut [&mut p_c], &grads);
    }

    let (res, discrete_tokens) = project_to_discrete(
        &p_c,
        enc,
        &gop_corpus.restricted_vocab,
        config.omega,
        config.proj_steps,
        config.proj_lr,
        config.seed,
    )?;
    Ok((
        PromptState {
            p_c,
            n: config.n,
            lambda: config.lambda,
            omega: config.omega,
            res,
            restricted_vocab: gop_corpus.restricted_vocab.clone(),
            discrete_tokens,
        },
        trace,
    ))
}

fn init_prompt(enc: &DualEncoder, init: &PromptInit, n: usize, rng: &mut Rng) -> Tensor {
    let d = enc.embed_dim();
    let h = enc.token_embed();
    match init {
        PromptInit::Random => {
            // scale like the token embeddings
            let std = {
                let data = h.data();
                let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
                let var: f64 =
                    data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
                math::sqrt(var)
            };
            Tensor::randn(&[n, d], std, rng)
        }
        PromptInit::Literal(text) => {
            let ids = enc.tokenizer().tokenize(text);
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                match ids.get(i) {
                    Some(&id) => data.extend_from_slice(&h.data()[id * d..(id + 1) * d]),
                    None => data.extend(core::iter::repeat(0.0).take(d)),
                }
            }
            Tensor::from_vec(&[n, d], data)
        }
    }
}

/// Projection objective value at a given interpretation matrix:
/// `dist(H(Res), P_c) + ω·dist(g(H(Res)), g(P_c))` with squared-L2 distances,
/// where `g` is the text tower without its final projection.
pub fn loss_projection(
    enc: &DualEncoder,
    res: &Tensor,
    h_restricted: &Tensor,
    p_c: &Tensor,
    omega: f64,
) -> Result<f64, PromptError> {
    if omega < 0.0 {
        return Err(PromptError::NegativeWeight {
            name: "omega",
            value: omega,
        });
    }
    let mut tape = Tape::new();
    let enc_vars = enc.bind(&mut tape, false);
    let r = tape.leaf(res.clone());
    let h = tape.leaf(h_restricted.clone());
    let p = tape.leaf(p_c.clone());
    let l = g_proj_loss(&mut tape, enc, &enc_vars, r, h, p, omega);
    Ok(tape.value(l).item())
}

fn g_proj_loss(
    tape: &mut Tape,
    enc: &DualEncoder,
    enc_vars: &crate::encoders::EncoderVars,
    res: Var,
    h_restricted: Var,
    p_c: Var,
    omega: f64,
) -> Var {
    let mix = tape.matmul(res, h_restricted);
    let diff = tape.sub(mix, p_c);
    let sq = tape.mul(diff, diff);
    let mut loss = tape.sum_all(sq);
    if omega != 0.0 {
        let g_mix = enc.g_text_pre_projection(tape, enc_vars, mix);
        let g_pc = enc.g_text_pre_projection(tape, enc_vars, p_c);
        let d2 = tape.sub(g_mix, g_pc);
        let sq2 = tape.mul(d2, d2);
        let s2 = tape.sum_all(sq2);
        let w = tape.scale(s2, omega);
        loss = tape.add(loss, w);
    }
    loss
}

struct ProjNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ProjNet {
    fn new(n: usize, d: usize, vocab: usize, rng: &mut Rng) -> Self {
        ProjNet {
            l1: Linear::new(n + d, 2 * d, rng),
            l2: Linear::new(2 * d, 2 * d, rng),
            l3: Linear::new(2 * d, vocab, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[[Var; 2]; 3], input: Var) -> Var {
        let h = Linear::forward(tape, &vars[0], input);
        let h = tape.relu(h);
        let h = Linear::forward(tape, &vars[1], h);
        let h = tape.relu(h);
        let logits = Linear::forward(tape, &vars[2], h);
        let lsm = tape.log_softmax_rows(logits);
        tape.exp(lsm)
    }

    fn bind(&self, tape: &mut Tape) -> [[Var; 2]; 3] {
        [
            self.l1.bind(tape, true),
            self.l2.bind(tape, true),
            self.l3.bind(tape, true),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.l3.w,
            &mut self.l3.b,
        ]
    }

    fn var_list(vars: &[[Var; 2]; 3]) -> Vec<Var> {
        let mut v = Vec::with_capacity(6);
        for pair in vars {
            v.extend_from_slice(pair);
        }
        v
    }
}

/// Project the continuous prompt to probability rows over the restricted
/// vocabulary and the per-position argmax tokens (ids into the encoder
/// vocabulary).
///
/// With ω=0 the objective decouples per position and the exact optimum over
/// discrete interpretations is the nearest token row, so it is solved in
/// closed form. Otherwise a three-layer network (position one-hot ⊕ prompt
/// row → 2d → 2d → softmax over N_D) is trained for a fixed step budget and
/// the best interpretation seen — including the greedy nearest-token
/// baseline — is returned, so the result is never worse than greedy.
pub fn project_to_discrete(
    p_c: &Tensor,
    enc: &DualEncoder,
    restricted: &[TokenId],
    omega: f64,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(Tensor, Vec<TokenId>), PromptError> {
    if restricted.is_empty() {
        return Err(PromptError::EmptyVocabulary);
    }
    if omega < 0.0 {
        return Err(PromptError::NegativeWeight {
            name: "omega",
            value: omega,
        });
    }
    let n = p_c.shape()[0];
    let d = p_c.shape()[1];
    let nd = restricted.len();
    let h_r = gather_token_rows(enc.token_embed(), restricted);

    let greedy_ids = nearest_anchor_ids(p_c, enc.token_embed(), restricted)?;
    let mut greedy_res = Tensor::zeros(&[n, nd]);
    for (i, id) in greedy_ids.iter().enumerate() {
        let col = restricted
            .iter()
            .position(|r| r == id)
            .expect("anchor from restricted set");
        greedy_res.data_mut()[i * nd + col] = 1.0;
    }

    if omega == 0.0 {
        return Ok((greedy_res, greedy_ids));
    }

    let mut best_loss = loss_projection(enc, &greedy_res, &h_r, p_c, omega)?;
    let mut best_res = greedy_res;
    let mut best_ids = greedy_ids;

    // Input: position one-hot concatenated with the prompt row.
    let mut input = Tensor::zeros(&[n, n + d]);
    for i in 0..n {
        input.data_mut()[i * (n + d) + i] = 1.0;
        let row = &p_c.data()[i * d..(i + 1) * d];
        input.data_mut()[i * (n + d) + n..i * (n + d) + n + d].copy_from_slice(row);
    }

    let mut rng = Rng::new(seed ^ 0x7072_6f6a_0000_0000); // "proj"
    let mut net = ProjNet::new(n, d, nd, &mut rng);
    let mut opt = Adam::new(lr);

    for _ in 0..steps {
        let mut tape = Tape::new();
        let enc_vars = enc.bind(&mut tape, false);
        let net_vars = net.bind(&mut tape);
        let inp = tape.leaf(input.clone());
        let res = net.forward(&mut tape, &net_vars, inp);
        let h = tape.leaf(h_r.clone());
        let p = tape.leaf(p_c.clone());
        let loss = g_proj_loss(&mut tape, enc, &enc_vars, res, h, p, omega);
        tape.backward(loss);

        let value = tape.value(loss).item();
        if value < best_loss {
            best_loss = value;
            best_res = tape.value(res).clone();
            best_ids = argmax_tokens(&best_res, restricted);
        }
        let vars = ProjNet::var_list(&net_vars);
        let grads = harvest_grads(&tape, &vars);
        drop(tape);
        let mut params = net.params_mut();
        opt.step(
            &mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(),
            &grads,
        );
    }

    Ok((best_res, best_ids))
}

fn argmax_tokens(res: &Tensor, restricted: &[TokenId]) -> Vec<TokenId> {
    let nd = res.shape()[1];
    res.data()
        .chunks(nd)
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            restricted[best]
        })
        .collect()
}

/// Human-readable verification query: the discrete prefix followed by the
/// class name.
pub fn render_discrete_prompt(
    tokenizer: &Tokenizer,
    state: &PromptState,
    class_name: &str,
) -> Result<String, PromptError> {
    if state.discrete_tokens.is_empty() {
        return Err(PromptError::EmptyTokens);
    }
    let prefix = tokenizer.detokenize(&state.discrete_tokens);
    Ok(format!("{prefix} {class_name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_toy_corpus;
    use crate::encoders::{DualEncoder, EncoderArch};

    fn test_encoder() -> DualEncoder {
        let corpus = synth_toy_corpus(4, 3, (16, 16), 5).unwrap();
        let tok = Tokenizer::from_corpus(&corpus);
        DualEncoder::new(
            EncoderArch {
                embed_dim: 16,
                conv1_ch: 4,
                conv2_ch: 6,
                txt_hidden: 12,
            },
            (16, 16),
            tok,
            3,
        )
        .unwrap()
    }

    #[test]
    fn predict_prob_uniform_when_embeddings_identical() {
        let enc = test_encoder();
        let p_c = Tensor::zeros(&[2, 16]);
        // identical class prompts -> identical embeddings -> uniform softmax
        let prompts: Vec<ClassPrompt> = (0..4)
            .map(|label| class_prompt(&enc, &p_c, "crimson disk", label).unwrap())
            .collect();
        let x = enc
            .embed_image(&synth_toy_corpus(4, 1, (16, 16), 6).unwrap().samples()[0].image)
            .unwrap();
        let p = predict_prob(&enc, &x, &prompts, 0.5).unwrap();
        assert_eq!(p.len(), 4);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for v in &p {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_prob_permutation_equivariant() {
        let enc = test_encoder();
        let mut rng = Rng::new(10);
        let p_c = Tensor::randn(&[3, 16], 0.1, &mut rng);
        let names = ["crimson disk", "azure square", "amber cross", "jade ring"];
        let prompts: Vec<ClassPrompt> = names
            .iter()
            .enumerate()
            .map(|(label, name)| class_prompt(&enc, &p_c, name, label).unwrap())
            .collect();
        let corpus = synth_toy_corpus(4, 1, (16, 16), 6).unwrap();
        let x = enc.embed_image(&corpus.samples()[2].image).unwrap();
        let p = predict_prob(&enc, &x, &prompts, 0.3).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled: Vec<ClassPrompt> = perm.iter().map(|&i| prompts[i].clone()).collect();
        let q = predict_prob(&enc, &x, &shuffled, 0.3).unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            assert_eq!(q[slot], p[orig], "slot {slot}");
        }
    }

    #[test]
    fn predict_prob_rejects_duplicates() {
        let enc = test_encoder();
        let p_c = Tensor::zeros(&[1, 16]);
        let a = class_prompt(&enc, &p_c, "crimson disk", 0).unwrap();
        let b = class_prompt(&enc, &p_c, "azure square", 0).unwrap();
        let x = Tensor::from_vec(&[16], (0..16).map(|i| i as f64 / 16.0).collect());
        assert!(matches!(
            predict_prob(&enc, &x, &[a, b], 0.5),
            Err(PromptError::DuplicateClass(0))
        ));
    }

    #[test]
    fn textual_constraint_analytic_cases() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        // single anchor: softmax over one element is 1, loss 0
        let one = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let v = loss_textual_constraint(&x, &one, 0.5).unwrap();
        assert!(v.abs() < 1e-12, "single anchor loss {v}");
        // four identical anchors: every softmax is uniform, loss = log 4
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let four = Tensor::stack_rows(&vec![row.clone(); 4]);
        let v = loss_textual_constraint(&x, &four, 0.5).unwrap();
        assert!((v - (4.0f64).ln()).abs() < 1e-6, "uniform anchors {v}");
    }

    #[test]
    fn nearest_anchor_tie_breaks_low() {
        let enc = test_encoder();
        let h = enc.token_embed();
        let d = enc.embed_dim();
        // p equals token 5's row exactly: the nearest is token 5 itself
        let row = Tensor::from_vec(&[1, d], h.data()[5 * d..6 * d].to_vec());
        let ids = nearest_anchor_ids(&row, h, &[2, 5, 7]).unwrap();
        assert_eq!(ids, vec![5]);
    }

    #[test]
    fn projection_zero_omega_exact_recovery() {
        let enc = test_encoder();
        let restricted: Vec<TokenId> = (2..enc.tokenizer().vocab_size()).collect();
        let d = enc.embed_dim();
        let ids = [4usize, 9, 3];
        let mut rows = Vec::new();
        for &id in &ids {
            rows.extend_from_slice(&enc.token_embed().data()[id * d..(id + 1) * d]);
        }
        let p_c = Tensor::from_vec(&[3, d], rows);
        let (res, tokens) = project_to_discrete(&p_c, &enc, &restricted, 0.0, 0, 0.01, 1).unwrap();
        assert_eq!(tokens, ids.to_vec());
        let h_r = gather_token_rows(enc.token_embed(), &restricted);
        let l = loss_projection(&enc, &res, &h_r, &p_c, 0.0).unwrap();
        assert!(l <= 1e-6, "exact rows should have zero loss, got {l}");
        // rows are valid one-hot distributions
        for row in res.data().chunks(restricted.len()) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn projection_with_omega_not_worse_than_greedy() {
        let enc = test_encoder();
        let restricted: Vec<TokenId> = (2..enc.tokenizer().vocab_size()).collect();
        let mut rng = Rng::new(17);
        let p_c = Tensor::randn(&[4, enc.embed_dim()], 0.12, &mut rng);
        let omega = 0.08;
        let (res, _tokens) =
            project_to_discrete(&p_c, &enc, &restricted, omega, 120, 0.02, 2).unwrap();
        let h_r = gather_token_rows(enc.token_embed(), &restricted);
        let net_loss = loss_projection(&enc, &res, &h_r, &p_c, omega).unwrap();

        let greedy_ids = nearest_anchor_ids(&p_c, enc.token_embed(), &restricted).unwrap();
        let mut greedy = Tensor::zeros(&[4, restricted.len()]);
        for (i, id) in greedy_ids.iter().enumerate() {
            let col = restricted.iter().position(|r| r == id).unwrap();
            greedy.data_mut()[i * restricted.len() + col] = 1.0;
        }
        let greedy_loss = loss_projection(&enc, &greedy, &h_r, &p_c, omega).unwrap();
        assert!(
            net_loss <= greedy_loss + 1e-3,
            "network {net_loss} worse than greedy {greedy_loss}"
        );
        for row in res.data().chunks(restricted.len()) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn render_prompt_and_round_trip() {
        let enc = test_encoder();
        let toks = ["a", "photo", "of", "a"];
        let ids: Vec<TokenId> = toks
            .iter()
            .map(|t| enc.tokenizer().tokenize(t)[0])
            .collect();
        let state = PromptState {
            p_c: Tensor::zeros(&[4, 16]),
            n: 4,
            lambda: 1.3,
            omega: 0.08,
            res: Tensor::zeros(&[4, 1]),
            restricted_vocab: vec![2],
            discrete_tokens: ids.clone(),
        };
        let text = render_discrete_prompt(enc.tokenizer(), &state, "jade ring").unwrap();
        assert_eq!(text, "a photo of a jade ring");
        // re-tokenizing the prefix reproduces the ids
        let prefix = enc.tokenizer().detokenize(&ids);
        assert_eq!(enc.tokenizer().tokenize(&prefix), ids);

        let empty = PromptState {
            discrete_tokens: vec![],
            ..state
        };
        assert!(matches!(
            render_discrete_prompt(enc.tokenizer(), &empty, "x"),
            Err(PromptError::EmptyTokens)
        ));
    }

    #[test]
    fn prompt_config_validation() {
        let mut c = PromptConfig::default();
        assert!(c.validate().is_ok());
        c.n = 0;
        assert!(matches!(c.validate(), Err(PromptError::ZeroLength)));
        c.n = 4;
        c.lambda = -0.1;
        assert!(matches!(
            c.validate(),
            Err(PromptError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn gradcheck_textual_constraint_inputs() {
        use crate::gradcheck;
        let mut rng = Rng::new(23);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let anchors = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let eval = |xs: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let xv = tape.param(xs.clone());
            let av = tape.leaf(anchors.clone());
            let l = g_loss_textual(&mut tape, xv, av, 0.7);
            tape.backward(l);
            (tape.value(l).item(), tape.grad(xv).unwrap().clone())
        };
        let (_, analytic) = eval(&x);
        let err = gradcheck::check_grad(&x, &analytic, |xs| eval(xs).0, gradcheck::FD_STEP);
        assert!(err <= gradcheck::FD_TOL, "rel err {err}");
    }
}
