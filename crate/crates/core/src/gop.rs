//! Global optimal perturbation (GOP) generation.
//!
//! A generator maps a fixed noise image to a perturbation pattern; the
//! pattern is projected into the σ-ball around each clean source image by the
//! clipping operator. Two class-discriminators and the frozen surrogate
//! encoder drive the adversarial objective: the perturbed images deviate from
//! their own embeddings, drift toward the adversarial class, fool the
//! discriminators and stay visually close to the clean images.
//!
//! Every loss has a graph builder (`*_g`, used in training) and a plain value
//! wrapper over the same graph code, so there is exactly one formula per
//! loss. All softmax computations are log-sum-exp stabilized.

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::LabeledCorpus;
use crate::encoders::DualEncoder;
use crate::graph::{Tape, Var};
use crate::nn::{harvest_grads, Adam, Conv2d, Linear, ResBlock};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GopError {
    #[error("shape mismatch: {got:?} vs {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("batch size {0} too small; InfoNCE-style losses need at least 2")]
    BatchTooSmall(usize),
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sigma {0} outside (0, 1)")]
    BadSigma(f64),
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
    #[error("loss weight {name} = {value} must be non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("at least one discriminator must be enabled")]
    NoDiscriminator,
    #[error("source and target corpora must be the same non-zero length (got {0} and {1})")]
    BadPairing(usize, usize),
    #[error("corpus part is not single-class")]
    MixedLabels,
    #[error("source and adversarial labels must differ")]
    EqualLabels,
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoders::EncoderError),
}

/// Which discriminator supplies the decision-mislead term of the generator
/// objective. `Both` averages the cross-entropies of the enabled
/// discriminators, so the dual-discriminator configuration combines both
/// pressures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AdvDiscriminator {
    Intra,
    Inter,
    Both,
}

/// Modality role of one discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DiscRole {
    Intra,
    Inter,
}

/// GOP training hyperparameters. Defaults: α=1, β=1, γ₁=0.3, γ₂=0.3, σ=0.04,
/// 50 epochs at batch 256 (clamped to the class size).
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GopTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub use_intra: bool,
    pub use_inter: bool,
    pub adv_disc: AdvDiscriminator,
}

impl Default for GopTrainConfig {
    fn default() -> Self {
        GopTrainConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma1: 0.3,
            gamma2: 0.3,
            sigma: 0.04,
            epochs: 50,
            batch_size: 256,
            lr_g: 2e-2,
            lr_d: 1e-4,
            seed: 0,
            use_intra: true,
            use_inter: true,
            adv_disc: AdvDiscriminator::Both,
        }
    }
}

impl GopTrainConfig {
    pub fn validate(&self) -> Result<(), GopError> {
        let weights: [(&'static str, f64); 4] = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ];
        for (name, value) in weights {
            if value < 0.0 {
                return Err(GopError::NegativeWeight { name, value });
            }
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(GopError::BadSigma(self.sigma));
        }
        if self.epochs == 0 {
            return Err(GopError::NoEpochs);
        }
        if !self.use_intra && !self.use_inter {
            return Err(GopError::NoDiscriminator);
        }
        Ok(())
    }
}

/// The trained perturbation together with everything verification needs.
/// `delta` is the raw generator output; applying it to a clean image always
/// goes through [`clip_apply`], which keeps extraction and verification
/// bit-consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct GopArtifact {
    pub delta: Tensor,
    pub sigma: f64,
    pub k_o: String,
    pub k_adv: String,
    pub seed: u64,
    pub surrogate_hash: String,
}

impl GopArtifact {
    /// x ⊕ δ for one clean image.
    pub fn apply(&self, clean: &Tensor) -> Result<Tensor, GopError> {
        clip_apply(clean, &self.delta, self.sigma)
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = self.delta.content_hash();
        h ^= (self.sigma.to_bits()).rotate_left(17);
        h ^= self.seed.rotate_left(33);
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

/// Per-epoch loss means plus budget instrumentation.
#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GopTrace {
    pub loss_g: Vec<f64>,
    pub loss_d1: Vec<f64>,
    pub loss_d2: Vec<f64>,
    pub loss_deviate: Vec<f64>,
    pub loss_near: Vec<f64>,
    pub loss_adv: Vec<f64>,
    pub loss_con: Vec<f64>,
    /// Largest per-pixel |x′ − x| seen at any training step.
    pub max_abs_dev: f64,
    /// Extremes of x′ over the whole run.
    pub out_min: f64,
    pub out_max: f64,
}

// ---- clipping ----

/// Differentiable-almost-everywhere clipping:
/// `x′ = clamp(min(x + σ, max(g, x − σ)), 0, 1)` elementwise.
pub fn clip_apply(image: &Tensor, gen_output: &Tensor, sigma: f64) -> Result<Tensor, GopError> {
    if image.shape() != gen_output.shape() {
        return Err(GopError::ShapeMismatch {
            got: gen_output.shape().to_vec(),
            want: image.shape().to_vec(),
        });
    }
    if sigma <= 0.0 {
        return Err(GopError::BadSigma(sigma));
    }
    let data = gen_output
        .data()
        .iter()
        .zip(image.data())
        .map(|(&g, &x)| (x + sigma).min(g.max(x - sigma)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_vec(image.shape(), data))
}

// ---- shared softmax machinery ----

/// Cosine-similarity matrix of two row sets, scaled by 1/τ. Rows are
/// normalized inside, so callers may pass raw embeddings.
pub fn g_cosine_logits(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Var {
    let na = tape.normalize_rows(a);
    let nb = tape.normalize_rows(b);
    let sims = tape.matmul_nt(na, nb);
    tape.scale(sims, 1.0 / tau)
}

/// Mean over rows of the diagonal log-softmax of the scaled similarity
/// matrix. This is the common core of the contrastive terms: `loss_deviate`
/// is this value, `loss_near` is its negation, and the discriminator
/// consistency terms subtract it scaled by γ.
pub fn g_log_softmax_diag_mean(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Var {
    let logits = g_cosine_logits(tape, a, b, tau);
    let n = tape.value(logits).shape()[0];
    let lsm = tape.log_softmax_rows(logits);
    let diag = tape.pick_per_row(lsm, (0..n).collect());
    tape.mean_all(diag)
}

/// Mean cross-entropy of logit rows against per-row target classes.
pub fn g_ce_mean(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(lsm, targets.to_vec());
    let mean = tape.mean_all(picked);
    tape.scale(mean, -1.0)
}

fn validate_pair_batch(a: &Tensor, b: &Tensor, tau: f64) -> Result<(), GopError> {
    if a.shape() != b.shape() {
        return Err(GopError::ShapeMismatch {
            got: b.shape().to_vec(),
            want: a.shape().to_vec(),
        });
    }
    if a.shape().len() != 2 || a.shape()[0] < 2 {
        return Err(GopError::BatchTooSmall(
            a.shape().first().copied().unwrap_or(0),
        ));
    }
    if tau <= 0.0 {
        return Err(GopError::BadTau(tau));
    }
    Ok(())
}

// ---- generator-side losses ----

/// Pushes each adversarial embedding away from its own clean embedding,
/// relative to the batch: mean log-softmax of the diagonal similarity.
/// Minimizing it makes the diagonal the *least* likely entry.
pub fn loss_deviate(emb_adv: &Tensor, emb_clean: &Tensor, tau: f64) -> Result<f64, GopError> {
    validate_pair_batch(emb_adv, emb_clean, tau)?;
    let mut tape = Tape::new();
    let a = tape.leaf(emb_adv.clone());
    let b = tape.leaf(emb_clean.clone());
    let l = g_log_softmax_diag_mean(&mut tape, a, b, tau);
    Ok(tape.value(l).item())
}

/// Standard InfoNCE pulling each adversarial embedding toward its paired
/// target embedding, with the rest of the batch as negatives.
pub fn loss_near(emb_adv: &Tensor, emb_target: &Tensor, tau: f64) -> Result<f64, GopError> {
    validate_pair_batch(emb_adv, emb_target, tau)?;
    let mut tape = Tape::new();
    let a = tape.leaf(emb_adv.clone());
    let b = tape.leaf(emb_target.clone());
    let l = g_log_softmax_diag_mean(&mut tape, a, b, tau);
    Ok(-tape.value(l).item())
}

/// Transferability loss: deviate + near.
pub fn loss_trans(
    emb_adv: &Tensor,
    emb_clean: &Tensor,
    emb_target: &Tensor,
    tau: f64,
) -> Result<f64, GopError> {
    Ok(loss_deviate(emb_adv, emb_clean, tau)? + loss_near(emb_adv, emb_target, tau)?)
}

/// Mean cross-entropy of discriminator logits against the adversarial label.
pub fn loss_adv(disc_logits: &Tensor, k_adv: usize) -> Result<f64, GopError> {
    if disc_logits.shape().len() != 2 {
        return Err(GopError::ShapeMismatch {
            got: disc_logits.shape().to_vec(),
            want: alloc::vec![0, 0],
        });
    }
    let classes = disc_logits.shape()[1];
    if k_adv >= classes {
        return Err(GopError::LabelOutOfRange {
            label: k_adv,
            classes,
        });
    }
    let n = disc_logits.shape()[0];
    let mut tape = Tape::new();
    let l = tape.leaf(disc_logits.clone());
    let ce = g_ce_mean(&mut tape, l, &alloc::vec![k_adv; n]);
    Ok(tape.value(ce).item())
}

/// Mean over the batch of the flattened L2 distance between adversarial and
/// clean images.
pub fn loss_con(x_adv: &Tensor, x_clean: &Tensor) -> Result<f64, GopError> {
    if x_adv.shape() != x_clean.shape() {
        return Err(GopError::ShapeMismatch {
            got: x_clean.shape().to_vec(),
            want: x_adv.shape().to_vec(),
        });
    }
    let n = x_adv.shape()[0];
    let flat = x_adv.numel() / n;
    let mut tape = Tape::new();
    let a = tape.leaf(x_adv.clone());
    let b = tape.leaf(x_clean.clone());
    let l = g_loss_con(&mut tape, a, b, n, flat);
    Ok(tape.value(l).item())
}

pub fn g_loss_con(tape: &mut Tape, x_adv: Var, x_clean: Var, n: usize, flat: usize) -> Var {
    let diff = tape.sub(x_adv, x_clean);
    let rows = tape.reshape(diff, &[n, flat]);
    let norms = tape.row_norms(rows);
    tape.mean_all(norms)
}

/// Composite generator objective: `trans + α·adv + β·con`. With α=β=0 this is
/// exactly the transferability loss.
pub fn loss_g_total(trans: f64, adv: f64, con: f64, alpha: f64, beta: f64) -> f64 {
    trans + alpha * adv + beta * con
}

// ---- discriminator-side losses ----

/// Basic discriminator objective: classify clean images as the source label
/// and adversarial images as the adversarial label.
pub fn loss_d_basic(
    logits_clean: &Tensor,
    logits_adv: &Tensor,
    k_o: usize,
    k_adv: usize,
) -> Result<f64, GopError> {
    Ok(loss_adv(logits_clean, k_o)? + loss_adv(logits_adv, k_adv)?)
}

/// Image–image consistency term shared by the discriminator objectives: the
/// same diagonal log-softmax form as the contrastive losses, evaluated
/// between adversarial and paired embeddings.
pub fn consistency_term(emb_adv: &Tensor, emb_other: &Tensor, tau: f64) -> Result<f64, GopError> {
    validate_pair_batch(emb_adv, emb_other, tau)?;
    let mut tape = Tape::new();
    let a = tape.leaf(emb_adv.clone());
    let b = tape.leaf(emb_other.clone());
    let l = g_log_softmax_diag_mean(&mut tape, a, b, tau);
    Ok(tape.value(l).item())
}

/// Intra-modal discriminator objective: basic loss minus γ₁ times the
/// image–image consistency between adversarial and target-image embeddings.
/// With γ₁=0 it reduces exactly to the basic loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_d1(
    logits_clean: &Tensor,
    logits_adv: &Tensor,
    k_o: usize,
    k_adv: usize,
    emb_adv: &Tensor,
    emb_target_img: &Tensor,
    gamma1: f64,
    tau: f64,
) -> Result<f64, GopError> {
    let basic = loss_d_basic(logits_clean, logits_adv, k_o, k_adv)?;
    if gamma1 == 0.0 {
        return Ok(basic);
    }
    Ok(basic - gamma1 * consistency_term(emb_adv, emb_target_img, tau)?)
}

/// Inter-modal discriminator objective: as [`loss_d1`] but the consistency
/// term pairs adversarial-image embeddings with target-caption embeddings.
#[allow(clippy::too_many_arguments)]
pub fn loss_d2(
    logits_clean: &Tensor,
    logits_adv: &Tensor,
    k_o: usize,
    k_adv: usize,
    emb_adv: &Tensor,
    emb_target_txt: &Tensor,
    gamma2: f64,
    tau: f64,
) -> Result<f64, GopError> {
    let basic = loss_d_basic(logits_clean, logits_adv, k_o, k_adv)?;
    if gamma2 == 0.0 {
        return Ok(basic);
    }
    Ok(basic - gamma2 * consistency_term(emb_adv, emb_target_txt, tau)?)
}

// ---- networks ----

const GAN_CHANNELS: usize = 16;

/// Discriminator pre-fit schedule (class initialization before alternation).
const DISC_PREFIT_STEPS: usize = 150;
const DISC_PREFIT_LR: f64 = 0.02;

/// Residual conv generator from fixed noise to a perturbation pattern.
///
/// The output is anchored to a base image (the source-class mean) plus a
/// tanh-bounded offset. The clipping operator only passes gradients where the
/// pattern lies inside the σ-band of a clean image, so the pattern must start
/// on the image manifold; a free-floating conv output would saturate the clip
/// everywhere and never train.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv2d,
    blocks: [ResBlock; 2],
    head: Conv2d,
    /// Amplitude of the tanh-bounded conv texture, kept inside the clip band
    /// (σ/2). A larger texture freezes outside the band and zeroes every
    /// downstream gradient.
    texture_amp: f64,
    /// Learnable per-pixel component added after the tanh squash. Gives the
    /// optimizer direct pattern coordinates; the conv stack alone saturates
    /// its tanh within a few steps and freezes, far short of the 50-step
    /// budget.
    bias_map: Tensor,
    delta0: Tensor,
    base: Tensor,
}

impl Generator {
    pub fn new(image_shape: (usize, usize), base: Tensor, sigma: f64, rng: &mut Rng) -> Self {
        let (h, w) = image_shape;
        assert_eq!(
            base.shape(),
            &[1, 3, h, w],
            "generator base must match image shape"
        );
        Generator {
            stem: Conv2d::new(3, GAN_CHANNELS, 1, rng),
            blocks: [
                ResBlock::new(GAN_CHANNELS, rng),
                ResBlock::new(GAN_CHANNELS, rng),
            ],
            head: Conv2d::with_std(GAN_CHANNELS, 3, 1, 0.02, rng),
            texture_amp: 0.5 * sigma,
            bias_map: Tensor::zeros(&[1, 3, h, w]),
            delta0: Tensor::randn(&[1, 3, h, w], 1.0, rng),
            base,
        }
    }

    pub fn delta0(&self) -> &Tensor {
        &self.delta0
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> GenVars {
        let bias_map = if trainable {
            tape.param(self.bias_map.clone())
        } else {
            tape.leaf(self.bias_map.clone())
        };
        GenVars {
            stem: self.stem.bind(tape, trainable),
            blocks: [
                self.blocks[0].bind(tape, trainable),
                self.blocks[1].bind(tape, trainable),
            ],
            head: self.head.bind(tape, trainable),
            bias_map,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &GenVars) -> Var {
        let x = tape.leaf(self.delta0.clone());
        let h = self.stem.forward_with(tape, &vars.stem, x);
        let h = tape.relu(h);
        let h = self.blocks[0].forward(tape, &vars.blocks[0], h);
        let h = self.blocks[1].forward(tape, &vars.blocks[1], h);
        let conv_out = self.head.forward_with(tape, &vars.head, h);
        let squashed = tape.tanh(conv_out);
        let textured = tape.scale(squashed, self.texture_amp);
        let offset = tape.add(textured, vars.bias_map);
        let anchor = tape.leaf(self.base.clone());
        tape.add(anchor, offset)
    }

    /// Current perturbation pattern, 3×H×W.
    pub fn pattern(&self) -> Tensor {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars);
        let shape: Vec<usize> = tape.value(out).shape()[1..].to_vec();
        tape.value(out).clone().reshape(&shape)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = alloc::vec![&mut self.stem.w, &mut self.stem.b,];
        for b in self.blocks.iter_mut() {
            v.push(&mut b.c1.w);
            v.push(&mut b.c1.b);
            v.push(&mut b.c2.w);
            v.push(&mut b.c2.b);
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v.push(&mut self.bias_map);
        v
    }

    fn var_list(vars: &GenVars) -> Vec<Var> {
        let mut v: Vec<Var> = vars.stem.to_vec();
        for b in &vars.blocks {
            v.extend(b[0]);
            v.extend(b[1]);
        }
        v.extend(vars.head);
        v.push(vars.bias_map);
        v
    }
}

struct GenVars {
    stem: [Var; 2],
    blocks: [[[Var; 2]; 2]; 2],
    head: [Var; 2],
    bias_map: Var,
}

/// Class discriminator: image → logit per label, routed through the frozen
/// surrogate's shared embedding space.
///
/// The intra-modal discriminator classifies image embeddings with a small
/// MLP; the inter-modal discriminator scores image embeddings against a
/// learnable text anchor per class (initialized from hand-crafted class
/// captions). Routing through the surrogate keeps the decision-mislead
/// gradient in the same semantic space the retrieval verdict is read from; a
/// pixel-space classifier's class boundary is unreachable inside the σ-ball
/// and stalls the generator.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub role: DiscRole,
    hidden: Linear,
    out: Linear,
    anchors: Tensor,
    anchor_scale: Tensor,
}

impl Discriminator {
    /// `text_anchors` must be a |𝒦|×d matrix of class text embeddings; the
    /// inter-modal role starts from them, the intra-modal role ignores them.
    pub fn new(
        classes: usize,
        embed_dim: usize,
        role: DiscRole,
        text_anchors: &Tensor,
        rng: &mut Rng,
    ) -> Self {
        assert_eq!(text_anchors.shape(), &[classes, embed_dim]);
        Discriminator {
            role,
            hidden: Linear::new(embed_dim, 2 * classes.max(8), rng),
            out: Linear::new(2 * classes.max(8), classes, rng),
            anchors: text_anchors.clone(),
            anchor_scale: Tensor::scalar(crate::math::ln(14.0)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscVars {
        let (anchors, anchor_scale) = if trainable {
            (
                tape.param(self.anchors.clone()),
                tape.param(self.anchor_scale.clone()),
            )
        } else {
            (
                tape.leaf(self.anchors.clone()),
                tape.leaf(self.anchor_scale.clone()),
            )
        };
        DiscVars {
            hidden: self.hidden.bind(tape, trainable),
            out: self.out.bind(tape, trainable),
            anchors,
            anchor_scale,
        }
    }

    /// Logits from already-computed image embeddings (N×d unit rows).
    pub fn forward_embs(&self, tape: &mut Tape, vars: &DiscVars, embs: Var) -> Var {
        match self.role {
            DiscRole::Intra => {
                let h = Linear::forward(tape, &vars.hidden, embs);
                let h = tape.relu(h);
                Linear::forward(tape, &vars.out, h)
            }
            DiscRole::Inter => {
                let anchors_unit = tape.normalize_rows(vars.anchors);
                let sims = tape.matmul_nt(embs, anchors_unit);
                let scale = tape.exp(vars.anchor_scale);
                tape.mul_scalar_var(sims, scale)
            }
        }
    }

    /// Full image → logits pass through the frozen surrogate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &DiscVars,
        surrogate: &DualEncoder,
        enc_vars: &crate::encoders::EncoderVars,
        images: Var,
    ) -> Var {
        let embs = surrogate.g_embed_images(tape, enc_vars, images);
        self.forward_embs(tape, vars, embs)
    }

    /// Logits for an image batch, no gradients.
    pub fn logits(&self, surrogate: &DualEncoder, batch: &Tensor) -> Result<Tensor, GopError> {
        let embs = surrogate.embed_images(batch)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.leaf(embs);
        let out = self.forward_embs(&mut tape, &vars, e);
        Ok(tape.value(out).clone())
    }

    /// Fit the discriminator as a plain class classifier on labelled
    /// embeddings. Both discriminators are pre-fitted on the source and
    /// target parts before the adversarial alternation so their class logits
    /// reflect genuine class geometry, not just the relabelling game.
    pub fn class_fit(&mut self, embs: &Tensor, labels: &[usize], steps: usize, lr: f64) {
        let mut opt = Adam::new(lr);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, true);
            let e = tape.leaf(embs.clone());
            let logits = self.forward_embs(&mut tape, &vars, e);
            let loss = g_ce_mean(&mut tape, logits, labels);
            tape.backward(loss);
            let bound = Discriminator::var_list(&vars);
            let grads = harvest_grads(&tape, &bound);
            drop(tape);
            let mut params = self.params_mut();
            opt.step(
                &mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(),
                &grads,
            );
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
            &mut self.anchors,
            &mut self.anchor_scale,
        ]
    }

    fn var_list(vars: &DiscVars) -> Vec<Var> {
        let mut v: Vec<Var> = vars.hidden.to_vec();
        v.extend(vars.out);
        v.push(vars.anchors);
        v.push(vars.anchor_scale);
        v
    }
}

pub struct DiscVars {
    hidden: [Var; 2],
    out: [Var; 2],
    anchors: Var,
    anchor_scale: Var,
}

// ---- training ----

struct PairData {
    clean_images: Vec<Tensor>,
    clean_embs: Tensor,
    target_img_embs: Tensor,
    target_txt_embs: Tensor,
    k_o: usize,
    k_adv: usize,
}

fn prepare_pair(
    source: &LabeledCorpus,
    target: &LabeledCorpus,
    surrogate: &DualEncoder,
) -> Result<PairData, GopError> {
    if source.is_empty() || source.len() != target.len() {
        return Err(GopError::BadPairing(source.len(), target.len()));
    }
    let k_o = source.samples()[0].label;
    let k_adv = target.samples()[0].label;
    if source.samples().iter().any(|s| s.label != k_o)
        || target.samples().iter().any(|s| s.label != k_adv)
    {
        return Err(GopError::MixedLabels);
    }
    if k_o == k_adv {
        return Err(GopError::EqualLabels);
    }

    let embed_all = |c: &LabeledCorpus| -> Result<Tensor, GopError> {
        let rows: Result<Vec<Tensor>, _> = c
            .samples()
            .iter()
            .map(|s| surrogate.embed_image(&s.image))
            .collect();
        Ok(Tensor::stack_rows(&rows?))
    };
    let clean_embs = embed_all(source)?;
    let target_img_embs = embed_all(target)?;
    let txt_rows: Result<Vec<Tensor>, crate::encoders::EncoderError> = target
        .samples()
        .iter()
        .map(|s| surrogate.embed_text(&s.caption))
        .collect();
    let target_txt_embs = Tensor::stack_rows(&txt_rows?);

    Ok(PairData {
        clean_images: source.samples().iter().map(|s| s.image.clone()).collect(),
        clean_embs,
        target_img_embs,
        target_txt_embs,
        k_o,
        k_adv,
    })
}

fn slice_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(&[idx.len(), d], data)
}

/// Train the generator and discriminators against a frozen surrogate and
/// return the perturbation artifact plus training traces. Per batch this runs
/// one step on the intra-modal discriminator, one on the inter-modal
/// discriminator, then one generator step. Deterministic in the config seed.
pub fn train_gop(
    source: &LabeledCorpus,
    target: &LabeledCorpus,
    surrogate: &DualEncoder,
    config: &GopTrainConfig,
) -> Result<(GopArtifact, GopTrace), GopError> {
    config.validate()?;
    let pair = prepare_pair(source, target, surrogate)?;
    let classes = source.class_names().len();
    let (h, w) = source.image_shape();
    let tau = surrogate.tau();
    let n = pair.clean_images.len();

    let mut rng = Rng::new(config.seed ^ 0x676f_7000_0000_0000); // "gop"
                                                                 // Anchor the generator at the mean target image: the class-level drift
                                                                 // direction that the in-batch contrastive terms cannot supply themselves.
    let mut base = Tensor::zeros(&[3, h, w]);
    for s in target.samples() {
        base.add_scaled(&s.image, 1.0 / n as f64);
    }
    let mut gen = Generator::new(
        (h, w),
        base.reshape(&[1, 3, h, w]),
        config.sigma,
        &mut rng.split(),
    );

    // Hand-crafted class text anchors for the inter-modal discriminator.
    let anchor_rows: Result<Vec<Tensor>, crate::encoders::EncoderError> = source
        .class_names()
        .iter()
        .map(|name| surrogate.embed_text(&alloc::format!("a photo of a {name}")))
        .collect();
    let text_anchors = Tensor::stack_rows(&anchor_rows?);
    let d = surrogate.embed_dim();
    let mut d1 = Discriminator::new(classes, d, DiscRole::Intra, &text_anchors, &mut rng.split());
    let mut d2 = Discriminator::new(classes, d, DiscRole::Inter, &text_anchors, &mut rng.split());

    // Pre-fit both discriminators on genuine class geometry.
    {
        let mut embs = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(2 * n);
        for row in 0..n {
            embs.push(Tensor::from_vec(&[d], pair.clean_embs.row(row).to_vec()));
            labels.push(pair.k_o);
        }
        for row in 0..n {
            embs.push(Tensor::from_vec(
                &[d],
                pair.target_img_embs.row(row).to_vec(),
            ));
            labels.push(pair.k_adv);
        }
        let embs = Tensor::stack_rows(&embs);
        d1.class_fit(&embs, &labels, DISC_PREFIT_STEPS, DISC_PREFIT_LR);
        d2.class_fit(&embs, &labels, DISC_PREFIT_STEPS, DISC_PREFIT_LR);
    }

    let mut opt_g = Adam::new(config.lr_g);
    let mut opt_d1 = Adam::new(config.lr_d);
    let mut opt_d2 = Adam::new(config.lr_d);

    // Discriminators actually driving the generator's decision-mislead term.
    let adv_intra = config.use_intra
        && matches!(
            config.adv_disc,
            AdvDiscriminator::Intra | AdvDiscriminator::Both
        );
    let adv_inter = config.use_inter
        && matches!(
            config.adv_disc,
            AdvDiscriminator::Inter | AdvDiscriminator::Both
        );
    // Fall back to whatever is enabled when the preferred one is not.
    let (adv_intra, adv_inter) = if !adv_intra && !adv_inter {
        (config.use_intra, config.use_inter)
    } else {
        (adv_intra, adv_inter)
    };

    let batch_size = config.batch_size.clamp(2, n.max(2));
    let mut trace = GopTrace {
        out_min: f64::INFINITY,
        out_max: f64::NEG_INFINITY,
        ..Default::default()
    };

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 7];
        let mut steps = 0usize;

        let mut start = 0;
        while start < order.len() {
            let mut end = (start + batch_size).min(order.len());
            if order.len() - end == 1 {
                end = order.len();
            }
            let idx = &order[start..end];
            start = end;
            if idx.len() < 2 {
                break;
            }
            let nb = idx.len();

            let mut clean_data = Vec::with_capacity(nb * 3 * h * w);
            for &i in idx {
                clean_data.extend_from_slice(pair.clean_images[i].data());
            }
            let clean_batch = Tensor::from_vec(&[nb, 3, h, w], clean_data);
            let clean_embs = slice_rows(&pair.clean_embs, idx);
            let target_img_embs = slice_rows(&pair.target_img_embs, idx);
            let target_txt_embs = slice_rows(&pair.target_txt_embs, idx);

            // Fixed generator output for the discriminator steps.
            let pattern = gen.pattern();
            let adv_rows: Result<Vec<Tensor>, GopError> = idx
                .iter()
                .map(|&i| clip_apply(&pair.clean_images[i], &pattern, config.sigma))
                .collect();
            let adv_rows = adv_rows?;
            let mut adv_data = Vec::with_capacity(nb * 3 * h * w);
            for r in &adv_rows {
                adv_data.extend_from_slice(r.data());
            }
            let adv_batch = Tensor::from_vec(&[nb, 3, h, w], adv_data);
            let emb_adv = surrogate.embed_images(&adv_batch)?;

            if config.use_intra {
                let c1 = consistency_term(&emb_adv, &target_img_embs, tau)?;
                let l = disc_step(
                    &mut d1,
                    &mut opt_d1,
                    &clean_embs,
                    &emb_adv,
                    pair.k_o,
                    pair.k_adv,
                    config.gamma1,
                    c1,
                );
                sums[1] += l;
            }
            if config.use_inter {
                let c2 = consistency_term(&emb_adv, &target_txt_embs, tau)?;
                let l = disc_step(
                    &mut d2,
                    &mut opt_d2,
                    &clean_embs,
                    &emb_adv,
                    pair.k_o,
                    pair.k_adv,
                    config.gamma2,
                    c2,
                );
                sums[2] += l;
            }

            // Generator step.
            let mut tape = Tape::new();
            let gen_vars = gen.bind(&mut tape, true);
            let enc_vars = surrogate.bind(&mut tape, false);
            let d1_vars = if adv_intra {
                Some(d1.bind(&mut tape, false))
            } else {
                None
            };
            let d2_vars = if adv_inter {
                Some(d2.bind(&mut tape, false))
            } else {
                None
            };

            let pattern_var = gen.forward(&mut tape, &gen_vars);
            let flat = 3 * h * w;
            let pattern_rows = tape.reshape(pattern_var, &[1, flat]);
            let repeated = tape.concat_rows(&alloc::vec![pattern_rows; nb]);
            let stacked = tape.reshape(repeated, &[nb, 3, h, w]);
            let x_adv = tape.clip_apply(stacked, &clean_batch, config.sigma);

            let emb_adv_g = surrogate.g_embed_images(&mut tape, &enc_vars, x_adv);
            let clean_leaf = tape.leaf(clean_embs.clone());
            let target_leaf = tape.leaf(target_img_embs.clone());
            let l_dev = g_log_softmax_diag_mean(&mut tape, emb_adv_g, clean_leaf, tau);
            let l_near_pos = g_log_softmax_diag_mean(&mut tape, emb_adv_g, target_leaf, tau);
            let l_near = tape.scale(l_near_pos, -1.0);
            let l_trans = tape.add(l_dev, l_near);

            let adv_targets = alloc::vec![pair.k_adv; nb];
            let mut adv_terms: Vec<Var> = Vec::new();
            if let Some(vars1) = &d1_vars {
                let logits = d1.forward_embs(&mut tape, vars1, emb_adv_g);
                adv_terms.push(g_ce_mean(&mut tape, logits, &adv_targets));
            }
            if let Some(vars2) = &d2_vars {
                let logits = d2.forward_embs(&mut tape, vars2, emb_adv_g);
                adv_terms.push(g_ce_mean(&mut tape, logits, &adv_targets));
            }
            let l_adv = match adv_terms.len() {
                1 => adv_terms[0],
                _ => {
                    let sum = tape.add(adv_terms[0], adv_terms[1]);
                    tape.scale(sum, 0.5)
                }
            };

            let clean_img_leaf = tape.leaf(clean_batch.clone());
            let l_con = g_loss_con(&mut tape, x_adv, clean_img_leaf, nb, flat);

            let a_term = tape.scale(l_adv, config.alpha);
            let b_term = tape.scale(l_con, config.beta);
            let partial = tape.add(l_trans, a_term);
            let l_g = tape.add(partial, b_term);

            tape.backward(l_g);
            sums[0] += tape.value(l_g).item();
            sums[3] += tape.value(l_dev).item();
            sums[4] += tape.value(l_near).item();
            sums[5] += tape.value(l_adv).item();
            sums[6] += tape.value(l_con).item();

            // Budget instrumentation on the applied batch.
            let applied = tape.value(x_adv);
            trace.max_abs_dev = trace.max_abs_dev.max(applied.max_abs_diff(&clean_batch));
            trace.out_min = trace.out_min.min(applied.min());
            trace.out_max = trace.out_max.max(applied.max());

            let gvars = Generator::var_list(&gen_vars);
            let grads = harvest_grads(&tape, &gvars);
            drop(tape);
            let mut params = gen.params_mut();
            opt_g.step(
                &mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(),
                &grads,
            );

            steps += 1;
        }

        let denom = steps.max(1) as f64;
        trace.loss_g.push(sums[0] / denom);
        trace.loss_d1.push(sums[1] / denom);
        trace.loss_d2.push(sums[2] / denom);
        trace.loss_deviate.push(sums[3] / denom);
        trace.loss_near.push(sums[4] / denom);
        trace.loss_adv.push(sums[5] / denom);
        trace.loss_con.push(sums[6] / denom);
    }

    let artifact = GopArtifact {
        delta: gen.pattern(),
        sigma: config.sigma,
        k_o: source.class_names()[pair.k_o].clone(),
        k_adv: source.class_names()[pair.k_adv].clone(),
        seed: config.seed,
        surrogate_hash: surrogate.param_hash_hex(),
    };
    Ok((artifact, trace))
}

#[allow(clippy::too_many_arguments)]
fn disc_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    clean_embs: &Tensor,
    adv_embs: &Tensor,
    k_o: usize,
    k_adv: usize,
    gamma: f64,
    consistency: f64,
) -> f64 {
    let nb = clean_embs.shape()[0];
    let mut tape = Tape::new();
    let vars = disc.bind(&mut tape, true);
    let xc = tape.leaf(clean_embs.clone());
    let xa = tape.leaf(adv_embs.clone());
    let logits_c = disc.forward_embs(&mut tape, &vars, xc);
    let logits_a = disc.forward_embs(&mut tape, &vars, xa);
    let ce_c = g_ce_mean(&mut tape, logits_c, &alloc::vec![k_o; nb]);
    let ce_a = g_ce_mean(&mut tape, logits_a, &alloc::vec![k_adv; nb]);
    let basic = tape.add(ce_c, ce_a);
    // The consistency term does not depend on discriminator parameters, so it
    // enters the reported objective as a constant offset.
    let loss = tape.add_scalar(basic, -gamma * consistency);
    tape.backward(loss);
    let value = tape.value(loss).item();
    let dvars = Discriminator::var_list(&vars);
    let grads = harvest_grads(&tape, &dvars);
    drop(tape);
    let mut params = disc.params_mut();
    opt.step(
        &mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(),
        &grads,
    );
    value
}
