//! Cue-guided ownership verification and evaluation metrics.
//!
//! Verification queries pair perturbed source-class images with per-class
//! prompt-rendered texts. A suspicious model is read through the minimal
//! [`SimilarityScorer`] interface (image + candidate texts → scores), so
//! local encoders and remote black-box endpoints are interchangeable.
//! Queries are stateless reads against a frozen model; report assembly is a
//! deterministic ordered reduction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::corpus::LabeledCorpus;
use crate::encoders::{cosine_sim, DualEncoder, Tokenizer};
use crate::gop::GopArtifact;
use crate::math;
use crate::prompt::{render_discrete_prompt, PromptArtifact};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("shape mismatch: {got:?} vs {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("K = {k} out of range for {texts} candidate texts")]
    KOutOfRange { k: usize, texts: usize },
    #[error("no candidate texts")]
    NoTexts,
    #[error("no verification pairs")]
    EmptyPairs,
    #[error("perturbation was extracted for ({gop_o:?} -> {gop_adv:?}) but the prompt for ({prompt_o:?} -> {prompt_adv:?})")]
    ArtifactLabelMismatch {
        gop_o: String,
        gop_adv: String,
        prompt_o: String,
        prompt_adv: String,
    },
    #[error("label {0:?} not present in corpus")]
    MissingLabel(String),
    #[error("query image {index} exceeds budget: |x'-x| = {dev} > sigma {sigma}")]
    BudgetViolated { index: usize, dev: f64, sigma: f64 },
    #[error("thresholds invalid: {0}")]
    BadThresholds(String),
    #[error("image side {0} smaller than the 11-pixel SSIM window")]
    TooSmallForSsim(usize),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error("prompt error: {0}")]
    Prompt(#[from] crate::prompt::PromptError),
    #[error("perturbation error: {0}")]
    Gop(#[from] crate::gop::GopError),
}

/// Decision thresholds. `eps1`/`eps2` are the irrelevance and verification
/// levels quoted in reports; `eps3` drives the four-case decision and
/// `clean_floor` is the minimum clean retrieval competence.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Thresholds {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub clean_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            eps1: 0.15,
            eps2: 0.65,
            eps3: 0.5,
            clean_floor: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(0.0..=1.0).contains(&self.eps1) || !(0.0..=1.0).contains(&self.eps2) {
            return Err(VerifyError::BadThresholds(format!(
                "eps1 {} and eps2 {} must lie in [0,1]",
                self.eps1, self.eps2
            )));
        }
        if self.eps1 >= self.eps2 {
            return Err(VerifyError::BadThresholds(format!(
                "eps1 {} must be strictly below eps2 {}",
                self.eps1, self.eps2
            )));
        }
        if !(self.eps3 > 0.0 && self.eps3 <= 1.0) {
            return Err(VerifyError::BadThresholds(format!(
                "eps3 {} outside (0,1]",
                self.eps3
            )));
        }
        if !(0.0..=1.0).contains(&self.clean_floor) {
            return Err(VerifyError::BadThresholds(format!(
                "clean_floor {} outside [0,1]",
                self.clean_floor
            )));
        }
        Ok(())
    }
}

/// The four possible verification outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OwnershipDecision {
    /// The model fails clean retrieval; its behaviour says nothing.
    Uncertain,
    /// Verification queries still resolve to the original label.
    Unverifiable,
    /// Fingerprint behaviour absent.
    Unviolated,
    /// Fingerprint behaviour present: the model was trained on the corpus.
    Violated,
}

/// Sequenced four-case decision: competence gate, original-label gate,
/// fingerprint gate, otherwise unviolated. Total over all inputs.
pub fn decide_ownership(
    clean_r1: f64,
    vsr_adv: f64,
    vsr_orig: f64,
    th: &Thresholds,
) -> OwnershipDecision {
    if clean_r1 < th.clean_floor {
        OwnershipDecision::Uncertain
    } else if vsr_orig >= th.eps3 {
        OwnershipDecision::Unverifiable
    } else if vsr_adv >= th.eps3 {
        OwnershipDecision::Violated
    } else {
        OwnershipDecision::Unviolated
    }
}

/// Minimal query interface to a suspicious model: submit one image and a
/// list of candidate texts, receive one similarity score per text.
pub trait SimilarityScorer {
    fn similarities(&self, image: &Tensor, texts: &[String]) -> Result<Vec<f64>, VerifyError>;
}

impl SimilarityScorer for DualEncoder {
    fn similarities(&self, image: &Tensor, texts: &[String]) -> Result<Vec<f64>, VerifyError> {
        let img = self.embed_image(image)?;
        texts
            .iter()
            .map(|t| {
                let e = self.embed_text(t)?;
                Ok(cosine_sim(&img, &e)?)
            })
            .collect()
    }
}

/// One verification query: a perturbed source image plus one rendered text
/// per class.
#[derive(Clone, Debug)]
pub struct VerificationPair {
    pub query_image: Tensor,
    /// One rendered text per class, in label order.
    pub query_texts: Vec<String>,
    pub expected_label: usize,
    pub clean_label: usize,
    /// Index of the source sample inside the corpus.
    pub source_index: usize,
}

/// Queries plus the label context they were built under.
#[derive(Clone, Debug)]
pub struct VerificationSet {
    pub pairs: Vec<VerificationPair>,
    pub class_names: Vec<String>,
    pub k_o: usize,
    pub k_adv: usize,
    pub sigma: f64,
}

/// Build one verification pair per source-class image: the perturbation is
/// applied through the clipping rule and a prompt-rendered retrieval text is
/// produced for every label. Fails when the perturbation and prompt artifacts
/// disagree on their labels.
pub fn build_verification_set(
    corpus: &LabeledCorpus,
    gop: &GopArtifact,
    prompt: &PromptArtifact,
    tokenizer: &Tokenizer,
) -> Result<VerificationSet, VerifyError> {
    if gop.k_o != prompt.k_o || gop.k_adv != prompt.k_adv {
        return Err(VerifyError::ArtifactLabelMismatch {
            gop_o: gop.k_o.clone(),
            gop_adv: gop.k_adv.clone(),
            prompt_o: prompt.k_o.clone(),
            prompt_adv: prompt.k_adv.clone(),
        });
    }
    let k_o = corpus
        .label_index(&gop.k_o)
        .ok_or_else(|| VerifyError::MissingLabel(gop.k_o.clone()))?;
    let k_adv = corpus
        .label_index(&gop.k_adv)
        .ok_or_else(|| VerifyError::MissingLabel(gop.k_adv.clone()))?;

    let query_texts: Result<Vec<String>, _> = corpus
        .class_names()
        .iter()
        .map(|name| render_discrete_prompt(tokenizer, &prompt.state, name))
        .collect();
    let query_texts = query_texts?;

    let mut pairs = Vec::new();
    for (source_index, s) in corpus.samples().iter().enumerate() {
        if s.label != k_o {
            continue;
        }
        let query_image = gop.apply(&s.image)?;
        let dev = query_image.max_abs_diff(&s.image);
        if dev > gop.sigma + 1e-6 {
            return Err(VerifyError::BudgetViolated {
                index: source_index,
                dev,
                sigma: gop.sigma,
            });
        }
        pairs.push(VerificationPair {
            query_image,
            query_texts: query_texts.clone(),
            expected_label: k_adv,
            clean_label: k_o,
            source_index,
        });
    }
    if pairs.is_empty() {
        return Err(VerifyError::EmptyPairs);
    }
    Ok(VerificationSet {
        pairs,
        class_names: corpus.class_names().to_vec(),
        k_o,
        k_adv,
        sigma: gop.sigma,
    })
}

/// Rank class indices by descending similarity between the image and each
/// candidate text; ties break toward the lowest class index. Returns the top
/// K classes.
pub fn retrieve_topk(
    scorer: &dyn SimilarityScorer,
    image: &Tensor,
    texts: &[String],
    k: usize,
) -> Result<Vec<usize>, VerifyError> {
    if texts.is_empty() {
        return Err(VerifyError::NoTexts);
    }
    if k == 0 || k > texts.len() {
        return Err(VerifyError::KOutOfRange {
            k,
            texts: texts.len(),
        });
    }
    let scores = scorer.similarities(image, texts)?;
    if scores.len() != texts.len() {
        return Err(VerifyError::Scorer(format!(
            "scorer returned {} scores for {} texts",
            scores.len(),
            texts.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Verification success rate: the fraction of pairs whose top-K classes
/// contain the adversarial label.
pub fn vsr(
    pairs: &[VerificationPair],
    scorer: &dyn SimilarityScorer,
    k: usize,
) -> Result<f64, VerifyError> {
    hit_rate(pairs, scorer, k, HitTarget::Adversarial)
}

/// Fraction of pairs whose top-K classes contain the *original* label, the
/// signal behind the "unverifiable" case.
pub fn recovery_rate(
    pairs: &[VerificationPair],
    scorer: &dyn SimilarityScorer,
    k: usize,
) -> Result<f64, VerifyError> {
    hit_rate(pairs, scorer, k, HitTarget::Original)
}

#[derive(Clone, Copy)]
enum HitTarget {
    Adversarial,
    Original,
}

fn hit_rate(
    pairs: &[VerificationPair],
    scorer: &dyn SimilarityScorer,
    k: usize,
    target: HitTarget,
) -> Result<f64, VerifyError> {
    if pairs.is_empty() {
        return Err(VerifyError::EmptyPairs);
    }
    let mut hits = 0usize;
    for p in pairs {
        let want = match target {
            HitTarget::Adversarial => p.expected_label,
            HitTarget::Original => p.clean_label,
        };
        let top = retrieve_topk(scorer, &p.query_image, &p.query_texts, k)?;
        if top.contains(&want) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Verification confidence: VSR(malicious) − VSR(benign).
pub fn delta_r(vsr_malicious: f64, vsr_benign: f64) -> f64 {
    vsr_malicious - vsr_benign
}

/// Elementwise ΔR per K.
pub fn delta_r_map(
    malicious: &BTreeMap<usize, f64>,
    benign: &BTreeMap<usize, f64>,
) -> BTreeMap<usize, f64> {
    malicious
        .iter()
        .filter_map(|(k, &m)| benign.get(k).map(|&b| (*k, delta_r(m, b))))
        .collect()
}

/// Clean-retrieval competence: R@1 of hand-crafted class queries over the
/// whole clean corpus.
pub fn clean_retrieval_r1(
    corpus: &LabeledCorpus,
    scorer: &dyn SimilarityScorer,
) -> Result<f64, VerifyError> {
    if corpus.is_empty() {
        return Err(VerifyError::EmptyPairs);
    }
    let texts: Vec<String> = corpus
        .class_names()
        .iter()
        .map(|n| format!("a photo of a {n}"))
        .collect();
    let mut hits = 0usize;
    for s in corpus.samples() {
        let top = retrieve_topk(scorer, &s.image, &texts, 1)?;
        if top[0] == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

/// Retrieval direction, mirroring image-to-text verification by swapping the
/// query roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    ImageToText,
    TextToImage,
    Both,
}

/// Outcome of one query at K=1.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryOutcome {
    pub source_index: usize,
    pub top_class: String,
    pub hit_adversarial: bool,
    pub hit_original: bool,
}

/// Metrics for one retrieval direction.
#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirectionMetrics {
    pub vsr_at_k: BTreeMap<usize, f64>,
    pub recovery_at_k: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

/// Full verification outcome for one suspicious model.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub k_o: String,
    pub k_adv: String,
    pub clean_r1: f64,
    pub image_to_text: Option<DirectionMetrics>,
    pub text_to_image: Option<DirectionMetrics>,
    pub decision: OwnershipDecision,
    pub thresholds: Thresholds,
    /// VSR(malicious) − VSR(benign) per K; filled when a benign baseline
    /// report is supplied.
    pub delta_r: Option<BTreeMap<usize, f64>>,
}

impl VerificationReport {
    /// Attach ΔR against a benign baseline, per direction-primary K table.
    pub fn with_baseline(mut self, benign: &VerificationReport) -> Self {
        let mine = self.primary_metrics().map(|m| m.vsr_at_k.clone());
        let theirs = benign.primary_metrics().map(|m| m.vsr_at_k.clone());
        if let (Some(a), Some(b)) = (mine, theirs) {
            self.delta_r = Some(delta_r_map(&a, &b));
        }
        self
    }

    pub fn primary_metrics(&self) -> Option<&DirectionMetrics> {
        self.image_to_text.as_ref().or(self.text_to_image.as_ref())
    }
}

/// Run the full verification protocol against one suspicious model: build
/// the query set, measure clean competence, collect VSR/recovery at each K
/// and decide ownership from the R@1 values of the primary direction.
#[allow(clippy::too_many_arguments)]
pub fn run_verification(
    corpus: &LabeledCorpus,
    gop: &GopArtifact,
    prompt: &PromptArtifact,
    tokenizer: &Tokenizer,
    scorer: &dyn SimilarityScorer,
    thresholds: &Thresholds,
    ks: &[usize],
    direction: Direction,
) -> Result<VerificationReport, VerifyError> {
    thresholds.validate()?;
    let set = build_verification_set(corpus, gop, prompt, tokenizer)?;
    let clean_r1 = clean_retrieval_r1(corpus, scorer)?;

    let mut ks_all: Vec<usize> = ks.to_vec();
    ks_all.push(1);
    ks_all.sort_unstable();
    ks_all.dedup();
    ks_all.retain(|&k| k >= 1 && k <= set.class_names.len());

    let it = match direction {
        Direction::ImageToText | Direction::Both => Some(measure_it(&set, scorer, &ks_all)?),
        Direction::TextToImage => None,
    };
    let ti = match direction {
        Direction::TextToImage | Direction::Both => Some(measure_ti(
            corpus, &set, scorer, tokenizer, prompt, &ks_all,
        )?),
        Direction::ImageToText => None,
    };

    let primary = it.as_ref().or(ti.as_ref()).expect("at least one direction");
    let vsr1 = primary.vsr_at_k.get(&1).copied().unwrap_or(0.0);
    let rec1 = primary.recovery_at_k.get(&1).copied().unwrap_or(0.0);
    let decision = decide_ownership(clean_r1, vsr1, rec1, thresholds);

    Ok(VerificationReport {
        k_o: gop.k_o.clone(),
        k_adv: gop.k_adv.clone(),
        clean_r1,
        image_to_text: it,
        text_to_image: ti,
        decision,
        thresholds: *thresholds,
        delta_r: None,
    })
}

fn measure_it(
    set: &VerificationSet,
    scorer: &dyn SimilarityScorer,
    ks: &[usize],
) -> Result<DirectionMetrics, VerifyError> {
    let mut m = DirectionMetrics::default();
    for &k in ks {
        m.vsr_at_k.insert(k, vsr(&set.pairs, scorer, k)?);
        m.recovery_at_k
            .insert(k, recovery_rate(&set.pairs, scorer, k)?);
    }
    for p in &set.pairs {
        let top = retrieve_topk(scorer, &p.query_image, &p.query_texts, 1)?[0];
        m.per_query.push(QueryOutcome {
            source_index: p.source_index,
            top_class: set.class_names[top].clone(),
            hit_adversarial: top == p.expected_label,
            hit_original: top == p.clean_label,
        });
    }
    Ok(m)
}

/// Text-to-image mirror. The corpus acts as the gallery with the source
/// class perturbed and the genuine adversarial class left out (its images
/// are the description's trivial referents on any competent model);
/// `vsr_at_k[k]` is the fraction of the adversarial description's top-k
/// retrievals that are fingerprint images, and `recovery_at_k` asks the same
/// for the original-label description. The per-query log stays empty in this
/// direction: there is one ranking per description, not one per pair.
fn measure_ti(
    corpus: &LabeledCorpus,
    set: &VerificationSet,
    scorer: &dyn SimilarityScorer,
    tokenizer: &Tokenizer,
    prompt: &PromptArtifact,
    ks: &[usize],
) -> Result<DirectionMetrics, VerifyError> {
    let adv_text = render_discrete_prompt(tokenizer, &prompt.state, &set.class_names[set.k_adv])?;
    let orig_text = render_discrete_prompt(tokenizer, &prompt.state, &set.class_names[set.k_o])?;

    let mut gallery: Vec<Tensor> = Vec::with_capacity(corpus.len());
    let mut is_fingerprint: Vec<bool> = Vec::with_capacity(corpus.len());
    let mut pair_iter = set.pairs.iter();
    for s in corpus.samples() {
        if s.label == set.k_o {
            let p = pair_iter.next().expect("one pair per source image");
            gallery.push(p.query_image.clone());
            is_fingerprint.push(true);
        } else if s.label != set.k_adv {
            gallery.push(s.image.clone());
            is_fingerprint.push(false);
        }
    }

    let adv_rank = rank_gallery(scorer, &gallery, &adv_text)?;
    let orig_rank = rank_gallery(scorer, &gallery, &orig_text)?;
    let mut m = DirectionMetrics::default();
    for &k in ks {
        let k_eff = k.min(gallery.len());
        let hit_adv = adv_rank[..k_eff]
            .iter()
            .filter(|&&i| is_fingerprint[i])
            .count();
        let hit_orig = orig_rank[..k_eff]
            .iter()
            .filter(|&&i| is_fingerprint[i])
            .count();
        m.vsr_at_k.insert(k, hit_adv as f64 / k_eff as f64);
        m.recovery_at_k.insert(k, hit_orig as f64 / k_eff as f64);
    }
    Ok(m)
}

fn rank_gallery(
    scorer: &dyn SimilarityScorer,
    gallery: &[Tensor],
    text: &str,
) -> Result<Vec<usize>, VerifyError> {
    let mut scores = Vec::with_capacity(gallery.len());
    let texts = vec![text.to_string()];
    for img in gallery {
        scores.push(scorer.similarities(img, &texts)?[0]);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    Ok(order)
}

// ---- image quality metrics ----

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let v = math::exp(-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Windowed SSIM over [0,1] images: 11×11 Gaussian window (σ=1.5), the usual
/// stability constants, valid window positions, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, VerifyError> {
    if a.shape() != b.shape() {
        return Err(VerifyError::ShapeMismatch {
            got: b.shape().to_vec(),
            want: a.shape().to_vec(),
        });
    }
    let (c, h, w) = image_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(VerifyError::TooSmallForSsim(h.min(w)));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let weight = win[wy * SSIM_WINDOW + wx];
                        let va = pa[(oy + wy) * w + ox + wx];
                        let vb = pb[(oy + wy) * w + ox + wx];
                        mu_a += weight * va;
                        mu_b += weight * vb;
                        aa += weight * va * va;
                        bb += weight * vb * vb;
                        ab += weight * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB for [0,1] images; +∞ for identical
/// inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, VerifyError> {
    if a.shape() != b.shape() {
        return Err(VerifyError::ShapeMismatch {
            got: b.shape().to_vec(),
            want: a.shape().to_vec(),
        });
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(1.0 / mse))
}

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize), VerifyError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [h, w] => {
            let _ = h;
            let _ = w;
            Ok((1, t.shape()[0], t.shape()[1]))
        }
        other => Err(VerifyError::ShapeMismatch {
            got: other.to_vec(),
            want: vec![3, 0, 0],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    struct FixedScorer {
        scores: Vec<f64>,
    }

    impl SimilarityScorer for FixedScorer {
        fn similarities(&self, _image: &Tensor, texts: &[String]) -> Result<Vec<f64>, VerifyError> {
            Ok(self.scores[..texts.len()].to_vec())
        }
    }

    fn texts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class {i}")).collect()
    }

    #[test]
    fn topk_sorted_scores() {
        let s = FixedScorer {
            scores: vec![0.1, 0.9, 0.5, 0.7],
        };
        let img = Tensor::zeros(&[3, 16, 16]);
        let top = retrieve_topk(&s, &img, &texts(4), 4).unwrap();
        assert_eq!(top, vec![1, 3, 2, 0]);
    }

    #[test]
    fn topk_tie_breaks_by_low_index() {
        let s = FixedScorer {
            scores: vec![0.5, 0.5, 0.5],
        };
        let img = Tensor::zeros(&[3, 16, 16]);
        let top = retrieve_topk(&s, &img, &texts(3), 3).unwrap();
        assert_eq!(top, vec![0, 1, 2]);
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = Rng::new(40);
        for trial in 0..100 {
            let n = 2 + rng.below(63);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.below(5) == 0 {
                        0.25
                    } else {
                        rng.uniform()
                    }
                })
                .collect();
            let s = FixedScorer {
                scores: scores.clone(),
            };
            let img = Tensor::zeros(&[3, 16, 16]);
            let k = 1 + rng.below(n);
            let got = retrieve_topk(&s, &img, &texts(n), k).unwrap();
            // independent oracle: stable full sort on (score desc, index asc)
            let mut expect: Vec<usize> = (0..n).collect();
            expect.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            expect.truncate(k);
            assert_eq!(got, expect, "trial {trial}");
        }
    }

    #[test]
    fn topk_k_out_of_range() {
        let s = FixedScorer {
            scores: vec![0.5, 0.4],
        };
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(
            retrieve_topk(&s, &img, &texts(2), 3),
            Err(VerifyError::KOutOfRange { k: 3, texts: 2 })
        ));
        assert!(matches!(
            retrieve_topk(&s, &img, &texts(2), 0),
            Err(VerifyError::KOutOfRange { k: 0, .. })
        ));
    }

    #[test]
    fn topk_with_full_k_contains_every_class() {
        let mut rng = Rng::new(41);
        let scores: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let s = FixedScorer { scores };
        let img = Tensor::zeros(&[3, 16, 16]);
        let mut top = retrieve_topk(&s, &img, &texts(8), 8).unwrap();
        top.sort_unstable();
        assert_eq!(top, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn decision_branches() {
        let th = Thresholds::default();
        assert_eq!(
            decide_ownership(0.10, 0.9, 0.0, &th),
            OwnershipDecision::Uncertain
        );
        assert_eq!(
            decide_ownership(0.95, 0.96, 0.01, &th),
            OwnershipDecision::Violated
        );
        assert_eq!(
            decide_ownership(0.95, 0.02, 0.93, &th),
            OwnershipDecision::Unverifiable
        );
        assert_eq!(
            decide_ownership(0.95, 0.02, 0.03, &th),
            OwnershipDecision::Unviolated
        );
    }

    #[test]
    fn decision_total_and_covering() {
        let th = Thresholds::default();
        let mut rng = Rng::new(7);
        let mut seen = [false; 4];
        for _ in 0..10_000 {
            let d = decide_ownership(rng.uniform(), rng.uniform(), rng.uniform(), &th);
            seen[match d {
                OwnershipDecision::Uncertain => 0,
                OwnershipDecision::Unverifiable => 1,
                OwnershipDecision::Unviolated => 2,
                OwnershipDecision::Violated => 3,
            }] = true;
        }
        assert!(
            seen.iter().all(|&s| s),
            "all four branches reachable: {seen:?}"
        );
    }

    #[test]
    fn vsr_saturation() {
        let pairs: Vec<VerificationPair> = (0..4)
            .map(|i| VerificationPair {
                query_image: Tensor::zeros(&[3, 16, 16]),
                query_texts: texts(4),
                expected_label: 2,
                clean_label: 0,
                source_index: i,
            })
            .collect();
        let always = FixedScorer {
            scores: vec![0.0, 0.1, 0.9, 0.2],
        };
        assert_eq!(vsr(&pairs, &always, 1).unwrap(), 1.0);
        let never = FixedScorer {
            scores: vec![0.9, 0.8, 0.0, 0.7],
        };
        assert_eq!(vsr(&pairs, &never, 2).unwrap(), 0.0);
        assert_eq!(recovery_rate(&pairs, &never, 1).unwrap(), 1.0);
    }

    #[test]
    fn vsr_monotone_in_k() {
        let mut rng = Rng::new(50);
        let pairs: Vec<VerificationPair> = (0..6)
            .map(|i| VerificationPair {
                query_image: Tensor::zeros(&[3, 16, 16]),
                query_texts: texts(5),
                expected_label: i % 5,
                clean_label: 0,
                source_index: i,
            })
            .collect();
        let s = FixedScorer {
            scores: (0..5).map(|_| rng.uniform()).collect(),
        };
        let mut prev = 0.0;
        for k in 1..=5 {
            let v = vsr(&pairs, &s, k).unwrap();
            assert!(v + 1e-12 >= prev, "vsr not monotone at k={k}");
            prev = v;
        }
    }

    #[test]
    fn delta_r_identities() {
        assert_eq!(delta_r(0.98, 0.0), 0.98);
        assert_eq!(delta_r(0.4, 0.4), 0.0);
        assert_eq!(delta_r(0.2, 0.7), -delta_r(0.7, 0.2));
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().validate().is_ok());
        let bad = Thresholds {
            eps1: 0.7,
            eps2: 0.6,
            ..Thresholds::default()
        };
        assert!(bad.validate().is_err());
        let bad = Thresholds {
            eps3: 0.0,
            ..Thresholds::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ssim_identical_is_one_psnr_inf() {
        let mut rng = Rng::new(3);
        let img = Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.uniform()).collect());
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_inverted_below_one() {
        let mut rng = Rng::new(4);
        let img = Tensor::from_vec(
            &[1, 16, 16],
            (0..256).map(|_| rng.range(0.0, 0.4)).collect(),
        );
        let mut inv = img.clone();
        for v in inv.data_mut() {
            *v = 1.0 - *v;
        }
        let s = ssim(&img, &inv).unwrap();
        assert!(s < 1.0, "ssim {s}");
    }

    #[test]
    fn psnr_known_value() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::full(&[1, 16, 16], 0.1);
        // mse = 0.01 -> psnr = 20 dB
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn ssim_rejects_mismatched_or_tiny() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::zeros(&[1, 16, 8]);
        assert!(matches!(
            ssim(&a, &b),
            Err(VerifyError::ShapeMismatch { .. })
        ));
        let tiny = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            ssim(&tiny, &tiny),
            Err(VerifyError::TooSmallForSsim(8))
        ));
    }

    #[test]
    fn ssim_matches_naive_reference() {
        // independent oracle: same definition, straight-line recomputation
        let mut rng = Rng::new(9);
        let a = Tensor::from_vec(&[1, 12, 12], (0..144).map(|_| rng.uniform()).collect());
        let b = Tensor::from_vec(&[1, 12, 12], (0..144).map(|_| rng.uniform()).collect());
        let got = ssim(&a, &b).unwrap();

        let win = gaussian_window();
        let (h, w) = (12usize, 12usize);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=(h - 11) {
            for ox in 0..=(w - 11) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for wy in 0..11 {
                    for wx in 0..11 {
                        ma += win[wy * 11 + wx] * a.data()[(oy + wy) * w + ox + wx];
                        mb += win[wy * 11 + wx] * b.data()[(oy + wy) * w + ox + wx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for wy in 0..11 {
                    for wx in 0..11 {
                        let da = a.data()[(oy + wy) * w + ox + wx] - ma;
                        let db = b.data()[(oy + wy) * w + ox + wx] - mb;
                        va += win[wy * 11 + wx] * da * da;
                        vb += win[wy * 11 + wx] * db * db;
                        cov += win[wy * 11 + wx] * da * db;
                    }
                }
                let c1 = 0.0001;
                let c2 = 0.0009;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let expect = total / count as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }
}
