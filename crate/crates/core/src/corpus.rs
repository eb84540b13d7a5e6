//! Multimodal corpora: image–caption–label triples, synthetic generation,
//! label partitioning, source/target pairing and pruning.
//!
//! Corpus values are immutable after construction and safe to share across
//! concurrent readers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{collections::BTreeMap, vec};

use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("sample {index}: pixel value {value} outside [0,1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("sample {index}: caption is empty")]
    EmptyCaption { index: usize },
    #[error("sample {index}: label index {label} not in label set of size {classes}")]
    UnknownLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("sample {index}: image shape {got:?} differs from corpus shape {want:?}")]
    ShapeMismatch {
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("label {0:?} not present in corpus")]
    MissingLabel(String),
    #[error("source and adversarial labels must differ (both {0:?})")]
    EqualLabels(String),
    #[error("pruning ratio {0} outside [0,1]")]
    BadRatio(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least 1 sample per class, got {0}")]
    EmptyClass(usize),
    #[error("at most {max} synthetic classes supported, got {got}")]
    TooManyClasses { max: usize, got: usize },
    #[error("image sides must be at least 8, got {0}x{1}")]
    ImageTooSmall(usize, usize),
}

/// One image with its caption and class label. Pixels live in [0,1], stored
/// channels-first `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub image: Tensor,
    pub caption: String,
    pub label: usize,
}

/// An ordered multimodal corpus with its label set. The label set is shared
/// by all views derived from one corpus (partitions, prunes), so label
/// indices stay comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    samples: Vec<MultimodalSample>,
    class_names: Vec<String>,
    image_shape: (usize, usize),
}

impl LabeledCorpus {
    /// Validates every invariant: pixel ranges, caption non-emptiness, label
    /// membership and uniform image shape.
    pub fn new(
        samples: Vec<MultimodalSample>,
        class_names: Vec<String>,
        image_shape: (usize, usize),
    ) -> Result<Self, CorpusError> {
        let want = vec![3, image_shape.0, image_shape.1];
        for (index, s) in samples.iter().enumerate() {
            if s.image.shape() != want.as_slice() {
                return Err(CorpusError::ShapeMismatch {
                    index,
                    got: s.image.shape().to_vec(),
                    want: want.clone(),
                });
            }
            if let Some(&bad) = s.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CorpusError::PixelOutOfRange { index, value: bad });
            }
            if s.caption.trim().is_empty() {
                return Err(CorpusError::EmptyCaption { index });
            }
            if s.label >= class_names.len() {
                return Err(CorpusError::UnknownLabel {
                    index,
                    label: s.label,
                    classes: class_names.len(),
                });
            }
        }
        Ok(LabeledCorpus {
            samples,
            class_names,
            image_shape,
        })
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The ordered label set 𝒦.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// All caption texts (used for vocabulary building).
    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.caption.as_str())
    }

    /// True if any image tensor is shared bit-for-bit with `other`.
    pub fn overlaps(&self, other: &LabeledCorpus) -> bool {
        let hashes: alloc::collections::BTreeSet<u64> = self
            .samples
            .iter()
            .map(|s| s.image.content_hash())
            .collect();
        other
            .samples
            .iter()
            .any(|s| hashes.contains(&s.image.content_hash()))
    }
}

/// Split a corpus into per-label sub-corpora. The union of the parts is
/// exactly the input (as a multiset) and every part keeps the parent label
/// set.
pub fn partition_by_label(
    corpus: &LabeledCorpus,
) -> Result<BTreeMap<usize, LabeledCorpus>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut parts: BTreeMap<usize, Vec<MultimodalSample>> = BTreeMap::new();
    for s in &corpus.samples {
        parts.entry(s.label).or_default().push(s.clone());
    }
    Ok(parts
        .into_iter()
        .map(|(label, samples)| {
            (
                label,
                LabeledCorpus {
                    samples,
                    class_names: corpus.class_names.clone(),
                    image_shape: corpus.image_shape,
                },
            )
        })
        .collect())
}

/// Select the source-class and adversarial-class sub-corpora for fingerprint
/// extraction. When the class sizes differ, the target part is index-cycled
/// so that sample `i` pairs with target `i mod |target|`.
pub fn select_pair(
    corpus: &LabeledCorpus,
    k_o: &str,
    k_adv: &str,
) -> Result<(LabeledCorpus, LabeledCorpus), CorpusError> {
    if k_o == k_adv {
        return Err(CorpusError::EqualLabels(k_o.to_string()));
    }
    let lo = corpus
        .label_index(k_o)
        .ok_or_else(|| CorpusError::MissingLabel(k_o.to_string()))?;
    let la = corpus
        .label_index(k_adv)
        .ok_or_else(|| CorpusError::MissingLabel(k_adv.to_string()))?;
    let mut parts = partition_by_label(corpus)?;
    let source = parts
        .remove(&lo)
        .ok_or_else(|| CorpusError::MissingLabel(k_o.to_string()))?;
    let target = parts
        .remove(&la)
        .ok_or_else(|| CorpusError::MissingLabel(k_adv.to_string()))?;
    let cycled: Vec<MultimodalSample> = (0..source.len())
        .map(|i| target.samples[i % target.len()].clone())
        .collect();
    let target = LabeledCorpus {
        samples: cycled,
        class_names: corpus.class_names.clone(),
        image_shape: corpus.image_shape,
    };
    Ok((source, target))
}

/// Randomly remove `ratio` of the corpus; keeps ⌈(1−ratio)·N⌉ samples chosen
/// uniformly without replacement, in original order. Deterministic in `seed`.
pub fn prune_corpus(
    corpus: &LabeledCorpus,
    ratio: f64,
    seed: u64,
) -> Result<LabeledCorpus, CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CorpusError::BadRatio(ratio));
    }
    let n = corpus.len();
    let keep = math::ceil((1.0 - ratio) * n as f64) as usize;
    let mut rng = Rng::new(seed ^ 0x7072_756e_6500_0000); // "prune"
    let idx = rng.sample_indices(n, keep.min(n));
    let samples = idx.into_iter().map(|i| corpus.samples[i].clone()).collect();
    Ok(LabeledCorpus {
        samples,
        class_names: corpus.class_names.clone(),
        image_shape: corpus.image_shape,
    })
}

const HUES: [(&str, [f64; 3]); 8] = [
    ("crimson", [0.86, 0.08, 0.24]),
    ("azure", [0.00, 0.50, 1.00]),
    ("amber", [1.00, 0.75, 0.00]),
    ("jade", [0.00, 0.66, 0.42]),
    ("violet", [0.56, 0.00, 1.00]),
    ("coral", [1.00, 0.45, 0.34]),
    ("teal", [0.00, 0.55, 0.55]),
    ("ochre", [0.80, 0.47, 0.13]),
];

const SHAPES: [&str; 8] = [
    "disk", "square", "cross", "ring", "stripes", "checker", "triangle", "diamond",
];

const CAPTION_TEMPLATES: [&str; 6] = [
    "a photo of a {}",
    "a blurry photo of a {}",
    "an image of a {} on a plain background",
    "a small {} in the frame",
    "one {} against a flat field",
    "a bright {} near the center",
];

/// Synthesize a toy corpus: `n_classes` visually distinct motifs (hue × shape
/// combinations), `per_class` jittered renderings each, captions drawn from a
/// small template pool. The class→motif assignment is fixed; the seed drives
/// rendering style (background tone, noise level, size range) and all
/// per-sample jitter, so two seeds give the same classes over disjoint
/// samples. Pixels are quantized to the 8-bit grid so lossless round-trips
/// through 8-bit image files are exact.
pub fn synth_toy_corpus(
    n_classes: usize,
    per_class: usize,
    image_shape: (usize, usize),
    seed: u64,
) -> Result<LabeledCorpus, CorpusError> {
    if n_classes < 2 {
        return Err(CorpusError::TooFewClasses(n_classes));
    }
    if per_class < 1 {
        return Err(CorpusError::EmptyClass(per_class));
    }
    let max = HUES.len() * SHAPES.len();
    if n_classes > max {
        return Err(CorpusError::TooManyClasses {
            max,
            got: n_classes,
        });
    }
    let (h, w) = image_shape;
    if h < 8 || w < 8 {
        return Err(CorpusError::ImageTooSmall(h, w));
    }

    let mut rng = Rng::new(seed ^ 0x7379_6e74_6800_0000); // "synth"
                                                          // Corpus-level rendering style: each seed is its own "camera and scene"
                                                          // climate, so corpora from different seeds model genuinely different data
                                                          // sources while sharing class semantics.
    let style = Style {
        bg_tone: rng.range(0.08, 0.32),
        bg_grad_x: rng.range(-0.12, 0.12),
        bg_grad_y: rng.range(-0.12, 0.12),
        speckle: rng.range(0.0, 0.05),
        noise_amp: rng.range(0.015, 0.04),
        min_r: rng.range(0.20, 0.26),
        max_r: rng.range(0.32, 0.42),
        motif_blend: rng.range(0.80, 0.95),
        hue_jitter_amp: rng.range(0.02, 0.05),
        template_offset: rng.below(CAPTION_TEMPLATES.len()),
        fill_mode: rng.below(3),
    };

    let class_names: Vec<String> = (0..n_classes)
        .map(|c| {
            format!(
                "{} {}",
                HUES[c % HUES.len()].0,
                SHAPES[(c + c / HUES.len()) % SHAPES.len()]
            )
        })
        .collect();

    let mut samples = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let hue = HUES[c % HUES.len()].1;
        let shape = SHAPES[(c + c / HUES.len()) % SHAPES.len()];
        for _ in 0..per_class {
            let image = render_motif(h, w, hue, shape, &style, &mut rng);
            let pick = (style.template_offset + rng.below(CAPTION_TEMPLATES.len()))
                % CAPTION_TEMPLATES.len();
            let caption = CAPTION_TEMPLATES[pick].replacen("{}", &class_names[c], 1);
            samples.push(MultimodalSample {
                image,
                caption,
                label: c,
            });
        }
    }
    LabeledCorpus::new(samples, class_names, image_shape)
}

struct Style {
    bg_tone: f64,
    bg_grad_x: f64,
    bg_grad_y: f64,
    speckle: f64,
    noise_amp: f64,
    min_r: f64,
    max_r: f64,
    /// How strongly the motif colour covers the background (alpha).
    motif_blend: f64,
    hue_jitter_amp: f64,
    template_offset: usize,
    /// 0 = filled, 1 = outline, 2 = filled with a hollow quarter.
    fill_mode: usize,
}

fn render_motif(
    h: usize,
    w: usize,
    hue: [f64; 3],
    shape: &str,
    style: &Style,
    rng: &mut Rng,
) -> Tensor {
    let side = h.min(w) as f64;
    let radius = rng.range(style.min_r, style.max_r) * side;
    let cx = rng.range(0.38, 0.62) * w as f64;
    let cy = rng.range(0.38, 0.62) * h as f64;
    let amp = style.hue_jitter_amp;
    let hue_jitter: [f64; 3] = [
        rng.range(-amp, amp),
        rng.range(-amp, amp),
        rng.range(-amp, amp),
    ];
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let raw_inside = match shape {
                "disk" => dx * dx + dy * dy <= radius * radius,
                "square" => math::abs(dx) <= radius && math::abs(dy) <= radius,
                "cross" => math::abs(dx) <= radius * 0.33 || math::abs(dy) <= radius * 0.33,
                "ring" => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= radius * radius && d2 >= (0.55 * radius) * (0.55 * radius)
                }
                "stripes" => {
                    math::abs(dx) <= radius
                        && math::abs(dy) <= radius
                        && ((y as f64 / 3.0) as usize) % 2 == 0
                }
                "checker" => {
                    math::abs(dx) <= radius
                        && math::abs(dy) <= radius
                        && ((x / 3) + (y / 3)) % 2 == 0
                }
                "triangle" => dy >= -radius && dy <= radius && math::abs(dx) <= (radius - dy) * 0.5,
                "diamond" => math::abs(dx) + math::abs(dy) <= radius,
                other => unreachable!("unknown motif {other}"),
            };
            let inside = match style.fill_mode {
                0 => raw_inside,
                1 => {
                    // outline: inside the shape but near its boundary ring
                    let shrunk = {
                        let s = 0.72;
                        let (sdx, sdy) = (dx / s, dy / s);
                        match shape {
                            "disk" => sdx * sdx + sdy * sdy <= radius * radius,
                            "square" => math::abs(sdx) <= radius && math::abs(sdy) <= radius,
                            "cross" => {
                                math::abs(sdx) <= radius * 0.33 || math::abs(sdy) <= radius * 0.33
                            }
                            "ring" => {
                                let d2 = sdx * sdx + sdy * sdy;
                                d2 <= radius * radius && d2 >= (0.55 * radius) * (0.55 * radius)
                            }
                            "stripes" => {
                                math::abs(sdx) <= radius
                                    && math::abs(sdy) <= radius
                                    && ((y as f64 / 3.0) as usize) % 2 == 0
                            }
                            "checker" => {
                                math::abs(sdx) <= radius
                                    && math::abs(sdy) <= radius
                                    && ((x / 3) + (y / 3)) % 2 == 0
                            }
                            "triangle" => {
                                sdy >= -radius
                                    && sdy <= radius
                                    && math::abs(sdx) <= (radius - sdy) * 0.5
                            }
                            "diamond" => math::abs(sdx) + math::abs(sdy) <= radius,
                            _ => raw_inside,
                        }
                    };
                    raw_inside && !shrunk
                }
                _ => {
                    raw_inside
                        && !(dx > 0.0
                            && dy < 0.0
                            && dx * dx + dy * dy > (0.4 * radius) * (0.4 * radius))
                }
            };
            let bg = style.bg_tone
                + style.bg_grad_x * (x as f64 / w as f64 - 0.5)
                + style.bg_grad_y * (y as f64 / h as f64 - 0.5)
                + if style.speckle > 0.0 && rng.uniform() < 0.08 {
                    style.speckle
                } else {
                    0.0
                };
            for ch in 0..3 {
                let base = if inside {
                    let m = (hue[ch] + hue_jitter[ch]).clamp(0.05, 0.95);
                    style.motif_blend * m + (1.0 - style.motif_blend) * bg
                } else {
                    bg
                };
                let v = (base + rng.range(-style.noise_amp, style.noise_amp)).clamp(0.0, 1.0);
                // Snap to the 8-bit grid for lossless image-file round-trips.
                data[ch * h * w + y * w + x] = math::round(v * 255.0) / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_counts_and_labels() {
        let c = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        assert_eq!(c.len(), 128);
        assert_eq!(c.class_names().len(), 8);
        for s in c.samples() {
            assert!(s.label < 8);
            assert!(!s.caption.is_empty());
        }
    }

    #[test]
    fn synth_deterministic_in_seed() {
        let a = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        let b = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_seeds_differ() {
        let a = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        let b = synth_toy_corpus(8, 16, (32, 32), 8).unwrap();
        let differs = a
            .samples()
            .iter()
            .zip(b.samples())
            .any(|(x, y)| x.image.max_abs_diff(&y.image) > 0.0);
        assert!(differs, "seed 7 and 8 produced identical pixels");
    }

    #[test]
    fn synth_rejects_bad_args() {
        assert!(matches!(
            synth_toy_corpus(1, 4, (32, 32), 0),
            Err(CorpusError::TooFewClasses(1))
        ));
        assert!(matches!(
            synth_toy_corpus(4, 0, (32, 32), 0),
            Err(CorpusError::EmptyClass(0))
        ));
    }

    #[test]
    fn partition_balanced_corpus() {
        let c = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        let parts = partition_by_label(&c).unwrap();
        assert_eq!(parts.len(), 8);
        for part in parts.values() {
            assert_eq!(part.len(), 16);
        }
    }

    #[test]
    fn partition_is_multiset_identity() {
        let c = synth_toy_corpus(5, 7, (16, 16), 21).unwrap();
        let parts = partition_by_label(&c).unwrap();
        let mut rebuilt: Vec<u64> = parts
            .values()
            .flat_map(|p| p.samples().iter().map(|s| s.image.content_hash()))
            .collect();
        let mut original: Vec<u64> = c.samples().iter().map(|s| s.image.content_hash()).collect();
        rebuilt.sort_unstable();
        original.sort_unstable();
        assert_eq!(rebuilt, original);
        assert_eq!(parts.values().map(|p| p.len()).sum::<usize>(), c.len());
    }

    #[test]
    fn partition_single_class() {
        let c = synth_toy_corpus(2, 4, (16, 16), 3).unwrap();
        let parts = partition_by_label(&c).unwrap();
        let zero = &parts[&0];
        assert_eq!(zero.len(), 4);
        assert!(zero.samples().iter().all(|s| s.label == 0));
    }

    #[test]
    fn select_pair_balanced() {
        let c = synth_toy_corpus(8, 16, (32, 32), 7).unwrap();
        let names = c.class_names().to_vec();
        let (src, tgt) = select_pair(&c, &names[0], &names[3]).unwrap();
        assert_eq!(src.len(), 16);
        assert_eq!(tgt.len(), 16);
    }

    #[test]
    fn select_pair_equal_labels_errors() {
        let c = synth_toy_corpus(4, 4, (16, 16), 1).unwrap();
        let name = c.class_names()[0].clone();
        assert!(matches!(
            select_pair(&c, &name, &name),
            Err(CorpusError::EqualLabels(_))
        ));
    }

    #[test]
    fn select_pair_cycles_target() {
        // source: 16 samples of class 0; target: 5 samples of class 1
        let full = synth_toy_corpus(2, 16, (16, 16), 9).unwrap();
        let mut samples: Vec<MultimodalSample> = Vec::new();
        let mut target_kept = 0;
        for s in full.samples() {
            if s.label == 0 {
                samples.push(s.clone());
            } else if target_kept < 5 {
                samples.push(s.clone());
                target_kept += 1;
            }
        }
        let c =
            LabeledCorpus::new(samples, full.class_names().to_vec(), full.image_shape()).unwrap();
        let names = c.class_names().to_vec();
        let (src, tgt) = select_pair(&c, &names[0], &names[1]).unwrap();
        assert_eq!(src.len(), 16);
        assert_eq!(tgt.len(), 16);
        // pairing index i mod 5
        let originals: Vec<u64> = c
            .samples()
            .iter()
            .filter(|s| s.label == 1)
            .map(|s| s.image.content_hash())
            .collect();
        for (i, s) in tgt.samples().iter().enumerate() {
            assert_eq!(s.image.content_hash(), originals[i % 5], "pair index {i}");
        }
    }

    #[test]
    fn prune_identity_and_boundary() {
        let c = synth_toy_corpus(4, 8, (16, 16), 2).unwrap();
        let same = prune_corpus(&c, 0.0, 99).unwrap();
        assert_eq!(same, c);
        let none = prune_corpus(&c, 1.0, 99).unwrap();
        assert_eq!(none.len(), 0);
    }

    #[test]
    fn prune_is_sub_multiset_with_exact_size() {
        let c = synth_toy_corpus(4, 25, (16, 16), 5).unwrap(); // N=100
        let pruned = prune_corpus(&c, 0.8, 13).unwrap();
        assert_eq!(pruned.len(), 20);
        let from: alloc::collections::BTreeSet<u64> =
            c.samples().iter().map(|s| s.image.content_hash()).collect();
        for s in pruned.samples() {
            assert!(from.contains(&s.image.content_hash()));
        }
        // deterministic
        let again = prune_corpus(&c, 0.8, 13).unwrap();
        assert_eq!(pruned, again);
    }

    #[test]
    fn prune_ceil_sizing() {
        let c = synth_toy_corpus(2, 5, (16, 16), 5).unwrap(); // N=10
        for (ratio, expect) in [(0.25, 8), (0.5, 5), (0.75, 3), (0.99, 1)] {
            let p = prune_corpus(&c, ratio, 1).unwrap();
            assert_eq!(p.len(), expect, "ratio {ratio}");
        }
    }

    #[test]
    fn corpus_rejects_invalid_samples() {
        let good = synth_toy_corpus(2, 2, (16, 16), 1).unwrap();
        let mut samples = good.samples().to_vec();
        samples[1].caption = "  ".into();
        let err = LabeledCorpus::new(samples, good.class_names().to_vec(), (16, 16));
        assert!(matches!(err, Err(CorpusError::EmptyCaption { index: 1 })));

        let mut samples = good.samples().to_vec();
        samples[0].image.data_mut()[5] = 1.5;
        let err = LabeledCorpus::new(samples, good.class_names().to_vec(), (16, 16));
        assert!(matches!(
            err,
            Err(CorpusError::PixelOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn overlap_detection() {
        let a = synth_toy_corpus(2, 3, (16, 16), 1).unwrap();
        let b = synth_toy_corpus(2, 3, (16, 16), 2).unwrap();
        assert!(!a.overlaps(&b));
        assert!(a.overlaps(&a));
    }
}
