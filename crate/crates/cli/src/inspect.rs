//! `gop inspect`: budget-compliance statistics and an optional heat-map
//! rendering of a perturbation artifact.

use std::path::Path;

use mmfinger_core::corpus::LabeledCorpus;
use mmfinger_core::gop::GopArtifact;
use mmfinger_core::tensor::Tensor;

use crate::error::CliResult;
use crate::manifest::write_png;
use crate::report::Table;

pub fn inspect_table(gop: &GopArtifact, corpus: Option<&LabeledCorpus>) -> CliResult<Table> {
    let mut rows = vec![
        vec!["k_o".into(), gop.k_o.clone()],
        vec!["k_adv".into(), gop.k_adv.clone()],
        vec!["sigma".into(), format!("{:.6}", gop.sigma)],
        vec!["seed".into(), gop.seed.to_string()],
        vec!["surrogate_hash".into(), gop.surrogate_hash.clone()],
        vec!["delta_shape".into(), format!("{:?}", gop.delta.shape())],
        vec!["delta_min".into(), format!("{:.6}", gop.delta.min())],
        vec!["delta_max".into(), format!("{:.6}", gop.delta.max())],
    ];
    if let Some(corpus) = corpus {
        let mut max_dev = 0.0f64;
        let mut out_min = f64::INFINITY;
        let mut out_max = f64::NEG_INFINITY;
        let mut violations = 0usize;
        for s in corpus.samples() {
            let adv = gop.apply(&s.image)?;
            let dev = adv.max_abs_diff(&s.image);
            max_dev = max_dev.max(dev);
            out_min = out_min.min(adv.min());
            out_max = out_max.max(adv.max());
            if dev > gop.sigma + 1e-6 {
                violations += 1;
            }
        }
        rows.push(vec!["applied_max_dev".into(), format!("{max_dev:.6}")]);
        rows.push(vec![
            "applied_range".into(),
            format!("[{out_min:.4}, {out_max:.4}]"),
        ]);
        rows.push(vec!["budget_violations".into(), violations.to_string()]);
        rows.push(vec![
            "budget_ok".into(),
            if violations == 0 {
                "yes".into()
            } else {
                "NO".into()
            },
        ]);
    }
    Ok(Table::new(vec!["field", "value"], rows))
}

/// Render the per-pixel perturbation magnitude as a grayscale PNG. With a
/// corpus, the heat is the mean applied |x′−x| per pixel; without one it is
/// the normalized pattern itself.
pub fn write_heatmap(
    gop: &GopArtifact,
    corpus: Option<&LabeledCorpus>,
    path: &Path,
) -> CliResult<()> {
    let shape = gop.delta.shape();
    let (h, w) = (shape[1], shape[2]);
    let heat: Vec<f64> = match corpus {
        Some(corpus) => {
            let mut acc = vec![0.0f64; h * w];
            for s in corpus.samples() {
                let adv = gop.apply(&s.image)?;
                for y in 0..h {
                    for x in 0..w {
                        let mut dev = 0.0f64;
                        for c in 0..3 {
                            dev = dev.max(
                                (adv.data()[c * h * w + y * w + x]
                                    - s.image.data()[c * h * w + y * w + x])
                                    .abs(),
                            );
                        }
                        acc[y * w + x] += dev;
                    }
                }
            }
            let n = corpus.len() as f64;
            acc.into_iter().map(|v| v / n).collect()
        }
        None => {
            let mut acc = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0f64;
                    for c in 0..3 {
                        v += gop.delta.data()[c * h * w + y * w + x];
                    }
                    acc[y * w + x] = v / 3.0;
                }
            }
            acc
        }
    };
    let lo = heat.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img = Tensor::zeros(&[3, h, w]);
    for (i, &v) in heat.iter().enumerate() {
        let g = (v - lo) / span;
        for c in 0..3 {
            img.data_mut()[c * h * w + i] = g;
        }
    }
    write_png(path, &img)
}
