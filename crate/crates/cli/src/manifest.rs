//! Corpus persistence: a JSON-lines manifest (one `image_path`/`caption`/
//! `label` record per sample, UTF-8) next to a directory of lossless 8-bit
//! PNG images.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use mmfinger_core::corpus::{LabeledCorpus, MultimodalSample};
use mmfinger_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

/// Manifest encodings. JSON-lines is the only one today; the enum keeps the
/// loader signature stable if another format is ever added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    JsonLines,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    image_path: String,
    caption: String,
    label: String,
}

/// Load a corpus from `dir/manifest.jsonl`. Labels are collected in first
/// appearance order; every validation failure names the offending row.
pub fn load_corpus(dir: &Path, format: ManifestFormat) -> CliResult<LabeledCorpus> {
    let ManifestFormat::JsonLines = format;
    let manifest = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&manifest).map_err(|e| CliError::io(&manifest, e))?;
    let reader = std::io::BufReader::new(file);

    let mut class_names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut shape: Option<(usize, usize)> = None;

    for (row_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| {
            CliError::validation(format!("manifest row {row_idx}: malformed record: {e}"))
        })?;
        if row.caption.trim().is_empty() {
            return Err(CliError::validation(format!(
                "manifest row {row_idx}: caption is empty"
            )));
        }
        let image_path = dir.join(&row.image_path);
        let image = read_png(&image_path)
            .map_err(|e| CliError::validation(format!("manifest row {row_idx}: {e}")))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        match shape {
            None => shape = Some((h, w)),
            Some(expect) if expect != (h, w) => {
                return Err(CliError::validation(format!(
                    "manifest row {row_idx}: image is {h}x{w}, corpus is {}x{}",
                    expect.0, expect.1
                )));
            }
            _ => {}
        }
        let label = *index.entry(row.label.clone()).or_insert_with(|| {
            class_names.push(row.label.clone());
            class_names.len() - 1
        });
        samples.push(MultimodalSample {
            image,
            caption: row.caption,
            label,
        });
    }

    let shape = shape.ok_or_else(|| CliError::validation("manifest lists no samples"))?;
    LabeledCorpus::new(samples, class_names, shape).map_err(|e| CliError::validation(e.to_string()))
}

/// Write a corpus as `manifest.jsonl` plus `img/NNNNN.png`.
pub fn save_corpus(corpus: &LabeledCorpus, dir: &Path) -> CliResult<()> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| CliError::io(&img_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let file = std::fs::File::create(&manifest).map_err(|e| CliError::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for (i, s) in corpus.samples().iter().enumerate() {
        let rel = format!("img/{i:05}.png");
        write_png(&dir.join(&rel), &s.image)?;
        let row = ManifestRow {
            image_path: rel,
            caption: s.caption.clone(),
            label: corpus.class_names()[s.label].clone(),
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| CliError::runtime(format!("encode manifest row {i}: {e}")))?;
        writeln!(out, "{line}").map_err(|e| CliError::io(&manifest, e))?;
    }
    out.flush().map_err(|e| CliError::io(&manifest, e))
}

/// Read an 8-bit RGB(A) or grayscale PNG into a [3,H,W] tensor in [0,1].
pub fn read_png(path: &Path) -> CliResult<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| CliError::validation(format!("{}: not a valid png: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::validation(format!("{}: png decode failed: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::validation(format!(
            "{}: only 8-bit images are supported",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(CliError::validation(format!(
                "{}: unsupported png color type {other:?}",
                path.display()
            )))
        }
    };
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * channels;
            for c in 0..3 {
                let v = buf[px + c.min(channels - 1)] as f64 / 255.0;
                data[c * h * w + y * w + x] = v;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Write a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> CliResult<()> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "write_png expects C,H,W");
    let (h, w) = (shape[1], shape[2]);
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x];
                raw[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| CliError::runtime(format!("{}: png header: {e}", path.display())))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| CliError::runtime(format!("{}: png payload: {e}", path.display())))
}
