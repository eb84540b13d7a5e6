//! Versioned binary containers for model checkpoints and fingerprint
//! artifacts. One magic plus a version prefix; loading anything with a
//! mismatched version fails loudly rather than reinterpreting bytes.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use mmfinger_core::encoders::{DualEncoder, EncoderArch, Tokenizer};
use mmfinger_core::gop::GopArtifact;
use mmfinger_core::prompt::{PromptArtifact, PromptState};
use mmfinger_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"MMFG";
pub const FORMAT_VERSION: u16 = 1;

const KIND_ENCODER: u8 = 1;
const KIND_GOP: u8 = 2;
const KIND_PROMPT: u8 = 3;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(kind);
        Writer { buf }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn finish(self, path: &Path) -> CliResult<()> {
        let mut file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        file.write_all(&self.buf).map_err(|e| CliError::io(path, e))
    }
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
    path: String,
}

impl Reader {
    fn open(path: &Path, kind: u8) -> CliResult<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| CliError::io(path, e))?;
        let mut r = Reader {
            buf,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(CliError::validation(format!(
                "{}: not an artifact file",
                r.path
            )));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(CliError::validation(format!(
                "{}: format version {version} but this build reads version {FORMAT_VERSION}",
                r.path
            )));
        }
        let got_kind = r.u8()?;
        if got_kind != kind {
            return Err(CliError::validation(format!(
                "{}: artifact kind {got_kind}, expected {kind}",
                r.path
            )));
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> CliResult<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::validation(format!(
                "{}: truncated artifact",
                self.path
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> CliResult<String> {
        let len = self.u32()? as usize;
        let bytes = self.bytes(len)?.to_vec();
        String::from_utf8(bytes)
            .map_err(|_| CliError::validation(format!("{}: non-UTF8 string field", self.path)))
    }

    fn tensor(&mut self) -> CliResult<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CliError::validation(format!(
                "{}: implausible tensor rank {rank}",
                self.path
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(&shape, data))
    }

    fn done(&self) -> CliResult<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::validation(format!(
                "{}: {} trailing bytes",
                self.path,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Save an encoder: architecture, image shape, vocabulary, then every
/// parameter tensor in declared order.
pub fn save_encoder(enc: &DualEncoder, path: &Path) -> CliResult<()> {
    let mut w = Writer::new(KIND_ENCODER);
    let arch = enc.arch();
    w.u32(arch.embed_dim as u32);
    w.u32(arch.conv1_ch as u32);
    w.u32(arch.conv2_ch as u32);
    w.u32(arch.txt_hidden as u32);
    let (h, wd) = enc.image_shape();
    w.u32(h as u32);
    w.u32(wd as u32);
    let vocab = enc.tokenizer().vocab();
    w.u32(vocab.len() as u32);
    for word in vocab {
        w.string(word);
    }
    for p in enc.params() {
        w.tensor(p);
    }
    w.finish(path)
}

pub fn load_encoder(path: &Path) -> CliResult<DualEncoder> {
    let mut r = Reader::open(path, KIND_ENCODER)?;
    let arch = EncoderArch {
        embed_dim: r.u32()? as usize,
        conv1_ch: r.u32()? as usize,
        conv2_ch: r.u32()? as usize,
        txt_hidden: r.u32()? as usize,
    };
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let vocab_len = r.u32()? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(r.string()?);
    }
    let tokenizer = Tokenizer::from_vocab(vocab);
    let mut enc = DualEncoder::new(arch, (h, w), tokenizer, 0)
        .map_err(|e| CliError::validation(format!("{path:?}: {e}")))?;
    for slot in enc.params_mut() {
        let loaded = r.tensor()?;
        if loaded.shape() != slot.shape() {
            return Err(CliError::validation(format!(
                "{}: parameter shape {:?} does not match architecture {:?}",
                path.display(),
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    r.done()?;
    Ok(enc)
}

pub fn save_gop(artifact: &GopArtifact, path: &Path) -> CliResult<()> {
    let mut w = Writer::new(KIND_GOP);
    w.f64(artifact.sigma);
    w.u64(artifact.seed);
    w.string(&artifact.k_o);
    w.string(&artifact.k_adv);
    w.string(&artifact.surrogate_hash);
    w.tensor(&artifact.delta);
    w.finish(path)
}

pub fn load_gop(path: &Path) -> CliResult<GopArtifact> {
    let mut r = Reader::open(path, KIND_GOP)?;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    let k_o = r.string()?;
    let k_adv = r.string()?;
    let surrogate_hash = r.string()?;
    let delta = r.tensor()?;
    r.done()?;
    Ok(GopArtifact {
        delta,
        sigma,
        k_o,
        k_adv,
        seed,
        surrogate_hash,
    })
}

pub fn save_prompt(artifact: &PromptArtifact, path: &Path) -> CliResult<()> {
    let mut w = Writer::new(KIND_PROMPT);
    w.string(&artifact.k_o);
    w.string(&artifact.k_adv);
    w.u64(artifact.seed);
    w.string(&artifact.surrogate_hash);
    let s = &artifact.state;
    w.u32(s.n as u32);
    w.f64(s.lambda);
    w.f64(s.omega);
    w.tensor(&s.p_c);
    w.tensor(&s.res);
    w.u32(s.restricted_vocab.len() as u32);
    for &id in &s.restricted_vocab {
        w.u32(id as u32);
    }
    w.u32(s.discrete_tokens.len() as u32);
    for &id in &s.discrete_tokens {
        w.u32(id as u32);
    }
    w.finish(path)
}

pub fn load_prompt(path: &Path) -> CliResult<PromptArtifact> {
    let mut r = Reader::open(path, KIND_PROMPT)?;
    let k_o = r.string()?;
    let k_adv = r.string()?;
    let seed = r.u64()?;
    let surrogate_hash = r.string()?;
    let n = r.u32()? as usize;
    let lambda = r.f64()?;
    let omega = r.f64()?;
    let p_c = r.tensor()?;
    let res = r.tensor()?;
    let rv_len = r.u32()? as usize;
    let mut restricted_vocab = Vec::with_capacity(rv_len);
    for _ in 0..rv_len {
        restricted_vocab.push(r.u32()? as usize);
    }
    let dt_len = r.u32()? as usize;
    let mut discrete_tokens = Vec::with_capacity(dt_len);
    for _ in 0..dt_len {
        discrete_tokens.push(r.u32()? as usize);
    }
    r.done()?;
    Ok(PromptArtifact {
        state: PromptState {
            p_c,
            n,
            lambda,
            omega,
            res,
            restricted_vocab,
            discrete_tokens,
        },
        k_o,
        k_adv,
        seed,
        surrogate_hash,
    })
}

/// SHA-256 of a file, hex-encoded. Used for artifact identity in records.
pub fn file_sha256(path: &Path) -> CliResult<String> {
    let mut file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmfinger_core::corpus::synth_toy_corpus;

    fn sample_encoder() -> DualEncoder {
        let corpus = synth_toy_corpus(3, 2, (16, 16), 4).unwrap();
        DualEncoder::new(
            EncoderArch {
                embed_dim: 16,
                conv1_ch: 4,
                conv2_ch: 6,
                txt_hidden: 12,
            },
            (16, 16),
            Tokenizer::from_corpus(&corpus),
            9,
        )
        .unwrap()
    }

    #[test]
    fn encoder_round_trip_preserves_everything() {
        let enc = sample_encoder();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&enc, &path).unwrap();
        let back = load_encoder(&path).unwrap();
        assert_eq!(back.param_hash(), enc.param_hash());
        assert_eq!(back.tokenizer(), enc.tokenizer());
        assert_eq!(back.arch(), enc.arch());
    }

    #[test]
    fn version_mismatch_fails_loudly() {
        let enc = sample_encoder();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&enc, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF; // clobber the version field
        std::fs::write(&path, bytes).unwrap();
        let err = load_encoder(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let enc = sample_encoder();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&enc, &path).unwrap();
        let err = load_gop(&path).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
    }

    #[test]
    fn gop_and_prompt_round_trip() {
        use mmfinger_core::tensor::Tensor;
        let dir = tempfile::tempdir().unwrap();
        let gop = GopArtifact {
            delta: Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect()),
            sigma: 0.04,
            k_o: "crimson disk".into(),
            k_adv: "jade ring".into(),
            seed: 5,
            surrogate_hash: "abc123".into(),
        };
        let gpath = dir.path().join("gop.bin");
        save_gop(&gop, &gpath).unwrap();
        assert_eq!(load_gop(&gpath).unwrap(), gop);

        let prompt = PromptArtifact {
            state: PromptState {
                p_c: Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
                n: 2,
                lambda: 1.3,
                omega: 0.08,
                res: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.25, 0.75]),
                restricted_vocab: vec![2, 5],
                discrete_tokens: vec![2, 5],
            },
            k_o: "crimson disk".into(),
            k_adv: "jade ring".into(),
            seed: 1,
            surrogate_hash: "abc123".into(),
        };
        let ppath = dir.path().join("prompt.bin");
        save_prompt(&prompt, &ppath).unwrap();
        assert_eq!(load_prompt(&ppath).unwrap(), prompt);
    }
}
