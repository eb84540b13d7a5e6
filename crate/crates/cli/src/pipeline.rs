//! End-to-end orchestration: fingerprint extraction, suspect construction,
//! verification runs and the ablation sweeps, together with the experiment
//! record that ties every reported metric to an artifact hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mmfinger_core::corpus::{prune_corpus, select_pair, synth_toy_corpus, LabeledCorpus};
use mmfinger_core::encoders::{make_model_pair_from, DualEncoder, Tokenizer};
use mmfinger_core::gop::{train_gop, GopArtifact, GopTrainConfig};
use mmfinger_core::prompt::{
    build_gop_corpus, render_discrete_prompt, train_prompt, PromptArtifact, PromptConfig,
};
use mmfinger_core::verify::{
    psnr, run_verification, ssim, Direction, SimilarityScorer, VerificationReport,
};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{self, ManifestFormat};
use crate::report::Table;

pub const SURROGATE_FILE: &str = "surrogate.ckpt";
pub const GOP_FILE: &str = "gop.bin";
pub const GOP_SIDECAR: &str = "gop.json";
pub const PROMPT_FILE: &str = "prompt.bin";
pub const PROMPT_SIDECAR: &str = "prompt.json";
pub const RECORD_FILE: &str = "record.json";

/// Continued-training epochs for the hybrid-fine-tuning robustness sweep.
const HYBRID_DEFENSE_EPOCHS: usize = 4;

/// Fixed removal seed for the pruning robustness sweep.
pub const PRUNE_SWEEP_SEED: u64 = 1;

/// Config snapshot, artifact hashes, metrics and timings of one run.
/// Timings are wall-clock and therefore excluded from determinism claims;
/// everything else is reproducible byte-for-byte from the config.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: RunConfig,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: Vec<MetricEntry>,
    pub timings_ms: BTreeMap<String, u128>,
}

/// One recorded metric, pointing at the artifacts it was measured from.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GopSidecar {
    sigma: f64,
    k_o: String,
    k_adv: String,
    seed: u64,
    surrogate_hash: String,
    delta_min: f64,
    delta_max: f64,
    max_applied_dev: f64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptSidecar {
    k_o: String,
    k_adv: String,
    n: usize,
    lambda: f64,
    omega: f64,
    tokens: Vec<String>,
    rendered: BTreeMap<String, String>,
    sha256: String,
}

/// The corpus a config refers to: an explicit directory or deterministic
/// synthesis from the `[corpus]` section.
pub fn resolve_corpus(config: &RunConfig, corpus_dir: Option<&Path>) -> CliResult<LabeledCorpus> {
    match corpus_dir {
        Some(dir) => manifest::load_corpus(dir, ManifestFormat::JsonLines),
        None => Ok(synth_toy_corpus(
            config.corpus.n_classes,
            config.corpus.per_class,
            (config.corpus.height, config.corpus.width),
            config.corpus.seed,
        )?),
    }
}

/// The shared pre-trained base every party fine-tunes from.
pub fn base_encoder(config: &RunConfig, corpus: &LabeledCorpus) -> CliResult<DualEncoder> {
    Ok(DualEncoder::new(
        config.arch(),
        corpus.image_shape(),
        Tokenizer::from_corpus(corpus),
        config.surrogate.init_seed,
    )?)
}

pub struct ExtractedBundle {
    pub dir: PathBuf,
    pub surrogate: DualEncoder,
    pub gop: GopArtifact,
    pub prompt: PromptArtifact,
}

/// Fine-tune the surrogate, train the perturbation and the prompt, and
/// persist the bundle: surrogate checkpoint, both fingerprint artifacts with
/// their JSON sidecars, and the experiment record.
pub fn cmd_extract(config: &RunConfig, corpus_dir: Option<&Path>) -> CliResult<ExtractedBundle> {
    config.validate()?;
    let out = config.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let corpus = resolve_corpus(config, corpus_dir)?;
    for label in [&config.labels.k_o, &config.labels.k_adv] {
        if corpus.label_index(label).is_none() {
            return Err(CliError::validation(format!(
                "label {label:?} not present in corpus"
            )));
        }
    }

    let mut timings = BTreeMap::new();
    let mut metrics = Vec::new();

    let t = Instant::now();
    let base = base_encoder(config, &corpus)?;
    let (surrogate, ft_trace) = base
        .fine_tune(
            &corpus,
            config.surrogate.ft_epochs,
            config.surrogate.ft_lr,
            config.surrogate.ft_seed,
        )
        .map_err(|e| CliError::runtime(format!("surrogate fine-tune: {e}")))?;
    timings.insert("surrogate_ft".into(), t.elapsed().as_millis());

    let (source, target) = select_pair(&corpus, &config.labels.k_o, &config.labels.k_adv)?;
    let t = Instant::now();
    let (gop, gop_trace) = train_gop(&source, &target, &surrogate, &config.gop_config())
        .map_err(|e| CliError::runtime(format!("perturbation training: {e}")))?;
    timings.insert("gop".into(), t.elapsed().as_millis());

    let t = Instant::now();
    let gop_corpus = build_gop_corpus(&corpus, &gop, surrogate.tokenizer())
        .map_err(|e| CliError::runtime(format!("perturbed corpus: {e}")))?;
    let (state, prompt_trace) = train_prompt(&surrogate, &gop_corpus, &config.prompt_config())
        .map_err(|e| CliError::runtime(format!("prompt training: {e}")))?;
    timings.insert("prompt".into(), t.elapsed().as_millis());
    let prompt = PromptArtifact {
        state,
        k_o: gop.k_o.clone(),
        k_adv: gop.k_adv.clone(),
        seed: config.prompt.seed,
        surrogate_hash: gop.surrogate_hash.clone(),
    };

    // Persist artifacts.
    let surrogate_path = out.join(SURROGATE_FILE);
    checkpoint::save_encoder(&surrogate, &surrogate_path)?;
    let gop_path = out.join(GOP_FILE);
    checkpoint::save_gop(&gop, &gop_path)?;
    let prompt_path = out.join(PROMPT_FILE);
    checkpoint::save_prompt(&prompt, &prompt_path)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert(
        "surrogate".to_string(),
        checkpoint::file_sha256(&surrogate_path)?,
    );
    artifacts.insert("gop".to_string(), checkpoint::file_sha256(&gop_path)?);
    artifacts.insert("prompt".to_string(), checkpoint::file_sha256(&prompt_path)?);

    // Sidecars.
    let max_applied_dev = corpus
        .samples()
        .iter()
        .map(|s| gop.apply(&s.image).map(|adv| adv.max_abs_diff(&s.image)))
        .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))?;
    let gop_sidecar = GopSidecar {
        sigma: gop.sigma,
        k_o: gop.k_o.clone(),
        k_adv: gop.k_adv.clone(),
        seed: gop.seed,
        surrogate_hash: gop.surrogate_hash.clone(),
        delta_min: gop.delta.min(),
        delta_max: gop.delta.max(),
        max_applied_dev,
        sha256: artifacts["gop"].clone(),
    };
    write_json(&out.join(GOP_SIDECAR), &gop_sidecar)?;

    let tokens: Vec<String> = prompt
        .state
        .discrete_tokens
        .iter()
        .map(|&t| {
            surrogate
                .tokenizer()
                .token(t)
                .unwrap_or("<unk>")
                .to_string()
        })
        .collect();
    let rendered: BTreeMap<String, String> = corpus
        .class_names()
        .iter()
        .map(|name| {
            render_discrete_prompt(surrogate.tokenizer(), &prompt.state, name)
                .map(|text| (name.clone(), text))
        })
        .collect::<Result<_, _>>()?;
    let prompt_sidecar = PromptSidecar {
        k_o: prompt.k_o.clone(),
        k_adv: prompt.k_adv.clone(),
        n: prompt.state.n,
        lambda: prompt.state.lambda,
        omega: prompt.state.omega,
        tokens,
        rendered,
        sha256: artifacts["prompt"].clone(),
    };
    write_json(&out.join(PROMPT_SIDECAR), &prompt_sidecar)?;

    // Metrics tied to artifact hashes.
    let push = |metrics: &mut Vec<MetricEntry>, name: &str, value: f64, refs: &[&str]| {
        metrics.push(MetricEntry {
            name: name.into(),
            value,
            artifacts: refs.iter().map(|s| s.to_string()).collect(),
        });
    };
    if let (Some(first), Some(last)) = (ft_trace.first(), ft_trace.last()) {
        push(
            &mut metrics,
            "surrogate_ft_loss_first",
            *first,
            &["surrogate"],
        );
        push(
            &mut metrics,
            "surrogate_ft_loss_last",
            *last,
            &["surrogate"],
        );
    }
    if let Some(last) = gop_trace.loss_g.last() {
        push(
            &mut metrics,
            "gop_loss_g_last",
            *last,
            &["gop", "surrogate"],
        );
    }
    push(
        &mut metrics,
        "gop_max_abs_dev",
        gop_trace.max_abs_dev,
        &["gop"],
    );
    if let (Some(first), Some(last)) = (prompt_trace.loss.first(), prompt_trace.loss.last()) {
        push(
            &mut metrics,
            "prompt_loss_first",
            *first,
            &["prompt", "surrogate"],
        );
        push(
            &mut metrics,
            "prompt_loss_last",
            *last,
            &["prompt", "surrogate"],
        );
    }

    let record = ExperimentRecord {
        config: config.clone(),
        artifacts,
        metrics,
        timings_ms: timings,
    };
    write_json(&out.join(RECORD_FILE), &record)?;

    Ok(ExtractedBundle {
        dir: out,
        surrogate,
        gop,
        prompt,
    })
}

pub struct LoadedBundle {
    pub surrogate: DualEncoder,
    pub gop: GopArtifact,
    pub prompt: PromptArtifact,
}

pub fn load_bundle(dir: &Path) -> CliResult<LoadedBundle> {
    Ok(LoadedBundle {
        surrogate: checkpoint::load_encoder(&dir.join(SURROGATE_FILE))?,
        gop: checkpoint::load_gop(&dir.join(GOP_FILE))?,
        prompt: checkpoint::load_prompt(&dir.join(PROMPT_FILE))?,
    })
}

pub struct SuspectPaths {
    pub malicious: PathBuf,
    pub benign: PathBuf,
    pub untrained: PathBuf,
}

/// Build the toy suspect models: a malicious model fine-tuned on the
/// protected corpus, a benign model fine-tuned on a disjoint corpus, and an
/// untrained model for the competence gate.
pub fn cmd_suspects(config: &RunConfig, corpus_dir: Option<&Path>) -> CliResult<SuspectPaths> {
    config.validate()?;
    let corpus = resolve_corpus(config, corpus_dir)?;
    let other = synth_toy_corpus(
        config.corpus.n_classes,
        config.corpus.per_class,
        (config.corpus.height, config.corpus.width),
        config.suspects.other_seed,
    )?;
    let (malicious, benign) = if config.suspects.share_base {
        let base = base_encoder(config, &corpus)?;
        make_model_pair_from(base, &corpus, &other, config.suspects.pair_seed)?
    } else {
        mmfinger_core::encoders::make_model_pair(&corpus, &other, config.suspects.pair_seed)?
    };
    let untrained = DualEncoder::new(
        config.arch(),
        corpus.image_shape(),
        Tokenizer::from_corpus(&corpus),
        config.suspects.pair_seed ^ 0x5eed,
    )?;

    let dir = config.out_dir().join("suspects");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let paths = SuspectPaths {
        malicious: dir.join("malicious.ckpt"),
        benign: dir.join("benign.ckpt"),
        untrained: dir.join("untrained.ckpt"),
    };
    checkpoint::save_encoder(&malicious, &paths.malicious)?;
    checkpoint::save_encoder(&benign, &paths.benign)?;
    checkpoint::save_encoder(&untrained, &paths.untrained)?;
    Ok(paths)
}

/// Run verification of one suspicious model against an extracted bundle.
pub fn cmd_verify(
    config: &RunConfig,
    bundle_dir: &Path,
    scorer: &dyn SimilarityScorer,
    corpus_dir: Option<&Path>,
    baseline: Option<&Path>,
) -> CliResult<VerificationReport> {
    config.validate()?;
    let corpus = resolve_corpus(config, corpus_dir)?;
    let bundle = load_bundle(bundle_dir)?;
    let mut report = run_verification(
        &corpus,
        &bundle.gop,
        &bundle.prompt,
        bundle.surrogate.tokenizer(),
        scorer,
        &config.thresholds(),
        &config.verify.ks,
        config.direction(),
    )?;
    if let Some(base_path) = baseline {
        let text = std::fs::read_to_string(base_path).map_err(|e| CliError::io(base_path, e))?;
        let benign: VerificationReport = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", base_path.display())))?;
        report = report.with_baseline(&benign);
    }
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("{}: encode: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

// ---- sweeps ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Budget,
    PromptLength,
    PromptInit,
    Modules,
    Pruning,
    Hybrid,
}

impl Sweep {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "budget" => Ok(Sweep::Budget),
            "prompt-length" | "prompt_length" => Ok(Sweep::PromptLength),
            "prompt-init" | "prompt_init" => Ok(Sweep::PromptInit),
            "modules" => Ok(Sweep::Modules),
            "pruning" => Ok(Sweep::Pruning),
            "hybrid" => Ok(Sweep::Hybrid),
            other => Err(CliError::validation(format!(
                "unknown sweep {other:?} (budget, prompt-length, prompt-init, modules, pruning, hybrid)"
            ))),
        }
    }
}

/// Shared context for sweep cells.
struct SweepCtx {
    config: RunConfig,
    corpus: LabeledCorpus,
    surrogate: DualEncoder,
    malicious: DualEncoder,
    benign: DualEncoder,
}

impl SweepCtx {
    fn build(config: &RunConfig, corpus_dir: Option<&Path>) -> CliResult<Self> {
        let corpus = resolve_corpus(config, corpus_dir)?;
        let base = base_encoder(config, &corpus)?;
        let (surrogate, _) = base.clone().fine_tune(
            &corpus,
            config.surrogate.ft_epochs,
            config.surrogate.ft_lr,
            config.surrogate.ft_seed,
        )?;
        let other = synth_toy_corpus(
            config.corpus.n_classes,
            config.corpus.per_class,
            (config.corpus.height, config.corpus.width),
            config.suspects.other_seed,
        )?;
        let (malicious, benign) = if config.suspects.share_base {
            make_model_pair_from(base, &corpus, &other, config.suspects.pair_seed)?
        } else {
            mmfinger_core::encoders::make_model_pair(&corpus, &other, config.suspects.pair_seed)?
        };
        Ok(SweepCtx {
            config: config.clone(),
            corpus,
            surrogate,
            malicious,
            benign,
        })
    }

    /// Extract a fingerprint under modified settings and measure VSR@1 on
    /// both suspects.
    fn fingerprint_cell(
        &self,
        gop_config: &GopTrainConfig,
        prompt_config: &PromptConfig,
    ) -> CliResult<CellOutcome> {
        let (source, target) = select_pair(
            &self.corpus,
            &self.config.labels.k_o,
            &self.config.labels.k_adv,
        )?;
        let (gop, trace) = train_gop(&source, &target, &self.surrogate, gop_config)?;
        let gop_corpus = build_gop_corpus(&self.corpus, &gop, self.surrogate.tokenizer())?;
        let (state, _) = train_prompt(&self.surrogate, &gop_corpus, prompt_config)?;
        let prompt = PromptArtifact {
            state,
            k_o: gop.k_o.clone(),
            k_adv: gop.k_adv.clone(),
            seed: prompt_config.seed,
            surrogate_hash: gop.surrogate_hash.clone(),
        };
        let vsr_mal = self.vsr1(&gop, &prompt, &self.malicious)?;
        let vsr_ben = self.vsr1(&gop, &prompt, &self.benign)?;
        Ok(CellOutcome {
            vsr_mal,
            vsr_ben,
            max_abs_dev: trace.max_abs_dev,
        })
    }

    fn vsr1(
        &self,
        gop: &GopArtifact,
        prompt: &PromptArtifact,
        model: &DualEncoder,
    ) -> CliResult<f64> {
        Ok(self.vsr_at(gop, prompt, model, &[1])?[0])
    }

    fn vsr_at(
        &self,
        gop: &GopArtifact,
        prompt: &PromptArtifact,
        model: &DualEncoder,
        ks: &[usize],
    ) -> CliResult<Vec<f64>> {
        let report = run_verification(
            &self.corpus,
            gop,
            prompt,
            self.surrogate.tokenizer(),
            model,
            &self.config.thresholds(),
            ks,
            Direction::ImageToText,
        )?;
        let metrics = report.primary_metrics().expect("image-to-text metrics");
        Ok(ks.iter().map(|k| metrics.vsr_at_k[k]).collect())
    }
}

struct CellOutcome {
    vsr_mal: f64,
    vsr_ben: f64,
    max_abs_dev: f64,
}

/// Run one ablation sweep and return the result table. Cells run in worker
/// threads when `MMFINGER_PARALLELISM` asks for them; results keep the cell
/// order either way.
pub fn cmd_ablate(config: &RunConfig, sweep: Sweep, corpus_dir: Option<&Path>) -> CliResult<Table> {
    config.validate()?;
    let ctx = SweepCtx::build(config, corpus_dir)?;
    match sweep {
        Sweep::Budget => {
            let budgets: Vec<f64> = [4.0, 6.0, 8.0, 10.0, 12.0, 14.0]
                .iter()
                .map(|v| v / 255.0)
                .collect();
            let rows = run_cells(&budgets, |&sigma| {
                let gop_config = GopTrainConfig {
                    sigma,
                    ..ctx.config.gop_config()
                };
                let cell = ctx.fingerprint_cell(&gop_config, &ctx.config.prompt_config())?;
                Ok(vec![
                    format!("{:.0}/255", sigma * 255.0),
                    format!("{:.4}", cell.vsr_mal),
                    format!("{:.4}", cell.vsr_ben),
                    format!("{:.4}", cell.vsr_mal - cell.vsr_ben),
                    format!("{:.6}", cell.max_abs_dev),
                ])
            })?;
            Ok(Table::new(
                vec![
                    "budget",
                    "vsr1_malicious",
                    "vsr1_benign",
                    "delta_r",
                    "max_abs_dev",
                ],
                rows,
            ))
        }
        Sweep::PromptLength => {
            let lengths = [4usize, 8, 16];
            let rows = run_cells(&lengths, |&n| {
                let prompt_config = PromptConfig {
                    n,
                    ..ctx.config.prompt_config()
                };
                let cell = ctx.fingerprint_cell(&ctx.config.gop_config(), &prompt_config)?;
                Ok(vec![
                    n.to_string(),
                    format!("{:.4}", cell.vsr_mal),
                    format!("{:.4}", cell.vsr_ben),
                    format!("{:.4}", cell.vsr_mal - cell.vsr_ben),
                ])
            })?;
            Ok(Table::new(
                vec!["prompt_len", "vsr1_malicious", "vsr1_benign", "delta_r"],
                rows,
            ))
        }
        Sweep::PromptInit => {
            let inits = ["a photo of a", "a photo of my", "A B C D", "random"].map(String::from);
            let rows = run_cells(&inits, |init| {
                let init_choice = if init == "random" {
                    mmfinger_core::prompt::PromptInit::Random
                } else {
                    mmfinger_core::prompt::PromptInit::Literal(init.clone())
                };
                let prompt_config = PromptConfig {
                    init: init_choice,
                    ..ctx.config.prompt_config()
                };
                let cell = ctx.fingerprint_cell(&ctx.config.gop_config(), &prompt_config)?;
                Ok(vec![
                    init.clone(),
                    format!("{:.4}", cell.vsr_mal),
                    format!("{:.4}", cell.vsr_ben),
                ])
            })?;
            Ok(Table::new(
                vec!["init", "vsr1_malicious", "vsr1_benign"],
                rows,
            ))
        }
        Sweep::Modules => {
            // the six combinations of (intra, inter, textual constraint)
            let combos = [
                (true, true, true),
                (true, false, true),
                (false, true, true),
                (true, true, false),
                (true, false, false),
                (false, true, false),
            ];
            let rows = run_cells(&combos, |&(intra, inter, tc)| {
                let gop_config = GopTrainConfig {
                    use_intra: intra,
                    use_inter: inter,
                    ..ctx.config.gop_config()
                };
                let prompt_config = PromptConfig {
                    lambda: if tc { ctx.config.prompt.lambda } else { 0.0 },
                    ..ctx.config.prompt_config()
                };
                let cell = ctx.fingerprint_cell(&gop_config, &prompt_config)?;
                let mark = |b: bool| if b { "on" } else { "off" };
                Ok(vec![
                    mark(intra).into(),
                    mark(inter).into(),
                    mark(tc).into(),
                    format!("{:.4}", cell.vsr_mal),
                    format!("{:.4}", cell.vsr_ben),
                ])
            })?;
            Ok(Table::new(
                vec![
                    "d_intra",
                    "d_inter",
                    "textual_constraint",
                    "vsr1_malicious",
                    "vsr1_benign",
                ],
                rows,
            ))
        }
        Sweep::Pruning => {
            // One fingerprint from the full corpus; the adversary trains on
            // randomly pruned versions.
            let (source, target) =
                select_pair(&ctx.corpus, &config.labels.k_o, &config.labels.k_adv)?;
            let (gop, _) = train_gop(&source, &target, &ctx.surrogate, &config.gop_config())?;
            let gop_corpus = build_gop_corpus(&ctx.corpus, &gop, ctx.surrogate.tokenizer())?;
            let (state, _) = train_prompt(&ctx.surrogate, &gop_corpus, &config.prompt_config())?;
            let prompt = PromptArtifact {
                state,
                k_o: gop.k_o.clone(),
                k_adv: gop.k_adv.clone(),
                seed: config.prompt.seed,
                surrogate_hash: gop.surrogate_hash.clone(),
            };
            let vsr_ben = ctx.vsr1(&gop, &prompt, &ctx.benign)?;
            let ratios = [0.0f64, 0.2, 0.4, 0.6, 0.8];
            let rows = run_cells(&ratios, |&ratio| {
                let pruned = prune_corpus(&ctx.corpus, ratio, PRUNE_SWEEP_SEED)?;
                let base = base_encoder(&ctx.config, &ctx.corpus)?;
                let (mal, _) = base.fine_tune(
                    &pruned,
                    mmfinger_core::encoders::TOY_FT_EPOCHS,
                    mmfinger_core::encoders::TOY_FT_LR,
                    ctx.config.suspects.pair_seed ^ 0xa1,
                )?;
                let vsr_mal = ctx.vsr1(&gop, &prompt, &mal)?;
                Ok(vec![
                    format!("{ratio:.1}"),
                    format!("{:.4}", vsr_mal),
                    format!("{:.4}", vsr_ben),
                    format!("{:.4}", vsr_mal - vsr_ben),
                ])
            })?;
            Ok(Table::new(
                vec!["prune_ratio", "vsr1_malicious", "vsr1_benign", "delta_r"],
                rows,
            ))
        }
        Sweep::Hybrid => {
            // Adversary keeps fine-tuning the malicious model on a disjoint
            // mixture after training on the protected corpus.
            let (source, target) =
                select_pair(&ctx.corpus, &config.labels.k_o, &config.labels.k_adv)?;
            let (gop, _) = train_gop(&source, &target, &ctx.surrogate, &config.gop_config())?;
            let gop_corpus = build_gop_corpus(&ctx.corpus, &gop, ctx.surrogate.tokenizer())?;
            let (state, _) = train_prompt(&ctx.surrogate, &gop_corpus, &config.prompt_config())?;
            let prompt = PromptArtifact {
                state,
                k_o: gop.k_o.clone(),
                k_adv: gop.k_adv.clone(),
                seed: config.prompt.seed,
                surrogate_hash: gop.surrogate_hash.clone(),
            };
            let hybrid = synth_toy_corpus(
                config.corpus.n_classes,
                config.corpus.per_class,
                (config.corpus.height, config.corpus.width),
                config.suspects.other_seed ^ 0x4879,
            )?;
            // A light continued fine-tune: at this parameter count the full
            // suspect recipe would simply re-train the model, which is
            // retraining, not a defense. Top-5 is the robust signal here,
            // top-1 decays quickly under any continued training.
            let (defended, _) = ctx.malicious.clone().fine_tune(
                &hybrid,
                HYBRID_DEFENSE_EPOCHS,
                mmfinger_core::encoders::TOY_FT_LR,
                config.suspects.pair_seed ^ 0xf7,
            )?;
            let ks = [1usize, 5];
            let mut rows = Vec::new();
            for (name, model) in [
                ("no_defense", &ctx.malicious),
                ("hybrid_fine_tuning", &defended),
                ("benign", &ctx.benign),
            ] {
                let v = ctx.vsr_at(&gop, &prompt, model, &ks)?;
                rows.push(vec![
                    name.to_string(),
                    format!("{:.4}", v[0]),
                    format!("{:.4}", v[1]),
                ]);
            }
            Ok(Table::new(vec!["condition", "vsr1", "vsr5"], rows))
        }
    }
}

/// Evaluate cells in order, optionally with worker threads. Each cell is
/// fully seeded; the output order never depends on scheduling.
fn run_cells<T: Sync>(
    items: &[T],
    cell: impl Fn(&T) -> CliResult<Vec<String>> + Sync,
) -> CliResult<Vec<Vec<String>>> {
    let workers = RunConfig::parallelism().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&cell).collect();
    }
    let chunk_size = items.len().div_ceil(workers);
    let mut slots: Vec<Option<CliResult<Vec<String>>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        for (item_chunk, slot_chunk) in items.chunks(chunk_size).zip(slots.chunks_mut(chunk_size)) {
            let cell = &cell;
            scope.spawn(move || {
                for (item, slot) in item_chunk.iter().zip(slot_chunk) {
                    *slot = Some(cell(item));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("cell not evaluated"))
        .collect()
}

/// Zero-modification check: the corpus released for protection is the corpus
/// itself. Returns (SSIM, PSNR) of the released view against the original;
/// identical data gives exactly (1.0, +inf).
pub fn released_quality(corpus: &LabeledCorpus) -> CliResult<(f64, f64)> {
    let mut worst_ssim = 1.0f64;
    let mut worst_psnr = f64::INFINITY;
    for s in corpus.samples() {
        let released = &s.image; // released as-is, by construction
        worst_ssim = worst_ssim.min(ssim(released, &s.image)?);
        worst_psnr = worst_psnr.min(psnr(released, &s.image)?);
    }
    Ok((worst_ssim, worst_psnr))
}
