//! Run configuration: one TOML file drives the whole pipeline. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmfinger_core::gop::{AdvDiscriminator, GopTrainConfig};
use mmfinger_core::prompt::{PromptConfig, PromptInit};
use mmfinger_core::verify::{Direction, Thresholds};

use crate::error::{CliError, CliResult};

pub const ENV_OUT_DIR: &str = "MMFINGER_OUT_DIR";
pub const ENV_PARALLELISM: &str = "MMFINGER_PARALLELISM";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub labels: LabelSection,
    pub surrogate: SurrogateSection,
    pub suspects: SuspectSection,
    pub gop: GopSection,
    pub prompt: PromptSection,
    pub verify: VerifySection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LabelSection {
    pub k_o: String,
    pub k_adv: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub arch: ArchChoice,
    pub init_seed: u64,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Default,
    Wide,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SuspectSection {
    /// Seed of the disjoint corpus the benign model trains on.
    pub other_seed: u64,
    pub pair_seed: u64,
    /// When true the suspects fine-tune the same pre-trained base as the
    /// surrogate (the usual published-checkpoint situation); when false they
    /// start from an independent initialization.
    pub share_base: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GopSection {
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
    pub adv_disc: AdvChoice,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AdvChoice {
    Intra,
    Inter,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub n: usize,
    pub lambda: f64,
    pub omega: f64,
    pub steps: usize,
    pub lr: f64,
    pub proj_steps: usize,
    pub proj_lr: f64,
    /// Literal initialization string, or "random".
    pub init: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub clean_floor: f64,
    pub ks: Vec<usize>,
    pub direction: DirectionChoice,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DirectionChoice {
    ImageToText,
    TextToImage,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    /// The desk-scale toy profile. Loss weights, budget and prompt
    /// hyperparameters keep their standard defaults; the optimization
    /// schedules are scaled to the 8x16 synthetic corpus, where one epoch is
    /// a single optimizer step.
    fn default() -> Self {
        let gop = GopTrainConfig::default();
        let prompt = PromptConfig::default();
        let th = Thresholds::default();
        RunConfig {
            corpus: CorpusSection {
                n_classes: 8,
                per_class: 16,
                height: 32,
                width: 32,
                seed: 13,
            },
            labels: LabelSection {
                k_o: "crimson disk".into(),
                k_adv: "jade ring".into(),
            },
            surrogate: SurrogateSection {
                arch: ArchChoice::Default,
                init_seed: 1,
                ft_epochs: mmfinger_core::encoders::TOY_FT_EPOCHS,
                ft_lr: mmfinger_core::encoders::TOY_FT_LR,
                ft_seed: 7,
            },
            suspects: SuspectSection {
                other_seed: 33,
                pair_seed: 99,
                share_base: true,
            },
            gop: GopSection {
                alpha: gop.alpha,
                beta: gop.beta,
                gamma1: gop.gamma1,
                gamma2: gop.gamma2,
                sigma: gop.sigma,
                epochs: 300,
                batch_size: gop.batch_size,
                lr_g: 1e-2,
                lr_d: 1e-4,
                seed: 0,
                use_intra: true,
                use_inter: true,
                adv_disc: AdvChoice::Both,
            },
            prompt: PromptSection {
                n: prompt.n,
                lambda: prompt.lambda,
                omega: prompt.omega,
                steps: prompt.steps,
                lr: prompt.lr,
                proj_steps: prompt.proj_steps,
                proj_lr: prompt.proj_lr,
                init: "a photo of a".into(),
                seed: 0,
            },
            verify: VerifySection {
                eps1: th.eps1,
                eps2: th.eps2,
                eps3: th.eps3,
                clean_floor: th.clean_floor,
                ks: vec![1, 5],
                direction: DirectionChoice::ImageToText,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/toy"),
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.corpus.n_classes < 2 {
            return Err(CliError::validation("corpus.n_classes must be at least 2"));
        }
        if self.labels.k_o == self.labels.k_adv {
            return Err(CliError::validation(
                "labels.k_o and labels.k_adv must differ",
            ));
        }
        self.gop_config()
            .validate()
            .map_err(|e| CliError::validation(format!("gop: {e}")))?;
        self.prompt_config()
            .validate()
            .map_err(|e| CliError::validation(format!("prompt: {e}")))?;
        self.thresholds()
            .validate()
            .map_err(|e| CliError::validation(format!("verify: {e}")))?;
        for &k in &self.verify.ks {
            if k == 0 || k > self.corpus.n_classes {
                return Err(CliError::validation(format!(
                    "verify.ks entry {k} out of range for {} classes",
                    self.corpus.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Output directory, honoring the environment override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(ENV_OUT_DIR) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }

    /// Worker count for sweeps: env override, else 1 (fully sequential).
    pub fn parallelism() -> usize {
        std::env::var(ENV_PARALLELISM)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    }

    pub fn arch(&self) -> mmfinger_core::EncoderArch {
        match self.surrogate.arch {
            ArchChoice::Default => mmfinger_core::EncoderArch::default(),
            ArchChoice::Wide => mmfinger_core::EncoderArch::wide(),
        }
    }

    pub fn gop_config(&self) -> GopTrainConfig {
        GopTrainConfig {
            alpha: self.gop.alpha,
            beta: self.gop.beta,
            gamma1: self.gop.gamma1,
            gamma2: self.gop.gamma2,
            sigma: self.gop.sigma,
            epochs: self.gop.epochs,
            batch_size: self.gop.batch_size,
            lr_g: self.gop.lr_g,
            lr_d: self.gop.lr_d,
            seed: self.gop.seed,
            use_intra: self.gop.use_intra,
            use_inter: self.gop.use_inter,
            adv_disc: match self.gop.adv_disc {
                AdvChoice::Intra => AdvDiscriminator::Intra,
                AdvChoice::Inter => AdvDiscriminator::Inter,
                AdvChoice::Both => AdvDiscriminator::Both,
            },
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            n: self.prompt.n,
            lambda: self.prompt.lambda,
            omega: self.prompt.omega,
            steps: self.prompt.steps,
            lr: self.prompt.lr,
            proj_steps: self.prompt.proj_steps,
            proj_lr: self.prompt.proj_lr,
            init: if self.prompt.init.eq_ignore_ascii_case("random") {
                PromptInit::Random
            } else {
                PromptInit::Literal(self.prompt.init.clone())
            },
            seed: self.prompt.seed,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            eps1: self.verify.eps1,
            eps2: self.verify.eps2,
            eps3: self.verify.eps3,
            clean_floor: self.verify.clean_floor,
        }
    }

    pub fn direction(&self) -> Direction {
        match self.verify.direction {
            DirectionChoice::ImageToText => Direction::ImageToText,
            DirectionChoice::TextToImage => Direction::TextToImage,
            DirectionChoice::Both => Direction::Both,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut text = toml::to_string_pretty(&RunConfig::default()).unwrap();
        text.push_str("\n[corpus2]\nn_classes = 4\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let typo = text.replace("per_class", "per_clas");
        assert!(toml::from_str::<RunConfig>(&typo).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }
}
