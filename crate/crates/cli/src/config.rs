//! Run configuration, read from TOML.
//!
//! Every key is optional. Unknown keys are rejected. The resolved config
//! serializes back to TOML and re-parses to an equal value.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mosaic::encoder::EncoderConfig;
use mosaic::objectives::{JointLossConfig, MaskScope, MaskingConfig};
use mosaic::trainer::{PipelineConfig, Stage1Config, StageConfig, StageKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives weight init, shuffling and masking.
    pub seed: u64,
    pub encoder: EncoderSection,
    pub tokenizer: TokenizerSection,
    pub stage1: Stage1Config,
    pub stage2: TrainSection,
    pub stage3: TrainSection,
    pub filter: TopK,
    pub eval: TopK,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderSection::default(),
            tokenizer: TokenizerSection::default(),
            stage1: Stage1Config::default(),
            stage2: TrainSection::default(),
            stage3: TrainSection::default(),
            filter: TopK::default(),
            eval: TopK::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            layers: e.layers,
            heads: e.heads,
            model_dim: e.model_dim,
            ff_dim: e.ff_dim,
            max_len: e.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 8000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub masking: MaskingSection,
    pub joint: JointLossConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = StageConfig::desk(StageKind::Stage2);
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            max_lr: s.max_lr,
            weight_decay: s.weight_decay,
            warmup_fraction: s.warmup_fraction,
            masking: MaskingSection::default(),
            joint: s.joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingSection {
    pub rate: f64,
    pub scope: MaskScope,
    pub mask_documents: bool,
}

impl Default for MaskingSection {
    fn default() -> Self {
        let m = MaskingConfig::default();
        Self {
            rate: m.rate,
            scope: m.scope,
            mask_documents: m.mask_documents,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopK {
    pub k: usize,
}

impl Default for TopK {
    fn default() -> Self {
        Self { k: 10 }
    }
}

/// File locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collection: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qrels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // Quote the offending line so the key is named even for type errors.
            let at = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count());
            match at.and_then(|n| text.lines().nth(n)) {
                Some(line) => anyhow::anyhow!("config line {} `{}`: {}", at.unwrap() + 1, line.trim(), e.message().trim()),
                None => anyhow::anyhow!("config: {}", e.message().trim()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(1).validate().context("encoder")?;
        for kind in [StageKind::Stage2, StageKind::Stage3] {
            self.stage_config(kind).validate().with_context(|| kind.name().to_string())?;
        }
        if self.tokenizer.vocab_size == 0 {
            bail!("tokenizer.vocab_size must be positive");
        }
        if self.filter.k == 0 {
            bail!("filter.k must be at least 1");
        }
        if self.eval.k == 0 {
            bail!("eval.k must be at least 1");
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            layers: e.layers,
            heads: e.heads,
            model_dim: e.model_dim,
            ff_dim: e.ff_dim,
            max_len: e.max_len,
            vocab_size,
            seed: self.seed,
        }
    }

    pub fn stage_config(&self, kind: StageKind) -> StageConfig {
        let s = if kind == StageKind::Stage3 { &self.stage3 } else { &self.stage2 };
        StageConfig {
            stage: kind,
            epochs: s.epochs,
            batch_size: s.batch_size,
            max_lr: s.max_lr,
            weight_decay: s.weight_decay,
            warmup_fraction: s.warmup_fraction,
            masking: MaskingConfig {
                rate: s.masking.rate,
                scope: s.masking.scope,
                seed: self.seed,
                mask_documents: s.masking.mask_documents,
            },
            joint: s.joint.clone(),
            seed: self.seed,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            stage1: self.stage1.clone(),
            stage2: self.stage_config(StageKind::Stage2),
            stage3: self.stage_config(StageKind::Stage3),
        }
    }
}
