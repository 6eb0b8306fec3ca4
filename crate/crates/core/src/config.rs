//! Run configuration: one TOML document per run, schema-validated with
//! cross-field checks before any work starts. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub gsem: GsemConfig,
    pub stages: StagesConfig,
    pub eval: EvalConfig,
    pub owdata: OwdataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            gsem: GsemConfig::default(),
            stages: StagesConfig::default(),
            eval: EvalConfig::default(),
            owdata: OwdataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Images per group (N).
    pub group_size: usize,
    /// Input side length; images are resized to `input_size x input_size`.
    pub input_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: PathBuf::new(), group_size: 5, input_size: 224 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer width (c).
    pub width: usize,
    /// Transformer layers over patch tokens only.
    pub backbone_depth: usize,
    /// Transformer layers with group/specific tokens attached.
    pub token_depth: usize,
    /// Fusion decoder transformer layers.
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channels of the uncertainty feature sequence V after projection.
    pub cv: usize,
    /// Concatenate shallow image features into the upsampling stages of the
    /// fusion decoder.
    pub image_skip: bool,
    pub vqvae: VqvaeConfig,
    pub prior: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 384,
            backbone_depth: 4,
            token_depth: 2,
            decoder_depth: 2,
            heads: 6,
            mlp_ratio: 4,
            cv: 64,
            image_skip: true,
            vqvae: VqvaeConfig::default(),
            prior: PriorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VqvaeConfig {
    /// Number of codebook entries (K).
    pub codebook_size: usize,
    /// Codebook vector width (D).
    pub codebook_dim: usize,
    /// Channel widths of the two stride-2 encoder stages.
    pub channels: [usize; 2],
    /// Residual blocks in encoder and decoder.
    pub res_blocks: usize,
    /// Commitment weight (lambda_0).
    pub commitment: f64,
    /// Reinitialize codebook rows unused for this many steps (0 = never).
    pub dead_code_reinit_after: u64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig {
            codebook_size: 128,
            codebook_dim: 384,
            channels: [64, 128],
            res_blocks: 2,
            commitment: 0.25,
            dead_code_reinit_after: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Hidden channels of the gated masked-convolution blocks.
    pub hidden: usize,
    /// Number of residual gated blocks.
    pub blocks: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { hidden: 64, blocks: 4 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HardnessOrder {
    /// Hard = lowest mixed score (low consensus alignment).
    Low,
    /// Hard = highest mixed score.
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GsemConfig {
    /// Images exchanged per group; 0 disables the exchange entirely.
    pub k: usize,
    /// Weight of the binary measure in the mixed difficulty.
    pub mu: f64,
    pub hardness_order: HardnessOrder,
    /// Min-max normalize both sub-scores before mixing.
    pub normalize_scores: bool,
}

impl Default for GsemConfig {
    fn default() -> Self {
        GsemConfig {
            k: 1,
            mu: 0.5,
            hardness_order: HardnessOrder::Low,
            normalize_scores: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub vqvae: StageParams,
    pub prior: StageParams,
    pub full: StageParams,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            vqvae: StageParams { lambdas: [1.0, 0.0, 0.0], ..StageParams::base() },
            prior: StageParams { lambdas: [0.0, 1.0, 0.0], ..StageParams::base() },
            full: StageParams { lambdas: [0.0, 0.0, 1.0], ..StageParams::base() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default = "StageParams::base")]
pub struct StageParams {
    pub steps: u64,
    pub lr: f64,
    /// (lambda_1, lambda_2, lambda_3): must be one-hot and match the stage.
    pub lambdas: [f64; 3],
    /// Extra checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    /// Full stage only: also fine-tune the generative prior.
    pub unfreeze_prior: bool,
}

impl StageParams {
    fn base() -> Self {
        StageParams {
            steps: 0,
            lr: 1e-4,
            lambdas: [0.0, 0.0, 0.0],
            checkpoint_every: 0,
            unfreeze_prior: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Manifest to evaluate; defaults to `data.manifest`.
    pub manifest: Option<PathBuf>,
    /// Score an existing prediction directory instead of running the model.
    pub predictions_dir: Option<PathBuf>,
    /// Checkpoint to run inference with.
    pub checkpoint: Option<PathBuf>,
    /// Sample V through the generative prior at test time.
    pub sample_prior: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    SingleForeign,
    MultiForeign,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum RatioSamplerConfig {
    /// Truncated normal around `p`.
    Concentrated { p: f64, sigma: f64, min: f64, max: f64 },
    /// Equal-weight mixture of truncated normals around `p1` and `p2`.
    Bimodal { p1: f64, p2: f64, sigma: f64, min: f64, max: f64 },
    Uniform { min: f64, max: f64 },
}

impl Default for RatioSamplerConfig {
    fn default() -> Self {
        // OWCoSal-like: concentrated around 18%, spread 2.4%..37.5%
        RatioSamplerConfig::Concentrated { p: 0.18, sigma: 0.06, min: 0.024, max: 0.375 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OwdataConfig {
    pub base_manifest: PathBuf,
    pub mode: NoiseMode,
    /// Foreign categories drawn per group in multi_foreign mode (1..=3).
    pub foreign_category_count: usize,
    pub ratio: RatioSamplerConfig,
    /// Exact total number of injected noise images across the dataset.
    pub target_total: Option<usize>,
}

impl Default for OwdataConfig {
    fn default() -> Self {
        OwdataConfig {
            base_manifest: PathBuf::new(),
            mode: NoiseMode::SingleForeign,
            foreign_category_count: 1,
            ratio: RatioSamplerConfig::default(),
            target_total: None,
        }
    }
}

/// A single validation finding: key path plus message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub msg: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.msg)
    }
}

impl RunConfig {
    /// Parse a TOML file and apply `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(path.display().to_string(), e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(path.display().to_string(), e.to_string()))
    }

    /// Schema-level and cross-field checks; empty result means valid.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut push = |key: &str, msg: String| issues.push(ConfigIssue { key: key.into(), msg });

        if self.data.group_size < 2 {
            push("data.group_size", "group size must be at least 2".into());
        }
        if self.data.input_size == 0 || self.data.input_size % 16 != 0 {
            push("data.input_size", format!("{} is not a multiple of 16", self.data.input_size));
        }
        if self.model.width == 0 || self.model.heads == 0 || self.model.width % self.model.heads != 0
        {
            push("model.width", format!("width {} must divide heads {}", self.model.width, self.model.heads));
        }
        if self.model.cv == 0 {
            push("model.cv", "uncertainty channels must be positive".into());
        }
        if self.model.vqvae.codebook_size < 2 {
            push("model.vqvae.codebook_size", "codebook needs at least 2 entries".into());
        }
        if self.model.vqvae.codebook_dim == 0 {
            push("model.vqvae.codebook_dim", "codebook dim must be positive".into());
        }
        if self.model.vqvae.commitment < 0.0 {
            push("model.vqvae.commitment", "lambda_0 must be nonnegative".into());
        }
        if self.gsem.mu < 0.0 {
            push("gsem.mu", "mu must be nonnegative".into());
        }
        if 2 * self.gsem.k >= self.data.group_size {
            push(
                "gsem.k",
                format!(
                    "k = {} violates k < N/2 with N = {} (noise must stay a minority)",
                    self.gsem.k, self.data.group_size
                ),
            );
        }
        for (idx, (name, stage)) in [
            ("stages.vqvae", &self.stages.vqvae),
            ("stages.prior", &self.stages.prior),
            ("stages.full", &self.stages.full),
        ]
        .into_iter()
        .enumerate()
        {
            let ones = stage.lambdas.iter().filter(|&&l| l == 1.0).count();
            let zeros = stage.lambdas.iter().filter(|&&l| l == 0.0).count();
            if ones != 1 || zeros != 2 {
                push(
                    &format!("{name}.lambdas"),
                    format!("{:?} is not one-hot", stage.lambdas),
                );
            } else if stage.lambdas[idx] != 1.0 {
                push(
                    &format!("{name}.lambdas"),
                    format!("{:?} does not select this stage's loss", stage.lambdas),
                );
            }
            if stage.lr <= 0.0 {
                push(&format!("{name}.lr"), "learning rate must be positive".into());
            }
        }
        if self.eval.predictions_dir.is_some() && self.eval.checkpoint.is_some() {
            push("eval.predictions_dir", "give either predictions_dir or checkpoint, not both".into());
        }
        match self.owdata.mode {
            NoiseMode::SingleForeign => {}
            NoiseMode::MultiForeign => {
                if !(1..=3).contains(&self.owdata.foreign_category_count) {
                    push(
                        "owdata.foreign_category_count",
                        format!("{} outside 1..=3", self.owdata.foreign_category_count),
                    );
                }
            }
        }
        let (lo, hi) = self.owdata.ratio.bounds();
        if !(0.0..0.5).contains(&lo) || !(0.0..0.5).contains(&hi) || lo > hi {
            push("owdata.ratio", format!("bounds [{lo}, {hi}] must satisfy 0 <= min <= max < 0.5"));
        }
        issues
    }

    /// Fail with the first issue if the config is invalid.
    pub fn ensure_valid(&self) -> Result<()> {
        let issues = self.validate();
        match issues.first() {
            None => Ok(()),
            Some(first) => Err(Error::config(first.key.clone(), first.msg.clone())),
        }
    }

    /// Stable hash of the full config (hex, 12 chars) for run directories.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut s = String::new();
        for b in &digest[..6] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl RatioSamplerConfig {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            RatioSamplerConfig::Concentrated { min, max, .. } => (min, max),
            RatioSamplerConfig::Bimodal { min, max, .. } => (min, max),
            RatioSamplerConfig::Uniform { min, max } => (min, max),
        }
    }
}

/// Apply one `key.path=value` override to a parsed TOML document. The value
/// is parsed as a TOML literal, falling back to a string.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    unreachable!("override path is never empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_paper_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.data.group_size, 5);
        assert_eq!(cfg.gsem.k, 1);
        assert_eq!(cfg.gsem.mu, 0.5);
        assert_eq!(cfg.model.vqvae.codebook_size, 128);
        assert_eq!(cfg.model.vqvae.codebook_dim, 384);
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
    }

    #[test]
    fn one_hot_lambda_enforced() {
        let mut cfg = RunConfig::default();
        cfg.stages.vqvae.lambdas = [1.0, 1.0, 0.0];
        let issues = cfg.validate();
        assert!(issues.iter().any(|i| i.key == "stages.vqvae.lambdas"));
    }

    #[test]
    fn lambda_must_match_stage() {
        let mut cfg = RunConfig::default();
        cfg.stages.prior.lambdas = [1.0, 0.0, 0.0];
        let issues = cfg.validate();
        assert!(issues.iter().any(|i| i.key == "stages.prior.lambdas"));
    }

    #[test]
    fn k_must_be_minority() {
        let mut cfg = RunConfig::default();
        cfg.gsem.k = 3;
        cfg.data.group_size = 5;
        let issues = cfg.validate();
        assert!(issues.iter().any(|i| i.key == "gsem.k"));
        cfg.gsem.k = 2;
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = std::env::temp_dir().join(format!("cogsem-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.toml");
        std::fs::write(&p, "seed = 1\n[data]\nbogus_key = 3\n").unwrap();
        let err = RunConfig::load(&p, &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_apply_and_typecheck() {
        let dir = std::env::temp_dir().join(format!("cogsem-cfg2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("ok.toml");
        std::fs::write(&p, "seed = 1\n").unwrap();
        let cfg =
            RunConfig::load(&p, &["gsem.k=2".into(), "data.group_size=7".into()]).unwrap();
        assert_eq!(cfg.gsem.k, 2);
        assert_eq!(cfg.data.group_size, 7);
        // unknown key through override is also rejected
        assert!(RunConfig::load(&p, &["gsem.nope=1".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
