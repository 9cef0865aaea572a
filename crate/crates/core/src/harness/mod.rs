//! Training loop, checkpointing, evaluation protocols, ablations and bias
//! analysis; the CLI surface of the crate sits on top of this module.

pub mod eval;
pub mod metrics;
pub mod train;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RetrievalModel;
use crate::numcore::{Adam, NumError, Tensor};
use crate::squid::{ConfounderBank, DecisionRule, Margins, SquidError};
use crate::synthcorpus::CorpusError;
use crate::textproc::{CoocCountMode, TextError};

/// Harness-level error with a process exit code: 2 config, 3 data, 4
/// numeric divergence.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) | HarnessError::Json(_) => 3,
            HarnessError::Divergence(_) => 4,
        }
    }
}

impl From<NumError> for HarnessError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::Config(m) => HarnessError::Config(m),
            NumError::Dimension(m) => HarnessError::Data(m),
            NumError::Numeric(m) => HarnessError::Divergence(m),
        }
    }
}

impl From<CorpusError> for HarnessError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(m) => HarnessError::Config(m),
            CorpusError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<TextError> for HarnessError {
    fn from(e: TextError) -> Self {
        match e {
            TextError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<SquidError> for HarnessError {
    fn from(e: SquidError) -> Self {
        match e {
            SquidError::Margins(m) => HarnessError::Config(m),
            SquidError::Confounder(m) => HarnessError::Data(m),
            SquidError::Num(n) => n.into(),
        }
    }
}

fn default_d() -> usize {
    16
}
fn default_heads() -> usize {
    2
}
fn default_layers() -> usize {
    1
}
fn default_kernel() -> usize {
    3
}
fn default_l_max() -> usize {
    12
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    12
}
fn default_batch() -> usize {
    32
}
fn default_lambda() -> f64 {
    1.0
}
fn default_rule() -> DecisionRule {
    DecisionRule::Confounder
}
fn default_cooc_k() -> usize {
    12
}
fn default_top_n() -> usize {
    2
}
fn default_margin_neg() -> f64 {
    0.2
}
fn default_margin_pos() -> f64 {
    0.4
}
fn default_seed() -> u64 {
    7
}
fn default_validate_every() -> usize {
    1
}
fn default_conf_epochs() -> usize {
    300
}
fn default_conf_lr() -> f64 {
    0.05
}

/// Run configuration; loadable from a TOML file, every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub attention_layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel_width: usize,
    /// Longest decodable moment, in frames.
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight of the selective debiasing loss.
    #[serde(default = "default_lambda")]
    pub lambda_debias: f64,
    #[serde(default = "default_rule")]
    pub rule: DecisionRule,
    /// Table/confounder size K.
    #[serde(default = "default_cooc_k")]
    pub cooc_k: usize,
    /// Top-n predicates consulted by the table rule.
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_margin_neg")]
    pub margin_negative: f64,
    #[serde(default = "default_margin_pos")]
    pub margin_positive: f64,
    #[serde(default)]
    pub count_mode: CoocCountMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Validate every this many epochs (0 disables mid-run validation).
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default = "default_conf_epochs")]
    pub confounder_epochs: usize,
    #[serde(default = "default_conf_lr")]
    pub confounder_lr: f64,
    #[serde(default)]
    pub corpus: Option<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub bank: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes from defaults")
    }
}

impl TrainConfig {
    pub fn margins(&self) -> Margins {
        Margins { negative: self.margin_negative, positive: self.margin_positive }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.margins().validate()?;
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(HarnessError::Config(format!(
                "d = {} must be divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.cooc_k == 0 {
            return Err(HarnessError::Config("cooc_k must be >= 1".into()));
        }
        if self.top_n == 0 {
            return Err(HarnessError::Config("top_n must be >= 1".into()));
        }
        if self.kernel_width % 2 == 0 {
            return Err(HarnessError::Config("kernel_width must be odd".into()));
        }
        if self.l_max == 0 {
            return Err(HarnessError::Config("l_max must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.confounder_lr > 0.0) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if self.lambda_debias < 0.0 {
            return Err(HarnessError::Config("lambda_debias must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FullConfounder,
    FullCooc,
    AllNegative,
    AllPositive,
    NoBmr,
    NoCmp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FullConfounder,
        Variant::FullCooc,
        Variant::AllNegative,
        Variant::AllPositive,
        Variant::NoBmr,
        Variant::NoCmp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::FullConfounder => "full-confounder",
            Variant::FullCooc => "full-cooc",
            Variant::AllNegative => "all-negative",
            Variant::AllPositive => "all-positive",
            Variant::NoBmr => "no-bmr",
            Variant::NoCmp => "no-cmp",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s.to_lowercase())
            .copied()
            .ok_or_else(|| HarnessError::Config(format!("unknown variant {s:?}")))
    }
}

/// Pretrained confounder bank together with the frozen sentence-encoder
/// snapshot that produced (and keeps producing) its feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankArtifact {
    pub bank: ConfounderBank,
    pub encoder: RetrievalModel,
    pub seed: u64,
}

/// Everything needed to resume training bit-exactly: parameters of both
/// models, the bank, the optimizer moments, the epoch counter and the
/// config snapshot (randomness is derived from (seed, substream, epoch),
/// so no extra RNG state is required).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub variant: Variant,
    pub epoch: usize,
    pub nmr: Vec<(String, Tensor)>,
    pub bmr: Vec<(String, Tensor)>,
    pub bank: Option<BankArtifact>,
    pub adam: Adam,
}

const CKPT_MAGIC: &[u8; 4] = b"SQCK";
const BANK_MAGIC: &[u8; 4] = b"SQBK";
const ARTIFACT_VERSION: u32 = 1;

fn write_json_artifact<T: Serialize>(
    magic: &[u8; 4],
    value: &T,
    path: &Path,
) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(magic)?;
        f.write_all(&ARTIFACT_VERSION.to_le_bytes())?;
        let body = serde_json::to_vec(value)?;
        f.write_all(&(body.len() as u64).to_le_bytes())?;
        f.write_all(&body)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json_artifact<T: serde::de::DeserializeOwned>(
    magic: &[u8; 4],
    what: &str,
    path: &Path,
) -> Result<T, HarnessError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut m = [0u8; 4];
    f.read_exact(&mut m)?;
    if &m != magic {
        return Err(HarnessError::Data(format!("{path:?} is not a {what} file")));
    }
    let mut v = [0u8; 4];
    f.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != ARTIFACT_VERSION {
        return Err(HarnessError::Data(format!(
            "{what} file is version {version}, reader supports {ARTIFACT_VERSION}"
        )));
    }
    let mut l = [0u8; 8];
    f.read_exact(&mut l)?;
    let len = u64::from_le_bytes(l) as usize;
    let mut body = vec![0u8; len];
    f.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_json_artifact(CKPT_MAGIC, self, path)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        read_json_artifact(CKPT_MAGIC, "checkpoint", path)
    }

    /// Rebuild a model from the named tensors stored for it.
    pub fn model(&self, which: crate::model::ModelMode) -> Result<RetrievalModel, HarnessError> {
        let (params, tag) = match which {
            crate::model::ModelMode::Naive => (&self.nmr, "nmr"),
            crate::model::ModelMode::Biased => (&self.bmr, "bmr"),
        };
        let dims = train::model_dims_from(&self.config, params)?;
        let mut model = RetrievalModel::init(which, dims, self.config.seed, tag)
            .map_err(HarnessError::from)?;
        restore_params(&mut model, params)?;
        Ok(model)
    }
}

pub(crate) fn restore_params(
    model: &mut RetrievalModel,
    stored: &[(String, Tensor)],
) -> Result<(), HarnessError> {
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, t| {
        match stored.iter().find(|(n, _)| *n == name) {
            Some((_, s)) => *t = s.clone(),
            None => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(HarnessError::Data(format!("checkpoint is missing parameters: {missing:?}")));
    }
    Ok(())
}

impl BankArtifact {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_json_artifact(BANK_MAGIC, self, path)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        read_json_artifact(BANK_MAGIC, "confounder bank", path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.d, 16);
        assert_eq!(cfg.rule, DecisionRule::Confounder);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.margin_positive = 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.kernel_width = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.cooc_k = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.top_n = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig { epochs: 3, seed: 99, ..TrainConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<TrainConfig>("zzz_not_a_key = 5").unwrap_err();
        assert!(err.to_string().contains("zzz_not_a_key"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
