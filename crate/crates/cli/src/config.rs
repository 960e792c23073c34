//! Versioned TOML experiment configuration.
//!
//! Every field has a documented default (see README); `--set section.key=value`
//! overrides are applied to the parsed tree before validation, so flags take
//! precedence over the file and the file over defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use fedgan::data::{AugmentPolicy, Normalization};
use fedgan::federation::{FedConfig, PartitionMode, TransportMode};
use fedgan::gan::{AdamConfig, GanConfig, Variant};
use fedgan::metrics::{ClassifierConfig, DEFAULT_ALARM_FRACTION};
use fedgan::models::{hex, ModelKind, ModelSpec, Norm};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Parent of all run directories.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub gan: GanSection,
    #[serde(default)]
    pub generator: ModelSection,
    #[serde(default)]
    pub critic: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub classify: ClassifySection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Texture,
    Directory,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub image_size: usize,
    pub channels: usize,
    /// Texture corpus: training images per class.
    pub n_per_class: usize,
    /// Texture corpus: held-out test images per class.
    pub test_per_class: usize,
    /// Directory source: `<dir>/<class>/<image>` trees.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Texture,
            image_size: 16,
            channels: 1,
            n_per_class: 200,
            test_per_class: 100,
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Required for wgan-gp, ignored otherwise.
    pub n_critic: Option<usize>,
    /// Required for wgan-gp, ignored otherwise.
    pub lambda_gp: Option<f64>,
    pub checkpoint_every: usize,
    pub grid_every: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GanConfig::default();
        GanSection {
            variant: g.variant,
            epochs: g.epochs,
            batch_size: g.batch_size,
            lr: g.adam.lr,
            beta1: g.adam.beta1,
            beta2: g.adam.beta2,
            adam_eps: g.adam.eps,
            n_critic: None,
            lambda_gp: None,
            checkpoint_every: 1,
            grid_every: 5,
        }
    }
}

/// Optional overrides of a model's desk-scale defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Critic only: `cnn` or `vit`.
    pub arch: Option<String>,
    pub width: Option<usize>,
    pub latent_dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub patch: Option<usize>,
    pub norm: Option<Norm>,
    pub residual: Option<bool>,
    pub dropout: Option<f64>,
}

impl ModelSection {
    fn apply(&self, spec: &mut ModelSpec) {
        if let Some(v) = self.width {
            spec.width = v;
        }
        if let Some(v) = self.latent_dim {
            spec.latent_dim = v;
        }
        if let Some(v) = self.depth {
            spec.depth = v;
        }
        if let Some(v) = self.heads {
            spec.heads = v;
        }
        if let Some(v) = self.patch {
            spec.patch = v;
        }
        if let Some(v) = self.norm {
            spec.norm = v;
        }
        if let Some(v) = self.residual {
            spec.residual = v;
        }
        if let Some(v) = self.dropout {
            spec.dropout = v;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    /// `iid` or `non-iid`.
    pub partition: String,
    pub ratio_low: f64,
    pub ratio_high: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FedConfig::default();
        FederationSection {
            num_clients: f.num_clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            client_fraction: f.client_fraction,
            partition: "iid".into(),
            ratio_low: 0.6,
            ratio_high: 0.9,
        }
    }
}

/// Deployment settings; not part of the config digest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub bind: String,
    pub server: String,
    pub startup_timeout_secs: u64,
    pub reconnect_timeout_secs: u64,
    pub round_timeout_floor_secs: u64,
    pub max_retries: usize,
    pub connect_timeout_secs: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            bind: "127.0.0.1:7878".into(),
            server: "127.0.0.1:7878".into(),
            startup_timeout_secs: 120,
            reconnect_timeout_secs: 120,
            round_timeout_floor_secs: 30,
            max_retries: 2,
            connect_timeout_secs: 60,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// `cnn` or `vit`.
    pub arch: String,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub holdout_fraction: f64,
    /// Train with the geometric augmentation policy.
    pub augment: bool,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop: Option<usize>,
    /// Per-channel normalization; defaults to the real training set's own.
    pub norm_mean: Option<Vec<f64>>,
    pub norm_std: Option<Vec<f64>>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        let p = AugmentPolicy::default();
        ClassifierSection {
            arch: "cnn".into(),
            max_epochs: c.max_epochs,
            batch_size: c.batch_size,
            lr: c.adam.lr,
            patience: c.patience,
            holdout_fraction: c.holdout_fraction,
            augment: true,
            flip_prob: p.flip_prob,
            max_rotation_deg: p.max_rotation_deg,
            max_translate: p.max_translate,
            scale_min: p.scale_min,
            scale_max: p.scale_max,
            crop: p.crop,
            norm_mean: None,
            norm_std: None,
        }
    }
}

impl ClassifierSection {
    pub fn spec(&self, data: &DataSection) -> Result<ModelSpec, ConfigError> {
        let kind = match self.arch.as_str() {
            "cnn" => ModelKind::ClassifierCnn,
            "vit" => ModelKind::ClassifierVit,
            other => return bad(format!("classifier arch must be \"cnn\" or \"vit\", got {other:?}")),
        };
        let mut s = ModelSpec::new(kind);
        s.image_size = data.image_size;
        s.channels = data.channels;
        s.validate().map_err(|e| ConfigError(format!("classifier: {e}")))?;
        Ok(s)
    }

    pub fn policy(&self) -> AugmentPolicy {
        let normalization = match (&self.norm_mean, &self.norm_std) {
            (Some(mean), Some(std)) => Some(Normalization {
                mean: mean.clone(),
                std: std.clone(),
            }),
            _ => None,
        };
        if !self.augment {
            return AugmentPolicy {
                normalization,
                ..AugmentPolicy::identity()
            };
        }
        AugmentPolicy {
            crop: self.crop,
            flip_prob: self.flip_prob,
            max_rotation_deg: self.max_rotation_deg,
            max_translate: self.max_translate,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            normalization,
        }
    }

    pub fn train_config(&self, seed: u64) -> ClassifierConfig {
        let d = ClassifierConfig::default();
        ClassifierConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..d.adam },
            patience: self.patience,
            holdout_fraction: self.holdout_fraction,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generated images per class for FID and the diversity audit.
    pub samples_per_class: usize,
    /// Generated images checked against their nearest real neighbours.
    pub audit_samples: usize,
    pub alarm_fraction: f64,
    /// Feature extractor for FID and embedding export.
    pub extractor: ClassifierSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples_per_class: 100,
            audit_samples: 16,
            alarm_fraction: DEFAULT_ALARM_FRACTION,
            extractor: ClassifierSection {
                augment: false,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub generated_per_class: usize,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierSection,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection {
            generated_per_class: 500,
            seeds: vec![0, 1, 2],
            classifier: ClassifierSection::default(),
        }
    }
}

/// Applies one `section.key=value` override to a parsed TOML tree. The
/// value is parsed as TOML, falling back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return bad(format!("override {assignment:?} is not of the form key=value"));
    };
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return bad(format!("override {path:?}: `{k}` is not a section")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Config, ConfigError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        match root.get("version") {
            None => return bad("missing field `version`"),
            Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return bad(format!(
                    "unsupported schema version {v}; this build reads version {SCHEMA_VERSION}"
                ))
            }
        }
        let cfg: Config = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.image_size < 4 || !d.image_size.is_multiple_of(2) {
            return bad(format!(
                "data.image_size must be an even number >= 4, got {}",
                d.image_size
            ));
        }
        if d.channels != 1 && d.channels != 3 {
            return bad(format!("data.channels must be 1 or 3, got {}", d.channels));
        }
        match d.source {
            DataSource::Texture => {
                if d.channels != 1 {
                    return bad("data.channels must be 1 for the texture corpus");
                }
                if d.n_per_class < 2 || d.test_per_class < 2 {
                    return bad("data.n_per_class and data.test_per_class must be at least 2");
                }
            }
            DataSource::Directory => {
                if d.train_dir.is_none() {
                    return bad("data.train_dir is required when data.source = \"directory\"");
                }
                if d.test_dir.is_none() {
                    return bad("data.test_dir is required when data.source = \"directory\"");
                }
            }
        }
        if self.gan.variant == Variant::WganGp {
            if self.gan.lambda_gp.is_none() {
                return bad("gan.lambda_gp is required when gan.variant = \"wgan-gp\"");
            }
            if self.gan.n_critic.is_none() {
                return bad("gan.n_critic is required when gan.variant = \"wgan-gp\"");
            }
        }
        if self.gan.checkpoint_every == 0 {
            return bad("gan.checkpoint_every must be at least 1");
        }
        self.gan_config()
            .validate()
            .map_err(|e| ConfigError(format!("gan: {e}")))?;
        self.generator_spec()?;
        self.critic_spec()?;
        self.fed_config()
            .validate()
            .map_err(|e| ConfigError(format!("federation: {e}")))?;
        self.partition_mode()?;
        self.eval.extractor.spec(&self.data)?;
        self.classify.classifier.spec(&self.data)?;
        if self.classify.seeds.is_empty() {
            return bad("classify.seeds must list at least one seed");
        }
        if self.eval.samples_per_class < 2 {
            return bad("eval.samples_per_class must be at least 2");
        }
        Ok(())
    }

    pub fn gan_config(&self) -> GanConfig {
        let g = &self.gan;
        let defaults = GanConfig::default();
        GanConfig {
            variant: g.variant,
            epochs: g.epochs,
            batch_size: g.batch_size,
            n_critic: g.n_critic.unwrap_or(defaults.n_critic),
            lambda_gp: g.lambda_gp.unwrap_or(defaults.lambda_gp),
            seed: self.seed,
            adam: AdamConfig {
                lr: g.lr,
                beta1: g.beta1,
                beta2: g.beta2,
                eps: g.adam_eps,
            },
            optimizer_reset_every: None,
        }
    }

    pub fn generator_spec(&self) -> Result<ModelSpec, ConfigError> {
        if self.generator.arch.is_some() {
            return bad("generator.arch is not configurable");
        }
        let mut s = ModelSpec::new(ModelKind::Generator);
        s.image_size = self.data.image_size;
        s.channels = self.data.channels;
        self.generator.apply(&mut s);
        s.validate().map_err(|e| ConfigError(format!("generator: {e}")))?;
        Ok(s)
    }

    pub fn critic_spec(&self) -> Result<ModelSpec, ConfigError> {
        let kind = match self.critic.arch.as_deref().unwrap_or("cnn") {
            "cnn" => ModelKind::DiscCnn,
            "vit" => ModelKind::DiscVit,
            other => return bad(format!("critic.arch must be \"cnn\" or \"vit\", got {other:?}")),
        };
        let mut s = ModelSpec::new(kind);
        s.image_size = self.data.image_size;
        s.channels = self.data.channels;
        self.critic.apply(&mut s);
        let s = self.gan.variant.critic_spec(&s);
        s.validate().map_err(|e| ConfigError(format!("critic: {e}")))?;
        Ok(s)
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.federation;
        FedConfig {
            num_clients: f.num_clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            client_fraction: f.client_fraction,
            seed: self.seed,
            mode: TransportMode::InProcess,
        }
    }

    pub fn partition_mode(&self) -> Result<PartitionMode, ConfigError> {
        let f = &self.federation;
        match f.partition.as_str() {
            "iid" => Ok(PartitionMode::Iid),
            "non-iid" => {
                if !(0.5 <= f.ratio_low && f.ratio_low <= f.ratio_high && f.ratio_high < 1.0) {
                    return bad(format!(
                        "federation.ratio_low/ratio_high must satisfy 0.5 <= low <= high < 1, got {} and {}",
                        f.ratio_low, f.ratio_high
                    ));
                }
                Ok(PartitionMode::NonIid {
                    low: f.ratio_low,
                    high: f.ratio_high,
                })
            }
            other => bad(format!(
                "federation.partition must be \"iid\" or \"non-iid\", got {other:?}"
            )),
        }
    }

    /// SHA-256 of everything that determines results: all sections except
    /// `out_dir` and `network`.
    pub fn digest(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct View<'a> {
            version: u32,
            seed: u64,
            data: &'a DataSection,
            gan: &'a GanSection,
            generator: &'a ModelSection,
            critic: &'a ModelSection,
            federation: &'a FederationSection,
            eval: &'a EvalSection,
            classify: &'a ClassifySection,
        }
        let view = View {
            version: self.version,
            seed: self.seed,
            data: &self.data,
            gan: &self.gan,
            generator: &self.generator,
            critic: &self.critic,
            federation: &self.federation,
            eval: &self.eval,
            classify: &self.classify,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }

    /// `<out_dir>/<digest prefix>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .join(format!("{}-s{}", &self.digest_hex()[..12], self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = Config::parse("version = 1", &[]).unwrap();
        assert_eq!(c.gan.variant, Variant::Acgan);
        assert_eq!(c.data.image_size, 16);
    }

    #[test]
    fn wgan_requires_lambda_and_n_critic() {
        let e = Config::parse("version = 1\n[gan]\nvariant = \"wgan-gp\"\nn_critic = 10", &[]).unwrap_err();
        assert!(e.0.contains("gan.lambda_gp"), "{e}");
        let e = Config::parse("version = 1\n[gan]\nvariant = \"wgan-gp\"\nlambda_gp = 3.0", &[]).unwrap_err();
        assert!(e.0.contains("gan.n_critic"), "{e}");
        let ok = "version = 1\n[gan]\nvariant = \"wgan-gp\"\nlambda_gp = 3.0\nn_critic = 10";
        assert_eq!(Config::parse(ok, &[]).unwrap().gan_config().n_critic, 10);
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        assert!(Config::parse("version = 1\n[gan]\nlearning_rate = 1.0", &[]).is_err());
        assert!(Config::parse("version = 2", &[]).is_err());
        assert!(Config::parse("seed = 1", &[]).is_err());
    }

    #[test]
    fn overrides_take_precedence_and_change_the_digest() {
        let base = Config::parse("version = 1\nseed = 3\n[gan]\nepochs = 5", &[]).unwrap();
        let over = Config::parse(
            "version = 1\nseed = 3\n[gan]\nepochs = 5",
            &["gan.epochs=7".into(), "critic.arch=vit".into()],
        )
        .unwrap();
        assert_eq!(over.gan.epochs, 7);
        assert_eq!(over.critic.arch.as_deref(), Some("vit"));
        assert_ne!(base.digest(), over.digest());
    }

    #[test]
    fn network_and_output_do_not_affect_digest() {
        let a = Config::parse("version = 1", &[]).unwrap();
        let b = Config::parse(
            "version = 1\nout_dir = \"elsewhere\"\n[network]\nbind = \"0.0.0.0:1\"",
            &[],
        )
        .unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
