use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dyconv::DyConvOptions;
use crate::error::{Error, Result};

/// One resolution stage: an optional stride-2 downsample followed by
/// `blocks` DMF blocks of width `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    /// Stride-2 depthwise downsample at stage entry. Every stage but the
    /// first downsamples, giving the 4/8/16/32 pyramid.
    #[serde(default)]
    pub downsample: bool,
    /// DY-Mobile expansion ratio `t`.
    pub expansion: usize,
    pub irffn_expansion: usize,
    /// Groups of the DY-Mobile pointwise convolutions.
    pub groups: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_true() -> bool {
    true
}

/// Declarative model description; see `configs/*.toml` for the schema in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Depthwise channel multiplier of the lite bottleneck.
    pub lite_multiplier: usize,
    /// Number of global tokens `M`.
    pub tokens: usize,
    /// Token width `d`.
    pub token_dim: usize,
    /// Heads of cross-attention and of the Former.
    pub heads: usize,
    /// Build DY-Mobile from dynamic residual convolutions (false: plain convs).
    #[serde(default = "default_true")]
    pub dynamic: bool,
    #[serde(default)]
    pub dyconv: DyConvOptions,
    pub head_hidden: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageConfig>,
}

macro_rules! preset {
    ($name:ident, $file:literal) => {
        pub fn $name() -> Self {
            Self::from_toml(include_str!(concat!("../../configs/", $file)))
                .expect(concat!("bundled config ", $file, " is valid"))
        }
    };
}

impl ModelConfig {
    preset!(micro, "micro.toml");
    preset!(tiny, "tiny.toml");
    preset!(dmf_xxs, "dmf-xxs.toml");
    preset!(dmf_xs, "dmf-xs.toml");
    preset!(dmf_s, "dmf-s.toml");

    /// Bundled configuration by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            "dmf-xxs" => Ok(Self::dmf_xxs()),
            "dmf-xs" => Ok(Self::dmf_xs()),
            "dmf-s" => Ok(Self::dmf_s()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected micro, tiny, dmf-xxs, dmf-xs or dmf-s)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads a config file, or a bundled preset when `path` names one.
    pub fn load(path: &str) -> Result<Self> {
        if let Ok(cfg) = Self::preset(path) {
            return Ok(cfg);
        }
        if !std::path::Path::new(path).exists() && !path.contains(['/', '.']) {
            return Self::preset(path);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Output stride of each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut stride = 4;
        self.stages
            .iter()
            .map(|s| {
                if s.downsample {
                    stride *= 2;
                }
                stride
            })
            .collect()
    }

    pub fn dynamic_options(&self) -> Option<&DyConvOptions> {
        self.dynamic.then_some(&self.dyconv)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, why: &str| Err(Error::config(format!("{field}: {why}")));
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("lite_multiplier", self.lite_multiplier),
            ("tokens", self.tokens),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("head_hidden", self.head_hidden),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(field.into(), "must be positive");
            }
        }
        if self.token_dim % self.heads != 0 {
            return bad("token_dim".into(), "must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad("drop_path".into(), "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout".into(), "must lie in [0, 1)");
        }
        if self.dynamic {
            self.dyconv.validate()?;
        }
        if self.stages.is_empty() || self.stages.len() > 4 {
            return bad("stages".into(), "need between 1 and 4 stages (strides 4, 8, 16, 32)");
        }
        for (i, s) in self.stages.iter().enumerate() {
            let f = |name: &str| format!("stages[{i}].{name}");
            if s.blocks == 0 {
                return bad(f("blocks"), "must be positive");
            }
            if s.expansion == 0 || s.irffn_expansion == 0 {
                return bad(f("expansion"), "expansion ratios must be positive");
            }
            if s.groups == 0 || s.channels % s.groups != 0 {
                return bad(f("groups"), "must divide channels");
            }
            if s.channels % self.heads != 0 {
                return bad(f("channels"), "must be divisible by heads");
            }
            if (i == 0) == s.downsample {
                return bad(
                    f("downsample"),
                    "the first stage runs at stride 4 and every later stage must downsample",
                );
            }
        }
        Ok(())
    }
}
