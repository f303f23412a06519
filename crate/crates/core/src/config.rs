//! Run configuration, read from TOML. Every section is optional and
//! defaults to the values used throughout the experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binformat::{default_corpus_spec, generate_corpus, Binary, CorpusSpec};
use crate::error::{Error, Result};
use crate::obfusc::{Packer, SubstitutionTable};
use crate::nn::Hyperparams;
use crate::xai::{Coalitions, OcclusionParams, ShapParams};

pub const SEED_ENV: &str = "MALVIS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction_of_train: f64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.20,
            val_fraction_of_train: 0.15,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObfuscationConfig {
    /// Share of training samples offered to the packer during augmentation.
    pub pack_fraction: f64,
    /// Share of training samples offered to the morpher during augmentation.
    pub morph_fraction: f64,
    pub morph_passes: usize,
    /// JSON substitution table; the built-in table when absent.
    pub substitution_table: Option<PathBuf>,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        ObfuscationConfig {
            pack_fraction: 0.5,
            morph_fraction: 0.5,
            morph_passes: 3,
            substitution_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    pub window: usize,
    pub stride: usize,
    pub baseline: f32,
    /// SHAP segments per side.
    pub grid: usize,
    /// SHAP coalition budget; 0 means enumerate all.
    pub coalitions: usize,
    pub background: f32,
    /// Cells compared by top-k agreement.
    pub top_k: usize,
    /// Samples per class for cumulative maps.
    pub samples_per_class: usize,
}

impl Default for XaiConfig {
    fn default() -> Self {
        XaiConfig {
            window: 8,
            stride: 4,
            baseline: 0.0,
            grid: 8,
            coalitions: 2048,
            background: 0.0,
            top_k: 256,
            samples_per_class: 8,
        }
    }
}

impl XaiConfig {
    pub fn occlusion(&self) -> OcclusionParams {
        OcclusionParams {
            window: self.window,
            stride: self.stride,
            baseline: self.baseline,
        }
    }

    pub fn shap(&self, seed: u64) -> ShapParams {
        ShapParams {
            grid: self.grid,
            coalitions: if self.coalitions == 0 {
                Coalitions::All
            } else {
                Coalitions::Sampled(self.coalitions)
            },
            background: self.background,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Family spec (TOML or JSON); the built-in five families when absent.
    pub spec: Option<PathBuf>,
    /// Multiplies every family count (minimum 3 per family).
    pub scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { spec: None, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub progressive_fractions: Vec<f64>,
    pub morph_pass_counts: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            progressive_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            morph_pass_counts: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub input_side: usize,
    pub out_dir: PathBuf,
    /// Shell command used instead of the built-in packer; `{input}` and
    /// `{output}` are replaced with file paths.
    pub packer_cmd: Option<String>,
    pub hyper: Hyperparams,
    pub split: SplitConfig,
    pub obfuscation: ObfuscationConfig,
    pub xai: XaiConfig,
    pub corpus: CorpusConfig,
    pub experiment: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            input_side: crate::binviz::DEFAULT_INPUT_SIDE,
            out_dir: PathBuf::from("out"),
            packer_cmd: None,
            hyper: Hyperparams::default(),
            split: SplitConfig::default(),
            obfuscation: ObfuscationConfig::default(),
            xai: XaiConfig::default(),
            corpus: CorpusConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be in (0,1), got {v}")))
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the seed with `MALVIS_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Family spec from `corpus.spec`, or the built-in one, scaled.
    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let spec = match &self.corpus.spec {
            Some(p) => CorpusSpec::load(p)?,
            None => default_corpus_spec(),
        };
        Ok(if self.corpus.scale == 1.0 { spec } else { spec.scaled(self.corpus.scale) })
    }

    /// The synthetic corpus this config describes.
    pub fn generate_corpus(&self) -> Result<Vec<Binary>> {
        generate_corpus(&self.corpus_spec()?, crate::rng::derive_seed(self.seed, "corpus"))
    }

    pub fn substitution_table(&self) -> Result<SubstitutionTable> {
        match &self.obfuscation.substitution_table {
            Some(p) => SubstitutionTable::load(p),
            None => Ok(SubstitutionTable::default()),
        }
    }

    pub fn packer(&self) -> Packer {
        Packer::from_cmd(self.packer_cmd.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        unit_open("split.test_fraction", self.split.test_fraction)?;
        unit_open("split.val_fraction_of_train", self.split.val_fraction_of_train)?;
        for (n, v) in [
            ("obfuscation.pack_fraction", self.obfuscation.pack_fraction),
            ("obfuscation.morph_fraction", self.obfuscation.morph_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{n} must be in [0,1], got {v}")));
            }
        }
        let blocks = self.hyper.filters.len();
        if self.input_side == 0 || self.input_side % (1 << blocks) != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_side {} must be a positive multiple of {}",
                self.input_side,
                1 << blocks
            )));
        }
        if self.obfuscation.morph_passes == 0 {
            return Err(Error::InvalidConfig("obfuscation.morph_passes must be >= 1".into()));
        }
        if self.xai.window == 0 || self.xai.stride == 0 || self.xai.window > self.input_side {
            return Err(Error::InvalidConfig("xai.window/stride must be in 1..=input_side".into()));
        }
        if self.xai.grid == 0 || self.xai.grid > self.input_side {
            return Err(Error::InvalidConfig("xai.grid must be in 1..=input_side".into()));
        }
        if !(self.corpus.scale > 0.0) {
            return Err(Error::InvalidConfig("corpus.scale must be > 0".into()));
        }
        if self
            .experiment
            .progressive_fractions
            .iter()
            .any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::InvalidConfig("progressive fractions must be in (0,1]".into()));
        }
        if self.experiment.morph_pass_counts.contains(&0) {
            return Err(Error::InvalidConfig("morph pass counts must be >= 1".into()));
        }
        Ok(())
    }
}
