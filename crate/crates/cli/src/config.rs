//! Run configuration: a JSON file plus command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mshnet::backbone::TinyBackboneConfig;
use mshnet::protocol::{FoldScheme, Sampling, SynthConfig, TRAIN_IMAGE_CAP};
use mshnet::{Error, Result, SimMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    Ablate,
    EnergyMap,
    SynthData,
    GradCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Ablate => "ablate",
            Mode::EnergyMap => "energy-map",
            Mode::SynthData => "synth-data",
            Mode::GradCheck => "grad-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimChoice {
    Both,
    #[serde(alias = "gps-only")]
    Gps,
    #[serde(alias = "cosine-only")]
    Cosine,
}

impl SimChoice {
    pub fn mode(self) -> SimMode {
        match self {
            SimChoice::Both => SimMode::Both,
            SimChoice::Gps => SimMode::GpsOnly,
            SimChoice::Cosine => SimMode::CosineOnly,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(SimChoice::Both),
            "gps" | "gps-only" => Ok(SimChoice::Gps),
            "cosine" | "cosine-only" => Ok(SimChoice::Cosine),
            other => Err(Error::Config(format!("`sim`: unknown value `{}` (expected both, gps or cosine)", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    Contiguous,
    Interleaved,
}

impl SchemeChoice {
    pub fn scheme(self) -> FoldScheme {
        match self {
            SchemeChoice::Contiguous => FoldScheme::Contiguous,
            SchemeChoice::Interleaved => FoldScheme::Interleaved,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingChoice {
    #[default]
    ClassFirst,
    ImageFirst,
}

impl SamplingChoice {
    pub fn sampling(self) -> Sampling {
        match self {
            SamplingChoice::ClassFirst => Sampling::ClassFirst,
            SamplingChoice::ImageFirst => Sampling::ImageFirst,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub images: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            images: d.images,
            classes: d.classes,
            height: d.height,
            width: d.width,
            max_shapes: d.max_shapes,
            seed: d.seed,
        }
    }
}

impl SynthSettings {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            images: self.images,
            classes: self.classes,
            height: self.height,
            width: self.width,
            max_shapes: self.max_shapes,
            seed: self.seed,
        }
    }
}

/// Either an index file or a synthetic corpus rendered on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DatasetConfig {
    Index(PathBuf),
    Synth(SynthSettings),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneChoice {
    #[default]
    Tiny,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinySettings {
    /// Input size; defaults to the synthetic image size, else 64x64.
    pub input: Option<[usize; 2]>,
    pub stem_channels: usize,
    pub stem_downsamples: usize,
    pub channels: Vec<usize>,
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TinySettings {
    fn default() -> Self {
        let d = TinyBackboneConfig::default();
        Self {
            input: None,
            stem_channels: d.stem_channels,
            stem_downsamples: d.stem_downsamples,
            channels: d.channels,
            layers: d.layers,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: Option<DatasetConfig>,
    pub fold: usize,
    pub scheme: Option<SchemeChoice>,
    /// Explicit class split; overrides `fold` and `scheme` when both are set.
    pub train_classes: Option<BTreeSet<usize>>,
    pub test_classes: Option<BTreeSet<usize>>,
    pub k: usize,
    pub sim: SimChoice,
    pub sampling: SamplingChoice,
    pub hidden: usize,
    pub backbone: BackboneChoice,
    pub tiny: TinySettings,
    /// Replay directory of `<id>.mshp` pyramids.
    pub features: Option<PathBuf>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub batch: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub checkpoint_every: usize,
    pub train_cap: usize,
    pub episodes: usize,
    pub eval_split: SplitChoice,
    /// Folds evaluated by `ablate`; defaults to `[fold]`.
    pub ablate_folds: Option<Vec<usize>>,
    /// Seeds run by `grad-check`, starting at `seed`.
    pub grad_seeds: usize,
    pub epsilon: f64,
    /// Checkpoint read by `eval` and `energy-map`; defaults to `<out>/checkpoint.mshc`.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            dataset: None,
            fold: 0,
            scheme: None,
            train_classes: None,
            test_classes: None,
            k: 1,
            sim: SimChoice::Both,
            sampling: SamplingChoice::ClassFirst,
            hidden: mshnet::network::DEFAULT_HIDDEN,
            backbone: BackboneChoice::Tiny,
            tiny: TinySettings::default(),
            features: None,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 0.0005,
            gamma: 0.9,
            batch: 10,
            steps: 100,
            steps_per_epoch: 100,
            checkpoint_every: 0,
            train_cap: TRAIN_IMAGE_CAP,
            episodes: 1000,
            eval_split: SplitChoice::Test,
            ablate_folds: None,
            grad_seeds: 1,
            epsilon: 1e-3,
            checkpoint: None,
            out: PathBuf::from("mshnet-out"),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub fold: Option<usize>,
    pub scheme: Option<String>,
    pub k: Option<usize>,
    pub sim: Option<String>,
    pub seed: Option<u64>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses JSON, reporting the key path of the first offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("`{}`: {}", path, e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }

    pub fn resolve(mode: Mode, o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = o.fold {
            cfg.fold = v;
        }
        if let Some(v) = &o.scheme {
            cfg.scheme = Some(match v.as_str() {
                "contiguous" => SchemeChoice::Contiguous,
                "interleaved" => SchemeChoice::Interleaved,
                other => {
                    return Err(Error::Config(format!(
                        "`scheme`: unknown value `{}` (expected contiguous or interleaved)",
                        other
                    )))
                }
            });
        }
        if let Some(v) = o.k {
            cfg.k = v;
        }
        if let Some(v) = &o.sim {
            cfg.sim = SimChoice::parse(v)?;
        }
        if let Some(v) = o.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &o.features {
            cfg.features = Some(v.clone());
            cfg.backbone = BackboneChoice::Replay;
        }
        if let Some(v) = &o.out {
            cfg.out = v.clone();
        }
        cfg.validate(mode)?;
        Ok(cfg)
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("`{}`: {}", key, msg)));
        if self.seed.is_none() {
            return bad("seed", "missing required key");
        }
        if mode != Mode::GradCheck && self.dataset.is_none() {
            return bad("dataset", "missing required key");
        }
        if mode == Mode::SynthData && !matches!(self.dataset, Some(DatasetConfig::Synth(_))) {
            return bad("dataset", "synth-data needs a `synth` dataset");
        }
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if self.fold >= mshnet::protocol::FOLDS {
            return bad("fold", "must be in 0..4");
        }
        if self.train_classes.is_some() != self.test_classes.is_some() {
            return bad("train_classes", "give both train_classes and test_classes, or neither");
        }
        if matches!(self.dataset, Some(DatasetConfig::Index(_))) && self.scheme.is_none() && self.train_classes.is_none() {
            return bad("scheme", "required for index-file datasets (contiguous or interleaved)");
        }
        if (self.backbone == BackboneChoice::Replay) != self.features.is_some() {
            return bad("features", "a replay backbone needs a features directory, and only a replay backbone takes one");
        }
        if self.hidden == 0 || self.hidden % mshnet::ops::REDUCTION_RATIO != 0 {
            return bad("hidden", "must be a positive multiple of 4");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be >= 1");
        }
        if self.train_cap == 0 {
            return bad("train_cap", "must be >= 1");
        }
        if self.episodes == 0 {
            return bad("episodes", "must be >= 1");
        }
        if self.grad_seeds == 0 {
            return bad("grad_seeds", "must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if let Some(f) = &self.ablate_folds {
            if f.is_empty() || f.iter().any(|&x| x >= mshnet::protocol::FOLDS) {
                return bad("ablate_folds", "must be a non-empty list of folds in 0..4");
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.mshc"))
    }

    /// Tiny backbone settings with the input size filled in.
    pub fn tiny_config(&self) -> TinyBackboneConfig {
        let [input_h, input_w] = self.tiny.input.unwrap_or(match &self.dataset {
            Some(DatasetConfig::Synth(s)) => [s.height, s.width],
            _ => [64, 64],
        });
        TinyBackboneConfig {
            input_h,
            input_w,
            stem_channels: self.tiny.stem_channels,
            stem_downsamples: self.tiny.stem_downsamples,
            channels: self.tiny.channels.clone(),
            layers: self.tiny.layers.clone(),
            seed: self.tiny.seed,
        }
    }

    /// Compact JSON of the resolved configuration, for report headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
