//! Plain-text run configuration.
//!
//! The format is flat `section.key = value` lines; `#` starts a comment and
//! blank lines are ignored. `seed`, `precision` and `output_dir` are
//! top-level keys. Unknown keys are an error, reported with their line
//! number. Parsing then serializing then parsing again yields an identical
//! config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{GateMode, RelationMetric, SpatialPooling};
use crate::data::SyntheticSpec;
use crate::error::{ClanError, Result};
use crate::model::{ModelConfig, Variant};
use crate::tensor::ResampleMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Learning rate multiplies by gamma every `lr_decay_every` epochs;
    /// 0 disables the schedule.
    pub lr_decay_gamma: f64,
    pub lr_decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 32,
            epochs: 30,
            lr_decay_gamma: 0.5,
            lr_decay_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Per-branch loss weights; empty means 1.0 everywhere.
    pub branch_weights: Vec<f64>,
    pub optim: OptimConfig,
    pub data: SyntheticSpec,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        RunConfig {
            model: ModelConfig::default(),
            branch_weights: Vec::new(),
            optim: OptimConfig::default(),
            data: SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
            seed,
            precision: Precision::F64,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let err = |line: usize, msg: String| ClanError::ConfigParse {
            path: origin.to_string(),
            line,
            msg,
        };
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected key = value, got {raw:?}")))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|msg| err(lineno, msg))?;
        }
        cfg.validate().map_err(|e| match e {
            ClanError::Config { detail, .. } => ClanError::ConfigParse {
                path: origin.to_string(),
                line: 0,
                msg: detail,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| format!("bad integer {v:?}"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?}"));
        let parse_usize_list = |v: &str| -> std::result::Result<Vec<usize>, String> {
            v.split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer list {v:?}")))
                .collect()
        };
        match key {
            "model.variant" => {
                self.model.variant = match value {
                    "clan" => Variant::Clan,
                    "gap-baseline" => Variant::GapBaseline,
                    _ => return Err(format!("unknown variant {value:?}")),
                }
            }
            "model.stage_channels" => self.model.backbone.stage_channels = parse_usize_list(value)?,
            "model.stage_blocks" => self.model.backbone.stage_blocks = parse_usize_list(value)?,
            "model.input_size" => self.model.backbone.input_size = parse_usize(value)?,
            "model.tap_stages" => self.model.backbone.tap_stages = parse_usize_list(value)?,
            "model.metric" => {
                self.model.metric = match value {
                    "gaussian" => RelationMetric::Gaussian,
                    "embedded_gaussian" => RelationMetric::EmbeddedGaussian,
                    "dot_product" => RelationMetric::DotProduct,
                    _ => return Err(format!("unknown metric {value:?}")),
                }
            }
            "model.pooling" => {
                self.model.pooling = match value {
                    "avg" => SpatialPooling::Avg,
                    "max" => SpatialPooling::Max,
                    "avg_and_max" => SpatialPooling::AvgAndMax,
                    _ => return Err(format!("unknown pooling {value:?}")),
                }
            }
            "model.gate" => {
                self.model.gate = match value {
                    "linear" => GateMode::Linear,
                    "sigmoid" => GateMode::Sigmoid,
                    _ => return Err(format!("unknown gate {value:?}")),
                }
            }
            "model.upsample" => {
                self.model.upsample = match value {
                    "nearest" => ResampleMode::Nearest,
                    "bilinear" => ResampleMode::Bilinear,
                    _ => return Err(format!("unknown upsample mode {value:?}")),
                }
            }
            "model.c_int" => {
                let v = parse_usize(value)?;
                self.model.c_int = if v == 0 { None } else { Some(v) };
            }
            "model.num_classes" => {
                self.model.num_classes = parse_usize(value)?;
                self.data.num_classes = self.model.num_classes;
            }
            "model.branch_weights" => {
                self.branch_weights = value
                    .split(',')
                    .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad weight list {value:?}")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "optim.lr" => self.optim.lr = parse_f64(value)?,
            "optim.momentum" => self.optim.momentum = parse_f64(value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(value)?,
            "optim.batch" => self.optim.batch = parse_usize(value)?,
            "optim.epochs" => self.optim.epochs = parse_usize(value)?,
            "optim.lr_decay_gamma" => self.optim.lr_decay_gamma = parse_f64(value)?,
            "optim.lr_decay_every" => self.optim.lr_decay_every = parse_usize(value)?,
            "data.num_classes" => {
                self.data.num_classes = parse_usize(value)?;
                self.model.num_classes = self.data.num_classes;
            }
            "data.image_size" => {
                self.data.image_size = parse_usize(value)?;
                self.model.backbone.input_size = self.data.image_size;
            }
            "data.base_shapes" => self.data.base_shapes = parse_usize(value)?,
            "data.patch_size" => self.data.patch_size = parse_usize(value)?,
            "data.noise_std" => self.data.noise_std = parse_f64(value)?,
            "data.train_per_class" => self.data.train_per_class = parse_usize(value)?,
            "data.test_per_class" => self.data.test_per_class = parse_usize(value)?,
            "seed" => {
                self.seed = value.parse::<u64>().map_err(|_| format!("bad seed {value:?}"))?;
                self.data.seed = self.seed;
            }
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("unknown precision {value:?}")),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.data.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(ClanError::config(
                "config",
                "model and data class counts differ",
            ));
        }
        if self.model.backbone.input_size != self.data.image_size {
            return Err(ClanError::config(
                "config",
                format!(
                    "backbone input size {} does not match data image size {}",
                    self.model.backbone.input_size, self.data.image_size
                ),
            ));
        }
        if self.model.num_classes < 2 {
            return Err(ClanError::config("config", "need at least two classes"));
        }
        if self.optim.batch == 0 {
            return Err(ClanError::config("config", "batch must be >= 1"));
        }
        if !self.branch_weights.is_empty() {
            let expect = self.branch_count();
            if self.branch_weights.len() != expect {
                return Err(ClanError::config(
                    "config",
                    format!(
                        "{} branch weights for {} branches",
                        self.branch_weights.len(),
                        expect
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        let mids = self.model.backbone.tap_stages.len();
        match self.model.variant {
            Variant::Clan => mids + 2,
            Variant::GapBaseline => mids + 1,
        }
    }

    /// Loss weights, defaulting to 1.0 per branch.
    pub fn effective_branch_weights(&self) -> Vec<f64> {
        if self.branch_weights.is_empty() {
            vec![1.0; self.branch_count()]
        } else {
            self.branch_weights.clone()
        }
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(out, "model.variant = {}", self.model.variant.name());
        let _ = writeln!(
            out,
            "model.stage_channels = {}",
            join(&self.model.backbone.stage_channels)
        );
        let _ = writeln!(
            out,
            "model.stage_blocks = {}",
            join(&self.model.backbone.stage_blocks)
        );
        let _ = writeln!(out, "model.input_size = {}", self.model.backbone.input_size);
        let _ = writeln!(
            out,
            "model.tap_stages = {}",
            join(&self.model.backbone.tap_stages)
        );
        let _ = writeln!(out, "model.metric = {}", self.model.metric.name());
        let _ = writeln!(out, "model.pooling = {}", self.model.pooling.name());
        let _ = writeln!(out, "model.gate = {}", self.model.gate.name());
        let _ = writeln!(
            out,
            "model.upsample = {}",
            match self.model.upsample {
                ResampleMode::Nearest => "nearest",
                ResampleMode::Bilinear => "bilinear",
            }
        );
        let _ = writeln!(out, "model.c_int = {}", self.model.c_int.unwrap_or(0));
        if !self.branch_weights.is_empty() {
            let ws = self
                .branch_weights
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "model.branch_weights = {ws}");
        }
        let _ = writeln!(out, "optim.lr = {}", self.optim.lr);
        let _ = writeln!(out, "optim.momentum = {}", self.optim.momentum);
        let _ = writeln!(out, "optim.weight_decay = {}", self.optim.weight_decay);
        let _ = writeln!(out, "optim.batch = {}", self.optim.batch);
        let _ = writeln!(out, "optim.epochs = {}", self.optim.epochs);
        let _ = writeln!(out, "optim.lr_decay_gamma = {}", self.optim.lr_decay_gamma);
        let _ = writeln!(out, "optim.lr_decay_every = {}", self.optim.lr_decay_every);
        let _ = writeln!(out, "data.num_classes = {}", self.data.num_classes);
        let _ = writeln!(out, "data.image_size = {}", self.data.image_size);
        let _ = writeln!(out, "data.base_shapes = {}", self.data.base_shapes);
        let _ = writeln!(out, "data.patch_size = {}", self.data.patch_size);
        let _ = writeln!(out, "data.noise_std = {}", self.data.noise_std);
        let _ = writeln!(out, "data.train_per_class = {}", self.data.train_per_class);
        let _ = writeln!(out, "data.test_per_class = {}", self.data.test_per_class);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "precision = {}", self.precision.name());
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        out
    }
}
