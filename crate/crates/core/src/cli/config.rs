//! JSON run configuration: defaults, unknown-key warnings, and validation
//! that reports every problem at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::flowgen::FlowConfig;
use crate::metrics::EvalOptions;
use crate::stage1::{self, Stage1Config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_clips: usize,
    pub clip_seconds: f64,
    /// The last `held_out` clips are kept out of training.
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 20,
            clip_seconds: 8.0,
            held_out: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub chunk_frames: usize,
    pub overlap_frames: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            chunk_frames: crate::streaming::CHUNK_FRAMES,
            overlap_frames: crate::streaming::OVERLAP_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "run/data".into(),
            stage1: "run/stage1.pfw".into(),
            stage2: "run/stage2.pfw".into(),
            out_dir: "run/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: FlowConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            stage1: Stage1Config::default(),
            stage2: FlowConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalOptions::default(),
            paths: PathsConfig::default(),
        }
    }
}

pub const REQUIRED_KEYS: &[&str] = &["seed"];

/// Removes keys absent from `schema`, recording their dotted paths.
fn strip_unknown(value: &mut Map<String, Value>, schema: &Map<String, Value>, prefix: &str, warnings: &mut Vec<String>) {
    value.retain(|k, v| {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.get(k) {
            None => {
                warnings.push(format!("unknown key `{path}` ignored"));
                false
            }
            Some(Value::Object(inner)) => {
                if let Value::Object(obj) = v {
                    strip_unknown(obj, inner, &path, warnings);
                }
                true
            }
            Some(_) => true,
        }
    });
}

fn section<T: serde::de::DeserializeOwned + Default>(obj: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> T {
    match obj.get(key) {
        None => T::default(),
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            problems.push(format!("`{key}`: {e}"));
            T::default()
        }),
    }
}

impl RunConfig {
    /// Parses JSON text. Returns the config and any warnings.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let Value::Object(obj) = &mut value else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let mut problems: Vec<String> = REQUIRED_KEYS
            .iter()
            .filter(|k| !obj.contains_key(**k))
            .map(|k| format!("missing required key `{k}`"))
            .collect();
        let schema = match serde_json::to_value(RunConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut warnings = Vec::new();
        strip_unknown(obj, &schema, "", &mut warnings);
        let seed = match obj.get("seed") {
            None => 0,
            Some(v) => v.as_u64().unwrap_or_else(|| {
                problems.push("`seed` must be a non-negative integer".into());
                0
            }),
        };
        let cfg = RunConfig {
            seed,
            data: section(obj, "data", &mut problems),
            stage1: section(obj, "stage1", &mut problems),
            stage2: section(obj, "stage2", &mut problems),
            sampling: section(obj, "sampling", &mut problems),
            eval: section(obj, "eval", &mut problems),
            paths: section(obj, "paths", &mut problems),
        };
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok((cfg, warnings))
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    /// Every value-level problem, empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let collect = |r: Result<()>, p: &mut Vec<String>| {
            if let Err(Error::Config(list)) = r {
                p.extend(list);
            }
        };
        collect(stage1::validate(&self.stage1), &mut p);
        collect(self.stage2.validate(), &mut p);
        if self.stage2.c_a != self.stage1.c_a {
            p.push(format!("stage2.c_a ({}) must equal stage1.c_a ({})", self.stage2.c_a, self.stage1.c_a));
        }
        if self.stage2.enc_width != self.stage1.width {
            p.push(format!(
                "stage2.enc_width ({}) must equal stage1.width ({})",
                self.stage2.enc_width, self.stage1.width
            ));
        }
        if self.data.n_clips == 0 {
            p.push("data.n_clips must be positive".into());
        }
        if self.data.held_out >= self.data.n_clips {
            p.push("data.held_out must be smaller than data.n_clips".into());
        }
        if !(self.data.clip_seconds > 0.0) {
            p.push("data.clip_seconds must be positive".into());
        }
        let s = &self.sampling;
        if s.overlap_frames < 2 || s.overlap_frames >= s.chunk_frames {
            p.push("sampling.overlap_frames must lie in [2, sampling.chunk_frames)".into());
        }
        if self.eval.window == 0 || self.eval.stride == 0 || self.eval.d_pca == 0 || self.eval.components == 0 {
            p.push("eval.window, eval.stride, eval.d_pca and eval.components must be positive".into());
        }
        p
    }
}
