//! Checkpoint files: one JSON document holding the vocabulary, the training
//! configuration and every parameter tensor at 17 significant digits, so a
//! save/load cycle reproduces the parameters bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::model::LayoutModel;
use super::params::{ModelDims, ModelParams};
use super::train::TrainConfig;
use super::ModelError;
use crate::scenegraph::Vocabulary;
use crate::tensorgrad::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub params: ModelParams,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(vocab: Vocabulary, config: TrainConfig, params: ModelParams) -> Result<Self, ModelError> {
        if params.dims != ModelDims::new(vocab.num_categories(), vocab.num_predicates(), config.arch) {
            return Err(bad("parameter shapes disagree with vocabulary and architecture"));
        }
        Ok(Self { vocab, config, params })
    }

    pub fn model(&self) -> Result<LayoutModel, ModelError> {
        LayoutModel::new(self.vocab.clone(), self.params.clone(), self.config.mode)
    }

    pub fn to_json(&self) -> String {
        let config = json!({
            "vocab": {
                "categories": self.vocab.categories(),
                "predicates": self.vocab.predicates(),
            },
            "train": serde_json::to_value(self.config).expect("config serializes"),
        });
        let mut out = String::new();
        out.push_str("{\n");
        let _ = writeln!(out, "  \"format_version\": {FORMAT_VERSION},");
        let _ = writeln!(out, "  \"config\": {config},");
        out.push_str("  \"tensors\": {");
        for (i, (name, t)) in self.params.iter().enumerate() {
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            let name = Value::from(name);
            let _ = write!(out, "    {name}: {{\"shape\": {:?}, \"data\": [", t.shape());
            for (j, v) in t.data().iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push_str("]}");
        }
        out.push_str("\n  }\n}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let root: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let version = root.get("format_version").and_then(Value::as_u64);
        if version != Some(FORMAT_VERSION) {
            return Err(bad(format!(
                "unsupported format_version {:?}",
                root.get("format_version")
            )));
        }
        let config = root.get("config").ok_or_else(|| bad("missing config"))?;
        let names = |key: &str| -> Result<Vec<String>, ModelError> {
            config
                .pointer(&format!("/vocab/{key}"))
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("missing config.vocab.{key}")))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_owned)
                        .ok_or_else(|| bad(format!("config.vocab.{key}: expected strings")))
                })
                .collect()
        };
        let vocab = Vocabulary::new(names("categories")?, names("predicates")?).map_err(|e| bad(e.to_string()))?;
        let train: TrainConfig = serde_json::from_value(
            config
                .get("train")
                .cloned()
                .ok_or_else(|| bad("missing config.train"))?,
        )
        .map_err(|e| bad(format!("config.train: {e}")))?;

        let tensors = root
            .get("tensors")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("missing tensors"))?;
        let mut named = Vec::with_capacity(tensors.len());
        for (name, entry) in tensors {
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("tensor {name}: missing shape")))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(format!("tensor {name}: bad shape")))?;
            let data: Vec<f64> = entry
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("tensor {name}: missing data")))?
                .iter()
                .map(Value::as_f64)
                .collect::<Option<_>>()
                .ok_or_else(|| bad(format!("tensor {name}: non-numeric data")))?;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            named.push((name.clone(), t));
        }
        let dims = ModelDims::new(vocab.num_categories(), vocab.num_predicates(), train.arch);
        let params = ModelParams::from_named(dims, named)?;
        Self::new(vocab, train, params)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> std::io::Result<()> {
    crate::cli::write_atomic(path, checkpoint.to_json().as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}
