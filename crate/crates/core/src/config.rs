//! Run configuration for training.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::data::{DataFormat, Schema};
use crate::encoder::EncoderConfig;
use crate::losses::TripletConfig;
use crate::pooling::{PoolingMode, DEFAULT_ATTENTION_HIDDEN};
use crate::scheduler::{LossKind, ScheduleStrategy, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub path: PathBuf,
    pub format: DataFormat,
    pub schema: Schema,
    pub loss: LossKind,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn one() -> f64 {
    1.0
}

fn default_batch() -> usize {
    32
}

impl TaskEntry {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            loss: self.loss,
            weight: self.weight,
            batch_size: self.batch_size,
        }
    }
}

/// Parses `path=…,schema=…,loss=…[,name=…][,format=…][,weight=…][,batch_size=…]`.
/// A bare path is accepted too. Format defaults from the extension, schema
/// to `click`, loss to `triplet`, name to the file stem.
impl FromStr for TaskEntry {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut path = None;
        let mut name = None;
        let mut format = None;
        let mut schema = Schema::Click;
        let mut loss = LossKind::Triplet;
        let mut weight = 1.0;
        let mut batch_size = default_batch();
        for part in s.split(',') {
            let Some((k, v)) = part.split_once('=') else {
                if path.is_none() && !part.is_empty() {
                    path = Some(PathBuf::from(part));
                    continue;
                }
                bail!("task field `{part}` is not key=value");
            };
            match k.trim() {
                "path" => path = Some(PathBuf::from(v)),
                "name" => name = Some(v.to_string()),
                "format" => format = Some(v.parse()?),
                "schema" => schema = v.parse()?,
                "loss" => loss = v.parse()?,
                "weight" => weight = v.parse().with_context(|| format!("bad weight `{v}`"))?,
                "batch_size" | "batch" => batch_size = v.parse().with_context(|| format!("bad batch size `{v}`"))?,
                other => bail!("unknown task field `{other}`"),
            }
        }
        let path = path.context("task needs a path")?;
        let format = match format {
            Some(f) => f,
            None => match path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => DataFormat::Jsonl,
                _ => DataFormat::Tsv,
            },
        };
        let name = name.unwrap_or_else(|| path.file_stem().map_or("task".into(), |s| s.to_string_lossy().into_owned()));
        Ok(Self {
            name,
            path,
            format,
            schema,
            loss,
            weight,
            batch_size,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub triplet: TripletConfig,
    pub strategy: ScheduleStrategy,
    #[serde(default)]
    pub stochastic_proportional: bool,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub pooling: PoolingMode,
    #[serde(default = "default_hidden")]
    pub attention_hidden: usize,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    pub tasks: Vec<TaskEntry>,
    pub vocab: PathBuf,
    /// Optional starting checkpoint.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub out: PathBuf,
}

fn default_hidden() -> usize {
    DEFAULT_ATTENTION_HIDDEN
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            bail!("no training tasks configured");
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            if !names.insert(&t.name) {
                bail!("duplicate task name `{}`", t.name);
            }
            if !(t.weight > 0.0) || t.batch_size == 0 {
                bail!("task `{}` needs a positive weight and batch size", t.name);
            }
            must_exist(&t.path)?;
        }
        must_exist(&self.vocab)?;
        if let Some(p) = &self.init {
            must_exist(p)?;
        }
        self.triplet.validate()?;
        self.encoder.validate()?;
        if !(self.lr > 0.0) {
            bail!("learning rate must be positive");
        }
        Ok(())
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_strings() {
        let t: TaskEntry = "path=d/nli.tsv,schema=nli,loss=cross_entropy,weight=0.5".parse().unwrap();
        assert_eq!(t.name, "nli");
        assert_eq!(t.format, DataFormat::Tsv);
        assert_eq!(t.schema, Schema::Nli);
        assert_eq!(t.loss, LossKind::CrossEntropy);
        assert_eq!(t.weight, 0.5);
        let t: TaskEntry = "x.jsonl".parse().unwrap();
        assert_eq!((t.format, t.loss, t.batch_size), (DataFormat::Jsonl, LossKind::Triplet, 32));
        assert!("schema=nli".parse::<TaskEntry>().is_err());
        assert!("a.tsv,loss=hinge".parse::<TaskEntry>().is_err());
        assert!("a.tsv,colour=red".parse::<TaskEntry>().is_err());
    }
}
