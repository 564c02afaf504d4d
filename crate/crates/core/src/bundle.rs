//! Model files: a `DENC` checkpoint plus a JSON sidecar holding the encoder
//! config and the vocabulary, so one path is enough to load a usable model.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ModelParams};
use crate::pooling::has_attention;
use crate::tensor::{checkpoint_hash, read_checkpoint, write_checkpoint};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: EncoderConfig,
    pub checkpoint_hash: String,
    /// Hash of the model whose document index this query encoder targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_hash: Option<String>,
    /// Serialized vocabulary.
    pub vocab: String,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: ModelParams<f32>,
    pub vocab: Vocab,
    pub teacher_hash: Option<String>,
}

impl ModelBundle {
    pub fn hash(&self) -> String {
        checkpoint_hash(&self.model.params)
    }

    pub fn has_attention(&self) -> bool {
        has_attention(&self.model.params)
    }

    /// Hash of the model that embeds documents for this bundle's queries.
    pub fn doc_side_hash(&self) -> String {
        self.teacher_hash.clone().unwrap_or_else(|| self.hash())
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `path` and `path.json`; returns both paths.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<Vec<PathBuf>> {
    let mut ckpt = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_checkpoint(&bundle.model.params, &mut ckpt)?;
    ckpt.flush()?;
    let mut vocab = Vec::new();
    bundle.vocab.write_to(&mut vocab)?;
    let meta = ModelMeta {
        config: bundle.model.config.clone(),
        checkpoint_hash: bundle.hash(),
        teacher_hash: bundle.teacher_hash.clone(),
        vocab: String::from_utf8(vocab).context("vocabulary is not UTF-8")?,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", side.display()))?;
    Ok(vec![path.to_path_buf(), side])
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let side = sidecar_path(path);
    let meta: ModelMeta = serde_json::from_str(
        &fs::read_to_string(&side).with_context(|| format!("reading model sidecar {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let params = read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let hash = checkpoint_hash(&params);
    if hash != meta.checkpoint_hash {
        bail!("{} does not match its sidecar (hash {hash}, expected {})", path.display(), meta.checkpoint_hash);
    }
    let vocab = Vocab::read_from(meta.vocab.as_bytes()).context("reading embedded vocabulary")?;
    if vocab.size() != meta.config.vocab_size {
        bail!("vocabulary has {} tokens but the encoder expects {}", vocab.size(), meta.config.vocab_size);
    }
    Ok(ModelBundle {
        model: ModelParams::from_params(meta.config, params)?,
        vocab,
        teacher_hash: meta.teacher_hash,
    })
}
