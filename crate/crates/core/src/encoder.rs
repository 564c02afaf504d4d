//! Transformer sentence encoder: token sequence → unit-norm `M`-dim vector.
//!
//! Pre-layernorm blocks, learned positions, mean pooling over the non-pad
//! tokens, a `d → M` projection and a final L2 normalization. Only the
//! `true_length` prefix of a [`TokenSequence`] is ever read, so pad content
//! cannot influence the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, ParamSet, Real, Tensor, TensorError};
use crate::tokenizer::TokenSequence;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("{side:?} sequence has {len} tokens, limit is {max}")]
    Length { side: Side, len: usize, max: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub output_dim: usize,
    pub max_len_query: usize,
    pub max_len_doc: usize,
    pub shared_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            output_dim: 32,
            max_len_query: 16,
            max_len_doc: 75,
            shared_weights: true,
        }
    }
}

impl EncoderConfig {
    /// Six BERT-base-width layers; constructible, far too slow to train here.
    pub fn bert6() -> Self {
        Self {
            vocab_size: 30_000,
            num_layers: 6,
            model_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("output_dim", self.output_dim),
            ("max_len_query", self.max_len_query),
            ("max_len_doc", self.max_len_doc),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be at least 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(EncoderError::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.output_dim > self.model_dim {
            return Err(EncoderError::Config(format!(
                "output_dim {} exceeds model_dim {}",
                self.output_dim, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        self.max_len_query.max(self.max_len_doc)
    }

    pub fn max_len(&self, side: Side) -> usize {
        match side {
            Side::Query => self.max_len_query,
            Side::Document => self.max_len_doc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Query,
    Document,
}

impl Side {
    /// Parameter-name prefix of this side's tower.
    pub fn prefix(self, shared: bool) -> &'static str {
        match (shared, self) {
            (true, _) => "enc.",
            (false, Side::Query) => "query.",
            (false, Side::Document) => "doc.",
        }
    }
}

/// Unit-L2 embedding produced by the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v` to unit length.
    pub fn normalized(mut v: Vec<f32>) -> Self {
        let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in &mut v {
                *x = (*x as f64 / n) as f32;
            }
        }
        Self(v)
    }

    /// Wraps values that are already unit-norm (e.g. read back from an index).
    pub fn from_raw(v: Vec<f32>) -> Self {
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Dot product accumulated in `f64`; shared by scoring and retrieval so
/// both report identical numbers.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() as f32
}

/// Relevance score `qᵀd`.
pub fn similarity(q: &Embedding, d: &Embedding) -> Result<f32> {
    if q.dim() != d.dim() {
        return Err(EncoderError::DimMismatch(q.dim(), d.dim()));
    }
    Ok(dot_f32(q.as_slice(), d.as_slice()))
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Parameter indices of one tower, resolved once against a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct TowerLayout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    proj_w: usize,
    proj_b: usize,
}

impl TowerLayout {
    pub fn resolve<T: Real>(params: &ParamSet<T>, prefix: &str, num_layers: usize) -> Result<Self> {
        let ix = |name: &str| params.index_of(&format!("{prefix}{name}"));
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let lx = |name: &str| params.index_of(&format!("{prefix}layer{l}.{name}"));
            layers.push(LayerIdx {
                ln1_g: lx("ln1.g")?,
                ln1_b: lx("ln1.b")?,
                wq: lx("attn.wq")?,
                bq: lx("attn.bq")?,
                wk: lx("attn.wk")?,
                bk: lx("attn.bk")?,
                wv: lx("attn.wv")?,
                bv: lx("attn.bv")?,
                wo: lx("attn.wo")?,
                bo: lx("attn.bo")?,
                ln2_g: lx("ln2.g")?,
                ln2_b: lx("ln2.b")?,
                w1: lx("ffn.w1")?,
                b1: lx("ffn.b1")?,
                w2: lx("ffn.w2")?,
                b2: lx("ffn.b2")?,
            });
        }
        Ok(Self {
            tok: ix("tok_emb")?,
            pos: ix("pos_emb")?,
            layers,
            lnf_g: ix("ln_f.g")?,
            lnf_b: ix("ln_f.b")?,
            proj_w: ix("proj.w")?,
            proj_b: ix("proj.b")?,
        })
    }
}

/// Encoder weights θ together with their config.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    query: TowerLayout,
    doc: TowerLayout,
}

fn insert_tower(params: &mut ParamSet<f32>, cfg: &EncoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<()> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut randn = |shape: &[usize]| -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("shape")
    };
    let d = cfg.model_dim;
    let mut add = |name: String, t: Tensor<f32>| params.insert(name, t).map(|_| ());
    add(format!("{prefix}tok_emb"), randn(&[cfg.vocab_size, d]))?;
    add(format!("{prefix}pos_emb"), randn(&[cfg.max_positions(), d]))?;
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}layer{l}.");
        add(format!("{p}ln1.g"), Tensor::full(&[1, d], 1.0))?;
        add(format!("{p}ln1.b"), Tensor::zeros(&[1, d]))?;
        for w in ["q", "k", "v", "o"] {
            add(format!("{p}attn.w{w}"), randn(&[d, d]))?;
            add(format!("{p}attn.b{w}"), Tensor::zeros(&[1, d]))?;
        }
        add(format!("{p}ln2.g"), Tensor::full(&[1, d], 1.0))?;
        add(format!("{p}ln2.b"), Tensor::zeros(&[1, d]))?;
        add(format!("{p}ffn.w1"), randn(&[d, cfg.ffn_dim]))?;
        add(format!("{p}ffn.b1"), Tensor::zeros(&[1, cfg.ffn_dim]))?;
        add(format!("{p}ffn.w2"), randn(&[cfg.ffn_dim, d]))?;
        add(format!("{p}ffn.b2"), Tensor::zeros(&[1, d]))?;
    }
    add(format!("{prefix}ln_f.g"), Tensor::full(&[1, d], 1.0))?;
    add(format!("{prefix}ln_f.b"), Tensor::zeros(&[1, d]))?;
    add(format!("{prefix}proj.w"), randn(&[d, cfg.output_dim]))?;
    add(format!("{prefix}proj.b"), Tensor::zeros(&[1, cfg.output_dim]))?;
    Ok(())
}

/// Fresh parameters: N(0, 0.02) weights and embeddings, zero biases,
/// unit layernorm gains. Deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    if config.shared_weights {
        insert_tower(&mut params, config, Side::Query.prefix(true), &mut rng)?;
    } else {
        insert_tower(&mut params, config, Side::Query.prefix(false), &mut rng)?;
        insert_tower(&mut params, config, Side::Document.prefix(false), &mut rng)?;
    }
    ModelParams::from_params(config.clone(), params)
}

impl<T: Real> ModelParams<T> {
    /// Wraps a parameter set (e.g. loaded from a checkpoint), checking that
    /// every tensor the config implies is present with the right shape.
    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let shared = config.shared_weights;
        let query = TowerLayout::resolve(&params, Side::Query.prefix(shared), config.num_layers)?;
        let doc = TowerLayout::resolve(&params, Side::Document.prefix(shared), config.num_layers)?;
        let d = config.model_dim;
        for (layout, _) in [(&query, Side::Query), (&doc, Side::Document)] {
            let expect = |idx: usize, shape: &[usize]| -> Result<()> {
                if params.at(idx).shape() != shape {
                    return Err(EncoderError::Config(format!(
                        "`{}` has shape {:?}, expected {shape:?}",
                        params.name(idx),
                        params.at(idx).shape()
                    )));
                }
                Ok(())
            };
            expect(layout.tok, &[config.vocab_size, d])?;
            expect(layout.pos, &[config.max_positions(), d])?;
            expect(layout.proj_w, &[d, config.output_dim])?;
            for l in &layout.layers {
                expect(l.wq, &[d, d])?;
                expect(l.w1, &[d, config.ffn_dim])?;
                expect(l.w2, &[config.ffn_dim, d])?;
            }
        }
        Ok(Self {
            config,
            params,
            query,
            doc,
        })
    }

    pub fn layout(&self, side: Side) -> &TowerLayout {
        match side {
            Side::Query => &self.query,
            Side::Document => &self.doc,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.cast(),
            query: self.query.clone(),
            doc: self.doc.clone(),
        }
    }

    pub fn into_parts(self) -> (EncoderConfig, ParamSet<T>) {
        (self.config, self.params)
    }
}

/// Records the forward pass for `ids` (the active, non-pad tokens) on `g`
/// and returns the `[1, M]` unit-norm output node. `g` must borrow a
/// parameter set laid out like the one `layout` was resolved from.
pub fn encode_graph<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &EncoderConfig,
    layout: &TowerLayout,
    ids: &[u32],
) -> Result<NodeId> {
    let n = ids.len();
    if n == 0 || n > cfg.max_positions() {
        return Err(EncoderError::Length {
            side: Side::Document,
            len: n,
            max: cfg.max_positions(),
        });
    }
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = g.param_at(layout.tok);
    let pos = g.param_at(layout.pos);
    let x_tok = g.gather(tok, &ids)?;
    let x_pos = g.slice(pos, 0, 0, n)?;
    let mut x = g.add(x_tok, x_pos)?;

    let affine_ln = |g: &mut Graph<'_, T>, x: NodeId, gain: usize, bias: usize| -> Result<NodeId> {
        let z = g.layernorm(x)?;
        let gp = g.param_at(gain);
        let bp = g.param_at(bias);
        let z = g.mul_row(z, gp)?;
        Ok(g.add_row(z, bp)?)
    };
    let linear = |g: &mut Graph<'_, T>, x: NodeId, w: usize, b: usize| -> Result<NodeId> {
        let wp = g.param_at(w);
        let bp = g.param_at(b);
        let y = g.matmul(x, wp)?;
        Ok(g.add_row(y, bp)?)
    };

    for l in &layout.layers {
        let h = affine_ln(g, x, l.ln1_g, l.ln1_b)?;
        let q = linear(g, h, l.wq, l.bq)?;
        let k = linear(g, h, l.wk, l.bk)?;
        let v = linear(g, h, l.wv, l.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (a, b) = (hd * dk, (hd + 1) * dk);
            let (qs, ks, vs) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, a, b)?, g.slice(k, 1, a, b)?, g.slice(v, 1, a, b)?)
            };
            let s = g.matmul_t(qs, ks)?;
            let s = g.scale(s, scale)?;
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vs)?);
        }
        let att = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let att = linear(g, att, l.wo, l.bo)?;
        x = g.add(x, att)?;

        let h2 = affine_ln(g, x, l.ln2_g, l.ln2_b)?;
        let f = linear(g, h2, l.w1, l.b1)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, l.w2, l.b2)?;
        x = g.add(x, f)?;
    }

    let xf = affine_ln(g, x, layout.lnf_g, layout.lnf_b)?;
    let pooled = g.col_mean(xf)?;
    let out = linear(g, pooled, layout.proj_w, layout.proj_b)?;
    Ok(g.l2_normalize(out)?)
}

fn check_len(cfg: &EncoderConfig, side: Side, tokens: &TokenSequence) -> Result<()> {
    let max = cfg.max_len(side);
    if tokens.true_length > max || tokens.true_length == 0 || tokens.true_length > tokens.ids.len() {
        return Err(EncoderError::Length {
            side,
            len: tokens.true_length,
            max,
        });
    }
    Ok(())
}

/// Embeds one token sequence through the `side` tower.
pub fn encode_text<T: Real>(model: &ModelParams<T>, side: Side, tokens: &TokenSequence) -> Result<Embedding> {
    check_len(&model.config, side, tokens)?;
    let mut g = Graph::with_params(&model.params);
    let out = encode_graph(&mut g, &model.config, model.layout(side), tokens.active())?;
    Ok(Embedding::from_raw(g.value(out).data().iter().map(|x| x.as_f64() as f32).collect()))
}

/// Embeds a batch; element `i` is exactly `encode_text` of input `i`.
pub fn encode_batch<T: Real>(model: &ModelParams<T>, side: Side, batch: &[TokenSequence]) -> Result<Vec<Embedding>> {
    batch.iter().map(|t| encode_text(model, side, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode, Vocab};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 300,
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 24,
            output_dim: 8,
            max_len_query: 10,
            max_len_doc: 20,
            shared_weights: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.output_dim = 32;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_layers = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::bert6().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_params(&tiny(), 5).unwrap();
        let b = init_params(&tiny(), 5).unwrap();
        let c = init_params(&tiny(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn default_projection_is_32_wide() {
        let m = init_params(&EncoderConfig { vocab_size: 260, ..EncoderConfig::default() }, 0).unwrap();
        assert_eq!(m.params.get("enc.proj.w").unwrap().shape(), &[64, 32]);
    }

    #[test]
    fn output_is_unit_norm_and_pad_independent() {
        let m = init_params(&tiny(), 1).unwrap();
        let v = Vocab::bytes_only();
        let s = encode("hi there", &v, 20, false).unwrap();
        let e = encode_text(&m, Side::Document, &s).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
        let mut s2 = s.clone();
        for id in &mut s2.ids[s.true_length..] {
            *id = 77;
        }
        assert_eq!(e, encode_text(&m, Side::Document, &s2).unwrap());
    }

    #[test]
    fn length_violation_is_error() {
        let m = init_params(&tiny(), 1).unwrap();
        let s = encode("much longer than ten bytes", &Vocab::bytes_only(), 40, false).unwrap();
        assert!(matches!(
            encode_text(&m, Side::Query, &s),
            Err(EncoderError::Length { side: Side::Query, .. })
        ));
    }

    #[test]
    fn shared_towers_agree_and_separate_towers_differ() {
        let v = Vocab::bytes_only();
        let s = encode("same", &v, 10, false).unwrap();
        let shared = init_params(&tiny(), 2).unwrap();
        assert_eq!(
            encode_text(&shared, Side::Query, &s).unwrap(),
            encode_text(&shared, Side::Document, &s).unwrap()
        );
        let sep = init_params(&EncoderConfig { shared_weights: false, ..tiny() }, 2).unwrap();
        assert_ne!(
            encode_text(&sep, Side::Query, &s).unwrap(),
            encode_text(&sep, Side::Document, &s).unwrap()
        );
    }

    #[test]
    fn similarity_basics() {
        let a = Embedding::normalized(vec![1.0, 0.0, 0.0]);
        let b = Embedding::normalized(vec![0.0, 1.0, 0.0]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        let c = Embedding::from_raw(vec![0.6, 0.8]);
        assert!(matches!(similarity(&a, &c), Err(EncoderError::DimMismatch(3, 2))));
        // 0.6·0.28 + 0.8·0.96 = 0.936
        let d = Embedding::from_raw(vec![0.28, 0.96]);
        assert!((similarity(&c, &d).unwrap() - 0.936).abs() < 1e-6);
        assert_eq!(similarity(&c, &d).unwrap(), similarity(&d, &c).unwrap());
    }

    #[test]
    fn from_params_rejects_missing_tensors() {
        let m = init_params(&tiny(), 0).unwrap();
        let (cfg, params) = m.into_parts();
        let partial = params.extract_prefixed("enc.layer0.", "enc.layer0.");
        assert!(ModelParams::from_params(cfg, partial).is_err());
    }
}
