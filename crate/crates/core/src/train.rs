//! Batched gradients for the encoder.
//!
//! Each sequence is recorded on its own graph over its active tokens. The
//! loss graph sees the resulting embeddings as input leaves; its backward
//! pass yields one seed row per sequence, which is then pushed back through
//! that sequence's graph. Parameter gradients are summed in batch order, so
//! results are deterministic. Parameters used directly by the loss graph
//! (the attention net) receive their gradients from the loss graph itself.

use thiserror::Error;

use crate::encoder::{encode_graph, EncoderError, ModelParams, Side};
use crate::losses::LossError;
use crate::pooling::PoolingError;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, NodeId, ParamGrads, Real, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at iteration {iteration} (task `{task}`): value {value}")]
    Diverged { iteration: usize, task: String, value: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// A sequence to encode as part of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SeqRef<'a> {
    pub side: Side,
    pub ids: &'a [u32],
}

pub struct BatchOutput<T, O> {
    pub loss: f64,
    pub grads: ParamGrads<T>,
    pub extra: O,
}

/// Encodes `seqs`, lets `build_loss` record a scalar over their `[1, M]`
/// embedding leaves, and returns the loss with its parameter gradients.
pub fn batch_gradients<T, O, F>(model: &ModelParams<T>, seqs: &[SeqRef<'_>], build_loss: F) -> Result<BatchOutput<T, O>>
where
    T: Real,
    F: FnOnce(&mut Graph<'_, T>, &[NodeId]) -> Result<(NodeId, O)>,
{
    let mut graphs = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut g = Graph::with_params(&model.params);
        let out = encode_graph(&mut g, &model.config, model.layout(s.side), s.ids)?;
        graphs.push((g, out));
    }
    let mut lg = Graph::with_params(&model.params);
    let leaves: Vec<NodeId> = graphs.iter().map(|(g, o)| lg.input(g.value(*o).clone())).collect();
    let (loss_node, extra) = build_loss(&mut lg, &leaves)?;
    let loss = lg.value(loss_node).item().as_f64();
    let lgrads = lg.backward_scalar(loss_node)?;
    let mut grads = ParamGrads::zeros_like(&model.params);
    lgrads.accumulate_into(&mut grads);
    for ((g, out), leaf) in graphs.iter().zip(&leaves) {
        if let Some(seed) = lgrads.wrt(*leaf) {
            if seed.data().iter().any(|v| *v != T::zero()) {
                g.backward(*out, seed)?.accumulate_into(&mut grads);
            }
        }
    }
    Ok(BatchOutput { loss, grads, extra })
}

/// Same as [`batch_gradients`] but records everything on one graph; slower
/// and memory-hungry, kept as the reference for the split computation.
pub fn batch_gradients_fused<T, O, F>(model: &ModelParams<T>, seqs: &[SeqRef<'_>], build_loss: F) -> Result<BatchOutput<T, O>>
where
    T: Real,
    F: FnOnce(&mut Graph<'_, T>, &[NodeId]) -> Result<(NodeId, O)>,
{
    let mut g = Graph::with_params(&model.params);
    let mut outs = Vec::with_capacity(seqs.len());
    for s in seqs {
        outs.push(encode_graph(&mut g, &model.config, model.layout(s.side), s.ids)?);
    }
    let (loss_node, extra) = build_loss(&mut g, &outs)?;
    let loss = g.value(loss_node).item().as_f64();
    let grads = g.backward_scalar(loss_node)?.into_param_grads(&model.params);
    Ok(BatchOutput { loss, grads, extra })
}

/// Stacks `[1, M]` rows into a `[B, M]` node.
pub fn stack_rows<T: Real>(g: &mut Graph<'_, T>, rows: &[NodeId]) -> Result<NodeId> {
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    Ok(g.concat(rows, 0)?)
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelParams<f32>,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(model: ModelParams<f32>, config: AdamConfig) -> Self {
        let adam = AdamState::new(&model.params, config);
        Self { model, adam }
    }

    pub fn apply(&mut self, grads: &ParamGrads<f32>) -> Result<()> {
        if !grads.is_finite() {
            return Err(TrainError::Invalid("non-finite gradient".into()));
        }
        adam_step(&mut self.model.params, grads, &mut self.adam)?;
        Ok(())
    }
}
