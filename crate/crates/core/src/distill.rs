//! Student query encoders trained to reproduce a frozen teacher's
//! embeddings under squared L2.
//!
//! The student is a single tower with the teacher's widths and fewer layers.
//! It starts from the teacher's embeddings, final layernorm, projection and
//! an evenly spaced subset of its layers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_text, init_params, Embedding, EncoderConfig, ModelParams, Side};
use crate::tensor::{AdamConfig, Tensor};
use crate::tokenizer::TokenSequence;
use crate::train::{batch_gradients, stack_rows, Result, SeqRef, TrainError, Trainer};
use crate::util::sub_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub student_layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of the corpus held out for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_layers: 1,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Half the teacher's layers, rounded up.
    pub fn for_teacher(teacher: &EncoderConfig) -> Self {
        Self {
            student_layers: teacher.num_layers.div_ceil(2),
            ..Self::default()
        }
    }
}

/// `‖s − t‖²`.
pub fn distill_loss(student: &Embedding, teacher: &Embedding) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(TrainError::Invalid(format!(
            "student dim {} differs from teacher dim {}",
            student.dim(),
            teacher.dim()
        )));
    }
    Ok(student
        .as_slice()
        .iter()
        .zip(teacher.as_slice())
        .map(|(s, t)| (*s as f64 - *t as f64).powi(2))
        .sum())
}

pub fn student_config(teacher: &EncoderConfig, layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        shared_weights: true,
        ..teacher.clone()
    }
}

/// Teacher layer copied into student layer `l`: evenly spaced from layer 0.
pub fn teacher_layer(l: usize, student_layers: usize, teacher_layers: usize) -> usize {
    l * teacher_layers / student_layers
}

/// A student initialized from the teacher's query tower.
pub fn init_student(teacher: &ModelParams<f32>, layers: usize, seed: u64) -> Result<ModelParams<f32>> {
    if layers == 0 || layers > teacher.config.num_layers {
        return Err(TrainError::Invalid(format!(
            "student needs 1..={} layers, got {layers}",
            teacher.config.num_layers
        )));
    }
    let cfg = student_config(&teacher.config, layers);
    let (cfg, mut params) = init_params(&cfg, seed)?.into_parts();
    let src = Side::Query.prefix(teacher.config.shared_weights);
    let dst = Side::Query.prefix(true);
    for i in 0..params.len() {
        let name = params.name(i)[dst.len()..].to_string();
        let from = match name.strip_prefix("layer").and_then(|r| r.split_once('.')) {
            Some((l, rest)) => {
                let l: usize = l.parse().expect("layer index");
                format!("{src}layer{}.{rest}", teacher_layer(l, layers, teacher.config.num_layers))
            }
            None => format!("{src}{name}"),
        };
        *params.at_mut(i) = teacher.params.get(&from)?.clone();
    }
    Ok(ModelParams::from_params(cfg, params)?)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: ModelParams<f32>,
    /// Held-out mean squared L2 before training.
    pub initial_heldout_l2: f64,
    /// Held-out mean squared L2 after each epoch.
    pub epoch_heldout_l2: Vec<f64>,
}

impl DistillOutcome {
    pub fn final_heldout_l2(&self) -> f64 {
        *self.epoch_heldout_l2.last().unwrap_or(&self.initial_heldout_l2)
    }
}

/// Deterministic train/held-out split of `n` items.
pub fn split(n: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let h = ((n as f64 * heldout_fraction).round() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(h);
    (train, idx)
}

fn mean_l2(student: &ModelParams<f32>, queries: &[TokenSequence], targets: &[Embedding], items: &[usize]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &i in items {
        sum += distill_loss(&encode_text(student, Side::Query, &queries[i])?, &targets[i])?;
    }
    Ok(sum / items.len() as f64)
}

/// Trains a student on `queries`. The teacher is only read.
pub fn train_student(teacher: &ModelParams<f32>, queries: &[TokenSequence], cfg: &DistillConfig) -> Result<DistillOutcome> {
    if queries.is_empty() {
        return Err(TrainError::Invalid("distillation corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(TrainError::Invalid("batch size must be positive and heldout fraction in [0, 1)".into()));
    }
    let student = init_student(teacher, cfg.student_layers, sub_seed(cfg.seed, 0))?;
    let targets: Vec<Embedding> = queries
        .iter()
        .map(|q| encode_text(teacher, Side::Query, q))
        .collect::<std::result::Result<_, _>>()?;
    let (mut train, heldout) = split(queries.len(), cfg.heldout_fraction, sub_seed(cfg.seed, 1));
    let mut trainer = Trainer::new(
        student,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let initial = mean_l2(&trainer.model, queries, &targets, &heldout)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2 + epoch as u64)));
        for (step, batch) in train.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<SeqRef> = batch
                .iter()
                .map(|&i| SeqRef {
                    side: Side::Query,
                    ids: queries[i].active(),
                })
                .collect();
            let target = Tensor::from_rows(
                &batch.iter().map(|&i| targets[i].as_slice().to_vec()).collect::<Vec<_>>(),
            )?;
            let out = batch_gradients(&trainer.model, &seqs, |g, leaves| {
                let s = stack_rows(g, leaves)?;
                let t = g.input(target);
                let diff = g.sub(s, t)?;
                let sq = g.mul(diff, diff)?;
                let total = g.sum_all(sq)?;
                Ok((g.scale(total, 1.0 / batch.len() as f64)?, ()))
            })?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged {
                    iteration: step,
                    task: "distill".into(),
                    value: out.loss,
                });
            }
            trainer.apply(&out.grads)?;
        }
        let l2 = mean_l2(&trainer.model, queries, &targets, &heldout)?;
        log::info!("distill epoch {epoch}: held-out L2 {l2:.5}");
        epochs.push(l2);
    }
    Ok(DistillOutcome {
        student: trainer.model,
        initial_heldout_l2: initial,
        epoch_heldout_l2: epochs,
    })
}
