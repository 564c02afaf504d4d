//! Multi-task epoch schedules and the training loop.
//!
//! An epoch draws every batch of every task exactly once. The strategy only
//! decides the order of task draws:
//!
//! * `sequential`: all of task 0, then all of task 1, …
//! * `random`: uniform over tasks that still have batches left;
//! * `proportional`: after `p` draws task `i` has been drawn about
//!   `p·sᵢ/S` times. The default is a deterministic interleave that always
//!   draws the task furthest behind its quota; the stochastic variant draws
//!   tasks with probability proportional to their remaining batches.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PairExample};
use crate::encoder::{EncoderConfig, Side};
use crate::losses::{cross_entropy_graph, triplet_graph, TripletConfig};
use crate::pooling::{attention_pool_graph, concat_tokens, entity_tokens, PoolingMode};
use crate::tensor::{Graph, NodeId};
use crate::tokenizer::{encode, Vocab};
use crate::train::{batch_gradients, stack_rows, Result, SeqRef, TrainError, Trainer};
use crate::util::sub_seed;

pub const RUNNING_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Triplet,
}

impl FromStr for LossKind {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "triplet" => Ok(LossKind::Triplet),
            _ => Err(TrainError::Invalid(format!("unknown loss kind `{s}` (expected cross_entropy or triplet)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStrategy {
    Sequential,
    Random,
    Proportional,
}

impl FromStr for ScheduleStrategy {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScheduleStrategy::Sequential),
            "random" => Ok(ScheduleStrategy::Random),
            "proportional" => Ok(ScheduleStrategy::Proportional),
            _ => Err(TrainError::Invalid(format!(
                "unknown schedule `{s}` (expected sequential, random or proportional)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleStrategy::Sequential => "sequential",
            ScheduleStrategy::Random => "random",
            ScheduleStrategy::Proportional => "proportional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    pub weight: f64,
    pub batch_size: usize,
}

/// Number of batches an epoch of `n` examples is cut into. Batches hold
/// `⌊n/k⌋` or `⌈n/k⌉` examples, never fewer than `batch_size` unless the
/// whole dataset is smaller.
pub fn num_batches(n: usize, batch_size: usize) -> usize {
    (n / batch_size.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    /// Task index of every batch draw, in order.
    pub order: Vec<usize>,
    pub strategy: ScheduleStrategy,
    pub stochastic: bool,
    pub seed: u64,
}

/// Orders the batch draws of one epoch. `sizes[i]` is task `i`'s number of
/// batches. `stochastic` only affects `Proportional`.
pub fn build_epoch_plan(sizes: &[usize], strategy: ScheduleStrategy, stochastic: bool, seed: u64) -> Result<EpochPlan> {
    if sizes.is_empty() {
        return Err(TrainError::Invalid("epoch plan needs at least one task".into()));
    }
    if sizes.contains(&0) {
        return Err(TrainError::Invalid("every task needs at least one batch".into()));
    }
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = sizes.to_vec();
    let mut order = Vec::with_capacity(total);
    match (strategy, stochastic) {
        (ScheduleStrategy::Sequential, _) => {
            for (i, &s) in sizes.iter().enumerate() {
                order.extend(std::iter::repeat_n(i, s));
            }
        }
        (ScheduleStrategy::Random, _) => {
            for _ in 0..total {
                let open: Vec<usize> = (0..sizes.len()).filter(|&i| left[i] > 0).collect();
                let i = open[rng.random_range(0..open.len())];
                left[i] -= 1;
                order.push(i);
            }
        }
        (ScheduleStrategy::Proportional, false) => {
            let mut drawn = vec![0usize; sizes.len()];
            for p in 1..=total {
                // Deficit of task i after p draws: p·sᵢ/S − drawnᵢ, compared
                // exactly as p·sᵢ − drawnᵢ·S.
                let i = (0..sizes.len())
                    .filter(|&i| drawn[i] < sizes[i])
                    .max_by(|&a, &b| {
                        let da = (p * sizes[a]) as i128 - (drawn[a] * total) as i128;
                        let db = (p * sizes[b]) as i128 - (drawn[b] * total) as i128;
                        da.cmp(&db).then(b.cmp(&a))
                    })
                    .expect("draws remain");
                drawn[i] += 1;
                order.push(i);
            }
        }
        (ScheduleStrategy::Proportional, true) => {
            let mut remaining = total;
            for _ in 0..total {
                let mut x = rng.random_range(0..remaining);
                let i = (0..sizes.len())
                    .find(|&i| {
                        if x < left[i] {
                            true
                        } else {
                            x -= left[i];
                            false
                        }
                    })
                    .expect("x < remaining");
                left[i] -= 1;
                remaining -= 1;
                order.push(i);
            }
        }
    }
    Ok(EpochPlan {
        order,
        strategy,
        stochastic,
        seed,
    })
}

/// Position inside an epoch: draws made so far and batches taken per task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cursor {
    pub position: usize,
    pub taken: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub task: usize,
    /// Indices into the task's example list.
    pub examples: Vec<usize>,
}

/// Per-epoch shuffles of every task, cut into batches.
#[derive(Clone, Debug)]
pub struct EpochBatches {
    pub plan: EpochPlan,
    shuffles: Vec<Vec<usize>>,
    batches: Vec<usize>,
}

impl EpochBatches {
    /// `examples[i]` and `batch_sizes[i]` describe task `i`.
    pub fn new(
        examples: &[usize],
        batch_sizes: &[usize],
        strategy: ScheduleStrategy,
        stochastic: bool,
        seed: u64,
    ) -> Result<Self> {
        if examples.len() != batch_sizes.len() {
            return Err(TrainError::Invalid("examples and batch sizes differ in length".into()));
        }
        if examples.contains(&0) {
            return Err(TrainError::Invalid("every task needs at least one example".into()));
        }
        let batches: Vec<usize> = examples.iter().zip(batch_sizes).map(|(n, b)| num_batches(*n, *b)).collect();
        let plan = build_epoch_plan(&batches, strategy, stochastic, sub_seed(seed, 0))?;
        let shuffles = examples
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 1 + t as u64)));
                idx
            })
            .collect();
        Ok(Self {
            plan,
            shuffles,
            batches,
        })
    }

    pub fn start(&self) -> Cursor {
        Cursor {
            position: 0,
            taken: vec![0; self.batches.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.plan.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.order.is_empty()
    }

    /// The batch at `cursor` and the cursor after it; `None` at end of epoch.
    pub fn next_step(&self, cursor: &Cursor) -> Option<(Step, Cursor)> {
        let &task = self.plan.order.get(cursor.position)?;
        let b = cursor.taken[task];
        let n = self.shuffles[task].len();
        let k = self.batches[task];
        let examples = self.shuffles[task][b * n / k..(b + 1) * n / k].to_vec();
        let mut next = cursor.clone();
        next.position += 1;
        next.taken[task] += 1;
        Some((Step { task, examples }, next))
    }
}

/// Token ids of one example, ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedPair {
    pub query: Vec<u32>,
    pub doc: Vec<u32>,
    pub entities: Vec<Vec<u32>>,
    pub label: f64,
}

pub fn tokenize_pairs(examples: &[PairExample], vocab: &Vocab, cfg: &EncoderConfig) -> Result<Vec<TokenizedPair>> {
    let tok_err = |e: crate::pooling::PoolingError| TrainError::Pooling(e);
    examples
        .iter()
        .map(|e| {
            let q = encode(&e.query, vocab, cfg.max_len_query, true)
                .map_err(|err| tok_err(crate::pooling::PoolingError::Tokenizer(err)))?;
            let d = concat_tokens(&e.doc, vocab, cfg.max_len_doc).map_err(tok_err)?;
            let ents = entity_tokens(&e.doc, vocab, cfg.max_len_doc).map_err(tok_err)?;
            Ok(TokenizedPair {
                query: q.active().to_vec(),
                doc: d.active().to_vec(),
                entities: ents.iter().map(|t| t.active().to_vec()).collect(),
                label: e.label.as_f64(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub examples: Vec<TokenizedPair>,
}

impl TaskData {
    /// Triplet tasks train on positive pairs only; other labels are dropped.
    pub fn new(spec: TaskSpec, mut examples: Vec<TokenizedPair>) -> Result<Self> {
        if spec.loss == LossKind::Triplet {
            let before = examples.len();
            examples.retain(|e| e.label == Label::Positive.as_f64());
            if examples.len() < before {
                log::info!("task `{}`: dropped {} non-positive pairs", spec.name, before - examples.len());
            }
            if examples.len() < 2 {
                return Err(TrainError::Invalid(format!(
                    "triplet task `{}` needs at least 2 positive pairs",
                    spec.name
                )));
            }
        }
        if examples.is_empty() {
            return Err(TrainError::Invalid(format!("task `{}` has no examples", spec.name)));
        }
        if !(spec.weight > 0.0) || spec.batch_size == 0 {
            return Err(TrainError::Invalid(format!(
                "task `{}` needs a positive weight and batch size",
                spec.name
            )));
        }
        Ok(Self { spec, examples })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub strategy: ScheduleStrategy,
    #[serde(default)]
    pub stochastic_proportional: bool,
    pub seed: u64,
    pub triplet: TripletConfig,
    pub pooling: PoolingMode,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            strategy: ScheduleStrategy::Proportional,
            stochastic_proportional: false,
            seed: 0,
            triplet: TripletConfig::default(),
            pooling: PoolingMode::Concat,
            max_iterations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub task: String,
    pub loss: f64,
    pub running_avg_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,task,loss,running_avg_loss\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.iteration, p.task, p.loss, p.running_avg_loss);
        }
        out
    }

    pub fn final_running_avg(&self) -> Option<f64> {
        self.points.last().map(|p| p.running_avg_loss)
    }
}

/// Records the weighted loss of one batch of `task` over the embedding
/// leaves (queries first, then documents or entity groups).
fn batch_loss(
    g: &mut Graph<'_, f32>,
    leaves: &[NodeId],
    task: &TaskData,
    batch: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(NodeId, ())> {
    let b = batch.len();
    let qs = stack_rows(g, &leaves[..b])?;
    let ds = match cfg.pooling {
        PoolingMode::Concat => stack_rows(g, &leaves[b..2 * b])?,
        PoolingMode::Attention => {
            let mut at = b;
            let mut pooled = Vec::with_capacity(b);
            for (j, &i) in batch.iter().enumerate() {
                let m = task.examples[i].entities.len();
                let ents = stack_rows(g, &leaves[at..at + m])?;
                pooled.push(attention_pool_graph(g, leaves[j], ents)?);
                at += m;
            }
            stack_rows(g, &pooled)?
        }
    };
    let loss = match task.spec.loss {
        LossKind::CrossEntropy => {
            let labels: Vec<f64> = batch.iter().map(|&i| task.examples[i].label).collect();
            cross_entropy_graph(g, qs, ds, &labels)?
        }
        LossKind::Triplet => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed ^ 0x7269_706c, iteration as u64));
            triplet_graph(g, qs, ds, &cfg.triplet, &mut rng)?.0
        }
    };
    Ok((g.scale(loss, task.spec.weight)?, ()))
}

/// Loss and gradients of one batch, without updating the model.
pub fn batch_step(
    trainer: &Trainer,
    task: &TaskData,
    batch: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<crate::train::BatchOutput<f32, ()>> {
    let mut seqs: Vec<SeqRef> = batch
        .iter()
        .map(|&i| SeqRef {
            side: Side::Query,
            ids: &task.examples[i].query,
        })
        .collect();
    match cfg.pooling {
        PoolingMode::Concat => seqs.extend(batch.iter().map(|&i| SeqRef {
            side: Side::Document,
            ids: &task.examples[i].doc,
        })),
        PoolingMode::Attention => {
            for &i in batch {
                seqs.extend(task.examples[i].entities.iter().map(|ids| SeqRef {
                    side: Side::Document,
                    ids,
                }));
            }
        }
    }
    batch_gradients(&trainer.model, &seqs, |g, leaves| batch_loss(g, leaves, task, batch, cfg, iteration))
}

/// Runs `cfg.epochs` epochs of the schedule, one Adam step per batch.
pub fn train(trainer: &mut Trainer, tasks: &[TaskData], cfg: &TrainConfig) -> Result<LossCurve> {
    if tasks.is_empty() {
        return Err(TrainError::Invalid("no tasks to train on".into()));
    }
    cfg.triplet.validate()?;
    let counts: Vec<usize> = tasks.iter().map(|t| t.examples.len()).collect();
    let bsz: Vec<usize> = tasks.iter().map(|t| t.spec.batch_size).collect();
    let mut curve = LossCurve::default();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(RUNNING_WINDOW);
    let mut iteration = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let epoch_seed = sub_seed(cfg.seed, 1000 + epoch as u64);
        let batches = EpochBatches::new(&counts, &bsz, cfg.strategy, cfg.stochastic_proportional, epoch_seed)?;
        let mut cursor = batches.start();
        while let Some((step, next)) = batches.next_step(&cursor) {
            if cfg.max_iterations.is_some_and(|m| iteration >= m) {
                break 'epochs;
            }
            cursor = next;
            let task = &tasks[step.task];
            let out = batch_step(trainer, task, &step.examples, cfg, iteration)?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged {
                    iteration,
                    task: task.spec.name.clone(),
                    value: out.loss,
                });
            }
            trainer.apply(&out.grads)?;
            if window.len() == RUNNING_WINDOW {
                window.pop_front();
            }
            window.push_back(out.loss);
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            curve.points.push(LossPoint {
                iteration,
                task: task.spec.name.clone(),
                loss: out.loss,
                running_avg_loss: avg,
            });
            iteration += 1;
        }
        log::info!(
            "epoch {epoch}: {iteration} iterations, running loss {:.4}",
            curve.final_running_avg().unwrap_or(f64::NAN)
        );
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(order: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &i in order {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn sequential_is_concatenation() {
        let p = build_epoch_plan(&[2, 1, 1], ScheduleStrategy::Sequential, false, 0).unwrap();
        assert_eq!(p.order, vec![0, 0, 1, 2]);
    }

    #[test]
    fn every_strategy_consumes_exactly() {
        for (s, st) in [
            (ScheduleStrategy::Sequential, false),
            (ScheduleStrategy::Random, false),
            (ScheduleStrategy::Proportional, false),
            (ScheduleStrategy::Proportional, true),
        ] {
            let p = build_epoch_plan(&[100, 50, 25], s, st, 3).unwrap();
            assert_eq!(counts(&p.order, 3), vec![100, 50, 25], "{s:?} {st}");
        }
    }

    #[test]
    fn proportional_interleave_small_case() {
        let p = build_epoch_plan(&[4, 2, 2], ScheduleStrategy::Proportional, false, 0).unwrap();
        assert_eq!(p.order, vec![0, 1, 2, 0, 0, 1, 2, 0]);
    }

    #[test]
    fn random_plan_reproducible() {
        let a = build_epoch_plan(&[5, 3], ScheduleStrategy::Random, false, 9).unwrap();
        let b = build_epoch_plan(&[5, 3], ScheduleStrategy::Random, false, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_plans_rejected() {
        assert!(build_epoch_plan(&[], ScheduleStrategy::Random, false, 0).is_err());
        assert!(build_epoch_plan(&[1, 0], ScheduleStrategy::Random, false, 0).is_err());
    }

    #[test]
    fn batches_cover_each_example_once() {
        let eb = EpochBatches::new(&[10, 7], &[3, 2], ScheduleStrategy::Random, false, 5).unwrap();
        let mut cur = eb.start();
        let mut seen = [vec![], vec![]];
        let first = eb.next_step(&cur).unwrap().0;
        while let Some((s, next)) = eb.next_step(&cur) {
            assert!(s.examples.len() >= 2);
            seen[s.task].extend(s.examples);
            cur = next;
        }
        assert_eq!(cur.position, eb.len());
        for (t, n) in [(0, 10), (1, 7)] {
            seen[t].sort();
            assert_eq!(seen[t], (0..n).collect::<Vec<_>>());
        }
        let again = EpochBatches::new(&[10, 7], &[3, 2], ScheduleStrategy::Random, false, 5).unwrap();
        assert_eq!(again.next_step(&again.start()).unwrap().0, first);
    }

    #[test]
    fn names_parse() {
        assert_eq!("proportional".parse::<ScheduleStrategy>().unwrap(), ScheduleStrategy::Proportional);
        assert_eq!("triplet".parse::<LossKind>().unwrap(), LossKind::Triplet);
        assert!("roundrobin".parse::<ScheduleStrategy>().is_err());
        assert_eq!(num_batches(10, 3), 3);
        assert_eq!(num_batches(2, 8), 1);
    }
}
