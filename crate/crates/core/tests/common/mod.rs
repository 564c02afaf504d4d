//! Reference implementations and fixtures shared by the integration tests
//! and the acceptance runner. The oracles are deliberately naive.

#![allow(dead_code)]

use mtenc::encoder::{encode_graph, init_params, EncoderConfig, ModelParams, Side};
use mtenc::losses::{cross_entropy_graph, triplet_graph, Metric, Negative, Strategy, TripletConfig};
use mtenc::pooling::{attention_pool_graph, init_attention};
use mtenc::tensor::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP};
use mtenc::tensor::{Graph, NodeId, ParamSet, Result as TResult, Tensor};
use mtenc::train::stack_rows;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- metrics

pub fn dcg(gains: &[f64], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k.min(gains.len()) {
        let rank = (i + 1) as f64;
        s += (2f64.powf(gains[i]) - 1.0) / (rank + 1.0).log2();
    }
    s
}

fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Ideal DCG by trying every ordering of the pool. Pools must stay small.
pub fn ideal_dcg(pool: &[f64], k: usize) -> f64 {
    assert!(pool.len() <= 8);
    permutations(pool).iter().map(|p| dcg(p, k)).fold(0.0, f64::max)
}

pub fn ndcg(ranked: &[f64], pool: &[f64], k: usize) -> f64 {
    let ideal = ideal_dcg(pool, k);
    if ideal == 0.0 {
        0.0
    } else {
        (dcg(ranked, k) / ideal).min(1.0)
    }
}

pub fn average_precision(ranked: &[bool], total: usize) -> Option<f64> {
    if total == 0 {
        return None;
    }
    let mut s = 0.0;
    for i in 0..ranked.len() {
        if ranked[i] {
            let hits = ranked[..=i].iter().filter(|r| **r).count();
            s += hits as f64 / (i + 1) as f64;
        }
    }
    Some(s / total as f64)
}

pub fn mean_ap(lists: &[(Vec<bool>, usize)]) -> f64 {
    let aps: Vec<f64> = lists.iter().filter_map(|(r, t)| average_precision(r, *t)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Pairwise count over every positive/negative pair.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// ----------------------------------------------------------------- mining

pub fn dist(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += match metric {
            Metric::L1 => (a[i] - b[i]).abs(),
            Metric::L2 => (a[i] - b[i]) * (a[i] - b[i]),
            Metric::Cosine => a[i] * b[i],
        };
    }
    match metric {
        Metric::L1 => s,
        Metric::L2 => s.sqrt(),
        Metric::Cosine => (1.0 - s).max(0.0),
    }
}

pub fn dist_matrix(q: &[Vec<f64>], d: &[Vec<f64>], metric: Metric) -> Vec<Vec<f64>> {
    q.iter().map(|a| d.iter().map(|b| dist(a, b, metric).max(0.0)).collect()).collect()
}

/// Exhaustive negative selection for anchor `j`.
pub fn mine(strategy: Strategy, j: usize, dm: &[Vec<f64>], margin: f64, rng: &mut ChaCha8Rng) -> Negative {
    let b = dm.len();
    let pos = dm[j][j];
    let others: Vec<usize> = (0..b).filter(|&k| k != j).collect();
    let closest = |cands: &[usize]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for &k in cands {
            let better = match best {
                None => true,
                Some(c) => dm[j][k] < dm[j][c],
            };
            if better {
                best = Some(k);
            }
        }
        best
    };
    match strategy {
        Strategy::BatchAll => {
            let set: Vec<usize> = others.iter().copied().filter(|&k| dm[j][k] <= pos + margin).collect();
            if set.is_empty() {
                Negative::Skip
            } else {
                Negative::Mean(set)
            }
        }
        Strategy::Hard => Negative::Single(closest(&others).unwrap()),
        Strategy::SemiHard => {
            let farther: Vec<usize> = others.iter().copied().filter(|&k| dm[j][k] > pos).collect();
            Negative::Single(closest(&farther).or_else(|| closest(&others)).unwrap())
        }
        Strategy::Random => Negative::Single(others[rng.random_range(0..others.len())]),
    }
}

pub fn triplet_loss(q: &[Vec<f64>], d: &[Vec<f64>], cfg: &TripletConfig, negs: &[Negative]) -> f64 {
    let mut total = 0.0;
    let mut active = 0;
    for j in 0..q.len() {
        let n: Vec<f64> = match &negs[j] {
            Negative::Skip => continue,
            Negative::Single(k) => d[*k].clone(),
            Negative::Mean(set) => {
                let mut m = vec![0.0; q[j].len()];
                for &k in set {
                    for i in 0..m.len() {
                        m[i] += d[k][i] / set.len() as f64;
                    }
                }
                m
            }
        };
        let raw = |a: &[f64], b: &[f64]| match cfg.metric {
            Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
            m => dist(a, b, m),
        };
        let h = raw(&q[j], &d[j]) - raw(&q[j], &n) + cfg.margin;
        total += h.max(0.0);
        active += 1;
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

pub fn cross_entropy(q: &[Vec<f64>], d: &[Vec<f64>], labels: &[f64]) -> f64 {
    let eps = mtenc::losses::PROB_EPS;
    let mut s = 0.0;
    for j in 0..q.len() {
        let dot: f64 = q[j].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
        let p = dot.max(0.0).clamp(eps, 1.0 - eps);
        s += labels[j] * p.ln() + (1.0 - labels[j]) * (1.0 - p).ln();
    }
    -s / q.len() as f64
}

pub fn unit_rows(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

// -------------------------------------------------------------- gradcheck

pub const GRAD_TOL: f64 = 1e-4;

/// How op inputs are drawn.
#[derive(Clone, Copy)]
pub enum Draw {
    /// Uniform in ±2, at least 0.1 away from zero.
    AwayFromZero,
    /// Uniform in [0.5, 3].
    Positive,
}

fn draw(rng: &mut ChaCha8Rng, how: Draw) -> f64 {
    match how {
        Draw::Positive => rng.random_range(0.5..3.0),
        Draw::AwayFromZero => {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        }
    }
}

/// Contracts any output with fixed pseudo-random weights so every element
/// of a non-scalar result reaches the gradient.
fn contract(g: &mut Graph<'_, f64>, out: NodeId) -> TResult<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(0x5eed);
    let w = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let w = g.input(w);
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

type OpBuild = fn(&mut Graph<'_, f64>) -> TResult<NodeId>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: &'static [(&'static str, [usize; 2])],
    pub draw: Draw,
    pub build: OpBuild,
}

fn a(g: &mut Graph<'_, f64>) -> NodeId {
    g.param("a").unwrap()
}

fn b(g: &mut Graph<'_, f64>) -> NodeId {
    g.param("b").unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    const AB: &[(&str, [usize; 2])] = &[("a", [3, 4]), ("b", [3, 4])];
    const A: &[(&str, [usize; 2])] = &[("a", [3, 4])];
    const ROW: &[(&str, [usize; 2])] = &[("a", [3, 4]), ("b", [1, 4])];
    vec![
        OpCase { name: "add", inputs: AB, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.add(x, y)?; contract(g, o) } },
        OpCase { name: "sub", inputs: AB, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.sub(x, y)?; contract(g, o) } },
        OpCase { name: "mul", inputs: AB, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.mul(x, y)?; contract(g, o) } },
        OpCase { name: "matmul", inputs: &[("a", [3, 4]), ("b", [4, 2])], draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.matmul(x, y)?; contract(g, o) } },
        OpCase { name: "matmul_t", inputs: &[("a", [3, 4]), ("b", [2, 4])], draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.matmul_t(x, y)?; contract(g, o) } },
        OpCase { name: "add_row", inputs: ROW, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.add_row(x, y)?; contract(g, o) } },
        OpCase { name: "mul_row", inputs: ROW, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.mul_row(x, y)?; contract(g, o) } },
        OpCase { name: "scale", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.scale(x, -1.7)?; contract(g, o) } },
        OpCase { name: "add_scalar", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.add_scalar(x, 0.3)?; let o = g.mul(o, o)?; contract(g, o) } },
        OpCase { name: "tanh", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.tanh(x)?; contract(g, o) } },
        OpCase { name: "relu", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.relu(x)?; contract(g, o) } },
        OpCase { name: "gelu", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.gelu(x)?; contract(g, o) } },
        OpCase { name: "abs", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.abs(x)?; contract(g, o) } },
        OpCase { name: "log", inputs: A, draw: Draw::Positive, build: |g| { let x = a(g); let o = g.log(x)?; contract(g, o) } },
        OpCase { name: "sqrt", inputs: A, draw: Draw::Positive, build: |g| { let x = a(g); let o = g.sqrt(x)?; contract(g, o) } },
        OpCase { name: "clamp", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.clamp(x, -0.05, 0.05)?; let o = g.add(o, x)?; contract(g, o) } },
        OpCase { name: "softmax", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.softmax(x)?; contract(g, o) } },
        OpCase { name: "layernorm", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.layernorm(x)?; contract(g, o) } },
        OpCase { name: "l2_normalize", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.l2_normalize(x)?; contract(g, o) } },
        OpCase { name: "gather", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.gather(x, &[2, 0, 2, 1])?; contract(g, o) } },
        OpCase { name: "concat0", inputs: ROW, draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.concat(&[x, y, x], 0)?; contract(g, o) } },
        OpCase { name: "concat1", inputs: &[("a", [3, 4]), ("b", [3, 2])], draw: Draw::AwayFromZero, build: |g| { let (x, y) = (a(g), b(g)); let o = g.concat(&[y, x], 1)?; contract(g, o) } },
        OpCase { name: "slice", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.slice(x, 1, 1, 3)?; let p = g.slice(x, 0, 1, 2)?; let o = contract(g, o)?; let p = contract(g, p)?; g.add(o, p) } },
        OpCase { name: "sum_all", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.mul(x, x)?; g.sum_all(o) } },
        OpCase { name: "mean_all", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.tanh(x)?; g.mean_all(o) } },
        OpCase { name: "row_sum", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.row_sum(x)?; contract(g, o) } },
        OpCase { name: "col_mean", inputs: A, draw: Draw::AwayFromZero, build: |g| { let x = a(g); let o = g.col_mean(x)?; contract(g, o) } },
    ]
}

/// Checks one op at `draws` random input points, every coordinate of each.
pub fn check_op(case: &OpCase, draws: usize, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut total = GradCheckReport { points: 0, max_rel_err: 0.0, worst: None };
    for i in 0..draws {
        let mut ps = ParamSet::new();
        let mut coords = 0;
        for (name, [rows, cols]) in case.inputs {
            let data = (0..rows * cols).map(|_| draw(&mut r, case.draw)).collect();
            ps.insert(*name, Tensor::new(vec![*rows, *cols], data).unwrap()).unwrap();
            coords += rows * cols;
        }
        let rep = check_params(&ps, case.build, coords, DEFAULT_STEP, seed ^ i as u64).unwrap();
        // Each draw is one random point of the input space.
        total.merge(GradCheckReport { points: 1, ..rep });
    }
    total
}

pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 40,
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        output_dim: 4,
        max_len_query: 6,
        max_len_doc: 6,
        shared_weights: false,
    }
}

/// The whole training objective: two towers, attention pooling over
/// document entities, two triplet variants and cross-entropy.
pub struct FullGraph {
    pub model: ModelParams<f64>,
    pub queries: Vec<Vec<u32>>,
    pub entities: Vec<Vec<Vec<u32>>>,
    pub labels: Vec<f64>,
}

impl FullGraph {
    pub fn new(seed: u64) -> Self {
        let cfg = gradcheck_config();
        let mut model = init_params(&cfg, seed).unwrap().cast::<f64>();
        init_attention(&mut model, 5, seed + 1).unwrap();
        let mut r = rng(seed + 2);
        let normal = Normal::new(0.0, 0.4).unwrap();
        let names: Vec<String> = model.params.names().to_vec();
        for name in names {
            let t = model.params.get_mut(&name).unwrap();
            let gain = name.ends_with(".g");
            for v in t.data_mut() {
                *v = normal.sample(&mut r) + if gain { 1.0 } else { 0.0 };
            }
        }
        let seq = |r: &mut ChaCha8Rng| (0..r.random_range(2..=6)).map(|_| r.random_range(0..40)).collect::<Vec<u32>>();
        let queries = (0..3).map(|_| seq(&mut r)).collect();
        let entities = (0..3).map(|_| (0..3).map(|_| seq(&mut r)).collect()).collect();
        Self { model, queries, entities, labels: vec![1.0, 0.0, 1.0] }
    }

    pub fn build(&self, g: &mut Graph<'_, f64>) -> TResult<NodeId> {
        let cfg = &self.model.config;
        let mut qs = Vec::new();
        let mut ds = Vec::new();
        for (q, ents) in self.queries.iter().zip(&self.entities) {
            let qn = encode_graph(g, cfg, self.model.layout(Side::Query), q).unwrap();
            let en: Vec<NodeId> = ents
                .iter()
                .map(|e| encode_graph(g, cfg, self.model.layout(Side::Document), e).unwrap())
                .collect();
            let en = g.concat(&en, 0)?;
            ds.push(attention_pool_graph(g, qn, en).unwrap());
            qs.push(qn);
        }
        let q = stack_rows(g, &qs).unwrap();
        let d = stack_rows(g, &ds).unwrap();
        let semi = TripletConfig { margin: 0.5, metric: Metric::L1, strategy: Strategy::SemiHard };
        let all = TripletConfig { margin: 1.5, metric: Metric::Cosine, strategy: Strategy::BatchAll };
        let (t1, _) = triplet_graph(g, q, d, &semi, &mut rng(1)).unwrap();
        let (t2, _) = triplet_graph(g, q, d, &all, &mut rng(2)).unwrap();
        let ce = cross_entropy_graph(g, q, d, &self.labels).unwrap();
        let s = g.add(t1, t2)?;
        g.add(s, ce)
    }

    pub fn check(&self, points: usize, seed: u64) -> GradCheckReport {
        check_params(&self.model.params, |g| self.build(g), points, DEFAULT_STEP, seed).unwrap()
    }
}

pub fn ops_with_full(draws: usize, full_points: usize, seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut out: Vec<(String, GradCheckReport)> =
        op_cases().iter().map(|c| (c.name.to_string(), check_op(c, draws, seed))).collect();
    let mut full = GradCheckReport { points: 0, max_rel_err: 0.0, worst: None };
    for i in 0..4 {
        full.merge(FullGraph::new(seed + 10 * i).check(full_points.div_ceil(4), seed + i));
    }
    out.push(("encoder+attention+losses".into(), full));
    out
}

// --------------------------------------------------------------- fixtures

pub fn small_spec() -> mtenc::data::synth::SynthSpec {
    mtenc::data::synth::SynthSpec {
        num_topics: 12,
        num_docs: 60,
        heldout_queries: 10,
        click_judged_queries: 10,
        nli_pairs: 40,
        heldout_pairs: 20,
        noisy_docs: 20,
        noisy_judged_queries: 5,
        noisy_candidates: 6,
        ..Default::default()
    }
}

pub fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        output_dim: 8,
        max_len_query: 16,
        max_len_doc: 40,
        shared_weights: true,
    }
}

// ------------------------------------------------------- oracle checks

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// DCG, NDCG, AP/mAP and ROC against the naive versions above.
pub fn check_metric_oracles(instances: usize, seed: u64) -> Result<(), String> {
    use mtenc::eval::metrics;
    let mut r = rng(seed);
    for i in 0..instances {
        let n = r.random_range(1..=8);
        let pool: Vec<f64> = (0..n).map(|_| r.random_range(0..=3) as f64).collect();
        let mut ranked = pool.clone();
        for j in (1..n).rev() {
            ranked.swap(j, r.random_range(0..=j));
        }
        for k in 1..=n + 1 {
            let (d, o) = (metrics::dcg_at_k(&ranked, k), dcg(&ranked, k));
            ensure((d - o).abs() < 1e-9, || format!("dcg instance {i} k {k}: {d} vs {o}"))?;
            let (d, o) = (metrics::ndcg_at_k(&ranked, &pool, k), ndcg(&ranked, &pool, k));
            ensure((d - o).abs() < 1e-9, || format!("ndcg instance {i} k {k}: {d} vs {o}"))?;
        }
        let lists: Vec<(Vec<bool>, usize)> = (0..r.random_range(1..6))
            .map(|_| {
                let rel: Vec<bool> = (0..r.random_range(0..10)).map(|_| r.random_bool(0.3)).collect();
                let total = rel.iter().filter(|x| **x).count() + r.random_range(0..2);
                (rel, total)
            })
            .collect();
        for (rel, total) in &lists {
            let (a, o) = (metrics::average_precision(rel, *total), average_precision(rel, *total));
            ensure(a.zip(o).is_none_or(|(a, o)| (a - o).abs() < 1e-9) && a.is_some() == o.is_some(), || {
                format!("ap instance {i}: {a:?} vs {o:?}")
            })?;
        }
        let (m, o) = (metrics::mean_average_precision(&lists).0, mean_ap(&lists));
        ensure((m - o).abs() < 1e-9, || format!("map instance {i}: {m} vs {o}"))?;
        let len = r.random_range(2..40);
        let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..6) as f64 / 2.0).collect();
        let mut labels: Vec<bool> = (0..len).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let (a, o) = (metrics::roc_auc(&scores, &labels).unwrap(), roc_auc(&scores, &labels));
        ensure((a - o).abs() < 1e-9, || format!("roc instance {i}: {a} vs {o}"))?;
    }
    Ok(())
}

/// Three documents over token ids, scored by hand with k1 = 1.2, b = 0.75.
/// avgdl = 3; idf(4) = idf(7) = idf(2) = ln(2.5/1.5); idf(1) floors to 0.
pub fn check_bm25_hand() -> Result<(), String> {
    use mtenc::eval::{bm25_score, CorpusStats};
    let docs: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![1, 1, 4, 5], vec![6, 7]];
    let stats = CorpusStats::build(&docs).map_err(|e| e.to_string())?;
    let cases: [(&[u32], usize, f64); 6] = [
        (&[1, 4], 1, 0.4495265489140719),
        (&[1, 4], 0, 0.0),
        (&[1, 4], 2, 0.0),
        (&[7], 2, 0.5914823012027262),
        (&[2, 7], 0, 0.5108256237659907),
        (&[2, 2, 7], 0, 0.5108256237659907),
    ];
    for (q, d, want) in cases {
        let got = bm25_score(q, &docs[d], &stats);
        ensure((got - want).abs() < 1e-12, || format!("bm25 {q:?} on doc {d}: {got} vs {want}"))?;
    }
    Ok(())
}

pub fn random_word(r: &mut ChaCha8Rng) -> String {
    let alphabet: Vec<char> = "abcé蜂ش🐝".chars().collect();
    (0..r.random_range(0..9)).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect()
}

pub fn check_levenshtein(pairs: usize, seed: u64) -> Result<(), String> {
    use mtenc::eval::levenshtein;
    ensure(levenshtein("kitten", "sitting") == 3, || "kitten/sitting".into())?;
    ensure(levenshtein("", "abc") == 3 && levenshtein("蜂🐝", "") == 2, || "empty side".into())?;
    let mut r = rng(seed);
    for _ in 0..pairs {
        let (a, b, c) = (random_word(&mut r), random_word(&mut r), random_word(&mut r));
        let ab = levenshtein(&a, &b);
        ensure(levenshtein(&a, &a) == 0, || format!("identity {a}"))?;
        ensure(ab == levenshtein(&b, &a), || format!("symmetry {a} {b}"))?;
        ensure((ab == 0) == (a == b), || format!("zero only for equal {a} {b}"))?;
        ensure(levenshtein(&a, &c) <= ab + levenshtein(&b, &c), || format!("triangle {a} {b} {c}"))?;
    }
    Ok(())
}

/// Mining selections and both losses against the exhaustive oracle.
pub fn check_mining(batches: usize, seed: u64) -> Result<(), String> {
    use mtenc::losses::{cross_entropy_loss, pairwise_distances, triplet_loss as lib_triplet};
    let metrics = [Metric::L1, Metric::L2, Metric::Cosine];
    let strategies = [Strategy::BatchAll, Strategy::Hard, Strategy::SemiHard, Strategy::Random];
    let mut r = rng(seed);
    for n in 0..batches {
        let b = r.random_range(2..=16);
        let m = r.random_range(1..=8);
        let (q, d) = (unit_rows(&mut r, b, m), unit_rows(&mut r, b, m));
        let metric = metrics[n % 3];
        let margin = r.random_range(0.05..1.0);
        let dm = dist_matrix(&q, &d, metric);
        let got = pairwise_distances(&to_tensor(&q), &to_tensor(&d), metric);
        for j in 0..b {
            for k in 0..b {
                ensure((got.get(j, k) - dm[j][k]).abs() < 1e-12, || format!("batch {n}: distance ({j},{k})"))?;
            }
        }
        for strategy in strategies {
            let cfg = TripletConfig { margin, metric, strategy };
            let mine_seed = seed ^ (n as u64) << 8;
            let (loss, stats) = lib_triplet(&to_tensor(&q), &to_tensor(&d), &cfg, &mut rng(mine_seed)).map_err(|e| e.to_string())?;
            let mut orng = rng(mine_seed);
            let want: Vec<Negative> = (0..b).map(|j| mine(strategy, j, &dm, margin, &mut orng)).collect();
            ensure(stats.negatives == want, || format!("batch {n} {strategy:?}: {:?} vs {want:?}", stats.negatives))?;
            let o = triplet_loss(&q, &d, &cfg, &want);
            ensure((loss - o).abs() < 1e-9, || format!("batch {n} {strategy:?}: loss {loss} vs {o}"))?;
        }
        let labels: Vec<f64> = (0..b).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let ce = cross_entropy_loss(&to_tensor(&q), &to_tensor(&d), &labels).map_err(|e| e.to_string())?;
        let o = cross_entropy(&q, &d, &labels);
        ensure((ce - o).abs() < 1e-9, || format!("batch {n}: cross-entropy {ce} vs {o}"))?;
    }
    Ok(())
}

/// top_k against a full sort for k in {1, 5, 10}, plus a bit-exact
/// save/load roundtrip.
pub fn check_topk(docs: usize, queries: usize, seed: u64) -> Result<(), String> {
    use mtenc::encoder::Embedding;
    use mtenc::index::{load_index, save_index, top_k, EmbeddingIndex};
    let mut r = rng(seed);
    let dim = 32;
    let rand_emb = |r: &mut ChaCha8Rng| {
        // Coarse values make exact score ties common.
        Embedding::normalized((0..dim).map(|_| r.random_range(-2..=2) as f32).collect())
    };
    let rows: Vec<Embedding> = (0..docs).map(|_| rand_emb(&mut r)).collect();
    let ids: Vec<String> = (0..docs).map(|i| format!("d{:04}", (i * 7919) % docs)).collect();
    let idx = EmbeddingIndex::from_rows(ids.clone(), &rows, "h").map_err(|e| e.to_string())?;
    for qn in 0..queries {
        let q = rand_emb(&mut r);
        let mut full: Vec<(f32, &str)> = rows
            .iter()
            .zip(&ids)
            .map(|(row, id)| (mtenc::encoder::similarity(&q, row).unwrap(), id.as_str()))
            .collect();
        full.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for k in [1, 5, 10] {
            let hits = top_k(&idx, &q, k).map_err(|e| e.to_string())?;
            let got: Vec<(f32, &str)> = hits.iter().map(|h| (h.score, h.id.as_str())).collect();
            ensure(got == full[..k.min(docs)], || format!("query {qn} k {k}: {got:?} vs {:?}", &full[..k]))?;
        }
    }
    let mut buf = Vec::new();
    save_index(&idx, &mut buf).map_err(|e| e.to_string())?;
    let back = load_index(&buf[..]).map_err(|e| e.to_string())?;
    let bits = |m: &[f32]| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(back.ids == idx.ids && bits(&back.matrix) == bits(&idx.matrix) && back.checkpoint_hash == idx.checkpoint_hash, || {
        "index roundtrip changed the contents".into()
    })?;
    let mut again = Vec::new();
    save_index(&back, &mut again).map_err(|e| e.to_string())?;
    ensure(again == buf, || "re-saved index differs byte-wise".into())
}

// ---------------------------------------------------------------- CLI

pub fn mtenc_cli(out_dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mtenc"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn cli_ok(out_dir: &std::path::Path, args: &[&str]) -> Result<String, String> {
    let o = mtenc_cli(out_dir, args);
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("mtenc {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

/// Small synthetic data, tokenizer and model written into `dir`. Returns the
/// model path.
pub fn cli_pipeline(dir: &std::path::Path) -> Result<std::path::PathBuf, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let spec = dir.join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&small_spec()).unwrap()).map_err(|e| e.to_string())?;
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    cli_ok(dir, &["gen-synth", "--seed", "3", "--spec", &p("spec.json"), "--out", "synth"])?;
    cli_ok(dir, &["train-tokenizer", "--corpus", &p("synth/texts.txt"), "--vocab-size", "320", "--out", "vocab.txt"])?;
    let semantic = format!("path={},schema=click,loss=triplet,batch_size=8", p("synth/semantic.tsv"));
    let nli = format!("path={},schema=nli,loss=cross_entropy,batch_size=8", p("synth/nli.tsv"));
    cli_ok(
        dir,
        &[
            "train", "--vocab", &p("vocab.txt"), "--task", &semantic, "--task", &nli, "--epochs", "1", "--max-iterations", "6",
            "--layers", "1", "--model-dim", "16", "--heads", "2", "--ffn-dim", "32", "--output-dim", "8", "--max-len-query", "16",
            "--max-len-doc", "40", "--out", "model.ckpt", "--emit-loss-curve", "curve.csv", "--seed", "5",
        ],
    )?;
    Ok(dir.join("model.ckpt"))
}

/// Replays every manifest under `a` into the fresh directory `b` and
/// requires byte-identical outputs.
pub fn check_reruns(a: &std::path::Path, b: &std::path::Path) -> Result<usize, String> {
    let mut manifests = Vec::new();
    let mut stack = vec![a.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = e.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with("manifest.json") {
                manifests.push(path);
            }
        }
    }
    manifests.sort();
    for m in &manifests {
        let text = std::fs::read_to_string(m).map_err(|e| e.to_string())?;
        let parsed: mtenc::cli::Manifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        cli_ok(b, &["rerun", "--manifest", &m.to_string_lossy()])?;
        for rel in parsed.outputs.keys() {
            let (x, y) = (std::fs::read(a.join(rel)), std::fs::read(b.join(rel)));
            match (x, y) {
                (Ok(x), Ok(y)) if x == y => {}
                _ => return Err(format!("{rel} differs after replaying {}", m.display())),
            }
        }
    }
    Ok(manifests.len())
}
