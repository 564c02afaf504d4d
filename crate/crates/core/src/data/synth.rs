//! Seeded latent-topic generator for desk-scale experiments.
//!
//! Every document carries a unique signature of `topics_per_item` topics.
//! Each topic owns two disjoint pools of pseudo-words: one used on the
//! document side, one on the query side. Two pair styles follow:
//!
//! * click-style: the query reuses the document's own title words, so every
//!   positive shares surface tokens with its document;
//! * semantic-style: the query uses the topic's query-side synonyms, so a
//!   positive shares topics but no words with its document.
//!
//! Judged sets grade a document 2 when its signature equals the query's and
//! 1 when it shares all but one topic. The noisy-URL fixture gives each
//! document a pure-noise url entity.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Label, PairExample, Result};
use crate::eval::{DocEntry, JudgedQuery, JudgedSet, Judgment, PairItem, PairSet};
use crate::pooling::{DocumentRecord, Entity, EntityKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub tag: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_topics: usize,
    pub synonyms_per_topic: usize,
    pub topics_per_item: usize,
    pub num_docs: usize,
    pub filler_words: usize,
    pub filler_per_doc: usize,
    pub click_queries_per_doc: usize,
    pub semantic_queries_per_doc: usize,
    pub heldout_queries: usize,
    pub click_judged_queries: usize,
    /// Balanced pair task; exactly half positive.
    pub nli_pairs: usize,
    /// Balanced held-out pair set for ROC.
    pub heldout_pairs: usize,
    pub noisy_docs: usize,
    pub noisy_queries_per_doc: usize,
    pub noisy_judged_queries: usize,
    pub noisy_candidates: usize,
    pub languages: Vec<LanguageShare>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_topics: 32,
            synonyms_per_topic: 3,
            topics_per_item: 3,
            num_docs: 1000,
            filler_words: 30,
            filler_per_doc: 2,
            click_queries_per_doc: 1,
            semantic_queries_per_doc: 2,
            heldout_queries: 200,
            click_judged_queries: 200,
            nli_pairs: 2000,
            heldout_pairs: 400,
            noisy_docs: 300,
            noisy_queries_per_doc: 3,
            noisy_judged_queries: 100,
            noisy_candidates: 20,
            languages: [("en", 0.4), ("de", 0.2), ("fr", 0.2), ("ru", 0.1), ("el", 0.1)]
                .iter()
                .map(|(t, w)| LanguageShare {
                    tag: t.to_string(),
                    weight: *w,
                })
                .collect(),
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(format!("inconsistent synthetic spec: {m}")));
        if self.num_topics == 0 || self.synonyms_per_topic == 0 || self.topics_per_item == 0 {
            return bad("topic counts must be positive".into());
        }
        if self.topics_per_item > self.num_topics {
            return bad(format!("{} topics per item but only {} topics", self.topics_per_item, self.num_topics));
        }
        let combos = binomial(self.num_topics, self.topics_per_item);
        if (self.num_docs + self.noisy_docs) as f64 > combos {
            return bad(format!("{} documents need unique signatures but only {combos} exist", self.num_docs + self.noisy_docs));
        }
        if self.num_docs < 2 {
            return bad("need at least 2 documents".into());
        }
        if self.heldout_queries > self.num_docs || self.click_judged_queries > self.num_docs {
            return bad("more judged queries than documents".into());
        }
        if self.noisy_judged_queries > self.noisy_docs {
            return bad("more noisy judged queries than noisy documents".into());
        }
        if self.noisy_docs > 0 && (self.noisy_candidates < 2 || self.noisy_candidates > self.noisy_docs) {
            return bad("noisy_candidates must lie in 2..=noisy_docs".into());
        }
        if self.nli_pairs % 2 != 0 || self.heldout_pairs % 2 != 0 {
            return bad("balanced pair counts must be even".into());
        }
        if self.filler_per_doc > 0 && self.filler_words == 0 {
            return bad("filler_per_doc > 0 needs filler words".into());
        }
        if self.languages.is_empty() || self.languages.iter().any(|l| !(l.weight > 0.0)) {
            return bad("languages need positive weights".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub doc_words: Vec<String>,
    pub query_words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyFixture {
    pub docs: Vec<DocEntry>,
    pub signatures: Vec<Vec<usize>>,
    pub train: Vec<PairExample>,
    pub judged: JudgedSet,
    /// Position of the noise entity inside every document.
    pub noise_entity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub seed: u64,
    pub topics: Vec<Topic>,
    pub filler: Vec<String>,
    pub corpus: Vec<DocEntry>,
    pub signatures: Vec<Vec<usize>>,
    pub click: Vec<PairExample>,
    pub semantic: Vec<PairExample>,
    pub nli: Vec<PairExample>,
    pub semantic_judged: JudgedSet,
    pub click_judged: JudgedSet,
    pub noisy: NoisyFixture,
}

impl SynthData {
    /// Every text the generator produced, for tokenizer training.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        let docs = self.corpus.iter().chain(&self.noisy.docs);
        for d in docs {
            out.extend(d.doc.entities.iter().map(|e| e.text.clone()));
        }
        for e in self.click.iter().chain(&self.semantic).chain(&self.nli).chain(&self.noisy.train) {
            out.push(e.query.clone());
        }
        out
    }
}

/// Gain of a document whose topics equal the query's.
pub const EXACT_GAIN: f64 = 2.0;
/// Gain of a document sharing all but one topic.
pub const PARTIAL_GAIN: f64 = 1.0;

const SCRIPTS: [(&str, &str); 3] = [
    ("bcdfghjklmnprstvz", "aeiou"),
    ("бвгджзклмнпрстфх", "аеиоуя"),
    ("βγδζθκλμνξπρστφχ", "αεηιοω"),
];

struct WordMaker {
    seen: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let script = if rng.random_bool(0.6) { 0 } else { rng.random_range(1..SCRIPTS.len()) };
            let (cons, vows) = SCRIPTS[script];
            let cons: Vec<char> = cons.chars().collect();
            let vows: Vec<char> = vows.chars().collect();
            let syl = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syl {
                w.push(*cons.choose(rng).expect("non-empty"));
                w.push(*vows.choose(rng).expect("non-empty"));
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn pick_language(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> String {
    let total: f64 = spec.languages.iter().map(|l| l.weight).sum();
    let mut x = rng.random::<f64>() * total;
    for l in &spec.languages {
        if x < l.weight {
            return l.tag.clone();
        }
        x -= l.weight;
    }
    spec.languages.last().expect("validated").tag.clone()
}

fn shuffled_join(mut words: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    words.shuffle(rng);
    words.join(" ")
}

struct Gen<'a> {
    spec: &'a SynthSpec,
    topics: Vec<Topic>,
    filler: Vec<String>,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn signature(&mut self, used: &mut HashSet<Vec<usize>>) -> Vec<usize> {
        loop {
            let mut ids: Vec<usize> = (0..self.spec.num_topics).collect();
            ids.shuffle(&mut self.rng);
            let mut sig: Vec<usize> = ids[..self.spec.topics_per_item].to_vec();
            sig.sort_unstable();
            if used.insert(sig.clone()) {
                return sig;
            }
        }
    }

    fn doc_word(&mut self, t: usize) -> String {
        self.topics[t].doc_words.choose(&mut self.rng).expect("non-empty").clone()
    }

    fn title(&mut self, sig: &[usize]) -> String {
        let words: Vec<String> = sig.iter().map(|&t| self.doc_word(t)).collect();
        shuffled_join(words, &mut self.rng)
    }

    fn document(&mut self, sig: &[usize], noisy_url: bool) -> DocumentRecord {
        let title = self.title(sig);
        let mut desc: Vec<String> = sig.iter().map(|&t| self.doc_word(t)).collect();
        for _ in 0..self.spec.filler_per_doc {
            desc.push(self.filler.choose(&mut self.rng).expect("validated").clone());
        }
        let desc = shuffled_join(desc, &mut self.rng);
        let url = if noisy_url {
            self.noise()
        } else {
            let site = self.filler.choose(&mut self.rng).cloned().unwrap_or_else(|| "site".into());
            format!("https://{site}.example/{}", title.replace(' ', "-"))
        };
        let lang = pick_language(self.spec, &mut self.rng);
        DocumentRecord::new(
            vec![
                Entity::new(EntityKind::Title, title),
                Entity::new(EntityKind::Description, desc),
                Entity::new(EntityKind::Url, url),
            ],
            lang,
        )
    }

    fn noise(&mut self) -> String {
        const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_=?&%";
        let len = self.rng.random_range(16..=28);
        let tail: String = (0..len).map(|_| *CHARS.choose(&mut self.rng).expect("non-empty") as char).collect();
        format!("https://x.example/watch?v={tail}")
    }

    /// Query-side words for `sig`; `avoid` holds word sets already used for
    /// the same document.
    fn semantic_query(&mut self, sig: &[usize], avoid: &mut BTreeSet<Vec<String>>) -> String {
        let mut last = None;
        for _ in 0..32 {
            let words: Vec<String> = sig
                .iter()
                .map(|&t| self.topics[t].query_words.choose(&mut self.rng).expect("non-empty").clone())
                .collect();
            let mut key = words.clone();
            key.sort();
            if avoid.insert(key) {
                return shuffled_join(words, &mut self.rng);
            }
            last = Some(words);
        }
        // Every variant of a small vocabulary is taken; reuse one.
        shuffled_join(last.expect("loop ran"), &mut self.rng)
    }

    fn click_query(&mut self, doc: &DocumentRecord) -> String {
        let words: Vec<String> = doc.entities[0].text.split(' ').map(String::from).collect();
        shuffled_join(words, &mut self.rng)
    }

    fn judgments(sig: &[usize], sigs: &[Vec<usize>], ids: &[String]) -> Vec<Judgment> {
        let k = sig.len();
        let mut out = Vec::new();
        for (other, id) in sigs.iter().zip(ids) {
            let shared = other.iter().filter(|t| sig.contains(t)).count();
            let gain = if shared == k {
                EXACT_GAIN
            } else if shared + 1 == k && k > 1 {
                PARTIAL_GAIN
            } else {
                continue;
            };
            out.push(Judgment { doc: id.clone(), gain });
        }
        out
    }
}

fn title_only(doc: &DocumentRecord) -> DocumentRecord {
    DocumentRecord::new(vec![doc.entities[0].clone()], doc.language.clone())
}

fn pair(query: String, doc: DocumentRecord, label: Label, task: &str) -> PairExample {
    PairExample {
        query,
        language: doc.language.clone(),
        doc,
        label,
        task: task.to_string(),
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maker = WordMaker { seen: HashSet::new() };
    let topics: Vec<Topic> = (0..spec.num_topics)
        .map(|_| Topic {
            doc_words: (0..spec.synonyms_per_topic).map(|_| maker.make(&mut rng)).collect(),
            query_words: (0..spec.synonyms_per_topic).map(|_| maker.make(&mut rng)).collect(),
        })
        .collect();
    let filler: Vec<String> = (0..spec.filler_words).map(|_| maker.make(&mut rng)).collect();
    let mut g = Gen {
        spec,
        topics,
        filler,
        rng,
    };

    let mut used = HashSet::new();
    let signatures: Vec<Vec<usize>> = (0..spec.num_docs).map(|_| g.signature(&mut used)).collect();
    let ids: Vec<String> = (0..spec.num_docs).map(|i| format!("d{i:05}")).collect();
    let corpus: Vec<DocEntry> = signatures
        .iter()
        .zip(&ids)
        .map(|(s, id)| DocEntry {
            id: id.clone(),
            doc: g.document(s, false),
        })
        .collect();

    // Held-out query variants are reserved first so training never sees them.
    let mut variants: Vec<BTreeSet<Vec<String>>> = vec![BTreeSet::new(); spec.num_docs];
    let mut order: Vec<usize> = (0..spec.num_docs).collect();
    order.shuffle(&mut g.rng);
    let heldout_docs: Vec<usize> = order[..spec.heldout_queries].to_vec();
    let heldout_texts: Vec<String> = heldout_docs
        .iter()
        .map(|&i| g.semantic_query(&signatures[i], &mut variants[i]))
        .collect();

    let mut click = Vec::new();
    let mut semantic = Vec::new();
    for i in 0..spec.num_docs {
        for _ in 0..spec.click_queries_per_doc {
            let q = g.click_query(&corpus[i].doc);
            click.push(pair(q, corpus[i].doc.clone(), Label::Positive, "click"));
        }
        for _ in 0..spec.semantic_queries_per_doc {
            let q = g.semantic_query(&signatures[i], &mut variants[i]);
            semantic.push(pair(q, corpus[i].doc.clone(), Label::Positive, "semantic"));
        }
    }

    let variant_key = |t: &str| {
        let mut k: Vec<String> = t.split(' ').map(String::from).collect();
        k.sort();
        k
    };
    let other_doc = |g: &mut Gen, i: usize| {
        let j = g.rng.random_range(0..spec.num_docs - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };

    // Balanced pairs: even positions positive, odd ones a different document.
    let mut nli = Vec::with_capacity(spec.nli_pairs);
    for p in 0..spec.nli_pairs {
        let i = g.rng.random_range(0..spec.num_docs);
        let mut banned: BTreeSet<Vec<String>> = heldout_docs
            .iter()
            .zip(&heldout_texts)
            .filter(|(d, _)| **d == i)
            .map(|(_, t)| variant_key(t))
            .collect();
        let q = g.semantic_query(&signatures[i], &mut banned);
        let (d, label) = if p % 2 == 0 { (i, Label::Positive) } else { (other_doc(&mut g, i), Label::Negative) };
        nli.push(pair(q, title_only(&corpus[d].doc), label, "nli"));
    }
    let mut heldout_pairs = Vec::with_capacity(spec.heldout_pairs);
    if !heldout_docs.is_empty() {
        for p in 0..spec.heldout_pairs {
            let h = (p / 2) % heldout_docs.len();
            let i = heldout_docs[h];
            let (d, label) = if p % 2 == 0 { (i, Label::Positive) } else { (other_doc(&mut g, i), Label::Negative) };
            heldout_pairs.push(PairItem {
                query: heldout_texts[h].clone(),
                doc: title_only(&corpus[d].doc),
                label,
            });
        }
    }

    let semantic_judged = JudgedSet {
        docs: corpus.clone(),
        queries: heldout_docs
            .iter()
            .zip(&heldout_texts)
            .enumerate()
            .map(|(n, (&i, t))| JudgedQuery {
                id: format!("hq{n:04}"),
                text: t.clone(),
                judgments: Gen::judgments(&signatures[i], &signatures, &ids),
                candidates: None,
            })
            .collect(),
        pair_sets: vec![PairSet {
            name: "semantic".into(),
            pairs: heldout_pairs,
        }],
        relevance_threshold: EXACT_GAIN,
    };

    let mut corder: Vec<usize> = (0..spec.num_docs).collect();
    corder.shuffle(&mut g.rng);
    let click_judged = JudgedSet {
        docs: corpus.clone(),
        queries: corder[..spec.click_judged_queries]
            .iter()
            .enumerate()
            .map(|(n, &i)| JudgedQuery {
                id: format!("cq{n:04}"),
                text: g.click_query(&corpus[i].doc),
                judgments: Gen::judgments(&signatures[i], &signatures, &ids),
                candidates: None,
            })
            .collect(),
        pair_sets: Vec::new(),
        relevance_threshold: EXACT_GAIN,
    };

    let noisy = noisy_fixture(&mut g, &mut used)?;

    Ok(SynthData {
        spec: spec.clone(),
        seed,
        topics: g.topics,
        filler: g.filler,
        corpus,
        signatures,
        click,
        semantic,
        nli,
        semantic_judged,
        click_judged,
        noisy,
    })
}

fn noisy_fixture(g: &mut Gen, used: &mut HashSet<Vec<usize>>) -> Result<NoisyFixture> {
    let spec = g.spec;
    let n = spec.noisy_docs;
    let sigs: Vec<Vec<usize>> = (0..n).map(|_| g.signature(used)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("n{i:05}")).collect();
    let docs: Vec<DocEntry> = sigs
        .iter()
        .zip(&ids)
        .map(|(s, id)| DocEntry {
            id: id.clone(),
            doc: g.document(s, true),
        })
        .collect();
    let mut variants: Vec<BTreeSet<Vec<String>>> = vec![BTreeSet::new(); n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut g.rng);
    let judged_docs: Vec<usize> = order[..spec.noisy_judged_queries].to_vec();
    let judged_texts: Vec<String> = judged_docs.iter().map(|&i| g.semantic_query(&sigs[i], &mut variants[i])).collect();
    let mut train = Vec::new();
    for i in 0..n {
        for _ in 0..spec.noisy_queries_per_doc {
            let q = g.semantic_query(&sigs[i], &mut variants[i]);
            train.push(pair(q, docs[i].doc.clone(), Label::Positive, "noisy"));
        }
    }
    let mut queries = Vec::new();
    for (qn, (&i, text)) in judged_docs.iter().zip(&judged_texts).enumerate() {
        // Candidates: the target, then the most topic-similar documents,
        // ties broken randomly, up to the candidate budget.
        let mut others: Vec<(usize, u64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let shared = sigs[j].iter().filter(|t| sigs[i].contains(t)).count();
                (usize::MAX - shared, g.rng.random::<u64>(), j)
            })
            .collect();
        others.sort_unstable();
        let mut cands: Vec<String> = vec![ids[i].clone()];
        cands.extend(others.iter().take(spec.noisy_candidates - 1).map(|(_, _, j)| ids[*j].clone()));
        cands.sort();
        queries.push(JudgedQuery {
            id: format!("nq{qn:04}"),
            text: text.clone(),
            judgments: Gen::judgments(&sigs[i], &sigs, &ids),
            candidates: Some(cands),
        });
    }
    Ok(NoisyFixture {
        judged: JudgedSet {
            docs: docs.clone(),
            queries,
            pair_sets: Vec::new(),
            relevance_threshold: EXACT_GAIN,
        },
        docs,
        signatures: sigs,
        train,
        noise_entity: 2,
    })
}
