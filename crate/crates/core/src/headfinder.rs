//! Synthetic retrieval datasets, mean normalized rank, and head selection.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::embeddings::{cosine, HeadSpec, Projection};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheLimits, EvictionPolicy};
use crate::model::{ForwardOptions, Model, TappedStates};
use crate::par;
use crate::pipeline::CompressivePass;
use crate::retrieval::smooth_mean;
use crate::tensor::dot;
use crate::tokenizer::{is_byte_special, TokenId, Tokenizer, SEP};

pub const KV_TEMPLATE: &str = "The value corresponding to the id {key} is {value}.";
pub const KV_QUESTION: &str = "What is the value corresponding to the id {key}?";

const LEXICON: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "it", "for", "on", "with", "as", "at", "by", "from", "that",
    "this", "which", "or", "be", "are", "an", "were", "had", "has", "have", "not", "but", "they", "their", "one",
    "all", "there", "been", "would", "its", "when", "more", "some", "time", "into", "other", "over", "after", "city",
    "river", "early", "later", "during", "small", "large", "first", "second", "years", "house", "music", "album",
    "season", "game", "team", "church", "road", "north", "south", "west", "east", "village", "station", "film", "song",
    "water", "garden", "market", "bridge", "winter", "summer", "history", "people", "school", "family", "world",
    "group", "local", "public", "common", "record", "field", "light", "stone", "bird", "island", "harbor", "valley",
    "forest", "county", "border", "castle", "tower", "line", "night", "morning", "evening", "under", "between",
    "across", "along", "near", "beyond",
];

/// Seeded word salad over a built-in lowercase lexicon, about `n_bytes` long.
pub fn synthetic_corpus(seed: u64, n_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 16);
    let mut in_sentence = 0;
    let mut sentence_len = rng.gen_range(6..16);
    while out.len() < n_bytes {
        out.push_str(LEXICON[rng.gen_range(0..LEXICON.len())]);
        in_sentence += 1;
        if in_sentence == sentence_len {
            out.push('.');
            in_sentence = 0;
            sentence_len = rng.gen_range(6..16);
        }
        out.push(' ');
    }
    out.truncate(n_bytes);
    out
}

/// One labelled stream: `context ++ [SEP] ++ question`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    /// Planted spans inside the context.
    pub gold: Vec<Range<usize>>,
    /// Starts at the separator and runs to the end of `tokens`.
    pub question: Range<usize>,
    pub answer: String,
}

impl Sample {
    pub fn context_len(&self) -> usize {
        self.question.start
    }

    pub fn gold_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tokens.len()];
        for r in &self.gold {
            mask[r.clone()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn gold_positions(&self) -> Vec<usize> {
        self.gold.iter().flat_map(Clone::clone).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Key-value pattern matching.
    Kv,
    /// Planted-document question answering.
    Qa,
    Niah,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Kv => "kv",
            DatasetKind::Qa => "qa",
            DatasetKind::Niah => "niah",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub kind: DatasetKind,
    pub template: String,
    pub seed: u64,
    pub target_len: usize,
    pub samples: Vec<Sample>,
}

/// A context excerpt of `len` corpus tokens starting at a seeded offset.
fn excerpt(corpus: &[TokenId], len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    if corpus.len() < len {
        return Err(Error::Data(format!(
            "corpus of {} tokens cannot fill {len} filler tokens",
            corpus.len()
        )));
    }
    let start = rng.gen_range(0..=corpus.len() - len);
    Ok(corpus[start..start + len].to_vec())
}

/// Token stream, planted spans and question span.
type Planted = (Vec<TokenId>, Vec<Range<usize>>, Range<usize>);

/// Insert `plants` into `filler` at the given filler offsets (ascending,
/// paired with `plants`) and append the question.
fn assemble(filler: &[TokenId], plants: &[(usize, Vec<TokenId>)], question: &[TokenId]) -> Planted {
    let mut tokens = Vec::new();
    let mut gold = Vec::new();
    let mut from = 0;
    for (at, plant) in plants {
        tokens.extend_from_slice(&filler[from..*at]);
        gold.push(tokens.len()..tokens.len() + plant.len());
        tokens.extend_from_slice(plant);
        from = *at;
    }
    tokens.extend_from_slice(&filler[from..]);
    let q_start = tokens.len();
    tokens.push(SEP);
    tokens.extend_from_slice(question);
    let q_end = tokens.len();
    (tokens, gold, q_start..q_end)
}

fn random_string(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Context of `target_len` tokens with `plants` at sorted seeded offsets.
fn plant_randomly(
    tok: &Tokenizer,
    corpus: &str,
    plants: Vec<Vec<TokenId>>,
    question: &[TokenId],
    target_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Planted> {
    let planted: usize = plants.iter().map(Vec::len).sum();
    let filler_len = target_len
        .checked_sub(planted)
        .ok_or_else(|| Error::Data(format!("{planted} planted tokens exceed target length {target_len}")))?;
    let filler = excerpt(&tok.encode(corpus)?, filler_len, rng)?;
    let mut offsets: Vec<usize> = (0..plants.len()).map(|_| rng.gen_range(0..=filler_len)).collect();
    offsets.sort_unstable();
    let plants: Vec<(usize, Vec<TokenId>)> = offsets.into_iter().zip(plants).collect();
    Ok(assemble(&filler, &plants, question))
}

/// Key-value retrieval: `n_pairs` template sentences with random 10-character
/// keys and values; the question asks for one of them and only that sentence
/// is gold.
pub fn kv_sample(tok: &Tokenizer, corpus: &str, n_pairs: usize, target_len: usize, seed: u64) -> Result<Sample> {
    if n_pairs == 0 {
        return Err(Error::Data("at least one key-value pair is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(String, String)> = (0..n_pairs)
        .map(|_| (random_string(&mut rng, 10), random_string(&mut rng, 10)))
        .collect();
    let asked = rng.gen_range(0..n_pairs);
    let plants = pairs
        .iter()
        .map(|(k, v)| tok.encode(&KV_TEMPLATE.replace("{key}", k).replace("{value}", v)))
        .collect::<Result<Vec<_>>>()?;
    let question = tok.encode(&KV_QUESTION.replace("{key}", &pairs[asked].0))?;
    let (tokens, gold, question) = plant_randomly(tok, corpus, plants, &question, target_len, &mut rng)?;
    // gold spans follow plant order, which sorting offsets preserved
    Ok(Sample {
        tokens,
        gold: vec![gold[asked].clone()],
        question,
        answer: pairs[asked].1.clone(),
    })
}

pub fn gen_kv_dataset(
    tok: &Tokenizer,
    corpus: &str,
    n_pairs: usize,
    target_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PlantedDataset> {
    let samples = (0..n_samples as u64)
        .map(|i| kv_sample(tok, corpus, n_pairs, target_len, seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    Ok(PlantedDataset {
        kind: DatasetKind::Kv,
        template: KV_TEMPLATE.into(),
        seed,
        target_len,
        samples,
    })
}

/// A needle sentence, the question that asks for it, and the payload an
/// answer must contain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Needle {
    pub text: String,
    pub question: String,
    pub payload: String,
}

impl Needle {
    pub fn classic() -> Self {
        Needle {
            text: " The best thing to do in San Francisco is eat a sandwich and sit in Dolores Park on a sunny day. "
                .into(),
            question: "What is the best thing to do in San Francisco?".into(),
            payload: "eat a sandwich and sit in Dolores Park".into(),
        }
    }

    /// A needle whose payload the probe model can copy by induction.
    pub fn probe() -> Self {
        Needle {
            text: "QX7=K9ZPMW".into(),
            question: "QX7=".into(),
            payload: "K9ZPMW".into(),
        }
    }
}

/// Needle inserted at `floor(depth/100 × filler_len)` of a context of
/// `target_len` tokens.
pub fn gen_niah(
    tok: &Tokenizer,
    corpus: &str,
    needle: &Needle,
    depth_percent: f64,
    target_len: usize,
    seed: u64,
) -> Result<Sample> {
    if !(0.0..=100.0).contains(&depth_percent) {
        return Err(Error::Data(format!("depth {depth_percent} outside 0..=100")));
    }
    let needle_tokens = tok.encode(&needle.text)?;
    let filler_len = target_len
        .checked_sub(needle_tokens.len())
        .ok_or_else(|| Error::Data(format!("needle longer than target length {target_len}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = excerpt(&tok.encode(corpus)?, filler_len, &mut rng)?;
    let at = (depth_percent / 100.0 * filler_len as f64).floor() as usize;
    let question = tok.encode(&needle.question)?;
    let (tokens, gold, question) = assemble(&filler, &[(at, needle_tokens)], &question);
    Ok(Sample {
        tokens,
        gold,
        question,
        answer: needle.payload.clone(),
    })
}

/// Documents to plant plus the question they answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaItem {
    pub docs: Vec<String>,
    pub question: String,
    pub answer: String,
}

impl QaItem {
    /// Two-hop item with seeded invented names.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let person = format!("Ser {}", random_string(&mut rng, 6));
        let city = format!("Port {}", random_string(&mut rng, 6));
        let country = format!("Land {}", random_string(&mut rng, 6));
        QaItem {
            docs: vec![
                format!(" {person} was born in the city of {city}. "),
                format!(" The city of {city} lies in the country of {country}. "),
            ],
            question: format!("In which country was {person} born?"),
            answer: country,
        }
    }

    /// Lines of `question \t answer \t doc \t doc ...`; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_tsv(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, line)| {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() < 3 {
                    return Err(Error::Data(format!(
                        "line {}: expected question, answer and at least one document",
                        i + 1
                    )));
                }
                Ok(QaItem {
                    question: fields[0].into(),
                    answer: fields[1].into(),
                    docs: fields[2..].iter().map(|d| d.to_string()).collect(),
                })
            })
            .collect()
    }
}

pub fn qa_sample(tok: &Tokenizer, corpus: &str, item: &QaItem, target_len: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = item.docs.iter().map(|d| tok.encode(d)).collect::<Result<Vec<_>>>()?;
    docs.shuffle(&mut rng);
    let question = tok.encode(&item.question)?;
    let (tokens, gold, question) = plant_randomly(tok, corpus, docs, &question, target_len, &mut rng)?;
    Ok(Sample {
        tokens,
        gold,
        question,
        answer: item.answer.clone(),
    })
}

/// Planted-QA samples cycling through `items` (synthetic ones when empty).
pub fn gen_qa_dataset(
    tok: &Tokenizer,
    corpus: &str,
    items: &[QaItem],
    target_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PlantedDataset> {
    let samples = (0..n_samples)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let item = match items {
                [] => QaItem::synthetic(s),
                _ => items[i % items.len()].clone(),
            };
            qa_sample(tok, corpus, &item, target_len, s)
        })
        .collect::<Result<_>>()?;
    Ok(PlantedDataset {
        kind: DatasetKind::Qa,
        template: "planted documents".into(),
        seed,
        target_len,
        samples,
    })
}

fn ranges_text(rs: &[Range<usize>]) -> String {
    rs.iter()
        .map(|r| format!("{}-{}", r.start, r.end))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_range(s: &str) -> Result<Range<usize>> {
    let bad = || Error::Data(format!("bad range {s:?}"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..b)
}

/// One line per sample: `tokens \t gold ranges \t question span \t answer`.
pub fn spill(dataset: &PlantedDataset) -> Result<String> {
    let mut out = String::new();
    for s in &dataset.samples {
        if !s.answer.is_ascii() || s.answer.contains(['\t', '\n', '\r']) {
            return Err(Error::Data(format!("answer {:?} cannot be spilled", s.answer)));
        }
        let tokens: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}-{}\t{}",
            tokens.join(","),
            ranges_text(&s.gold),
            s.question.start,
            s.question.end,
            s.answer
        );
    }
    Ok(out)
}

pub fn parse_spill(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.splitn(4, '\t').collect();
            let [tokens, gold, question, answer] = f.as_slice() else {
                return Err(Error::Data(format!("spill line has {} fields, expected 4", f.len())));
            };
            let tokens = tokens
                .split(',')
                .map(|t| t.parse().map_err(|_| Error::Data(format!("bad token {t:?}"))))
                .collect::<Result<Vec<TokenId>>>()?;
            let gold = gold
                .split(';')
                .filter(|g| !g.is_empty())
                .map(parse_range)
                .collect::<Result<Vec<_>>>()?;
            let question = parse_range(question)?;
            if question.end != tokens.len() || gold.iter().any(|g| g.end > question.start) {
                return Err(Error::Data("spans do not fit the token stream".into()));
            }
            Ok(Sample {
                tokens,
                gold,
                question,
                answer: answer.to_string(),
            })
        })
        .collect()
}

pub fn save_spill(dataset: &PlantedDataset, path: &Path) -> Result<()> {
    std::fs::write(path, spill(dataset)?).map_err(|e| Error::io(path, e))
}

/// Fractional ranks (1 = highest score); tied scores share their mean rank.
pub fn fractional_ranks(scores: &[f32]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    Ok(ranks)
}

/// Mean over gold tokens of rank / n.
pub fn mnr(scores: &[f32], gold_mask: &[bool]) -> Result<f64> {
    if scores.len() != gold_mask.len() {
        return Err(Error::Data(format!(
            "{} scores for a mask of {}",
            scores.len(),
            gold_mask.len()
        )));
    }
    let gold = gold_mask.iter().filter(|&&g| g).count();
    if gold == 0 {
        return Err(Error::Data("no gold tokens".into()));
    }
    let ranks = fractional_ranks(scores)?;
    // half-integer ranks sum exactly, so the result is order independent
    let total: f64 = ranks.iter().zip(gold_mask).filter(|(_, &g)| g).map(|(r, _)| r).sum();
    Ok(total / (scores.len() * gold) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub chunk_size: usize,
    pub cache_budget: usize,
    pub sink_len: usize,
    pub recent_len: usize,
    pub eviction: EvictionPolicy,
    pub observer_window: usize,
    pub pool_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chunk_size: 512,
            cache_budget: 512,
            sink_len: 16,
            recent_len: 16,
            eviction: EvictionPolicy::H2o,
            observer_window: 16,
            pool_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEvalResult {
    pub spec: HeadSpec,
    pub mnr: f64,
    pub dataset: String,
    pub samples: usize,
}

/// Every `(layer, projection, head)` candidate: query, key and value heads,
/// the residual stream, and the head-averaged attention score.
pub fn all_candidates(cfg: &ModelConfig) -> Vec<HeadSpec> {
    let mut out = Vec::new();
    for layer in 0..cfg.n_layers {
        for (proj, n) in [
            (Projection::Query, cfg.n_q_heads),
            (Projection::Key, cfg.n_kv_heads),
            (Projection::Value, cfg.n_kv_heads),
            (Projection::Hidden, 1),
            (Projection::Attention, 1),
        ] {
            out.extend((0..n).map(|h| HeadSpec::new(layer, proj, h)));
        }
    }
    out
}

/// States the forward pass must capture to score `candidates`.
fn taps_for(cfg: &ModelConfig, candidates: &[HeadSpec]) -> Vec<HeadSpec> {
    let mut taps: Vec<HeadSpec> = Vec::new();
    for c in candidates {
        if c.projection == Projection::Attention {
            taps.extend((0..cfg.n_q_heads).map(|h| HeadSpec::new(c.layer, Projection::Query, h)));
            taps.extend((0..cfg.n_kv_heads).map(|h| HeadSpec::new(c.layer, Projection::Key, h)));
        } else {
            taps.push(*c);
        }
    }
    taps.sort_unstable();
    taps.dedup();
    taps
}

/// Per-token states of one spec across the whole stream.
struct Collected {
    spec: HeadSpec,
    dim: usize,
    data: Vec<f32>,
}

impl Collected {
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn collect_chunk(collected: &mut [Collected], tapped: &TappedStates) {
    for c in collected {
        let tap = tapped.get(&c.spec).expect("tap requested");
        c.data.extend_from_slice(&tap.data);
    }
}

/// Context scores of one candidate: best match over the question rows.
fn candidate_scores(cfg: &ModelConfig, spec: &HeadSpec, states: &[Collected], sample: &Sample) -> Vec<f32> {
    let find = |s: HeadSpec| states.iter().find(|c| c.spec == s).expect("tap collected");
    let questions: Vec<usize> = sample
        .question
        .clone()
        .filter(|&i| !is_byte_special(sample.tokens[i]))
        .collect();
    let n = sample.context_len();
    if spec.projection == Projection::Attention {
        let qs: Vec<&Collected> = (0..cfg.n_q_heads)
            .map(|h| find(HeadSpec::new(spec.layer, Projection::Query, h)))
            .collect();
        let ks: Vec<&Collected> = (0..cfg.n_kv_heads)
            .map(|h| find(HeadSpec::new(spec.layer, Projection::Key, h)))
            .collect();
        let group = cfg.group_size();
        par::map_range(n, |i| {
            questions
                .iter()
                .map(|&j| {
                    qs.iter()
                        .enumerate()
                        .map(|(h, q)| dot(q.row(j), ks[h / group].row(i)))
                        .sum::<f32>()
                        / cfg.n_q_heads as f32
                })
                .fold(f32::NEG_INFINITY, f32::max)
        })
    } else {
        let c = find(*spec);
        par::map_range(n, |i| {
            questions
                .iter()
                .map(|&j| cosine(c.row(j), c.row(i)))
                .fold(f32::NEG_INFINITY, f32::max)
        })
    }
}

/// MNR of every candidate on every sample, from one compressive pass per
/// sample. Rows follow `candidates`; MNR is averaged over samples.
pub fn eval_heads(
    model: &Model,
    dataset: &PlantedDataset,
    candidates: &[HeadSpec],
    cfg: &EvalConfig,
) -> Result<Vec<HeadEvalResult>> {
    let mcfg = &model.config;
    for c in candidates {
        c.validate(mcfg)?;
    }
    if dataset.samples.is_empty() {
        return Err(Error::Data("dataset has no samples".into()));
    }
    let taps = taps_for(mcfg, candidates);
    let exit = taps.iter().map(|t| t.layer + 1).max().unwrap_or(0);
    let limits = CacheLimits {
        budget: cfg.cache_budget,
        sink_len: cfg.sink_len,
        recent_len: cfg.recent_len,
    };
    limits.validate()?;
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }

    let per_sample: Vec<Result<Vec<f64>>> = par::map_slice(&dataset.samples, |sample| {
        let mut pass = CompressivePass::new(
            model,
            limits,
            cfg.eviction,
            ForwardOptions {
                exit_layer: exit,
                taps: &taps,
                observer_window: cfg.observer_window,
                all_logits: false,
            },
        );
        let mut states: Vec<Collected> = taps
            .iter()
            .map(|&spec| Collected {
                spec,
                dim: spec.dim(mcfg),
                data: Vec::new(),
            })
            .collect();
        let (context, question) = sample.tokens.split_at(sample.context_len());
        for chunk in context.chunks(cfg.chunk_size).chain([question]) {
            let out = pass.feed(chunk)?;
            collect_chunk(&mut states, &out.tapped);
        }
        let mask = &sample.gold_mask()[..sample.context_len()];
        candidates
            .iter()
            .map(|spec| {
                let scores = candidate_scores(mcfg, spec, &states, sample);
                mnr(&smooth_mean(&scores, cfg.pool_window), mask)
            })
            .collect()
    });
    let per_sample: Vec<Vec<f64>> = per_sample.into_iter().collect::<Result<_>>()?;
    let n = per_sample.len();
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(k, spec)| HeadEvalResult {
            spec: *spec,
            mnr: per_sample.iter().map(|s| s[k]).sum::<f64>() / n as f64,
            dataset: dataset.kind.name().into(),
            samples: n,
        })
        .collect())
}

pub fn eval_head_mnr(
    model: &Model,
    dataset: &PlantedDataset,
    candidate: HeadSpec,
    cfg: &EvalConfig,
) -> Result<HeadEvalResult> {
    Ok(eval_heads(model, dataset, &[candidate], cfg)?.remove(0))
}

fn is_head(spec: &HeadSpec) -> bool {
    matches!(spec.projection, Projection::Query | Projection::Key | Projection::Value)
}

/// Ascending MNR, ties by spec order.
fn ranked(results: &[HeadEvalResult]) -> Vec<&HeadEvalResult> {
    let mut r: Vec<&HeadEvalResult> = results.iter().filter(|r| is_head(&r.spec)).collect();
    r.sort_by(|a, b| a.mnr.total_cmp(&b.mnr).then(a.spec.cmp(&b.spec)));
    r
}

/// The `n_per_dataset` best query/key/value heads from the pattern-matching
/// results (restricted to layers strictly below `depth_cap × n_layers`),
/// then as many again from the QA results, skipping heads already chosen.
pub fn select_heads(
    pattern: &[HeadEvalResult],
    qa: &[HeadEvalResult],
    n_layers: usize,
    n_per_dataset: usize,
    depth_cap: f64,
) -> Result<Vec<HeadSpec>> {
    let cap = depth_cap * n_layers as f64;
    let mut chosen: Vec<HeadSpec> = Vec::new();
    for (name, results, capped) in [("pattern", pattern, true), ("qa", qa, false)] {
        let picks: Vec<HeadSpec> = ranked(results)
            .into_iter()
            .map(|r| r.spec)
            .filter(|s| !capped || (s.layer as f64) < cap)
            .filter(|s| !chosen.contains(s))
            .take(n_per_dataset)
            .collect();
        if picks.len() < n_per_dataset {
            return Err(Error::Selection(format!(
                "only {} eligible {name} heads for {n_per_dataset} slots",
                picks.len()
            )));
        }
        chosen.extend(picks);
    }
    Ok(chosen)
}

/// The `k` query/key/value heads with the worst MNR averaged over all
/// result sets; a head must appear in every set to qualify.
pub fn bad_heads(result_sets: &[&[HeadEvalResult]], k: usize) -> Result<Vec<HeadSpec>> {
    let first = result_sets
        .first()
        .ok_or_else(|| Error::Selection("no head results".into()))?;
    let mut averaged: Vec<(HeadSpec, f64)> = first
        .iter()
        .filter(|r| is_head(&r.spec))
        .filter_map(|r| {
            let all: Option<Vec<f64>> = result_sets
                .iter()
                .map(|set| set.iter().find(|o| o.spec == r.spec).map(|o| o.mnr))
                .collect();
            all.map(|v| (r.spec, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    averaged.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if averaged.len() < k {
        return Err(Error::Selection(format!(
            "{} heads evaluated on every dataset, {k} requested",
            averaged.len()
        )));
    }
    Ok(averaged.into_iter().take(k).map(|(s, _)| s).collect())
}

/// `k` distinct query/key/value heads drawn with `seed`.
pub fn random_heads(cfg: &ModelConfig, k: usize, seed: u64) -> Result<Vec<HeadSpec>> {
    let pool: Vec<HeadSpec> = all_candidates(cfg).into_iter().filter(is_head).collect();
    if pool.len() < k {
        return Err(Error::Selection(format!(
            "{} heads available, {k} requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<HeadSpec> = pool.choose_multiple(&mut rng, k).copied().collect();
    picks.sort_unstable();
    Ok(picks)
}

/// `layer \t projection \t head \t mnr \t dataset`, ascending MNR within each
/// dataset.
pub fn report_tsv(results: &[HeadEvalResult]) -> String {
    let mut rows: Vec<&HeadEvalResult> = results.iter().collect();
    rows.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.mnr.total_cmp(&b.mnr))
            .then(a.spec.cmp(&b.spec))
    });
    let mut out = String::from("layer\tprojection\thead\tmnr\tdataset\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}",
            r.spec.layer,
            r.spec.projection.name(),
            r.spec.head,
            r.mnr,
            r.dataset
        );
    }
    out
}
