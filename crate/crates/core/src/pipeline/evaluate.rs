use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use crate::datagen::{ExampleBody, TrainingExample};
use crate::diffengine::{Graph, Tensor};
use crate::encoder::{mrl_truncate, Encoder, SentenceEmbedding, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{exact_search, ndcg_at_10, recall_at_k, spearman, MetricRecord, RetrievalRun};
use crate::losses::info_nce_from_scores;

// Low enough that exp(score / temperature) underflows to zero.
const EXCLUDED: f64 = -1e6;

/// Bidirectional sentence embeddings, optionally truncated to an MRL prefix.
pub fn embed_strings(enc: &Encoder, tok: &Tokenizer, texts: &[&str], dim: Option<usize>) -> Result<Vec<SentenceEmbedding>> {
    let seqs: Vec<Vec<u32>> = texts.iter().map(|t| tok.encode(t, enc.config().max_len)).collect();
    let bi = |n: usize| Rc::new(vec![1.0; n * n]);
    let embs = enc.embed_texts(&seqs, &bi)?;
    match dim {
        Some(d) => embs.iter().map(|e| mrl_truncate(e, d, enc.config())).collect(),
        None => Ok(embs),
    }
}

/// Search every query against the distinct passages of `examples`.
///
/// A passage is relevant to a query when both come from the same group, or,
/// for ungrouped data, when it is the query's own positive. A passage whose
/// text equals the query is dropped from that query's ranking.
pub fn retrieval_run(enc: &Encoder, tok: &Tokenizer, examples: &[TrainingExample], dim: Option<usize>) -> Result<RetrievalRun> {
    let mut corpus: Vec<&str> = Vec::new();
    let mut corpus_id: HashMap<&str, usize> = HashMap::new();
    let mut corpus_groups: Vec<BTreeSet<u32>> = Vec::new();
    let mut queries = Vec::new();
    let mut own = Vec::new();
    for ex in examples {
        let (q, p) = ex
            .query_passage()
            .ok_or_else(|| Error::Data("retrieval evaluation needs pair or triplet examples".into()))?;
        let id = *corpus_id.entry(p).or_insert_with(|| {
            corpus.push(p);
            corpus_groups.push(BTreeSet::new());
            corpus.len() - 1
        });
        if let Some(g) = ex.group {
            corpus_groups[id].insert(g);
        }
        queries.push(q);
        own.push(id);
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let qe: Vec<Vec<f64>> = embed_strings(enc, tok, &queries, dim)?.into_iter().map(|e| e.vector).collect();
    let ce: Vec<Vec<f64>> = embed_strings(enc, tok, &corpus, dim)?.into_iter().map(|e| e.vector).collect();
    let mut ranked = exact_search(&qe, &ce, ce.len())?;
    let mut relevant = BTreeMap::new();
    for (qi, ex) in examples.iter().enumerate() {
        let own_text = corpus_id.get(queries[qi]).copied();
        ranked[qi].retain(|&(c, _)| Some(c) != own_text);
        let rel: BTreeSet<usize> = match ex.group {
            Some(g) => (0..corpus.len()).filter(|&c| corpus_groups[c].contains(&g) && Some(c) != own_text).collect(),
            None => BTreeSet::from([own[qi]]),
        };
        relevant.insert(qi, rel);
    }
    Ok(RetrievalRun::new(ranked, relevant))
}

/// Retrieval metrics for pair data and Spearman for scored data.
pub fn evaluate_examples(
    enc: &Encoder,
    tok: &Tokenizer,
    examples: &[TrainingExample],
    split: &str,
    dim: Option<usize>,
) -> Result<Vec<MetricRecord>> {
    let pairs: Vec<TrainingExample> = examples.iter().filter(|e| e.query_passage().is_some()).cloned().collect();
    let mut out = Vec::new();
    if !pairs.is_empty() {
        let run = retrieval_run(enc, tok, &pairs, dim)?;
        for k in [1, 10, 20, 100] {
            out.push(MetricRecord::new(&format!("recall@{k}"), split, Some(recall_at_k(&run, k)?)));
        }
        out.push(MetricRecord::new("ndcg@10", split, Some(ndcg_at_10(&run)?)));
    }
    let (mut a, mut b, mut labels) = (vec![], vec![], vec![]);
    for e in examples {
        if let ExampleBody::Scored { a: x, b: y, label } = &e.body {
            a.push(x.as_str());
            b.push(y.as_str());
            labels.push(*label);
        }
    }
    if a.len() >= 2 {
        let ea = embed_strings(enc, tok, &a, dim)?;
        let eb = embed_strings(enc, tok, &b, dim)?;
        let cos: Vec<f64> = ea
            .iter()
            .zip(&eb)
            .map(|(x, y)| x.vector.iter().zip(&y.vector).map(|(p, q)| p * q).sum())
            .collect();
        out.push(MetricRecord::new("spearman", split, spearman(&cos, &labels)?));
    }
    if out.is_empty() {
        return Err(Error::Data("nothing to evaluate: need pair, triplet or scored examples".into()));
    }
    Ok(out)
}

/// Mean per-query in-batch InfoNCE over consecutive chunks of `batch` pairs,
/// bidirectional mask, full width. Other positives from the query's own group
/// are left out of its candidates.
pub fn contrastive_eval_loss(
    enc: &Encoder,
    tok: &Tokenizer,
    pairs: &[TrainingExample],
    batch: usize,
    temperature: f64,
) -> Result<f64> {
    let mut q = Vec::new();
    let mut p = Vec::new();
    for e in pairs {
        let (a, b) = e.query_passage().ok_or_else(|| Error::Data("contrastive evaluation needs pairs".into()))?;
        q.push(a);
        p.push(b);
    }
    if q.is_empty() || batch == 0 {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let qe = embed_strings(enc, tok, &q, None)?;
    let pe = embed_strings(enc, tok, &p, None)?;
    let mut total = 0.0;
    for start in (0..q.len()).step_by(batch) {
        let end = (start + batch).min(q.len());
        let b = end - start;
        let mut scores = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let same_group = i != j && pairs[start + i].group.is_some() && pairs[start + i].group == pairs[start + j].group;
                scores[i * b + j] = if same_group {
                    EXCLUDED
                } else {
                    qe[start + i].vector.iter().zip(&pe[start + j].vector).map(|(x, y)| x * y).sum()
                };
            }
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[b, b], scores)?);
        let l = info_nce_from_scores(&mut g, s, None, temperature)?;
        total += g.value(l).item();
    }
    Ok(total / q.len() as f64)
}
