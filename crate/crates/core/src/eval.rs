//! Retrieval and STS metrics, brute-force search, and per-language centroid
//! analysis of embeddings.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEmbedding;
use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-6;

/// Ranked candidates per query plus binary relevance judgments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalRun {
    /// `ranked[q]` is sorted by descending score, ties by ascending id.
    pub ranked: Vec<Vec<(usize, f64)>>,
    pub relevant: BTreeMap<usize, BTreeSet<usize>>,
}

impl RetrievalRun {
    pub fn new(ranked: Vec<Vec<(usize, f64)>>, relevant: BTreeMap<usize, BTreeSet<usize>>) -> Self {
        RetrievalRun { ranked, relevant }
    }

    /// Queries with at least one judgment; the rest are skipped with a warning.
    fn judged(&self) -> Result<Vec<(usize, &BTreeSet<usize>)>> {
        let mut out = Vec::new();
        for q in 0..self.ranked.len() {
            match self.relevant.get(&q) {
                Some(rel) if !rel.is_empty() => out.push((q, rel)),
                _ => log::warn!("query {q} has no relevance judgments; excluded"),
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("no query has relevance judgments"));
        }
        Ok(out)
    }
}

fn check_normalized(what: &str, vs: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, v) in vs.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "exact_search",
                left: vec![dim],
                right: vec![v.len()],
            });
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::domain("exact_search", format!("{what} {i} has norm {n}")));
        }
    }
    Ok(())
}

pub fn rank_scores(mut scored: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    // Adding 0.0 maps -0.0 to 0.0 so the two tie.
    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
    scored
}

/// Exhaustive cosine search; `k` larger than the corpus is clamped.
pub fn exact_search(queries: &[Vec<f64>], corpus: &[Vec<f64>], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let dim = match queries.first().or(corpus.first()) {
        Some(v) => v.len(),
        None => return Ok(vec![]),
    };
    check_normalized("query", queries, dim)?;
    check_normalized("corpus vector", corpus, dim)?;
    let k = k.min(corpus.len());
    Ok(queries
        .iter()
        .map(|q| {
            let scored = corpus
                .iter()
                .enumerate()
                .map(|(id, c)| (id, q.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()))
                .collect();
            let mut ranked = rank_scores(scored);
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// Mean over judged queries of |relevant ∩ top-k| / |relevant|.
pub fn recall_at_k(run: &RetrievalRun, k: usize) -> Result<f64> {
    let judged = run.judged()?;
    let total: f64 = judged
        .iter()
        .map(|(q, rel)| {
            let hits = run.ranked[*q].iter().take(k).filter(|(id, _)| rel.contains(id)).count();
            hits as f64 / rel.len() as f64
        })
        .sum();
    Ok(total / judged.len() as f64)
}

fn gain(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-relevance nDCG over the top 10, averaged over judged queries.
pub fn ndcg_at_10(run: &RetrievalRun) -> Result<f64> {
    let judged = run.judged()?;
    let total: f64 = judged
        .iter()
        .map(|(q, rel)| {
            let dcg: f64 = run.ranked[*q]
                .iter()
                .take(10)
                .enumerate()
                .filter(|(_, (id, _))| rel.contains(id))
                .map(|(r, _)| gain(r + 1))
                .sum();
            let ideal: f64 = (1..=rel.len().min(10)).map(gain).sum();
            dcg / ideal
        })
        .sum();
    Ok(total / judged.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| (x[a] + 0.0).total_cmp(&(x[b] + 0.0)).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. `Ok(None)` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch { op: "spearman", left: vec![x.len()], right: vec![y.len()] });
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub languages: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    /// (language a, language b, euclidean distance) for every a < b.
    pub pairwise: Vec<(String, String, f64)>,
    pub mean_distance: f64,
    pub projection_method: String,
    /// 2-D coordinates of every input embedding, in input order.
    pub points_2d: Vec<[f64; 2]>,
    pub centroids_2d: Vec<[f64; 2]>,
}

impl DistributionReport {
    /// Whitespace-separated `language x y` rows for external plotting.
    pub fn projection_table(&self, tags: &[&str]) -> String {
        let mut s = format!("# projection: {}\nlanguage x y\n", self.projection_method);
        for (t, p) in tags.iter().zip(&self.points_2d) {
            s.push_str(&format!("{t} {} {}\n", p[0], p[1]));
        }
        s
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Top-2 principal axes of `points`, each sign-fixed so its largest-magnitude
/// component is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<(Vec<f64>, [Vec<f64>; 2])> {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.len());
    if n == 0 || d < 2 {
        return Err(Error::invalid("PCA needs points of dimension >= 2"));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += ci * (p[j] - mean[j]);
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok((mean, [axis(0), axis(1)]))
}

fn project(p: &[f64], mean: &[f64], axes: &[Vec<f64>; 2]) -> [f64; 2] {
    let c: Vec<f64> = p.iter().zip(mean).map(|(a, m)| a - m).collect();
    [0, 1].map(|k| c.iter().zip(&axes[k]).map(|(a, b)| a * b).sum())
}

/// Per-language centroids of normalized embeddings, their pairwise distances,
/// and a PCA projection of everything to 2-D.
pub fn centroid_analysis(embeddings: &[SentenceEmbedding]) -> Result<DistributionReport> {
    let mut groups: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        let tag = e
            .language_tag
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("embedding {i} has no language tag")))?;
        groups.entry(tag).or_default().push(&e.vector);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("centroid analysis needs at least 2 languages"));
    }
    if let Some((l, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::invalid(format!("language {l:?} has {} embedding(s), need 2", g.len())));
    }
    let dim = embeddings[0].vector.len();
    if embeddings.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::invalid("embeddings differ in dimension"));
    }
    let mut languages = Vec::new();
    let mut centroids = Vec::new();
    for (lang, vs) in &groups {
        let mut c = vec![0.0; dim];
        for v in vs {
            for (a, b) in c.iter_mut().zip(v.iter()) {
                *a += b;
            }
        }
        c.iter_mut().for_each(|a| *a /= vs.len() as f64);
        languages.push(lang.to_string());
        centroids.push(c);
    }
    let mut pairwise = Vec::new();
    for a in 0..languages.len() {
        for b in a + 1..languages.len() {
            pairwise.push((languages[a].clone(), languages[b].clone(), euclid(&centroids[a], &centroids[b])));
        }
    }
    let mean_distance = pairwise.iter().map(|p| p.2).sum::<f64>() / pairwise.len() as f64;
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let (points_2d, centroids_2d) = if dim >= 2 {
        let (mean, axes) = pca_2d(&points)?;
        (
            points.iter().map(|p| project(p, &mean, &axes)).collect(),
            centroids.iter().map(|c| project(c, &mean, &axes)).collect(),
        )
    } else {
        (vec![], vec![])
    };
    Ok(DistributionReport {
        languages,
        centroids,
        pairwise,
        mean_distance,
        projection_method: "pca".into(),
        points_2d,
        centroids_2d,
    })
}

/// One line of metric output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    pub value: Option<f64>,
}

impl MetricRecord {
    pub fn new(metric: &str, split: &str, value: Option<f64>) -> Self {
        MetricRecord { metric: metric.into(), split: split.into(), value }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn run_with(ranked_ids: &[usize], rel: &[usize]) -> RetrievalRun {
        let ranked = ranked_ids.iter().enumerate().map(|(r, &id)| (id, -(r as f64))).collect();
        RetrievalRun::new(vec![ranked], BTreeMap::from([(0, rel.iter().copied().collect())]))
    }

    #[test]
    fn search_examples() {
        let corpus = vec![unit(3, 0), unit(3, 1), unit(3, 2)];
        let r = exact_search(&[unit(3, 1)], &corpus, 10).unwrap();
        assert_eq!(r[0].len(), 3);
        assert_eq!(r[0][0], (1, 1.0));
        let h = 0.5f64.sqrt();
        let r = exact_search(&[vec![0.0, h, h]], &[unit(3, 0), vec![h, -h, 0.0]], 2).unwrap();
        assert_eq!(r[0][0].0, 0);
        let r = exact_search(&[vec![1.0, 0.0]], &[unit(2, 1), unit(2, 1), unit(2, 1)], 2).unwrap();
        assert_eq!(r[0].iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(exact_search(&[vec![2.0, 0.0]], &corpus, 1).is_err());
    }

    #[test]
    fn signed_zero_scores_tie() {
        let r = rank_scores(vec![(3, 0.0), (1, -0.0), (2, 0.0)]);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(average_ranks(&[0.0, -0.0, 1.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn recall_examples() {
        let ids: Vec<usize> = (0..40).collect();
        assert_eq!(recall_at_k(&run_with(&ids, &[0]), 20).unwrap(), 1.0);
        assert_eq!(recall_at_k(&run_with(&ids, &[20]), 20).unwrap(), 0.0);
        assert_eq!(recall_at_k(&run_with(&ids, &[2, 29]), 20).unwrap(), 0.5);
        let mut r = run_with(&ids, &[0]);
        r.ranked.push(vec![(5, 0.0)]);
        assert_eq!(recall_at_k(&r, 1).unwrap(), 1.0);
        r.relevant.clear();
        assert!(recall_at_k(&r, 1).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let ids: Vec<usize> = (0..20).collect();
        assert_eq!(ndcg_at_10(&run_with(&ids, &[0])).unwrap(), 1.0);
        assert_eq!(ndcg_at_10(&run_with(&ids, &[10])).unwrap(), 0.0);
        let v = ndcg_at_10(&run_with(&ids, &[1])).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_10(&run_with(&ids, &[0, 1, 2])).unwrap(), 1.0);
        assert!(ndcg_at_10(&run_with(&ids, &[0, 1, 3])).unwrap() < 1.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn emb(v: Vec<f64>, lang: &str) -> SentenceEmbedding {
        SentenceEmbedding::from_raw(v, Some(lang.into())).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let set = |l: &str| vec![emb(vec![1.0, 0.0, 0.0], l), emb(vec![0.0, 1.0, 0.0], l)];
        let mut same = set("en");
        same.extend(set("de"));
        assert_eq!(centroid_analysis(&same).unwrap().mean_distance, 0.0);
        let mut orth = vec![emb(vec![1.0, 0.0, 0.0], "en"), emb(vec![1.0, 0.0, 0.0], "en")];
        orth.extend([emb(vec![0.0, 1.0, 0.0], "de"), emb(vec![0.0, 1.0, 0.0], "de")]);
        let r = centroid_analysis(&orth).unwrap();
        assert!((r.mean_distance - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.languages, vec!["de", "en"]);
        assert!(centroid_analysis(&set("en")).is_err());
        let mut thin = set("en");
        thin.push(emb(vec![1.0, 0.0, 0.0], "de"));
        assert!(centroid_analysis(&thin).is_err());
    }

    #[test]
    fn pca_preserves_planar_distances() {
        // Unit vectors in the plane spanned by two fixed orthonormal directions of R^5.
        let a = [0.6, 0.0, 0.8, 0.0, 0.0];
        let b = [0.0, 0.6, 0.0, 0.0, -0.8];
        let pts: Vec<Vec<f64>> = (0..9)
            .map(|k| {
                let th = k as f64 * 0.7;
                (0..5).map(|i| th.cos() * a[i] + th.sin() * b[i]).collect()
            })
            .collect();
        let embs: Vec<_> = pts.iter().enumerate().map(|(i, p)| emb(p.clone(), if i % 2 == 0 { "x" } else { "y" })).collect();
        let r = centroid_analysis(&embs).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d5 = euclid(&pts[i], &pts[j]);
                let d2 = euclid(&r.points_2d[i], &r.points_2d[j]);
                assert!((d5 - d2).abs() < 1e-9);
            }
        }
        assert!(r.projection_table(&["x"; 9]).starts_with("# projection: pca"));
    }

    #[test]
    fn metric_record_line() {
        let l = MetricRecord::new("recall@1", "test", Some(0.5)).to_line();
        assert_eq!(l, r#"{"metric":"recall@1","split":"test","value":0.5}"#);
    }
}
