//! InfoNCE with in-batch negatives, CoSENT, and next-token cross-entropy.

use crate::diffengine::{Graph, Var};
use crate::error::{Error, Result};

/// Query, positive and explicit-negative embeddings for one InfoNCE step.
///
/// `negatives`, when present, holds `B·K` rows: rows `i·K..(i+1)·K` belong to
/// query `i`. Every input row is L2-normalized before scoring, so cosines are
/// plain dot products.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch {
    pub queries: Var,
    pub positives: Var,
    pub negatives: Option<Var>,
    pub negatives_per_query: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: Var,
    /// `cos(x_i, y_i⁺)` for every query.
    pub positive_scores: Vec<f64>,
    /// `cos(x_i, n_ik)`, row-major `B×K`; these feed hard-negative mining.
    pub negative_scores: Vec<f64>,
}

/// `−Σ_i log( exp(c_ii/T) / Σ_candidates exp(c/T) )`
///
/// Query `i` is scored against all `B` in-batch positives (its own included)
/// and its own `K` explicit negatives.
pub fn info_nce(g: &mut Graph, batch: &ContrastiveBatch) -> Result<InfoNceOutput> {
    let q = g.l2_normalize(batch.queries)?;
    let p = g.l2_normalize(batch.positives)?;
    let (b, h) = (g.shape(q)[0], g.shape(q)[1]);
    if g.shape(p) != [b, h] {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: g.shape(q).to_vec(),
            right: g.shape(p).to_vec(),
        });
    }
    let in_batch = g.matmul_nt(q, p)?;
    let k = batch.negatives_per_query;
    let neg_scores = match batch.negatives {
        Some(n) if k > 0 => {
            let n = g.l2_normalize(n)?;
            if g.shape(n) != [b * k, h] {
                return Err(Error::ShapeMismatch {
                    op: "info_nce negatives",
                    left: vec![b * k, h],
                    right: g.shape(n).to_vec(),
                });
            }
            let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let qr = g.index_rows(q, &rep)?;
            let prod = g.mul(qr, n)?;
            let dots = g.sum_last(prod);
            Some(g.reshape(dots, &[b, k])?)
        }
        None if k == 0 => None,
        Some(_) => None,
        None => {
            // k > 0 with no negatives supplied
            return Err(Error::invalid(format!(
                "{k} negatives per query requested but none supplied"
            )))
        }
    };
    let positive_scores = (0..b).map(|i| g.value(in_batch).at2(i, i)).collect();
    let negative_scores = neg_scores
        .map(|v| g.value(v).data().to_vec())
        .unwrap_or_default();
    let loss = info_nce_from_scores(g, in_batch, neg_scores, batch.temperature)?;
    Ok(InfoNceOutput {
        loss,
        positive_scores,
        negative_scores,
    })
}

/// InfoNCE from precomputed cosines: `in_batch` is `B×B` with positives on the
/// diagonal, `negatives` an optional `B×K` block.
pub fn info_nce_from_scores(
    g: &mut Graph,
    in_batch: Var,
    negatives: Option<Var>,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = g.shape(in_batch).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::invalid(format!(
            "in-batch scores must be square B×B, got {shape:?}"
        )));
    }
    let b = shape[0];
    let logits = match negatives {
        Some(n) => g.concat_cols(&[in_batch, n])?,
        None => in_batch,
    };
    let scaled = g.scale(logits, 1.0 / temperature);
    let ls = g.log_softmax_rows(scaled);
    let diag: Vec<usize> = (0..b).collect();
    let picked = g.pick_per_row(ls, &diag)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// `log(1 + Σ_{sim(i) > sim(j)} exp((c_j − c_i)/τ))` over a 1-D tensor of
/// pair cosines `c` with ordinal labels `sim`. Tied labels form no pair.
pub fn cosent(g: &mut Graph, cosines: Var, labels: &[f64], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("CoSENT tau must be positive, got {tau}")));
    }
    let p = g.value(cosines).len();
    if p == 0 || labels.len() != p {
        return Err(Error::invalid(format!(
            "CoSENT needs one label per pair: {p} cosines, {} labels",
            labels.len()
        )));
    }
    let mut higher = Vec::new();
    let mut lower = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if labels[i] > labels[j] {
                higher.push(i);
                lower.push(j);
            }
        }
    }
    if higher.is_empty() {
        let s = g.sum(cosines);
        let z = g.scale(s, 0.0);
        return Ok(g.add_scalar(z, 0.0));
    }
    let col = g.reshape(cosines, &[p, 1])?;
    let hi = g.index_rows(col, &higher)?;
    let lo = g.index_rows(col, &lower)?;
    let diff = g.sub(lo, hi)?;
    let scaled = g.scale(diff, 1.0 / tau);
    Ok(g.log1p_sum_exp(scaled))
}

/// Row-wise cosines of two `[P, H]` embedding matrices.
pub fn pair_cosines(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let a = g.l2_normalize(a)?;
    let b = g.l2_normalize(b)?;
    let prod = g.mul(a, b)?;
    Ok(g.sum_last(prod))
}

/// Mean cross-entropy of `logits: [L, V]` against next-token `targets`.
pub fn next_token_ce(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::invalid(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let v = shape[1];
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid(format!("target id {t} ≥ vocabulary {v}")));
    }
    let ls = g.log_softmax_rows(logits);
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick_per_row(ls, &idx)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}
