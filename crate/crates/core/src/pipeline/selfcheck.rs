//! Seeded finite-difference checks of every training loss and of a full
//! encoder step.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{grad_check, grad_check_coords, Graph, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, Pooling};
use crate::error::Result;
use crate::losses::{cosent, info_nce, next_token_ce, pair_cosines, ContrastiveBatch};
use crate::maskschedule::{build_soft_mask, ScheduleKind, ScheduleState};

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const ENCODER_TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub check: String,
    pub case: u64,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn record(check: &str, case: u64, error: f64, tolerance: f64) -> GradCheckRecord {
    GradCheckRecord { check: check.into(), case, error, tolerance, passed: error <= tolerance }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

fn case_rng(seed: u64, check: u64, case: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ check.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(case);
    r
}

/// Worst relative error of InfoNCE over its three inputs.
pub fn info_nce_case(seed: u64, case: u64) -> Result<f64> {
    let mut rng = case_rng(seed, 1, case);
    let b = rng.gen_range(1..=4);
    let h = rng.gen_range(2..=6);
    let k = rng.gen_range(0..=3);
    let temperature = rng.gen_range(0.05..1.0);
    let inputs = [random(&mut rng, &[b, h], 1.0), random(&mut rng, &[b, h], 1.0), random(&mut rng, &[(b * k).max(1), h], 1.0)];
    let mut worst: f64 = 0.0;
    for which in 0..if k > 0 { 3 } else { 2 } {
        let err = grad_check(
            |g: &mut Graph, x: Var| {
                let mut v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                v[which] = x;
                let out = info_nce(
                    g,
                    &ContrastiveBatch {
                        queries: v[0],
                        positives: v[1],
                        negatives: (k > 0).then_some(v[2]),
                        negatives_per_query: k,
                        temperature,
                    },
                )?;
                Ok(out.loss)
            },
            &inputs[which],
            H,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// CoSENT through pair cosines, checked against one side's embeddings.
pub fn cosent_case(seed: u64, case: u64) -> Result<f64> {
    let mut rng = case_rng(seed, 2, case);
    let p = rng.gen_range(2..=6);
    let h = rng.gen_range(2..=5);
    let tau = rng.gen_range(0.05..1.0);
    let a = random(&mut rng, &[p, h], 1.0);
    let b = random(&mut rng, &[p, h], 1.0);
    let labels: Vec<f64> = (0..p).map(|_| rng.gen_range(0..4) as f64).collect();
    grad_check(
        |g: &mut Graph, x: Var| {
            let bv = g.constant(b.clone());
            let c = pair_cosines(g, x, bv)?;
            cosent(g, c, &labels, tau)
        },
        &a,
        H,
    )
}

pub fn next_token_ce_case(seed: u64, case: u64) -> Result<f64> {
    let mut rng = case_rng(seed, 3, case);
    let l = rng.gen_range(1..=5);
    let v = rng.gen_range(2..=8);
    let logits = random(&mut rng, &[l, v], 3.0);
    let targets: Vec<u32> = (0..l).map(|_| rng.gen_range(0..v as u32)).collect();
    grad_check(|g: &mut Graph, x: Var| next_token_ce(g, x, &targets), &logits, H)
}

fn small_encoder_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden_dim: 16,
        heads: 4,
        kv_heads: 2,
        ffn_dim: 24,
        vocab_size: 300,
        max_len: 8,
        pooling: Pooling::Mean,
        mrl_dims: vec![8, 16],
    }
}

/// A full 2-layer encoder step: soft-masked forward, mean pooling, InfoNCE with
/// one explicit negative per query, checked on sampled coordinates of every weight.
pub fn encoder_case(seed: u64, case: u64) -> Result<f64> {
    let mut rng = case_rng(seed, 4, case);
    let enc = Encoder::new(small_encoder_config(), rng.gen())?;
    let state = ScheduleState::new(ScheduleKind::Linear, rng.gen_range(0..=10), 10)?;
    let seqs: Vec<Vec<u32>> = (0..6)
        .map(|_| {
            let n = rng.gen_range(2..=6);
            (0..n).map(|_| rng.gen_range(4..300)).collect()
        })
        .collect();
    let masks: Vec<Rc<Vec<f64>>> = seqs
        .iter()
        .map(|s| build_soft_mask(&state, s.len(), s.len()).map(|m| Rc::new(m.into_entries())))
        .collect::<Result<_>>()?;
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = enc.pack(&refs, &masks)?;
    let mut worst: f64 = 0.0;
    for which in 0..enc.params().len() {
        let x = enc.params()[which].1.clone();
        let coords: Vec<usize> = (0..4).map(|_| rng.gen_range(0..x.len())).collect();
        let err = grad_check_coords(
            |g: &mut Graph, xv: Var| {
                let mut vars = enc.bind(g, false);
                vars[which] = xv;
                let states = enc.forward(g, &vars, &batch)?;
                let raw = enc.pool_raw(g, states, &batch)?;
                let q = g.index_rows(raw, &[0, 1])?;
                let p = g.index_rows(raw, &[2, 3])?;
                let n = g.index_rows(raw, &[4, 5])?;
                let out = info_nce(
                    g,
                    &ContrastiveBatch { queries: q, positives: p, negatives: Some(n), negatives_per_query: 1, temperature: 0.5 },
                )?;
                Ok(out.loss)
            },
            &x,
            H,
            coords,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Run `cases` cases of each check.
pub fn gradient_suite(seed: u64, cases: u64) -> Result<Vec<GradCheckRecord>> {
    let mut out = Vec::new();
    for c in 0..cases {
        out.push(record("info_nce", c, info_nce_case(seed, c)?, LOSS_TOLERANCE));
    }
    for c in 0..cases {
        out.push(record("cosent", c, cosent_case(seed, c)?, LOSS_TOLERANCE));
    }
    for c in 0..cases {
        out.push(record("next_token_ce", c, next_token_ce_case(seed, c)?, LOSS_TOLERANCE));
    }
    for c in 0..cases {
        out.push(record("encoder", c, encoder_case(seed, c)?, ENCODER_TOLERANCE));
    }
    Ok(out)
}
