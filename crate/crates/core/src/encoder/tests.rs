use std::rc::Rc;

use super::*;
use crate::diffengine::grad_check_coords;
use crate::maskschedule::AttentionMask;

fn small_cfg(layers: usize, heads: usize, kv_heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        hidden_dim: 16,
        heads,
        kv_heads,
        ffn_dim: 24,
        vocab_size: 300,
        max_len: 12,
        pooling: Pooling::Mean,
        mrl_dims: vec![2, 8, 16],
    }
}

fn tokens() -> Vec<u32> {
    vec![5, 17, 260, 33, 8, 290, 41, 12]
}

#[test]
fn causal_mask_hides_future_tokens_bitwise() {
    let enc = Encoder::new(EncoderConfig::default(), 1).unwrap();
    let a = tokens();
    let mut b = a.clone();
    b[7] = 99;
    let causal = AttentionMask::causal(8).unwrap();
    let sa = enc.encode(&a, &causal).unwrap();
    let sb = enc.encode(&b, &causal).unwrap();
    for r in 0..7 {
        let (x, y) = (sa.row(r), sb.row(r));
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "row {r}");
    }
    assert_ne!(sa.row(7), sb.row(7));
}

#[test]
fn bidirectional_mask_propagates_future_tokens() {
    let enc = Encoder::new(EncoderConfig::default(), 1).unwrap();
    let a = tokens();
    let mut b = a.clone();
    b[7] = 99;
    let bi = AttentionMask::bidirectional(8).unwrap();
    let sa = enc.encode(&a, &bi).unwrap();
    let sb = enc.encode(&b, &bi).unwrap();
    assert_ne!(sa.row(0), sb.row(0));
}

#[test]
fn zero_layers_is_embedding_plus_position() {
    let enc = Encoder::new(small_cfg(0, 4, 2), 3).unwrap();
    let t = tokens();
    let states = enc.encode(&t, &AttentionMask::causal(8).unwrap()).unwrap();
    let table = &enc.params()[0].1;
    for (pos, &tok) in t.iter().enumerate() {
        let pe = positional_encoding(16, pos);
        for c in 0..16 {
            let expect = table.at2(tok as usize, c) + pe[c];
            assert_eq!(states.at2(pos, c), expect);
        }
    }
}

#[test]
fn encode_rejects_bad_input() {
    let enc = Encoder::new(small_cfg(1, 4, 2), 3).unwrap();
    let m = AttentionMask::causal(2).unwrap();
    assert!(enc.encode(&[1, 300], &m).is_err());
    let long: Vec<u32> = (0..13).collect();
    assert!(enc.encode(&long, &AttentionMask::causal(13).unwrap()).is_err());
    assert!(enc.encode(&[1, 2, 3], &m).is_err());
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    assert!(small_cfg(1, 4, 3).validate().is_err());
    let mut c = small_cfg(1, 4, 2);
    c.mrl_dims = vec![8, 4];
    assert!(c.validate().is_err());
    c.mrl_dims = vec![4, 32];
    assert!(c.validate().is_err());
}

#[test]
fn pooling_examples() {
    let same = Tensor::new(&[3, 2], vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
    for mode in [Pooling::Mean, Pooling::LastToken] {
        let e = pool(&same, mode).unwrap();
        assert!((e.vector[0] - 0.6).abs() < 1e-15 && (e.vector[1] - 0.8).abs() < 1e-15);
    }
    let two = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let e = pool(&two, Pooling::Mean).unwrap();
    let h = 2f64.sqrt() / 2.0;
    assert!((e.vector[0] - h).abs() < 1e-15 && (e.vector[1] - h).abs() < 1e-15);
    let e = pool(&two, Pooling::LastToken).unwrap();
    assert_eq!(e.vector, vec![0.0, 1.0]);
    let cancel = Tensor::new(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    assert!(matches!(pool(&cancel, Pooling::Mean), Err(Error::Domain { .. })));
}

#[test]
fn mrl_truncation_examples() {
    let cfg = small_cfg(1, 4, 2);
    let mut raw = vec![0.0; 16];
    raw[0] = 3.0;
    raw[1] = 4.0;
    raw[5] = 2.0;
    let e = SentenceEmbedding::from_raw(raw, None).unwrap();
    let t = mrl_truncate(&e, 2, &cfg).unwrap();
    assert_eq!(t.vector, vec![0.6, 0.8]);
    assert_eq!(mrl_truncate(&e, 16, &cfg).unwrap(), e);
    let nested = mrl_truncate(&mrl_truncate(&e, 8, &cfg).unwrap(), 2, &cfg).unwrap();
    assert_eq!(nested.vector, t.vector);
    assert_eq!(mrl_truncate(&t, 2, &cfg).unwrap(), t);
    assert!(mrl_truncate(&e, 5, &cfg).is_err());
}

#[test]
fn active_prefix_is_unit_norm() {
    let enc = Encoder::new(EncoderConfig::default(), 4).unwrap();
    let seqs = vec![tokens(), vec![7, 8, 9]];
    let embs = enc
        .embed_texts(&seqs, &|n| Rc::new(AttentionMask::bidirectional(n).unwrap().into_entries()))
        .unwrap();
    for e in &embs {
        for &d in &enc.config().mrl_dims {
            let t = mrl_truncate(e, d, enc.config()).unwrap();
            let n: f64 = t.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }
}

/// Straightforward multi-head attention with one K/V projection per head.
fn reference_mha(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, d: usize) -> Vec<f64> {
    let n = q.shape()[0];
    let w = heads * d;
    let mut out = vec![0.0; n * w];
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..heads {
        for i in 0..n {
            let qi = &q.row(i)[h * d..(h + 1) * d];
            let mut s = vec![0.0; n];
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                let kj = &k.row(j)[h * d..(h + 1) * d];
                s[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                m = m.max(s[j]);
            }
            let mut z = 0.0;
            for sj in s.iter_mut() {
                *sj = 1.0 * (*sj - m).exp();
                z += *sj;
            }
            for j in 0..n {
                let p = s[j] / z;
                let vj = &v.row(j)[h * d..(h + 1) * d];
                for c in 0..d {
                    out[i * w + h * d + c] += p * vj[c];
                }
            }
        }
    }
    out
}

#[test]
fn gqa_with_equal_heads_is_standard_mha_bitwise() {
    let cfg = small_cfg(1, 4, 4);
    let enc = Encoder::new(cfg, 9).unwrap();
    let t = tokens();
    let mut g = Graph::new();
    let vars = enc.bind(&mut g, false);
    let hn = {
        let idx: Vec<usize> = t.iter().map(|&x| x as usize).collect();
        let e = g.index_rows(vars[0], &idx).unwrap();
        g.rms_norm(e, vars[1], 1e-6).unwrap()
    };
    let q = g.matmul(hn, vars[2]).unwrap();
    let k = g.matmul(hn, vars[3]).unwrap();
    let v = g.matmul(hn, vars[4]).unwrap();
    let layout = Rc::new(AttentionLayout {
        heads: 4,
        kv_heads: 4,
        head_dim: 4,
        segments: vec![(0, 8)],
        masks: vec![Rc::new(vec![1.0; 64])],
    });
    let a = g.attention(q, k, v, layout).unwrap();
    let reference = reference_mha(g.value(q), g.value(k), g.value(v), 4, 4);
    let got = g.value(a).data();
    assert!(got.iter().zip(&reference).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let cfg = small_cfg(2, 4, 2);
    let enc = Encoder::new(cfg, 21).unwrap();
    let seqs: Vec<Vec<u32>> = vec![vec![5, 9, 261, 30], vec![7, 7, 2], vec![100, 4, 5, 6, 7]];
    let bi = |n: usize| Rc::new(AttentionMask::bidirectional(n).unwrap().into_entries());
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let masks: Vec<_> = seqs.iter().map(|s| bi(s.len())).collect();
    let batch = enc.pack(&refs, &masks).unwrap();
    let target: Vec<f64> = (0..48).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    for which in 0..enc.params().len() {
        let x = enc.params()[which].1.clone();
        let coords: Vec<usize> = (0..x.len()).step_by(x.len() / 12 + 1).collect();
        let err = grad_check_coords(
            |g, xv| {
                let mut vars = enc.bind(g, false);
                vars[which] = xv;
                let states = enc.forward(g, &vars, &batch)?;
                let raw = enc.pool_raw(g, states, &batch)?;
                let e = enc.embed_dim(g, raw, 16)?;
                let tgt = g.constant(Tensor::new(&[3, 16], target.clone())?);
                let p = g.mul(e, tgt)?;
                let s = g.sum(p);
                Ok(g.exp(s))
            },
            &x,
            1e-6,
            coords,
        )
        .unwrap();
        assert!(err < 1e-3, "param {}: {err}", enc.params()[which].0);
    }
}

#[test]
fn checkpoint_roundtrip_and_config_mismatch() {
    let enc = Encoder::new(small_cfg(2, 4, 2), 5).unwrap();
    let c = enc.to_checkpoint(serde_json::json!({"note": "x"}));
    let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
    let restored = Encoder::from_checkpoint(&back, Some(enc.config())).unwrap();
    assert_eq!(restored, enc);
    let other = small_cfg(1, 4, 2);
    let err = Encoder::from_checkpoint(&back, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }));
}
