//! Randomized property suite for the multimodal rotary embedding:
//! relative-position invariance, norm preservation, and text-side
//! equivalence to an independently written 1D rotary reference.

use flowlab_core::positional::{apply_rotary, PositionId, RopeConfig};
use flowlab_core::rng::derive_rng;
use rand::Rng as _;

const INSTANCES: usize = 1000;

fn rand_vec(rng: &mut flowlab_core::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn rand_id(rng: &mut flowlab_core::Rng) -> PositionId {
    PositionId::new(
        rng.gen_range(0..3),
        rng.gen_range(-20..20),
        rng.gen_range(-20..20),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn attention_logits_depend_only_on_relative_position() {
    let cfg = RopeConfig::with_frames(16);
    let mut rng = derive_rng(100, 0);
    for _ in 0..INSTANCES {
        let q = rand_vec(&mut rng, cfg.head_dim);
        let k = rand_vec(&mut rng, cfg.head_dim);
        let a = rand_id(&mut rng);
        let b = rand_id(&mut rng);
        let shift = rand_id(&mut rng);
        let sa = PositionId::new(a.frame + shift.frame, a.row + shift.row, a.col + shift.col);
        let sb = PositionId::new(b.frame + shift.frame, b.row + shift.row, b.col + shift.col);
        let base = {
            let r = apply_rotary(&[q.clone(), k.clone()], &[a, b], &cfg).unwrap();
            dot(&r[0], &r[1])
        };
        let shifted = {
            let r = apply_rotary(&[q.clone(), k.clone()], &[sa, sb], &cfg).unwrap();
            dot(&r[0], &r[1])
        };
        assert!(
            (base - shifted).abs() < 1e-12,
            "logit changed under global shift: {base} vs {shifted}"
        );
    }
}

#[test]
fn rotation_preserves_vector_norm() {
    let cfg = RopeConfig::with_frames(16);
    let mut rng = derive_rng(101, 0);
    for _ in 0..INSTANCES {
        let v = rand_vec(&mut rng, cfg.head_dim);
        let id = rand_id(&mut rng);
        let r = apply_rotary(&[v.clone()], &[id], &cfg).unwrap();
        let n0 = dot(&v, &v).sqrt();
        let n1 = dot(&r[0], &r[0]).sqrt();
        assert!((n0 - n1).abs() < 1e-12, "norm {n0} became {n1}");
    }
}

/// Plain 1D rotary, written from scratch: channel pair j rotates by
/// position * freqs[j].
fn rotary_1d(v: &[f64], pos: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (j, &w) in freqs.iter().enumerate() {
        let theta = pos * w;
        let (s, c) = theta.sin_cos();
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = x * c - y * s;
        out[2 * j + 1] = x * s + y * c;
    }
    out
}

#[test]
fn text_tokens_match_a_reference_1d_rotary() {
    // no frame axis; text ids are diagonal, so each token has one scalar
    // position and the multimodal rotation must collapse to 1D rotary with
    // the concatenated per-axis frequency layout
    let cfg = RopeConfig::without_frames(16);
    let (_, row_pairs, col_pairs) = cfg.axis_split;
    let mut freqs: Vec<f64> = (0..row_pairs)
        .map(|j| cfg.base.powf(-(j as f64) / row_pairs as f64))
        .collect();
    freqs.extend((0..col_pairs).map(|j| cfg.base.powf(-(j as f64) / col_pairs as f64)));

    let mut rng = derive_rng(102, 0);
    for _ in 0..INSTANCES {
        let q = rand_vec(&mut rng, cfg.head_dim);
        let k = rand_vec(&mut rng, cfg.head_dim);
        let p: i64 = rng.gen_range(0..64);
        let s: i64 = rng.gen_range(0..64);
        let got = {
            let ids = [PositionId::new(0, p, p), PositionId::new(0, s, s)];
            let r = apply_rotary(&[q.clone(), k.clone()], &ids, &cfg).unwrap();
            dot(&r[0], &r[1])
        };
        let want = dot(
            &rotary_1d(&q, p as f64, &freqs),
            &rotary_1d(&k, s as f64, &freqs),
        );
        assert!(
            (got - want).abs() < 1e-10,
            "text logit {got} vs 1D reference {want} at positions ({p}, {s})"
        );
    }
}
