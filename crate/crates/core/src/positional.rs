//! MSRoPE: multimodal rotary position embeddings.
//!
//! Image tokens get integer (frame, row, col) ids centered on the image
//! middle; text tokens sit on the lattice diagonal (row == col). An optional
//! frame axis distinguishes the condition image from the noised target in
//! editing. Rotation is applied per channel pair inside per-axis blocks of
//! the head dimension.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionId {
    pub frame: i64,
    pub row: i64,
    pub col: i64,
}

impl PositionId {
    pub fn new(frame: i64, row: i64, col: i64) -> Self {
        PositionId { frame, row, col }
    }

    fn axis(&self, axis: usize) -> i64 {
        match axis {
            0 => self.frame,
            1 => self.row,
            _ => self.col,
        }
    }
}

/// Channel allocation for the three axes, in rotation pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// (frame_pairs, row_pairs, col_pairs); 2 * sum == head_dim.
    pub axis_split: (usize, usize, usize),
    pub base: f64,
}

impl RopeConfig {
    /// Default split for a given head dim: 2 frame pairs (frame ids are tiny
    /// integers), remaining pairs divided evenly between rows and cols.
    pub fn with_frames(head_dim: usize) -> Self {
        let pairs = head_dim / 2;
        let spatial = (pairs - 2) / 2;
        RopeConfig {
            head_dim,
            axis_split: (2, spatial, pairs - 2 - spatial),
            base: 10000.0,
        }
    }

    /// Pure text-to-image split: no frame axis.
    pub fn without_frames(head_dim: usize) -> Self {
        let pairs = head_dim / 2;
        RopeConfig {
            head_dim,
            axis_split: (0, pairs / 2, pairs - pairs / 2),
            base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim must be a positive even integer, got {}",
                self.head_dim
            )));
        }
        let (f, r, c) = self.axis_split;
        if 2 * (f + r + c) != self.head_dim {
            return Err(Error::Config(format!(
                "axis_split {:?} does not fill head_dim {}",
                self.axis_split, self.head_dim
            )));
        }
        if !(self.base > 0.0) {
            return Err(Error::Config(format!("base must be positive, got {}", self.base)));
        }
        Ok(())
    }
}

/// Precomputed per-axis angular frequencies omega_j = base^(-j / axis_pairs).
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub freqs: [Vec<f64>; 3],
}

impl RopeTable {
    pub fn new(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let (f, r, c) = cfg.axis_split;
        let make = |pairs: usize| -> Vec<f64> {
            (0..pairs)
                .map(|j| cfg.base.powf(-(j as f64) / pairs as f64))
                .collect()
        };
        Ok(RopeTable {
            freqs: [make(f), make(r), make(c)],
        })
    }

    /// Rotate one head-dim vector in place. `sign` = -1.0 applies the inverse
    /// rotation (used by the backward pass).
    pub fn rotate(&self, v: &mut [f64], id: &PositionId, sign: f64) {
        let mut ch = 0;
        for axis in 0..3 {
            let pos = id.axis(axis) as f64;
            for &omega in &self.freqs[axis] {
                let theta = sign * pos * omega;
                let (s, c) = theta.sin_cos();
                let x = v[ch];
                let y = v[ch + 1];
                v[ch] = x * c - y * s;
                v[ch + 1] = x * s + y * c;
                ch += 2;
            }
        }
    }
}

/// Centered ids for an H x W image grid, row-major.
pub fn image_position_ids(frame: i64, height: usize, width: usize) -> Result<Vec<PositionId>> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "image grid must be at least 1x1, got {height}x{width}"
        )));
    }
    if frame < 0 {
        return Err(Error::Dimension(format!("frame must be >= 0, got {frame}")));
    }
    let (h2, w2) = (height as i64 / 2, width as i64 / 2);
    let mut ids = Vec::with_capacity(height * width);
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            ids.push(PositionId::new(frame, r - h2, c - w2));
        }
    }
    Ok(ids)
}

/// Diagonal ids for text: token k sits at (0, offset + k, offset + k).
pub fn text_position_ids(offset: i64, length: usize) -> Vec<PositionId> {
    (0..length as i64)
        .map(|k| PositionId::new(0, offset + k, offset + k))
        .collect()
}

/// Where the text diagonal starts for an H x W image grid: one past the
/// farthest image corner, so text and image ids never collide.
pub fn text_diagonal_offset(height: usize, width: usize) -> i64 {
    let h = (height as i64 + 1) / 2;
    let w = (width as i64 + 1) / 2;
    h.max(w) + 1
}

/// Rotate a batch of head-dim vectors by their position ids.
pub fn apply_rotary(
    vectors: &[Vec<f64>],
    ids: &[PositionId],
    cfg: &RopeConfig,
) -> Result<Vec<Vec<f64>>> {
    if vectors.len() != ids.len() {
        return Err(Error::shape(
            format!("{} position ids", vectors.len()),
            format!("{}", ids.len()),
        ));
    }
    let table = RopeTable::new(cfg)?;
    let mut out = Vec::with_capacity(vectors.len());
    for (v, id) in vectors.iter().zip(ids) {
        if v.len() != cfg.head_dim {
            return Err(Error::shape(
                format!("head_dim {}", cfg.head_dim),
                format!("{}", v.len()),
            ));
        }
        let mut r = v.clone();
        table.rotate(&mut r, id, 1.0);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_image_ids_2x2() {
        let ids = image_position_ids(0, 2, 2).unwrap();
        let want = [(0, -1, -1), (0, -1, 0), (0, 0, -1), (0, 0, 0)];
        let got: Vec<_> = ids.iter().map(|p| (p.frame, p.row, p.col)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn single_token_sits_at_center() {
        let ids = image_position_ids(0, 1, 1).unwrap();
        assert_eq!(ids, vec![PositionId::new(0, 0, 0)]);
    }

    #[test]
    fn frame_one_3x3_ranges() {
        let ids = image_position_ids(1, 3, 3).unwrap();
        assert_eq!(ids.len(), 9);
        let rows: std::collections::BTreeSet<_> = ids.iter().map(|p| p.row).collect();
        let cols: std::collections::BTreeSet<_> = ids.iter().map(|p| p.col).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![-1, 0, 1]);
        assert_eq!(cols.into_iter().collect::<Vec<_>>(), vec![-1, 0, 1]);
        assert!(ids.iter().all(|p| p.frame == 1));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(image_position_ids(0, 0, 2).is_err());
        assert!(image_position_ids(0, 2, 0).is_err());
    }

    #[test]
    fn text_ids_on_diagonal() {
        let ids = text_position_ids(5, 3);
        let got: Vec<_> = ids.iter().map(|p| (p.frame, p.row, p.col)).collect();
        assert_eq!(got, vec![(0, 5, 5), (0, 6, 6), (0, 7, 7)]);
        assert!(text_position_ids(0, 0).is_empty());
        assert_eq!(text_position_ids(2, 1), vec![PositionId::new(0, 2, 2)]);
    }

    #[test]
    fn zero_ids_are_identity() {
        let cfg = RopeConfig::without_frames(8);
        let v = vec![vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0, -1.0, 2.0]];
        let ids = vec![PositionId::new(0, 0, 0)];
        let out = apply_rotary(&v, &ids, &cfg).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn first_row_pair_rotation_hand_value() {
        // head_dim 4, no frame axis, 1 row pair + 1 col pair; omega_0 = 1.
        let cfg = RopeConfig {
            head_dim: 4,
            axis_split: (0, 1, 1),
            base: 10000.0,
        };
        let v = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let ids = vec![PositionId::new(0, 1, 0)];
        let out = apply_rotary(&v, &ids, &cfg).unwrap();
        assert!((out[0][0] - 1f64.cos()).abs() < 1e-15);
        assert!((out[0][1] - 1f64.sin()).abs() < 1e-15);
        assert_eq!(&out[0][2..], &[0.0, 0.0]);
    }

    #[test]
    fn frequencies_strictly_decreasing() {
        let table = RopeTable::new(&RopeConfig::with_frames(16)).unwrap();
        for freqs in &table.freqs {
            for w in freqs.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let cfg = RopeConfig::without_frames(4);
        let v = vec![vec![1.0, 0.0, 0.0, 0.0]];
        assert!(apply_rotary(&v, &[], &cfg).is_err());
        let ids = vec![PositionId::new(0, 0, 0)];
        let short = vec![vec![1.0, 0.0]];
        assert!(apply_rotary(&short, &ids, &cfg).is_err());
    }

    #[test]
    fn joint_layout_has_no_id_collisions() {
        let (h, w) = (8, 8);
        let mut all = image_position_ids(0, h, w).unwrap();
        all.extend(text_position_ids(text_diagonal_offset(h, w), 10));
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RopeConfig {
            head_dim: 7,
            axis_split: (0, 2, 1),
            base: 10000.0
        }
        .validate()
        .is_err());
        assert!(RopeConfig {
            head_dim: 8,
            axis_split: (0, 1, 1),
            base: 10000.0
        }
        .validate()
        .is_err());
    }
}
