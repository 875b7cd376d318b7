//! Toy datasets and rewards: micro-glyph rendering on a small canvas, glyph
//! editing pairs, and 2-D Gaussian mixtures.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Fixed 5x7 bitmap font: digits 0-9 plus A, E, H, O, T, U.
const FONT: [(char, [&str; GLYPH_H]); 16] = [
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
    ('A', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('E', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('H', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('O', ["01110", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('T', ["11111", "00100", "00100", "00100", "00100", "00100", "00100"]),
    ('U', ["10001", "10001", "10001", "10001", "10001", "10001", "01110"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub canvas: usize,
    /// Top-left (row, col) of the glyph template on the canvas.
    pub placement: (usize, usize),
}

impl Default for GlyphSpec {
    fn default() -> Self {
        // center the 5x7 template on a 16x16 canvas
        GlyphSpec { canvas: 16, placement: (4, 5) }
    }
}

impl GlyphSpec {
    pub fn charset(&self) -> Vec<char> {
        FONT.iter().map(|(c, _)| *c).collect()
    }

    pub fn char_index(&self, ch: char) -> Result<usize> {
        FONT.iter()
            .position(|(c, _)| *c == ch)
            .ok_or(Error::Charset(ch))
    }

    pub fn char_at(&self, index: usize) -> char {
        FONT[index].0
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < GLYPH_H {
            return Err(Error::Config(format!(
                "canvas {} too small for a {GLYPH_W}x{GLYPH_H} template",
                self.canvas
            )));
        }
        let (r, c) = self.placement;
        if r + GLYPH_H > self.canvas || c + GLYPH_W > self.canvas {
            return Err(Error::Config(format!(
                "placement {:?} pushes the template off a {} canvas",
                self.placement, self.canvas
            )));
        }
        Ok(())
    }
}

/// Deterministic bitmap: background 0, strokes 1.
pub fn render_glyph(spec: &GlyphSpec, ch: char) -> Result<Tensor> {
    spec.validate()?;
    let idx = spec.char_index(ch)?;
    let rows = &FONT[idx].1;
    let mut canvas = Tensor::zeros(vec![spec.canvas, spec.canvas]);
    let (r0, c0) = spec.placement;
    for (r, row) in rows.iter().enumerate() {
        for (c, bit) in row.bytes().enumerate() {
            if bit == b'1' {
                canvas.data[(r0 + r) * spec.canvas + c0 + c] = 1.0;
            }
        }
    }
    Ok(canvas)
}

/// 1 - mean absolute pixel error against the rendered target, clipped to [0,1].
pub fn glyph_reward(sample: &Tensor, target_char: char, spec: &GlyphSpec) -> Result<f64> {
    let target = render_glyph(spec, target_char)?;
    if sample.len() != target.len() {
        return Err(Error::shape(
            format!("{} pixels", target.len()),
            format!("{}", sample.len()),
        ));
    }
    let err = sample
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
        / target.len() as f64;
    Ok((1.0 - err).clamp(0.0, 1.0))
}

/// Mean pixel agreement between two canvases: 1 - mean |a - b|, clipped.
pub fn pixel_agreement(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let err = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64;
    Ok((1.0 - err).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Invert,
    Hflip,
    Vshift1,
}

impl EditOp {
    pub const ALL: [EditOp; 3] = [EditOp::Invert, EditOp::Hflip, EditOp::Vshift1];

    pub fn parse(s: &str) -> Result<EditOp> {
        match s {
            "invert" => Ok(EditOp::Invert),
            "hflip" => Ok(EditOp::Hflip),
            "vshift1" => Ok(EditOp::Vshift1),
            other => Err(Error::EditOp(other.into())),
        }
    }

    /// Prompt-token id for this instruction, placed after the 16 glyph ids.
    pub fn token(&self) -> usize {
        16 + *self as usize
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        let n = img.shape[0];
        let w = img.shape[1];
        let mut out = Tensor::zeros(img.shape.clone());
        match self {
            EditOp::Invert => {
                for i in 0..img.len() {
                    out.data[i] = 1.0 - img.data[i];
                }
            }
            EditOp::Hflip => {
                for r in 0..n {
                    for c in 0..w {
                        out.data[r * w + c] = img.data[r * w + (w - 1 - c)];
                    }
                }
            }
            EditOp::Vshift1 => {
                for r in 1..n {
                    for c in 0..w {
                        out.data[r * w + c] = img.data[(r - 1) * w + c];
                    }
                }
            }
        }
        out
    }
}

/// Deterministic (condition, target, instruction token) triple.
pub fn make_edit_pair(spec: &GlyphSpec, ch: char, op: EditOp) -> Result<(Tensor, Tensor, usize)> {
    let condition = render_glyph(spec, ch)?;
    let target = op.apply(&condition);
    Ok((condition, target, op.token()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<[f64; 2]>,
    /// Shared 2x2 covariance, row-major.
    pub covariance: [[f64; 2]; 2],
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn single_gaussian(mean: [f64; 2]) -> Self {
        MixtureSpec {
            means: vec![mean],
            covariance: [[1.0, 0.0], [0.0, 1.0]],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(Error::Config("means and weights must be non-empty and equal length".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!("weights must be a simplex vector, sum {sum}")));
        }
        let c = &self.covariance;
        if (c[0][1] - c[1][0]).abs() > 1e-12 {
            return Err(Error::Config("covariance must be symmetric".into()));
        }
        if c[0][0] < 0.0 || c[0][0] * c[1][1] - c[0][1] * c[1][0] < 0.0 {
            return Err(Error::Config("covariance must be positive semi-definite".into()));
        }
        Ok(())
    }

    /// Lower Cholesky factor of the covariance.
    fn chol(&self) -> [[f64; 2]; 2] {
        let c = &self.covariance;
        let l00 = c[0][0].sqrt();
        let l10 = if l00 > 0.0 { c[1][0] / l00 } else { 0.0 };
        let l11 = (c[1][1] - l10 * l10).max(0.0).sqrt();
        [[l00, 0.0], [l10, l11]]
    }
}

/// n i.i.d. draws from the mixture, each a 2-vector.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Dimension("n must be >= 1".into()));
    }
    let l = spec.chol();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut k = 0;
        let mut acc = 0.0;
        for (i, &w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
            k = i;
        }
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        out.push([
            spec.means[k][0] + l[0][0] * z0,
            spec.means[k][1] + l[1][0] * z0 + l[1][1] * z1,
        ]);
    }
    Ok(out)
}

/// Write a canvas as a binary PGM (P5, maxval 255), values clipped to [0,1].
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape[0], img.shape[1]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn render_is_deterministic_with_correct_stroke_count() {
        let spec = GlyphSpec::default();
        let a = render_glyph(&spec, 'A').unwrap();
        let b = render_glyph(&spec, 'A').unwrap();
        assert_eq!(a.data, b.data);
        let strokes: f64 = FONT[10]
            .1
            .iter()
            .map(|r| r.bytes().filter(|&b| b == b'1').count() as f64)
            .sum();
        assert_eq!(a.data.iter().sum::<f64>(), strokes);
    }

    #[test]
    fn unknown_char_rejected() {
        assert!(matches!(
            render_glyph(&GlyphSpec::default(), 'Z'),
            Err(Error::Charset('Z'))
        ));
    }

    #[test]
    fn reward_extremes() {
        let spec = GlyphSpec::default();
        let target = render_glyph(&spec, '7').unwrap();
        assert_eq!(glyph_reward(&target, '7', &spec).unwrap(), 1.0);
        let inverted = target.map(|v| 1.0 - v);
        assert_eq!(glyph_reward(&inverted, '7', &spec).unwrap(), 0.0);
        let half = Tensor::new(target.shape.clone(), vec![0.5; target.len()]);
        assert!((glyph_reward(&half, '7', &spec).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reward_maximized_by_target_over_binary_canvases() {
        let spec = GlyphSpec::default();
        let target = render_glyph(&spec, '3').unwrap();
        let mut rng = derive_rng(4, 0);
        for _ in 0..50 {
            let mut other = target.clone();
            // flip a random non-empty pixel subset
            let flips = rand::Rng::gen_range(&mut rng, 1..10);
            for _ in 0..flips {
                let i = rand::Rng::gen_range(&mut rng, 0..other.len());
                other.data[i] = 1.0 - other.data[i];
            }
            if other.data == target.data {
                continue;
            }
            assert!(glyph_reward(&other, '3', &spec).unwrap() < 1.0);
        }
    }

    #[test]
    fn edit_ops_behave() {
        let spec = GlyphSpec::default();
        let (cond, target, token) = make_edit_pair(&spec, 'A', EditOp::Invert).unwrap();
        assert_eq!(token, 16);
        assert_eq!(EditOp::Invert.apply(&target).data, cond.data);
        // hflip of a symmetric glyph is itself (template and placement centered)
        let spec_sym = GlyphSpec { canvas: 15, placement: (4, 5) };
        let o = render_glyph(&spec_sym, 'O').unwrap();
        assert_eq!(EditOp::Hflip.apply(&o).data, o.data);
        let (_, down, _) = make_edit_pair(&spec, 'H', EditOp::Vshift1).unwrap();
        let h = render_glyph(&spec, 'H').unwrap();
        assert_eq!(down.data.iter().sum::<f64>(), h.data.iter().sum::<f64>());
        for r in 1..spec.canvas {
            for c in 0..spec.canvas {
                assert_eq!(down.data[r * spec.canvas + c], h.data[(r - 1) * spec.canvas + c]);
            }
        }
        assert!(EditOp::parse("blur").is_err());
        // hflip is an involution on any canvas
        assert_eq!(EditOp::Hflip.apply(&EditOp::Hflip.apply(&h)).data, h.data);
    }

    #[test]
    fn mixture_sampling_statistics() {
        let spec = MixtureSpec::single_gaussian([2.0, -1.0]);
        let n = 100_000;
        let pts = sample_mixture(&spec, n, &mut derive_rng(70, 0)).unwrap();
        let mut mean = [0.0, 0.0];
        for p in &pts {
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        let bound = 3.0 / (n as f64).sqrt();
        assert!((mean[0] - 2.0).abs() < bound);
        assert!((mean[1] + 1.0).abs() < bound);
    }

    #[test]
    fn mixture_zero_covariance_and_degenerate_weights() {
        let mut spec = MixtureSpec::single_gaussian([0.5, 0.25]);
        spec.covariance = [[0.0, 0.0], [0.0, 0.0]];
        let pts = sample_mixture(&spec, 10, &mut derive_rng(8, 0)).unwrap();
        assert!(pts.iter().all(|p| p == &[0.5, 0.25]));

        let spec = MixtureSpec {
            means: vec![[0.0, 0.0], [100.0, 100.0]],
            covariance: [[1.0, 0.0], [0.0, 1.0]],
            weights: vec![1.0, 0.0],
        };
        let pts = sample_mixture(&spec, 1000, &mut derive_rng(9, 0)).unwrap();
        assert!(pts.iter().all(|p| p[0] < 50.0 && p[1] < 50.0));
    }

    #[test]
    fn seeded_generation_reproduces_bitwise() {
        let spec = MixtureSpec::single_gaussian([0.0, 0.0]);
        let a = sample_mixture(&spec, 100, &mut derive_rng(11, 3)).unwrap();
        let b = sample_mixture(&spec, 100, &mut derive_rng(11, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pgm_output_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, -0.2, 1.5, 0.25]);
        write_pgm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0u8, 128, 255, 0, 255, 64]);
    }
}
