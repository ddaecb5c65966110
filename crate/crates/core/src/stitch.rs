//! Hann-weighted overlap-add of window token grids onto the canvas grid.
//!
//! For canvas token `(u, v)` the stitched feature is
//! `Σ W_ij[u,v] · H_ij[u,v] / Σ W_ij[u,v]` over the windows containing it,
//! with `W_ij` the separable Hann taper of window `(i, j)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::backbone::PatchFeatureGrid;
use crate::exec::Exec;
use crate::linalg::Matrix;
use crate::planner::ScalePlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StitchError {
    #[error("no patch grid for window ({0}, {1})")]
    MissingWindow(usize, usize),
    #[error("window ({0}, {1}) supplied more than once or not part of the plan")]
    UnexpectedWindow(usize, usize),
    #[error("window ({i}, {j}) has side {found}, plan expects {expected}")]
    SideMismatch {
        i: usize,
        j: usize,
        found: usize,
        expected: usize,
    },
    #[error("window ({i}, {j}) has feature width {found}, expected {expected}")]
    WidthMismatch {
        i: usize,
        j: usize,
        found: usize,
        expected: usize,
    },
    #[error("window ({i}, {j}) belongs to (scale {scale}, layer {layer}), not the canvas being stitched")]
    SourceMismatch {
        i: usize,
        j: usize,
        scale: usize,
        layer: usize,
    },
    #[error("token ({0}, {1}) has zero accumulated weight")]
    ZeroWeight(usize, usize),
    #[error("no patches supplied")]
    Empty,
}

/// Stitched features of one (scale, layer) at canvas token resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCanvas {
    pub scale_id: usize,
    pub layer_id: usize,
    /// `T_base`.
    pub side: usize,
    /// `side²` raster rows of width `d_vit`.
    pub grid: Matrix,
    /// Accumulated Hann weight per token, raster order.
    pub weight_sums: Vec<f64>,
}

impl FeatureCanvas {
    pub fn dim(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn token(&self, u: usize, v: usize) -> &[f64] {
        self.grid.row(u * self.side + v)
    }
}

/// Half-sample-offset Hann taper `h[n] = ½(1 − cos(2π(n + ½)/t))`.
///
/// Strictly positive, exactly mirror-symmetric, and `h[n] + h[n + t/2] == 1`
/// for even `t`.
pub fn hann_1d(t: usize) -> Vec<f64> {
    let mut h: Vec<f64> = (0..t.div_ceil(2))
        .map(|n| 0.5 * (1.0 - (2.0 * PI * (n as f64 + 0.5) / t as f64).cos()))
        .collect();
    for n in t.div_ceil(2)..t {
        h.push(h[t - 1 - n]);
    }
    h
}

/// `t × t` outer product `h ⊗ h`.
pub fn hann_weights(t: usize) -> Matrix {
    let h = hann_1d(t);
    let mut m = Matrix::zeros(t, t);
    for (r, hr) in h.iter().enumerate() {
        for (c, hc) in h.iter().enumerate() {
            m.data[r * t + c] = hr * hc;
        }
    }
    m
}

/// Windows along one axis that contain canvas coordinate `x`, ascending.
fn covering(x: usize, plan: &ScalePlan) -> std::ops::RangeInclusive<usize> {
    let (t, tau) = (plan.token_width, plan.token_stride);
    let lo = if x + 1 > t { (x + 1 - t).div_ceil(tau) } else { 0 };
    let hi = (x / tau).min(plan.windows_per_side - 1);
    lo..=hi
}

/// Blends one full set of window grids (one per window of `plan`) onto the canvas.
///
/// Each canvas token gathers from its covering windows in row-major window
/// order, so the result is the same bits for any [`Exec`] mode.
pub fn overlap_add(patches: &[PatchFeatureGrid], plan: &ScalePlan, exec: Exec) -> Result<FeatureCanvas, StitchError> {
    let first = patches.first().ok_or(StitchError::Empty)?;
    let (scale_id, layer_id, dim) = (first.scale_id, first.layer_id, first.dim());
    let n = plan.windows_per_side;
    let t = plan.token_width;

    let mut by_index: BTreeMap<(usize, usize), &PatchFeatureGrid> = BTreeMap::new();
    for p in patches {
        let (i, j) = p.window;
        if i >= n || j >= n || by_index.insert(p.window, p).is_some() {
            return Err(StitchError::UnexpectedWindow(i, j));
        }
        if p.side != t {
            return Err(StitchError::SideMismatch { i, j, found: p.side, expected: t });
        }
        if p.dim() != dim {
            return Err(StitchError::WidthMismatch { i, j, found: p.dim(), expected: dim });
        }
        if (p.scale_id, p.layer_id) != (scale_id, layer_id) {
            return Err(StitchError::SourceMismatch { i, j, scale: p.scale_id, layer: p.layer_id });
        }
    }
    let mut grids = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            grids.push(*by_index.get(&(i, j)).ok_or(StitchError::MissingWindow(i, j))?);
        }
    }

    let base = plan.base_tokens;
    let h = hann_1d(t);
    let starts = &plan.start_positions_tok;
    let rows = exec.map_range(base, |u| {
        let mut out = vec![0.0; base * dim];
        let mut weights = vec![0.0; base];
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        for v in 0..base {
            let acc = &mut out[v * dim..(v + 1) * dim];
            lo.fill(f64::INFINITY);
            hi.fill(f64::NEG_INFINITY);
            let mut wsum = 0.0;
            for i in covering(u, plan) {
                let lu = u - starts[i];
                for j in covering(v, plan) {
                    let lv = v - starts[j];
                    let w = h[lu] * h[lv];
                    let feat = grids[i * n + j].token(lu, lv);
                    for k in 0..dim {
                        acc[k] += w * feat[k];
                        lo[k] = lo[k].min(feat[k]);
                        hi[k] = hi[k].max(feat[k]);
                    }
                    wsum += w;
                }
            }
            if !(wsum > 0.0) {
                return Err(StitchError::ZeroWeight(u, v));
            }
            // the ratio is a convex combination; clamping removes rounding overshoot
            for k in 0..dim {
                acc[k] = (acc[k] / wsum).clamp(lo[k], hi[k]);
            }
            weights[v] = wsum;
        }
        Ok((out, weights))
    });

    let mut grid = Vec::with_capacity(base * base * dim);
    let mut weight_sums = Vec::with_capacity(base * base);
    for r in rows {
        let (out, w) = r?;
        grid.extend(out);
        weight_sums.extend(w);
    }
    Ok(FeatureCanvas {
        scale_id,
        layer_id,
        side: base,
        grid: Matrix::from_vec(base * base, dim, grid),
        weight_sums,
    })
}
