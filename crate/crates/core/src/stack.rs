//! Phase-subsampled detail stacks.
//!
//! Each stitched canvas is split into `f²` residue classes
//! `{(u, v) : u ≡ a, v ≡ b (mod f)}`, each rasterised row-major and then
//! padded (zeros at the tail) or truncated (raster prefix) to `T_v` tokens.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::exec::Exec;
use crate::linalg::Matrix;
use crate::stitch::FeatureCanvas;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error("no stitched canvas for (scale {0}, layer {1})")]
    MissingCanvas(usize, usize),
    #[error("downsample factor must be at least 1")]
    ZeroFactor,
    #[error("target stack length must be at least 1")]
    ZeroLength,
    #[error("canvases disagree on feature width ({0} vs {1})")]
    WidthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhaseOffset {
    pub a: usize,
    pub b: usize,
}

/// All `f²` offsets in lexicographic `(a, b)` order.
pub fn phase_offsets(f: usize) -> Vec<PhaseOffset> {
    (0..f)
        .flat_map(|a| (0..f).map(move |b| PhaseOffset { a, b }))
        .collect()
}

/// One phase of a canvas before length fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSequence {
    /// Canvas coordinate of each token.
    pub coords: Vec<(usize, usize)>,
    pub tokens: Matrix,
}

impl RawSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Number of `x ∈ [0, n)` with `x ≡ a (mod f)`.
pub fn residue_count(n: usize, a: usize, f: usize) -> usize {
    if a >= n {
        0
    } else {
        (n - a).div_ceil(f)
    }
}

/// Tokens of the canvas in residue class `off` mod `f`, row-major.
pub fn subsample(canvas: &FeatureCanvas, off: PhaseOffset, f: usize) -> RawSequence {
    assert!(f >= 1 && off.a < f && off.b < f, "phase offset out of range");
    let side = canvas.side;
    let coords: Vec<(usize, usize)> = (off.a..side)
        .step_by(f)
        .flat_map(|u| (off.b..side).step_by(f).map(move |v| (u, v)))
        .collect();
    let mut tokens = Matrix::zeros(coords.len(), canvas.dim());
    for (r, &(u, v)) in coords.iter().enumerate() {
        tokens.row_mut(r).copy_from_slice(canvas.token(u, v));
    }
    RawSequence { coords, tokens }
}

/// A fixed-length detail sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailStack {
    pub scale_id: usize,
    pub layer_id: usize,
    pub offset: PhaseOffset,
    /// `T_v × d_vit`.
    pub tokens: Matrix,
    /// Canvas origin of each position; `None` for padding.
    pub coords: Vec<Option<(usize, usize)>>,
    /// Length before fitting.
    pub raw_length: usize,
}

impl DetailStack {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }
}

/// Truncates to the raster prefix or zero-pads at the tail to `target_len`.
/// The returned stack's source fields are zeroed; [`build_bank`] fills them.
pub fn fit_length(seq: RawSequence, target_len: usize) -> DetailStack {
    let raw_length = seq.len();
    let dim = seq.tokens.cols;
    let keep = raw_length.min(target_len);
    let mut data = seq.tokens.data;
    data.truncate(keep * dim);
    data.resize(target_len * dim, 0.0);
    let mut coords: Vec<Option<(usize, usize)>> = seq.coords.into_iter().take(keep).map(Some).collect();
    coords.resize(target_len, None);
    DetailStack {
        scale_id: 0,
        layer_id: 0,
        offset: PhaseOffset { a: 0, b: 0 },
        tokens: Matrix::from_vec(target_len, dim, data),
        coords,
        raw_length,
    }
}

/// Ordered collection of all detail stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct StackBank {
    /// Lexicographic in `(scale, layer, a, b)`.
    pub stacks: Vec<DetailStack>,
    pub factor: usize,
    pub scales: Vec<usize>,
    pub layers: Vec<usize>,
    pub target_len: usize,
}

impl StackBank {
    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.stacks.first().map_or(0, |s| s.tokens.cols)
    }

    /// `|S| · |L| · f²`.
    pub fn expected_len(&self) -> usize {
        self.scales.len() * self.layers.len() * self.factor * self.factor
    }
}

pub fn build_bank(
    canvases: &BTreeMap<(usize, usize), FeatureCanvas>,
    scales: &[usize],
    layers: &[usize],
    f: usize,
    target_len: usize,
    exec: Exec,
) -> Result<StackBank, StackError> {
    if f == 0 {
        return Err(StackError::ZeroFactor);
    }
    if target_len == 0 {
        return Err(StackError::ZeroLength);
    }
    let mut scales = scales.to_vec();
    scales.sort_unstable();
    scales.dedup();
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();

    let mut jobs = Vec::with_capacity(scales.len() * layers.len() * f * f);
    let mut dim = None;
    for &s in &scales {
        for &l in &layers {
            let canvas = canvases.get(&(s, l)).ok_or(StackError::MissingCanvas(s, l))?;
            match dim {
                None => dim = Some(canvas.dim()),
                Some(d) if d != canvas.dim() => return Err(StackError::WidthMismatch(d, canvas.dim())),
                _ => {}
            }
            for off in phase_offsets(f) {
                jobs.push((s, l, off, canvas));
            }
        }
    }
    let stacks = exec.map_slice(&jobs, |&(s, l, off, canvas)| {
        let mut st = fit_length(subsample(canvas, off, f), target_len);
        st.scale_id = s;
        st.layer_id = l;
        st.offset = off;
        st
    });
    Ok(StackBank {
        stacks,
        factor: f,
        scales,
        layers,
        target_len,
    })
}
