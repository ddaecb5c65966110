//! Projection of global and detail tokens, router fusion over detail stacks,
//! and gated residual injection into the visual positions of a hidden state.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::decoder::{DecoderParams, HiddenState};
use crate::exec::Exec;
use crate::linalg::{dot, sigmoid, softmax, Affine, LayerNorm, Matrix};
use crate::stack::StackBank;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("{what}: expected {expected} tokens, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what}: expected width {expected}, found {found}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("cannot summarize an empty token sequence")]
    Empty,
    #[error("injection layer {layer} outside 1..={depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
}

/// `U = projector(concat(G, D_1, …, D_N))` with segment bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedTokens {
    /// `(1 + N) · T_v` rows of width `d_llm`.
    pub tokens: Matrix,
    /// `T_v`.
    pub segment_len: usize,
    pub n_stacks: usize,
}

impl ProjectedTokens {
    /// Rows of the projected global segment `U[vis]`.
    pub fn vis_range(&self) -> Range<usize> {
        0..self.segment_len
    }

    /// Rows of stack segment `U_i`, `i` zero-based.
    pub fn stack_range(&self, i: usize) -> Range<usize> {
        let start = (i + 1) * self.segment_len;
        start..start + self.segment_len
    }

    pub fn stack_ranges(&self) -> Vec<Range<usize>> {
        (0..self.n_stacks).map(|i| self.stack_range(i)).collect()
    }

    pub fn vis(&self) -> Matrix {
        self.tokens.slice_rows(0, self.segment_len)
    }

    #[inline]
    pub fn stack_token(&self, i: usize, t: usize) -> &[f64] {
        self.tokens.row((i + 1) * self.segment_len + t)
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }
}

pub fn project(g: &Matrix, bank: &StackBank, projector: &Affine, exec: Exec) -> Result<ProjectedTokens, FusionError> {
    let t_v = g.rows;
    let d_vit = projector.input_dim();
    if g.cols != d_vit {
        return Err(FusionError::WidthMismatch { what: "global tokens", expected: d_vit, found: g.cols });
    }
    for st in &bank.stacks {
        if st.len() != t_v {
            return Err(FusionError::LengthMismatch { what: "detail stack", expected: t_v, found: st.len() });
        }
        if st.tokens.cols != d_vit {
            return Err(FusionError::WidthMismatch { what: "detail stack", expected: d_vit, found: st.tokens.cols });
        }
    }
    let segments: Vec<&Matrix> = std::iter::once(g).chain(bank.stacks.iter().map(|s| &s.tokens)).collect();
    let projected = exec.map_slice(&segments, |m| projector.apply_rows(m));
    let d_llm = projector.output_dim();
    let mut data = Vec::with_capacity(segments.len() * t_v * d_llm);
    for p in projected {
        data.extend(p.data);
    }
    Ok(ProjectedTokens {
        tokens: Matrix::from_vec(segments.len() * t_v, d_llm, data),
        segment_len: t_v,
        n_stacks: bank.len(),
    })
}

/// Mean pooling over positions.
pub fn summarize(tokens: &Matrix) -> Result<Vec<f64>, FusionError> {
    tokens.mean_row().ok_or(FusionError::Empty)
}

/// Per-layer router, gate and detail-path parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionParams {
    pub router_q: Affine,
    pub router_k: Affine,
    /// `2·d_llm → d_llm`, followed by a sigmoid.
    pub gate: Affine,
    pub proj: Affine,
    pub residual_scale: f64,
    pub ln_hidden: LayerNorm,
    pub ln_detail: LayerNorm,
}

impl InjectionParams {
    /// Seeded parameters with the residual scale at 0. The detail projection
    /// starts near the identity.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut proj = Affine::identity(d);
        let noise = 0.1 / (d as f64).sqrt();
        for w in proj.weight.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w += noise * z;
        }
        Self {
            router_q: Affine::random(d, d, 0.1, rng),
            router_k: Affine::random(d, d, 0.1, rng),
            gate: Affine::random(2 * d, d, 0.0, rng),
            proj,
            residual_scale: 0.0,
            ln_hidden: LayerNorm::new(d),
            ln_detail: LayerNorm::new(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    /// `K_iᵀ Q / √d_llm`.
    pub logits: Vec<f64>,
    /// Softmax of `logits`, one weight per stack.
    pub alpha: Vec<f64>,
    /// `M`, `T_v × d_llm`.
    pub fused: Matrix,
}

/// Router logits from the visual-stream summary and each stack summary.
pub fn router_logits(h_vis: &Matrix, u: &ProjectedTokens, p: &InjectionParams) -> Result<Vec<f64>, FusionError> {
    if h_vis.rows != u.segment_len {
        return Err(FusionError::LengthMismatch { what: "visual slice", expected: u.segment_len, found: h_vis.rows });
    }
    if h_vis.cols != u.dim() {
        return Err(FusionError::WidthMismatch { what: "visual slice", expected: u.dim(), found: h_vis.cols });
    }
    let q = p.router_q.apply(&summarize(h_vis)?);
    let scale = (u.dim() as f64).sqrt();
    (0..u.n_stacks)
        .map(|i| {
            let seg = u.tokens.slice_rows(u.stack_range(i).start, u.segment_len);
            let k = p.router_k.apply(&summarize(&seg)?);
            Ok(dot(&k, &q) / scale)
        })
        .collect()
}

/// `M_t = Σ_i α_i U_i[t]`, same weights at every position.
pub fn fuse_with_weights(alpha: &[f64], u: &ProjectedTokens) -> Matrix {
    let d = u.dim();
    let mut m = Matrix::zeros(u.segment_len, d);
    for t in 0..u.segment_len {
        let out = m.row_mut(t);
        for (i, &a) in alpha.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(u.stack_token(i, t)) {
                *o += a * x;
            }
        }
    }
    m
}

pub fn router_fuse(h_vis: &Matrix, u: &ProjectedTokens, p: &InjectionParams) -> Result<RouterOutput, FusionError> {
    let logits = router_logits(h_vis, u, p)?;
    let alpha = softmax(&logits);
    let fused = fuse_with_weights(&alpha, u);
    Ok(RouterOutput { logits, alpha, fused })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// `g`, entries in `(0, 1)`.
    pub gate: Matrix,
    /// `δ = g ⊙ Proj(LN(M))`.
    pub delta: Matrix,
}

pub fn gate_and_delta(h_vis: &Matrix, m: &Matrix, p: &InjectionParams) -> Result<GateOutput, FusionError> {
    if h_vis.rows != m.rows {
        return Err(FusionError::LengthMismatch { what: "fused detail", expected: h_vis.rows, found: m.rows });
    }
    if h_vis.cols != m.cols {
        return Err(FusionError::WidthMismatch { what: "fused detail", expected: h_vis.cols, found: m.cols });
    }
    let d = m.cols;
    let mut gate = Matrix::zeros(m.rows, d);
    let mut delta = Matrix::zeros(m.rows, d);
    let mut cat = vec![0.0; 2 * d];
    let mut detail = vec![0.0; d];
    for t in 0..m.rows {
        let (hn, mn) = cat.split_at_mut(d);
        p.ln_hidden.apply_into(h_vis.row(t), hn);
        p.ln_detail.apply_into(m.row(t), mn);
        p.proj.apply_into(mn, &mut detail);
        let g = gate.row_mut(t);
        p.gate.apply_into(&cat, g);
        g.iter_mut().for_each(|x| *x = sigmoid(*x));
        for ((o, gk), dk) in delta.row_mut(t).iter_mut().zip(gate.row(t)).zip(&detail) {
            *o = gk * dk;
        }
    }
    Ok(GateOutput { gate, delta })
}

/// `H[vis]_t += s · δ_t`; every other position is copied unchanged.
pub fn inject(h: &HiddenState, delta: &Matrix, scale: f64) -> Result<HiddenState, FusionError> {
    if delta.rows != h.vis_len {
        return Err(FusionError::LengthMismatch { what: "injection delta", expected: h.vis_len, found: delta.rows });
    }
    if delta.cols != h.states.cols {
        return Err(FusionError::WidthMismatch { what: "injection delta", expected: h.states.cols, found: delta.cols });
    }
    let mut out = h.clone();
    // a zero scale is an exact no-op (also keeps -0.0 entries intact)
    if scale == 0.0 {
        return Ok(out);
    }
    for t in 0..h.vis_len {
        for (x, d) in out.states.row_mut(h.vis_start + t).iter_mut().zip(delta.row(t)) {
            *x += scale * d;
        }
    }
    Ok(out)
}

/// Everything the fusion side of the pipeline needs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub projector: Affine,
    pub decoder: DecoderParams,
    /// `injection[l - 1]` belongs to decoder layer `l`.
    pub injection: Vec<InjectionParams>,
}

impl FusionParams {
    pub fn random<R: Rng + ?Sized>(d_vit: usize, d_llm: usize, depth: usize, mix_width: usize, rng: &mut R) -> Self {
        let projector = Affine::random(d_vit, d_llm, 0.1, rng);
        let decoder = DecoderParams::random(d_llm, depth, mix_width, rng);
        let injection = (0..depth).map(|_| InjectionParams::random(d_llm, rng)).collect();
        Self {
            projector,
            decoder,
            injection,
        }
    }

    pub fn set_residual_scales(&mut self, scale: f64) {
        self.injection.iter_mut().for_each(|p| p.residual_scale = scale);
    }

    pub fn depth(&self) -> usize {
        self.decoder.layers.len()
    }
}
