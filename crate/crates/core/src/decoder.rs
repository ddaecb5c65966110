//! Toy causal decoder with gated detail injection at selected layers.
//!
//! A layer computes `H + tanh(A · Σ_k c_k · LN(H)_{t−k})` over a causal
//! window of `mix_width` positions. After a selected layer's residual the
//! router/gate/inject sequence from [`crate::fusion`] updates the visual
//! positions before the next layer runs.

use rand::Rng;

use crate::exec::Exec;
use crate::fusion::{self, FusionError, FusionParams, ProjectedTokens};
use crate::linalg::{cosine, Affine, LayerNorm, Matrix};
use crate::stack::StackBank;

/// Decoder hidden states with a marked contiguous visual slice.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    /// `T × d_llm`.
    pub states: Matrix,
    pub vis_start: usize,
    pub vis_len: usize,
}

impl HiddenState {
    pub fn vis(&self) -> Matrix {
        self.states.slice_rows(self.vis_start, self.vis_len)
    }

    pub fn vis_range(&self) -> std::ops::Range<usize> {
        self.vis_start..self.vis_start + self.vis_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm: LayerNorm,
    /// `c_0` weights the current position, `c_k` the one `k` steps back.
    pub mix: Vec<f64>,
    pub map: Affine,
}

impl DecoderLayer {
    pub fn forward(&self, h: &Matrix) -> Matrix {
        let x = self.norm.apply_rows(h);
        let mut out = h.clone();
        let mut mixed = vec![0.0; h.cols];
        let mut y = vec![0.0; h.cols];
        for t in 0..h.rows {
            mixed.fill(0.0);
            for (k, c) in self.mix.iter().enumerate().take(t + 1) {
                for (m, v) in mixed.iter_mut().zip(x.row(t - k)) {
                    *m += c * v;
                }
            }
            self.map.apply_into(&mixed, &mut y);
            for (o, v) in out.row_mut(t).iter_mut().zip(&y) {
                *o += v.tanh();
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayer>,
}

impl DecoderParams {
    pub fn random<R: Rng + ?Sized>(d: usize, depth: usize, mix_width: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|_| {
                let mut mix = vec![1.0];
                mix.extend((1..mix_width).map(|_| rng.random_range(-0.5..0.5)));
                DecoderLayer {
                    norm: LayerNorm::new(d),
                    mix,
                    map: Affine::random(d, d, 0.1, rng),
                }
            })
            .collect();
        Self { layers }
    }
}

/// One decoder layer's output and the injection diagnostics, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// 1-based.
    pub layer: usize,
    /// State after the layer (and after injection when it ran).
    pub state: HiddenState,
    pub vis_norm: f64,
    /// `‖δ‖`, zero when the layer does not inject.
    pub delta_norm: f64,
    pub alpha: Option<Vec<f64>>,
    pub fused: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub projected: ProjectedTokens,
    pub initial: HiddenState,
    pub layers: Vec<LayerRecord>,
}

impl Trace {
    /// Hidden states only, `H⁽⁰⁾` first.
    pub fn states(&self) -> Vec<&HiddenState> {
        std::iter::once(&self.initial)
            .chain(self.layers.iter().map(|r| &r.state))
            .collect()
    }

    pub fn final_state(&self) -> &HiddenState {
        self.layers.last().map_or(&self.initial, |r| &r.state)
    }
}

/// Checks layer ids against `1..=depth` and returns them sorted, deduplicated.
pub fn validate_inject_layers(inject_layers: &[usize], depth: usize) -> Result<Vec<usize>, FusionError> {
    let mut v = inject_layers.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&layer) = v.iter().find(|&&l| l == 0 || l > depth) {
        return Err(FusionError::LayerOutOfRange { layer, depth });
    }
    Ok(v)
}

/// Projects `G` and the bank once, then runs the decoder.
pub fn decoder_forward(
    g: &Matrix,
    text: &Matrix,
    bank: &StackBank,
    params: &FusionParams,
    inject_layers: &[usize],
    exec: Exec,
) -> Result<Trace, FusionError> {
    let u = fusion::project(g, bank, &params.projector, exec)?;
    run_decoder(u, text, params, inject_layers)
}

/// Runs the decoder on `[text; U[vis]]`, injecting at `inject_layers`.
pub fn run_decoder(
    u: ProjectedTokens,
    text: &Matrix,
    params: &FusionParams,
    inject_layers: &[usize],
) -> Result<Trace, FusionError> {
    let depth = params.depth();
    let inject_at = validate_inject_layers(inject_layers, depth)?;
    if text.cols != u.dim() {
        return Err(FusionError::WidthMismatch { what: "text embedding", expected: u.dim(), found: text.cols });
    }
    let mut data = text.data.clone();
    data.extend_from_slice(&u.tokens.data[..u.segment_len * u.dim()]);
    let initial = HiddenState {
        states: Matrix::from_vec(text.rows + u.segment_len, u.dim(), data),
        vis_start: text.rows,
        vis_len: u.segment_len,
    };

    let mut h = initial.clone();
    let mut layers = Vec::with_capacity(depth);
    for (idx, layer) in params.decoder.layers.iter().enumerate() {
        let l = idx + 1;
        h.states = layer.forward(&h.states);
        let (mut alpha, mut fused, mut delta_norm) = (None, None, 0.0);
        if inject_at.binary_search(&l).is_ok() {
            let p = &params.injection[idx];
            let vis = h.vis();
            let routed = fusion::router_fuse(&vis, &u, p)?;
            let gd = fusion::gate_and_delta(&vis, &routed.fused, p)?;
            h = fusion::inject(&h, &gd.delta, p.residual_scale)?;
            delta_norm = gd.delta.norm();
            alpha = Some(routed.alpha);
            fused = Some(routed.fused);
        }
        layers.push(LayerRecord {
            layer: l,
            vis_norm: h.vis().norm(),
            state: h.clone(),
            delta_norm,
            alpha,
            fused,
        });
    }
    Ok(Trace {
        projected: u,
        initial,
        layers,
    })
}

/// Mean over visual positions of the cosine between the final visual slice
/// and the fused detail that the last layer's router produces from it.
pub fn retention_score(trace: &Trace, params: &FusionParams) -> Result<f64, FusionError> {
    let last = params.injection.last().ok_or(FusionError::LayerOutOfRange { layer: 0, depth: 0 })?;
    let vis = trace.final_state().vis();
    let m = fusion::router_fuse(&vis, &trace.projected, last)?.fused;
    let total: f64 = (0..vis.rows).map(|t| cosine(vis.row(t), m.row(t))).sum();
    Ok(total / vis.rows as f64)
}
