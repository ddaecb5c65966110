//! Seeded stand-in for the vision encoder.
//!
//! Each `p × p` pixel patch is flattened and embedded with an affine map;
//! block `k` then applies its own affine map followed by `tanh`. The output
//! of layer `ℓ` is the state after `ℓ` blocks, so deeper layers are
//! different functions of the input. There is no token mixing: a token
//! depends only on its own pixels.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{bilinear_resample, Image, CHANNELS};
use crate::linalg::{Affine, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("side {side} px is not divisible by patch side {patch} px")]
    NotDivisible { side: usize, patch: usize },
    #[error("at least one encoder layer must be selected")]
    NoLayers,
    #[error("encoder layer ids start at 1, found 0")]
    ZeroLayer,
    #[error("feature width must be positive")]
    ZeroWidth,
    #[error("patch side must be positive")]
    ZeroPatch,
}

/// Token features of one window at one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureGrid {
    pub scale_id: usize,
    pub layer_id: usize,
    /// Window lattice index `(i, j)`.
    pub window: (usize, usize),
    /// Tokens per side.
    pub side: usize,
    /// `side²` rows in raster order, `d_vit` columns.
    pub features: Matrix,
}

impl PatchFeatureGrid {
    pub fn dim(&self) -> usize {
        self.features.cols
    }

    #[inline]
    pub fn token(&self, u: usize, v: usize) -> &[f64] {
        self.features.row(u * self.side + v)
    }

    /// Bilinear resampling of the token grid to `new_side × new_side`.
    pub fn resampled(&self, new_side: usize) -> PatchFeatureGrid {
        if new_side == self.side {
            return self.clone();
        }
        let d = self.dim();
        let data = bilinear_resample(&self.features.data, self.side, self.side, d, new_side, new_side);
        PatchFeatureGrid {
            side: new_side,
            features: Matrix::from_vec(new_side * new_side, d, data),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub seed: u64,
    pub d_vit: usize,
    /// Ascending, 1-based.
    pub layer_ids: Vec<usize>,
    pub patch_side: usize,
    /// Side every window is resized to before encoding.
    pub input_side: usize,
    pub embed: Affine,
    /// `blocks[k - 1]` is block `k`.
    pub blocks: Vec<Affine>,
}

impl BackboneParams {
    pub fn new(
        seed: u64,
        d_vit: usize,
        layer_ids: &[usize],
        patch_side: usize,
        input_side: usize,
    ) -> Result<Self, BackboneError> {
        if d_vit == 0 {
            return Err(BackboneError::ZeroWidth);
        }
        if patch_side == 0 {
            return Err(BackboneError::ZeroPatch);
        }
        if input_side == 0 || input_side % patch_side != 0 {
            return Err(BackboneError::NotDivisible {
                side: input_side,
                patch: patch_side,
            });
        }
        let mut layers = layer_ids.to_vec();
        layers.sort_unstable();
        layers.dedup();
        match layers.first() {
            None => return Err(BackboneError::NoLayers),
            Some(0) => return Err(BackboneError::ZeroLayer),
            _ => {}
        }
        let depth = *layers.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Affine::random(CHANNELS * patch_side * patch_side, d_vit, 0.5, &mut rng);
        let blocks = (0..depth).map(|_| Affine::random(d_vit, d_vit, 0.2, &mut rng)).collect();
        Ok(Self {
            seed,
            d_vit,
            layer_ids: layers,
            patch_side,
            input_side,
            embed,
            blocks,
        })
    }

    pub fn final_layer(&self) -> usize {
        *self.layer_ids.last().unwrap()
    }

    /// Per-token encoding: states after each requested layer, in `layer_ids` order.
    fn encode_token(&self, pixels: &[f64], out: &mut [Vec<f64>]) {
        let mut x = self.embed.apply(pixels);
        let mut y = vec![0.0; self.d_vit];
        let mut next = 0;
        for (k, block) in self.blocks.iter().enumerate() {
            block.apply_into(&x, &mut y);
            y.iter_mut().for_each(|v| *v = v.tanh());
            std::mem::swap(&mut x, &mut y);
            if next < self.layer_ids.len() && self.layer_ids[next] == k + 1 {
                out[next].clone_from(&x);
                next += 1;
            }
        }
    }

    /// Encodes an `h × w` pixel image (both multiples of `p`) into
    /// `(h/p)·(w/p)` raster tokens for every selected layer.
    fn encode_tokens(&self, img: &Image) -> Vec<Matrix> {
        let p = self.patch_side;
        let (rows, cols) = (img.height / p, img.width / p);
        let n_layers = self.layer_ids.len();
        let mut out: Vec<Matrix> = (0..n_layers).map(|_| Matrix::zeros(rows * cols, self.d_vit)).collect();
        let mut pixels = Vec::with_capacity(CHANNELS * p * p);
        let mut states = vec![vec![0.0; self.d_vit]; n_layers];
        for r in 0..rows {
            for c in 0..cols {
                pixels.clear();
                for y in r * p..(r + 1) * p {
                    let o = (y * img.width + c * p) * CHANNELS;
                    pixels.extend_from_slice(&img.data[o..o + p * CHANNELS]);
                }
                self.encode_token(&pixels, &mut states);
                for (m, s) in out.iter_mut().zip(&states) {
                    m.row_mut(r * cols + c).copy_from_slice(s);
                }
            }
        }
        out
    }
}

/// Resizes a window crop to the encoder input side and encodes it.
///
/// Returned grids carry scale 0 and window `(0, 0)`; callers that know the
/// window's origin overwrite those fields.
pub fn encode_patch(patch: &Image, params: &BackboneParams) -> BTreeMap<usize, PatchFeatureGrid> {
    let side = params.input_side;
    let resized = patch.resize(side, side);
    let t = side / params.patch_side;
    params
        .layer_ids
        .iter()
        .zip(params.encode_tokens(&resized))
        .map(|(&layer_id, features)| {
            (
                layer_id,
                PatchFeatureGrid {
                    scale_id: 0,
                    layer_id,
                    window: (0, 0),
                    side: t,
                    features,
                },
            )
        })
        .collect()
}

/// Low-resolution global tokens `G` from the final selected layer, raster order.
pub fn encode_global(img: &Image, params: &BackboneParams, low_h: usize, low_w: usize) -> Result<Matrix, BackboneError> {
    let p = params.patch_side;
    for side in [low_h, low_w] {
        if side == 0 || side % p != 0 {
            return Err(BackboneError::NotDivisible { side, patch: p });
        }
    }
    let resized = img.resize(low_h, low_w);
    Ok(params.encode_tokens(&resized).pop().expect("at least one layer"))
}
