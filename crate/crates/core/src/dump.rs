//! Flat little-endian binary dumps of canvases and stack banks.
//!
//! Canvas: `u32 T_base`, `u32 d_vit`, then `T_base² · d_vit` `f64` values,
//! row-major and token-major. Bank: `u32 N_stack`, `u32 T_v`, `u32 d_vit`,
//! then the stacks back to back in bank order, each `T_v · d_vit` `f64`.

use std::io::{self, Read, Write};

use crate::linalg::Matrix;
use crate::stack::StackBank;
use crate::stitch::FeatureCanvas;

fn put_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_canvas<W: Write>(mut w: W, canvas: &FeatureCanvas) -> io::Result<()> {
    put_u32(&mut w, canvas.side)?;
    put_u32(&mut w, canvas.dim())?;
    put_f64s(&mut w, &canvas.grid.data)
}

/// Reads the token grid back. Weight sums are not part of the format and
/// come back as zeros; scale and layer ids are zero.
pub fn read_canvas<R: Read>(mut r: R) -> io::Result<FeatureCanvas> {
    let side = get_u32(&mut r)?;
    let dim = get_u32(&mut r)?;
    let data = get_f64s(&mut r, side * side * dim)?;
    Ok(FeatureCanvas {
        scale_id: 0,
        layer_id: 0,
        side,
        grid: Matrix::from_vec(side * side, dim, data),
        weight_sums: vec![0.0; side * side],
    })
}

pub fn write_bank<W: Write>(mut w: W, bank: &StackBank) -> io::Result<()> {
    put_u32(&mut w, bank.len())?;
    put_u32(&mut w, bank.target_len)?;
    put_u32(&mut w, bank.dim())?;
    for s in &bank.stacks {
        put_f64s(&mut w, &s.tokens.data)?;
    }
    Ok(())
}

/// Returns `(T_v, d_vit, stacks)`.
pub fn read_bank<R: Read>(mut r: R) -> io::Result<(usize, usize, Vec<Matrix>)> {
    let n = get_u32(&mut r)?;
    let t_v = get_u32(&mut r)?;
    let dim = get_u32(&mut r)?;
    let stacks = (0..n)
        .map(|_| get_f64s(&mut r, t_v * dim).map(|d| Matrix::from_vec(t_v, dim, d)))
        .collect::<io::Result<_>>()?;
    Ok((t_v, dim, stacks))
}
