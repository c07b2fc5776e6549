//! Whole-volume restoration by tiled application of the network.
//!
//! Volumes larger than one tile are processed in overlapping tiles laid out
//! at stride `tile - overlap` (the final tile per axis shifts back so it ends
//! flush with the volume). Each tile runs one forward pass; results blend
//! under a per-axis linear feather so seams fade across the overlap instead
//! of jumping at tile borders. Voxel weights never reach zero, and the
//! accumulated weight normalizes the sum, so edge tiles come through at full
//! strength where they are the only contributor.
//!
//! Input and output use the 0–255 intensity scale; internally the network
//! sees [0, 1]. The blended result is clamped at zero before rescaling.

use crate::model::{ModelParams, MIN_EXTENT};
use crate::volgrid::{Tape, Volume};
use crate::{Error, Result};

/// Smallest admissible tile overlap, in voxels.
pub const MIN_OVERLAP: usize = 8;

/// Restores a raw 0–255 volume with the given model.
///
/// `tile` extents must be even; axes where the volume is no larger than the
/// tile run in a single pass along that axis. `overlap` must be at least
/// [`MIN_OVERLAP`] and strictly smaller than every tiled axis's tile extent.
pub fn infer(
    model: &ModelParams<f32>,
    y: &Volume<f32>,
    tile: (usize, usize, usize),
    overlap: usize,
) -> Result<Volume<f32>> {
    let (c, d, h, w) = y.shape();
    if c != 1 {
        return Err(Error::invalid(format!("inference input must have 1 channel, got {c}")));
    }
    for (axis, n) in [("depth", d), ("height", h), ("width", w)] {
        if n < MIN_EXTENT || n % 2 != 0 {
            return Err(Error::invalid(format!(
                "inference input {axis} must be even and at least {MIN_EXTENT}, got {n}"
            )));
        }
    }
    for (axis, t) in [("depth", tile.0), ("height", tile.1), ("width", tile.2)] {
        if t == 0 || t % 2 != 0 {
            return Err(Error::invalid(format!("tile {axis} must be even and positive, got {t}")));
        }
    }
    if overlap < MIN_OVERLAP {
        return Err(Error::invalid(format!(
            "tile overlap must be at least {MIN_OVERLAP} voxels, got {overlap}"
        )));
    }
    // Per-axis effective tile: volumes no larger than the tile run whole.
    let (td, th, tw) = (tile.0.min(d), tile.1.min(h), tile.2.min(w));
    for (axis, t, n) in [("depth", td, d), ("height", th, h), ("width", tw, w)] {
        if t < n && overlap >= t {
            return Err(Error::invalid(format!(
                "overlap {overlap} must be smaller than the {axis} tile extent {t}"
            )));
        }
    }

    let norm = y.map(|v| v / 255.0);
    if (td, th, tw) == (d, h, w) {
        let restored = forward_tile(model, norm)?;
        return Ok(restored.map(|v| v.max(0.0) * 255.0));
    }

    let zs = tile_starts(d, td, overlap);
    let ys = tile_starts(h, th, overlap);
    let xs = tile_starts(w, tw, overlap);
    let (fz, fy, fx) = (feather(td, overlap), feather(th, overlap), feather(tw, overlap));

    let mut acc = Volume::<f32>::zeros(1, d, h, w);
    let mut weight = Volume::<f32>::zeros(1, d, h, w);
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let block = norm.crop(z0, y0, x0, td, th, tw)?;
                let restored = forward_tile(model, block)?;
                for z in 0..td {
                    for yy in 0..th {
                        let src = restored.index_of(0, z, yy, 0);
                        let dst = acc.index_of(0, z0 + z, y0 + yy, x0);
                        let wzy = fz[z] * fy[yy];
                        let out_row = &mut acc.data_mut()[dst..dst + tw];
                        for x in 0..tw {
                            out_row[x] += wzy * fx[x] * restored.data()[src + x];
                        }
                        let w_row = &mut weight.data_mut()[dst..dst + tw];
                        for x in 0..tw {
                            w_row[x] += wzy * fx[x];
                        }
                    }
                }
            }
        }
    }
    let mut out = acc;
    for (v, &wt) in out.data_mut().iter_mut().zip(weight.data()) {
        *v = (*v / wt).max(0.0) * 255.0;
    }
    Ok(out)
}

/// One forward pass over a [0, 1] block; returns the raw network output.
fn forward_tile(model: &ModelParams<f32>, block: Volume<f32>) -> Result<Volume<f32>> {
    let mut tape = Tape::new(model.params());
    let yv = tape.leaf(block);
    let trace = model.forward(&mut tape, yv)?;
    if let Some((id, op)) = tape.first_non_finite() {
        return Err(Error::numerical(format!(
            "non-finite value during inference from op '{op}' (node {})",
            id.index()
        )));
    }
    Ok(tape.value(trace.output).clone())
}

/// Start offsets covering `0..n` with tiles of extent `t` at stride
/// `t - overlap`; the last tile ends flush at `n`.
fn tile_starts(n: usize, t: usize, overlap: usize) -> Vec<usize> {
    debug_assert!(t <= n);
    if t == n {
        return vec![0];
    }
    let stride = t - overlap;
    let mut starts = Vec::new();
    let mut p = 0;
    while p + t < n {
        starts.push(p);
        p += stride;
    }
    if starts.last() != Some(&(n - t)) {
        starts.push(n - t);
    }
    starts
}

/// Per-axis blending profile: linear ramp over the overlap at both ends,
/// flat 1 in the core, never zero.
fn feather(t: usize, overlap: usize) -> Vec<f32> {
    let denom = (overlap + 1) as f32;
    (0..t)
        .map(|i| {
            let edge = (i + 1).min(t - i);
            (edge.min(overlap + 1) as f32) / denom
        })
        .collect()
}
