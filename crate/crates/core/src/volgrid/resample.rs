use crate::error::Result;

use super::{apply_affine, Volume, VoxelGrid};

/// Interpolation kernel used when sampling a volume off-grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Trilinear,
    Nearest,
}

/// Tolerance (in voxels) for treating a point on the field boundary as inside.
const EDGE_TOL: f64 = 1e-6;

/// Samples `data` (laid out on `dims`) at continuous voxel coordinate `p`.
/// Returns `None` outside the field of view.
#[inline]
pub fn sample(data: &[f64], dims: [usize; 3], p: [f64; 3], interp: Interp) -> Option<f64> {
    match interp {
        Interp::Nearest => {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let r = p[a].round();
                if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
                    return None;
                }
                idx[a] = r as usize;
            }
            Some(data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])])
        }
        Interp::Trilinear => {
            let mut q = p;
            for a in 0..3 {
                let hi = (dims[a] - 1) as f64;
                if !(q[a] >= -EDGE_TOL && q[a] <= hi + EDGE_TOL) {
                    return None;
                }
                q[a] = q[a].clamp(0.0, hi);
            }
            Some(trilinear(data, dims, q))
        }
    }
}

/// Like [`sample`] but with edge replication instead of an out-of-field value.
#[inline]
pub fn sample_clamped(data: &[f64], dims: [usize; 3], p: [f64; 3], interp: Interp) -> f64 {
    let mut q = p;
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        q[a] = if q[a].is_nan() { 0.0 } else { q[a].clamp(0.0, hi) };
    }
    sample(data, dims, q, interp).unwrap_or(0.0)
}

/// Trilinear interpolation at an in-range coordinate.
#[inline]
pub(crate) fn trilinear(data: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let [nx, ny, _] = dims;
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let fl = q[a].floor();
        let base = fl as usize;
        i0[a] = base;
        if base + 1 < dims[a] {
            i1[a] = base + 1;
            f[a] = q[a] - fl;
        } else {
            i1[a] = base;
            f[a] = 0.0;
        }
    }
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i0[2]) * f[0];
    let c10 = at(i0[0], i1[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i0[2]) * f[0];
    let c01 = at(i0[0], i0[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i1[2]) * f[0];
    let c11 = at(i0[0], i1[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i1[2]) * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    c0 * (1.0 - f[2]) + c1 * f[2]
}

/// Resamples `v` onto `target`: every target voxel takes the value of `v` at
/// the same world position. Samples outside `v`'s field of view are 0.
pub fn resample(v: &Volume, target: &VoxelGrid, interp: Interp) -> Result<Volume> {
    if v.grid().same_as(target) {
        return Ok(v.clone());
    }
    let m = v.grid().world_to_voxel()? * target.affine();
    let dims = v.grid().dims();
    let src = v.data();
    let data = (0..target.len())
        .map(|i| {
            let c = target.coords(i);
            let p = apply_affine(&m, [c[0] as f64, c[1] as f64, c[2] as f64]);
            sample(src, dims, p, interp).unwrap_or(0.0)
        })
        .collect();
    Volume::new(target.clone(), data, v.units())
}
