//! Dense deformation fields, their application to volumes, inversion,
//! Jacobian determinants and volume-preserving modulation.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::volgrid::{
    apply_affine, linear_part, read_nifti_channels, sample, write_nifti_channels, Interp, Units, Volume, VoxelGrid,
};
use crate::volgrid::resample::trilinear;

/// Per-voxel mapping from the voxels of `grid` to world coordinates (mm) in
/// another space. Segmentation fields live on the atlas grid and point into
/// native space.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: VoxelGrid,
    map: [Vec<f64>; 3],
}

impl DeformationField {
    pub fn new(grid: VoxelGrid, map: [Vec<f64>; 3]) -> Result<Self> {
        if map.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Domain("deformation components do not match grid".into()));
        }
        if map.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("deformation field has non-finite entries".into()));
        }
        Ok(DeformationField { grid, map })
    }

    /// Each voxel maps to its own world coordinate.
    pub fn identity(grid: &VoxelGrid) -> Self {
        Self::from_affine(grid, &Matrix4::identity())
    }

    /// Each voxel `v` maps to `m * (grid.affine * v)`.
    pub fn from_affine(grid: &VoxelGrid, m: &Matrix4<f64>) -> Self {
        let full = m * grid.affine();
        let n = grid.len();
        let mut map: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
        for i in 0..n {
            let c = grid.coords(i);
            let w = apply_affine(&full, [c[0] as f64, c[1] as f64, c[2] as f64]);
            for a in 0..3 {
                map[a].push(w[a]);
            }
        }
        DeformationField {
            grid: grid.clone(),
            map,
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.map
    }

    #[inline]
    pub fn at(&self, index: usize) -> [f64; 3] {
        [self.map[0][index], self.map[1][index], self.map[2][index]]
    }

    /// Left-composes a world-space affine: `v -> m * self(v)`.
    pub fn then_affine(&self, m: &Matrix4<f64>) -> Self {
        let n = self.grid.len();
        let mut map: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let w = apply_affine(m, self.at(i));
            for a in 0..3 {
                map[a][i] = w[a];
            }
        }
        DeformationField {
            grid: self.grid.clone(),
            map,
        }
    }

    /// Least-squares affine `M` with `self(v) ~ M * world(v)`.
    pub fn fit_affine(&self) -> Matrix4<f64> {
        let n = self.grid.len();
        let stride = (n / 20_000).max(1);
        let mut ata = nalgebra::Matrix4::<f64>::zeros();
        let mut atb = nalgebra::Matrix4x3::<f64>::zeros();
        let centre = self.grid.center_world();
        for i in (0..n).step_by(stride) {
            let c = self.grid.coords(i);
            let w = self.grid.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            let row = nalgebra::Vector4::new(w[0] - centre[0], w[1] - centre[1], w[2] - centre[2], 1.0);
            ata += row * row.transpose();
            let y = self.at(i);
            for a in 0..3 {
                for r in 0..4 {
                    atb[(r, a)] += row[r] * y[a];
                }
            }
        }
        let sol = ata
            .try_inverse()
            .map(|inv| inv * atb)
            .unwrap_or_else(nalgebra::Matrix4x3::zeros);
        // sol maps centred coordinates; fold the centring back in.
        let mut m = Matrix4::identity();
        for a in 0..3 {
            for r in 0..3 {
                m[(a, r)] = sol[(r, a)];
            }
            m[(a, 3)] = sol[(3, a)] - (0..3).map(|r| sol[(r, a)] * centre[r]).sum::<f64>();
        }
        m
    }

    /// Field value at a continuous voxel coordinate. Inside the grid this is
    /// trilinear; outside it extrapolates linearly from the nearest edge
    /// using the field's global affine Jacobian `lin` (mm per voxel).
    pub(crate) fn sample_extrapolated(&self, p: [f64; 3], lin: &Matrix3<f64>) -> [f64; 3] {
        let dims = self.grid.dims();
        let mut q = p;
        let mut excess = Vector3::zeros();
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            excess[a] = p[a] - c;
            q[a] = c;
        }
        let ext = lin * excess;
        [0, 1, 2].map(|a| trilinear(&self.map[a], dims, q) + ext[a])
    }

    /// Composes a displacement given in world mm on this field's own grid:
    /// `v -> self(v + disp(v))`, with `disp` converted to voxels.
    pub(crate) fn compose_displacement(&self, disp: &[Vec<f64>; 3]) -> Result<Self> {
        let to_vox = linear_part(&self.grid.world_to_voxel()?);
        let lin = linear_part(&self.fit_affine()) * linear_part(self.grid.affine());
        let n = self.grid.len();
        let mut map: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let c = self.grid.coords(i);
            let d = to_vox * Vector3::new(disp[0][i], disp[1][i], disp[2][i]);
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            let w = self.sample_extrapolated(p, &lin);
            for a in 0..3 {
                map[a][i] = w[a];
            }
        }
        DeformationField::new(self.grid.clone(), map)
    }

    /// Numerical inverse evaluated on `target`: each target voxel maps to the
    /// world coordinate (in this field's grid space) that this field sends to
    /// the target voxel's world position.
    pub fn invert_onto(&self, target: &VoxelGrid) -> Result<DeformationField> {
        let m = self.fit_affine();
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| Error::Geometry("deformation is not invertible".into()))?;
        let to_vox = self.grid.world_to_voxel()?;
        // Jacobian of the field w.r.t. grid voxels, and its inverse.
        let lin = linear_part(&m) * linear_part(self.grid.affine());
        let lin_inv = lin
            .try_inverse()
            .ok_or_else(|| Error::Geometry("deformation Jacobian is singular".into()))?;
        let start = to_vox * m_inv;
        let n = target.len();
        let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let c = target.coords(i);
            let x = target.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            let mut y = apply_affine(&start, x);
            for _ in 0..30 {
                let fy = self.sample_extrapolated(y, &lin);
                let r = Vector3::new(x[0] - fy[0], x[1] - fy[1], x[2] - fy[2]);
                let step = lin_inv * r;
                for a in 0..3 {
                    y[a] += step[a];
                }
                if r.norm() < 1e-6 {
                    break;
                }
            }
            let w = self.grid.voxel_to_world(y);
            for a in 0..3 {
                out[a][i] = w[a];
            }
        }
        DeformationField::new(target.clone(), out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let ch: Vec<&[f64]> = self.map.iter().map(|c| c.as_slice()).collect();
        write_nifti_channels(&self.grid, &ch, Units::Dimensionless, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = read_nifti_channels(path)?;
        let [x, y, z]: [Vec<f64>; 3] = img
            .channels
            .try_into()
            .map_err(|c: Vec<Vec<f64>>| Error::Format(format!("deformation needs 3 channels, found {}", c.len())))?;
        DeformationField::new(img.grid, [x, y, z])
    }
}

/// Samples `v` at every mapped coordinate of `field`; the result lives on
/// `field.grid()`. Samples outside `v`'s field of view are 0.
pub fn apply_deformation(v: &Volume, field: &DeformationField, interp: Interp) -> Result<Volume> {
    let data = warp_data(v.data(), v.grid(), field, interp, Boundary::Zero)?;
    Volume::new(field.grid().clone(), data, v.units())
}

/// How samples outside the source field of view are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Boundary {
    Zero,
    Replicate,
}

/// Raw-data form of [`apply_deformation`].
pub(crate) fn warp_data(
    data: &[f64],
    grid: &VoxelGrid,
    field: &DeformationField,
    interp: Interp,
    boundary: Boundary,
) -> Result<Vec<f64>> {
    let to_vox = grid.world_to_voxel()?;
    let dims = grid.dims();
    Ok((0..field.grid().len())
        .map(|i| {
            let p = apply_affine(&to_vox, field.at(i));
            match boundary {
                Boundary::Zero => sample(data, dims, p, interp).unwrap_or(0.0),
                Boundary::Replicate => crate::volgrid::sample_clamped(data, dims, p, interp),
            }
        })
        .collect())
}

/// Determinant of the field's spatial derivative, normalised by the grid's
/// voxel volume so that the identity field gives 1.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap(pub Volume);

impl JacobianMap {
    pub fn volume(&self) -> &Volume {
        &self.0
    }
}

pub fn jacobian_determinant(field: &DeformationField) -> JacobianMap {
    let grid = field.grid();
    let dims = grid.dims();
    let vox = grid.voxel_volume();
    let data = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let mut j = Matrix3::zeros();
            for axis in 0..3 {
                let (lo, hi, span) = if dims[axis] == 1 {
                    (c, c, 0.0)
                } else if c[axis] == 0 {
                    let mut h = c;
                    h[axis] += 1;
                    (c, h, 1.0)
                } else if c[axis] == dims[axis] - 1 {
                    let mut l = c;
                    l[axis] -= 1;
                    (l, c, 1.0)
                } else {
                    let (mut l, mut h) = (c, c);
                    l[axis] -= 1;
                    h[axis] += 1;
                    (l, h, 2.0)
                };
                let a = field.at(grid.index(lo[0], lo[1], lo[2]));
                let b = field.at(grid.index(hi[0], hi[1], hi[2]));
                for r in 0..3 {
                    j[(r, axis)] = if span > 0.0 {
                        (b[r] - a[r]) / span
                    } else {
                        // Single-voxel axis: fall back to the grid's own step.
                        grid.affine()[(r, axis)]
                    };
                }
            }
            j.determinant() / vox
        })
        .collect();
    JacobianMap(Volume::new(grid.clone(), data, Units::Dimensionless).expect("shape matches grid"))
}

/// Voxelwise product of a warped map with the Jacobian determinant.
pub fn modulate(warped: &Volume, jac: &JacobianMap) -> Result<Volume> {
    let j = jac.volume();
    if !warped.grid().same_as(j.grid()) {
        return Err(Error::Domain("modulate: warped map and Jacobian grids differ".into()));
    }
    let data = warped.data().iter().zip(j.data()).map(|(a, b)| a * b).collect();
    Volume::new(warped.grid().clone(), data, Units::Dimensionless)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VoxelGrid {
        VoxelGrid::centered([12, 10, 8], [2.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn identity_jacobian_is_one() {
        let j = jacobian_determinant(&DeformationField::identity(&grid()));
        assert!(j.volume().data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn scaling_jacobian_is_cubed() {
        let s = 1.2;
        let m = Matrix4::new_scaling(s);
        let mut m = m;
        m[(3, 3)] = 1.0;
        let j = jacobian_determinant(&DeformationField::from_affine(&grid(), &m));
        assert!(j.volume().data().iter().all(|v| (v - s * s * s).abs() < 1e-3));
    }

    #[test]
    fn translation_jacobian_is_one() {
        let m = Matrix4::new_translation(&Vector3::new(3.0, -7.0, 1.5));
        let j = jacobian_determinant(&DeformationField::from_affine(&grid(), &m));
        assert!(j.volume().data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn modulate_shape_mismatch() {
        let g2 = VoxelGrid::centered([4, 4, 4], [1.0; 3]).unwrap();
        let j = jacobian_determinant(&DeformationField::identity(&grid()));
        let w = Volume::zeros(g2, Units::Probability);
        assert!(matches!(modulate(&w, &j), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_of_affine_field() {
        let g = grid();
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        m[(0, 1)] = 0.05;
        m[(1, 3)] = 4.0;
        let f = DeformationField::from_affine(&g, &m);
        let inv = f.invert_onto(&g).unwrap();
        let mi = m.try_inverse().unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            let w = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            let e = apply_affine(&mi, w);
            let got = inv.at(i);
            for a in 0..3 {
                assert!((got[a] - e[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fit_affine_recovers_affine() {
        let g = grid();
        let mut m = Matrix4::identity();
        m[(2, 0)] = 0.2;
        m[(0, 3)] = -3.0;
        let f = DeformationField::from_affine(&g, &m);
        let fit = f.fit_affine();
        for (a, b) in fit.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
