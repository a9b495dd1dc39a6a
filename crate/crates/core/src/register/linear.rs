//! Rigid and affine registration by maximising normalised mutual information
//! over a coarse-to-fine pyramid.

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::volgrid::resample::trilinear;
use crate::volgrid::smooth::smooth_data;
use crate::volgrid::{resample, Interp, Volume};

use super::nmi::{Binner, JointHistogram};
use super::optim::pattern_search;

/// Rigid transform: rotation about the world origin (X, then Y, then Z)
/// followed by a translation. As a matrix it maps fixed-image world
/// coordinates to moving-image world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidParams {
    /// mm
    pub translation: [f64; 3],
    /// radians
    pub rotation: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation_matrix(self.rotation));
        for a in 0..3 {
            m[(a, 3)] = self.translation[a];
        }
        m
    }

    fn to_vec(self) -> Vec<f64> {
        [self.translation, self.rotation].concat()
    }

    fn from_slice(p: &[f64]) -> Self {
        RigidParams {
            translation: [p[0], p[1], p[2]],
            rotation: [p[3], p[4], p[5]],
        }
    }
}

/// Twelve-parameter affine `T * R * Z * S` (translation, rotation, zoom,
/// shear), mapping fixed world coordinates to moving world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    /// xy, xz, yz shear
    pub shear: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }
}

impl From<RigidParams> for AffineParams {
    fn from(r: RigidParams) -> Self {
        AffineParams {
            translation: r.translation,
            rotation: r.rotation,
            ..Default::default()
        }
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let zoom = Matrix3::from_diagonal(&self.scale.into());
        let [sxy, sxz, syz] = self.shear;
        let shear = Matrix3::new(1.0, sxy, sxz, 0.0, 1.0, syz, 0.0, 0.0, 1.0);
        let lin = rotation_matrix(self.rotation) * zoom * shear;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        for a in 0..3 {
            m[(a, 3)] = self.translation[a];
        }
        m
    }

    fn to_vec(self) -> Vec<f64> {
        [self.translation, self.rotation, self.scale, self.shear].concat()
    }

    fn from_slice(p: &[f64]) -> Self {
        AffineParams {
            translation: [p[0], p[1], p[2]],
            rotation: [p[3], p[4], p[5]],
            scale: [p[6], p[7], p[8]],
            shear: [p[9], p[10], p[11]],
        }
    }
}

pub(crate) fn rotation_matrix(r: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = r[0].sin_cos();
    let (sy, cy) = r[1].sin_cos();
    let (sz, cz) = r[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegOpts {
    pub bins: usize,
    /// Pyramid depth; level `l` is downsampled by `2^l`.
    pub levels: usize,
    /// Finest pyramid factor actually optimised (1 = full resolution).
    pub finest_factor: usize,
    /// Evaluation budget per pyramid level.
    pub max_evals: usize,
    /// Gaussian FWHM, in voxels of each level, applied to both images before
    /// NMI. Suppresses interpolation bias from voxel noise.
    pub presmooth_fwhm_vox: f64,
}

impl Default for LinearRegOpts {
    fn default() -> Self {
        LinearRegOpts {
            bins: 64,
            levels: 3,
            finest_factor: 1,
            max_evals: 3000,
            presmooth_fwhm_vox: 1.5,
        }
    }
}

/// Summary of one linear registration run.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<P> {
    pub params: P,
    pub nmi: f64,
    pub evaluations: usize,
    pub converged: bool,
}

pub fn register_rigid(moving: &Volume, fixed: &Volume, opts: &LinearRegOpts) -> Result<RigidParams> {
    Ok(fit_rigid(moving, fixed, opts, RigidParams::identity())?.params)
}

/// Affine fit started both from identity and from a rigid pre-fit; the run
/// with the higher final NMI wins. The rigid start alone can lock onto an
/// axis permutation when anisotropic scaling makes one a better rigid match.
pub fn register_affine(moving: &Volume, fixed: &Volume, opts: &LinearRegOpts) -> Result<AffineParams> {
    let rigid = fit_rigid(moving, fixed, opts, RigidParams::identity())?;
    let from_rigid = fit_affine(moving, fixed, opts, rigid.params.into())?;
    let direct = fit_affine(moving, fixed, opts, AffineParams::identity())?;
    Ok(if direct.nmi >= from_rigid.nmi { direct.params } else { from_rigid.params })
}

pub fn fit_rigid(moving: &Volume, fixed: &Volume, opts: &LinearRegOpts, init: RigidParams) -> Result<LinearFit<RigidParams>> {
    let (x, nmi, evaluations, converged) =
        run_pyramid(moving, fixed, opts, &init.to_vec(), |p| RigidParams::from_slice(p).to_matrix())?;
    Ok(LinearFit {
        params: RigidParams::from_slice(&x),
        nmi,
        evaluations,
        converged,
    })
}

pub fn fit_affine(moving: &Volume, fixed: &Volume, opts: &LinearRegOpts, init: AffineParams) -> Result<LinearFit<AffineParams>> {
    if init.scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("affine scales must be positive".into()));
    }
    let (x, nmi, evaluations, converged) = run_pyramid(moving, fixed, opts, &init.to_vec(), |p| {
        // Collapsing scales are rejected by the cost function.
        if p[6..9].iter().any(|&s| s <= 0.05) {
            Matrix4::from_element(f64::NAN)
        } else {
            AffineParams::from_slice(p).to_matrix()
        }
    })?;
    Ok(LinearFit {
        params: AffineParams::from_slice(&x),
        nmi,
        evaluations,
        converged,
    })
}

/// Smooths and resamples `v` onto its grid downsampled by `factor`.
pub(crate) fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor <= 1 {
        return Ok(v.clone());
    }
    // FWHM of one coarse voxel.
    let sigma = crate::volgrid::fwhm_to_sigma(factor as f64);
    let smoothed = v.with_data(smooth_data(v.data(), v.grid().dims(), [sigma; 3]), v.units())?;
    resample(&smoothed, &v.grid().downsampled(factor), Interp::Trilinear)
}

fn presmooth(v: Volume, fwhm_vox: f64) -> Result<Volume> {
    if fwhm_vox <= 0.0 {
        return Ok(v);
    }
    let sigma = crate::volgrid::fwhm_to_sigma(fwhm_vox);
    v.with_data(smooth_data(v.data(), v.grid().dims(), [sigma; 3]), v.units())
}

fn run_pyramid(
    moving: &Volume,
    fixed: &Volume,
    opts: &LinearRegOpts,
    x0: &[f64],
    to_matrix: impl Fn(&[f64]) -> Matrix4<f64>,
) -> Result<(Vec<f64>, f64, usize, bool)> {
    if opts.bins < 2 {
        return Err(Error::Domain("at least two histogram bins are required".into()));
    }
    for (v, name) in [(moving, "moving"), (fixed, "fixed")] {
        let (lo, hi) = v.min_max();
        if !(hi > lo) {
            return Err(Error::DegenerateInput(format!("{name} image is constant")));
        }
    }
    let extent = fixed
        .grid()
        .dims()
        .iter()
        .zip(fixed.grid().spacing())
        .map(|(&d, s)| d as f64 * s)
        .sum::<f64>()
        / 3.0;
    let radius = 0.5 * extent;
    let scales: Vec<f64> = (0..x0.len())
        .map(|i| if i < 3 { 1.0 } else { 1.0 / radius })
        .collect();

    let finest = opts.finest_factor.max(1);
    let mut factors: Vec<usize> = (0..opts.levels.max(1)).map(|l| 1usize << l).filter(|&f| f >= finest).collect();
    if factors.is_empty() {
        factors.push(finest);
    }
    factors.reverse();

    let mut x = x0.to_vec();
    let mut value = f64::NEG_INFINITY;
    let mut evaluations = 0;
    let mut converged = true;
    for &factor in &factors {
        let f_l = presmooth(downsample(fixed, factor)?, opts.presmooth_fwhm_vox)?;
        let m_l = presmooth(downsample(moving, factor)?, opts.presmooth_fwhm_vox)?;
        let mut cost = NmiCost::new(&f_l, &m_l, opts.bins)?;
        let voxel = f_l.grid().spacing().iter().cloned().fold(0.0, f64::max);
        let out = pattern_search(
            |p| cost.eval(&to_matrix(p)),
            &x,
            &scales,
            voxel,
            0.02 * voxel / factor as f64,
            opts.max_evals,
        );
        if !out.converged {
            log::warn!(
                "registration at pyramid factor {factor} hit the evaluation budget ({}); keeping best parameters",
                opts.max_evals
            );
            converged = false;
        }
        x = out.x;
        value = out.value;
        evaluations += out.evaluations;
    }
    Ok((x, value, evaluations, converged))
}

/// NMI between a fixed image and a moving image pulled through a
/// fixed-world -> moving-world transform. Every fixed voxel contributes;
/// outside the moving field of view the moving image is edge-extended, so the
/// sample set does not jump as border layers cross the boundary.
pub(crate) struct NmiCost<'a> {
    fixed: &'a Volume,
    moving: &'a Volume,
    fixed_bins: Vec<usize>,
    moving_binner: Binner,
    hist: JointHistogram,
    min_overlap: f64,
}

impl<'a> NmiCost<'a> {
    pub(crate) fn new(fixed: &'a Volume, moving: &'a Volume, bins: usize) -> Result<Self> {
        let fb = Binner::for_data(fixed.data(), bins)?;
        let moving_binner = Binner::for_data(moving.data(), bins)?;
        Ok(NmiCost {
            fixed,
            moving,
            fixed_bins: fixed.data().iter().map(|&v| fb.bin(v)).collect(),
            moving_binner,
            hist: JointHistogram::new(bins),
            min_overlap: 0.05 * fixed.grid().len() as f64,
        })
    }

    pub(crate) fn eval(&mut self, transform: &Matrix4<f64>) -> f64 {
        if transform.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let Ok(to_vox) = self.moving.grid().world_to_voxel() else {
            return f64::NEG_INFINITY;
        };
        let m = to_vox * transform * self.fixed.grid().affine();
        let dims = self.moving.grid().dims();
        let hi = [0, 1, 2].map(|a| (dims[a] - 1) as f64);
        let data = self.moving.data();
        let [nx, ny, nz] = self.fixed.grid().dims();
        self.hist.clear();
        let mut inside = 0usize;
        let mut idx = 0;
        for z in 0..nz {
            for y in 0..ny {
                let (zf, yf) = (z as f64, y as f64);
                let base = [
                    m[(0, 1)] * yf + m[(0, 2)] * zf + m[(0, 3)],
                    m[(1, 1)] * yf + m[(1, 2)] * zf + m[(1, 3)],
                    m[(2, 1)] * yf + m[(2, 2)] * zf + m[(2, 3)],
                ];
                for x in 0..nx {
                    let xf = x as f64;
                    let p = [base[0] + m[(0, 0)] * xf, base[1] + m[(1, 0)] * xf, base[2] + m[(2, 0)] * xf];
                    if p[0] >= 0.0 && p[0] <= hi[0] && p[1] >= 0.0 && p[1] <= hi[1] && p[2] >= 0.0 && p[2] <= hi[2] {
                        inside += 1;
                    }
                    let q = [p[0].clamp(0.0, hi[0]), p[1].clamp(0.0, hi[1]), p[2].clamp(0.0, hi[2])];
                    let (b, w) = self.moving_binner.split(trilinear(data, dims, q));
                    self.hist.add_split(self.fixed_bins[idx], b, w);
                    idx += 1;
                }
            }
        }
        if (inside as f64) < self.min_overlap {
            return f64::NEG_INFINITY;
        }
        self.hist.nmi().unwrap_or(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_matrix_is_orthonormal() {
        let r = RigidParams {
            translation: [1.0, 2.0, 3.0],
            rotation: [0.3, -0.2, 1.1],
        };
        let m = r.to_matrix();
        let lin = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (lin.transpose() * lin - Matrix3::identity()).abs().max();
        assert!(err < 1e-12);
        assert!((lin.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_order_is_x_then_y_then_z() {
        let r = rotation_matrix([std::f64::consts::FRAC_PI_2, 0.0, std::f64::consts::FRAC_PI_2]);
        // x-rotation sends y to z; z-rotation leaves z fixed.
        let v = r * nalgebra::Vector3::new(0.0, 1.0, 0.0);
        assert!((v - nalgebra::Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_affine_matrix() {
        assert_eq!(AffineParams::identity().to_matrix(), Matrix4::identity());
    }
}
