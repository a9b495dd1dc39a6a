//! Small-deformation refinement matching tissue posteriors to atlas priors.
//!
//! The displacement `u` (world mm, on the priors' grid) is sought so that the
//! posteriors pulled through `x -> x + u(x)` agree with the priors in the
//! sum-of-squares sense. Each iteration adds a clamped demons-style step,
//! smooths the accumulated field with a Gaussian and backtracks whenever the
//! objective would rise.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::volgrid::resample::trilinear;
use crate::volgrid::smooth::smooth_data;
use crate::volgrid::{apply_affine, linear_part, sample_clamped, Interp, TissueMaps, Units, Volume, VoxelGrid};

use super::field::DeformationField;
use super::linear::downsample;

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearOpts {
    /// Pyramid depth; level `l` is downsampled by `2^l`.
    pub levels: usize,
    /// Gaussian sigma (mm) applied to the field after every update.
    pub smooth_sigma_mm: f64,
    /// Largest per-voxel update (mm) in a single iteration.
    pub step: f64,
    /// Iterations per pyramid level.
    pub iterations: usize,
}

impl Default for NonlinearOpts {
    fn default() -> Self {
        NonlinearOpts {
            levels: 2,
            smooth_sigma_mm: 6.0,
            step: 2.0,
            iterations: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NonlinearResult {
    /// Maps each prior-grid voxel to `world + u`, in the same space.
    pub field: DeformationField,
    /// Displacement in world mm, one vector per axis.
    pub displacement: [Vec<f64>; 3],
    /// Full-resolution objective: the starting value, then one entry per
    /// accepted finest-level iteration.
    pub objective_trace: Vec<f64>,
}

pub fn register_nonlinear(posteriors: &TissueMaps, priors: &TissueMaps, opts: &NonlinearOpts) -> Result<NonlinearResult> {
    posteriors.grid().ensure_same(priors.grid(), "nonlinear registration")?;
    for maps in [posteriors, priors] {
        check_probabilities(maps)?;
    }
    if !(opts.step > 0.0) || !(opts.smooth_sigma_mm >= 0.0) {
        return Err(Error::Domain("step must be positive and sigma non-negative".into()));
    }
    let grid = priors.grid().clone();
    let fine = Level::new(&grid, posteriors.channels(), priors.channels())?;
    let n = grid.len();
    let zero: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);

    let mut u = zero.clone();
    let mut e0 = fine.objective(&u);
    let levels = opts.levels.max(1);
    for l in (1..levels).rev() {
        let factor = 1usize << l;
        let coarse_grid = grid.downsampled(factor);
        if coarse_grid.dims().iter().any(|&d| d < 4) {
            continue;
        }
        let down = |chs: &[Vec<f64>; 6]| -> Result<[Vec<f64>; 6]> {
            let mut out: [Vec<f64>; 6] = Default::default();
            for (o, c) in out.iter_mut().zip(chs) {
                let v = Volume::new(grid.clone(), c.clone(), Units::Dimensionless)?;
                *o = downsample(&v, factor)?.into_data();
            }
            Ok(out)
        };
        let level = Level::new(&coarse_grid, &down(posteriors.channels())?, &down(priors.channels())?)?;
        let mut uc = restrict(&u, &grid, &coarse_grid)?;
        level.optimise(&mut uc, opts, &mut Vec::new());
        let candidate = restrict(&uc, &coarse_grid, &grid)?;
        let e = fine.objective(&candidate);
        if e <= e0 {
            u = candidate;
            e0 = e;
        }
    }
    let mut trace = vec![e0];
    fine.optimise(&mut u, opts, &mut trace);

    let mut map: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let c = grid.coords(i);
        let w = grid.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
        for a in 0..3 {
            map[a][i] = w[a] + u[a][i];
        }
    }
    Ok(NonlinearResult {
        field: DeformationField::new(grid, map)?,
        displacement: u,
        objective_trace: trace,
    })
}

fn check_probabilities(maps: &TissueMaps) -> Result<()> {
    let bad = maps
        .channels()
        .iter()
        .flat_map(|c| c.iter())
        .any(|&p| !(-1e-9..=1.0 + 1e-9).contains(&p));
    if bad {
        return Err(Error::Domain("nonlinear registration needs probability maps".into()));
    }
    Ok(())
}

/// Resamples a displacement field between grids of the same space.
fn restrict(u: &[Vec<f64>; 3], from: &VoxelGrid, to: &VoxelGrid) -> Result<[Vec<f64>; 3]> {
    // Edge-replicated so that coarse borders cover the fine grid.
    let m = from.world_to_voxel()? * to.affine();
    let coords: Vec<[f64; 3]> = (0..to.len())
        .map(|i| {
            let c = to.coords(i);
            apply_affine(&m, [c[0] as f64, c[1] as f64, c[2] as f64])
        })
        .collect();
    Ok(std::array::from_fn(|a| {
        coords
            .iter()
            .map(|&p| sample_clamped(&u[a], from.dims(), p, Interp::Trilinear))
            .collect()
    }))
}

struct Level {
    grid: VoxelGrid,
    posteriors: [Vec<f64>; 6],
    priors: [Vec<f64>; 6],
    /// world mm -> voxel offsets
    to_vox: Matrix3<f64>,
    /// voxel-gradient -> world-gradient
    grad_to_world: Matrix3<f64>,
}

impl Level {
    fn new(grid: &VoxelGrid, posteriors: &[Vec<f64>; 6], priors: &[Vec<f64>; 6]) -> Result<Self> {
        let lin = linear_part(grid.affine());
        let to_vox = lin
            .try_inverse()
            .ok_or_else(|| Error::Geometry("singular grid affine".into()))?;
        Ok(Level {
            grid: grid.clone(),
            posteriors: posteriors.clone(),
            priors: priors.clone(),
            to_vox,
            grad_to_world: to_vox.transpose(),
        })
    }

    fn warp(&self, u: &[Vec<f64>; 3]) -> [Vec<f64>; 6] {
        let dims = self.grid.dims();
        let n = self.grid.len();
        let hi = dims.map(|d| (d - 1) as f64);
        let mut out: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let c = self.grid.coords(i);
            let d = self.to_vox * Vector3::new(u[0][i], u[1][i], u[2][i]);
            let p = [0, 1, 2].map(|a| (c[a] as f64 + d[a]).clamp(0.0, hi[a]));
            for (o, ch) in out.iter_mut().zip(&self.posteriors) {
                o[i] = trilinear(ch, dims, p);
            }
        }
        out
    }

    fn mismatch(&self, warped: &[Vec<f64>; 6]) -> f64 {
        let total: f64 = warped
            .iter()
            .zip(&self.priors)
            .map(|(w, q)| w.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        total / self.grid.len() as f64
    }

    fn objective(&self, u: &[Vec<f64>; 3]) -> f64 {
        self.mismatch(&self.warp(u))
    }

    /// Runs `opts.iterations` backtracking demons steps, appending the
    /// objective after each accepted step.
    fn optimise(&self, u: &mut [Vec<f64>; 3], opts: &NonlinearOpts, trace: &mut Vec<f64>) {
        let dims = self.grid.dims();
        let n = self.grid.len();
        let spacing = self.grid.spacing();
        let sigmas = [0, 1, 2].map(|a| opts.smooth_sigma_mm / spacing[a]);
        // Thirion's normalisation: the intensity term is scaled by the squared
        // voxel size so that a single step never exceeds half a voxel.
        let k = spacing.iter().map(|s| s * s).sum::<f64>() / 3.0;
        let mut warped = self.warp(u);
        let mut current = self.mismatch(&warped);
        for _ in 0..opts.iterations {
            let mut du: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
            for i in 0..n {
                let c = self.grid.coords(i);
                let mut num = Vector3::zeros();
                let mut g2 = 0.0;
                let mut d2 = 0.0;
                for (w, q) in warped.iter().zip(&self.priors) {
                    let diff = w[i] - q[i];
                    let g = self.grad_to_world * voxel_gradient(w, dims, c);
                    num += diff * g;
                    g2 += g.norm_squared();
                    d2 += diff * diff;
                }
                let denom = g2 + d2 / k;
                if denom <= 1e-12 {
                    continue;
                }
                let mut step = -num / denom;
                let len = step.norm();
                if len > opts.step {
                    step *= opts.step / len;
                }
                for a in 0..3 {
                    du[a][i] = step[a];
                }
            }
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..6 {
                let trial: [Vec<f64>; 3] = std::array::from_fn(|a| {
                    let raw: Vec<f64> = u[a].iter().zip(&du[a]).map(|(x, d)| x + scale * d).collect();
                    smooth_data(&raw, dims, sigmas)
                });
                let tw = self.warp(&trial);
                let e = self.mismatch(&tw);
                if e < current {
                    *u = trial;
                    warped = tw;
                    current = e;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push(current);
        }
    }
}

/// Central differences in voxel units, one-sided at the borders.
fn voxel_gradient(data: &[f64], dims: [usize; 3], c: [usize; 3]) -> Vector3<f64> {
    let [nx, ny, _] = dims;
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let mut g = Vector3::zeros();
    for a in 0..3 {
        if dims[a] < 2 {
            continue;
        }
        let mut lo = c;
        let mut hi = c;
        if c[a] > 0 {
            lo[a] -= 1;
        }
        if c[a] + 1 < dims[a] {
            hi[a] += 1;
        }
        let h = (hi[a] - lo[a]) as f64;
        g[a] = (at(hi[0], hi[1], hi[2]) - at(lo[0], lo[1], lo[2])) / h;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Tissue;

    /// Nested spheres: WM core, GM shell, CSF rim, background outside.
    fn blob_maps(grid: &VoxelGrid, shift_vox: f64) -> TissueMaps {
        let dims = grid.dims();
        let ctr = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let n = grid.len();
        let mut ch: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let c = grid.coords(i);
            let dx = c[0] as f64 - shift_vox - ctr[0];
            let r = (dx * dx + (c[1] as f64 - ctr[1]).powi(2) + (c[2] as f64 - ctr[2]).powi(2)).sqrt();
            let s = |edge: f64| 1.0 / (1.0 + ((r - edge) / 0.8).exp());
            let (a, b, d) = (s(4.0), s(7.0), s(9.0));
            ch[Tissue::Wm.index()][i] = a;
            ch[Tissue::Gm.index()][i] = b - a;
            ch[Tissue::Csf.index()][i] = d - b;
            ch[Tissue::Background.index()][i] = 1.0 - d;
        }
        TissueMaps::new(grid.clone(), ch).unwrap()
    }

    fn grid() -> VoxelGrid {
        VoxelGrid::centered([28, 28, 28], [2.0; 3]).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_displacement() {
        let g = grid();
        let p = blob_maps(&g, 0.0);
        let r = register_nonlinear(&p, &p, &NonlinearOpts::default()).unwrap();
        let max = r.displacement.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max / 2.0 < 1e-3);
        let id = DeformationField::identity(&g);
        for a in 0..3 {
            for (x, y) in r.field.components()[a].iter().zip(&id.components()[a]) {
                assert!((x - y).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn recovers_known_shift() {
        let g = grid();
        // priors(v) = posteriors(v + 2 e_x)
        let post = blob_maps(&g, 2.0);
        let prior = blob_maps(&g, 0.0);
        let r = register_nonlinear(&post, &prior, &NonlinearOpts::default()).unwrap();
        let brain: Vec<usize> = (0..g.len())
            .filter(|&i| prior.channel(Tissue::Background)[i] < 0.5)
            .collect();
        let mean = |a: usize| brain.iter().map(|&i| r.displacement[a][i]).sum::<f64>() / brain.len() as f64 / 2.0;
        assert!((mean(0) - 2.0).abs() < 0.5, "x = {}", mean(0));
        assert!(mean(1).abs() < 0.5);
        assert!(mean(2).abs() < 0.5);
    }

    #[test]
    fn objective_trace_is_non_increasing() {
        let g = grid();
        let r = register_nonlinear(&blob_maps(&g, 1.5), &blob_maps(&g, -1.0), &NonlinearOpts::default()).unwrap();
        assert!(r.objective_trace.len() > 1);
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = blob_maps(&grid(), 0.0);
        let b = blob_maps(&VoxelGrid::centered([20, 20, 20], [2.0; 3]).unwrap(), 0.0);
        assert!(register_nonlinear(&a, &b, &NonlinearOpts::default()).is_err());
    }
}
