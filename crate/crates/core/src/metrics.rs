//! Overlap and surface-distance metrics, exact distance transforms and
//! cohort consistency measures.

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Units, Volume, VoxelGrid};

/// Foreground voxels with at least one background 6-neighbour; voxels on the
/// grid border always qualify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceSet {
    pub grid: VoxelGrid,
    pub voxels: Vec<usize>,
}

impl SurfaceSet {
    pub fn of(mask: &BinaryMask) -> SurfaceSet {
        let grid = mask.grid().clone();
        let [nx, ny, nz] = grid.dims();
        let d = mask.data();
        let mut voxels = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    if !d[i] {
                        continue;
                    }
                    let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                    if edge
                        || !d[i - 1]
                        || !d[i + 1]
                        || !d[i - nx]
                        || !d[i + nx]
                        || !d[i - nx * ny]
                        || !d[i + nx * ny]
                    {
                        voxels.push(i);
                    }
                }
            }
        }
        SurfaceSet { grid, voxels }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn to_mask(&self) -> BinaryMask {
        let mut data = vec![false; self.grid.len()];
        for &i in &self.voxels {
            data[i] = true;
        }
        BinaryMask::new(self.grid.clone(), data).expect("length matches grid")
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::Domain("dice: masks are on different grids".into()));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest
/// foreground voxel centre, by separable lower envelopes of parabolas.
pub fn distance_transform(m: &BinaryMask, spacing: [f64; 3]) -> Result<Volume> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("spacing must be positive".into()));
    }
    let sq = squared_distance_transform(m.data(), m.grid().dims(), spacing);
    Volume::new(m.grid().clone(), sq.into_iter().map(f64::sqrt).collect(), Units::Dimensionless)
}

pub(crate) fn squared_distance_transform(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut env = Envelope::with_capacity(max_n);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w = spacing[axis] * spacing[axis];
        // Every line along `axis` starts at a voxel whose `axis` coordinate is 0.
        for start in 0..f.len() {
            let c = [start % nx, (start / nx) % ny, start / (nx * ny)];
            if c[axis] != 0 {
                continue;
            }
            for k in 0..n {
                line[k] = f[start + k * stride];
            }
            env.transform(&line[..n], w, &mut out[..n]);
            for k in 0..n {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

/// Felzenszwalb-Huttenlocher 1D transform `out[q] = min_p f[p] + w (q-p)^2`.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let meet = |f: &[f64], q: usize, p: usize| -> f64 {
            let (qf, pf) = (q as f64, p as f64);
            ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
        };
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = meet(f, q, p);
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.v.len() && self.z[k + 1] < qf {
                k += 1;
            }
            let p = self.v[k];
            let d = qf - p as f64;
            *o = f[p] + w * d * d;
        }
    }
}

/// Both directed surface-distance sets, pooled: every surface voxel of `a`
/// to the nearest surface voxel of `b`, then the reverse.
pub fn pooled_surface_distances(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<Vec<f64>> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::Domain("surface distance: masks are on different grids".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sa = SurfaceSet::of(a);
    let sb = SurfaceSet::of(b);
    let da = distance_transform(&sa.to_mask(), spacing)?;
    let db = distance_transform(&sb.to_mask(), spacing)?;
    let mut d: Vec<f64> = sa.voxels.iter().map(|&i| db.data()[i]).collect();
    d.extend(sb.voxels.iter().map(|&i| da.data()[i]));
    Ok(d)
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// 95th percentile of the pooled symmetric surface distances (mm).
pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    Ok(percentile(&pooled_surface_distances(a, b, spacing)?, 95.0))
}

/// Mean of the pooled symmetric surface distances (mm).
pub fn assd(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    let d = pooled_surface_distances(a, b, spacing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Voxelwise arithmetic mean of volumes on one grid.
pub fn group_mean(vs: &[Volume]) -> Result<Volume> {
    let first = vs.first().ok_or_else(|| Error::Domain("group mean of no volumes".into()))?;
    let mut acc = vec![0.0; first.grid().len()];
    for v in vs {
        if !v.grid().same_as(first.grid()) {
            return Err(Error::Domain("group mean: volumes are on different grids".into()));
        }
        for (a, x) in acc.iter_mut().zip(v.data()) {
            *a += x;
        }
    }
    let k = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    let units = if vs.iter().all(|v| v.units() == first.units()) {
        first.units()
    } else {
        Units::Dimensionless
    };
    Volume::new(first.grid().clone(), acc, units)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovStats {
    /// Sample SD over |mean| inside the mask, 0 elsewhere.
    pub cov_map: Volume,
    pub mean_cov: f64,
    /// Voxels whose group mean exceeds the threshold.
    pub brain_mask: BinaryMask,
    /// Mask voxels skipped because |mean| was numerically zero.
    pub excluded: usize,
}

const COV_EPS: f64 = 1e-6;

/// Voxelwise coefficient of variation across subjects within the mask
/// `group mean > threshold`.
pub fn cov_stats(vs: &[Volume], threshold: f64) -> Result<CovStats> {
    if vs.len() < 2 {
        return Err(Error::Domain("CoV needs at least two volumes".into()));
    }
    let mean = group_mean(vs)?;
    let grid = mean.grid().clone();
    let k = vs.len() as f64;
    let mut cov = vec![0.0; grid.len()];
    let mut mask = vec![false; grid.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (i, &mu) in mean.data().iter().enumerate() {
        if !(mu > threshold) {
            continue;
        }
        mask[i] = true;
        if mu.abs() <= COV_EPS {
            excluded += 1;
            continue;
        }
        let ss: f64 = vs.iter().map(|v| (v.data()[i] - mu).powi(2)).sum();
        let c = (ss / (k - 1.0)).sqrt() / mu.abs();
        cov[i] = c;
        total += c;
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateMask(format!("no voxel has group mean above {threshold}")));
    }
    Ok(CovStats {
        cov_map: Volume::new(grid.clone(), cov, Units::Dimensionless)?,
        mean_cov: total / used as f64,
        brain_mask: BinaryMask::new(grid, mask)?,
        excluded,
    })
}
