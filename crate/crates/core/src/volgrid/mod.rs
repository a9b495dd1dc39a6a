//! Volumetric data model: voxel grids with a voxel-to-world affine, scalar
//! volumes, six-class tissue probability maps and binary masks, plus the
//! grid-level operations every other module builds on (NIfTI-1 I/O,
//! resampling, Gaussian smoothing, thresholding and channel softmax).
//!
//! Data are stored with x varying fastest, matching the NIfTI on-disk order:
//! `index = x + nx * (y + ny * z)`.

mod nifti;
pub(crate) mod resample;
pub(crate) mod smooth;

pub use nifti::{read_nifti, read_nifti_channels, write_nifti, write_nifti_channels, NiftiChannels};
pub use resample::{resample, sample, sample_clamped, Interp};
pub use smooth::{fwhm_to_sigma, gaussian_kernel_1d, gaussian_smooth, FWHM_TO_SIGMA};

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Tolerance used when comparing affines of two grids.
const GRID_TOL: f64 = 1e-6;

/// Tolerance on probability range checks; values within this of [0, 1] are clamped.
const PROB_TOL: f64 = 1e-9;

/// Regular 3D sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl VoxelGrid {
    /// Builds a grid from dimensions and a voxel-to-world affine. Spacing is
    /// taken from the column norms of the affine's 3x3 part.
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dimensions must be positive, got {dims:?}")));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("affine has non-finite entries".into()));
        }
        let lin = linear_part(&affine);
        if lin.determinant().abs() < 1e-12 {
            return Err(Error::Geometry("affine 3x3 part is singular".into()));
        }
        let spacing = [
            lin.column(0).norm(),
            lin.column(1).norm(),
            lin.column(2).norm(),
        ];
        Ok(VoxelGrid {
            dims,
            spacing,
            affine,
        })
    }

    /// Axis-aligned grid whose voxel (0,0,0) sits at `origin` (mm).
    pub fn from_spacing(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!("spacing must be positive, got {spacing:?}")));
        }
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Self::new(dims, affine)
    }

    /// Axis-aligned grid whose geometric centre is the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Self::from_spacing(dims, spacing, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel volume in mm^3, from the determinant of the affine's 3x3 part.
    pub fn voxel_volume(&self) -> f64 {
        linear_part(&self.affine).determinant().abs()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, p)
    }

    pub fn world_to_voxel(&self) -> Result<Matrix4<f64>> {
        self.affine
            .try_inverse()
            .ok_or_else(|| Error::Geometry("grid affine is not invertible".into()))
    }

    /// World coordinate of the grid centre.
    pub fn center_world(&self) -> [f64; 3] {
        self.voxel_to_world([0, 1, 2].map(|a| 0.5 * (self.dims[a] as f64 - 1.0)))
    }

    /// True when both grids have equal dimensions and affines agree within 1e-6.
    pub fn same_as(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= GRID_TOL)
    }

    pub(crate) fn ensure_same(&self, other: &VoxelGrid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::Domain(format!("{what}: grids differ")))
        }
    }

    /// Grid covering the same field of view with every axis coarsened by
    /// `factor`, keeping the world centre fixed.
    pub fn downsampled(&self, factor: usize) -> VoxelGrid {
        if factor <= 1 {
            return self.clone();
        }
        let f = factor as f64;
        let dims = self.dims.map(|d| d.div_ceil(factor).max(1));
        let lin = linear_part(&self.affine) * f;
        let centre = self.center_world();
        let half = [0, 1, 2].map(|a| 0.5 * (dims[a] as f64 - 1.0));
        let mut affine = Matrix4::identity();
        for r in 0..3 {
            for c in 0..3 {
                affine[(r, c)] = lin[(r, c)];
            }
            affine[(r, 3)] =
                centre[r] - (lin[(r, 0)] * half[0] + lin[(r, 1)] * half[1] + lin[(r, 2)] * half[2]);
        }
        VoxelGrid::new(dims, affine).expect("scaled affine of a valid grid is valid")
    }
}

pub(crate) fn linear_part(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

#[inline]
pub(crate) fn apply_affine(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

/// Physical unit of a volume's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Units {
    Hu,
    MrArbitrary,
    Probability,
    Dimensionless,
}

impl Units {
    pub fn tag(self) -> &'static str {
        match self {
            Units::Hu => "HU",
            Units::MrArbitrary => "MR",
            Units::Probability => "probability",
            Units::Dimensionless => "dimensionless",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Units> {
        match tag {
            "HU" => Some(Units::Hu),
            "MR" => Some(Units::MrArbitrary),
            "probability" => Some(Units::Probability),
            "dimensionless" => Some(Units::Dimensionless),
            _ => None,
        }
    }
}

/// Scalar volume on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: VoxelGrid,
    data: Vec<f64>,
    units: Units,
}

impl Volume {
    pub fn new(grid: VoxelGrid, mut data: Vec<f64>, units: Units) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Domain(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if units == Units::Probability {
            for v in data.iter_mut() {
                if !(*v >= -PROB_TOL && *v <= 1.0 + PROB_TOL) {
                    return Err(Error::Domain(format!("probability value {v} outside [0, 1]")));
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(Volume { grid, data, units })
    }

    pub fn zeros(grid: VoxelGrid, units: Units) -> Self {
        let n = grid.len();
        Volume {
            grid,
            data: vec![0.0; n],
            units,
        }
    }

    pub fn filled(grid: VoxelGrid, value: f64, units: Units) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n], units)
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(grid: VoxelGrid, units: Units, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, data, units)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Same grid, new data and units.
    pub fn with_data(&self, data: Vec<f64>, units: Units) -> Result<Self> {
        Self::new(self.grid.clone(), data, units)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// The six tissue classes, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tissue {
    Gm,
    Wm,
    Csf,
    Bone,
    Soft,
    Background,
}

impl Tissue {
    pub const ALL: [Tissue; 6] = [
        Tissue::Gm,
        Tissue::Wm,
        Tissue::Csf,
        Tissue::Bone,
        Tissue::Soft,
        Tissue::Background,
    ];

    /// Classes validated against the reference segmentation.
    pub const BRAIN: [Tissue; 3] = [Tissue::Gm, Tissue::Wm, Tissue::Csf];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
            Tissue::Csf => "CSF",
            Tissue::Bone => "Bone",
            Tissue::Soft => "Soft",
            Tissue::Background => "Background",
        }
    }

    pub fn from_name(name: &str) -> Option<Tissue> {
        Tissue::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-voxel class probabilities over the six tissues.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMaps {
    grid: VoxelGrid,
    channels: [Vec<f64>; 6],
}

impl TissueMaps {
    /// Validates shape, range and the per-voxel unit sum (within 1e-5).
    pub fn new(grid: VoxelGrid, channels: [Vec<f64>; 6]) -> Result<Self> {
        let n = grid.len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Domain("tissue channel length does not match grid".into()));
        }
        for i in 0..n {
            let mut s = 0.0;
            for c in &channels {
                let v = c[i];
                if !(v >= -PROB_TOL && v <= 1.0 + PROB_TOL) {
                    return Err(Error::Domain(format!("tissue probability {v} outside [0, 1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Domain(format!("tissue probabilities sum to {s} at voxel {i}")));
            }
        }
        Ok(TissueMaps { grid, channels })
    }

    /// Clamps negatives and rescales each voxel to unit sum; voxels with zero
    /// total mass become background.
    pub fn normalized(grid: VoxelGrid, mut channels: [Vec<f64>; 6]) -> Result<Self> {
        let n = grid.len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Domain("tissue channel length does not match grid".into()));
        }
        for i in 0..n {
            let mut s = 0.0;
            for c in channels.iter_mut() {
                if !c[i].is_finite() {
                    return Err(Error::Numeric(format!("tissue value at voxel {i}")));
                }
                c[i] = c[i].max(0.0);
                s += c[i];
            }
            if s > 0.0 {
                for c in channels.iter_mut() {
                    c[i] /= s;
                }
            } else {
                channels[Tissue::Background.index()][i] = 1.0;
            }
        }
        Ok(TissueMaps { grid, channels })
    }

    /// One-hot maps from a per-voxel label array.
    pub fn one_hot(grid: VoxelGrid, labels: &[Tissue]) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Domain("label length does not match grid".into()));
        }
        let mut channels: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; labels.len()]);
        for (i, t) in labels.iter().enumerate() {
            channels[t.index()][i] = 1.0;
        }
        Ok(TissueMaps { grid, channels })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn channel(&self, t: Tissue) -> &[f64] {
        &self.channels[t.index()]
    }

    pub fn channels(&self) -> &[Vec<f64>; 6] {
        &self.channels
    }

    pub fn into_channels(self) -> [Vec<f64>; 6] {
        self.channels
    }

    pub fn volume(&self, t: Tissue) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.channels[t.index()].clone(),
            units: Units::Probability,
        }
    }

    /// Most probable class per voxel (ties resolve to the earlier class).
    pub fn argmax(&self) -> Vec<Tissue> {
        (0..self.grid.len())
            .map(|i| {
                let mut best = Tissue::Gm;
                for t in Tissue::ALL {
                    if self.channels[t.index()][i] > self.channels[best.index()][i] {
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// Boolean voxel mask on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: VoxelGrid,
    data: Vec<bool>,
}

// VoxelGrid holds f64s, but masks are only compared for exact equality.
impl Eq for VoxelGrid {}

impl BinaryMask {
    pub fn new(grid: VoxelGrid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Domain("mask length does not match grid".into()));
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn empty(grid: VoxelGrid) -> Self {
        let n = grid.len();
        BinaryMask {
            grid,
            data: vec![false; n],
        }
    }

    pub fn from_fn(grid: VoxelGrid, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        BinaryMask { grid, data }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.grid.ensure_same(&other.grid, "mask intersection")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask {
            grid: self.grid.clone(),
            data,
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            units: Units::Probability,
        }
    }
}

/// Foreground iff `value >= threshold`.
pub fn binarise(p: &Volume, threshold: f64) -> BinaryMask {
    BinaryMask {
        grid: p.grid.clone(),
        data: p.data.iter().map(|&v| v >= threshold).collect(),
    }
}

/// Per-voxel softmax across six aligned logit volumes.
pub fn softmax_channels(logits: [&Volume; 6]) -> Result<TissueMaps> {
    let grid = logits[0].grid().clone();
    for l in &logits[1..] {
        grid.ensure_same(l.grid(), "softmax channels")?;
    }
    let slices: [&[f64]; 6] = logits.map(|v| v.data());
    softmax_slices(grid, slices)
}

pub(crate) fn softmax_slices(grid: VoxelGrid, logits: [&[f64]; 6]) -> Result<TissueMaps> {
    let n = grid.len();
    let mut channels: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for l in &logits {
            let v = l[i];
            if !v.is_finite() {
                return Err(Error::Numeric(format!("logit {v} at voxel {i}")));
            }
            m = m.max(v);
        }
        let mut s = 0.0;
        for (c, l) in logits.iter().enumerate() {
            let e = (l[i] - m).exp();
            channels[c][i] = e;
            s += e;
        }
        for c in channels.iter_mut() {
            c[i] /= s;
        }
    }
    Ok(TissueMaps { grid, channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> VoxelGrid {
        VoxelGrid::from_spacing([4, 4, 4], [1.0, 1.0, 1.0], [0.0; 3]).unwrap()
    }

    #[test]
    fn spacing_follows_affine_columns() {
        let g = VoxelGrid::from_spacing([3, 4, 5], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.spacing(), [1.0, 2.0, 3.0]);
        assert!((g.voxel_volume() - 6.0).abs() < 1e-12);
        assert_eq!(g.coords(g.index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(VoxelGrid::from_spacing([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(VoxelGrid::new([2, 2, 2], Matrix4::zeros()).is_err());
        assert!(VoxelGrid::new([0, 2, 2], Matrix4::identity()).is_err());
    }

    #[test]
    fn probability_volume_range_checked() {
        assert!(Volume::new(grid4(), vec![1.5; 64], Units::Probability).is_err());
        assert!(Volume::new(grid4(), vec![0.5; 63], Units::Hu).is_err());
    }

    #[test]
    fn binarise_tie_is_foreground() {
        let g = VoxelGrid::from_spacing([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, vec![0.49, 0.5, 0.0], Units::Probability).unwrap();
        let m = binarise(&v, 0.5);
        assert_eq!(m.data(), &[false, true, false]);
        let zero = Volume::zeros(grid4(), Units::Probability);
        assert!(binarise(&zero, 0.5).is_empty());
    }

    #[test]
    fn softmax_cases() {
        let g = VoxelGrid::from_spacing([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let eq: Vec<Volume> = (0..6).map(|_| Volume::new(g.clone(), vec![3.0], Units::Dimensionless).unwrap()).collect();
        let t = softmax_channels(std::array::from_fn(|i| &eq[i])).unwrap();
        for c in Tissue::ALL {
            assert!((t.channel(c)[0] - 1.0 / 6.0).abs() < 1e-15);
        }
        let vals = [10.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let vs: Vec<Volume> = vals.iter().map(|&v| Volume::new(g.clone(), vec![v], Units::Dimensionless).unwrap()).collect();
        let t = softmax_channels(std::array::from_fn(|i| &vs[i])).unwrap();
        // e^10 / (e^10 + 5)
        let expected = 10f64.exp() / (10f64.exp() + 5.0);
        assert!((t.channel(Tissue::Gm)[0] - expected).abs() < 1e-15);
        assert!(t.channel(Tissue::Gm)[0] > 0.9997);
        let shifted: Vec<Volume> = vals.iter().map(|&v| Volume::new(g.clone(), vec![v + 123.0], Units::Dimensionless).unwrap()).collect();
        let t2 = softmax_channels(std::array::from_fn(|i| &shifted[i])).unwrap();
        for c in Tissue::ALL {
            assert!((t.channel(c)[0] - t2.channel(c)[0]).abs() < 1e-15);
        }
        let mut bad = vs.clone();
        bad[2] = Volume::new(g.clone(), vec![f64::NAN], Units::Dimensionless).unwrap();
        assert!(matches!(softmax_channels(std::array::from_fn(|i| &bad[i])), Err(Error::Numeric(_))));
    }

    #[test]
    fn tissue_maps_validate_sum() {
        let g = VoxelGrid::from_spacing([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let ch: [Vec<f64>; 6] = std::array::from_fn(|i| vec![if i == 0 { 0.5 } else { 0.0 }]);
        assert!(TissueMaps::new(g.clone(), ch.clone()).is_err());
        let t = TissueMaps::normalized(g, ch).unwrap();
        assert_eq!(t.channel(Tissue::Gm)[0], 1.0);
    }

    #[test]
    fn downsampled_keeps_centre() {
        let g = VoxelGrid::centered([64, 64, 48], [2.0, 2.0, 3.0]).unwrap();
        let d = g.downsampled(2);
        assert_eq!(d.dims(), [32, 32, 24]);
        assert_eq!(d.spacing(), [4.0, 4.0, 6.0]);
        let (a, b) = (g.center_world(), d.center_world());
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }
}
