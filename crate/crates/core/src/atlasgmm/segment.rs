use crate::error::{Error, Result};
use crate::register::{
    register_affine, register_nonlinear, warp_data, Boundary, DeformationField, LinearRegOpts, NonlinearOpts,
};
use crate::volgrid::{
    softmax_slices, BinaryMask, Interp, Tissue, TissueMaps, Units, Volume, VoxelGrid,
};

use super::em::{em_fit, init_gmm};
use super::{Atlas, GmmModel, ModalityProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOpts {
    pub profile: ModalityProfile,
    pub affine: LinearRegOpts,
    pub nonlinear: NonlinearOpts,
    pub em_tol: f64,
    pub em_max_iter: usize,
    /// Rounds of nonlinear registration + EM after the first fit.
    pub alternations: usize,
}

impl SegmentOpts {
    pub fn new(profile: ModalityProfile) -> Self {
        SegmentOpts {
            profile,
            affine: LinearRegOpts {
                finest_factor: 2,
                ..LinearRegOpts::default()
            },
            nonlinear: NonlinearOpts::default(),
            em_tol: 1e-5,
            em_max_iter: 50,
            alternations: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    /// Native-space class posteriors.
    pub posteriors: TissueMaps,
    /// Atlas grid -> native world.
    pub deformation: DeformationField,
    pub model: GmmModel,
    /// Log-likelihood traces of every EM fit, concatenated.
    pub loglik_trace: Vec<f64>,
    /// Start index of each fit within `loglik_trace`; the trace is
    /// non-decreasing between consecutive starts.
    pub fit_starts: Vec<usize>,
}

impl SegmentationResult {
    /// The concatenated trace split into its individual fits.
    pub fn fits(&self) -> Vec<&[f64]> {
        let mut ends: Vec<usize> = self.fit_starts[1..].to_vec();
        ends.push(self.loglik_trace.len());
        self.fit_starts
            .iter()
            .zip(ends)
            .map(|(&s, e)| &self.loglik_trace[s..e])
            .collect()
    }
}

/// Atlas-space image whose value is the prior-weighted sum of class means.
pub fn class_expectation(atlas: &Atlas, class_means: &[f64; 6]) -> Volume {
    let p = atlas.priors();
    let n = atlas.grid().len();
    let data = (0..n)
        .map(|i| (0..6).map(|c| p.channels()[c][i] * class_means[c]).sum())
        .collect();
    Volume::new(atlas.grid().clone(), data, Units::Dimensionless).expect("length matches grid")
}

/// Atlas priors pulled into `native` through the inverse of `field`. Log
/// priors are interpolated with edge replication, then softmaxed.
pub fn warp_priors(atlas: &Atlas, field: &DeformationField, native: &VoxelGrid) -> Result<TissueMaps> {
    atlas.grid().ensure_same(field.grid(), "atlas and deformation")?;
    let inverse = field.invert_onto(native)?;
    let warped: Vec<Vec<f64>> = atlas
        .log_priors()
        .iter()
        .map(|lp| warp_data(lp, atlas.grid(), &inverse, Interp::Trilinear, Boundary::Replicate))
        .collect::<Result<_>>()?;
    let slices: [&[f64]; 6] = std::array::from_fn(|c| warped[c].as_slice());
    softmax_slices(native.clone(), slices)
}

/// Native posteriors pulled onto the atlas grid; voxels mapping outside the
/// native field of view become background.
fn posteriors_to_atlas(post: &TissueMaps, field: &DeformationField) -> Result<TissueMaps> {
    let mut chans: [Vec<f64>; 6] = Default::default();
    for (o, c) in chans.iter_mut().zip(post.channels()) {
        *o = warp_data(c, post.grid(), field, Interp::Trilinear, Boundary::Zero)?;
    }
    TissueMaps::normalized(field.grid().clone(), chans)
}

/// Affine atlas alignment, then EM alternating with nonlinear refinement.
pub fn segment(v: &Volume, atlas: &Atlas, opts: &SegmentOpts) -> Result<SegmentationResult> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateInput("image is constant".into()));
    }
    let expectation = class_expectation(atlas, &opts.profile.class_means);
    let params = register_affine(v, &expectation, &opts.affine)?;
    let mut field = DeformationField::from_affine(atlas.grid(), &params.to_matrix());

    let native = v.grid();
    let priors = warp_priors(atlas, &field, native)?;
    let init = init_gmm(v, &priors, opts.profile.gaussians_per_class, opts.profile.modality)?;
    let mut fit = em_fit(v, &priors, &init, opts.em_tol, opts.em_max_iter)?;
    let mut trace = fit.loglik_trace.clone();
    let mut starts = vec![0];

    let atlas_priors = atlas.priors();
    for _ in 0..opts.alternations {
        let warped = posteriors_to_atlas(&fit.posteriors, &field)?;
        let nl = register_nonlinear(&warped, &atlas_priors, &opts.nonlinear)?;
        field = field.compose_displacement(&nl.displacement)?;
        let priors = warp_priors(atlas, &field, native)?;
        fit = em_fit(v, &priors, &fit.model, opts.em_tol, opts.em_max_iter)?;
        starts.push(trace.len());
        trace.extend_from_slice(&fit.loglik_trace);
    }
    Ok(SegmentationResult {
        posteriors: fit.posteriors,
        deformation: field,
        model: fit.model,
        loglik_trace: trace,
        fit_starts: starts,
    })
}

/// Native-space intracranial mask: atlas voxels whose GM+WM+CSF prior is at
/// least 0.5, carried to `native` by trilinear interpolation of the
/// indicator and re-thresholded at 0.5.
pub fn intracranial_mask(atlas: &Atlas, field: &DeformationField, native: &VoxelGrid) -> Result<BinaryMask> {
    atlas.grid().ensure_same(field.grid(), "atlas and deformation")?;
    let p = atlas.priors();
    let indicator: Vec<f64> = (0..atlas.grid().len())
        .map(|i| {
            let s: f64 = Tissue::BRAIN.iter().map(|t| p.channel(*t)[i]).sum();
            if s >= 0.5 { 1.0 } else { 0.0 }
        })
        .collect();
    let inverse = field.invert_onto(native)?;
    let warped = warp_data(&indicator, atlas.grid(), &inverse, Interp::Trilinear, Boundary::Zero)?;
    BinaryMask::new(native.clone(), warped.into_iter().map(|v| v >= 0.5).collect())
}
