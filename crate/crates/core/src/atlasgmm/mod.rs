//! Atlas-guided Gaussian-mixture tissue segmentation.
//!
//! Each of the six tissue classes owns one or more Gaussian components in the
//! intensity domain; the atlas supplies the voxelwise class prior. EM
//! alternates with nonlinear registration of the posteriors to the atlas.

mod em;
mod segment;

use std::fmt;
use std::path::Path;

pub use em::{em_fit, init_gmm, EmFit};
pub use segment::{class_expectation, intracranial_mask, segment, warp_priors, SegmentOpts, SegmentationResult};

use crate::error::{Error, Result};
use crate::volgrid::{
    read_nifti_channels, softmax_slices, write_nifti_channels, TissueMaps, Units, Volume, VoxelGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ct,
    Mr,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
        }
    }

    pub fn from_name(s: &str) -> Option<Modality> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Some(Modality::Ct),
            "MR" | "MRI" => Some(Modality::Mr),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-modality mixture configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProfile {
    pub modality: Modality,
    /// Components per class, in [`Tissue::ALL`](crate::volgrid::Tissue::ALL) order.
    pub gaussians_per_class: [usize; 6],
    /// Typical class intensities, used to build the class-expectation image
    /// for atlas alignment before any fit exists.
    pub class_means: [f64; 6],
    /// Variance floor as a fraction of the image intensity range; the floor is
    /// `(fraction * range)^2`.
    pub floor_fraction: f64,
}

impl ModalityProfile {
    /// Calibrated-HU profile: narrow floor, several bone, soft-tissue and
    /// background components.
    pub fn ct() -> Self {
        ModalityProfile {
            modality: Modality::Ct,
            gaussians_per_class: [1, 1, 1, 3, 2, 6],
            class_means: [38.0, 30.0, 8.0, 700.0, 40.0, -1000.0],
            floor_fraction: 5e-4,
        }
    }

    /// Arbitrary-unit MR profile.
    pub fn mr() -> Self {
        ModalityProfile {
            modality: Modality::Mr,
            gaussians_per_class: [1, 1, 1, 1, 1, 2],
            class_means: [70.0, 100.0, 30.0, 10.0, 60.0, 0.0],
            floor_fraction: 0.01,
        }
    }

    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Ct => Self::ct(),
            Modality::Mr => Self::mr(),
        }
    }

    pub fn total_components(&self) -> usize {
        self.gaussians_per_class.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Fitted (or initial) mixture: per-class component lists.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub classes: [Vec<Component>; 6],
    pub modality: Modality,
    pub variance_floor: f64,
}

impl GmmModel {
    pub fn gaussians_per_class(&self) -> [usize; 6] {
        std::array::from_fn(|c| self.classes[c].len())
    }

    pub fn total_components(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Weight-averaged class mean.
    pub fn class_mean(&self, class: usize) -> f64 {
        self.classes[class].iter().map(|k| k.weight * k.mean).sum()
    }

    /// Same model under the intensity map `x -> a x + b`.
    pub fn affine_intensity(&self, a: f64, b: f64) -> GmmModel {
        GmmModel {
            classes: self.classes.clone().map(|ks| {
                ks.into_iter()
                    .map(|k| Component {
                        weight: k.weight,
                        mean: a * k.mean + b,
                        variance: a * a * k.variance,
                    })
                    .collect()
            }),
            modality: self.modality,
            variance_floor: a * a * self.variance_floor,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (c, ks) in self.classes.iter().enumerate() {
            if ks.is_empty() {
                return Err(Error::Fit(format!("class {c} has no components")));
            }
            let w: f64 = ks.iter().map(|k| k.weight).sum();
            if (w - 1.0).abs() > 1e-9 {
                return Err(Error::Fit(format!("class {c} weights sum to {w}")));
            }
            if ks
                .iter()
                .any(|k| !k.mean.is_finite() || !(k.variance > 0.0) || !(k.weight >= 0.0))
            {
                return Err(Error::Fit(format!("class {c} has an invalid component")));
            }
        }
        Ok(())
    }
}

/// Tissue atlas in log-odds form; softmax across channels gives priors.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    grid: VoxelGrid,
    log_priors: [Vec<f64>; 6],
}

impl Atlas {
    pub fn new(grid: VoxelGrid, log_priors: [Vec<f64>; 6]) -> Result<Self> {
        if log_priors.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Domain("atlas channel length does not match grid".into()));
        }
        if log_priors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("atlas log-priors must be finite".into()));
        }
        Ok(Atlas { grid, log_priors })
    }

    /// Log of probabilities floored at `eps`.
    pub fn from_probabilities(maps: &TissueMaps, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain("atlas floor must be positive".into()));
        }
        let log_priors = maps.channels().clone().map(|c| c.into_iter().map(|p| p.max(eps).ln()).collect());
        Atlas::new(maps.grid().clone(), log_priors)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn log_priors(&self) -> &[Vec<f64>; 6] {
        &self.log_priors
    }

    pub fn log_prior_volume(&self, class: usize) -> Volume {
        Volume::new(self.grid.clone(), self.log_priors[class].clone(), Units::Dimensionless)
            .expect("atlas channels match the grid")
    }

    pub fn priors(&self) -> TissueMaps {
        let slices: [&[f64]; 6] = std::array::from_fn(|c| self.log_priors[c].as_slice());
        softmax_slices(self.grid.clone(), slices).expect("atlas log-priors are finite")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let ch: Vec<&[f64]> = self.log_priors.iter().map(Vec::as_slice).collect();
        write_nifti_channels(&self.grid, &ch, Units::Dimensionless, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = read_nifti_channels(path)?;
        let n = img.channels.len();
        let channels: [Vec<f64>; 6] = img
            .channels
            .try_into()
            .map_err(|_| Error::Format(format!("atlas needs 6 channels, found {n}")))?;
        Atlas::new(img.grid, channels)
    }
}
