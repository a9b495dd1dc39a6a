//! Tissue volumes from native-space posteriors under an intracranial mask.
//!
//! Volumes are reported in ml on a fixed 2^-24 ml lattice so that sums of
//! class volumes are exact in floating point.

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Tissue, TissueMaps, Volume, VoxelGrid};

const QUANTUM: f64 = 16_777_216.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeReport {
    /// GM + WM.
    pub tbv_ml: f64,
    /// GM + WM + CSF.
    pub tiv_ml: f64,
    pub per_class_ml: [f64; 6],
    pub mask_volume_ml: f64,
}

impl VolumeReport {
    pub fn class_ml(&self, t: Tissue) -> f64 {
        self.per_class_ml[t.index()]
    }
}

fn quantise(ml: f64) -> f64 {
    (ml * QUANTUM).round() / QUANTUM
}

fn masked_ml(p: &[f64], grid: &VoxelGrid, mask: &BinaryMask) -> f64 {
    let sum: f64 = p.iter().zip(mask.data()).filter(|(_, m)| **m).map(|(v, _)| v).sum();
    quantise(sum * grid.voxel_volume() / 1000.0)
}

/// Probability-weighted volume (ml) of `p` over the mask.
pub fn tissue_volume(p: &Volume, mask: &BinaryMask) -> Result<f64> {
    p.grid().ensure_same(mask.grid(), "probability map and mask")?;
    if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("tissue probabilities must lie in [0, 1]".into()));
    }
    Ok(masked_ml(p.data(), p.grid(), mask))
}

pub fn brain_volumes(t: &TissueMaps, mask: &BinaryMask) -> Result<VolumeReport> {
    t.grid().ensure_same(mask.grid(), "tissue maps and mask")?;
    let per_class_ml: [f64; 6] = std::array::from_fn(|c| masked_ml(&t.channels()[c], t.grid(), mask));
    let gm = per_class_ml[Tissue::Gm.index()];
    let wm = per_class_ml[Tissue::Wm.index()];
    let csf = per_class_ml[Tissue::Csf.index()];
    Ok(VolumeReport {
        tbv_ml: gm + wm,
        tiv_ml: gm + wm + csf,
        per_class_ml,
        mask_volume_ml: quantise(mask.count() as f64 * t.grid().voxel_volume() / 1000.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};
    use crate::volgrid::Units;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    #[test]
    fn counting_examples() {
        let g = VoxelGrid::from_spacing([10, 10, 10], [1.0, 1.0, 3.0], [0.0; 3]).unwrap();
        let ones = Volume::filled(g.clone(), 1.0, Units::Probability).unwrap();
        let all = BinaryMask::from_fn(g.clone(), |_| true);
        assert_eq!(tissue_volume(&ones, &all).unwrap(), 3.0);
        assert_eq!(tissue_volume(&Volume::zeros(g.clone(), Units::Probability), &all).unwrap(), 0.0);

        let g = VoxelGrid::from_spacing([20, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let half = Volume::filled(g.clone(), 0.5, Units::Probability).unwrap();
        assert_eq!(tissue_volume(&half, &BinaryMask::from_fn(g, |_| true)).unwrap(), 1.0);
    }

    #[test]
    fn sheared_affine_uses_determinant() {
        let mut a = Matrix4::identity();
        a[(0, 0)] = 2.0;
        a[(0, 1)] = 1.5;
        let g = VoxelGrid::new([10, 10, 10], a).unwrap();
        let ones = Volume::filled(g.clone(), 1.0, Units::Probability).unwrap();
        assert_eq!(tissue_volume(&ones, &BinaryMask::from_fn(g, |_| true)).unwrap(), 2.0);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = VoxelGrid::centered([4, 4, 4], [1.0; 3]).unwrap();
        let b = VoxelGrid::centered([4, 4, 5], [1.0; 3]).unwrap();
        let v = Volume::zeros(a, Units::Probability);
        assert!(matches!(tissue_volume(&v, &BinaryMask::empty(b)), Err(Error::Domain(_))));
    }

    #[test]
    fn phantom_truth_matches_analytic_volume() {
        let spec = PhantomSpec::default();
        let p = make_phantom(&spec).unwrap();
        let mask = BinaryMask::from_fn(p.truth.grid().clone(), |_| true);
        let r = brain_volumes(&p.truth, &mask).unwrap();
        let a = spec.analytic_volumes();
        let tbv = (a[Tissue::Gm.index()] + a[Tissue::Wm.index()]) / 1000.0;
        let tiv = tbv + a[Tissue::Csf.index()] / 1000.0;
        assert!((r.tbv_ml - tbv).abs() / tbv < 0.02, "{} vs {tbv}", r.tbv_ml);
        assert!((r.tiv_ml - tiv).abs() / tiv < 0.02, "{} vs {tiv}", r.tiv_ml);
        assert_eq!(r.tiv_ml - r.tbv_ml, r.class_ml(Tissue::Csf));
    }

    #[test]
    fn empty_mask_gives_zero() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let r = brain_volumes(&p.truth, &BinaryMask::empty(p.truth.grid().clone())).unwrap();
        assert_eq!((r.tbv_ml, r.tiv_ml, r.mask_volume_ml), (0.0, 0.0, 0.0));
        assert!(r.per_class_ml.iter().all(|v| *v == 0.0));
    }

    fn random_maps(raw: &[[f64; 6]]) -> TissueMaps {
        let g = VoxelGrid::centered([raw.len(), 1, 1], [1.7, 2.1, 0.9]).unwrap();
        let ch: [Vec<f64>; 6] = std::array::from_fn(|c| raw.iter().map(|r| r[c]).collect());
        TissueMaps::normalized(g, ch).unwrap()
    }

    proptest! {
        #[test]
        fn identity_and_bounds(raw in prop::collection::vec(prop::array::uniform6(0.01f64..1.0), 1..40), keep in prop::collection::vec(any::<bool>(), 40)) {
            let t = random_maps(&raw);
            let mask = BinaryMask::new(t.grid().clone(), keep[..raw.len()].to_vec()).unwrap();
            let r = brain_volumes(&t, &mask).unwrap();
            prop_assert_eq!(r.tiv_ml - r.tbv_ml, r.class_ml(Tissue::Csf));
            prop_assert_eq!(r.tbv_ml + r.class_ml(Tissue::Csf), r.tiv_ml);
            prop_assert!(0.0 <= r.tbv_ml && r.tbv_ml <= r.tiv_ml && r.tiv_ml <= r.mask_volume_ml + 1e-6);
        }

        #[test]
        fn shrinking_mask_never_increases(raw in prop::collection::vec(prop::array::uniform6(0.01f64..1.0), 1..40), keep in prop::collection::vec(any::<bool>(), 40), drop in prop::collection::vec(any::<bool>(), 40)) {
            let t = random_maps(&raw);
            let n = raw.len();
            let big = BinaryMask::new(t.grid().clone(), keep[..n].to_vec()).unwrap();
            let small = BinaryMask::new(t.grid().clone(), (0..n).map(|i| keep[i] && !drop[i]).collect()).unwrap();
            let a = brain_volumes(&t, &big).unwrap();
            let b = brain_volumes(&t, &small).unwrap();
            for c in 0..6 {
                prop_assert!(b.per_class_ml[c] <= a.per_class_ml[c]);
            }
            prop_assert!(b.tiv_ml <= a.tiv_ml && b.tbv_ml <= a.tbv_ml);
        }

        #[test]
        fn volume_is_linear(vals in prop::collection::vec(0.0f64..1.0, 1..60), alpha in 0.0f64..1.0) {
            let g = VoxelGrid::centered([vals.len(), 1, 1], [1.3, 2.0, 2.5]).unwrap();
            let mask = BinaryMask::from_fn(g.clone(), |_| true);
            let v = Volume::new(g.clone(), vals.clone(), Units::Probability).unwrap();
            let s = Volume::new(g, vals.iter().map(|x| alpha * x).collect(), Units::Probability).unwrap();
            let a = tissue_volume(&v, &mask).unwrap();
            let b = tissue_volume(&s, &mask).unwrap();
            prop_assert!((b - alpha * a).abs() <= 2.0 / QUANTUM);
        }
    }
}
