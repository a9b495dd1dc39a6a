//! Synthetic paired CT/MR head phantoms with exact ground truth.
//!
//! The canonical head is a set of nested ellipsoids centred at the world
//! origin. A subject is the canonical head pushed through a random global
//! scale, rigid pose and smooth displacement; labels are evaluated
//! analytically at the pulled-back position of every native voxel, so truth
//! maps stay exactly one-hot.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::atlasgmm::Atlas;
use crate::error::{Error, Result};
use crate::register::{AffineParams, DeformationField};
use crate::volgrid::smooth::smooth_data;
use crate::volgrid::{apply_affine, Tissue, TissueMaps, Units, Volume, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn name(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    pub fn from_name(s: &str) -> Option<Sex> {
        match s {
            "F" | "f" | "female" => Some(Sex::Female),
            "M" | "m" | "male" => Some(Sex::Male),
            _ => None,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class intensity plateaus and per-class noise SDs, in [`Tissue::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIntensities {
    pub means: [f64; 6],
    pub sds: [f64; 6],
}

impl ClassIntensities {
    pub fn ct() -> Self {
        ClassIntensities {
            means: [38.0, 30.0, 8.0, 700.0, 60.0, -1000.0],
            sds: [2.0, 2.0, 2.0, 20.0, 4.0, 3.0],
        }
    }

    pub fn mr() -> Self {
        ClassIntensities {
            means: [70.0, 100.0, 30.0, 10.0, 60.0, 0.0],
            sds: [3.0, 3.0, 3.0, 3.0, 3.0, 2.0],
        }
    }

    pub fn noiseless(&self) -> Self {
        ClassIntensities {
            means: self.means,
            sds: [0.0; 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid semi-axes in mm, outermost first.
    pub head: [f64; 3],
    pub skull_outer: [f64; 3],
    pub skull_inner: [f64; 3],
    /// Outer surface of the GM shell.
    pub brain: [f64; 3],
    /// Outer surface of the WM core.
    pub wm: [f64; 3],
    pub ventricles: [f64; 3],
    pub ct: ClassIntensities,
    pub mr: ClassIntensities,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [3.5; 3],
            head: [82.0, 96.0, 86.0],
            skull_outer: [76.0, 90.0, 80.0],
            skull_inner: [69.0, 83.0, 73.0],
            brain: [64.0, 78.0, 68.0],
            wm: [53.0, 67.0, 57.0],
            ventricles: [10.0, 22.0, 12.0],
            ct: ClassIntensities::ct(),
            mr: ClassIntensities::mr(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::centered(self.dims, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let shells = [
            ("ventricles", self.ventricles),
            ("wm", self.wm),
            ("brain", self.brain),
            ("skull_inner", self.skull_inner),
            ("skull_outer", self.skull_outer),
            ("head", self.head),
        ];
        if shells.iter().flat_map(|s| s.1).any(|a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Spec("semi-axes must be positive".into()));
        }
        for w in shells.windows(2) {
            if (0..3).any(|a| w[0].1[a] >= w[1].1[a]) {
                return Err(Error::Spec(format!("{} must lie strictly inside {}", w[0].0, w[1].0)));
            }
        }
        for ci in [&self.ct, &self.mr] {
            if ci.sds.iter().any(|s| !(*s >= 0.0)) || ci.means.iter().any(|m| !m.is_finite()) {
                return Err(Error::Spec("class SDs must be non-negative and means finite".into()));
            }
        }
        self.grid().map(|_| ())
    }

    /// Tissue at a canonical-space world point.
    pub fn label_at(&self, p: [f64; 3]) -> Tissue {
        let inside = |s: [f64; 3]| (0..3).map(|a| (p[a] / s[a]).powi(2)).sum::<f64>() <= 1.0;
        if !inside(self.head) {
            Tissue::Background
        } else if !inside(self.skull_outer) {
            Tissue::Soft
        } else if !inside(self.skull_inner) {
            Tissue::Bone
        } else if !inside(self.brain) {
            Tissue::Csf
        } else if !inside(self.wm) {
            Tissue::Gm
        } else if !inside(self.ventricles) {
            Tissue::Wm
        } else {
            Tissue::Csf
        }
    }

    /// Closed-form canonical class volumes (mm^3).
    pub fn analytic_volumes(&self) -> [f64; 6] {
        let e = |s: [f64; 3]| 4.0 / 3.0 * std::f64::consts::PI * s[0] * s[1] * s[2];
        let mut v = [0.0; 6];
        v[Tissue::Gm.index()] = e(self.brain) - e(self.wm);
        v[Tissue::Wm.index()] = e(self.wm) - e(self.ventricles);
        v[Tissue::Csf.index()] = e(self.skull_inner) - e(self.brain) + e(self.ventricles);
        v[Tissue::Bone.index()] = e(self.skull_outer) - e(self.skull_inner);
        v[Tissue::Soft.index()] = e(self.head) - e(self.skull_outer);
        v
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub ct: Volume,
    pub mr: Volume,
    pub truth: TissueMaps,
    /// Canonical (atlas) grid -> subject world.
    pub truth_field: DeformationField,
    pub sex: Sex,
    pub scale_factor: f64,
    pub seed: u64,
}

impl PhantomSubject {
    pub fn labels(&self) -> Vec<Tissue> {
        self.truth.argmax()
    }
}

/// Canonical phantom on the `PhantomSpec` grid: identity pose, unit scale.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomSubject> {
    spec.validate()?;
    let grid = spec.grid()?;
    let field = DeformationField::identity(&grid);
    let labels: Vec<Tissue> = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            spec.label_at(grid.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    render("phantom".into(), spec, grid, labels, field, Sex::Female, 1.0, spec.seed, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn render(
    id: String,
    spec: &PhantomSpec,
    grid: VoxelGrid,
    labels: Vec<Tissue>,
    truth_field: DeformationField,
    sex: Sex,
    scale_factor: f64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<PhantomSubject> {
    let mut intensities = |ci: &ClassIntensities| -> Vec<f64> {
        labels
            .iter()
            .map(|t| {
                let c = t.index();
                let z: f64 = rng.sample(StandardNormal);
                ci.means[c] + ci.sds[c] * z
            })
            .collect()
    };
    let ct = intensities(&spec.ct);
    let mr = intensities(&spec.mr);
    Ok(PhantomSubject {
        id,
        ct: Volume::new(grid.clone(), ct, Units::Hu)?,
        mr: Volume::new(grid.clone(), mr, Units::MrArbitrary)?,
        truth: TissueMaps::one_hot(grid, &labels)?,
        truth_field,
        sex,
        scale_factor,
        seed,
    })
}

/// Between-subject variability of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortVariation {
    /// Uniform range (+/-) of each rotation angle, degrees.
    pub rotation_deg: f64,
    /// Uniform range (+/-) of each translation, mm.
    pub translation_mm: f64,
    /// Largest displacement magnitude of the smooth warp, mm.
    pub warp_amplitude_mm: f64,
    /// Gaussian sigma (mm) used to band-limit the warp noise.
    pub warp_smoothness_mm: f64,
    /// Relative size difference between the sexes.
    pub sex_effect: f64,
    /// SD of the per-subject global scale jitter.
    pub scale_jitter: f64,
}

impl Default for CohortVariation {
    fn default() -> Self {
        CohortVariation {
            rotation_deg: 4.0,
            translation_mm: 4.0,
            warp_amplitude_mm: 3.0,
            warp_smoothness_mm: 12.0,
            sex_effect: 0.06,
            scale_jitter: 0.02,
        }
    }
}

impl CohortVariation {
    /// No pose, warp, sex or scale variation.
    pub fn none() -> Self {
        CohortVariation {
            rotation_deg: 0.0,
            translation_mm: 0.0,
            warp_amplitude_mm: 0.0,
            warp_smoothness_mm: 12.0,
            sex_effect: 0.0,
            scale_jitter: 0.0,
        }
    }
}

/// `n` subjects `sub-001`, `sub-002`, ...; subject `i` draws from its own
/// ChaCha stream `(seed, i)`.
pub fn make_cohort(n: usize, base: &PhantomSpec, variation: &CohortVariation, seed: u64) -> Result<Vec<PhantomSubject>> {
    if n < 2 {
        return Err(Error::Spec("a cohort needs at least two subjects".into()));
    }
    (0..n).map(|i| make_subject(i, base, variation, seed)).collect()
}

/// Subject `index` of the cohort defined by `(base, variation, seed)`.
pub fn make_subject(index: usize, base: &PhantomSpec, variation: &CohortVariation, seed: u64) -> Result<PhantomSubject> {
    base.validate()?;
    if variation.scale_jitter < 0.0 || variation.warp_amplitude_mm < 0.0 || !(variation.warp_smoothness_mm > 0.0) {
        return Err(Error::Spec("variation ranges must be non-negative".into()));
    }
    let grid = base.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    let sign = if sex == Sex::Male { 1.0 } else { -1.0 };
    let jitter = if variation.scale_jitter > 0.0 {
        Normal::new(0.0, variation.scale_jitter).expect("positive sd").sample(&mut rng)
    } else {
        0.0
    };
    let scale = 1.0 + variation.sex_effect * sign / 2.0 + jitter;
    if !(scale > 0.2) {
        return Err(Error::Spec(format!("subject scale {scale} is not positive")));
    }
    let mut uni = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let rotation = [0; 3].map(|_| uni(variation.rotation_deg).to_radians());
    let translation = [0; 3].map(|_| uni(variation.translation_mm));
    let affine = AffineParams {
        translation,
        rotation,
        scale: [scale; 3],
        shear: [0.0; 3],
    }
    .to_matrix();

    let disp = smooth_displacement(&grid, variation, &mut rng);
    let n = grid.len();
    let mut map: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let c = grid.coords(i);
        let w = grid.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
        let p = apply_affine(&affine, [w[0] + disp[0][i], w[1] + disp[1][i], w[2] + disp[2][i]]);
        for a in 0..3 {
            map[a][i] = p[a];
        }
    }
    let truth_field = DeformationField::new(grid.clone(), map)?;
    let inverse = truth_field.invert_onto(&grid)?;
    let labels: Vec<Tissue> = (0..n).map(|i| base.label_at(inverse.at(i))).collect();
    render(
        format!("sub-{:03}", index + 1),
        base,
        grid,
        labels,
        truth_field,
        sex,
        scale,
        seed,
        &mut rng,
    )
}

/// Band-limited random displacement (mm) whose largest magnitude equals the
/// configured amplitude.
fn smooth_displacement(grid: &VoxelGrid, v: &CohortVariation, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let n = grid.len();
    if v.warp_amplitude_mm == 0.0 {
        return std::array::from_fn(|_| vec![0.0; n]);
    }
    let sp = grid.spacing();
    let sigmas = [0, 1, 2].map(|a| v.warp_smoothness_mm / sp[a]);
    let mut d: [Vec<f64>; 3] = std::array::from_fn(|_| {
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        smooth_data(&noise, grid.dims(), sigmas)
    });
    let max = (0..n)
        .map(|i| (d[0][i].powi(2) + d[1][i].powi(2) + d[2][i].powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    if max > 0.0 {
        let k = v.warp_amplitude_mm / max;
        for c in d.iter_mut() {
            c.iter_mut().for_each(|x| *x *= k);
        }
    }
    d
}

/// Log-odds atlas from the soft class frequencies of a training cohort's
/// native truth maps, floored at `eps` before the log.
pub fn build_atlas(subjects: &[PhantomSubject], eps: f64) -> Result<Atlas> {
    let first = subjects
        .first()
        .ok_or_else(|| Error::Spec("atlas needs at least one subject".into()))?;
    let grid = first.truth.grid().clone();
    let n = grid.len();
    let mut freq: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for s in subjects {
        grid.ensure_same(s.truth.grid(), "atlas training cohort")?;
        for (f, c) in freq.iter_mut().zip(s.truth.channels()) {
            for (a, b) in f.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    let k = subjects.len() as f64;
    for f in freq.iter_mut() {
        f.iter_mut().for_each(|x| *x /= k);
    }
    Atlas::from_probabilities(&TissueMaps::normalized(grid, freq)?, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::register::jacobian_determinant;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [40, 40, 40],
            spacing: [5.5; 3],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noiseless_voxels_sit_on_class_means() {
        let mut spec = small();
        spec.ct = spec.ct.noiseless();
        spec.mr = spec.mr.noiseless();
        let p = make_phantom(&spec).unwrap();
        for (i, t) in p.labels().iter().enumerate() {
            assert_eq!(p.ct.data()[i], spec.ct.means[t.index()]);
            assert_eq!(p.mr.data()[i], spec.mr.means[t.index()]);
        }
    }

    #[test]
    fn spherical_ventricle_volume_matches_analytic() {
        let spec = PhantomSpec {
            dims: [48, 48, 48],
            spacing: [0.5; 3],
            head: [40.0; 3],
            skull_outer: [35.0; 3],
            skull_inner: [30.0; 3],
            brain: [25.0; 3],
            wm: [15.0; 3],
            ventricles: [10.0; 3],
            ..PhantomSpec::default()
        };
        let g = spec.grid().unwrap();
        // Only the central block is voxelised; it contains the ventricles.
        let count = (0..g.len())
            .filter(|&i| {
                let c = g.coords(i);
                let w = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
                let r2: f64 = w.iter().map(|x| x * x).sum();
                r2 <= 100.0 && spec.label_at(w) == Tissue::Csf
            })
            .count();
        let vol = count as f64 * g.voxel_volume();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        assert!((vol / analytic - 1.0).abs() < 0.02, "{vol} vs {analytic}");
    }

    #[test]
    fn nesting_is_validated() {
        let mut spec = small();
        spec.wm = [70.0, 67.0, 57.0];
        assert!(matches!(make_phantom(&spec), Err(Error::Spec(_))));
        let mut spec = small();
        spec.ct.sds[0] = -1.0;
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_phantom(&small()).unwrap();
        let b = make_phantom(&small()).unwrap();
        assert_eq!(a.ct.data(), b.ct.data());
        assert_eq!(a.mr.data(), b.mr.data());
    }

    fn cohort_hash(c: &[PhantomSubject]) -> u64 {
        let mut h = DefaultHasher::new();
        for s in c {
            for v in s.ct.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    #[test]
    fn cohorts_are_determined_by_seed() {
        let v = CohortVariation::default();
        let a = make_cohort(2, &small(), &v, 5).unwrap();
        let b = make_cohort(2, &small(), &v, 5).unwrap();
        let c = make_cohort(2, &small(), &v, 6).unwrap();
        assert_eq!(cohort_hash(&a), cohort_hash(&b));
        assert_ne!(cohort_hash(&a), cohort_hash(&c));
        assert!(make_cohort(1, &small(), &v, 5).is_err());
    }

    #[test]
    fn zero_warp_gives_affine_field() {
        let v = CohortVariation {
            warp_amplitude_mm: 0.0,
            ..CohortVariation::default()
        };
        let s = make_subject(0, &small(), &v, 9).unwrap();
        let m = s.truth_field.fit_affine();
        let exact = DeformationField::from_affine(s.truth_field.grid(), &m);
        for a in 0..3 {
            for (x, y) in s.truth_field.components()[a].iter().zip(&exact.components()[a]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truth_volumes_follow_the_jacobian() {
        let spec = small();
        let s = make_subject(1, &spec, &CohortVariation::default(), 21).unwrap();
        let g = spec.grid().unwrap();
        let jac = jacobian_determinant(&s.truth_field);
        let canonical = make_phantom(&spec).unwrap().labels();
        for t in [Tissue::Gm, Tissue::Wm, Tissue::Bone] {
            let expected: f64 = canonical
                .iter()
                .zip(jac.volume().data())
                .filter(|(l, _)| **l == t)
                .map(|(_, j)| j * g.voxel_volume())
                .sum();
            let counted = s.truth.channel(t).iter().sum::<f64>() * g.voxel_volume();
            assert!((counted / expected - 1.0).abs() < 0.02, "{t}: {counted} vs {expected}");
        }
    }

    #[test]
    fn atlas_priors_are_soft_frequencies() {
        let c = make_cohort(3, &small(), &CohortVariation::default(), 2).unwrap();
        let atlas = build_atlas(&c, 1e-3).unwrap();
        let p = atlas.priors();
        let centre = small().grid().unwrap().index(20, 20, 20);
        assert!(p.channel(Tissue::Csf)[centre] > 0.9);
        let corner = 0;
        assert!(p.channel(Tissue::Background)[corner] > 0.99);
    }
}
