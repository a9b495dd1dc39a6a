//! Kernel classification of normalised tissue maps: feature vectors, a
//! linear kernel, Laplace-approximated GP classification with a logistic
//! likelihood, k-fold cross-validation, ROC AUC and balanced accuracy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phantom::Sex;
use crate::volgrid::smooth::smooth_data;
use crate::volgrid::{fwhm_to_sigma, BinaryMask, Volume};

/// Default smoothing of tissue maps before feature extraction.
pub const FEATURE_FWHM_MM: f64 = 8.0;
const NEWTON_MAX_ITER: usize = 100;

/// Class label used by the classifier: female = +1, male = -1.
pub fn sex_label(s: Sex) -> i8 {
    match s {
        Sex::Female => 1,
        Sex::Male => -1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub subject_id: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Smooths GM, WM and CSF maps, keeps mask voxels in x-fastest index order
/// and concatenates them.
pub fn build_features(
    subject_id: &str,
    gm: &Volume,
    wm: &Volume,
    csf: &Volume,
    mask: &BinaryMask,
    fwhm_mm: f64,
) -> Result<FeatureVector> {
    let grid = mask.grid();
    for v in [gm, wm, csf] {
        v.grid().ensure_same(grid, "tissue map and feature mask")?;
    }
    if !(fwhm_mm > 0.0) {
        return Err(Error::Domain(format!("feature smoothing FWHM must be positive, got {fwhm_mm}")));
    }
    let sigmas = grid.spacing().map(|s| fwhm_to_sigma(fwhm_mm) / s);
    let mut values = Vec::with_capacity(3 * mask.count());
    for v in [gm, wm, csf] {
        let s = smooth_data(v.data(), grid.dims(), sigmas);
        values.extend(s.iter().zip(mask.data()).filter(|(_, m)| **m).map(|(x, _)| *x));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite feature for {subject_id}")));
    }
    Ok(FeatureVector {
        subject_id: subject_id.to_string(),
        values,
    })
}

/// Symmetric matrix of inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(DMatrix<f64>);

impl KernelMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Domain("kernel matrix must be square".into()));
        }
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Domain(format!("kernel matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("kernel matrix".into()));
        }
        Ok(KernelMatrix(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0.clone()).eigenvalues.min()
    }

    /// Smallest eigenvalue at least `-1e-8 * trace`.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-8 * self.0.trace().abs()
    }

    /// Same kernel with rows and columns reordered: entry (i, j) of the
    /// result is entry (order[i], order[j]) of `self`.
    pub fn permuted(&self, order: &[usize]) -> KernelMatrix {
        let n = order.len();
        KernelMatrix(DMatrix::from_fn(n, n, |i, j| self.0[(order[i], order[j])]))
    }
}

/// Gram matrix of the features, divided by the mean of its diagonal.
pub fn linear_kernel(features: &[FeatureVector]) -> Result<KernelMatrix> {
    let n = features.len();
    let Some(first) = features.first() else {
        return Err(Error::Domain("no feature vectors".into()));
    };
    if features.iter().any(|f| f.len() != first.len()) {
        return Err(Error::Domain("feature vectors differ in length".into()));
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = features[i].values.iter().zip(&features[j].values).map(|(a, b)| a * b).sum();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mean_diag = k.trace() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::DegenerateInput("all feature vectors are zero".into()));
    }
    KernelMatrix::new(k / mean_diag)
}

fn check_indices(n: usize, train: &[usize], test: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in train.iter().chain(test) {
        if i >= n {
            return Err(Error::Domain(format!("index {i} out of range for {n} subjects")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Domain(format!("index {i} appears twice across train and test")));
        }
    }
    Ok(())
}

/// Centres the kernel on the feature-space mean of the training rows. The
/// centring is applied to every entry, so train x train, train x test and
/// test x test blocks of the result are all centred consistently.
pub fn center_kernel_fold(k: &KernelMatrix, train: &[usize], test: &[usize]) -> Result<KernelMatrix> {
    let n = k.n();
    check_indices(n, train, test)?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let m = k.matrix();
    let t = train.len() as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| train.iter().map(|&j| m[(i, j)]).sum::<f64>() / t).collect();
    let grand = train.iter().map(|&i| row_mean[i]).sum::<f64>() / t;
    let c = DMatrix::from_fn(n, n, |i, j| m[(i, j)] - row_mean[i] - row_mean[j] + grand);
    // Restore exact symmetry lost to rounding.
    let c = (&c + c.transpose()) * 0.5;
    Ok(KernelMatrix(c))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary GP classification (logistic likelihood, Laplace approximation,
/// unit prior scale). Returns the predictive probability of +1 for each
/// test index.
pub fn gp_classify(k: &KernelMatrix, labels: &[i8], train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
    check_indices(k.n(), train, test)?;
    if labels.len() != train.len() {
        return Err(Error::Domain("one label per training index required".into()));
    }
    if labels.iter().any(|l| *l != 1 && *l != -1) {
        return Err(Error::Domain("labels must be +1 or -1".into()));
    }
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let m = k.matrix();
    let nt = train.len();
    let mut kt = DMatrix::from_fn(nt, nt, |i, j| m[(train[i], train[j])]);
    let jitter = 1e-6 * kt.trace().abs() / nt as f64;
    for i in 0..nt {
        kt[(i, i)] += jitter.max(1e-12);
    }
    let y = DVector::from_iterator(nt, labels.iter().map(|&l| l as f64));

    let mut f = DVector::zeros(nt);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let (grad, w, sw, l) = laplace_terms(&kt, &y, &f)?;
        let b = w.component_mul(&f) + &grad;
        let inner = l.solve(&sw.component_mul(&(&kt * &b)));
        let a = &b - sw.component_mul(&inner);
        let f_new = &kt * &a;
        let step = (&f_new - &f).amax();
        f = f_new;
        if step < 1e-9 * (1.0 + f.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence(format!("GP Newton iterations exceeded {NEWTON_MAX_ITER}")));
    }
    let (grad, _, sw, l) = laplace_terms(&kt, &y, &f)?;

    let probs = test
        .iter()
        .map(|&t| {
            let ks = DVector::from_fn(nt, |i, _| m[(train[i], t)]);
            let mean = ks.dot(&grad);
            let v = l.l().solve_lower_triangular(&sw.component_mul(&ks)).expect("triangular factor");
            let var = (m[(t, t)] - v.dot(&v)).max(0.0);
            let kappa = 1.0 / (1.0 + std::f64::consts::PI * var / 8.0).sqrt();
            sigmoid(kappa * mean).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
        })
        .collect();
    Ok(probs)
}

type Terms = (DVector<f64>, DVector<f64>, DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>);

/// Likelihood gradient, W, sqrt(W) and the Cholesky factor of
/// I + sqrt(W) K sqrt(W) at latent values `f`.
fn laplace_terms(kt: &DMatrix<f64>, y: &DVector<f64>, f: &DVector<f64>) -> Result<Terms> {
    let n = f.len();
    let pi = f.map(sigmoid);
    let grad = DVector::from_fn(n, |i, _| (y[i] + 1.0) / 2.0 - pi[i]);
    let w = pi.map(|p| p * (1.0 - p));
    let sw = w.map(f64::sqrt);
    let b = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |i, j| sw[i] * kt[(i, j)] * sw[j]);
    let l = b
        .cholesky()
        .ok_or_else(|| Error::Numeric("GP Newton system is not positive definite".into()))?;
    Ok((grad, w, sw, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub fold: usize,
    pub true_label: i8,
    /// Probability of +1.
    pub probability: f64,
    pub predicted_label: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// Sorted by subject id.
    pub predictions: Vec<Prediction>,
    pub auc: f64,
    pub balanced_accuracy: f64,
}

/// Fold index per subject. Subjects are sorted by id, the sorted order is
/// shuffled with a generator keyed on `seed` and cut into `k` contiguous
/// near-equal folds.
pub fn assign_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ids.len();
    if k < 2 || n < k {
        return Err(Error::Domain(format!("{k}-fold cross-validation needs k >= 2 and at least k subjects, got {n}")));
    }
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    if sorted.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
        return Err(Error::Domain("subject ids must be unique".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut folds = vec![0; n];
    for (pos, &subject) in sorted.iter().enumerate() {
        folds[subject] = pos * k / n;
    }
    Ok(folds)
}

/// k-fold cross-validated GP classification with per-fold kernel centring.
pub fn kfold_cv(k: &KernelMatrix, labels: &[i8], ids: &[String], folds_k: usize, seed: u64) -> Result<CvResult> {
    let n = k.n();
    if labels.len() != n || ids.len() != n {
        return Err(Error::Domain("labels and ids must match the kernel size".into()));
    }
    let folds = assign_folds(ids, folds_k, seed)?;
    let per_fold: Vec<Vec<(usize, f64)>> = (0..folds_k)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let kc = center_kernel_fold(k, &train, &test)?;
            let y: Vec<i8> = train.iter().map(|&i| labels[i]).collect();
            let p = gp_classify(&kc, &y, &train, &test)?;
            Ok(test.into_iter().zip(p).collect())
        })
        .collect::<Result<_>>()?;
    let mut predictions: Vec<Prediction> = per_fold
        .into_iter()
        .flatten()
        .map(|(i, p)| Prediction {
            subject_id: ids[i].clone(),
            fold: folds[i],
            true_label: labels[i],
            probability: p,
            predicted_label: if p >= 0.5 { 1 } else { -1 },
        })
        .collect();
    predictions.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let probs: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    let truth: Vec<i8> = predictions.iter().map(|p| p.true_label).collect();
    Ok(CvResult {
        auc: roc_auc(&probs, &truth)?,
        balanced_accuracy: balanced_accuracy(&probs, &truth, 0.5)?,
        predictions,
    })
}

fn class_counts(labels: &[i8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.iter().filter(|l| **l == -1).count();
    if pos + neg != labels.len() {
        return Err(Error::Domain("labels must be +1 or -1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney probability that a positive
/// outscores a negative, with ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Domain("scores and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let ranks = crate::stats::midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l == 1).map(|(r, _)| r).sum();
    let (p, q) = (pos as f64, neg as f64);
    Ok(((rank_sum - p * (p + 1.0) / 2.0) / (p * q)).clamp(0.0, 1.0))
}

/// ROC operating points (false positive rate, true positive rate), from the
/// strictest threshold to the most lenient.
pub fn roc_points(scores: &[f64], labels: &[i8]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Domain("scores and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Mean of per-class recalls; probabilities at or above the threshold count
/// as +1.
pub fn balanced_accuracy(probabilities: &[f64], labels: &[i8], threshold: f64) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Domain("probabilities and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut tp = 0;
    let mut tn = 0;
    for (p, l) in probabilities.iter().zip(labels) {
        let pred = if *p >= threshold { 1 } else { -1 };
        if pred == *l {
            if *l == 1 {
                tp += 1;
            } else {
                tn += 1;
            }
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Units, VoxelGrid};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fv(id: &str, v: Vec<f64>) -> FeatureVector {
        FeatureVector {
            subject_id: id.into(),
            values: v,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn gram(x: &[Vec<f64>]) -> DMatrix<f64> {
        let n = x.len();
        DMatrix::from_fn(n, n, |i, j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum())
    }

    #[test]
    fn feature_length_and_linearity() {
        let g = VoxelGrid::centered([8, 8, 8], [2.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut map = || Volume::new(g.clone(), (0..g.len()).map(|_| rng.random::<f64>()).collect(), Units::Dimensionless).unwrap();
        let (gm, wm, csf) = (map(), map(), map());
        let mut left = 100;
        let mask = BinaryMask::from_fn(g.clone(), |_| {
            left -= 1;
            left >= 0
        });
        let f = build_features("a", &gm, &wm, &csf, &mask, 8.0).unwrap();
        assert_eq!(f.len(), 300);
        assert_eq!(build_features("b", &gm, &wm, &csf, &mask, 8.0).unwrap().values, f.values);
        let dbl = |v: &Volume| v.with_data(v.data().iter().map(|x| 2.0 * x).collect(), Units::Dimensionless).unwrap();
        let f2 = build_features("a", &dbl(&gm), &dbl(&wm), &dbl(&csf), &mask, 8.0).unwrap();
        assert!(f2.values.iter().zip(&f.values).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn feature_mask_mismatch_is_rejected() {
        let g = VoxelGrid::centered([4, 4, 4], [2.0; 3]).unwrap();
        let h = VoxelGrid::centered([4, 4, 5], [2.0; 3]).unwrap();
        let v = Volume::zeros(g, Units::Dimensionless);
        assert!(build_features("a", &v, &v, &v, &BinaryMask::empty(h), 8.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        let k = linear_kernel(&[fv("a", vec![1.0, 0.0]), fv("b", vec![0.0, 1.0])]).unwrap();
        assert_eq!(k.matrix(), &DMatrix::identity(2, 2));
        let k = linear_kernel(&[fv("a", vec![1.0, 2.0]), fv("b", vec![2.0, 4.0])]).unwrap();
        let m = k.matrix();
        assert!((m[(0, 1)] / m[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((m[(1, 1)] / m[(0, 0)] - 4.0).abs() < 1e-12);
        assert!(linear_kernel(&[fv("a", vec![1.0]), fv("b", vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn single_training_point_centres_to_zero() {
        let k = KernelMatrix::new(gram(&random_features(4, 3, 1))).unwrap();
        let c = center_kernel_fold(&k, &[2], &[0, 1, 3]).unwrap();
        assert!(c.matrix()[(2, 2)].abs() < 1e-12);
        assert!(center_kernel_fold(&k, &[], &[0]).is_err());
        assert!(center_kernel_fold(&k, &[0, 1], &[1]).is_err());
    }

    #[test]
    fn precentred_features_are_unchanged() {
        let mut x = random_features(6, 4, 9);
        let train = [0, 2, 3, 5];
        for d in 0..4 {
            let mu = train.iter().map(|&i| x[i][d]).sum::<f64>() / train.len() as f64;
            x.iter_mut().for_each(|r| r[d] -= mu);
        }
        let k = KernelMatrix::new(gram(&x)).unwrap();
        let c = center_kernel_fold(&k, &train, &[1, 4]).unwrap();
        for &i in &train {
            for &j in &train {
                assert!((c.matrix()[(i, j)] - k.matrix()[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equidistant_test_point_is_even() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let k = KernelMatrix::new(gram(&x)).unwrap();
        let p = gp_classify(&k, &[1, -1], &[0, 1], &[2]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn single_class_pulls_towards_it() {
        let x = vec![vec![1.0, 0.2], vec![0.9, -0.1], vec![1.1, 0.0], vec![0.8, 0.3]];
        let k = KernelMatrix::new(gram(&x)).unwrap();
        let p = gp_classify(&k, &[1, 1, 1], &[0, 1, 2], &[3]).unwrap();
        assert!(p[0] > 0.5);
    }

    #[test]
    fn separable_cohort_is_classified() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let feats: Vec<FeatureVector> = (0..n)
            .map(|i| {
                let c = labels[i] as f64 * 6.0;
                let v = vec![c + rng.sample::<f64, _>(StandardNormal) * 0.3, rng.sample(StandardNormal), rng.sample(StandardNormal)];
                fv(&format!("s{i:02}"), v)
            })
            .collect();
        let k = linear_kernel(&feats).unwrap();
        let ids: Vec<String> = feats.iter().map(|f| f.subject_id.clone()).collect();
        let r = kfold_cv(&k, &labels, &ids, 10, 42).unwrap();
        for p in &r.predictions {
            assert_eq!(p.predicted_label, p.true_label, "{}", p.subject_id);
        }
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.balanced_accuracy, 1.0);
    }

    #[test]
    fn folds_partition_and_repeat() {
        let ids = ids(20);
        let f = assign_folds(&ids, 10, 11).unwrap();
        for k in 0..10 {
            assert_eq!(f.iter().filter(|v| **v == k).count(), 2);
        }
        assert_eq!(f, assign_folds(&ids, 10, 11).unwrap());
        assert!(assign_folds(&ids[..5], 10, 0).is_err());
    }

    #[test]
    fn permuted_labels_give_chance_auc() {
        let mut inside = 0;
        for seed in 0..10u64 {
            let x = random_features(40, 50, 100 + seed);
            let k = KernelMatrix::new(gram(&x)).unwrap();
            let mut labels: Vec<i8> = (0..40).map(|i| if i < 20 { 1 } else { -1 }).collect();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let r = kfold_cv(&k, &labels, &ids(40), 10, seed).unwrap();
            if (0.3..=0.7).contains(&r.auc) {
                inside += 1;
            }
        }
        assert!(inside >= 8, "{inside}/10 null AUCs in [0.3, 0.7]");
    }

    #[test]
    fn cv_is_independent_of_input_order() {
        let x = random_features(24, 6, 17);
        let labels: Vec<i8> = (0..24).map(|i| if x[i][0] > 0.0 { 1 } else { -1 }).collect();
        let k = KernelMatrix::new(gram(&x)).unwrap();
        let id = ids(24);
        let a = kfold_cv(&k, &labels, &id, 8, 3).unwrap();
        let mut order: Vec<usize> = (0..24).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let kp = k.permuted(&order);
        let lp: Vec<i8> = order.iter().map(|&i| labels[i]).collect();
        let ip: Vec<String> = order.iter().map(|&i| id[i].clone()).collect();
        let b = kfold_cv(&kp, &lp, &ip, 8, 3).unwrap();
        assert_eq!(a.predictions.len(), b.predictions.len());
        for (p, q) in a.predictions.iter().zip(&b.predictions) {
            assert_eq!((&p.subject_id, p.fold), (&q.subject_id, q.fold));
            assert!((p.probability - q.probability).abs() < 1e-9);
        }
    }

    #[test]
    fn auc_and_accuracy_examples() {
        let l = [1, -1, 1, -1];
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.1], &l).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0.9, 0.4, 0.6, 0.1], &l, 0.5).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.9, 0.2, 0.8], &l).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        let pts = roc_points(&[0.9, 0.4, 0.6, 0.1], &l).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    proptest! {
        #[test]
        fn centring_matches_explicit_features(seed in 0u64..500, n in 3usize..9, d in 1usize..6) {
            let x = random_features(n, d, seed);
            let train: Vec<usize> = (0..n).filter(|i| i % 3 != 1).collect();
            let test: Vec<usize> = (0..n).filter(|i| i % 3 == 1).collect();
            let mu: Vec<f64> = (0..d).map(|j| train.iter().map(|&i| x[i][j]).sum::<f64>() / train.len() as f64).collect();
            let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mu).map(|(a, m)| a - m).collect()).collect();
            let oracle = gram(&xc);
            let c = center_kernel_fold(&KernelMatrix::new(gram(&x)).unwrap(), &train, &test).unwrap();
            prop_assert!((c.matrix() - oracle).amax() < 1e-9);
        }

        #[test]
        fn kernel_is_symmetric_psd(seed in 0u64..500, n in 2usize..10, d in 1usize..8) {
            let f: Vec<FeatureVector> = random_features(n, d, seed).into_iter().enumerate().map(|(i, v)| fv(&i.to_string(), v)).collect();
            let k = linear_kernel(&f).unwrap();
            prop_assert!(k.is_psd());
            prop_assert!((k.matrix().trace() / n as f64 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps(s in prop::collection::vec(-5.0f64..5.0, 4..30), seed in 0u64..100) {
            let n = s.len();
            let mut labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let t: Vec<f64> = s.iter().map(|v| (0.7 * v).exp() + v.powi(3)).collect();
            prop_assert!((roc_auc(&s, &labels).unwrap() - roc_auc(&t, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn majority_predictor_is_half(labels in prop::collection::vec(prop::bool::ANY, 2..40)) {
            let l: Vec<i8> = labels.iter().map(|b| if *b { 1 } else { -1 }).collect();
            prop_assume!(l.contains(&1) && l.contains(&-1));
            let pos = l.iter().filter(|v| **v == 1).count();
            let p = if 2 * pos >= l.len() { 1.0 } else { 0.0 };
            prop_assert_eq!(balanced_accuracy(&vec![p; l.len()], &l, 0.5).unwrap(), 0.5);
        }

        #[test]
        fn gp_probabilities_are_open_unit(seed in 0u64..200) {
            let x = random_features(10, 4, seed);
            let k = KernelMatrix::new(gram(&x)).unwrap();
            let labels: Vec<i8> = (0..7).map(|i| if x[i][1] > 0.0 { 1 } else { -1 }).collect();
            let p = gp_classify(&k, &labels, &[0, 1, 2, 3, 4, 5, 6], &[7, 8, 9]).unwrap();
            prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
