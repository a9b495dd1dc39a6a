use crate::error::{Error, Result};
use crate::volgrid::{Tissue, TissueMaps, Volume};

use super::{Component, GmmModel, Modality, ModalityProfile};

/// Components whose within-class weight falls below this are pruned.
const PRUNE_WEIGHT: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

/// Result of one EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub posteriors: TissueMaps,
    pub model: GmmModel,
    /// Log-likelihood at every E-step, under the parameters in force then.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

/// Prior-weighted moments per class; classes with several components are
/// split at weighted quantiles of their intensity distribution.
pub fn init_gmm(v: &Volume, priors: &TissueMaps, gaussians_per_class: [usize; 6], modality: Modality) -> Result<GmmModel> {
    v.grid().ensure_same(priors.grid(), "gmm initialisation")?;
    if gaussians_per_class.iter().any(|&k| k == 0) {
        return Err(Error::Domain("every class needs at least one component".into()));
    }
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let floor = if range > 0.0 {
        (ModalityProfile::for_modality(modality).floor_fraction * range).powi(2)
    } else {
        1e-12
    };
    let x = v.data();
    let mut classes: [Vec<Component>; 6] = Default::default();
    for t in Tissue::ALL {
        let c = t.index();
        let p = priors.channel(t);
        let mut pairs: Vec<(f64, f64)> = x.iter().zip(p).filter(|(_, &w)| w > 0.0).map(|(&a, &w)| (a, w)).collect();
        let total: f64 = pairs.iter().map(|q| q.1).sum();
        if !(total > 0.0) {
            return Err(Error::DegeneratePrior(t.name()));
        }
        let (m, var) = moments(&pairs);
        let k = gaussians_per_class[c];
        if k == 1 {
            classes[c].push(Component {
                weight: 1.0,
                mean: m,
                variance: var.max(floor),
            });
            continue;
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut bins: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
        let mut cum = 0.0;
        for &(xi, w) in &pairs {
            let mid = (cum + 0.5 * w) / total;
            cum += w;
            bins[((mid * k as f64) as usize).min(k - 1)].push((xi, w));
        }
        for b in &bins {
            let (bm, bv) = if b.is_empty() { (m, var) } else { moments(b) };
            classes[c].push(Component {
                weight: 1.0 / k as f64,
                mean: bm,
                variance: bv.max(floor),
            });
        }
    }
    Ok(GmmModel {
        classes,
        modality,
        variance_floor: floor,
    })
}

fn moments(pairs: &[(f64, f64)]) -> (f64, f64) {
    let w: f64 = pairs.iter().map(|q| q.1).sum();
    let m = pairs.iter().map(|&(x, p)| p * x).sum::<f64>() / w;
    let v = pairs.iter().map(|&(x, p)| p * (x - m) * (x - m)).sum::<f64>() / w;
    (m, v)
}

/// Expectation-maximisation with fixed spatial priors.
///
/// Responsibilities are proportional to `prior(class, voxel) * weight *
/// N(x | mean, variance)`. Iteration stops when the relative log-likelihood
/// gain drops below `tol` or after `max_iter` E-steps; the returned
/// posteriors and model belong to the last E-step.
pub fn em_fit(v: &Volume, priors: &TissueMaps, init: &GmmModel, tol: f64, max_iter: usize) -> Result<EmFit> {
    v.grid().ensure_same(priors.grid(), "em fit")?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Domain("tol must be positive and max_iter at least 1".into()));
    }
    init.validate()?;
    let x = v.data();
    let n = x.len();
    let log_priors: [Vec<f64>; 6] =
        priors.channels().clone().map(|c| c.into_iter().map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect());

    let mut model = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut post: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for iter in 0..max_iter {
        let flat: Vec<(usize, Component)> = model
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, ks)| ks.iter().map(move |k| (c, *k)))
            .collect();
        let consts: Vec<f64> = flat
            .iter()
            .map(|(_, k)| k.weight.ln() - 0.5 * (LN_2PI + k.variance.ln()))
            .collect();
        // Shifted sums about the current means: count, first and second moment.
        let mut acc = vec![[0.0f64; 3]; flat.len()];
        let mut logr = vec![0.0f64; flat.len()];
        let mut ll = 0.0;
        for i in 0..n {
            let xi = x[i];
            let mut m = f64::NEG_INFINITY;
            for (j, (c, k)) in flat.iter().enumerate() {
                let lp = log_priors[*c][i];
                let d = xi - k.mean;
                logr[j] = if lp.is_finite() && k.weight > 0.0 {
                    lp + consts[j] - 0.5 * d * d / k.variance
                } else {
                    f64::NEG_INFINITY
                };
                m = m.max(logr[j]);
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("zero likelihood at voxel {i}")));
            }
            // Class sums first, so a single supported class gets exactly 1.
            let mut class_sum = [0.0f64; 6];
            for (l, (c, _)) in logr.iter_mut().zip(&flat) {
                *l = (*l - m).exp();
                class_sum[*c] += *l;
            }
            let s: f64 = class_sum.iter().sum();
            ll += m + s.ln();
            for c in 0..6 {
                post[c][i] = class_sum[c] / s;
            }
            for (j, (_, k)) in flat.iter().enumerate() {
                let r = logr[j] / s;
                if r > 0.0 {
                    let d = xi - k.mean;
                    acc[j][0] += r;
                    acc[j][1] += r * d;
                    acc[j][2] += r * d * d;
                }
            }
        }
        if !ll.is_finite() {
            return Err(Error::Numeric("log-likelihood is not finite".into()));
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(p) = prev {
            if (ll - p) / p.abs().max(f64::MIN_POSITIVE) < tol {
                converged = true;
                break;
            }
        }
        if iter + 1 == max_iter {
            break;
        }
        model = m_step(&model, &flat, &acc)?;
    }
    Ok(EmFit {
        posteriors: TissueMaps::new(v.grid().clone(), post)?,
        model,
        loglik_trace: trace,
        converged,
    })
}

fn m_step(model: &GmmModel, flat: &[(usize, Component)], acc: &[[f64; 3]]) -> Result<GmmModel> {
    let floor = model.variance_floor;
    let total: f64 = acc.iter().map(|a| a[0]).sum();
    if !(total > 0.0) {
        return Err(Error::Fit("all components collapsed".into()));
    }
    let mut classes: [Vec<Component>; 6] = Default::default();
    let mut class_mass = [0.0f64; 6];
    for ((c, _), a) in flat.iter().zip(acc) {
        class_mass[*c] += a[0];
    }
    for ((c, k), a) in flat.iter().zip(acc) {
        if class_mass[*c] <= 0.0 {
            // No voxel supports this class: keep it as it was.
            classes[*c].push(*k);
            continue;
        }
        let (mean, var) = if a[0] > 0.0 {
            let d = a[1] / a[0];
            (k.mean + d, (a[2] / a[0] - d * d).max(0.0))
        } else {
            (k.mean, k.variance)
        };
        classes[*c].push(Component {
            weight: a[0] / class_mass[*c],
            mean,
            variance: var.max(floor),
        });
    }
    for (c, ks) in classes.iter_mut().enumerate() {
        if ks.len() > 1 && ks.iter().any(|k| k.weight < PRUNE_WEIGHT) {
            let before = ks.len();
            ks.retain(|k| k.weight >= PRUNE_WEIGHT);
            if ks.is_empty() {
                return Err(Error::Fit(format!("class {} lost every component", Tissue::ALL[c])));
            }
            log::warn!("pruned {} collapsed component(s) of class {}", before - ks.len(), Tissue::ALL[c]);
            let w: f64 = ks.iter().map(|k| k.weight).sum();
            for k in ks.iter_mut() {
                k.weight /= w;
            }
        }
    }
    Ok(GmmModel {
        classes,
        modality: model.modality,
        variance_floor: floor,
    })
}
