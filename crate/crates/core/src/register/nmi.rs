use crate::error::{Error, Result};
use crate::volgrid::Volume;

/// Maps intensities in `[lo, hi]` to `bins` equal-width bins.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Binner {
    lo: f64,
    scale: f64,
    last: usize,
}

impl Binner {
    pub(crate) fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateInput("image intensity range is empty".into()));
        }
        Ok(Binner {
            lo,
            scale: bins as f64 / (hi - lo),
            last: bins - 1,
        })
    }

    pub(crate) fn for_data(data: &[f64], bins: usize) -> Result<Self> {
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::new(lo, hi, bins)
    }

    #[inline]
    pub(crate) fn bin(&self, v: f64) -> usize {
        let b = (v - self.lo) * self.scale;
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.last)
        }
    }

    /// Lower bin and weight of the upper bin, interpolating between bin
    /// centres.
    #[inline]
    pub(crate) fn split(&self, v: f64) -> (usize, f64) {
        let c = ((v - self.lo) * self.scale - 0.5).clamp(0.0, self.last as f64);
        let b = (c as usize).min(self.last.saturating_sub(1));
        (b, c - b as f64)
    }
}

/// Joint histogram of two intensity streams; the second may be linearly
/// split between neighbouring bins.
#[derive(Debug, Clone)]
pub(crate) struct JointHistogram {
    bins: usize,
    counts: Vec<f64>,
    total: f64,
}

impl JointHistogram {
    pub(crate) fn new(bins: usize) -> Self {
        JointHistogram {
            bins,
            counts: vec![0.0; bins * bins],
            total: 0.0,
        }
    }

    pub(crate) fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0.0);
        self.total = 0.0;
    }

    #[inline]
    pub(crate) fn add(&mut self, a_bin: usize, b_bin: usize) {
        self.counts[a_bin * self.bins + b_bin] += 1.0;
        self.total += 1.0;
    }

    /// One sample whose second coordinate is shared between `b_bin` and
    /// `b_bin + 1`.
    #[inline]
    pub(crate) fn add_split(&mut self, a_bin: usize, b_bin: usize, upper: f64) {
        let row = a_bin * self.bins + b_bin;
        self.counts[row] += 1.0 - upper;
        if upper > 0.0 {
            self.counts[row + 1] += upper;
        }
        self.total += 1.0;
    }

    /// (H(A) + H(B)) / H(A,B); `None` when either marginal is degenerate.
    pub(crate) fn nmi(&self) -> Option<f64> {
        if self.total <= 0.0 {
            return None;
        }
        let n = self.bins;
        let mut pa = vec![0.0; n];
        let mut pb = vec![0.0; n];
        let mut hab = 0.0;
        for i in 0..n {
            for j in 0..n {
                let c = self.counts[i * n + j];
                if c > 0.0 {
                    pa[i] += c;
                    pb[j] += c;
                    let p = c / self.total;
                    hab -= p * p.ln();
                }
            }
        }
        let h = |m: &[f64]| -> f64 {
            m.iter()
                .filter(|&&c| c > 0.0)
                .map(|&c| {
                    let p = c / self.total;
                    -p * p.ln()
                })
                .sum()
        };
        let (ha, hb) = (h(&pa), h(&pb));
        if ha <= 0.0 || hb <= 0.0 {
            return None;
        }
        Some((ha + hb) / hab)
    }
}

/// Normalised mutual information `(H(A) + H(B)) / H(A,B)` of two images on the
/// same grid, from a `bins` x `bins` joint histogram spanning each image's
/// intensity range.
pub fn nmi(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Domain("bins must be positive".into()));
    }
    a.grid().ensure_same(b.grid(), "nmi")?;
    let ba = Binner::for_data(a.data(), bins)
        .map_err(|_| Error::DegenerateInput("first image is constant".into()))?;
    let bb = Binner::for_data(b.data(), bins)
        .map_err(|_| Error::DegenerateInput("second image is constant".into()))?;
    let mut hist = JointHistogram::new(bins);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        hist.add(ba.bin(x), bb.bin(y));
    }
    hist.nmi()
        .ok_or_else(|| Error::DegenerateInput("zero marginal entropy".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Units, VoxelGrid};

    #[test]
    fn hand_two_bin_case() {
        // joint counts {(0,0): 2, (1,1): 2}
        let mut h = JointHistogram::new(2);
        h.add(0, 0);
        h.add(0, 0);
        h.add(1, 1);
        h.add(1, 1);
        assert!((h.nmi().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_images_give_two() {
        let g = VoxelGrid::from_spacing([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, Units::Hu, |[x, y, z]| ((x * 31 + y * 17 + z * 7) % 13) as f64).unwrap();
        assert!((nmi(&v, &v, 16).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_is_degenerate() {
        let g = VoxelGrid::from_spacing([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let c = Volume::filled(g.clone(), 1.0, Units::Hu).unwrap();
        let v = Volume::from_fn(g, Units::Hu, |[x, _, _]| x as f64).unwrap();
        assert!(matches!(nmi(&c, &v, 8), Err(Error::DegenerateInput(_))));
        assert!(matches!(nmi(&v, &c, 8), Err(Error::DegenerateInput(_))));
    }
}
