use super::Volume;

/// sqrt(8 ln 2): ratio between a Gaussian's FWHM and its standard deviation.
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / FWHM_TO_SIGMA
}

/// Unit-sum Gaussian kernel truncated at 4 sigma, returned with its radius.
/// A vanishing sigma gives the identity kernel.
pub fn gaussian_kernel_1d(sigma_vox: f64) -> (Vec<f64>, usize) {
    if !(sigma_vox > 1e-6) {
        return (vec![1.0], 0);
    }
    let radius = (4.0 * sigma_vox).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    (k, radius)
}

/// Separable Gaussian smoothing with the given FWHM (mm) along every axis.
///
/// Taps falling outside the volume are dropped and the remaining weights are
/// renormalised, so a constant image stays constant up to the edges.
pub fn gaussian_smooth(v: &Volume, fwhm_mm: f64) -> Volume {
    assert!(fwhm_mm > 0.0, "fwhm must be positive");
    let sigma_mm = fwhm_to_sigma(fwhm_mm);
    let sigmas = v.grid().spacing().map(|s| sigma_mm / s);
    let data = smooth_data(v.data(), v.grid().dims(), sigmas);
    v.with_data(data, v.units())
        .expect("smoothing preserves shape and range")
}

/// Smooths raw data with per-axis sigmas in voxel units.
pub(crate) fn smooth_data(data: &[f64], dims: [usize; 3], sigmas_vox: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut buf = vec![0.0; cur.len()];
    for axis in 0..3 {
        let (kernel, radius) = gaussian_kernel_1d(sigmas_vox[axis]);
        if radius == 0 {
            continue;
        }
        convolve_axis(&cur, &mut buf, dims, axis, &kernel, radius);
        std::mem::swap(&mut cur, &mut buf);
    }
    cur
}

fn convolve_axis(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64], radius: usize) {
    let [nx, ny, nz] = dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let n = dims[axis];
    let mut line = vec![0.0; n];
    let mut visit = |base: usize| {
        for (i, l) in line.iter_mut().enumerate() {
            *l = src[base + i * stride];
        }
        for i in 0..n {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in lo..=hi {
                let w = kernel[j + radius - i];
                acc += w * line[j];
                wsum += w;
            }
            dst[base + i * stride] = acc / wsum;
        }
    };
    match axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    visit(nx * (y + ny * z));
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    visit(x + nx * ny * z);
                }
            }
        }
        _ => {
            for y in 0..ny {
                for x in 0..nx {
                    visit(x + nx * y);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Units, VoxelGrid};

    #[test]
    fn kernel_has_unit_sum() {
        let (k, r) = gaussian_kernel_1d(1.699);
        assert_eq!(r, 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(gaussian_kernel_1d(0.0), (vec![1.0], 0));
    }

    #[test]
    fn constant_unchanged() {
        let g = VoxelGrid::from_spacing([9, 7, 5], [1.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 42.0, Units::Hu).unwrap();
        let s = gaussian_smooth(&v, 6.0);
        assert!(s.data().iter().all(|&x| (x - 42.0).abs() < 1e-6));
    }
}
