//! Agreement statistics and paired hypothesis tests, with the special
//! functions they need.

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact Wilcoxon
/// distribution.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementStats {
    pub icc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Correlation between the two raters when there are exactly two.
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

impl TestMethod {
    pub fn name(self) -> &'static str {
        match self {
            TestMethod::Exact => "exact",
            TestMethod::NormalApprox => "normal-approx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_effective: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Domain("pearson needs two equal-length samples of at least 3".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("pearson of a constant sample".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// ICC(3,1), consistency form, with the Shrout-Fleiss 95% interval.
/// `data[i][j]` is subject `i` measured by rater `j`.
pub fn icc31(data: &[Vec<f64>]) -> Result<AgreementStats> {
    let n = data.len();
    let k = data.first().map_or(0, Vec::len);
    if n < 5 || k < 2 {
        return Err(Error::Domain(format!("icc needs n >= 5 subjects and k >= 2 raters, got {n}x{k}")));
    }
    if data.iter().any(|r| r.len() != k) || data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("icc table must be complete and finite".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = data.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = data.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ssr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut sse = 0.0;
    for (i, r) in data.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            sse += (v - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let df_r = nf - 1.0;
    let df_e = (nf - 1.0) * (kf - 1.0);
    let bms = ssr / df_r;
    let ems = sse / df_e;
    let pearson_r = if k == 2 {
        let a: Vec<f64> = data.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = data.iter().map(|r| r[1]).collect();
        pearson(&a, &b).ok()
    } else {
        None
    };
    if ems <= 1e-14 * bms.abs().max(f64::MIN_POSITIVE) {
        return Ok(AgreementStats {
            icc: 1.0,
            ci_low: 1.0,
            ci_high: 1.0,
            pearson_r,
        });
    }
    let icc = (bms - ems) / (bms + (kf - 1.0) * ems);
    let f0 = bms / ems;
    let fl = f0 / f_quantile(0.975, df_r, df_e)?;
    let fu = f0 * f_quantile(0.975, df_e, df_r)?;
    Ok(AgreementStats {
        icc,
        ci_low: (fl - 1.0) / (fl + kf - 1.0),
        ci_high: (fu - 1.0) / (fu + kf - 1.0),
        pearson_r,
    })
}

/// Bias and 95% limits of agreement of `test - reference`.
pub fn bland_altman(reference: &[f64], test: &[f64]) -> Result<BlandAltman> {
    if reference.len() != test.len() || reference.len() < 2 {
        return Err(Error::Domain("bland-altman needs two equal-length samples of at least 2".into()));
    }
    let d: Vec<f64> = test.iter().zip(reference).map(|(t, r)| t - r).collect();
    let bias = mean(&d);
    let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    Ok(BlandAltman {
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

/// Mid-ranks (1-based) of `v`.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test on `x - y`.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX`] remaining
/// pairs the null distribution of W+ is counted exactly over all sign
/// patterns; above that a tie-corrected normal approximation with continuity
/// correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Domain("wilcoxon needs two equal-length samples of at least 3".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("wilcoxon differences must be finite".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: TestMethod::Exact,
            n_effective: 0,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        let p = exact_signed_rank_p(&ranks, w_plus);
        return Ok(TestResult {
            statistic: w_plus,
            p_value: p,
            method: TestMethod::Exact,
            n_effective: n,
        });
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: p,
        method: TestMethod::NormalApprox,
        n_effective: n,
    })
}

/// Exact two-sided p for W+ under random signs, by counting sign patterns
/// per attainable sum of doubled (integer) ranks.
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &r2 {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = (1u64 << ranks.len()) as f64;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// Multiplies each p-value by `m`, capped at 1.
pub fn bonferroni(p: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < p.len() || m == 0 {
        return Err(Error::Domain(format!("bonferroni factor {m} is smaller than {} tests", p.len())));
    }
    Ok(p.iter().map(|&v| (v * m as f64).min(1.0)).collect())
}

// ---------------------------------------------------------------------------
// Special functions

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularised incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularised upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_front = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P.
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * ln_front.exp()
    } else {
        // Continued fraction for Q.
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        ln_front.exp() * h
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else {
        gamma_q(0.5, x * x)
    }
}

/// CDF of the F(d1, d2) distribution.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    beta_inc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

/// Quantile of F(d1, d2) by bisection to an absolute tolerance of 1e-10.
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(d1 > 0.0) || !(d2 > 0.0) {
        return Err(Error::Domain(format!("F quantile undefined for p={p}, d1={d1}, d2={d2}")));
    }
    let mut hi = 1.0;
    while f_cdf(hi, d1, d2) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Convergence("F quantile bracket".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if f_cdf(mid, d1, d2) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
