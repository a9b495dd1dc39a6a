//! In-memory computations behind the validation stages.

use crate::error::{Error, Result};
use crate::metrics::{assd, dice, hd95, percentile};
use crate::stats::{bland_altman, bonferroni, icc31, pearson, wilcoxon_signed_rank, TestResult};
use crate::volgrid::{binarise, Tissue, TissueMaps};

use super::Method;

/// Overlap and surface distances of one class for one subject and method.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub subject: String,
    pub method: Method,
    pub class: Tissue,
    pub dice: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    /// `ok` or a reason code for missing values.
    pub status: String,
}

/// Dice, HD95 and ASSD of `class` after binarising both maps at `threshold`.
/// Surface distances are null (status `empty-mask`) when either mask is
/// empty.
pub fn class_overlap(
    reference: &TissueMaps,
    test: &TissueMaps,
    class: Tissue,
    threshold: f64,
) -> Result<(f64, Option<f64>, Option<f64>, &'static str)> {
    let a = binarise(&reference.volume(class), threshold);
    let b = binarise(&test.volume(class), threshold);
    let d = dice(&a, &b)?;
    let spacing = a.grid().spacing();
    match (hd95(&a, &b, spacing), assd(&a, &b, spacing)) {
        (Ok(h), Ok(s)) => Ok((d, Some(h), Some(s), "ok")),
        (Err(Error::EmptyMask), _) | (_, Err(Error::EmptyMask)) => Ok((d, None, None, "empty-mask")),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Median and interquartile range; `None` for no data.
pub fn summarise(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    Some(Summary {
        n: values.len(),
        median: percentile(values, 50.0),
        q1: percentile(values, 25.0),
        q3: percentile(values, 75.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedTest {
    pub metric: &'static str,
    pub class: Tissue,
    pub n_pairs: usize,
    pub result: Option<TestResult>,
    pub p_bonferroni: Option<f64>,
}

/// Paired Wilcoxon tests of `a` against `b` per brain class, with a
/// Bonferroni factor of 3. Subjects lacking either value are skipped; fewer
/// than three pairs leave the test null.
pub fn paired_class_tests(
    rows: &[ClassMetrics],
    metric: &'static str,
    value: impl Fn(&ClassMetrics) -> Option<f64>,
    a: Method,
    b: Method,
) -> Result<Vec<PairedTest>> {
    let mut out = Vec::new();
    for class in Tissue::BRAIN {
        let pick = |m: Method| -> Vec<(&str, f64)> {
            rows.iter()
                .filter(|r| r.method == m && r.class == class)
                .filter_map(|r| value(r).map(|v| (r.subject.as_str(), v)))
                .collect()
        };
        let va = pick(a);
        let vb = pick(b);
        let pairs: Vec<(f64, f64)> = va
            .iter()
            .filter_map(|(s, x)| vb.iter().find(|(t, _)| t == s).map(|(_, y)| (*x, *y)))
            .collect();
        let result = if pairs.len() >= 3 {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            Some(wilcoxon_signed_rank(&x, &y)?)
        } else {
            None
        };
        out.push(PairedTest {
            metric,
            class,
            n_pairs: pairs.len(),
            result,
            p_bonferroni: None,
        });
    }
    for t in out.iter_mut() {
        if let Some(r) = t.result {
            t.p_bonferroni = Some(bonferroni(&[r.p_value], 3)?[0]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub n: usize,
    pub icc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub pearson_r: Option<f64>,
    pub bias: Option<f64>,
    pub loa_low: Option<f64>,
    pub loa_high: Option<f64>,
}

/// ICC(3,1) with CI, Pearson and Bland-Altman of `test` against
/// `reference`; statistics whose preconditions fail are null.
pub fn agreement(reference: &[f64], test: &[f64]) -> Result<Agreement> {
    if reference.len() != test.len() {
        return Err(Error::Domain("agreement needs paired samples".into()));
    }
    let n = reference.len();
    let table: Vec<Vec<f64>> = reference.iter().zip(test).map(|(r, t)| vec![*r, *t]).collect();
    let icc = icc31(&table).ok();
    let ba = bland_altman(reference, test).ok();
    Ok(Agreement {
        n,
        icc: icc.map(|s| s.icc),
        ci_low: icc.map(|s| s.ci_low),
        ci_high: icc.map(|s| s.ci_high),
        pearson_r: pearson(reference, test).ok(),
        bias: ba.map(|b| b.bias),
        loa_low: ba.map(|b| b.loa_low),
        loa_high: ba.map(|b| b.loa_high),
    })
}
