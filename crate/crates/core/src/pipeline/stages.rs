use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::atlasgmm::{intracranial_mask, segment, Atlas, Modality};
use crate::error::{Error, Result};
use crate::metrics::cov_stats;
use crate::phantom::{build_atlas, make_subject, Sex};
use crate::predict::{build_features, kfold_cv, linear_kernel, roc_points, sex_label};
use crate::register::{apply_deformation, jacobian_determinant, modulate, DeformationField};
use crate::volgrid::{
    read_nifti, read_nifti_channels, write_nifti, write_nifti_channels, BinaryMask, Interp, Tissue, TissueMaps, Units,
    Volume,
};
use crate::volumetry::{brain_volumes, VolumeReport};

use super::analysis::{agreement, class_overlap, paired_class_tests, summarise, ClassMetrics, PairedTest};
use super::table::{num, opt, parse_opt, Table};
use super::{create_dir, AtlasSource, CohortSource, Layout, Method, PipelineConfig, StageOutcome};

/// Floor applied to phantom-derived atlas frequencies before the log.
const ATLAS_EPS: f64 = 1e-3;

const MANIFEST: &[&str] = &["subject_id", "sex", "scale_factor", "seed", "ct", "mr", "truth", "truth_field"];
const STATUS: &[&str] = &["subject_id", "method", "status", "coverage", "message"];
const RUNTIME: &[&str] = &["subject_id", "method", "runtime_s"];
const SEGMENTATION: &[&str] = &["subject_id", "method", "class", "dice", "hd95_mm", "assd_mm", "status"];
const SUMMARY: &[&str] = &["method", "class", "metric", "n", "median", "q1", "q3"];
const TESTS: &[&str] = &["metric", "class", "comparison", "n_pairs", "statistic", "p_value", "p_bonferroni", "test"];
const NORMALISATION: &[&str] = &["subject_id", "method", "class", "dice", "assd_mm", "status"];
const COV: &[&str] = &["method", "n_subjects", "mean_cov", "mask_voxels", "excluded_voxels", "status"];
const VOLUMES: &[&str] = &[
    "subject_id", "method", "tbv_ml", "tiv_ml", "gm_ml", "wm_ml", "csf_ml", "bone_ml", "soft_ml", "background_ml", "mask_ml",
    "status",
];
const AGREEMENT: &[&str] = &[
    "method", "reference", "measure", "n", "icc", "ci_low", "ci_high", "pearson_r", "bias_ml", "loa_low_ml", "loa_high_ml",
];
const PREDICTIONS: &[&str] = &["subject_id", "method", "fold", "true_label", "probability", "predicted_label", "status"];
const ROC: &[&str] = &["method", "fpr", "tpr"];
const PREDICTION_SUMMARY: &[&str] = &["method", "n", "folds", "auc", "balanced_accuracy", "status"];
const COHORT: &[&str] = &[
    "subject_id", "method", "class", "dice", "hd95_mm", "assd_mm", "tbv_ml", "tiv_ml", "runtime_s", "status",
];

/// Pseudo-method name for ground-truth rows of phantom cohorts.
const TRUTH: &str = "TRUTH";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub sex: Option<Sex>,
    pub scale_factor: Option<f64>,
    /// Generator seed of phantom subjects.
    pub seed: Option<u64>,
    pub ct: PathBuf,
    pub mr: PathBuf,
    pub truth: Option<PathBuf>,
    pub truth_field: Option<PathBuf>,
}

impl ManifestEntry {
    fn image(&self, m: Modality) -> &Path {
        match m {
            Modality::Ct => &self.ct,
            Modality::Mr => &self.mr,
        }
    }
}

/// Reads `manifest.csv` of a cohort directory, resolving relative paths
/// against it. Rows are returned sorted by subject id.
pub fn read_manifest(cohort_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let t = Table::read(cohort_dir.join("manifest.csv"), "manifest", MANIFEST, "phantom-gen")?;
    let path = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() { p } else { cohort_dir.join(p) }
    };
    let mut out: Vec<ManifestEntry> = t
        .rows
        .iter()
        .map(|r| {
            let sex = match r[1].as_str() {
                "" => None,
                s => Some(Sex::from_name(s).ok_or_else(|| Error::Format(format!("unknown sex `{s}` for {}", r[0])))?),
            };
            Ok(ManifestEntry {
                id: r[0].clone(),
                sex,
                scale_factor: parse_opt(&r[2])?,
                seed: match r[3].as_str() {
                    "" => None,
                    s => Some(s.parse().map_err(|_| Error::Format(format!("bad seed `{s}` for {}", r[0])))?),
                },
                ct: path(&r[4]),
                mr: path(&r[5]),
                truth: (!r[6].is_empty()).then(|| path(&r[6])),
                truth_field: (!r[7].is_empty()).then(|| path(&r[7])),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if out.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Format("manifest lists a subject twice".into()));
    }
    if out.len() < 2 {
        return Err(Error::Config("cohort statistics need at least 2 subjects".into()));
    }
    Ok(out)
}

fn read_maps(path: &Path) -> Result<TissueMaps> {
    let img = read_nifti_channels(path)?;
    let n = img.channels.len();
    let ch: [Vec<f64>; 6] = img
        .channels
        .try_into()
        .map_err(|_| Error::Format(format!("{}: expected 6 tissue channels, found {n}", path.display())))?;
    // Stored as float32; renormalise away the rounding.
    TissueMaps::normalized(img.grid, ch)
}

fn write_maps(t: &TissueMaps, path: &Path) -> Result<()> {
    let ch: Vec<&[f64]> = t.channels().iter().map(Vec::as_slice).collect();
    write_nifti_channels(t.grid(), &ch, Units::Probability, path)
}

fn warp_maps(t: &TissueMaps, field: &DeformationField) -> Result<TissueMaps> {
    let mut ch: [Vec<f64>; 6] = Default::default();
    for (o, c) in ch.iter_mut().zip(Tissue::ALL) {
        *o = apply_deformation(&t.volume(c), field, Interp::Trilinear)?.into_data();
    }
    TissueMaps::normalized(field.grid().clone(), ch)
}

/// Atlas voxels whose GM+WM+CSF prior is at least one half.
fn atlas_brain_mask(atlas: &Atlas) -> BinaryMask {
    let p = atlas.priors();
    let data = (0..atlas.grid().len())
        .map(|i| Tissue::BRAIN.iter().map(|t| p.channel(*t)[i]).sum::<f64>() >= 0.5)
        .collect();
    BinaryMask::new(atlas.grid().clone(), data).expect("length matches grid")
}

/// True when the mask reaches a face of the volume.
fn touches_boundary(m: &BinaryMask) -> bool {
    let [nx, ny, nz] = m.grid().dims();
    m.data().iter().enumerate().any(|(i, &v)| {
        let [x, y, z] = m.grid().coords(i);
        v && (x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz)
    })
}

fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

// ---------------------------------------------------------------------------
// phantom-gen

pub fn cmd_phantom_gen(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let CohortSource::Phantom { subjects, spec, variation } = &cfg.cohort else {
        return Err(Error::Config("phantom-gen needs [cohort] source = phantom".into()));
    };
    let layout = Layout::new(cfg);
    create_dir(&layout.cohort)?;
    let rows: Vec<Vec<String>> = (0..*subjects)
        .into_par_iter()
        .map(|i| {
            let s = make_subject(i, spec, variation, cfg.seed)?;
            let dir = layout.cohort.join(&s.id);
            create_dir(&dir)?;
            let files = ["ct.nii", "mr.nii", "truth.nii", "truth_field.nii"].map(|f| dir.join(f));
            write_nifti(&s.ct, &files[0])?;
            write_nifti(&s.mr, &files[1])?;
            write_maps(&s.truth, &files[2])?;
            s.truth_field.write(&files[3])?;
            let mut row = vec![s.id.clone(), s.sex.name().to_string(), num(s.scale_factor), s.seed.to_string()];
            row.extend(files.iter().map(|f| relative(f, &layout.cohort)));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut manifest = Table::new("manifest", MANIFEST);
    rows.into_iter().for_each(|r| manifest.push(r));
    manifest.write(layout.manifest())?;

    if let AtlasSource::Phantom { subjects: n, seed } = &cfg.atlas {
        let training = (0..*n)
            .into_par_iter()
            .map(|i| make_subject(i, spec, variation, *seed))
            .collect::<Result<Vec<_>>>()?;
        create_dir(&layout.root)?;
        build_atlas(&training, ATLAS_EPS)?.write(layout.atlas(cfg))?;
    }
    log::info!("phantom-gen: {subjects} subjects in {}", layout.cohort.display());
    Ok(StageOutcome {
        tasks: *subjects,
        failures: 0,
    })
}

// ---------------------------------------------------------------------------
// segment

type Status = BTreeMap<(String, Method), bool>;

fn read_status(layout: &Layout) -> Result<Status> {
    let t = Table::read(layout.root.join("segment").join("status.csv"), "segment_status", STATUS, "segment")?;
    t.rows
        .iter()
        .map(|r| {
            let m = Method::from_name(&r[1]).ok_or_else(|| Error::Format(format!("unknown method {}", r[1])))?;
            Ok(((r[0].clone(), m), r[2] == "ok"))
        })
        .collect()
}

fn succeeded(status: &Status, subject: &str, m: Method) -> bool {
    status.get(&(subject.to_string(), m)).copied().unwrap_or(false)
}

pub fn cmd_segment(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let atlas = Atlas::read(layout.atlas(cfg))?;
    let tasks: Vec<(&ManifestEntry, Method)> =
        entries.iter().flat_map(|e| cfg.methods.iter().map(move |m| (e, *m))).collect();

    let results: Vec<Result<(f64, bool)>> = tasks
        .par_iter()
        .map(|(e, m)| {
            let dir = layout.segmentation_dir(*m, &e.id);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            }
            let img = read_nifti(e.image(m.image()))?;
            let opts = cfg.segment.options(m.profile());
            let t0 = Instant::now();
            let seg = segment(&img, &atlas, &opts)?;
            let runtime = t0.elapsed().as_secs_f64();
            create_dir(&dir)?;
            write_maps(&seg.posteriors, &layout.posteriors(*m, &e.id))?;
            seg.deformation.write(layout.deformation(*m, &e.id))?;
            let icv = intracranial_mask(&atlas, &seg.deformation, img.grid())?;
            Ok((runtime, touches_boundary(&icv)))
        })
        .collect();

    let mut status = Table::new("segment_status", STATUS);
    let mut runtime = Table::new("segment_runtime", RUNTIME);
    let mut failures = 0;
    for ((e, m), r) in tasks.iter().zip(results) {
        match r {
            Ok((secs, truncated)) => {
                let coverage = if truncated { "truncated" } else { "full" };
                if truncated {
                    log::warn!("{} {m}: intracranial mask reaches the volume boundary", e.id);
                }
                status.push(vec![e.id.clone(), m.name().into(), "ok".into(), coverage.into(), String::new()]);
                runtime.push(vec![e.id.clone(), m.name().into(), num(secs)]);
            }
            Err(err) => {
                failures += 1;
                log::error!("segment {} {m}: {err}", e.id);
                status.push(vec![e.id.clone(), m.name().into(), "failed".into(), String::new(), err.to_string()]);
                runtime.push(vec![e.id.clone(), m.name().into(), String::new()]);
            }
        }
    }
    let seg_dir = layout.root.join("segment");
    status.write(seg_dir.join("status.csv"))?;
    runtime.write(seg_dir.join("runtime.csv"))?;
    Ok(StageOutcome {
        tasks: tasks.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// validate-seg

fn test_rows(table: &mut Table, tests: &[PairedTest], a: Method, b: Method) {
    for t in tests {
        table.push(vec![
            t.metric.into(),
            t.class.name().into(),
            format!("{a} vs {b}"),
            t.n_pairs.to_string(),
            opt(t.result.map(|r| r.statistic)),
            opt(t.result.map(|r| r.p_value)),
            opt(t.p_bonferroni),
            t.result.map_or(String::new(), |r| r.method.name().into()),
        ]);
    }
}

fn ct_methods(cfg: &PipelineConfig) -> Vec<Method> {
    cfg.methods.iter().copied().filter(|m| *m != Method::RefMr).collect()
}

fn comparison_pair(cfg: &PipelineConfig) -> Option<(Method, Method)> {
    (cfg.methods.contains(&Method::BaseCt) && cfg.methods.contains(&Method::CtsegCt))
        .then_some((Method::BaseCt, Method::CtsegCt))
}

fn metrics_row(r: &ClassMetrics, with_hd: bool) -> Vec<String> {
    let mut v = vec![r.subject.clone(), r.method.name().into(), r.class.name().into(), opt(r.dice)];
    if with_hd {
        v.push(opt(r.hd95_mm));
    }
    v.push(opt(r.assd_mm));
    v.push(r.status.clone());
    v
}

fn summary_rows(table: &mut Table, rows: &[ClassMetrics], methods: &[Method], metrics: &[(&str, fn(&ClassMetrics) -> Option<f64>)]) {
    for m in methods {
        for class in Tissue::BRAIN {
            for (name, get) in metrics {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == *m && r.class == class)
                    .filter_map(get)
                    .collect();
                let s = summarise(&vals);
                table.push(vec![
                    m.name().into(),
                    class.name().into(),
                    name.to_string(),
                    vals.len().to_string(),
                    opt(s.map(|s| s.median)),
                    opt(s.map(|s| s.q1)),
                    opt(s.map(|s| s.q3)),
                ]);
            }
        }
    }
}

pub fn cmd_validate_seg(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let status = read_status(&layout)?;
    let methods = ct_methods(cfg);

    let per_subject: Vec<Vec<ClassMetrics>> = entries
        .par_iter()
        .map(|e| {
            let reference = if succeeded(&status, &e.id, Method::RefMr) {
                Some(read_maps(&layout.posteriors(Method::RefMr, &e.id))?)
            } else {
                None
            };
            let mut out = Vec::new();
            for &m in &methods {
                let test = if succeeded(&status, &e.id, m) {
                    Some(read_maps(&layout.posteriors(m, &e.id))?)
                } else {
                    None
                };
                for class in Tissue::BRAIN {
                    let mut row = ClassMetrics {
                        subject: e.id.clone(),
                        method: m,
                        class,
                        dice: None,
                        hd95_mm: None,
                        assd_mm: None,
                        status: String::new(),
                    };
                    match (&reference, &test) {
                        (None, _) => row.status = "missing-reference".into(),
                        (_, None) => row.status = "missing-segmentation".into(),
                        (Some(r), Some(t)) => {
                            let (d, h, a, s) = class_overlap(r, t, class, cfg.binarise_threshold)?;
                            (row.dice, row.hd95_mm, row.assd_mm, row.status) = (Some(d), h, a, s.into());
                        }
                    }
                    out.push(row);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ClassMetrics> = per_subject.into_iter().flatten().collect();

    let mut table = Table::new("segmentation", SEGMENTATION);
    rows.iter().for_each(|r| table.push(metrics_row(r, true)));
    table.write(layout.table("segmentation.csv"))?;

    let mut summary = Table::new("segmentation_summary", SUMMARY);
    summary_rows(
        &mut summary,
        &rows,
        &methods,
        &[("dice", |r| r.dice), ("hd95_mm", |r| r.hd95_mm), ("assd_mm", |r| r.assd_mm)],
    );
    summary.write(layout.table("segmentation_summary.csv"))?;

    let mut tests = Table::new("segmentation_tests", TESTS);
    if let Some((a, b)) = comparison_pair(cfg) {
        test_rows(&mut tests, &paired_class_tests(&rows, "dice", |r| r.dice, a, b)?, a, b);
        test_rows(&mut tests, &paired_class_tests(&rows, "hd95_mm", |r| r.hd95_mm, a, b)?, a, b);
        test_rows(&mut tests, &paired_class_tests(&rows, "assd_mm", |r| r.assd_mm, a, b)?, a, b);
    }
    tests.write(layout.table("segmentation_tests.csv"))?;

    let failures = rows.iter().filter(|r| r.dice.is_none()).count();
    Ok(StageOutcome {
        tasks: rows.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// validate-norm

pub fn cmd_validate_norm(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let status = read_status(&layout)?;

    let mut cov = Table::new("normalisation_cov", COV);
    for &m in &cfg.methods {
        let ok: Vec<&ManifestEntry> = entries.iter().filter(|e| succeeded(&status, &e.id, m)).collect();
        let warped: Vec<Volume> = ok
            .par_iter()
            .map(|e| {
                let img = read_nifti(e.image(m.image()))?;
                let field = DeformationField::read(layout.deformation(m, &e.id))?;
                apply_deformation(&img, &field, Interp::Trilinear)
            })
            .collect::<Result<_>>()?;
        let stats = if warped.len() >= 2 { Some(cov_stats(&warped, cfg.cov_threshold)) } else { None };
        match stats {
            Some(Ok(s)) => {
                create_dir(&layout.root.join("normalised"))?;
                write_nifti(&crate::metrics::group_mean(&warped)?, layout.normalised(&format!("group_mean_{m}.nii")))?;
                write_nifti(&s.cov_map, layout.normalised(&format!("cov_{m}.nii")))?;
                cov.push(vec![
                    m.name().into(),
                    warped.len().to_string(),
                    num(s.mean_cov),
                    s.brain_mask.count().to_string(),
                    s.excluded.to_string(),
                    "ok".into(),
                ]);
            }
            Some(Err(e)) => {
                log::warn!("CoV for {m}: {e}");
                cov.push(vec![m.name().into(), warped.len().to_string(), String::new(), String::new(), String::new(), "degenerate-mask".into()]);
            }
            None => cov.push(vec![m.name().into(), warped.len().to_string(), String::new(), String::new(), String::new(), "too-few-subjects".into()]),
        }
    }
    cov.write(layout.table("normalisation_cov.csv"))?;

    let methods = ct_methods(cfg);
    let per_subject: Vec<Vec<ClassMetrics>> = entries
        .par_iter()
        .map(|e| {
            let reference = if succeeded(&status, &e.id, Method::RefMr) {
                let maps = read_maps(&layout.posteriors(Method::RefMr, &e.id))?;
                let field = DeformationField::read(layout.deformation(Method::RefMr, &e.id))?;
                let warped = warp_maps(&maps, &field)?;
                Some((maps, warped))
            } else {
                None
            };
            let mut out = Vec::new();
            for &m in &methods {
                let test = match &reference {
                    Some((maps, _)) if succeeded(&status, &e.id, m) => {
                        Some(warp_maps(maps, &DeformationField::read(layout.deformation(m, &e.id))?)?)
                    }
                    _ => None,
                };
                for class in Tissue::BRAIN {
                    let mut row = ClassMetrics {
                        subject: e.id.clone(),
                        method: m,
                        class,
                        dice: None,
                        hd95_mm: None,
                        assd_mm: None,
                        status: String::new(),
                    };
                    match (&reference, &test) {
                        (None, _) => row.status = "missing-reference".into(),
                        (_, None) => row.status = "missing-segmentation".into(),
                        (Some((_, r)), Some(t)) => {
                            let (d, _, a, s) = class_overlap(r, t, class, cfg.binarise_threshold)?;
                            (row.dice, row.assd_mm, row.status) = (Some(d), a, s.into());
                        }
                    }
                    out.push(row);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ClassMetrics> = per_subject.into_iter().flatten().collect();
    let mut table = Table::new("normalisation", NORMALISATION);
    rows.iter().for_each(|r| table.push(metrics_row(r, false)));
    table.write(layout.table("normalisation.csv"))?;

    let mut summary = Table::new("normalisation_summary", SUMMARY);
    summary_rows(&mut summary, &rows, &methods, &[("dice", |r| r.dice), ("assd_mm", |r| r.assd_mm)]);
    summary.write(layout.table("normalisation_summary.csv"))?;

    let mut tests = Table::new("normalisation_tests", TESTS);
    if let Some((a, b)) = comparison_pair(cfg) {
        test_rows(&mut tests, &paired_class_tests(&rows, "dice", |r| r.dice, a, b)?, a, b);
        test_rows(&mut tests, &paired_class_tests(&rows, "assd_mm", |r| r.assd_mm, a, b)?, a, b);
    }
    tests.write(layout.table("normalisation_tests.csv"))?;

    let failures = rows.iter().filter(|r| r.dice.is_none()).count();
    Ok(StageOutcome {
        tasks: rows.len() + cfg.methods.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// volumetrics

fn volume_row(subject: &str, method: &str, r: Option<&VolumeReport>, status: &str) -> Vec<String> {
    let mut v = vec![subject.to_string(), method.to_string()];
    match r {
        Some(r) => {
            v.push(num(r.tbv_ml));
            v.push(num(r.tiv_ml));
            v.extend(r.per_class_ml.iter().map(|x| num(*x)));
            v.push(num(r.mask_volume_ml));
        }
        None => v.extend(std::iter::repeat_n(String::new(), 9)),
    }
    v.push(status.to_string());
    v
}

pub fn cmd_volumetrics(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let status = read_status(&layout)?;
    let atlas = Atlas::read(layout.atlas(cfg))?;
    let with_truth = entries.iter().all(|e| e.truth.is_some());

    type Reports = Vec<(String, Option<VolumeReport>, &'static str)>;
    let per_subject: Vec<Reports> = entries
        .par_iter()
        .map(|e| {
            let mut out: Reports = Vec::new();
            let mask = if succeeded(&status, &e.id, Method::RefMr) {
                let field = DeformationField::read(layout.deformation(Method::RefMr, &e.id))?;
                let native = read_nifti(&e.mr)?;
                Some(intracranial_mask(&atlas, &field, native.grid())?)
            } else {
                None
            };
            let mut names: Vec<String> = cfg.methods.iter().map(|m| m.name().to_string()).collect();
            if with_truth {
                names.push(TRUTH.into());
            }
            for name in names {
                let source = match Method::from_name(&name) {
                    Some(m) => succeeded(&status, &e.id, m).then(|| layout.posteriors(m, &e.id)),
                    None => e.truth.clone(),
                };
                let row = match (&mask, source) {
                    (None, _) => (name, None, "missing-reference-mask"),
                    (_, None) => (name, None, "missing-segmentation"),
                    (Some(mask), Some(p)) => (name, Some(brain_volumes(&read_maps(&p)?, mask)?), "ok"),
                };
                out.push(row);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new("volumetrics", VOLUMES);
    let mut by_method: BTreeMap<String, BTreeMap<String, VolumeReport>> = BTreeMap::new();
    let mut failures = 0;
    let mut tasks = 0;
    for (e, reports) in entries.iter().zip(&per_subject) {
        for (name, r, st) in reports {
            tasks += 1;
            table.push(volume_row(&e.id, name, r.as_ref(), st));
            match r {
                Some(r) => {
                    by_method.entry(name.clone()).or_default().insert(e.id.clone(), *r);
                }
                None => failures += 1,
            }
        }
    }
    table.write(layout.table("volumetrics.csv"))?;

    let mut pairs: Vec<(String, String)> =
        ct_methods(cfg).iter().map(|m| (m.name().to_string(), Method::RefMr.name().to_string())).collect();
    if with_truth {
        pairs.push((Method::RefMr.name().into(), TRUTH.into()));
    }
    let empty = BTreeMap::new();
    let mut agree = Table::new("volumetrics_agreement", AGREEMENT);
    for (test, reference) in pairs {
        let t = by_method.get(&test).unwrap_or(&empty);
        let r = by_method.get(&reference).unwrap_or(&empty);
        for (measure, get) in [("TBV", (|v: &VolumeReport| v.tbv_ml) as fn(&VolumeReport) -> f64), ("TIV", |v| v.tiv_ml)] {
            let (rv, tv): (Vec<f64>, Vec<f64>) =
                t.iter().filter_map(|(id, tr)| r.get(id).map(|rr| (get(rr), get(tr)))).unzip();
            let a = agreement(&rv, &tv)?;
            agree.push(vec![
                test.clone(),
                reference.clone(),
                measure.into(),
                a.n.to_string(),
                opt(a.icc),
                opt(a.ci_low),
                opt(a.ci_high),
                opt(a.pearson_r),
                opt(a.bias),
                opt(a.loa_low),
                opt(a.loa_high),
            ]);
        }
    }
    agree.write(layout.table("volumetrics_agreement.csv"))?;
    Ok(StageOutcome { tasks, failures })
}

// ---------------------------------------------------------------------------
// predict

/// Modulated warped GM, WM and CSF of one segmentation, as features.
fn subject_features(layout: &Layout, m: Method, id: &str, mask: &BinaryMask, fwhm: f64) -> Result<crate::predict::FeatureVector> {
    let maps = read_maps(&layout.posteriors(m, id))?;
    let field = DeformationField::read(layout.deformation(m, id))?;
    let jac = jacobian_determinant(&field);
    let [gm, wm, csf] = Tissue::BRAIN.map(|t| {
        apply_deformation(&maps.volume(t), &field, Interp::Trilinear).and_then(|w| modulate(&w, &jac))
    });
    build_features(id, &gm?, &wm?, &csf?, mask, fwhm)
}

pub fn cmd_predict(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let status = read_status(&layout)?;
    let atlas = Atlas::read(layout.atlas(cfg))?;
    let mask = atlas_brain_mask(&atlas);

    // One subject set for every method keeps the folds identical.
    let mut excluded: BTreeMap<&str, &str> = BTreeMap::new();
    let mut used: Vec<&ManifestEntry> = Vec::new();
    for e in &entries {
        if e.sex.is_none() {
            excluded.insert(&e.id, "no-sex-label");
        } else if !cfg.methods.iter().all(|m| succeeded(&status, &e.id, *m)) {
            excluded.insert(&e.id, "missing-segmentation");
        } else {
            used.push(e);
        }
    }
    let ids: Vec<String> = used.iter().map(|e| e.id.clone()).collect();
    let labels: Vec<i8> = used.iter().map(|e| sex_label(e.sex.expect("filtered"))).collect();
    let folds = cfg.folds.min(used.len());

    let mut preds = Table::new("predictions", PREDICTIONS);
    let mut roc = Table::new("roc", ROC);
    let mut summary = Table::new("prediction_summary", PREDICTION_SUMMARY);
    let mut failures = 0;
    for &m in &cfg.methods {
        let result = (|| {
            let feats = used
                .par_iter()
                .map(|e| subject_features(&layout, m, &e.id, &mask, cfg.feature_fwhm_mm))
                .collect::<Result<Vec<_>>>()?;
            let k = linear_kernel(&feats)?;
            kfold_cv(&k, &labels, &ids, folds, cfg.seed)
        })();
        match result {
            Ok(cv) => {
                for p in &cv.predictions {
                    preds.push(vec![
                        p.subject_id.clone(),
                        m.name().into(),
                        p.fold.to_string(),
                        p.true_label.to_string(),
                        num(p.probability),
                        p.predicted_label.to_string(),
                        "ok".into(),
                    ]);
                }
                let scores: Vec<f64> = cv.predictions.iter().map(|p| p.probability).collect();
                let truth: Vec<i8> = cv.predictions.iter().map(|p| p.true_label).collect();
                for (fpr, tpr) in roc_points(&scores, &truth)? {
                    roc.push(vec![m.name().into(), num(fpr), num(tpr)]);
                }
                summary.push(vec![
                    m.name().into(),
                    used.len().to_string(),
                    folds.to_string(),
                    num(cv.auc),
                    num(cv.balanced_accuracy),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                failures += 1;
                log::error!("predict {m}: {e}");
                let reason = match e {
                    Error::Domain(_) => "invalid-cohort",
                    Error::Convergence(_) => "no-convergence",
                    _ => "failed",
                };
                for id in &ids {
                    preds.push(vec![id.clone(), m.name().into(), String::new(), String::new(), String::new(), String::new(), reason.into()]);
                }
                summary.push(vec![m.name().into(), used.len().to_string(), folds.to_string(), String::new(), String::new(), reason.into()]);
            }
        }
        for (id, reason) in &excluded {
            preds.push(vec![id.to_string(), m.name().into(), String::new(), String::new(), String::new(), String::new(), reason.to_string()]);
        }
    }
    preds.write(layout.table("predictions.csv"))?;
    roc.write(layout.table("roc.csv"))?;
    summary.write(layout.table("prediction_summary.csv"))?;
    Ok(StageOutcome {
        tasks: cfg.methods.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq)]
pub struct CohortTableRow {
    pub subject: String,
    pub method: Method,
    pub class: Tissue,
    pub dice: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub tbv_ml: Option<f64>,
    pub tiv_ml: Option<f64>,
    /// Wall-clock segmentation time; the only non-reproducible column.
    pub runtime_s: Option<f64>,
    /// `ok` or the reason code of the first missing value.
    pub status: String,
}

/// Per-subject, per-method, per-class results; `(subject, method, class)`
/// is unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortTable {
    rows: Vec<CohortTableRow>,
}

impl CohortTable {
    pub fn new(mut rows: Vec<CohortTableRow>) -> Result<Self> {
        rows.sort_by(|a, b| (&a.subject, a.method, a.class).cmp(&(&b.subject, b.method, b.class)));
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert((r.subject.clone(), r.method, r.class)) {
                return Err(Error::Domain(format!("duplicate cohort row {} {} {}", r.subject, r.method, r.class)));
            }
        }
        Ok(CohortTable { rows })
    }

    pub fn rows(&self) -> &[CohortTableRow] {
        &self.rows
    }

    fn to_table(&self) -> Table {
        let mut t = Table::new("cohort", COHORT);
        for r in &self.rows {
            t.push(vec![
                r.subject.clone(),
                r.method.name().into(),
                r.class.name().into(),
                opt(r.dice),
                opt(r.hd95_mm),
                opt(r.assd_mm),
                opt(r.tbv_ml),
                opt(r.tiv_ml),
                opt(r.runtime_s),
                r.status.clone(),
            ]);
        }
        t
    }
}

fn cell(t: &Table, row: &[String], col: &str) -> Result<Option<f64>> {
    parse_opt(&row[t.column(col)?])
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.3}", x + 0.0))
}

fn fmt_p(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| if x < 1e-3 { format!("{x:.2e}") } else { format!("{x:.4}") })
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let layout = Layout::new(cfg);
    let entries = read_manifest(&layout.cohort)?;
    let read = |file: &str, name: &'static str, header: &[&'static str], stage: &str| {
        let path = if name.starts_with("segment_") {
            layout.root.join("segment").join(file)
        } else {
            layout.table(file)
        };
        Table::read(path, name, header, stage)
    };
    let runtime = read("runtime.csv", "segment_runtime", RUNTIME, "segment")?;
    let seg = read("segmentation.csv", "segmentation", SEGMENTATION, "validate-seg")?;
    let seg_summary = read("segmentation_summary.csv", "segmentation_summary", SUMMARY, "validate-seg")?;
    let seg_tests = read("segmentation_tests.csv", "segmentation_tests", TESTS, "validate-seg")?;
    let cov = read("normalisation_cov.csv", "normalisation_cov", COV, "validate-norm")?;
    let norm_summary = read("normalisation_summary.csv", "normalisation_summary", SUMMARY, "validate-norm")?;
    let norm_tests = read("normalisation_tests.csv", "normalisation_tests", TESTS, "validate-norm")?;
    let vols = read("volumetrics.csv", "volumetrics", VOLUMES, "volumetrics")?;
    let agree = read("volumetrics_agreement.csv", "volumetrics_agreement", AGREEMENT, "volumetrics")?;
    let pred = read("prediction_summary.csv", "prediction_summary", PREDICTION_SUMMARY, "predict")?;

    // Cohort table.
    let mut volumes: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in &vols.rows {
        volumes.insert((r[0].clone(), r[1].clone()), (cell(&vols, r, "tbv_ml")?, cell(&vols, r, "tiv_ml")?));
    }
    let mut volume_status: BTreeMap<(String, String), String> = BTreeMap::new();
    for r in &vols.rows {
        volume_status.insert((r[0].clone(), r[1].clone()), r[11].clone());
    }
    let mut overlap: BTreeMap<(String, String, String), ([Option<f64>; 3], String)> = BTreeMap::new();
    for r in &seg.rows {
        overlap.insert(
            (r[0].clone(), r[1].clone(), r[2].clone()),
            ([cell(&seg, r, "dice")?, cell(&seg, r, "hd95_mm")?, cell(&seg, r, "assd_mm")?], r[6].clone()),
        );
    }
    let mut runtimes: BTreeMap<(String, String), Option<f64>> = BTreeMap::new();
    for r in &runtime.rows {
        runtimes.insert((r[0].clone(), r[1].clone()), parse_opt(&r[2])?);
    }
    let mut rows = Vec::new();
    for e in &entries {
        for &m in &cfg.methods {
            let key = (e.id.clone(), m.name().to_string());
            let (tbv, tiv) = volumes.get(&key).copied().unwrap_or((None, None));
            let runtime_s = runtimes.get(&key).copied().flatten();
            for class in Tissue::BRAIN {
                // REF-MR is the overlap reference, so it has no overlap row.
                let (o, overlap_status) = match overlap.get(&(e.id.clone(), m.name().into(), class.name().into())) {
                    Some((o, st)) => (*o, st.as_str()),
                    None if m == Method::RefMr => ([None; 3], "reference"),
                    None => ([None; 3], "missing-segmentation"),
                };
                let vol_status = volume_status.get(&key).map_or("missing-segmentation", String::as_str);
                let status = [overlap_status, vol_status]
                    .into_iter()
                    .find(|s| !matches!(*s, "ok" | "reference"))
                    .unwrap_or("ok")
                    .to_string();
                rows.push(CohortTableRow {
                    subject: e.id.clone(),
                    method: m,
                    class,
                    dice: o[0],
                    hd95_mm: o[1],
                    assd_mm: o[2],
                    tbv_ml: tbv,
                    tiv_ml: tiv,
                    runtime_s,
                    status,
                });
            }
        }
    }
    let cohort = CohortTable::new(rows)?;
    cohort.to_table().write(layout.root.join("report.csv"))?;

    // Text summary.
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "neurovol report").ok();
    writeln!(w, "toolkit version: {}", env!("CARGO_PKG_VERSION")).ok();
    writeln!(w, "config sha256:   {}", cfg.hash).ok();
    writeln!(w, "seed:            {}", cfg.seed).ok();
    writeln!(w, "subjects:        {}", entries.len()).ok();
    writeln!(w, "methods:         {}", cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")).ok();

    let summary_block = |w: &mut String, title: &str, t: &Table| -> Result<()> {
        writeln!(w, "\n{title}, median [IQR]").ok();
        writeln!(w, "{:<10} {:<5} {:<9} {:>3}  value", "method", "class", "metric", "n").ok();
        for r in &t.rows {
            writeln!(
                w,
                "{:<10} {:<5} {:<9} {:>3}  {} [{}, {}]",
                r[0],
                r[1],
                r[2],
                r[3],
                fmt3(cell(t, r, "median")?),
                fmt3(cell(t, r, "q1")?),
                fmt3(cell(t, r, "q3")?)
            )
            .ok();
        }
        Ok(())
    };
    let tests_block = |w: &mut String, t: &Table| -> Result<()> {
        if t.rows.is_empty() {
            writeln!(w, "(no paired comparison configured)").ok();
        }
        for r in &t.rows {
            writeln!(
                w,
                "{:<9} {:<5} {:<22} n={:<3} W+={:<7} p={:<9} p_bonf={:<9} {}",
                r[0],
                r[1],
                r[2],
                r[3],
                fmt3(cell(t, r, "statistic")?),
                fmt_p(cell(t, r, "p_value")?),
                fmt_p(cell(t, r, "p_bonferroni")?),
                r[7]
            )
            .ok();
        }
        Ok(())
    };

    summary_block(w, "Segmentation vs REF-MR", &seg_summary)?;
    writeln!(w, "\nPaired Wilcoxon signed-rank tests, segmentation (Bonferroni m=3)").ok();
    tests_block(w, &seg_tests)?;

    writeln!(w, "\nNormalisation consistency: mean voxelwise CoV").ok();
    for r in &cov.rows {
        writeln!(w, "{:<10} n={:<3} mean CoV {}  ({})", r[0], r[1], fmt3(cell(&cov, r, "mean_cov")?), r[5]).ok();
    }
    summary_block(w, "Warped-tissue overlap vs REF-MR warps", &norm_summary)?;
    writeln!(w, "\nPaired Wilcoxon signed-rank tests, normalisation (Bonferroni m=3)").ok();
    tests_block(w, &norm_tests)?;

    writeln!(w, "\nVolumetric agreement").ok();
    for r in &agree.rows {
        writeln!(
            w,
            "{:<9} vs {:<7} {:<3} n={:<3} ICC {} [{}, {}]  r {}  bias {} ml  LoA [{}, {}] ml",
            r[0],
            r[1],
            r[2],
            r[3],
            fmt3(cell(&agree, r, "icc")?),
            fmt3(cell(&agree, r, "ci_low")?),
            fmt3(cell(&agree, r, "ci_high")?),
            fmt3(cell(&agree, r, "pearson_r")?),
            fmt3(cell(&agree, r, "bias_ml")?),
            fmt3(cell(&agree, r, "loa_low_ml")?),
            fmt3(cell(&agree, r, "loa_high_ml")?)
        )
        .ok();
    }

    writeln!(w, "\nSex classification (female = positive class)").ok();
    for r in &pred.rows {
        writeln!(
            w,
            "{:<10} n={:<3} folds={:<3} AUC {}  balanced accuracy {}  ({})",
            r[0],
            r[1],
            r[2],
            fmt3(cell(&pred, r, "auc")?),
            fmt3(cell(&pred, r, "balanced_accuracy")?),
            r[5]
        )
        .ok();
    }

    writeln!(w, "\nMedian segmentation time per subject (s)").ok();
    for &m in &cfg.methods {
        let t: Vec<f64> = runtime
            .rows
            .iter()
            .filter(|r| r[1] == m.name())
            .filter_map(|r| parse_opt(&r[2]).ok().flatten())
            .collect();
        writeln!(w, "{:<10} {}", m.name(), fmt3(summarise(&t).map(|s| s.median))).ok();
    }
    let path = layout.root.join("report.txt");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(StageOutcome {
        tasks: 1,
        failures: 0,
    })
}
