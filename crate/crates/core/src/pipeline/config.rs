//! Flat sectioned key-value configuration.
//!
//! ```text
//! # comment
//! [cohort]
//! source = phantom
//! subjects = 10
//! seed = 1
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::atlasgmm::{ModalityProfile, SegmentOpts};
use crate::error::{Error, Result};
use crate::phantom::{CohortVariation, PhantomSpec};

use super::Method;

#[derive(Debug, Clone, PartialEq)]
pub enum CohortSource {
    /// Generated by `phantom-gen` into the output directory.
    Phantom {
        subjects: usize,
        spec: PhantomSpec,
        variation: CohortVariation,
    },
    /// Existing cohort directory containing `manifest.csv`.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AtlasSource {
    File(PathBuf),
    /// Built by `phantom-gen` from an independent training cohort.
    Phantom { subjects: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSettings {
    pub alternations: usize,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub nonlinear_iterations: usize,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        let d = SegmentOpts::new(ModalityProfile::ct());
        SegmentSettings {
            alternations: d.alternations,
            em_max_iter: d.em_max_iter,
            em_tol: d.em_tol,
            nonlinear_iterations: d.nonlinear.iterations,
        }
    }
}

impl SegmentSettings {
    pub fn options(&self, profile: ModalityProfile) -> SegmentOpts {
        let mut o = SegmentOpts::new(profile);
        o.alternations = self.alternations;
        o.em_max_iter = self.em_max_iter;
        o.em_tol = self.em_tol;
        o.nonlinear.iterations = self.nonlinear_iterations;
        o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub cohort: CohortSource,
    pub atlas: AtlasSource,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub segment: SegmentSettings,
    pub binarise_threshold: f64,
    pub cov_threshold: f64,
    pub folds: usize,
    pub feature_fwhm_mm: f64,
    pub output_dir: PathBuf,
    /// SHA-256 of the effective settings, excluding the output directory.
    pub hash: String,
}

/// Parsed `[section] key = value` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<(String, String), String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
            };
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside of a section", no + 1)));
            }
            let key = (section.clone(), k.trim().to_string());
            if entries.insert(key, v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{}`", no + 1, k.trim())));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get(section, key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn triple(&self, section: &str, key: &str) -> Result<Option<[f64; 3]>> {
        let Some(v) = self.get(section, key) else {
            return Ok(None);
        };
        let parts: Vec<f64> = v
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`"))))
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [a] => Ok(Some([*a; 3])),
            [a, b, c] => Ok(Some([*a, *b, *c])),
            _ => Err(Error::Config(format!("[{section}] {key}: expected 1 or 3 values"))),
        }
    }
}

impl fmt::Display for ConfigFile {
    /// Canonical form: sections and keys sorted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut last = None;
        for ((s, k), v) in &self.entries {
            if last != Some(s) {
                writeln!(f, "[{s}]")?;
                last = Some(s);
            }
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("cohort", &["source", "dir", "subjects", "seed", "dims", "spacing_mm", "sex_effect", "rotation_deg", "translation_mm", "warp_mm", "scale_jitter"]),
    ("atlas", &["path", "training_subjects", "training_seed"]),
    ("methods", &["run"]),
    ("segment", &["alternations", "em_max_iter", "em_tol", "nonlinear_iterations"]),
    ("validation", &["binarise", "cov_threshold", "folds", "feature_fwhm_mm"]),
    ("output", &["dir"]),
];

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>, seed_flag: Option<u64>, out_flag: Option<PathBuf>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base, seed_flag, out_flag)
    }

    /// Builds a config from text; `base` anchors relative paths.
    pub fn from_text(text: &str, base: &Path, seed_flag: Option<u64>, out_flag: Option<PathBuf>) -> Result<Self> {
        let file = ConfigFile::parse(text)?;
        for (s, k) in file.entries.keys() {
            let ok = KNOWN.iter().any(|(sec, keys)| sec == s && keys.contains(&k.as_str()));
            if !ok {
                return Err(Error::Config(format!("unknown key [{s}] {k}")));
            }
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };

        let seed = match (file.parsed::<u64>("cohort", "seed")?, seed_flag) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("--seed {b} conflicts with configured seed {a}")))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(Error::Config("a seed is required ([cohort] seed or --seed)".into())),
        };

        let cohort = match file.get("cohort", "source").unwrap_or("phantom") {
            "phantom" => {
                let subjects = file.parsed("cohort", "subjects")?.unwrap_or(10);
                if subjects < 2 {
                    return Err(Error::Config(format!("cohort statistics need at least 2 subjects, got {subjects}")));
                }
                let mut spec = PhantomSpec::default();
                if let Some(d) = file.triple("cohort", "dims")? {
                    if d.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                        return Err(Error::Config("[cohort] dims must be positive integers".into()));
                    }
                    spec.dims = d.map(|v| v as usize);
                }
                if let Some(s) = file.triple("cohort", "spacing_mm")? {
                    spec.spacing = s;
                }
                let mut variation = CohortVariation::default();
                let set = |field: &mut f64, key: &str| -> Result<()> {
                    if let Some(v) = file.parsed("cohort", key)? {
                        *field = v;
                    }
                    Ok(())
                };
                set(&mut variation.sex_effect, "sex_effect")?;
                set(&mut variation.rotation_deg, "rotation_deg")?;
                set(&mut variation.translation_mm, "translation_mm")?;
                set(&mut variation.warp_amplitude_mm, "warp_mm")?;
                set(&mut variation.scale_jitter, "scale_jitter")?;
                spec.validate().map_err(|e| Error::Config(e.to_string()))?;
                CohortSource::Phantom { subjects, spec, variation }
            }
            "directory" => {
                let dir = file
                    .get("cohort", "dir")
                    .ok_or_else(|| Error::Config("[cohort] dir is required for source = directory".into()))?;
                CohortSource::Directory(resolve(dir))
            }
            other => return Err(Error::Config(format!("unknown cohort source `{other}`"))),
        };

        let atlas = match file.get("atlas", "path") {
            Some(p) => AtlasSource::File(resolve(p)),
            None => {
                if matches!(cohort, CohortSource::Directory(_)) {
                    return Err(Error::Config("[atlas] path is required for directory cohorts".into()));
                }
                AtlasSource::Phantom {
                    subjects: file.parsed("atlas", "training_subjects")?.unwrap_or(10),
                    seed: file.parsed("atlas", "training_seed")?.unwrap_or(seed.wrapping_add(1000)),
                }
            }
        };

        let methods = match file.get("methods", "run") {
            Some(list) => list
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| Method::from_name(s).ok_or_else(|| Error::Config(format!("unknown method `{s}`"))))
                .collect::<Result<Vec<_>>>()?,
            None => Method::ALL.to_vec(),
        };
        if !methods.contains(&Method::RefMr) {
            return Err(Error::Config("REF-MR must be run: it is the reference for every comparison".into()));
        }
        let mut sorted = methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != methods.len() {
            return Err(Error::Config("methods listed twice".into()));
        }

        let mut segment = SegmentSettings::default();
        if let Some(v) = file.parsed("segment", "alternations")? {
            segment.alternations = v;
        }
        if let Some(v) = file.parsed("segment", "em_max_iter")? {
            segment.em_max_iter = v;
        }
        if let Some(v) = file.parsed("segment", "em_tol")? {
            segment.em_tol = v;
        }
        if let Some(v) = file.parsed("segment", "nonlinear_iterations")? {
            segment.nonlinear_iterations = v;
        }

        let binarise_threshold = file.parsed("validation", "binarise")?.unwrap_or(0.5);
        let cov_threshold = file.parsed("validation", "cov_threshold")?.unwrap_or(20.0);
        let folds = file.parsed("validation", "folds")?.unwrap_or(10);
        let feature_fwhm_mm = file.parsed("validation", "feature_fwhm_mm")?.unwrap_or(8.0);
        if !(0.0..1.0).contains(&binarise_threshold) || folds < 2 || !(feature_fwhm_mm > 0.0) {
            return Err(Error::Config("validation settings out of range".into()));
        }

        let output_dir = match (out_flag, file.get("output", "dir")) {
            (Some(o), _) => o,
            (None, Some(d)) => resolve(d),
            (None, None) => return Err(Error::Config("an output directory is required ([output] dir or --out)".into())),
        };

        let mut hashed = file.clone();
        hashed.entries.remove(&("output".to_string(), "dir".to_string()));
        hashed.entries.insert(("cohort".into(), "seed".into()), seed.to_string());
        let hash = Sha256::digest(hashed.to_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();

        Ok(PipelineConfig {
            cohort,
            atlas,
            methods,
            seed,
            segment,
            binarise_threshold,
            cov_threshold,
            folds,
            feature_fwhm_mm,
            output_dir,
            hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, seed: Option<u64>) -> Result<PipelineConfig> {
        PipelineConfig::from_text(text, Path::new("/base"), seed, None)
    }

    const MINIMAL: &str = "[cohort]\nseed = 1\n[output]\ndir = out\n";

    #[test]
    fn defaults_fill_in() {
        let c = load(MINIMAL, None).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.methods, Method::ALL.to_vec());
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
        assert!(matches!(c.cohort, CohortSource::Phantom { subjects: 10, .. }));
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn seed_rules() {
        assert!(load(MINIMAL, Some(1)).is_ok());
        assert!(matches!(load(MINIMAL, Some(2)), Err(Error::Config(_))));
        let no_seed = "[output]\ndir = out\n";
        assert_eq!(load(no_seed, Some(5)).unwrap().seed, 5);
        assert!(load(no_seed, None).is_err());
        assert_eq!(load(no_seed, Some(1)).unwrap().hash, load(MINIMAL, None).unwrap().hash);
    }

    #[test]
    fn single_subject_cohort_is_rejected() {
        assert!(matches!(load("[cohort]\nseed = 1\nsubjects = 1\n[output]\ndir = o\n", None), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_and_malformed_entries_are_rejected() {
        assert!(load("[cohort]\nseed = 1\ncolour = red\n[output]\ndir = o\n", None).is_err());
        assert!(load("[cohort]\nseed = one\n[output]\ndir = o\n", None).is_err());
        assert!(load("seed = 1\n", None).is_err());
        assert!(load("[methods]\nrun = BASE-CT\n[cohort]\nseed = 1\n[output]\ndir = o\n", None).is_err());
    }

    #[test]
    fn output_dir_does_not_change_the_hash() {
        let a = load(MINIMAL, None).unwrap();
        let b = PipelineConfig::from_text(MINIMAL, Path::new("/base"), None, Some("/elsewhere".into())).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(b.output_dir, PathBuf::from("/elsewhere"));
        let c = load("[cohort]\nseed = 1\nsubjects = 12\n[output]\ndir = out\n", None).unwrap();
        assert_ne!(a.hash, c.hash);
    }
}
