//! Config-driven orchestration of the full experiment: cohort generation,
//! three segmentation pipelines and the four validation dimensions, written
//! as schema-tagged CSV tables under one output directory.

mod analysis;
mod config;
mod stages;
mod table;

use std::fmt;
use std::path::{Path, PathBuf};

pub use analysis::{agreement, class_overlap, paired_class_tests, summarise, Agreement, ClassMetrics, PairedTest, Summary};
pub use config::{AtlasSource, CohortSource, ConfigFile, PipelineConfig, SegmentSettings};
pub use stages::{
    cmd_phantom_gen, cmd_predict, cmd_report, cmd_segment, cmd_validate_norm, cmd_validate_seg, cmd_volumetrics,
    read_manifest, CohortTable, CohortTableRow, ManifestEntry,
};
pub use table::{Table, SCHEMA_VERSION};

use crate::atlasgmm::{Modality, ModalityProfile};
use crate::error::{Error, Result};

/// Segmentation pipelines under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// MR image, MR intensity profile: the reference.
    RefMr,
    /// CT image, MR intensity profile: the out-of-domain baseline.
    BaseCt,
    /// CT image, CT intensity profile.
    CtsegCt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RefMr, Method::BaseCt, Method::CtsegCt];

    pub fn name(self) -> &'static str {
        match self {
            Method::RefMr => "REF-MR",
            Method::BaseCt => "BASE-CT",
            Method::CtsegCt => "CTSEG-CT",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Modality of the image the method segments.
    pub fn image(self) -> Modality {
        match self {
            Method::RefMr => Modality::Mr,
            Method::BaseCt | Method::CtsegCt => Modality::Ct,
        }
    }

    pub fn profile(self) -> ModalityProfile {
        match self {
            Method::RefMr | Method::BaseCt => ModalityProfile::mr(),
            Method::CtsegCt => ModalityProfile::ct(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// CLI stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PhantomGen,
    Segment,
    ValidateSeg,
    ValidateNorm,
    Volumetrics,
    Predict,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::PhantomGen,
        Stage::Segment,
        Stage::ValidateSeg,
        Stage::ValidateNorm,
        Stage::Volumetrics,
        Stage::Predict,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PhantomGen => "phantom-gen",
            Stage::Segment => "segment",
            Stage::ValidateSeg => "validate-seg",
            Stage::ValidateNorm => "validate-norm",
            Stage::Volumetrics => "volumetrics",
            Stage::Predict => "predict",
            Stage::Report => "report",
        }
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub cohort: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let cohort = match &cfg.cohort {
            CohortSource::Phantom { .. } => cfg.output_dir.join("cohort"),
            CohortSource::Directory(d) => d.clone(),
        };
        Layout {
            root: cfg.output_dir.clone(),
            cohort,
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.cohort.join("manifest.csv")
    }

    pub fn atlas(&self, cfg: &PipelineConfig) -> PathBuf {
        match &cfg.atlas {
            AtlasSource::File(p) => p.clone(),
            AtlasSource::Phantom { .. } => self.root.join("atlas.nii"),
        }
    }

    pub fn segmentation_dir(&self, method: Method, subject: &str) -> PathBuf {
        self.root.join("segment").join(method.name()).join(subject)
    }

    pub fn posteriors(&self, method: Method, subject: &str) -> PathBuf {
        self.segmentation_dir(method, subject).join("posteriors.nii")
    }

    pub fn deformation(&self, method: Method, subject: &str) -> PathBuf {
        self.segmentation_dir(method, subject).join("deformation.nii")
    }

    pub fn table(&self, file: &str) -> PathBuf {
        self.root.join("tables").join(file)
    }

    pub fn normalised(&self, file: &str) -> PathBuf {
        self.root.join("normalised").join(file)
    }
}

/// Outcome of a stage; failed tasks are logged and counted, not fatal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutcome {
    pub tasks: usize,
    pub failures: usize,
}

/// Runs one stage on a worker pool of `jobs` threads.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, jobs: usize) -> Result<StageOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| match stage {
        Stage::PhantomGen => cmd_phantom_gen(cfg),
        Stage::Segment => cmd_segment(cfg),
        Stage::ValidateSeg => cmd_validate_seg(cfg),
        Stage::ValidateNorm => cmd_validate_norm(cfg),
        Stage::Volumetrics => cmd_volumetrics(cfg),
        Stage::Predict => cmd_predict(cfg),
        Stage::Report => cmd_report(cfg),
    })
}

/// Every stage in order. Directory cohorts skip `phantom-gen`.
pub fn run_all(cfg: &PipelineConfig, jobs: usize) -> Result<StageOutcome> {
    let mut total = StageOutcome::default();
    for stage in Stage::ALL {
        if stage == Stage::PhantomGen && matches!(cfg.cohort, CohortSource::Directory(_)) {
            continue;
        }
        let o = run_stage(stage, cfg, jobs)?;
        total.tasks += o.tasks;
        total.failures += o.failures;
    }
    Ok(total)
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}
