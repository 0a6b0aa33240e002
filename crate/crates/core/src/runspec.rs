//! End-to-end synthesis runs driven by a JSON run specification.
//!
//! A run writes one file per output volume into the output directory and a
//! `manifest.json` describing them. Nothing written depends on the clock or
//! on the output location, so identical specs give identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarVolume, VectorField};
use crate::io::{self, Format, Volume, VolumeKind};
use crate::phantom::{make_subject, Cohort, Marker};
use crate::register::RegistrationConfig;
use crate::synthesis::{
    synthesize, synthesize_no_pt, CohortSchedule, DirectoryTemplates, PhantomTemplates, Rates, SynthesisResult,
    TemplateProvider,
};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Transport template changes into the subject's space.
    #[default]
    Pt,
    /// Ablation without transport.
    NoPt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SubjectSource {
    /// Scans on disk; paths are relative to the run spec.
    Files {
        image: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    /// A phantom subject at the schedule's baseline, built from phantom
    /// templates.
    Phantom {
        seed: u64,
        #[serde(default)]
        marker: Option<Marker>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateSource {
    Phantom {
        dims: [usize; 3],
        #[serde(default)]
        rates: BTreeMap<Cohort, Rates>,
    },
    /// Directory holding `index.json`; relative to the run spec.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub subject: SubjectSource,
    pub templates: TemplateSource,
    pub schedule: CohortSchedule,
    #[serde(default)]
    pub registration: RegistrationConfig,
    /// Relative to the run spec.
    pub output_dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
    #[serde(default)]
    pub mode: Mode,
}

fn default_format() -> Format {
    Format::Nifti
}

impl RunSpec {
    /// Parses and validates a run spec.
    pub fn from_json(bytes: &[u8]) -> Result<RunSpec> {
        let spec: RunSpec = serde_json::from_slice(bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.registration.validate()?;
        if let TemplateSource::Phantom { dims, rates } = &self.templates {
            GridGeometry::with_dims(*dims)?;
            if rates.values().any(|r| !(r.ventricle >= 0.0 && r.hippocampus >= 0.0)) {
                return Err(Error::InvalidArgument("phantom rates must be non-negative".into()));
            }
        }
        if matches!(self.subject, SubjectSource::Phantom { .. })
            && !matches!(self.templates, TemplateSource::Phantom { .. })
        {
            return Err(Error::InvalidArgument("a phantom subject needs phantom templates".into()));
        }
        Ok(())
    }

    /// SHA-256 of the spec's canonical JSON with the output directory left
    /// out, so relocating a run does not change its hash.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("run spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub file: String,
    /// SHA-256 of the payload bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub age: f64,
    pub cohort: Cohort,
    pub image: FileEntry,
    pub labels: Option<FileEntry>,
    pub svf: FileEntry,
    pub displacement: FileEntry,
    pub min_jacobian: f64,
    pub ladder_steps: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub mode: Mode,
    pub format: Format,
    /// Written for phantom subjects only.
    pub subject: Option<FileEntry>,
    pub subject_labels: Option<FileEntry>,
    pub subject_svf: FileEntry,
    pub targets: Vec<TargetEntry>,
}

impl Manifest {
    pub fn any_flagged(&self) -> bool {
        self.targets.iter().any(|t| t.flagged)
    }
}

pub struct RunOutput {
    pub manifest: Manifest,
    pub result: SynthesisResult,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

struct Writer<'a> {
    dir: &'a Path,
    format: Format,
}

impl Writer<'_> {
    fn write(&self, stem: &str, volume: Volume) -> Result<FileEntry> {
        let path = io::output_path(self.dir, stem, self.format);
        io::write_volume(&volume, &path, self.format)?;
        let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(FileEntry {
            file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            sha256: hex::encode(Sha256::digest(&payload)),
        })
    }

    fn scalar(&self, stem: &str, volume: &ScalarVolume) -> Result<FileEntry> {
        self.write(stem, Volume::Scalar(volume.clone()))
    }

    fn field(&self, stem: &str, field: &VectorField, kind: VolumeKind) -> Result<FileEntry> {
        self.write(stem, Volume::Field(field.clone(), kind))
    }
}

fn age_tag(age: f64) -> String {
    format!("{age}").replace('.', "p").replace('-', "m")
}

/// Runs the pipeline described by `spec`. Relative paths resolve against
/// `base_dir`, normally the directory holding the spec file.
pub fn run(spec: &RunSpec, base_dir: &Path) -> Result<RunOutput> {
    spec.validate()?;
    let phantom;
    let directory;
    let templates: &dyn TemplateProvider = match &spec.templates {
        TemplateSource::Phantom { dims, rates } => {
            phantom = PhantomTemplates { geometry: GridGeometry::with_dims(*dims)?, rates: rates.clone() };
            &phantom
        }
        TemplateSource::Directory(dir) => {
            directory = DirectoryTemplates::open(resolve(base_dir, dir))?;
            &directory
        }
    };

    let (subject, subject_labels, generated) = match &spec.subject {
        SubjectSource::Files { image, labels } => {
            let image = io::read_scalar(resolve(base_dir, image))?;
            let labels = labels.as_ref().map(|l| io::read_scalar(resolve(base_dir, l))).transpose()?;
            (image, labels, false)
        }
        SubjectSource::Phantom { seed, marker } => {
            let TemplateSource::Phantom { dims, rates } = &spec.templates else { unreachable!("validated above") };
            let source = PhantomTemplates { geometry: GridGeometry::with_dims(*dims)?, rates: rates.clone() };
            let phantom_spec =
                source.spec(spec.schedule.baseline_age, spec.schedule.baseline_cohort).with_subject(*seed, *marker);
            let (image, labels) = make_subject(&phantom_spec)?;
            (image, Some(labels), true)
        }
    };

    let result = match spec.mode {
        Mode::Pt => synthesize(&subject, subject_labels.as_ref(), &spec.schedule, templates, &spec.registration)?,
        Mode::NoPt => synthesize_no_pt(&subject, &spec.schedule, templates, &spec.registration)?,
    };

    let out_dir = resolve(base_dir, &spec.output_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let writer = Writer { dir: &out_dir, format: spec.format };

    let (subject_entry, subject_labels_entry) = if generated {
        (
            Some(writer.scalar("subject", &subject)?),
            subject_labels.as_ref().map(|l| writer.scalar("subject_labels", l)).transpose()?,
        )
    } else {
        (None, None)
    };
    let subject_svf = writer.field("subject_svf", &result.subject_svf, VolumeKind::Svf)?;

    let targets = result
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let stem = format!("t{i:02}_{}_{}", t.target.cohort.as_str(), age_tag(t.target.age));
            Ok(TargetEntry {
                age: t.target.age,
                cohort: t.target.cohort,
                image: writer.scalar(&format!("{stem}_image"), &t.image)?,
                labels: t.labels.as_ref().map(|l| writer.scalar(&format!("{stem}_labels"), l)).transpose()?,
                svf: writer.field(&format!("{stem}_svf"), &t.svf, VolumeKind::Svf)?,
                displacement: writer.field(&format!("{stem}_disp"), &t.displacement, VolumeKind::Displacement)?,
                min_jacobian: t.min_jacobian,
                ladder_steps: t.ladder_steps,
                flagged: t.flagged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        tool: "brainage".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: spec.config_hash(),
        mode: spec.mode,
        format: spec.format,
        subject: subject_entry,
        subject_labels: subject_labels_entry,
        subject_svf,
        targets,
    };
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(RunOutput { manifest, result })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "subject": {"phantom": {"seed": 3}},
        "templates": {"phantom": {"dims": [16, 16, 16]}},
        "schedule": {"baseline_age": 60, "baseline_cohort": "hc", "targets": [{"age": 62, "cohort": "hc"}]},
        "output_dir": "out"
    }"#;

    #[test]
    fn minimal_spec_takes_defaults() {
        let spec = RunSpec::from_json(MINIMAL.as_bytes()).unwrap();
        assert_eq!(spec.mode, Mode::Pt);
        assert_eq!(spec.format, Format::Nifti);
        assert_eq!(spec.registration, RegistrationConfig::default());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunSpec::from_json(MINIMAL.as_bytes()).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.mode = Mode::NoPt;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn phantom_subject_requires_phantom_templates() {
        let text = MINIMAL.replace(r#"{"phantom": {"dims": [16, 16, 16]}}"#, r#"{"directory": "tpl"}"#);
        assert!(matches!(RunSpec::from_json(text.as_bytes()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = MINIMAL.replace(r#""output_dir""#, r#""outptu_dir": 1, "output_dir""#);
        assert!(matches!(RunSpec::from_json(text.as_bytes()), Err(Error::Json(_))));
    }

    #[test]
    fn invalid_registration_rejected() {
        let text = MINIMAL.replace(r#""output_dir""#, r#""registration": {"levels": [2]}, "output_dir""#);
        assert!(matches!(RunSpec::from_json(text.as_bytes()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn age_tags_are_filename_safe() {
        assert_eq!(age_tag(65.0), "65");
        assert_eq!(age_tag(67.5), "67p5");
    }
}
