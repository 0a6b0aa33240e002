//! Individualised longitudinal synthesis.
//!
//! Cohort-level template changes are extracted as SVFs, parallel transported
//! into the subject's space along the template-to-subject SVF, integrated
//! and applied to the subject's scan.
//!
//! Conventions (pull-back throughout): `v` satisfies
//! `warp(T0, exp(v)) ≈ subject` and a template change `u` satisfies
//! `warp(T0, exp(u)) ≈ Ti`. The predicted scan is `warp(subject, exp(û))`
//! with `û = pole_ladder(u, −v)`, which is the pull-back form of conjugating
//! the template change by the half-way deformation toward the subject.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{min_jacobian_determinant, warp, GridGeometry, ScalarVolume, VectorField};
use crate::io;
use crate::lie::{bch, exp, BchOrder};
use crate::metrics::{evaluate, MetricReport};
use crate::phantom::{make_template, Cohort, PhantomSpec};
use crate::register::{register, RegistrationConfig};
use crate::transport::pole_ladder_with_steps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub age: f64,
    pub cohort: Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSchedule {
    pub baseline_age: f64,
    pub baseline_cohort: Cohort,
    pub targets: Vec<Target>,
}

/// One stretch of a trajectory spent in a single cohort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub cohort: Cohort,
    pub from_age: f64,
    pub to_age: f64,
}

impl Segment {
    fn key(&self) -> (Cohort, u64, u64) {
        (self.cohort, self.from_age.to_bits(), self.to_age.to_bits())
    }
}

impl CohortSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidArgument("schedule has no targets".into()));
        }
        if !self.baseline_age.is_finite() || self.targets.iter().any(|t| !t.age.is_finite()) {
            return Err(Error::InvalidArgument("schedule ages must be finite".into()));
        }
        Ok(())
    }

    /// Indices of targets whose cohort differs from the previous step.
    pub fn transitions(&self) -> Vec<usize> {
        let mut previous = self.baseline_cohort;
        let mut out = Vec::new();
        for (i, t) in self.targets.iter().enumerate() {
            if t.cohort != previous {
                out.push(i);
            }
            previous = t.cohort;
        }
        out
    }

    /// Cohort segments from the baseline to target `index`. A cohort change
    /// at target `j` takes effect from the age of target `j − 1` (or the
    /// baseline). Zero-length segments are dropped.
    pub fn segments(&self, index: usize) -> Vec<Segment> {
        let mut segments = Vec::new();
        let mut cohort = self.baseline_cohort;
        let mut start = self.baseline_age;
        let mut last_age = self.baseline_age;
        for t in &self.targets[..=index] {
            if t.cohort != cohort {
                segments.push(Segment { cohort, from_age: start, to_age: last_age });
                cohort = t.cohort;
                start = last_age;
            }
            last_age = t.age;
        }
        segments.push(Segment { cohort, from_age: start, to_age: self.targets[index].age });
        segments.retain(|s| s.from_age != s.to_age);
        segments
    }
}

/// Source of age- and cohort-specific templates.
pub trait TemplateProvider: Sync {
    fn geometry(&self) -> GridGeometry;
    /// Template intensity and, when available, its label map.
    fn template(&self, age: f64, cohort: Cohort) -> Result<(ScalarVolume, Option<ScalarVolume>)>;
}

/// Per-year radius change of the phantom structures, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub ventricle: f64,
    pub hippocampus: f64,
}

/// Rates of [`PhantomTemplates::benchmark`].
pub const BENCHMARK_HC_RATES: Rates = Rates { ventricle: 0.15, hippocampus: 0.10 };
pub const BENCHMARK_AD_RATES: Rates = Rates { ventricle: 0.30, hippocampus: 0.15 };

/// Analytic phantom templates on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTemplates {
    pub geometry: GridGeometry,
    /// Cohort defaults apply when a cohort is absent.
    #[serde(default)]
    pub rates: BTreeMap<Cohort, Rates>,
}

impl PhantomTemplates {
    pub fn new(geometry: GridGeometry) -> Self {
        PhantomTemplates { geometry, rates: BTreeMap::new() }
    }

    /// Faster atrophy than the cohort defaults, so that five-year steps move
    /// structure boundaries by more than half a voxel on a 64³ grid and show
    /// up in nearest-neighbour label maps.
    pub fn benchmark(geometry: GridGeometry) -> Self {
        let mut rates = BTreeMap::new();
        rates.insert(Cohort::Hc, BENCHMARK_HC_RATES);
        rates.insert(Cohort::Ad, BENCHMARK_AD_RATES);
        PhantomTemplates { geometry, rates }
    }

    pub fn spec(&self, age: f64, cohort: Cohort) -> PhantomSpec {
        let mut spec = PhantomSpec::new(self.geometry, age, cohort);
        if let Some(rates) = self.rates.get(&cohort) {
            spec.ventricle_rate = rates.ventricle;
            spec.hippocampus_rate = rates.hippocampus;
        }
        spec
    }
}

impl TemplateProvider for PhantomTemplates {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn template(&self, age: f64, cohort: Cohort) -> Result<(ScalarVolume, Option<ScalarVolume>)> {
        let (image, labels) = make_template(&self.spec(age, cohort))?;
        Ok((image, Some(labels)))
    }
}

/// One entry of a template directory's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateEntry {
    pub age: f64,
    pub cohort: Cohort,
    pub image: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateIndex {
    pub templates: Vec<TemplateEntry>,
}

/// Precomputed templates listed in `<dir>/index.json`; paths are relative to
/// the directory. Ages must match exactly.
#[derive(Debug, Clone)]
pub struct DirectoryTemplates {
    dir: PathBuf,
    index: TemplateIndex,
    geometry: GridGeometry,
}

impl DirectoryTemplates {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index_path = dir.join("index.json");
        let text = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: TemplateIndex = serde_json::from_slice(&text)?;
        let first = index
            .templates
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{} lists no templates", index_path.display())))?;
        let geometry = *io::read_volume(dir.join(&first.image))?.geometry();
        Ok(DirectoryTemplates { dir, index, geometry })
    }
}

impl TemplateProvider for DirectoryTemplates {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn template(&self, age: f64, cohort: Cohort) -> Result<(ScalarVolume, Option<ScalarVolume>)> {
        let entry = self.index.templates.iter().find(|e| e.cohort == cohort && (e.age - age).abs() < 1e-6).ok_or_else(
            || {
                Error::InvalidArgument(format!(
                    "no {} template at age {age} in {}",
                    cohort.as_str(),
                    self.dir.display()
                ))
            },
        )?;
        let image = io::read_scalar(self.dir.join(&entry.image))?;
        image.geometry.ensure_same(&self.geometry, "template grid")?;
        let labels = match &entry.labels {
            Some(path) => {
                let labels = io::read_scalar(self.dir.join(path))?;
                labels.geometry.ensure_same(&self.geometry, "template label grid")?;
                Some(labels)
            }
            None => None,
        };
        Ok((image, labels))
    }
}

#[derive(Debug, Clone)]
pub struct TargetResult {
    pub target: Target,
    pub image: ScalarVolume,
    pub labels: Option<ScalarVolume>,
    /// SVF whose exponential produced `displacement`.
    pub svf: VectorField,
    pub displacement: VectorField,
    pub min_jacobian: f64,
    /// Pole-ladder rungs; 0 when no transport took place.
    pub ladder_steps: usize,
    /// Set when the deformation folds (min Jacobian ≤ 0).
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Template-to-subject SVF.
    pub subject_svf: VectorField,
    pub targets: Vec<TargetResult>,
}

impl SynthesisResult {
    pub fn any_flagged(&self) -> bool {
        self.targets.iter().any(|t| t.flagged)
    }
}

/// Registers the baseline template to the subject.
fn subject_svf(
    subject: &ScalarVolume,
    schedule: &CohortSchedule,
    templates: &dyn TemplateProvider,
    cfg: &RegistrationConfig,
) -> Result<VectorField> {
    schedule.validate()?;
    cfg.validate()?;
    subject.geometry.ensure_same(&templates.geometry(), "subject vs template grid")?;
    let (template, _) = templates.template(schedule.baseline_age, schedule.baseline_cohort)?;
    log::info!("registering baseline template to subject");
    register(&template, subject, cfg)
}

/// Template-change SVFs for every target, sharing registrations between
/// targets that pass through the same segment.
fn template_changes(
    schedule: &CohortSchedule,
    templates: &dyn TemplateProvider,
    cfg: &RegistrationConfig,
) -> Result<Vec<VectorField>> {
    let geometry = templates.geometry();
    let mut cache: HashMap<(Cohort, u64, u64), VectorField> = HashMap::new();
    let mut out = Vec::with_capacity(schedule.targets.len());
    for index in 0..schedule.targets.len() {
        let mut total: Option<VectorField> = None;
        for segment in schedule.segments(index) {
            if !cache.contains_key(&segment.key()) {
                log::info!(
                    "registering {} template {} -> {}",
                    segment.cohort.as_str(),
                    segment.from_age,
                    segment.to_age
                );
                let (from, _) = templates.template(segment.from_age, segment.cohort)?;
                let (to, _) = templates.template(segment.to_age, segment.cohort)?;
                cache.insert(segment.key(), register(&from, &to, cfg)?);
            }
            let u = &cache[&segment.key()];
            total = Some(match total {
                None => u.clone(),
                Some(acc) => bch(&acc, u, BchOrder::Second)?,
            });
        }
        out.push(total.unwrap_or_else(|| VectorField::zeros(geometry)));
    }
    Ok(out)
}

fn finish(
    target: Target,
    image: &ScalarVolume,
    labels: Option<&ScalarVolume>,
    svf: VectorField,
    ladder_steps: usize,
    cfg: &RegistrationConfig,
) -> Result<TargetResult> {
    let displacement = exp(&svf, &cfg.exp)?;
    let min_jacobian = min_jacobian_determinant(&displacement);
    let flagged = !(min_jacobian > 0.0);
    if flagged {
        log::warn!("target age {} folds: min Jacobian {min_jacobian:.4}", target.age);
    }
    Ok(TargetResult {
        target,
        image: warp(image, &displacement)?,
        labels: labels.map(|l| warp(l, &displacement)).transpose()?,
        svf,
        displacement,
        min_jacobian,
        ladder_steps,
        flagged,
    })
}

/// Predicts the subject at every target of the schedule.
pub fn synthesize(
    subject: &ScalarVolume,
    subject_labels: Option<&ScalarVolume>,
    schedule: &CohortSchedule,
    templates: &dyn TemplateProvider,
    cfg: &RegistrationConfig,
) -> Result<SynthesisResult> {
    if let Some(labels) = subject_labels {
        labels.geometry.ensure_same(&subject.geometry, "subject image vs labels")?;
    }
    let v = subject_svf(subject, schedule, templates, cfg)?;
    let along = v.neg();
    let changes = template_changes(schedule, templates, cfg)?;
    let targets = schedule
        .targets
        .iter()
        .zip(changes)
        .map(|(target, u)| {
            let transported = pole_ladder_with_steps(&u, &along)?;
            finish(*target, subject, subject_labels, transported.svf, transported.steps, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesisResult { subject_svf: v, targets })
}

/// Ablation without parallel transport: each target template is brought
/// into the subject's space by the template-to-subject deformation, so the
/// prediction follows the cohort template and carries no individual
/// features beyond the subject's overall shape.
pub fn synthesize_no_pt(
    subject: &ScalarVolume,
    schedule: &CohortSchedule,
    templates: &dyn TemplateProvider,
    cfg: &RegistrationConfig,
) -> Result<SynthesisResult> {
    let v = subject_svf(subject, schedule, templates, cfg)?;
    let targets = schedule
        .targets
        .iter()
        .map(|target| {
            let (image, labels) = templates.template(target.age, target.cohort)?;
            finish(*target, &image, labels.as_ref(), v.clone(), 0, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesisResult { subject_svf: v, targets })
}

/// Metric reports of each target against its ground truth.
pub fn evaluate_against_truth(
    result: &SynthesisResult,
    truth_images: &[ScalarVolume],
    truth_labels: Option<&[ScalarVolume]>,
    regions: &BTreeMap<String, Vec<u32>>,
) -> Result<Vec<MetricReport>> {
    let n = result.targets.len();
    if truth_images.len() != n || truth_labels.is_some_and(|l| l.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "{n} targets but {} truth images{}",
            truth_images.len(),
            truth_labels.map(|l| format!(" and {} truth label maps", l.len())).unwrap_or_default()
        )));
    }
    result
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let labels = match (t.labels.as_ref(), truth_labels) {
                (Some(p), Some(truth)) => Some((p, &truth[i])),
                _ => None,
            };
            let regions = if labels.is_some() { regions.clone() } else { BTreeMap::new() };
            evaluate(&t.image, &truth_images[i], labels, &regions)
        })
        .collect()
}
