//! Analytic aging phantoms.
//!
//! A template is an ellipsoidal "brain" holding a pair of ventricles that grow
//! with age and a pair of hippocampi that shrink with age, both at
//! cohort-dependent rates. A subject is a template pushed through a
//! seed-determined smooth warp, optionally carrying a bright marker blob that
//! exists in no template.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{smooth_field, smooth_scalars};
use crate::grid::{warp, GridGeometry, ScalarKind, ScalarVolume, VectorField};
use crate::lie::{exp, ExpConfig};

pub const LABEL_BACKGROUND: u32 = 0;
pub const LABEL_PARENCHYMA: u32 = 1;
pub const LABEL_VENTRICLES: u32 = 2;
pub const LABEL_HIPPOCAMPI: u32 = 3;
pub const LABEL_MARKER: u32 = 4;

/// Named label groups for regional volume errors.
pub fn regions() -> BTreeMap<String, Vec<u32>> {
    [("parenchyma", LABEL_PARENCHYMA), ("ventricles", LABEL_VENTRICLES), ("hippocampi", LABEL_HIPPOCAMPI)]
        .into_iter()
        .map(|(name, label)| (name.to_string(), vec![label]))
        .collect()
}

pub const PARENCHYMA_INTENSITY: f32 = 0.7;
pub const VENTRICLE_INTENSITY: f32 = 0.15;
pub const HIPPOCAMPUS_INTENSITY: f32 = 0.55;
pub const MARKER_INTENSITY: f32 = 0.9;

pub const MIN_AGE: f64 = 60.0;
pub const MAX_AGE: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "hc", alias = "HC")]
    Hc,
    #[serde(rename = "ad", alias = "AD")]
    Ad,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Hc => "hc",
            Cohort::Ad => "ad",
        }
    }

    /// Default ventricle semi-axis growth, voxels per year.
    pub fn ventricle_rate(self) -> f64 {
        match self {
            Cohort::Hc => 0.04,
            Cohort::Ad => 0.10,
        }
    }

    /// Default hippocampus radius shrinkage, voxels per year.
    pub fn hippocampus_rate(self) -> f64 {
        match self {
            Cohort::Hc => 0.01,
            Cohort::Ad => 0.03,
        }
    }
}

impl std::str::FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hc" => Ok(Cohort::Hc),
            "ad" => Ok(Cohort::Ad),
            other => Err(Error::InvalidArgument(format!("unknown cohort {other:?} (expected hc or ad)"))),
        }
    }
}

/// A subject-unique sphere, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Marker {
    /// A marker in the superior parenchyma, clear of ventricles and hippocampi.
    pub fn default_for(geometry: &GridGeometry) -> Marker {
        let d = geometry.dims.map(|n| n as f64);
        let c = d.map(|n| (n - 1.0) / 2.0);
        Marker {
            center: [c[0] - 0.1 * d[0], c[1] + 0.25 * d[1], c[2] + 0.2 * d[2]],
            radius: 0.055 * d.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub geometry: GridGeometry,
    pub age: f64,
    pub cohort: Cohort,
    pub ventricle_rate: f64,
    pub hippocampus_rate: f64,
    pub seed: u64,
    pub marker: Option<Marker>,
}

impl PhantomSpec {
    /// Cohort-default rates, seed 0, no marker.
    pub fn new(geometry: GridGeometry, age: f64, cohort: Cohort) -> PhantomSpec {
        PhantomSpec {
            geometry,
            age,
            cohort,
            ventricle_rate: cohort.ventricle_rate(),
            hippocampus_rate: cohort.hippocampus_rate(),
            seed: 0,
            marker: None,
        }
    }

    pub fn with_subject(mut self, seed: u64, marker: Option<Marker>) -> PhantomSpec {
        self.seed = seed;
        self.marker = marker;
        self
    }

    pub fn at_age(&self, age: f64) -> PhantomSpec {
        PhantomSpec { age, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.age >= MIN_AGE && self.age <= MAX_AGE) {
            return Err(Error::InvalidArgument(format!("phantom age {} outside [{MIN_AGE}, {MAX_AGE}]", self.age)));
        }
        if !(self.ventricle_rate >= 0.0 && self.hippocampus_rate >= 0.0) {
            return Err(Error::InvalidArgument("phantom rates must be non-negative".into()));
        }
        if self.cohort == Cohort::Ad && self.ventricle_rate < Cohort::Hc.ventricle_rate() {
            return Err(Error::InvalidArgument(format!(
                "AD ventricle rate {} is below the HC rate {}",
                self.ventricle_rate,
                Cohort::Hc.ventricle_rate()
            )));
        }
        if self.geometry.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidGeometry(format!(
                "phantom grids need at least 16 voxels per axis, got {:?}",
                self.geometry.dims
            )));
        }
        let layout = Layout::new(self);
        let d = self.geometry.dims.map(|n| n as f64);
        for a in 0..3 {
            if layout.brain.center[a] - layout.brain.axes[a] < 1.0
                || layout.brain.center[a] + layout.brain.axes[a] > d[a] - 2.0
            {
                return Err(Error::InvalidGeometry("phantom brain does not fit the grid".into()));
            }
        }
        if layout.hippocampi[0].axes[0] < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "hippocampus radius {:.2} collapses at age {}",
                layout.hippocampi[0].axes[0], self.age
            )));
        }
        for v in &layout.ventricles {
            if !layout.brain.contains_box(v) {
                return Err(Error::InvalidArgument(format!("ventricles outgrow the brain at age {}", self.age)));
            }
        }
        if let Some(m) = &self.marker {
            if !(m.radius > 0.0 && m.radius.is_finite() && m.center.iter().all(|c| c.is_finite())) {
                return Err(Error::InvalidArgument("marker needs a finite centre and positive radius".into()));
            }
            for a in 0..3 {
                if m.center[a] - m.radius < 0.0 || m.center[a] + m.radius > d[a] - 1.0 {
                    return Err(Error::InvalidGeometry("marker does not fit the grid".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Approximate signed distance (voxels) to the surface, negative inside.
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let rho = self.rho(p);
        if rho < 1e-9 {
            return -self.axes.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        let grad =
            (0..3).map(|a| ((p[a] - self.center[a]) / (self.axes[a] * self.axes[a])).powi(2)).sum::<f64>().sqrt() / rho;
        (rho - 1.0) / grad
    }

    /// Partial-volume coverage of the voxel centred at `p`.
    fn coverage(&self, p: [f64; 3]) -> f64 {
        (0.5 - self.signed_distance(p)).clamp(0.0, 1.0)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.rho(p) <= 1.0
    }

    fn contains_box(&self, other: &Ellipsoid) -> bool {
        let mut corners_inside = true;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let s = [sx, sy, sz];
                    let p = [0, 1, 2].map(|a| other.center[a] + s[a] * other.axes[a]);
                    corners_inside &= self.contains(p);
                }
            }
        }
        corners_inside
    }

    fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.axes[0] * self.axes[1] * self.axes[2]
    }
}

/// Structure placement for one spec, proportional to the grid.
struct Layout {
    brain: Ellipsoid,
    ventricles: [Ellipsoid; 2],
    hippocampi: [Ellipsoid; 2],
}

impl Layout {
    fn new(spec: &PhantomSpec) -> Layout {
        let d = spec.geometry.dims.map(|n| n as f64);
        let c = d.map(|n| (n - 1.0) / 2.0);
        let years = spec.age - MIN_AGE;
        let grow = spec.ventricle_rate * years;
        let shrink = spec.hippocampus_rate * years;
        let brain = Ellipsoid { center: c, axes: [0.38 * d[0], 0.42 * d[1], 0.36 * d[2]] };
        let ventricle = |side: f64| Ellipsoid {
            center: [c[0] + side * 0.08 * d[0], c[1], c[2] + 0.02 * d[2]],
            axes: [0.055 * d[0] + grow, 0.14 * d[1] + grow, 0.08 * d[2] + grow],
        };
        let r = 0.09 * d.iter().cloned().fold(f64::INFINITY, f64::min) - shrink;
        let hippocampus = |side: f64| Ellipsoid {
            center: [c[0] + side * 0.22 * d[0], c[1] - 0.05 * d[1], c[2] - 0.13 * d[2]],
            axes: [r, r, r],
        };
        Layout {
            brain,
            ventricles: [ventricle(-1.0), ventricle(1.0)],
            hippocampi: [hippocampus(-1.0), hippocampus(1.0)],
        }
    }
}

/// Analytic label volumes (voxel counts) of a template: ventricle pair and
/// hippocampus pair. Assumes the pair members do not overlap.
pub fn analytic_structure_volumes(spec: &PhantomSpec) -> (f64, f64) {
    let layout = Layout::new(spec);
    (layout.ventricles.iter().map(Ellipsoid::volume).sum(), layout.hippocampi.iter().map(Ellipsoid::volume).sum())
}

/// Blur applied to template intensities.
const TEMPLATE_BLUR_SIGMA: f64 = 1.0;

/// Age- and cohort-specific template `(intensity, labels)`. The seed and
/// marker of `spec` are ignored.
pub fn make_template(spec: &PhantomSpec) -> Result<(ScalarVolume, ScalarVolume)> {
    spec.validate()?;
    let g = spec.geometry;
    let layout = Layout::new(spec);
    let raw: Vec<f32> = g.par_map(|c| {
        let p = c.map(|x| x as f64);
        let mut value = PARENCHYMA_INTENSITY as f64 * layout.brain.coverage(p);
        for v in &layout.ventricles {
            let cov = v.coverage(p);
            value = value * (1.0 - cov) + VENTRICLE_INTENSITY as f64 * cov;
        }
        for h in &layout.hippocampi {
            let cov = h.coverage(p);
            value = value * (1.0 - cov) + HIPPOCAMPUS_INTENSITY as f64 * cov;
        }
        value as f32
    });
    let intensity = ScalarVolume {
        geometry: g,
        values: smooth_scalars(&raw, &g, TEMPLATE_BLUR_SIGMA),
        kind: ScalarKind::Intensity,
    };
    let labels = ScalarVolume::from_fn(g, ScalarKind::Labels, |c| {
        let p = c.map(|x| x as f64);
        let label = if layout.hippocampi.iter().any(|h| h.contains(p)) {
            LABEL_HIPPOCAMPI
        } else if layout.ventricles.iter().any(|v| v.contains(p)) {
            LABEL_VENTRICLES
        } else if layout.brain.contains(p) {
            LABEL_PARENCHYMA
        } else {
            LABEL_BACKGROUND
        };
        label as f32
    });
    Ok((intensity, labels))
}

/// Smoothing scale and amplitude of a subject's individual warp.
const SUBJECT_WARP_SIGMA_FRACTION: f64 = 0.12;
pub const SUBJECT_WARP_MAX: f64 = 2.0;

/// The SVF that individualises a subject: seeded, smooth, max norm 2 voxels.
pub fn subject_svf(geometry: &GridGeometry, seed: u64) -> VectorField {
    let min_dim = geometry.dims.iter().cloned().min().unwrap_or(2) as f64;
    smooth_random_field(geometry, seed, SUBJECT_WARP_SIGMA_FRACTION * min_dim, SUBJECT_WARP_MAX)
}

/// Individual subject `(intensity, labels)`: the template for `spec` warped by
/// [`subject_svf`] plus the marker blob (label [`LABEL_MARKER`]).
pub fn make_subject(spec: &PhantomSpec) -> Result<(ScalarVolume, ScalarVolume)> {
    let (template, template_labels) = make_template(spec)?;
    let g = spec.geometry;
    let disp = exp(&subject_svf(&g, spec.seed), &ExpConfig::default())?;
    let mut image = warp(&template, &disp)?;
    let mut labels = warp(&template_labels, &disp)?;
    if let Some(marker) = spec.marker {
        let ball = Ellipsoid { center: marker.center, axes: [marker.radius; 3] };
        let coverage: Vec<f32> = g.par_map(|c| ball.coverage(c.map(|x| x as f64)) as f32);
        let coverage = smooth_scalars(&coverage, &g, TEMPLATE_BLUR_SIGMA);
        for (value, cov) in image.values.iter_mut().zip(&coverage) {
            *value = *value * (1.0 - cov) + MARKER_INTENSITY * cov;
        }
        for (idx, label) in labels.values.iter_mut().enumerate() {
            if ball.contains(g.coords(idx).map(|x| x as f64)) {
                *label = LABEL_MARKER as f32;
            }
        }
    }
    Ok((image, labels))
}

/// Seeded white noise smoothed with a Gaussian of `sigma` voxels, rescaled
/// so its largest vector norm is `max_norm`. The noise is drawn on a grid
/// padded by `2·sigma` and cropped, so faces are as rough as the interior.
pub fn smooth_random_field(geometry: &GridGeometry, seed: u64, sigma: f64, max_norm: f64) -> VectorField {
    let pad = (2.0 * sigma).ceil().max(0.0) as usize;
    let padded = GridGeometry { dims: geometry.dims.map(|n| n + 2 * pad), ..*geometry };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<[f32; 3]> = (0..padded.len())
        .map(|_| [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)])
        .collect();
    let smooth = smooth_field(&VectorField { geometry: padded, vectors: noise }, sigma);
    let cropped = VectorField::from_fn(*geometry, |[i, j, k]| smooth.vectors[padded.index(i + pad, j + pad, k + pad)]);
    normalise(&cropped, max_norm)
}

/// [`smooth_random_field`] attenuated by a product-of-sines window that
/// vanishes on every face, so flows of the field never leave the grid.
pub fn tapered_random_field(geometry: &GridGeometry, seed: u64, sigma: f64, max_norm: f64) -> VectorField {
    let raw = smooth_random_field(geometry, seed, sigma, 1.0);
    let d = geometry.dims.map(|n| (n - 1) as f64);
    let windowed = VectorField::from_fn(*geometry, |c| {
        let w: f64 = (0..3).map(|a| (std::f64::consts::PI * c[a] as f64 / d[a]).sin()).product();
        raw.vectors[geometry.index(c[0], c[1], c[2])].map(|x| (x as f64 * w) as f32)
    });
    normalise(&windowed, max_norm)
}

fn normalise(field: &VectorField, max_norm: f64) -> VectorField {
    let current = field.max_norm();
    if current == 0.0 {
        return field.clone();
    }
    field.scaled(max_norm / current)
}
