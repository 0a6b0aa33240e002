//! Multi-resolution log-demons registration producing stationary velocity
//! fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::smooth_field;
use crate::grid::{downsample_volume, gradient, upsample_field, warp, GridGeometry, ScalarVolume, VectorField};
use crate::lie::{bch, exp, BchOrder, ExpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    #[serde(rename = "ssd", alias = "SSD")]
    Ssd,
    #[serde(rename = "lncc", alias = "LNCC")]
    Lncc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Downsampling factors, coarse to fine, ending at 1.
    pub levels: Vec<usize>,
    pub iterations_per_level: usize,
    /// Gaussian smoothing of each update, voxels.
    pub fluid_sigma: f64,
    /// Gaussian smoothing of the accumulated SVF, voxels.
    pub diffusion_sigma: f64,
    /// Largest update magnitude per iteration, voxels.
    pub step_scale: f64,
    pub similarity: Similarity,
    pub lncc_window: usize,
    pub bch_order: BchOrder,
    pub exp: ExpConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: vec![4, 2, 1],
            iterations_per_level: 50,
            fluid_sigma: 2.0,
            diffusion_sigma: 1.5,
            step_scale: 0.5,
            similarity: Similarity::Ssd,
            lncc_window: 9,
            bch_order: BchOrder::First,
            exp: ExpConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.levels.is_empty() || *self.levels.last().unwrap() != 1 {
            return bad(format!("registration levels must end at 1, got {:?}", self.levels));
        }
        for pair in self.levels.windows(2) {
            if pair[0] <= pair[1] || pair[0] % pair[1] != 0 {
                return bad(format!(
                    "registration levels must strictly decrease, each dividing the previous; got {:?}",
                    self.levels
                ));
            }
        }
        if self.iterations_per_level == 0 {
            return bad("iterations_per_level must be positive".into());
        }
        if !(self.fluid_sigma >= 0.0 && self.diffusion_sigma >= 0.0) {
            return bad("smoothing sigmas must be non-negative".into());
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return bad(format!("step_scale must lie in (0, 1], got {}", self.step_scale));
        }
        if self.lncc_window == 0 || self.lncc_window.is_multiple_of(2) {
            return bad(format!("lncc_window must be odd and positive, got {}", self.lncc_window));
        }
        self.exp.validate()
    }
}

/// Similarity energies recorded at one pyramid level, one per iteration,
/// measured before that iteration's update (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub factor: usize,
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub svf: VectorField,
    pub trace: Vec<LevelTrace>,
}

/// SVF `v` such that `warp(moving, exp(v)) ≈ fixed`.
pub fn register(moving: &ScalarVolume, fixed: &ScalarVolume, cfg: &RegistrationConfig) -> Result<VectorField> {
    register_traced(moving, fixed, cfg).map(|r| r.svf)
}

pub fn register_traced(moving: &ScalarVolume, fixed: &ScalarVolume, cfg: &RegistrationConfig) -> Result<Registration> {
    cfg.validate()?;
    moving.geometry.ensure_same(&fixed.geometry, "registration moving vs fixed")?;
    for (name, img) in [("moving", moving), ("fixed", fixed)] {
        if img.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} image has non-finite intensities")));
        }
        if img.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            log::warn!("{name} image has intensities outside [0, 1]; registration proceeds");
        }
    }
    let geometry = fixed.geometry;
    let levels = usable_levels(&geometry, &cfg.levels);

    let mut v: Option<VectorField> = None;
    let mut previous = 0usize;
    let mut trace = Vec::with_capacity(levels.len());
    for &factor in &levels {
        let (m, f) = if factor == 1 {
            (moving.clone(), fixed.clone())
        } else {
            (downsample_volume(moving, factor)?, downsample_volume(fixed, factor)?)
        };
        let start = match v.take() {
            None => VectorField::zeros(f.geometry),
            Some(coarse) => upsample_field(&coarse, previous / factor)?,
        };
        let (field, energies) = run_level(&m, &f, start, cfg)?;
        log::debug!(
            "level {factor}: energy {:.6} -> {:.6}",
            energies.first().copied().unwrap_or(f64::NAN),
            energies.last().copied().unwrap_or(f64::NAN)
        );
        trace.push(LevelTrace { factor, energies });
        v = Some(field);
        previous = factor;
    }
    let svf = v.expect("at least the full-resolution level runs");
    svf.ensure_finite("registration output")?;
    Ok(Registration { svf, trace })
}

/// Levels whose factor divides the grid and leaves at least 4 voxels per axis.
fn usable_levels(geometry: &GridGeometry, levels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &f in levels {
        let fits = f == 1 || geometry.dims.iter().all(|&d| d % f == 0 && d / f >= 4);
        // later levels are upsampled from earlier ones by an integer ratio
        let chains = out.last().is_none_or(|&p| p % f == 0);
        if fits && chains {
            out.push(f);
        } else {
            log::warn!("skipping registration level {f} for grid {:?}", geometry.dims);
        }
    }
    out
}

fn run_level(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    mut v: VectorField,
    cfg: &RegistrationConfig,
) -> Result<(VectorField, Vec<f64>)> {
    let mut energies = Vec::with_capacity(cfg.iterations_per_level);
    for _ in 0..cfg.iterations_per_level {
        let warped = warp(moving, &exp(&v, &cfg.exp)?)?;
        let (energy, force) = match cfg.similarity {
            Similarity::Ssd => ssd_force(fixed, &warped),
            Similarity::Lncc => lncc_force(fixed, &warped, cfg.lncc_window),
        };
        energies.push(energy);
        let update = smooth_field(&clamp_norm(&force, cfg.step_scale), cfg.fluid_sigma);
        v = smooth_field(&bch(&v, &update, cfg.bch_order)?, cfg.diffusion_sigma);
        if !v.is_finite() {
            return Err(Error::NonFinite("registration diverged".into()));
        }
    }
    Ok((v, energies))
}

fn clamp_norm(field: &VectorField, limit: f64) -> VectorField {
    field.map(|d| {
        let n = ((d[0] as f64).powi(2) + (d[1] as f64).powi(2) + (d[2] as f64).powi(2)).sqrt();
        if n > limit {
            d.map(|x| (x as f64 * limit / n) as f32)
        } else {
            *d
        }
    })
}

/// Mean squared difference and the normalised demons force.
fn ssd_force(fixed: &ScalarVolume, warped: &ScalarVolume) -> (f64, VectorField) {
    let g = fixed.geometry;
    let grad = gradient(warped);
    let energy = fixed.values.iter().zip(&warped.values).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
        / g.len() as f64;
    let force = VectorField {
        geometry: g,
        vectors: g.par_map(|[i, j, k]| {
            let idx = g.index(i, j, k);
            let diff = fixed.values[idx] as f64 - warped.values[idx] as f64;
            let gw = grad.vectors[idx].map(|x| x as f64);
            let denom = gw[0] * gw[0] + gw[1] * gw[1] + gw[2] * gw[2] + diff * diff;
            if denom < 1e-12 {
                [0.0; 3]
            } else {
                gw.map(|x| (diff * x / denom) as f32)
            }
        }),
    };
    (energy, force)
}

/// Per-voxel means over a `window³` neighbourhood truncated at the faces.
fn box_mean(data: &[f64], geometry: &GridGeometry, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let dims = geometry.dims;
    let mut out = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let src = out;
        out = geometry.par_map(|c| {
            let base = geometry.index(c[0], c[1], c[2]) - c[axis] * stride;
            let pos = c[axis] as isize;
            let (lo, hi) = ((pos - r).max(0), (pos + r).min(n - 1));
            let mut acc = 0.0;
            for q in lo..=hi {
                acc += src[base + q as usize * stride];
            }
            acc / (hi - lo + 1) as f64
        });
    }
    out
}

const LNCC_EPS: f64 = 1e-5;

struct LocalStats {
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn local_stats(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> LocalStats {
    let g = a.geometry;
    let av: Vec<f64> = a.values.iter().map(|&x| x as f64).collect();
    let bv: Vec<f64> = b.values.iter().map(|&x| x as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mean_a = box_mean(&av, &g, window);
    let mean_b = box_mean(&bv, &g, window);
    let mean_aa = box_mean(&prod(&av, &av), &g, window);
    let mean_bb = box_mean(&prod(&bv, &bv), &g, window);
    let mean_ab = box_mean(&prod(&av, &bv), &g, window);
    let n = g.len();
    let var_a = (0..n).map(|i| (mean_aa[i] - mean_a[i] * mean_a[i]).max(0.0)).collect();
    let var_b = (0..n).map(|i| (mean_bb[i] - mean_b[i] * mean_b[i]).max(0.0)).collect();
    let cov = (0..n).map(|i| mean_ab[i] - mean_a[i] * mean_b[i]).collect();
    LocalStats { mean_a, mean_b, var_a, var_b, cov }
}

/// Mean squared local correlation coefficient over `window³` neighbourhoods
/// (truncated at the faces). Windows where either variance is below 1e-5
/// contribute 0.
pub fn lncc(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "lncc")?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("lncc window must be odd and positive, got {window}")));
    }
    let s = local_stats(a, b, window);
    let total: f64 = (0..a.values.len())
        .map(|i| {
            if s.var_a[i] < LNCC_EPS || s.var_b[i] < LNCC_EPS {
                0.0
            } else {
                s.cov[i] * s.cov[i] / (s.var_a[i] * s.var_b[i])
            }
        })
        .sum();
    Ok(total / a.values.len() as f64)
}

/// Negative LNCC and the ascent direction of the local correlation with
/// respect to the warped image, rescaled so its largest vector has norm 1.
fn lncc_force(fixed: &ScalarVolume, warped: &ScalarVolume, window: usize) -> (f64, VectorField) {
    let g = fixed.geometry;
    let s = local_stats(fixed, warped, window);
    let grad = gradient(warped);
    let mut cc_sum = 0.0;
    let raw: Vec<[f64; 3]> = (0..g.len())
        .map(|i| {
            let (va, vb) = (s.var_a[i], s.var_b[i]);
            if va < LNCC_EPS || vb < LNCC_EPS {
                return [0.0; 3];
            }
            let c = s.cov[i];
            cc_sum += c * c / (va * vb);
            let fa = fixed.values[i] as f64 - s.mean_a[i];
            let wb = warped.values[i] as f64 - s.mean_b[i];
            let scale = 2.0 * c / (va * vb) * (fa - c / vb * wb);
            grad.vectors[i].map(|x| scale * x as f64)
        })
        .collect();
    let peak = raw.iter().map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).fold(0.0f64, f64::max);
    let norm = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let force = VectorField { geometry: g, vectors: raw.iter().map(|d| d.map(|x| (x * norm) as f32)).collect() };
    (-cc_sum / g.len() as f64, force)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarKind;
    use crate::phantom::{make_template, Cohort, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(g: GridGeometry, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::intensity(g, (0..g.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn lncc_self_and_affine_are_one() {
        let g = GridGeometry::with_dims([10, 9, 8]).unwrap();
        let a = random_volume(g, 1);
        assert!((lncc(&a, &a, 3).unwrap() - 1.0).abs() < 1e-6);
        let b = ScalarVolume::intensity(g, a.values.iter().map(|x| 0.5 * x + 0.1).collect()).unwrap();
        assert!((lncc(&a, &b, 5).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lncc_matches_brute_force() {
        let g = GridGeometry::with_dims([5, 5, 5]).unwrap();
        let a = random_volume(g, 2);
        let b = random_volume(g, 3);
        let mut total = 0.0;
        for k in 0..5i32 {
            for j in 0..5i32 {
                for i in 0..5i32 {
                    let mut xs = Vec::new();
                    for dk in -1..=1 {
                        for dj in -1..=1 {
                            for di in -1..=1 {
                                let (x, y, z) = (i + di, j + dj, k + dk);
                                if (0..5).contains(&x) && (0..5).contains(&y) && (0..5).contains(&z) {
                                    let idx = g.index(x as usize, y as usize, z as usize);
                                    xs.push((a.values[idx] as f64, b.values[idx] as f64));
                                }
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let ma = xs.iter().map(|p| p.0).sum::<f64>() / n;
                    let mb = xs.iter().map(|p| p.1).sum::<f64>() / n;
                    let va = xs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                    let vb = xs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                    let c = xs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                    if va >= 1e-5 && vb >= 1e-5 {
                        total += c * c / (va * vb);
                    }
                }
            }
        }
        let expect = total / 125.0;
        assert!((lncc(&a, &b, 3).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn lncc_constant_patch_contributes_zero() {
        let g = GridGeometry::with_dims([6, 6, 6]).unwrap();
        let flat = ScalarVolume::intensity(g, vec![0.3; g.len()]).unwrap();
        assert_eq!(lncc(&flat, &random_volume(g, 4), 3).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = RegistrationConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            RegistrationConfig { levels: vec![2, 4, 1], ..ok.clone() },
            RegistrationConfig { levels: vec![4, 2], ..ok.clone() },
            RegistrationConfig { levels: vec![3, 2, 1], ..ok.clone() },
            RegistrationConfig { step_scale: 1.5, ..ok.clone() },
            RegistrationConfig { lncc_window: 4, ..ok.clone() },
            RegistrationConfig { iterations_per_level: 0, ..ok.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(Error::InvalidArgument(_))), "{broken:?}");
        }
    }

    #[test]
    fn config_parses_partial_json() {
        let cfg: RegistrationConfig =
            serde_json::from_str(r#"{"similarity": "LNCC", "iterations_per_level": 5}"#).unwrap();
        assert_eq!(cfg.similarity, Similarity::Lncc);
        assert_eq!(cfg.iterations_per_level, 5);
        assert_eq!(cfg.levels, vec![4, 2, 1]);
        assert!(serde_json::from_str::<RegistrationConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn aligned_images_give_near_zero_svf() {
        let g = GridGeometry::with_dims([32, 32, 32]).unwrap();
        let (t, _) = make_template(&PhantomSpec::new(g, 70.0, Cohort::Hc)).unwrap();
        let cfg = RegistrationConfig { iterations_per_level: 10, ..Default::default() };
        let v = register(&t, &t, &cfg).unwrap();
        assert!(v.max_norm() < 0.05);
    }

    #[test]
    fn skips_levels_that_do_not_divide() {
        let g = GridGeometry::with_dims([12, 10, 16]).unwrap();
        assert_eq!(usable_levels(&g, &[4, 2, 1]), vec![2, 1]);
        let g = GridGeometry::with_dims([8, 8, 8]).unwrap();
        assert_eq!(usable_levels(&g, &[4, 2, 1]), vec![2, 1]);
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let a = ScalarVolume::zeros(GridGeometry::with_dims([8, 8, 8]).unwrap(), ScalarKind::Intensity);
        let b = ScalarVolume::zeros(GridGeometry::with_dims([8, 8, 9]).unwrap(), ScalarKind::Intensity);
        assert!(register(&a, &b, &RegistrationConfig::default()).is_err());
    }
}
