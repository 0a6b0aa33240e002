//! Image similarity, label overlap and regional volume errors.

use std::collections::{BTreeMap, BTreeSet};

use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarVolume};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub nfn: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub dsc: BTreeMap<u32, f64>,
    pub regional_mae: BTreeMap<String, f64>,
}

/// Serialises as one flat object: `nfn`, `mae`, `psnr`, `ssim`, `ncc`,
/// `dsc.<label>`, `regional_mae.<region>`.
impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(5 + self.dsc.len() + self.regional_mae.len()))?;
        map.serialize_entry("nfn", &self.nfn)?;
        map.serialize_entry("mae", &self.mae)?;
        map.serialize_entry("psnr", &self.psnr)?;
        map.serialize_entry("ssim", &self.ssim)?;
        map.serialize_entry("ncc", &self.ncc)?;
        for (label, value) in &self.dsc {
            map.serialize_entry(&format!("dsc.{label}"), value)?;
        }
        for (region, value) in &self.regional_mae {
            map.serialize_entry(&format!("regional_mae.{region}"), value)?;
        }
        map.end()
    }
}

fn pairs<'a>(pred: &'a ScalarVolume, truth: &'a ScalarVolume) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.values.iter().zip(&truth.values).map(|(p, t)| (*p as f64, *t as f64))
}

pub fn mae(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "mae")?;
    Ok(pairs(pred, truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.values.len() as f64)
}

fn mse(pred: &ScalarVolume, truth: &ScalarVolume) -> f64 {
    pairs(pred, truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.values.len() as f64
}

/// `‖pred − truth‖_F / ‖truth‖_F`; 0 when both are zero, infinite when only
/// the truth is.
pub fn nfn(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "nfn")?;
    let diff = pairs(pred, truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>().sqrt();
    let norm = truth.values.iter().map(|&t| (t as f64).powi(2)).sum::<f64>().sqrt();
    Ok(match (diff == 0.0, norm == 0.0) {
        (true, _) => 0.0,
        (false, true) => f64::INFINITY,
        (false, false) => diff / norm,
    })
}

/// Peak signal-to-noise ratio for dynamic range 1, capped at 99 dB.
pub fn psnr(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "psnr")?;
    let m = mse(pred, truth);
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// Global Pearson correlation. With a constant input it is 1 for identical
/// volumes and 0 otherwise.
pub fn ncc(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "ncc")?;
    let n = pred.values.len() as f64;
    let (mp, mt) = pairs(pred, truth).fold((0.0, 0.0), |(a, b), (p, t)| (a + p, b + t));
    let (mp, mt) = (mp / n, mt / n);
    let (mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0);
    for (p, t) in pairs(pred, truth) {
        spp += (p - mp) * (p - mp);
        stt += (t - mt) * (t - mt);
        spt += (p - mp) * (t - mt);
    }
    if spp == 0.0 || stt == 0.0 {
        return Ok(if pred.values == truth.values { 1.0 } else { 0.0 });
    }
    Ok(spt / (spp * stt).sqrt())
}

/// Sums over every `w`-long window along each axis (valid positions only).
fn valid_box_sum(data: &[f64], dims: [usize; 3], w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        let mut out_dims = cur_dims;
        out_dims[axis] = cur_dims[axis] + 1 - w;
        let g = GridGeometry { dims: out_dims, spacing: [1.0; 3], origin: [0.0; 3] };
        let stride = [1, cur_dims[0], cur_dims[0] * cur_dims[1]][axis];
        let src = &cur;
        let next: Vec<f64> = (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                let base = i + cur_dims[0] * (j + cur_dims[1] * k);
                (0..w).map(|t| src[base + t * stride]).sum()
            })
            .collect();
        cur = next;
        cur_dims = out_dims;
    }
    (cur, cur_dims)
}

/// Mean local SSIM over every valid 7³ window, dynamic range 1, with sample
/// (N−1) covariance normalisation.
pub fn ssim(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "ssim")?;
    let dims = pred.geometry.dims;
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::InvalidGeometry(format!("SSIM needs at least {SSIM_WINDOW} voxels per axis, got {dims:?}")));
    }
    let a: Vec<f64> = pred.values.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = truth.values.iter().map(|&x| x as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let w = SSIM_WINDOW;
    let (sa, _) = valid_box_sum(&a, dims, w);
    let (sb, _) = valid_box_sum(&b, dims, w);
    let (saa, _) = valid_box_sum(&prod(&a, &a), dims, w);
    let (sbb, _) = valid_box_sum(&prod(&b, &b), dims, w);
    let (sab, _) = valid_box_sum(&prod(&a, &b), dims, w);
    let np = (w * w * w) as f64;
    let cov_norm = np / (np - 1.0);
    let total: f64 = (0..sa.len())
        .map(|i| {
            let (ma, mb) = (sa[i] / np, sb[i] / np);
            let va = cov_norm * (saa[i] / np - ma * ma);
            let vb = cov_norm * (sbb[i] / np - mb * mb);
            let vab = cov_norm * (sab[i] / np - ma * mb);
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / sa.len() as f64)
}

/// MAE, NFN, PSNR, SSIM and NCC; label maps are left empty.
pub fn similarity_suite(pred: &ScalarVolume, truth: &ScalarVolume) -> Result<MetricReport> {
    Ok(MetricReport {
        nfn: nfn(pred, truth)?,
        mae: mae(pred, truth)?,
        psnr: psnr(pred, truth)?,
        ssim: ssim(pred, truth)?,
        ncc: ncc(pred, truth)?,
        dsc: BTreeMap::new(),
        regional_mae: BTreeMap::new(),
    })
}

fn ensure_labels(volume: &ScalarVolume, what: &str) -> Result<()> {
    if volume.is_labels() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be a label volume")))
    }
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when the label is absent from both.
pub fn dice(pred: &ScalarVolume, truth: &ScalarVolume, label: u32) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry, "dice")?;
    ensure_labels(pred, "dice prediction")?;
    ensure_labels(truth, "dice truth")?;
    let l = label as f32;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (p, t) in pred.values.iter().zip(&truth.values) {
        let (in_p, in_t) = (*p == l, *t == l);
        na += in_p as usize;
        nb += in_t as usize;
        both += (in_p && in_t) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Nonzero labels present in either volume.
pub fn foreground_labels(a: &ScalarVolume, b: &ScalarVolume) -> BTreeSet<u32> {
    a.values.iter().chain(&b.values).filter(|&&v| v != 0.0).map(|&v| v as u32).collect()
}

fn region_volume(labels: &ScalarVolume, set: &BTreeSet<u32>) -> f64 {
    let count = labels.values.iter().filter(|&&v| set.contains(&(v as u32))).count();
    count as f64 * labels.geometry.voxel_volume()
}

/// Per region, the absolute difference of its share of whole-brain volume
/// (all nonzero labels) between truth and prediction, in percent.
pub fn regional_volume_mae(
    pred: &ScalarVolume,
    truth: &ScalarVolume,
    regions: &BTreeMap<String, Vec<u32>>,
) -> Result<BTreeMap<String, f64>> {
    pred.geometry.ensure_same(&truth.geometry, "regional volume MAE")?;
    ensure_labels(pred, "regional prediction")?;
    ensure_labels(truth, "regional truth")?;
    let brain = |v: &ScalarVolume| v.values.iter().filter(|&&x| x != 0.0).count() as f64 * v.geometry.voxel_volume();
    let (wb_pred, wb_truth) = (brain(pred), brain(truth));
    if wb_pred == 0.0 || wb_truth == 0.0 {
        return Err(Error::InvalidArgument("regional volume MAE needs a non-empty whole brain in both volumes".into()));
    }
    Ok(regions
        .iter()
        .map(|(name, labels)| {
            let set: BTreeSet<u32> = labels.iter().copied().collect();
            let share_truth = region_volume(truth, &set) / wb_truth;
            let share_pred = region_volume(pred, &set) / wb_pred;
            (name.clone(), (share_truth - share_pred).abs() * 100.0)
        })
        .collect())
}

/// Full report: the similarity suite plus, when label volumes are given,
/// Dice for every foreground label and the regional volume errors.
pub fn evaluate(
    pred: &ScalarVolume,
    truth: &ScalarVolume,
    labels: Option<(&ScalarVolume, &ScalarVolume)>,
    regions: &BTreeMap<String, Vec<u32>>,
) -> Result<MetricReport> {
    let mut report = similarity_suite(pred, truth)?;
    if let Some((pl, tl)) = labels {
        pred.geometry.ensure_same(&pl.geometry, "prediction image vs labels")?;
        for label in foreground_labels(pl, tl) {
            report.dsc.insert(label, dice(pl, tl, label)?);
        }
        if !regions.is_empty() {
            report.regional_mae = regional_volume_mae(pl, tl, regions)?;
        }
    }
    Ok(report)
}
