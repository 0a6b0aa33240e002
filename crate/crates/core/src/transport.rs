//! Parallel transport of a longitudinal SVF along an inter-subject SVF.
//!
//! The pole ladder approximates the conjugation
//! `exp(v/2) ∘ exp(u) ∘ exp(−v/2)` inside the Lie algebra with a second-order
//! BCH step, repeated `n` times on `v/(2n)` so that each rung stays small.

use crate::error::{Error, Result};
use crate::grid::{warp, ScalarVolume, VectorField};
use crate::lie::{bracket, compose, exp, ExpConfig};

/// Transported SVF together with the rung count that produced it.
#[derive(Debug, Clone)]
pub struct LadderOutput {
    pub svf: VectorField,
    pub steps: usize,
}

/// Rung count: `ceil(max‖v‖)` with a voxel size of one (fields are in voxel
/// units), at least one.
pub fn ladder_steps(v: &VectorField) -> usize {
    (v.max_norm().ceil() as usize).max(1)
}

/// Pole-ladder transport of `u` (template-to-template SVF) along `v`
/// (template-to-subject SVF). Returns an SVF; exponentiate it to obtain the
/// transported deformation.
pub fn pole_ladder(u: &VectorField, v: &VectorField) -> Result<VectorField> {
    pole_ladder_with_steps(u, v).map(|out| out.svf)
}

pub fn pole_ladder_with_steps(u: &VectorField, v: &VectorField) -> Result<LadderOutput> {
    u.geometry.ensure_same(&v.geometry, "pole ladder u vs v")?;
    u.ensure_finite("pole ladder input u")?;
    v.ensure_finite("pole ladder input v")?;
    let n = ladder_steps(v);
    let rung = v.scaled(1.0 / (2.0 * n as f64));
    let mut current = u.clone();
    for step in 1..=n {
        let first = bracket(&rung, &current)?;
        let second = bracket(&rung, &first)?;
        let mut next = current.zip_with(&first, |a, b| [0, 1, 2].map(|c| (a[c] as f64 + b[c] as f64) as f32))?;
        next = next.zip_with(&second, |a, b| [0, 1, 2].map(|c| (a[c] as f64 + 0.5 * b[c] as f64) as f32))?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "pole ladder diverged at rung {step} of {n}; field magnitudes are outside the stable range"
            )));
        }
        current = next;
    }
    Ok(LadderOutput { svf: current, steps: n })
}

/// Direct evaluation of `exp(v/2) ∘ exp(u) ∘ exp(−v/2)` as a displacement.
pub fn conjugation_oracle(u: &VectorField, v: &VectorField, cfg: &ExpConfig) -> Result<VectorField> {
    u.geometry.ensure_same(&v.geometry, "conjugation u vs v")?;
    let half = v.scaled(0.5);
    let forward = exp(&half, cfg)?;
    let backward = exp(&half.neg(), cfg)?;
    let inner = exp(u, cfg)?;
    compose(&compose(&forward, &inner)?, &backward)
}

/// Half-space images and their disagreement.
#[derive(Debug, Clone)]
pub struct HalfSpace {
    /// `T0` warped half-way toward the subject.
    pub from_template: ScalarVolume,
    /// The subject warped half-way back toward the template.
    pub from_subject: ScalarVolume,
    /// Mean absolute intensity difference between the two.
    pub mean_abs_difference: f64,
}

/// Checks that `v` behaves like a geodesic from `template` to `subject`:
/// `warp(T0, exp(v/2))` and `warp(I0, exp(−v/2))` should agree.
pub fn half_space_check(
    template: &ScalarVolume,
    subject: &ScalarVolume,
    v: &VectorField,
    cfg: &ExpConfig,
) -> Result<HalfSpace> {
    template.geometry.ensure_same(&subject.geometry, "half-space template vs subject")?;
    template.geometry.ensure_same(&v.geometry, "half-space image vs SVF")?;
    let half = v.scaled(0.5);
    let from_template = warp(template, &exp(&half, cfg)?)?;
    let from_subject = warp(subject, &exp(&half.neg(), cfg)?)?;
    let total: f64 =
        from_template.values.iter().zip(&from_subject.values).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    let mean_abs_difference = total / from_template.values.len() as f64;
    Ok(HalfSpace { from_template, from_subject, mean_abs_difference })
}
