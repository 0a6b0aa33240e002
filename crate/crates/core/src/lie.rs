//! Lie-group machinery for stationary velocity fields.
//!
//! An SVF `v` is a Lie-algebra element; its group exponential is the
//! diffeomorphism obtained by flowing along `v` for unit time. Group elements
//! are carried as displacement fields `u` with `φ = Id + u`, and composition
//! follows the pull-back convention `(u1 ∘ u2)(x) = u2(x) + u1(x + u2(x))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{field_jacobian, sample_vector, VectorField};

/// Scaling-and-squaring parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpConfig {
    /// Lower bound on the number of squarings.
    pub min_scaling_steps: u32,
    /// Target largest vector norm (voxels) of `v / 2^N`; at most 0.5.
    pub max_step_displacement: f64,
}

impl Default for ExpConfig {
    fn default() -> Self {
        ExpConfig { min_scaling_steps: 8, max_step_displacement: 0.5 }
    }
}

impl ExpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step_displacement > 0.0 && self.max_step_displacement <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "max_step_displacement must lie in (0, 0.5], got {}",
                self.max_step_displacement
            )));
        }
        if self.min_scaling_steps > 30 {
            return Err(Error::InvalidArgument(format!(
                "min_scaling_steps {} is unreasonably large",
                self.min_scaling_steps
            )));
        }
        Ok(())
    }

    /// Number of squarings used for a field whose largest norm is `max_norm`.
    pub fn squarings(&self, max_norm: f64) -> u32 {
        let needed = if max_norm > self.max_step_displacement {
            (max_norm / self.max_step_displacement).log2().ceil() as u32
        } else {
            0
        };
        needed.max(self.min_scaling_steps)
    }
}

/// Displacement of `(Id + u1) ∘ (Id + u2)`.
pub fn compose(u1: &VectorField, u2: &VectorField) -> Result<VectorField> {
    u1.geometry.ensure_same(&u2.geometry, "displacement composition")?;
    let g = u2.geometry;
    Ok(VectorField::from_fn(g, |[i, j, k]| {
        let d = u2.vectors[g.index(i, j, k)];
        let p = [i as f64 + d[0] as f64, j as f64 + d[1] as f64, k as f64 + d[2] as f64];
        let s = sample_vector(u1, p);
        [(d[0] as f64 + s[0]) as f32, (d[1] as f64 + s[1]) as f32, (d[2] as f64 + s[2]) as f32]
    }))
}

/// Group exponential by scaling and squaring; returns the displacement of `exp(v)`.
pub fn exp(v: &VectorField, cfg: &ExpConfig) -> Result<VectorField> {
    cfg.validate()?;
    v.ensure_finite("SVF passed to exp")?;
    let n = cfg.squarings(v.max_norm());
    let mut u = v.scaled(0.5f64.powi(n as i32));
    for _ in 0..n {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Reference integrator for `dφ/dt = v(φ)`: classical RK4 from every voxel
/// centre, returning `φ_t − Id`.
pub fn flow_rk4(v: &VectorField, t: f64, steps: usize) -> Result<VectorField> {
    if steps == 0 {
        return Err(Error::InvalidArgument("flow_rk4 needs at least one step".into()));
    }
    let h = t / steps as f64;
    Ok(VectorField::from_fn(v.geometry, |c| {
        let x0 = c.map(|x| x as f64);
        let mut x = x0;
        let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        for _ in 0..steps {
            let k1 = sample_vector(v, x);
            let k2 = sample_vector(v, add(x, k1, 0.5 * h));
            let k3 = sample_vector(v, add(x, k2, 0.5 * h));
            let k4 = sample_vector(v, add(x, k3, h));
            for a in 0..3 {
                x[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            }
        }
        [0, 1, 2].map(|a| (x[a] - x0[a]) as f32)
    }))
}

/// Lie bracket of vector fields, `[v, u] = Jv·u − Ju·v`.
///
/// For linear fields `v = Vx`, `u = Ux` this yields `(VU − UV)x`, which is the
/// sign for which `v + u + ½[v, u]` approximates `log(exp(v) ∘ exp(u))`.
pub fn bracket(v: &VectorField, u: &VectorField) -> Result<VectorField> {
    v.geometry.ensure_same(&u.geometry, "Lie bracket")?;
    let g = v.geometry;
    Ok(VectorField::from_fn(g, |c| {
        let idx = g.index(c[0], c[1], c[2]);
        let jv = field_jacobian(v, c);
        let ju = field_jacobian(u, c);
        let vv = v.vectors[idx].map(|x| x as f64);
        let uu = u.vectors[idx].map(|x| x as f64);
        [0, 1, 2].map(|r| {
            let a = jv[r][0] * uu[0] + jv[r][1] * uu[1] + jv[r][2] * uu[2];
            let b = ju[r][0] * vv[0] + ju[r][1] * vv[1] + ju[r][2] * vv[2];
            (a - b) as f32
        })
    }))
}

/// Truncation order of the Baker–Campbell–Hausdorff series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BchOrder {
    /// `v + u + ½[v,u]`
    #[serde(rename = "1")]
    First,
    /// adds `(1/12)([v,[v,u]] + [u,[u,v]])`
    #[serde(rename = "2")]
    Second,
}

impl TryFrom<u8> for BchOrder {
    type Error = Error;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            1 => Ok(BchOrder::First),
            2 => Ok(BchOrder::Second),
            other => Err(Error::InvalidArgument(format!("BCH order must be 1 or 2, got {other}"))),
        }
    }
}

/// Truncated BCH approximation of `log(exp(v) ∘ exp(u))`.
pub fn bch(v: &VectorField, u: &VectorField, order: BchOrder) -> Result<VectorField> {
    v.geometry.ensure_same(&u.geometry, "BCH")?;
    let vu = bracket(v, u)?;
    let mut out = v.zip_with(u, |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])?;
    out = out.zip_with(&vu, |a, b| [0, 1, 2].map(|c| (a[c] as f64 + 0.5 * b[c] as f64) as f32))?;
    if order == BchOrder::Second {
        let v_vu = bracket(v, &vu)?;
        // [u,[u,v]] = [u, -[v,u]] = -[u, vu]
        let u_uv = bracket(u, &vu)?.neg();
        out = out.zip_with(&v_vu.add(&u_uv)?, |a, b| [0, 1, 2].map(|c| (a[c] as f64 + b[c] as f64 / 12.0) as f32))?;
    }
    Ok(out)
}

/// Fixed-point inverse of a displacement: iterates `w ← −u ∘ (Id + w)`.
///
/// For fields generated by an SVF, `exp(−v)` is the better inverse; this is
/// the generic fallback. Convergence is not checked here.
pub fn invert_displacement(u: &VectorField, iterations: usize) -> Result<VectorField> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("invert_displacement needs at least one iteration".into()));
    }
    let g = u.geometry;
    let mut w = VectorField::zeros(g);
    for _ in 0..iterations {
        w = VectorField::from_fn(g, |[i, j, k]| {
            let d = w.vectors[g.index(i, j, k)];
            let p = [i as f64 + d[0] as f64, j as f64 + d[1] as f64, k as f64 + d[2] as f64];
            sample_vector(u, p).map(|x| -x as f32)
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::with_dims([n, n, n]).unwrap()
    }

    fn linear(g: GridGeometry, m: [[f64; 3]; 3], center: f64) -> VectorField {
        VectorField::from_fn(g, |c| {
            let x = c.map(|v| v as f64 - center);
            [0, 1, 2].map(|r| (m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2]) as f32)
        })
    }

    #[test]
    fn squaring_count() {
        let cfg = ExpConfig { min_scaling_steps: 0, max_step_displacement: 0.5 };
        assert_eq!(cfg.squarings(0.0), 0);
        assert_eq!(cfg.squarings(0.5), 0);
        assert_eq!(cfg.squarings(0.6), 1);
        assert_eq!(cfg.squarings(5.0), 4);
        assert_eq!(ExpConfig::default().squarings(5.0), 8);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ExpConfig { min_scaling_steps: 0, max_step_displacement: 0.75 };
        assert!(exp(&VectorField::zeros(geom(4)), &cfg).is_err());
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let u = exp(&VectorField::zeros(geom(6)), &ExpConfig::default()).unwrap();
        assert!(u.vectors.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn exp_of_constant_is_translation() {
        let c = [1.25, -0.5, 3.0];
        let u = exp(&VectorField::constant(geom(6), c), &ExpConfig::default()).unwrap();
        assert!(u.vectors.iter().all(|v| *v == c));
    }

    #[test]
    fn exp_rejects_non_finite() {
        let mut v = VectorField::zeros(geom(4));
        v.vectors[3][1] = f32::NAN;
        assert!(matches!(exp(&v, &ExpConfig::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn flow_of_zero_and_constant() {
        let g = geom(6);
        let z = flow_rk4(&VectorField::zeros(g), 2.5, 7).unwrap();
        assert!(z.vectors.iter().all(|v| *v == [0.0; 3]));
        let c = flow_rk4(&VectorField::constant(g, [0.5, 1.0, -0.25]), 1.0, 8).unwrap();
        for v in &c.vectors {
            for (a, b) in v.iter().zip([0.5, 1.0, -0.25]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(flow_rk4(&VectorField::zeros(g), 1.0, 0).is_err());
    }

    #[test]
    fn bracket_of_constants_vanishes() {
        let g = geom(5);
        let b =
            bracket(&VectorField::constant(g, [1.0, 2.0, 3.0]), &VectorField::constant(g, [-1.0, 0.5, 0.0])).unwrap();
        assert!(b.vectors.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn bracket_is_antisymmetric_bitwise() {
        let g = geom(8);
        let v = VectorField::from_fn(g, |[i, j, k]| [(i as f32 * 0.3).sin(), (j * k) as f32 * 0.01, 0.2 * k as f32]);
        let u = VectorField::from_fn(g, |[i, j, k]| [(j as f32 * 0.2).cos(), 0.1 * i as f32, (k as f32 * 0.4).sin()]);
        let a = bracket(&v, &u).unwrap();
        let b = bracket(&u, &v).unwrap();
        assert_eq!(a, b.neg());
    }

    #[test]
    fn bracket_of_linear_fields_is_commutator() {
        let g = geom(9);
        let vm = [[0.0, 0.05, -0.02], [0.01, 0.03, 0.04], [-0.03, 0.0, 0.02]];
        let um = [[0.02, -0.01, 0.0], [0.04, 0.0, -0.05], [0.01, 0.03, -0.02]];
        let mut comm = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                comm[r][c] = (0..3).map(|k| vm[r][k] * um[k][c] - um[r][k] * vm[k][c]).sum();
            }
        }
        let b = bracket(&linear(g, vm, 4.0), &linear(g, um, 4.0)).unwrap();
        let expect = linear(g, comm, 4.0);
        assert!(b.max_diff_interior(&expect, 0).unwrap() < 1e-6);
    }

    #[test]
    fn bracket_matches_fd_oracle() {
        let g = geom(16);
        let v = VectorField::from_fn(g, |[i, j, k]| {
            let (x, y, z) = (i as f32, j as f32, k as f32);
            [(0.3 * y).sin(), (0.2 * x + 0.1 * z).cos(), 0.5 * (0.15 * x * 0.5 + 0.2 * y).sin()]
        });
        let u = VectorField::from_fn(g, |[i, j, k]| {
            let (x, y, z) = (i as f32, j as f32, k as f32);
            [0.4 * (0.25 * z).cos(), 0.3 * (0.2 * x).sin(), (0.1 * y + 0.3 * z).sin()]
        });
        let b = bracket(&v, &u).unwrap();
        for k in 1..15 {
            for j in 1..15 {
                for i in 1..15 {
                    let d = |f: &VectorField, r: usize, axis: usize| {
                        let mut hi = [i, j, k];
                        let mut lo = [i, j, k];
                        hi[axis] += 1;
                        lo[axis] -= 1;
                        (f.at(hi[0], hi[1], hi[2])[r] as f64 - f.at(lo[0], lo[1], lo[2])[r] as f64) / 2.0
                    };
                    let vv = v.at(i, j, k);
                    let uu = u.at(i, j, k);
                    for r in 0..3 {
                        let mut e = 0.0;
                        for a in 0..3 {
                            e += d(&v, r, a) * uu[a] as f64 - d(&u, r, a) * vv[a] as f64;
                        }
                        assert!((b.at(i, j, k)[r] as f64 - e).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn bch_with_zero_returns_v() {
        let g = geom(6);
        let v = VectorField::from_fn(g, |[i, j, k]| [(i as f32 * 0.5).sin(), j as f32 * 0.1, -(k as f32) * 0.2]);
        for order in [BchOrder::First, BchOrder::Second] {
            assert_eq!(bch(&v, &VectorField::zeros(g), order).unwrap(), v);
        }
    }

    #[test]
    fn bch_of_constants_adds() {
        let g = geom(5);
        let out = bch(
            &VectorField::constant(g, [1.0, 0.5, 0.0]),
            &VectorField::constant(g, [0.25, 0.5, -1.0]),
            BchOrder::Second,
        )
        .unwrap();
        assert!(out.vectors.iter().all(|v| *v == [1.25, 1.0, -1.0]));
    }

    #[test]
    fn bch_order_parse() {
        assert_eq!(BchOrder::try_from(1).unwrap(), BchOrder::First);
        assert_eq!(BchOrder::try_from(2).unwrap(), BchOrder::Second);
        assert!(BchOrder::try_from(3).is_err());
    }

    #[test]
    fn inverse_of_zero_and_constant() {
        let g = geom(5);
        let w = invert_displacement(&VectorField::zeros(g), 3).unwrap();
        assert!(w.vectors.iter().all(|v| *v == [0.0; 3]));
        let w = invert_displacement(&VectorField::constant(g, [0.5, -1.0, 2.0]), 1).unwrap();
        assert!(w.vectors.iter().all(|v| *v == [-0.5, 1.0, -2.0]));
    }

    #[test]
    fn compose_rejects_mismatch() {
        assert!(compose(&VectorField::zeros(geom(4)), &VectorField::zeros(geom(5))).is_err());
    }
}
