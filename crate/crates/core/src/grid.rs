//! Grid-borne containers and the voxel-level machinery shared by every other
//! module: trilinear sampling, warping, finite differences and resampling.
//!
//! Data is stored x-fastest (`i + nx * (j + ny * k)`), the same order as a
//! NIfTI payload. Vectors are expressed in voxel units of their own grid.
//! Sampling and differentiation clamp to the boundary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Dimensions, voxel spacing (mm) and origin (mm) of a regular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        let geometry = GridGeometry { dims, spacing, origin };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGeometry(format!("every dimension must be at least 2, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!("spacing must be finite and positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin must be finite, got {:?}", self.origin)));
        }
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidGeometry(format!("{:?} overflows", self.dims)))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// Smallest distance (in voxels) from a voxel to any face of the grid.
    pub fn face_distance(&self, index: usize) -> usize {
        let c = self.coords(index);
        (0..3).map(|a| c[a].min(self.dims[a] - 1 - c[a])).min().unwrap_or(0)
    }

    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{what}: {:?} vs {:?}", self, other)))
        }
    }

    /// Geometry of the grid obtained by averaging `factor³` blocks.
    pub fn downsampled(&self, factor: usize) -> Result<GridGeometry> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {factor} does not divide dims {:?}",
                self.dims
            )));
        }
        let f = factor as f32;
        GridGeometry::new(
            self.dims.map(|d| d / factor),
            self.spacing.map(|s| s * f),
            [0, 1, 2].map(|a| self.origin[a] + 0.5 * (f - 1.0) * self.spacing[a]),
        )
    }

    /// Geometry of the grid obtained by refining each voxel into `factor³`.
    pub fn upsampled(&self, factor: usize) -> Result<GridGeometry> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let f = factor as f32;
        let spacing = self.spacing.map(|s| s / f);
        GridGeometry::new(
            self.dims.map(|d| d * factor),
            spacing,
            [0, 1, 2].map(|a| self.origin[a] - 0.5 * (f - 1.0) * spacing[a]),
        )
    }

    /// Evaluate `f` at every voxel, in storage order, in parallel.
    pub fn par_map<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn([usize; 3]) -> T + Sync + Send,
    {
        (0..self.len()).into_par_iter().map(|idx| f(self.coords(idx))).collect()
    }
}

/// Whether a scalar volume carries intensities or integer labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    Intensity,
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub geometry: GridGeometry,
    pub values: Vec<f32>,
    pub kind: ScalarKind,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, values: Vec<f32>, kind: ScalarKind) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!("{} values for dims {:?}", values.len(), geometry.dims)));
        }
        match kind {
            ScalarKind::Intensity => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("intensity volume".into()));
                }
            }
            ScalarKind::Labels => {
                if values.iter().any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0)) {
                    return Err(Error::InvalidArgument("label volume values must be non-negative integers".into()));
                }
            }
        }
        Ok(ScalarVolume { geometry, values, kind })
    }

    pub fn intensity(geometry: GridGeometry, values: Vec<f32>) -> Result<Self> {
        Self::new(geometry, values, ScalarKind::Intensity)
    }

    pub fn labels(geometry: GridGeometry, values: Vec<f32>) -> Result<Self> {
        Self::new(geometry, values, ScalarKind::Labels)
    }

    pub fn zeros(geometry: GridGeometry, kind: ScalarKind) -> Self {
        ScalarVolume { geometry, values: vec![0.0; geometry.len()], kind }
    }

    pub fn from_fn<F>(geometry: GridGeometry, kind: ScalarKind, f: F) -> Self
    where
        F: Fn([usize; 3]) -> f32 + Sync + Send,
    {
        ScalarVolume { geometry, values: geometry.par_map(f), kind }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.geometry.index(i, j, k)]
    }

    pub fn is_labels(&self) -> bool {
        self.kind == ScalarKind::Labels
    }

    /// Number of voxels whose label equals `label`.
    pub fn count_label(&self, label: u32) -> usize {
        let label = label as f32;
        self.values.iter().filter(|&&v| v == label).count()
    }

    /// Trilinear sample at a continuous voxel coordinate.
    pub fn sample(&self, p: Vec3) -> f64 {
        let c = Cell::locate(&self.geometry, p);
        c.interpolate(|idx| self.values[idx] as f64)
    }

    /// Nearest-voxel sample at a continuous voxel coordinate.
    pub fn sample_nearest(&self, p: Vec3) -> f32 {
        let d = self.geometry.dims;
        let pick = |a: usize| -> usize {
            let x = p[a].clamp(0.0, (d[a] - 1) as f64);
            // round-half-up keeps the choice independent of the sign of p
            ((x + 0.5).floor() as usize).min(d[a] - 1)
        };
        self.values[self.geometry.index(pick(0), pick(1), pick(2))]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub geometry: GridGeometry,
    pub vectors: Vec<[f32; 3]>,
}

impl VectorField {
    pub fn new(geometry: GridGeometry, vectors: Vec<[f32; 3]>) -> Result<Self> {
        geometry.validate()?;
        if vectors.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!("{} vectors for dims {:?}", vectors.len(), geometry.dims)));
        }
        let field = VectorField { geometry, vectors };
        field.ensure_finite("vector field")?;
        Ok(field)
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        VectorField { geometry, vectors: vec![[0.0; 3]; geometry.len()] }
    }

    pub fn constant(geometry: GridGeometry, c: [f32; 3]) -> Self {
        VectorField { geometry, vectors: vec![c; geometry.len()] }
    }

    pub fn from_fn<F>(geometry: GridGeometry, f: F) -> Self
    where
        F: Fn([usize; 3]) -> [f32; 3] + Sync + Send,
    {
        VectorField { geometry, vectors: geometry.par_map(f) }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        self.vectors[self.geometry.index(i, j, k)]
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Largest Euclidean vector norm over the grid.
    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(norm).fold(0.0, f64::max)
    }

    /// Largest Euclidean norm among voxels at least `margin` voxels from every face.
    pub fn max_norm_interior(&self, margin: usize) -> f64 {
        self.vectors
            .iter()
            .enumerate()
            .filter(|(idx, _)| self.geometry.face_distance(*idx) >= margin)
            .map(|(_, v)| norm(v))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        self.map(|v| v.map(|c| (c as f64 * s) as f32))
    }

    pub fn neg(&self) -> VectorField {
        self.map(|v| v.map(|c| -c))
    }

    pub fn map<F>(&self, f: F) -> VectorField
    where
        F: Fn(&[f32; 3]) -> [f32; 3] + Sync + Send,
    {
        VectorField { geometry: self.geometry, vectors: self.vectors.par_iter().map(f).collect() }
    }

    /// Voxel-wise combination of two fields on the same grid.
    pub fn zip_with<F>(&self, other: &VectorField, f: F) -> Result<VectorField>
    where
        F: Fn(&[f32; 3], &[f32; 3]) -> [f32; 3] + Sync + Send,
    {
        self.geometry.ensure_same(&other.geometry, "vector field combination")?;
        Ok(VectorField {
            geometry: self.geometry,
            vectors: self.vectors.par_iter().zip(other.vectors.par_iter()).map(|(a, b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
    }

    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
    }

    /// Largest voxel-wise difference norm, restricted to voxels at least
    /// `margin` voxels away from every face.
    pub fn max_diff_interior(&self, other: &VectorField, margin: usize) -> Result<f64> {
        self.geometry.ensure_same(&other.geometry, "field difference")?;
        Ok(self
            .vectors
            .iter()
            .zip(&other.vectors)
            .enumerate()
            .filter(|(idx, _)| self.geometry.face_distance(*idx) >= margin)
            .map(|(_, (a, b))| {
                let d = [0, 1, 2].map(|c| a[c] as f64 - b[c] as f64);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max))
    }
}

#[inline]
pub(crate) fn norm(v: &[f32; 3]) -> f64 {
    let (x, y, z) = (v[0] as f64, v[1] as f64, v[2] as f64);
    (x * x + y * y + z * z).sqrt()
}

/// The eight-corner neighbourhood of a continuous point, clamped to the grid.
struct Cell {
    base: [usize; 3],
    frac: Vec3,
    strides: [usize; 3],
}

impl Cell {
    #[inline]
    fn locate(geometry: &GridGeometry, p: Vec3) -> Cell {
        let d = geometry.dims;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (d[a] - 1) as f64;
            // NaN clamps to the low face
            let x = if p[a].is_nan() { 0.0 } else { p[a].clamp(0.0, hi) };
            let b = (x.floor() as usize).min(d[a] - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        Cell { base, frac, strides: [1, d[0], d[0] * d[1]] }
    }

    /// Nested lerps, so constant data reproduces exactly.
    #[inline]
    fn interpolate<F: Fn(usize) -> f64>(&self, value: F) -> f64 {
        let [sx, sy, sz] = self.strides;
        let o = self.base[0] * sx + self.base[1] * sy + self.base[2] * sz;
        let [tx, ty, tz] = self.frac;
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let line = |off: usize| lerp(value(off), value(off + sx), tx);
        let plane = |off: usize| lerp(line(off), line(off + sy), ty);
        lerp(plane(o), plane(o + sz), tz)
    }
}

/// Trilinear interpolation of a vector field at a continuous voxel coordinate.
/// Coordinates outside the grid clamp to the nearest face first.
pub fn sample_vector(field: &VectorField, p: Vec3) -> Vec3 {
    let cell = Cell::locate(&field.geometry, p);
    let [sx, sy, sz] = cell.strides;
    let o = cell.base[0] * sx + cell.base[1] * sy + cell.base[2] * sz;
    let [tx, ty, tz] = cell.frac;
    let at = |idx: usize| field.vectors[idx].map(|x| x as f64);
    let lerp = |a: Vec3, b: Vec3, t: f64| [0, 1, 2].map(|c| a[c] + t * (b[c] - a[c]));
    let line = |off: usize| lerp(at(off), at(off + sx), tx);
    let plane = |off: usize| lerp(line(off), line(off + sy), ty);
    lerp(plane(o), plane(o + sz), tz)
}

/// Pull-back warp: `out(x) = image(x + displacement(x))`. Label volumes are
/// resampled nearest-neighbour so they stay integral.
pub fn warp(image: &ScalarVolume, displacement: &VectorField) -> Result<ScalarVolume> {
    image.geometry.ensure_same(&displacement.geometry, "warp image vs displacement")?;
    let geometry = image.geometry;
    let values = geometry.par_map(|[i, j, k]| {
        let u = displacement.vectors[geometry.index(i, j, k)];
        let p = [i as f64 + u[0] as f64, j as f64 + u[1] as f64, k as f64 + u[2] as f64];
        match image.kind {
            ScalarKind::Intensity => image.sample(p) as f32,
            ScalarKind::Labels => image.sample_nearest(p),
        }
    });
    Ok(ScalarVolume { geometry, values, kind: image.kind })
}

/// Finite difference of `value` along `axis` at voxel `c`: central in the
/// interior, one-sided on the faces.
#[inline]
pub(crate) fn difference<F: Fn(usize) -> f64>(geometry: &GridGeometry, c: [usize; 3], axis: usize, value: F) -> f64 {
    let n = geometry.dims[axis];
    let stride = [1, geometry.dims[0], geometry.dims[0] * geometry.dims[1]][axis];
    let idx = geometry.index(c[0], c[1], c[2]);
    let pos = c[axis];
    if pos == 0 {
        value(idx + stride) - value(idx)
    } else if pos == n - 1 {
        value(idx) - value(idx - stride)
    } else {
        0.5 * (value(idx + stride) - value(idx - stride))
    }
}

/// Spatial Jacobian `J[r][c] = ∂field_r / ∂x_c` at one voxel.
#[inline]
pub fn field_jacobian(field: &VectorField, c: [usize; 3]) -> [[f64; 3]; 3] {
    let mut jac = [[0.0; 3]; 3];
    for axis in 0..3 {
        for (r, row) in jac.iter_mut().enumerate() {
            row[axis] = difference(&field.geometry, c, axis, |idx| field.vectors[idx][r] as f64);
        }
    }
    jac
}

/// Image gradient in intensity per voxel.
pub fn gradient(image: &ScalarVolume) -> VectorField {
    let geometry = image.geometry;
    VectorField::from_fn(geometry, |c| {
        [0, 1, 2].map(|axis| difference(&geometry, c, axis, |idx| image.values[idx] as f64) as f32)
    })
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Voxel-wise `det(∂φ/∂x)` for `φ = Id + displacement`.
pub fn jacobian_determinant(displacement: &VectorField) -> ScalarVolume {
    let geometry = displacement.geometry;
    ScalarVolume::from_fn(geometry, ScalarKind::Intensity, |c| {
        let mut m = field_jacobian(displacement, c);
        for (d, row) in m.iter_mut().enumerate() {
            row[d] += 1.0;
        }
        det3(&m) as f32
    })
}

/// Smallest Jacobian determinant of `Id + displacement`.
pub fn min_jacobian_determinant(displacement: &VectorField) -> f64 {
    jacobian_determinant(displacement).values.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64))
}

/// Block-average a scalar volume by an integer factor.
pub fn downsample_volume(volume: &ScalarVolume, factor: usize) -> Result<ScalarVolume> {
    let coarse = volume.geometry.downsampled(factor)?;
    let fine = volume.geometry;
    let inv = 1.0 / (factor * factor * factor) as f64;
    let values = coarse.par_map(|[i, j, k]| {
        let mut sum = 0.0f64;
        for dk in 0..factor {
            for dj in 0..factor {
                for di in 0..factor {
                    sum += volume.values[fine.index(i * factor + di, j * factor + dj, k * factor + dk)] as f64;
                }
            }
        }
        (sum * inv) as f32
    });
    Ok(ScalarVolume { geometry: coarse, values, kind: volume.kind })
}

/// Block-average a vector field by an integer factor. Vectors are rescaled to
/// voxel units of the coarse grid.
pub fn downsample_field(field: &VectorField, factor: usize) -> Result<VectorField> {
    let coarse = field.geometry.downsampled(factor)?;
    let fine = field.geometry;
    let inv = 1.0 / (factor * factor * factor * factor) as f64;
    let vectors = coarse.par_map(|[i, j, k]| {
        let mut sum = [0.0f64; 3];
        for dk in 0..factor {
            for dj in 0..factor {
                for di in 0..factor {
                    let v = field.vectors[fine.index(i * factor + di, j * factor + dj, k * factor + dk)];
                    for c in 0..3 {
                        sum[c] += v[c] as f64;
                    }
                }
            }
        }
        sum.map(|s| (s * inv) as f32)
    });
    Ok(VectorField { geometry: coarse, vectors })
}

/// Trilinear upsampling by an integer factor, with vectors rescaled to voxel
/// units of the fine grid. Fine voxel `i` sits at coarse coordinate
/// `(i + 0.5) / factor - 0.5`, consistent with block averaging.
pub fn upsample_field(field: &VectorField, factor: usize) -> Result<VectorField> {
    let fine = field.geometry.upsampled(factor)?;
    let f = factor as f64;
    let vectors = fine.par_map(|c| {
        let p = c.map(|x| (x as f64 + 0.5) / f - 0.5);
        sample_vector(field, p).map(|v| (v * f) as f32)
    });
    Ok(VectorField { geometry: fine, vectors })
}
