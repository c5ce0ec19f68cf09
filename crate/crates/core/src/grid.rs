//! Discrete substrate: uniform grids, scalar images, vector fields, masks and
//! displacement-encoded deformations.
//!
//! Pixel `(i, j)` sits at physical position `(i * spacing, j * spacing)`; `i`
//! runs along x (columns) and `j` along y (rows). Storage is row-major.
//!
//! Sampling conventions:
//! - vector fields extend by zero outside the grid, and bilinear interpolation
//!   fades linearly to zero over the first ghost pixel;
//! - image intensities clamp to the nearest edge sample.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Uniform 2D grid shared by every object of one problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    width: usize,
    height: usize,
    spacing: f64,
}

impl Grid2D {
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing,
        })
    }

    /// Square grid with unit spacing.
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size, 1.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 * self.spacing, j as f64 * self.spacing]
    }

    /// Area of one pixel.
    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    pub fn ensure_same(&self, other: &Grid2D) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.to_string(),
                right: other.to_string(),
            })
        }
    }
}

impl std::fmt::Display for Grid2D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@{}", self.width, self.height, self.spacing)
    }
}

/// Evaluates `f(i, j)` for every pixel in row-major order, rows in parallel.
pub(crate) fn per_pixel<T, F>(grid: &Grid2D, f: F) -> Vec<T>
where
    T: Send + Default + Clone,
    F: Fn(usize, usize) -> T + Sync,
{
    let w = grid.width;
    let mut out = vec![T::default(); grid.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = f(i, j);
        }
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Extension {
    Zero,
    Clamp,
}

#[inline]
fn fetch(data: &[f64], w: usize, h: usize, i: i64, j: i64, ext: Extension) -> f64 {
    match ext {
        Extension::Zero => {
            if i < 0 || j < 0 || i >= w as i64 || j >= h as i64 {
                0.0
            } else {
                data[j as usize * w + i as usize]
            }
        }
        Extension::Clamp => {
            let ic = i.clamp(0, w as i64 - 1) as usize;
            let jc = j.clamp(0, h as i64 - 1) as usize;
            data[jc * w + ic]
        }
    }
}

#[inline]
fn split(u: f64) -> (i64, f64) {
    let f = u.floor();
    (f as i64, u - f)
}

/// Bilinear interpolation at fractional index coordinates `(u, v)`.
#[inline]
fn interp(data: &[f64], w: usize, h: usize, u: f64, v: f64, ext: Extension) -> f64 {
    let (i0, fx) = split(u);
    let (j0, fy) = split(v);
    let a = fetch(data, w, h, i0, j0, ext);
    let b = fetch(data, w, h, i0 + 1, j0, ext);
    let c = fetch(data, w, h, i0, j0 + 1, ext);
    let d = fetch(data, w, h, i0 + 1, j0 + 1, ext);
    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
}

/// Value and index-space gradient of the bilinear interpolant.
///
/// On a grid line the interpolant has a kink; there the derivative across the
/// line is the mean of the two one-sided slopes.
#[inline]
fn interp_grad(data: &[f64], w: usize, h: usize, u: f64, v: f64, ext: Extension) -> (f64, f64, f64) {
    let (i0, fx) = split(u);
    let (j0, fy) = split(v);
    let at = |i: i64, j: i64| fetch(data, w, h, i, j, ext);
    let a = at(i0, j0);
    let b = at(i0 + 1, j0);
    let c = at(i0, j0 + 1);
    let d = at(i0 + 1, j0 + 1);
    let val = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);

    let mut du = (1.0 - fy) * (b - a) + fy * (d - c);
    if fx == 0.0 {
        let left = (1.0 - fy) * (a - at(i0 - 1, j0)) + fy * (c - at(i0 - 1, j0 + 1));
        du = 0.5 * (du + left);
    }
    let mut dv = (1.0 - fx) * (c - a) + fx * (d - b);
    if fy == 0.0 {
        let below = (1.0 - fx) * (a - at(i0, j0 - 1)) + fx * (b - at(i0 + 1, j0 - 1));
        dv = 0.5 * (dv + below);
    }
    (val, du, dv)
}

/// Bilinear weights of the (up to four) in-grid samples contributing to a
/// zero-extended interpolation at `(u, v)`.
pub(crate) fn zero_ext_weights(grid: &Grid2D, u: f64, v: f64) -> [(usize, f64); 4] {
    let (i0, fx) = split(u);
    let (j0, fy) = split(v);
    let (w, h) = (grid.width as i64, grid.height as i64);
    let mut out = [(0usize, 0.0f64); 4];
    let corners = [
        (i0, j0, (1.0 - fx) * (1.0 - fy)),
        (i0 + 1, j0, fx * (1.0 - fy)),
        (i0, j0 + 1, (1.0 - fx) * fy),
        (i0 + 1, j0 + 1, fx * fy),
    ];
    for (slot, &(i, j, wt)) in out.iter_mut().zip(corners.iter()) {
        if i >= 0 && j >= 0 && i < w && j < h {
            *slot = (j as usize * grid.width + i as usize, wt);
        }
    }
    out
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "{what} has a non-finite sample at index {pos}"
        )));
    }
    Ok(())
}

/// Scalar intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    grid: Grid2D,
    data: Vec<f64>,
}

impl Image {
    pub fn new(grid: Grid2D, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "image needs {} samples, got {}",
                grid.len(),
                data.len()
            )));
        }
        check_finite(&data, "image")?;
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Builds an image from a function of physical position.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64 + Sync) -> Self {
        let data = per_pixel(&grid, |i, j| {
            let [x, y] = grid.position(i, j);
            f(x, y)
        });
        Self { grid, data }
    }

    pub(crate) fn from_raw(grid: Grid2D, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.index(i, j)]
    }

    /// Bilinear sample at a physical point, edge-clamped.
    pub fn sample(&self, point: [f64; 2]) -> f64 {
        let h = self.grid.spacing;
        self.sample_index(point[0] / h, point[1] / h)
    }

    #[inline]
    pub(crate) fn sample_index(&self, u: f64, v: f64) -> f64 {
        interp(&self.data, self.grid.width, self.grid.height, u, v, Extension::Clamp)
    }

    /// Value and physical-space gradient of the interpolant.
    #[inline]
    pub(crate) fn sample_index_grad(&self, u: f64, v: f64) -> (f64, [f64; 2]) {
        let h = self.grid.spacing;
        let (val, du, dv) = interp_grad(
            &self.data,
            self.grid.width,
            self.grid.height,
            u,
            v,
            Extension::Clamp,
        );
        (val, [du / h, dv / h])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Two-component field: velocity, momentum or displacement depending on context.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid2D,
    ux: Vec<f64>,
    uy: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid2D, ux: Vec<f64>, uy: Vec<f64>) -> Result<Self> {
        if ux.len() != grid.len() || uy.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "vector field needs {} samples per component, got {} and {}",
                grid.len(),
                ux.len(),
                uy.len()
            )));
        }
        check_finite(&ux, "vector field x component")?;
        check_finite(&uy, "vector field y component")?;
        Ok(Self { grid, ux, uy })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            ux: vec![0.0; grid.len()],
            uy: vec![0.0; grid.len()],
        }
    }

    /// Builds a field from a function of physical position.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> [f64; 2] + Sync) -> Self {
        let both = per_pixel(&grid, |i, j| {
            let [x, y] = grid.position(i, j);
            let v = f(x, y);
            (v[0], v[1])
        });
        let (ux, uy) = both.into_iter().unzip();
        Self { grid, ux, uy }
    }

    pub(crate) fn from_raw(grid: Grid2D, ux: Vec<f64>, uy: Vec<f64>) -> Self {
        debug_assert_eq!(ux.len(), grid.len());
        debug_assert_eq!(uy.len(), grid.len());
        Self { grid, ux, uy }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn ux(&self) -> &[f64] {
        &self.ux
    }

    pub fn uy(&self) -> &[f64] {
        &self.uy
    }

    pub(crate) fn components_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.ux, &mut self.uy)
    }

    pub fn into_components(self) -> (Vec<f64>, Vec<f64>) {
        (self.ux, self.uy)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        let k = self.grid.index(i, j);
        [self.ux[k], self.uy[k]]
    }

    /// Bilinear sample at a physical point; zero outside the grid.
    pub fn sample(&self, point: [f64; 2]) -> [f64; 2] {
        let h = self.grid.spacing;
        self.sample_index(point[0] / h, point[1] / h)
    }

    #[inline]
    pub(crate) fn sample_index(&self, u: f64, v: f64) -> [f64; 2] {
        let (w, h) = (self.grid.width, self.grid.height);
        [
            interp(&self.ux, w, h, u, v, Extension::Zero),
            interp(&self.uy, w, h, u, v, Extension::Zero),
        ]
    }

    /// Sample plus the 2x2 physical Jacobian `[[dux/dx, dux/dy], [duy/dx, duy/dy]]`.
    #[inline]
    pub(crate) fn sample_index_jacobian(&self, u: f64, v: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (w, h) = (self.grid.width, self.grid.height);
        let s = self.grid.spacing;
        let (ax, ax_u, ax_v) = interp_grad(&self.ux, w, h, u, v, Extension::Zero);
        let (ay, ay_u, ay_v) = interp_grad(&self.uy, w, h, u, v, Extension::Zero);
        ([ax, ay], [[ax_u / s, ax_v / s], [ay_u / s, ay_v / s]])
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self::from_raw(
            self.grid,
            self.ux.iter().map(|v| a * v).collect(),
            self.uy.iter().map(|v| a * v).collect(),
        )
    }

    /// `self + a * other`.
    pub fn add_scaled(&self, a: f64, other: &VectorField) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self::from_raw(
            self.grid,
            self.ux.iter().zip(&other.ux).map(|(x, y)| x + a * y).collect(),
            self.uy.iter().zip(&other.uy).map(|(x, y)| x + a * y).collect(),
        ))
    }

    /// Pointwise product with a scalar weight image.
    pub fn weighted(&self, weight: &Image) -> Result<Self> {
        self.grid.ensure_same(weight.grid())?;
        let wd = weight.data();
        Ok(Self::from_raw(
            self.grid,
            self.ux.iter().zip(wd).map(|(x, w)| x * w).collect(),
            self.uy.iter().zip(wd).map(|(x, w)| x * w).collect(),
        ))
    }

    /// Plain sum over pixels of `self . other` (no area factor), in index order.
    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let mut acc = 0.0;
        for k in 0..self.grid.len() {
            acc += self.ux[k] * other.ux[k] + self.uy[k] * other.uy[k];
        }
        Ok(acc)
    }

    /// Plain sum of squared components.
    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.grid.len() {
            acc += self.ux[k] * self.ux[k] + self.uy[k] * self.uy[k];
        }
        acc
    }

    /// Largest Euclidean length over pixels.
    pub fn max_norm(&self) -> f64 {
        self.ux
            .iter()
            .zip(&self.uy)
            .fold(0.0, |m, (x, y)| m.max(x.hypot(*y)))
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f64 {
        self.ux
            .iter()
            .chain(&self.uy)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max Euclidean distance between two fields, in pixels of this grid.
    pub fn max_distance_px(&self, other: &VectorField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let mut m = 0.0f64;
        for k in 0..self.grid.len() {
            m = m.max((self.ux[k] - other.ux[k]).hypot(self.uy[k] - other.uy[k]));
        }
        Ok(m / self.grid.spacing)
    }

    /// The x component as a scalar image.
    pub fn x_image(&self) -> Image {
        Image::from_raw(self.grid, self.ux.clone())
    }

    pub fn y_image(&self) -> Image {
        Image::from_raw(self.grid, self.uy.clone())
    }
}

/// Binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid2D,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid2D, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "mask needs {} samples, got {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid2D, value: bool) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.height {
            for i in 0..grid.width {
                data.push(f(i, j));
            }
        }
        Self { grid, data }
    }

    /// Accepts images holding exactly 0 or 1 in every pixel.
    pub fn from_image(img: &Image) -> Result<Self> {
        let mut data = Vec::with_capacity(img.data.len());
        for (k, &v) in img.data.iter().enumerate() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::InvalidData(format!(
                    "mask value {v} at index {k} is neither 0 nor 1"
                )));
            }
        }
        Ok(Self {
            grid: img.grid,
            data,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[self.grid.index(i, j)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> Image {
        Image::from_raw(
            self.grid,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn complement(&self) -> Mask {
        Mask {
            grid: self.grid,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// One binary dilation with the 3x3 square structuring element.
    pub fn dilate3x3(&self) -> Mask {
        let (w, h) = (self.grid.width, self.grid.height);
        Mask::from_fn(self.grid, |i, j| {
            let i_lo = i.saturating_sub(1);
            let j_lo = j.saturating_sub(1);
            let i_hi = (i + 1).min(w - 1);
            let j_hi = (j + 1).min(h - 1);
            (j_lo..=j_hi).any(|jj| (i_lo..=i_hi).any(|ii| self.data[jj * w + ii]))
        })
    }
}

/// `phi(x) = x + disp(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    disp: VectorField,
}

impl Deformation {
    pub fn identity(grid: Grid2D) -> Self {
        Self {
            disp: VectorField::zeros(grid),
        }
    }

    pub fn from_displacement(disp: VectorField) -> Self {
        Self { disp }
    }

    /// Uniform translation by a physical offset.
    pub fn translation(grid: Grid2D, offset: [f64; 2]) -> Self {
        Self {
            disp: VectorField::from_raw(
                grid,
                vec![offset[0]; grid.len()],
                vec![offset[1]; grid.len()],
            ),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        self.disp.grid()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.disp
    }

    pub fn into_displacement(self) -> VectorField {
        self.disp
    }

    /// Image of a physical point under the map (zero displacement off-grid).
    pub fn apply(&self, point: [f64; 2]) -> [f64; 2] {
        let d = self.disp.sample(point);
        [point[0] + d[0], point[1] + d[1]]
    }

    /// Max pointwise distance to another deformation, in pixels.
    pub fn distance_px(&self, other: &Deformation) -> Result<f64> {
        self.disp.max_distance_px(&other.disp)
    }

    /// Max distance to the identity, in pixels.
    pub fn max_displacement_px(&self) -> f64 {
        self.disp.max_norm() / self.grid().spacing()
    }

    /// Whether the Jacobian determinant is positive at every interior pixel.
    pub fn is_valid(&self) -> bool {
        let jac = jacobian_determinant(self);
        let g = *self.grid();
        (1..g.height() - 1).all(|j| (1..g.width() - 1).all(|i| jac.get(i, j) > 0.0))
    }
}

/// Bilinear sample of an image at a physical point (edge clamped).
pub fn sample_image(img: &Image, point: [f64; 2]) -> f64 {
    img.sample(point)
}

/// Bilinear sample of a vector field at a physical point (zero extended).
pub fn sample_field(field: &VectorField, point: [f64; 2]) -> [f64; 2] {
    field.sample(point)
}

/// Central differences inside, one-sided on the border, in physical units.
pub fn spatial_gradient(img: &Image) -> VectorField {
    let g = *img.grid();
    let (w, h) = (g.width(), g.height());
    let s = g.spacing();
    let d = img.data();
    let both = per_pixel(&g, |i, j| {
        let at = |ii: usize, jj: usize| d[jj * w + ii];
        let gx = if i == 0 {
            (at(1, j) - at(0, j)) / s
        } else if i == w - 1 {
            (at(w - 1, j) - at(w - 2, j)) / s
        } else {
            (at(i + 1, j) - at(i - 1, j)) / (2.0 * s)
        };
        let gy = if j == 0 {
            (at(i, 1) - at(i, 0)) / s
        } else if j == h - 1 {
            (at(i, h - 1) - at(i, h - 2)) / s
        } else {
            (at(i, j + 1) - at(i, j - 1)) / (2.0 * s)
        };
        (gx, gy)
    });
    let (ux, uy) = both.into_iter().unzip();
    VectorField::from_raw(g, ux, uy)
}

/// `I o phi_inv`: pull the image back through the inverse map.
pub fn warp_image(img: &Image, phi_inv: &Deformation) -> Result<Image> {
    img.grid().ensure_same(phi_inv.grid())?;
    let g = *img.grid();
    let s = g.spacing();
    let disp = phi_inv.displacement();
    let data = per_pixel(&g, |i, j| {
        let [dx, dy] = disp.get(i, j);
        img.sample_index(i as f64 + dx / s, j as f64 + dy / s)
    });
    Ok(Image::from_raw(g, data))
}

/// `phi o psi`, sampling `phi`'s displacement at `psi(x)` with zero extension.
pub fn compose(phi: &Deformation, psi: &Deformation) -> Result<Deformation> {
    phi.grid().ensure_same(psi.grid())?;
    let g = *phi.grid();
    let s = g.spacing();
    let (pd, qd) = (phi.displacement(), psi.displacement());
    let both = per_pixel(&g, |i, j| {
        let [qx, qy] = qd.get(i, j);
        let [px, py] = pd.sample_index(i as f64 + qx / s, j as f64 + qy / s);
        (qx + px, qy + py)
    });
    let (ux, uy) = both.into_iter().unzip();
    Ok(Deformation::from_displacement(VectorField::from_raw(g, ux, uy)))
}

/// Outcome of the fixed-point inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionStats {
    pub iterations: usize,
    /// Largest per-pixel change of the final iteration, physical units.
    pub last_update: f64,
}

/// Numerical inverse by the fixed point `inv <- -disp o (id + inv)`.
///
/// Stops once the largest per-pixel update drops below `tol` (physical
/// length). Fails with [`Error::NonConvergent`] if the update is still above
/// `10 * tol` after `max_iter` sweeps and a pointwise Newton refinement of
/// the best iterate; otherwise returns the best iterate.
pub fn invert(phi: &Deformation, max_iter: usize, tol: f64) -> Result<Deformation> {
    invert_with_stats(phi, max_iter, tol).map(|(d, _)| d)
}

pub fn invert_with_stats(
    phi: &Deformation,
    max_iter: usize,
    tol: f64,
) -> Result<(Deformation, InversionStats)> {
    let g = *phi.grid();
    let s = g.spacing();
    let disp = phi.displacement();
    let mut inv = VectorField::zeros(g);
    let mut best = inv.clone();
    let mut best_update = f64::INFINITY;
    let mut last_update = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        let both = per_pixel(&g, |i, j| {
            let [ix, iy] = inv.get(i, j);
            let [dx, dy] = disp.sample_index(i as f64 + ix / s, j as f64 + iy / s);
            (-dx, -dy)
        });
        let (ux, uy): (Vec<f64>, Vec<f64>) = both.into_iter().unzip();
        let next = VectorField::from_raw(g, ux, uy);
        last_update = next.max_distance_px(&inv)? * s;
        inv = next;
        if last_update <= best_update {
            best_update = last_update;
            best = inv.clone();
        }
        if last_update < tol {
            break;
        }
    }
    if best_update > 10.0 * tol {
        // the sweep stalls where |grad disp| approaches 1; finish pointwise,
        // but only for maps without folds
        let (polished, residual) = if phi.is_valid() {
            newton_polish(&disp, &best, max_iter.max(1), tol)
        } else {
            (best.clone(), f64::INFINITY)
        };
        if residual > 10.0 * tol {
            return Err(Error::NonConvergent {
                iterations,
                last_update,
            });
        }
        best = polished;
        best_update = residual;
    }
    Ok((
        Deformation::from_displacement(best),
        InversionStats {
            iterations,
            last_update: best_update,
        },
    ))
}

/// Per-pixel damped Newton on `y + disp(y) = x`, started from `id + inv`.
/// Returns the refined inverse and the largest remaining residual
/// `|phi(y) - x|` in physical units.
fn newton_polish(disp: &VectorField, inv: &VectorField, max_iter: usize, tol: f64) -> (VectorField, f64) {
    let g = *disp.grid();
    let s = g.spacing();
    let tol_px = tol / s;
    let residual = |x: [f64; 2], y: [f64; 2]| {
        let [dx, dy] = disp.sample_index(y[0], y[1]);
        [y[0] + dx / s - x[0], y[1] + dy / s - x[1]]
    };
    let out = per_pixel(&g, |i, j| {
        let x = [i as f64, j as f64];
        let [ix, iy] = inv.get(i, j);
        let mut y = [x[0] + ix / s, x[1] + iy / s];
        let mut r = residual(x, y);
        let mut rn = r[0].hypot(r[1]);
        for _ in 0..max_iter {
            if rn < tol_px {
                break;
            }
            let (_, jac) = disp.sample_index_jacobian(y[0], y[1]);
            let (a, b, c, d) = (1.0 + jac[0][0], jac[0][1], jac[1][0], 1.0 + jac[1][1]);
            let det = a * d - b * c;
            let step = if det.abs() > 1e-12 {
                [(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det]
            } else {
                r
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let cand = [y[0] - t * step[0], y[1] - t * step[1]];
                let rc = residual(x, cand);
                let rcn = rc[0].hypot(rc[1]);
                if rcn < rn {
                    y = cand;
                    r = rc;
                    rn = rcn;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        ((y[0] - x[0]) * s, (y[1] - x[1]) * s, rn * s)
    });
    let worst = out.iter().fold(0.0f64, |m, o| m.max(o.2));
    let ux = out.iter().map(|o| o.0).collect();
    let uy = out.iter().map(|o| o.1).collect();
    (VectorField::from_raw(g, ux, uy), worst)
}

/// `det(I + grad disp)` with central differences (one-sided on the border).
pub fn jacobian_determinant(phi: &Deformation) -> Image {
    let gx = spatial_gradient(&phi.displacement().x_image());
    let gy = spatial_gradient(&phi.displacement().y_image());
    let g = *phi.grid();
    let data = per_pixel(&g, |i, j| {
        let [dxx, dxy] = gx.get(i, j);
        let [dyx, dyy] = gy.get(i, j);
        (1.0 + dxx) * (1.0 + dyy) - dxy * dyx
    });
    Image::from_raw(g, data)
}
