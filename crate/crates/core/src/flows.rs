//! Time integration of diffeomorphism paths.
//!
//! A [`VelocityPath`] holds `N` piecewise-constant velocity fields on `[0, 1]`
//! with `dt = 1/N`. Three integrators turn it into a [`DeformationPath`]:
//!
//! - [`integrate_spatial`]: `d/dt phi = v o phi` (right-invariant setting);
//! - [`integrate_inverse`]: `d/dt psi = -v o psi`, which is the inverse of the
//!   convective flow below;
//! - [`integrate_convective`]: `d/dt phi = dphi . v` (left-invariant setting),
//!   obtained by inverting the snapshots of [`integrate_inverse`];
//! - [`integrate_spatial_inverse`]: the inverse of the spatial flow, built by
//!   backward semi-Lagrangian steps; image warping uses this one.
//!
//! Both forward integrators move particles seeded at pixel centres, so the
//! only interpolation involved is the sampling of `v`.

use log::warn;

use crate::error::{Error, Result};
use crate::grid::{
    compose, invert, per_pixel, spatial_gradient, Deformation, Grid2D, VectorField,
};
use crate::kernels::{apply_kernel, l2_pairing, KernelSpec};

/// Residual below which the first corresponded snapshot is snapped to the identity.
pub const SNAP_RESIDUAL_PX: f64 = 0.1;
/// Residual above which the correspondence is rejected.
pub const MAX_RESIDUAL_PX: f64 = 0.5;

/// Piecewise-constant velocities `v(t) = steps[k]` on `[k/N, (k+1)/N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPath {
    steps: Vec<VectorField>,
}

impl VelocityPath {
    pub fn new(steps: Vec<VectorField>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::InvalidData("velocity path needs at least one step".into()));
        };
        let g = *first.grid();
        for s in &steps[1..] {
            g.ensure_same(s.grid())?;
        }
        Ok(Self { steps })
    }

    /// `n` zero fields.
    pub fn zeros(grid: Grid2D, n: usize) -> Result<Self> {
        Self::new(vec![VectorField::zeros(grid); n])
    }

    /// The same field repeated over `n` steps.
    pub fn constant(field: VectorField, n: usize) -> Result<Self> {
        Self::new(vec![field; n])
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps.len() as f64
    }

    pub fn grid(&self) -> &Grid2D {
        self.steps[0].grid()
    }

    pub fn steps(&self) -> &[VectorField] {
        &self.steps
    }

    pub fn step(&self, k: usize) -> &VectorField {
        &self.steps[k]
    }

    /// `t -> v(1 - t)`.
    pub fn reversed(&self) -> Self {
        Self {
            steps: self.steps.iter().rev().cloned().collect(),
        }
    }

    /// Every step multiplied by `-1`.
    pub fn negated(&self) -> Self {
        Self {
            steps: self.steps.iter().map(|s| s.scaled(-1.0)).collect(),
        }
    }
}

/// Snapshots `phi(k/N)`, `k = 0..=N`, with `phi(0) = id`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationPath {
    snapshots: Vec<Deformation>,
}

impl DeformationPath {
    pub fn new(snapshots: Vec<Deformation>) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::InvalidData(
                "deformation path needs at least two snapshots".into(),
            ));
        }
        let g = *snapshots[0].grid();
        for s in &snapshots[1..] {
            g.ensure_same(s.grid())?;
        }
        if snapshots[0].displacement().max_abs() != 0.0 {
            return Err(Error::InvalidData(
                "deformation path must start at the identity".into(),
            ));
        }
        Ok(Self { snapshots })
    }

    pub fn identity(grid: Grid2D, n: usize) -> Self {
        Self {
            snapshots: vec![Deformation::identity(grid); n + 1],
        }
    }

    /// Number of time steps `N` (one less than the number of snapshots).
    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn snapshots(&self) -> &[Deformation] {
        &self.snapshots
    }

    pub fn get(&self, k: usize) -> &Deformation {
        &self.snapshots[k]
    }

    pub fn last(&self) -> &Deformation {
        self.snapshots.last().expect("path is nonempty")
    }

    pub fn grid(&self) -> &Grid2D {
        self.snapshots[0].grid()
    }
}

/// Time stepper for the characteristic equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stepper {
    Euler,
    /// Explicit midpoint rule.
    #[default]
    Rk2,
}

fn check_cfl(v: &VelocityPath) {
    let g = v.grid();
    let limit = 0.5 * g.spacing() * g.width().min(g.height()) as f64;
    for (k, s) in v.steps().iter().enumerate() {
        let travel = s.max_norm() * v.dt();
        if travel > limit {
            warn!("velocity step {k} moves particles {travel:.3} per step (limit {limit:.3})");
        }
    }
}

/// Advances particles `x + d(x)` through `field` over one step of length `dt`.
fn advect_particles(disp: &VectorField, field: &VectorField, dt: f64, stepper: Stepper) -> VectorField {
    let g = *disp.grid();
    let s = g.spacing();
    let both = per_pixel(&g, |i, j| {
        let [dx, dy] = disp.get(i, j);
        let (u, w) = (i as f64 + dx / s, j as f64 + dy / s);
        let [vx, vy] = match stepper {
            Stepper::Euler => field.sample_index(u, w),
            Stepper::Rk2 => {
                let [ax, ay] = field.sample_index(u, w);
                field.sample_index(u + 0.5 * dt * ax / s, w + 0.5 * dt * ay / s)
            }
        };
        (dx + dt * vx, dy + dt * vy)
    });
    let (ux, uy) = both.into_iter().unzip();
    VectorField::from_raw(g, ux, uy)
}

fn integrate_particles(v: &VelocityPath, sign: f64, stepper: Stepper) -> DeformationPath {
    check_cfl(v);
    let g = *v.grid();
    let dt = sign * v.dt();
    let mut snapshots = Vec::with_capacity(v.len() + 1);
    let mut disp = VectorField::zeros(g);
    snapshots.push(Deformation::identity(g));
    for field in v.steps() {
        disp = advect_particles(&disp, field, dt, stepper);
        snapshots.push(Deformation::from_displacement(disp.clone()));
    }
    DeformationPath { snapshots }
}

/// Flow of the spatial (Eulerian) velocity: `d/dt phi = v o phi`.
pub fn integrate_spatial(v: &VelocityPath, stepper: Stepper) -> DeformationPath {
    integrate_particles(v, 1.0, stepper)
}

/// Solves `d/dt psi = -v o psi` with `psi(0) = id`.
///
/// The result is the inverse of the convective flow of `v`. For velocities
/// constant in time it is also the inverse of the spatial flow; otherwise the
/// two differ by the ordering of the steps.
pub fn integrate_inverse(v: &VelocityPath, stepper: Stepper) -> DeformationPath {
    integrate_particles(v, -1.0, stepper)
}

/// One backward step `d_{k+1}(x) = (y - x) + d_k(y)` of the inverse spatial
/// flow, with the departure point `y = x - dt v(x - dt/2 v(x))` traced back
/// by the midpoint rule.
pub(crate) fn semi_lagrangian_step(prev: &VectorField, v: &VectorField, dt: f64) -> VectorField {
    let g = *prev.grid();
    let s = g.spacing();
    let both = per_pixel(&g, |i, j| {
        let [vx, vy] = v.get(i, j);
        let mu = i as f64 - 0.5 * dt * vx / s;
        let mv = j as f64 - 0.5 * dt * vy / s;
        let [wx, wy] = v.sample_index(mu, mv);
        let [sx, sy] = prev.sample_index(i as f64 - dt * wx / s, j as f64 - dt * wy / s);
        (-dt * wx + sx, -dt * wy + sy)
    });
    let (ux, uy) = both.into_iter().unzip();
    VectorField::from_raw(g, ux, uy)
}

/// Inverse of the spatial flow, `phi^-1(t_{k+1}) = phi^-1(t_k) o (id + dt v_k)^-1`,
/// evaluated semi-Lagrangian style on the grid. This is the map used to
/// deform images: `I o phi^-1(1)`.
pub fn integrate_spatial_inverse(v: &VelocityPath) -> DeformationPath {
    check_cfl(v);
    let g = *v.grid();
    let dt = v.dt();
    let mut snapshots = Vec::with_capacity(v.len() + 1);
    let mut disp = VectorField::zeros(g);
    snapshots.push(Deformation::identity(g));
    for field in v.steps() {
        disp = semi_lagrangian_step(&disp, field, dt);
        snapshots.push(Deformation::from_displacement(disp.clone()));
    }
    DeformationPath { snapshots }
}

/// Settings for the fixed-point inversions performed by the flow routines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionOptions {
    pub max_iter: usize,
    /// Convergence tolerance in pixels.
    pub tol_px: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol_px: 1e-6,
        }
    }
}

/// Flow of the convective velocity: `d/dt phi = dphi . v`.
pub fn integrate_convective(
    v: &VelocityPath,
    stepper: Stepper,
    opts: InversionOptions,
) -> Result<DeformationPath> {
    let eta = integrate_inverse(v, stepper);
    let tol = opts.tol_px * v.grid().spacing();
    let mut snapshots = Vec::with_capacity(eta.snapshots.len());
    snapshots.push(Deformation::identity(*v.grid()));
    for e in &eta.snapshots[1..] {
        snapshots.push(invert(e, opts.max_iter, tol)?);
    }
    Ok(DeformationPath { snapshots })
}

/// Maps a path `phi` to `psi(t) = phi(1) o phi^-1(1 - t)`.
///
/// If `phi` is driven by the spatial velocity `v(t)`, `psi` is driven by the
/// convective velocity `v(1 - t)`, ends at the same `phi(1)` and has the same
/// energy.
pub fn correspond_left_right(phi: &DeformationPath) -> Result<DeformationPath> {
    correspond_left_right_with(phi, InversionOptions::default())
}

pub fn correspond_left_right_with(
    phi: &DeformationPath,
    opts: InversionOptions,
) -> Result<DeformationPath> {
    let n = phi.steps();
    let g = *phi.grid();
    let tol = opts.tol_px * g.spacing();
    let end = phi.last();
    let mut snapshots = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k == n {
            snapshots.push(end.clone());
            break;
        }
        let inv = invert(phi.get(n - k), opts.max_iter, tol)?;
        let psi = compose(end, &inv)?;
        if k == 0 {
            let residual_px = psi.max_displacement_px();
            if residual_px > MAX_RESIDUAL_PX {
                return Err(Error::ResidualTooLarge { residual_px });
            }
            if residual_px < SNAP_RESIDUAL_PX {
                snapshots.push(Deformation::identity(g));
            } else {
                warn!("correspondence start residual {residual_px:.3} px left unsnapped");
                snapshots.push(psi);
            }
        } else {
            snapshots.push(psi);
        }
    }
    Ok(DeformationPath { snapshots })
}

/// Per-step energies `(dt/2) <p_k, v_k>` in the discrete L2 pairing.
pub fn step_energies(v: &VelocityPath, momenta: &[VectorField]) -> Result<Vec<f64>> {
    if momenta.len() != v.len() {
        return Err(Error::InvalidData(format!(
            "{} momenta for {} velocity steps",
            momenta.len(),
            v.len()
        )));
    }
    let dt = v.dt();
    v.steps()
        .iter()
        .zip(momenta)
        .map(|(vk, pk)| Ok(0.5 * dt * l2_pairing(pk, vk)?))
        .collect()
}

/// Sums terms in sorted order so that any permutation gives the same bits.
pub fn permutation_invariant_sum(terms: &[f64]) -> f64 {
    let mut sorted = terms.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.iter().sum()
}

/// `(1/2) int ||v||_V^2 dt`, evaluated through the generating momenta.
///
/// When `spec` is given, each `v_k` is checked against `K p_k` to `1e-6`
/// relative.
pub fn path_energy(
    v: &VelocityPath,
    spec: Option<&KernelSpec>,
    momenta: Option<&[VectorField]>,
) -> Result<f64> {
    let momenta = momenta.ok_or(Error::MissingMomenta)?;
    if let Some(spec) = spec {
        for (k, (vk, pk)) in v.steps().iter().zip(momenta).enumerate() {
            let kp = apply_kernel(spec, pk)?;
            let scale = kp.max_abs().max(vk.max_abs());
            let diff = kp.add_scaled(-1.0, vk)?.max_abs();
            if diff > 1e-6 * scale {
                return Err(Error::InvalidData(format!(
                    "velocity step {k} differs from K p by {diff:.3e}"
                )));
            }
        }
    }
    Ok(permutation_invariant_sum(&step_energies(v, momenta)?))
}

/// Length `sqrt(2 E)` of a right-invariant path.
pub fn right_distance(v: &VelocityPath, momenta: &[VectorField]) -> Result<f64> {
    Ok((2.0 * path_energy(v, None, Some(momenta))?).sqrt())
}

/// Length `sqrt(2 E)` of the left-invariant path corresponding to a
/// right-invariant one (velocities and momenta traversed backwards).
pub fn left_distance(v: &VelocityPath, momenta: &[VectorField]) -> Result<f64> {
    let rev: Vec<VectorField> = momenta.iter().rev().cloned().collect();
    Ok((2.0 * path_energy(&v.reversed(), None, Some(&rev))?).sqrt())
}

/// RMS over interior pixels of the discrete convective residual
/// `(phi_{k+1} - phi_k)/dt - dphi_k . v_k`, one value per step.
///
/// `margin` pixels on each side are excluded.
pub fn convective_residual(path: &DeformationPath, v: &VelocityPath, margin: usize) -> Result<Vec<f64>> {
    if path.steps() != v.len() {
        return Err(Error::InvalidData(format!(
            "path has {} steps, velocity {}",
            path.steps(),
            v.len()
        )));
    }
    path.grid().ensure_same(v.grid())?;
    let g = *path.grid();
    let dt = v.dt();
    let mut out = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        let d0 = path.get(k).displacement();
        let d1 = path.get(k + 1).displacement();
        let gx = spatial_gradient(&d0.x_image());
        let gy = spatial_gradient(&d0.y_image());
        let vk = v.step(k);
        let mut acc = 0.0;
        let mut count = 0usize;
        for j in margin..g.height() - margin {
            for i in margin..g.width() - margin {
                let [a0, b0] = d0.get(i, j);
                let [a1, b1] = d1.get(i, j);
                let [vx, vy] = vk.get(i, j);
                let [xx, xy] = gx.get(i, j);
                let [yx, yy] = gy.get(i, j);
                let rx = (a1 - a0) / dt - (vx + xx * vx + xy * vy);
                let ry = (b1 - b0) / dt - (vy + yx * vx + yy * vy);
                acc += rx * rx + ry * ry;
                count += 1;
            }
        }
        out.push((acc / count.max(1) as f64).sqrt());
    }
    Ok(out)
}
