//! Inexact image matching.
//!
//! The control variable is a sequence of momenta `p_k`, one per time step, with
//! velocities `v_k = K p_k`. The objective is
//!
//! ```text
//! E(p) = (dt/2) sum_k <p_k, K p_k> + sim_weight * SSD(I o phi^-1(1), J; mask)
//! ```
//!
//! where `phi^-1(1)` is built by backward semi-Lagrangian steps
//! ([`crate::flows::integrate_spatial_inverse`]). [`gradient`] is the exact
//! derivative of this discrete objective, obtained by running the adjoint of
//! every interpolation backwards through the steps. The kernel must be
//! self-adjoint (all kernels built by [`KernelSpec`]'s constructors are, except
//! a symmetrized node around a partition that is not mirror symmetric).
//!
//! [`register`] runs monotone gradient descent in the momenta and returns
//! both the right-invariant path (spatial flow of `v`) and the left-invariant
//! path with the same endpoint obtained by [`correspond_left_right`].

use log::debug;

use crate::error::{Error, Result};
use crate::flows::{
    correspond_left_right, integrate_spatial, path_energy, permutation_invariant_sum,
    semi_lagrangian_step, step_energies, DeformationPath, Stepper, VelocityPath,
};
use crate::grid::{per_pixel, warp_image, zero_ext_weights, Deformation, Grid2D, Image, Mask, VectorField};
use crate::kernels::{apply_kernel, l2_pairing, KernelSpec};

/// Consecutive rejected trial steps after which descent gives up.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 30;

/// Factor applied to the trial step after an accepted iteration.
const STEP_GROWTH: f64 = 1.25;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub kernel: KernelSpec,
    pub n_timesteps: usize,
    /// Weight of the SSD term.
    pub sim_weight: f64,
    pub max_iters: usize,
    /// First trial step, as the largest velocity change it causes (pixels).
    pub step_init: f64,
    pub step_shrink: f64,
    /// Relative tolerance on the V-norm of the descent direction.
    pub tol_grad: f64,
    /// SSD is summed only where the mask is set.
    pub mask: Option<Mask>,
    /// Momentum updates are zeroed where the mask is set.
    pub momentum_mask: Option<Mask>,
}

impl MatchConfig {
    pub fn new(kernel: KernelSpec) -> Self {
        Self {
            kernel,
            n_timesteps: 16,
            sim_weight: 1.0,
            max_iters: 300,
            step_init: 1.0,
            step_shrink: 0.5,
            tol_grad: 1e-6,
            mask: None,
            momentum_mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.n_timesteps == 0 {
            return bad("n_timesteps must be at least 1");
        }
        if !(self.sim_weight.is_finite() && self.sim_weight > 0.0) {
            return bad("sim_weight must be positive");
        }
        if !(self.step_init.is_finite() && self.step_init > 0.0) {
            return bad("step_init must be positive");
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step_shrink must lie in (0, 1)");
        }
        if !(self.tol_grad.is_finite() && self.tol_grad > 0.0) {
            return bad("tol_grad must be positive");
        }
        self.kernel.validate()
    }

    fn check_inputs(&self, source: &Image, target: &Image) -> Result<Grid2D> {
        self.validate()?;
        let g = *source.grid();
        g.ensure_same(target.grid())?;
        for m in self.mask.iter().chain(self.momentum_mask.iter()) {
            g.ensure_same(m.grid())?;
        }
        Ok(g)
    }
}

/// `sum_{mask} (A - B)^2 * spacing^2`, in index order.
pub fn ssd(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    if let Some(m) = mask {
        a.grid().ensure_same(m.grid())?;
    }
    let mut acc = 0.0;
    for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_none_or(|m| m.data()[k]) {
            let d = x - y;
            acc += d * d;
        }
    }
    Ok(acc * a.grid().cell_area())
}

/// Forward pass: everything the objective and its adjoint need.
struct Forward {
    velocities: Vec<VectorField>,
    /// Inverse-map displacements `d_0 = 0, ..., d_N`.
    inverse: Vec<VectorField>,
    warped: Image,
    energy: f64,
    ssd: f64,
    objective: f64,
}

fn forward(
    momenta: &[VectorField],
    velocities: Vec<VectorField>,
    source: &Image,
    target: &Image,
    cfg: &MatchConfig,
) -> Result<Forward> {
    let g = *source.grid();
    let v = VelocityPath::new(velocities)?;
    let dt = v.dt();
    let mut inverse = Vec::with_capacity(v.len() + 1);
    inverse.push(VectorField::zeros(g));
    for field in v.steps() {
        let next = semi_lagrangian_step(inverse.last().expect("seeded"), field, dt);
        inverse.push(next);
    }
    let phi_inv = Deformation::from_displacement(inverse.last().expect("seeded").clone());
    let warped = warp_image(source, &phi_inv)?;
    let energy = permutation_invariant_sum(&step_energies(&v, momenta)?);
    let ssd = ssd(&warped, target, cfg.mask.as_ref())?;
    let objective = energy + cfg.sim_weight * ssd;
    Ok(Forward {
        velocities: v.steps().to_vec(),
        inverse,
        warped,
        energy,
        ssd,
        objective,
    })
}

fn check_momenta(momenta: &[VectorField], grid: &Grid2D, cfg: &MatchConfig) -> Result<()> {
    if momenta.len() != cfg.n_timesteps {
        return Err(Error::InvalidData(format!(
            "{} momenta for {} time steps",
            momenta.len(),
            cfg.n_timesteps
        )));
    }
    for p in momenta {
        grid.ensure_same(p.grid())?;
    }
    Ok(())
}

fn kernel_velocities(momenta: &[VectorField], cfg: &MatchConfig) -> Result<Vec<VectorField>> {
    momenta.iter().map(|p| apply_kernel(&cfg.kernel, p)).collect()
}

/// Value of the matching objective for the given momenta.
pub fn objective(momenta: &[VectorField], source: &Image, target: &Image, cfg: &MatchConfig) -> Result<f64> {
    let g = cfg.check_inputs(source, target)?;
    check_momenta(momenta, &g, cfg)?;
    let v = kernel_velocities(momenta, cfg)?;
    Ok(forward(momenta, v, source, target, cfg)?.objective)
}

/// Adjoint of the similarity term with respect to each velocity field.
fn similarity_adjoint(fwd: &Forward, source: &Image, target: &Image, cfg: &MatchConfig) -> Vec<VectorField> {
    let g = *source.grid();
    let s = g.spacing();
    let n = fwd.velocities.len();
    let dt = 1.0 / n as f64;
    let area = g.cell_area();
    let last = &fwd.inverse[n];

    // d SSD / d d_N
    let seed = per_pixel(&g, |i, j| {
        let k = g.index(i, j);
        if cfg.mask.as_ref().is_some_and(|m| !m.data()[k]) {
            return (0.0, 0.0);
        }
        let [dx, dy] = last.get(i, j);
        let (val, grad) = source.sample_index_grad(i as f64 + dx / s, j as f64 + dy / s);
        let r = 2.0 * cfg.sim_weight * (val - target.data()[k]) * area;
        (r * grad[0], r * grad[1])
    });
    let (mut ax, mut ay): (Vec<f64>, Vec<f64>) = seed.into_iter().unzip();

    let mut out = vec![VectorField::zeros(g); n];
    for k in (0..n).rev() {
        let v = &fwd.velocities[k];
        let prev = &fwd.inverse[k];
        let mut vx_hat = vec![0.0; g.len()];
        let mut vy_hat = vec![0.0; g.len()];
        let mut px_hat = vec![0.0; g.len()];
        let mut py_hat = vec![0.0; g.len()];
        for j in 0..g.height() {
            for i in 0..g.width() {
                let idx = g.index(i, j);
                let (bx, by) = (ax[idx], ay[idx]);
                if bx == 0.0 && by == 0.0 {
                    continue;
                }
                let [vx, vy] = v.get(i, j);
                let mu = i as f64 - 0.5 * dt * vx / s;
                let mv = j as f64 - 0.5 * dt * vy / s;
                let ([wx, wy], jv) = v.sample_index_jacobian(mu, mv);
                let yu = i as f64 - dt * wx / s;
                let yv = j as f64 - dt * wy / s;
                let (_, jd) = prev.sample_index_jacobian(yu, yv);

                // d_{k+1} = (y - x) + d_k(y)
                let yx = bx + jd[0][0] * bx + jd[1][0] * by;
                let yy = by + jd[0][1] * bx + jd[1][1] * by;
                // y = x - dt w
                let (wxh, wyh) = (-dt * yx, -dt * yy);
                // w = v(m): scatter into v, and chain into m
                for (n_idx, wt) in zero_ext_weights(&g, mu, mv) {
                    if wt != 0.0 {
                        vx_hat[n_idx] += wt * wxh;
                        vy_hat[n_idx] += wt * wyh;
                    }
                }
                let mxh = jv[0][0] * wxh + jv[1][0] * wyh;
                let myh = jv[0][1] * wxh + jv[1][1] * wyh;
                // m = x - dt/2 v(x)
                vx_hat[idx] += -0.5 * dt * mxh;
                vy_hat[idx] += -0.5 * dt * myh;
                // d_k(y): scatter
                if k > 0 {
                    for (n_idx, wt) in zero_ext_weights(&g, yu, yv) {
                        if wt != 0.0 {
                            px_hat[n_idx] += wt * bx;
                            py_hat[n_idx] += wt * by;
                        }
                    }
                }
            }
        }
        out[k] = VectorField::from_raw(g, vx_hat, vy_hat);
        ax = px_hat;
        ay = py_hat;
    }
    out
}

fn masked_update(field: VectorField, momentum_mask: Option<&Mask>) -> VectorField {
    match momentum_mask {
        None => field,
        Some(m) => {
            let keep = m.complement().to_image();
            field.weighted(&keep).expect("grids checked")
        }
    }
}

/// Gradient pieces at one iterate.
struct Descent {
    /// `dt h^2 p_k + (1 - momentum_mask) vhat_k`: the update applied to the momenta.
    direction: Vec<VectorField>,
    /// `K direction_k`: the L2 gradient with respect to the momenta.
    smoothed: Vec<VectorField>,
}

fn descent(
    momenta: &[VectorField],
    fwd: &Forward,
    source: &Image,
    target: &Image,
    cfg: &MatchConfig,
) -> Result<Descent> {
    let area = source.grid().cell_area();
    let dt = 1.0 / cfg.n_timesteps as f64;
    let adj = similarity_adjoint(fwd, source, target, cfg);
    let mut direction = Vec::with_capacity(adj.len());
    let mut smoothed = Vec::with_capacity(adj.len());
    for ((a, p), v) in adj.into_iter().zip(momenta).zip(&fwd.velocities) {
        let a = masked_update(a, cfg.momentum_mask.as_ref());
        let ka = apply_kernel(&cfg.kernel, &a)?;
        direction.push(a.add_scaled(dt * area, p)?);
        smoothed.push(ka.add_scaled(dt * area, v)?);
    }
    Ok(Descent { direction, smoothed })
}

/// Derivative of [`objective`] with respect to every momentum sample.
///
/// With a momentum mask, the similarity part is masked before smoothing, so
/// the result is then a projected gradient rather than the plain derivative.
pub fn gradient(
    momenta: &[VectorField],
    source: &Image,
    target: &Image,
    cfg: &MatchConfig,
) -> Result<Vec<VectorField>> {
    let g = cfg.check_inputs(source, target)?;
    check_momenta(momenta, &g, cfg)?;
    let v = kernel_velocities(momenta, cfg)?;
    let fwd = forward(momenta, v, source, target, cfg)?;
    Ok(descent(momenta, &fwd, source, target, cfg)?.smoothed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub energy: f64,
    pub ssd: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Descent direction fell below the tolerance.
    Converged,
    MaxIterations,
    /// Too many consecutive rejected steps.
    StepRejected,
}

/// State handed to an observer after each accepted step (and the start).
pub struct Iterate<'a> {
    pub iteration: usize,
    pub momenta: &'a [VectorField],
    pub velocities: &'a [VectorField],
    pub entry: TraceEntry,
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    pub momenta: Vec<VectorField>,
    pub velocity: VelocityPath,
    /// Right-invariant path: spatial flow of `velocity`.
    pub phi_right: DeformationPath,
    /// Left-invariant path `t -> phi(1) o phi^-1(1 - t)`.
    pub phi_left: DeformationPath,
    /// Inverse endpoint used to deform the source.
    pub phi_inv: Deformation,
    pub warped: Image,
    pub trace: Vec<TraceEntry>,
    pub final_ssd: f64,
    pub final_energy: f64,
    pub stop: StopReason,
}

impl MatchResult {
    pub fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|e| e.objective).collect()
    }

    /// Energy of the left path, whose convective velocities are the right
    /// velocities traversed backwards.
    pub fn left_energy(&self) -> Result<f64> {
        let rev: Vec<VectorField> = self.momenta.iter().rev().cloned().collect();
        path_energy(&self.velocity.reversed(), None, Some(&rev))
    }

    pub fn right_distance(&self) -> Result<f64> {
        crate::flows::right_distance(&self.velocity, &self.momenta)
    }

    pub fn left_distance(&self) -> Result<f64> {
        crate::flows::left_distance(&self.velocity, &self.momenta)
    }

    /// Trace as CSV with header `iteration,energy,ssd,objective`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,energy,ssd,objective\n");
        for e in &self.trace {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                e.iteration, e.energy, e.ssd, e.objective
            ));
        }
        out
    }
}

/// V-norm of a descent direction: `sqrt(dt sum_k <d_k, K d_k>)`.
fn direction_norm(d: &Descent, dt: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (a, ka) in d.direction.iter().zip(&d.smoothed) {
        acc += l2_pairing(a, ka)?;
    }
    Ok((dt * acc).max(0.0).sqrt())
}

pub fn register(source: &Image, target: &Image, cfg: &MatchConfig) -> Result<MatchResult> {
    register_observed(source, target, cfg, |_| {})
}

/// Monotone gradient descent from zero momenta.
///
/// Each iteration computes the masked momentum update `u_k`, then tries
/// `p <- p - alpha u` with `alpha` chosen so the largest velocity change is
/// the current trial step (pixels). A trial is accepted only if the objective
/// decreases; otherwise the step shrinks by `step_shrink`. After an accepted
/// step the trial step grows by 25%.
pub fn register_observed(
    source: &Image,
    target: &Image,
    cfg: &MatchConfig,
    mut observer: impl FnMut(&Iterate<'_>),
) -> Result<MatchResult> {
    let g = cfg.check_inputs(source, target)?;
    let n = cfg.n_timesteps;
    let dt = 1.0 / n as f64;
    let mut momenta = vec![VectorField::zeros(g); n];
    let mut fwd = forward(&momenta, vec![VectorField::zeros(g); n], source, target, cfg)?;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        energy: fwd.energy,
        ssd: fwd.ssd,
        objective: fwd.objective,
    }];
    observer(&Iterate {
        iteration: 0,
        momenta: &momenta,
        velocities: &fwd.velocities,
        entry: trace[0],
    });

    let mut step_px = cfg.step_init;
    let mut initial_norm = None;
    let mut stop = StopReason::MaxIterations;
    let mut rejections = 0usize;

    for iteration in 1..=cfg.max_iters {
        let d = descent(&momenta, &fwd, source, target, cfg)?;
        let norm = direction_norm(&d, dt)?;
        let reference = *initial_norm.get_or_insert(norm);
        if norm == 0.0 || norm < cfg.tol_grad * reference {
            stop = StopReason::Converged;
            break;
        }
        let max_change_px = d
            .smoothed
            .iter()
            .map(|f| f.max_norm())
            .fold(0.0, f64::max)
            / g.spacing();

        let mut accepted = None;
        while rejections < MAX_CONSECUTIVE_REJECTIONS {
            let alpha = step_px / max_change_px;
            let trial_p: Vec<VectorField> = momenta
                .iter()
                .zip(&d.direction)
                .map(|(p, u)| p.add_scaled(-alpha, u))
                .collect::<Result<_>>()?;
            let trial_v: Vec<VectorField> = fwd
                .velocities
                .iter()
                .zip(&d.smoothed)
                .map(|(v, ku)| v.add_scaled(-alpha, ku))
                .collect::<Result<_>>()?;
            let trial = forward(&trial_p, trial_v, source, target, cfg)?;
            if trial.objective < fwd.objective {
                accepted = Some((trial_p, trial));
                rejections = 0;
                break;
            }
            rejections += 1;
            step_px *= cfg.step_shrink;
        }
        let Some((p, f)) = accepted else {
            stop = StopReason::StepRejected;
            break;
        };
        momenta = p;
        fwd = f;
        step_px *= STEP_GROWTH;
        let entry = TraceEntry {
            iteration,
            energy: fwd.energy,
            ssd: fwd.ssd,
            objective: fwd.objective,
        };
        debug!(
            "iter {iteration}: objective {:.6e} energy {:.4e} ssd {:.4e} step {step_px:.3e}",
            entry.objective, entry.energy, entry.ssd
        );
        trace.push(entry);
        observer(&Iterate {
            iteration,
            momenta: &momenta,
            velocities: &fwd.velocities,
            entry,
        });
    }

    let velocity = VelocityPath::new(fwd.velocities.clone())?;
    let phi_right = integrate_spatial(&velocity, Stepper::Rk2);
    let phi_left = correspond_left_right(&phi_right)?;
    let final_energy = path_energy(&velocity, None, Some(&momenta))?;
    let phi_inv = Deformation::from_displacement(fwd.inverse[n].clone());
    Ok(MatchResult {
        momenta,
        velocity,
        phi_right,
        phi_left,
        phi_inv,
        warped: fwd.warped,
        trace,
        final_ssd: fwd.ssd,
        final_energy,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid2D {
        Grid2D::square(n).unwrap()
    }

    fn blob(g: Grid2D, cx: f64, cy: f64, s: f64) -> Image {
        Image::from_fn(g, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
    }

    #[test]
    fn ssd_examples() {
        let g = grid(10);
        let a = Image::filled(g, 1.0);
        let b = Image::filled(g, 0.0);
        assert_eq!(ssd(&a, &a, None).unwrap(), 0.0);
        assert_eq!(ssd(&a, &b, None).unwrap(), 100.0);
        let m = Mask::from_fn(g, |i, j| i < 4 && j < 10);
        assert_eq!(m.count(), 40);
        assert_eq!(ssd(&a, &b, Some(&m)).unwrap(), 40.0);
        assert!(ssd(&a, &Image::filled(grid(11), 0.0), None).is_err());
    }

    #[test]
    fn objective_at_zero_momenta() {
        let g = grid(16);
        let cfg = MatchConfig {
            n_timesteps: 4,
            sim_weight: 3.0,
            ..MatchConfig::new(KernelSpec::gaussian(2.0).unwrap())
        };
        let i = blob(g, 7.0, 8.0, 2.0);
        let j = blob(g, 8.0, 8.0, 2.0);
        let zero = vec![VectorField::zeros(g); 4];
        assert_eq!(objective(&zero, &i, &i, &cfg).unwrap(), 0.0);
        let expected = 3.0 * ssd(&i, &j, None).unwrap();
        assert_eq!(objective(&zero, &i, &j, &cfg).unwrap(), expected);
    }

    #[test]
    fn gradient_vanishes_at_global_minimum() {
        let g = grid(16);
        let cfg = MatchConfig {
            n_timesteps: 3,
            ..MatchConfig::new(KernelSpec::gaussian(2.0).unwrap())
        };
        let i = blob(g, 7.0, 8.0, 2.0);
        let zero = vec![VectorField::zeros(g); 3];
        for gk in gradient(&zero, &i, &i, &cfg).unwrap() {
            assert_eq!(gk.max_abs(), 0.0);
        }
    }

    #[test]
    fn full_momentum_mask_freezes_descent() {
        let g = grid(16);
        let cfg = MatchConfig {
            n_timesteps: 2,
            max_iters: 10,
            momentum_mask: Some(Mask::filled(g, true)),
            ..MatchConfig::new(KernelSpec::gaussian(2.0).unwrap())
        };
        let i = blob(g, 7.0, 8.0, 2.0);
        let j = blob(g, 9.0, 8.0, 2.0);
        let zero = vec![VectorField::zeros(g); 2];
        for gk in gradient(&zero, &i, &j, &cfg).unwrap() {
            assert_eq!(gk.max_abs(), 0.0);
        }
        let r = register(&i, &j, &cfg).unwrap();
        assert!(r.momenta.iter().all(|p| p.max_abs() == 0.0));
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn identical_images_stop_immediately() {
        let g = grid(16);
        let cfg = MatchConfig {
            n_timesteps: 4,
            ..MatchConfig::new(KernelSpec::gaussian(2.0).unwrap())
        };
        let i = blob(g, 7.0, 8.0, 2.0);
        let r = register(&i, &i, &cfg).unwrap();
        assert_eq!(r.objective_trace(), vec![0.0]);
        assert_eq!(r.stop, StopReason::Converged);
        assert!(r.momenta.iter().all(|p| p.max_abs() == 0.0));
        assert_eq!(r.warped, i);
    }

    #[test]
    fn config_validation() {
        let base = MatchConfig::new(KernelSpec::gaussian(2.0).unwrap());
        assert!(base.validate().is_ok());
        for bad in [
            MatchConfig { n_timesteps: 0, ..base.clone() },
            MatchConfig { sim_weight: 0.0, ..base.clone() },
            MatchConfig { step_init: -1.0, ..base.clone() },
            MatchConfig { step_shrink: 1.0, ..base.clone() },
            MatchConfig { tol_grad: 0.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn momenta_count_is_checked() {
        let g = grid(8);
        let cfg = MatchConfig {
            n_timesteps: 3,
            ..MatchConfig::new(KernelSpec::gaussian(1.0).unwrap())
        };
        let i = Image::filled(g, 0.0);
        assert!(objective(&[VectorField::zeros(g)], &i, &i, &cfg).is_err());
    }
}
