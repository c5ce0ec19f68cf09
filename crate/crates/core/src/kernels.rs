//! Reproducing-kernel algebra on vector fields.
//!
//! A [`KernelSpec`] is a small expression tree. Leaves are unnormalized
//! Gaussians with `g(0) = weight` (default 1). Inner nodes build sums, soft
//! reflection symmetry `(Id + c Pi) K` and partition-of-unity mixtures
//! `sum_i chi_i K_i chi_i`. Every family is self-adjoint for the discrete L2
//! pairing as long as a symmetrized node wraps a kernel that commutes with the
//! mid-line reflection (Gaussians do).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image, Mask, VectorField};

/// Tolerance on `sum_i chi_i = 1` when a partition is built or validated.
pub const PARTITION_SUM_TOL: f64 = 1e-6;

/// Taps are kept while `exp(-r^2 / 2 sigma^2)` stays above this level.
const TAP_FLOOR: f64 = 1e-16;

/// One region of a partition kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPart {
    pub weights: Image,
    pub kernel: KernelSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `weight * exp(-|x - y|^2 / (2 sigma^2))`, sigma in physical units.
    Gaussian { sigma: f64, weight: f64 },
    Sum(Vec<KernelSpec>),
    /// `(Id + c Pi) o inner`.
    Symmetrized { c: f64, inner: Box<KernelSpec> },
    /// `sum_i chi_i K_i chi_i`.
    Partition(Vec<PartitionPart>),
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::weighted_gaussian(sigma, 1.0)
    }

    pub fn weighted_gaussian(sigma: f64, weight: f64) -> Result<Self> {
        let k = KernelSpec::Gaussian { sigma, weight };
        k.validate()?;
        Ok(k)
    }

    pub fn sum(terms: Vec<KernelSpec>) -> Result<Self> {
        let k = KernelSpec::Sum(terms);
        k.validate()?;
        Ok(k)
    }

    pub fn symmetrized(c: f64, inner: KernelSpec) -> Result<Self> {
        let k = KernelSpec::Symmetrized {
            c,
            inner: Box::new(inner),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn partition(parts: Vec<PartitionPart>) -> Result<Self> {
        let k = KernelSpec::Partition(parts);
        k.validate()?;
        Ok(k)
    }

    /// `(1/2)(Id + Pi) K_sigma`, the kernel of the exactly symmetric subspace.
    /// The 1/2 lives in the Gaussian weight.
    pub fn symmetric_projection(sigma: f64) -> Result<Self> {
        Self::symmetrized(1.0, Self::weighted_gaussian(sigma, 0.5)?)
    }

    /// `(Id + c Pi) K_large + K_small`.
    pub fn soft_symmetric_mixture(c: f64, sigma_large: f64, sigma_small: f64) -> Result<Self> {
        Self::sum(vec![
            Self::symmetrized(c, Self::gaussian(sigma_large)?)?,
            Self::gaussian(sigma_small)?,
        ])
    }

    /// Structural validation of parameters and partition weights.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { sigma, weight } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "gaussian sigma must be positive, got {sigma}"
                    )));
                }
                if !(weight.is_finite() && *weight > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "gaussian weight must be positive, got {weight}"
                    )));
                }
                Ok(())
            }
            KernelSpec::Sum(terms) => {
                if terms.is_empty() {
                    return Err(Error::InvalidKernel("sum needs at least one term".into()));
                }
                terms.iter().try_for_each(KernelSpec::validate)
            }
            KernelSpec::Symmetrized { c, inner } => {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::InvalidKernel(format!(
                        "symmetry factor c must lie in [0, 1], got {c}"
                    )));
                }
                inner.validate()
            }
            KernelSpec::Partition(parts) => {
                let Some(first) = parts.first() else {
                    return Err(Error::InvalidKernel("partition needs at least one part".into()));
                };
                let grid = *first.weights.grid();
                let mut total = vec![0.0; grid.len()];
                for part in parts {
                    grid.ensure_same(part.weights.grid())?;
                    part.kernel.validate()?;
                    for (t, &w) in total.iter_mut().zip(part.weights.data()) {
                        if !(0.0..=1.0).contains(&w) {
                            return Err(Error::InvalidKernel(format!(
                                "partition weight {w} outside [0, 1]"
                            )));
                        }
                        *t += w;
                    }
                }
                if let Some(k) = total
                    .iter()
                    .position(|t| (t - 1.0).abs() > PARTITION_SUM_TOL)
                {
                    return Err(Error::InvalidKernel(format!(
                        "partition weights sum to {} at pixel {k}",
                        total[k]
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Mirror about the vertical mid-line: `u_x(i) = -v_x(W-1-i)`, `u_y(i) = v_y(W-1-i)`.
pub fn reflect(field: &VectorField) -> VectorField {
    let g = *field.grid();
    let w = g.width();
    let (vx, vy) = (field.ux(), field.uy());
    let mut ux = vec![0.0; g.len()];
    let mut uy = vec![0.0; g.len()];
    for j in 0..g.height() {
        let row = j * w;
        for i in 0..w {
            let src = row + (w - 1 - i);
            ux[row + i] = -vx[src];
            uy[row + i] = vy[src];
        }
    }
    VectorField::from_raw(g, ux, uy)
}

fn gaussian_taps(sigma: f64, spacing: f64, max_radius: usize) -> Vec<f64> {
    let reach = sigma * (-2.0 * TAP_FLOOR.ln()).sqrt();
    let radius = ((reach / spacing).ceil() as usize).min(max_radius);
    (0..=radius)
        .map(|t| {
            let r = t as f64 * spacing;
            (-r * r / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable zero-padded convolution with a symmetric tap vector.
fn convolve_separable(grid: &Grid2D, data: &[f64], taps: &[f64]) -> Vec<f64> {
    let (w, h) = (grid.width(), grid.height());
    let r = taps.len() - 1;

    let mut tmp = vec![0.0; grid.len()];
    tmp.par_chunks_mut(w).enumerate().for_each(|(j, out)| {
        let src = &data[j * w..(j + 1) * w];
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(w - 1);
            let mut acc = 0.0;
            for (k, s) in src.iter().enumerate().take(hi + 1).skip(lo) {
                acc += taps[i.abs_diff(k)] * s;
            }
            *o = acc;
        }
    });

    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        let lo = j.saturating_sub(r);
        let hi = (j + r).min(h - 1);
        for jj in lo..=hi {
            let t = taps[j.abs_diff(jj)];
            let src = &tmp[jj * w..(jj + 1) * w];
            for (o, s) in row.iter_mut().zip(src) {
                *o += t * s;
            }
        }
    });
    out
}

/// Unnormalized Gaussian smoothing of a scalar image (zero padded).
pub fn gaussian_smooth(img: &Image, sigma: f64) -> Image {
    let g = *img.grid();
    let taps = gaussian_taps(sigma, g.spacing(), g.width().max(g.height()));
    Image::from_raw(g, convolve_separable(&g, img.data(), &taps))
}

fn gaussian_apply(sigma: f64, weight: f64, p: &VectorField) -> VectorField {
    let g = *p.grid();
    let taps = gaussian_taps(sigma, g.spacing(), g.width().max(g.height()));
    let mut ux = convolve_separable(&g, p.ux(), &taps);
    let mut uy = convolve_separable(&g, p.uy(), &taps);
    if weight != 1.0 {
        ux.iter_mut().chain(uy.iter_mut()).for_each(|v| *v *= weight);
    }
    VectorField::from_raw(g, ux, uy)
}

/// `v = K * p`.
pub fn apply_kernel(spec: &KernelSpec, p: &VectorField) -> Result<VectorField> {
    spec.validate()?;
    apply_unchecked(spec, p)
}

fn accumulate(acc: &mut VectorField, term: &VectorField) {
    let (ax, ay) = acc.components_mut();
    for (a, t) in ax.iter_mut().zip(term.ux()) {
        *a += t;
    }
    for (a, t) in ay.iter_mut().zip(term.uy()) {
        *a += t;
    }
}

fn apply_unchecked(spec: &KernelSpec, p: &VectorField) -> Result<VectorField> {
    match spec {
        KernelSpec::Gaussian { sigma, weight } => Ok(gaussian_apply(*sigma, *weight, p)),
        KernelSpec::Sum(terms) => {
            let mut acc = apply_unchecked(&terms[0], p)?;
            for t in &terms[1..] {
                accumulate(&mut acc, &apply_unchecked(t, p)?);
            }
            Ok(acc)
        }
        KernelSpec::Symmetrized { c, inner } => {
            let k = apply_unchecked(inner, p)?;
            if *c == 0.0 {
                return Ok(k);
            }
            let r = reflect(&k);
            k.add_scaled(*c, &r)
        }
        KernelSpec::Partition(parts) => {
            let mut acc: Option<VectorField> = None;
            for part in parts {
                let inner = apply_unchecked(&part.kernel, &p.weighted(&part.weights)?)?;
                let term = inner.weighted(&part.weights)?;
                match acc.as_mut() {
                    None => acc = Some(term),
                    Some(a) => accumulate(a, &term),
                }
            }
            Ok(acc.expect("validated partition is nonempty"))
        }
    }
}

/// Discrete L2 pairing `sum_x p(x) . q(x) * spacing^2`.
pub fn l2_pairing(p: &VectorField, q: &VectorField) -> Result<f64> {
    Ok(p.dot(q)? * p.grid().cell_area())
}

/// `||K p||_V^2 = <p, K p>`; rejects clearly negative values.
pub fn vnorm_sq(spec: &KernelSpec, p: &VectorField) -> Result<f64> {
    let v = apply_kernel(spec, p)?;
    let value = l2_pairing(p, &v)?;
    let norm_sq = p.norm_sq() * p.grid().cell_area();
    check_psd(value, norm_sq)
}

fn check_psd(value: f64, norm_sq: f64) -> Result<f64> {
    if value < -1e-9 * norm_sq {
        Err(Error::NotPsd { value, norm_sq })
    } else {
        Ok(value)
    }
}

/// Smooth partition of unity from a set of region masks.
///
/// Each mask is blurred with a Gaussian of width `blur_sigma` (physical units,
/// zero means no blur) and the stack is renormalized pointwise to sum to one.
pub fn make_partition_weights(masks: &[Mask], blur_sigma: f64) -> Result<Vec<Image>> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidKernel("partition needs at least one mask".into()));
    };
    let grid = *first.grid();
    for m in masks {
        grid.ensure_same(m.grid())?;
    }
    if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
        return Err(Error::InvalidKernel(format!(
            "blur sigma must be non-negative, got {blur_sigma}"
        )));
    }
    let blurred: Vec<Image> = masks
        .iter()
        .map(|m| {
            let img = m.to_image();
            if blur_sigma > 0.0 {
                gaussian_smooth(&img, blur_sigma)
            } else {
                img
            }
        })
        .collect();

    let mut total = vec![0.0; grid.len()];
    for b in &blurred {
        for (t, v) in total.iter_mut().zip(b.data()) {
            *t += v;
        }
    }
    if let Some(k) = total.iter().position(|&t| t < 1e-6) {
        return Err(Error::DegeneratePartition {
            i: k % grid.width(),
            j: k / grid.width(),
            sum: total[k],
        });
    }
    Ok(blurred
        .into_iter()
        .map(|b| {
            let data = b
                .data()
                .iter()
                .zip(&total)
                .map(|(v, t)| (v / t).clamp(0.0, 1.0))
                .collect();
            Image::from_raw(grid, data)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid2D, rng: &mut ChaCha8Rng) -> VectorField {
        let ux = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let uy = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VectorField::new(grid, ux, uy).unwrap()
    }

    fn impulse(grid: Grid2D, i: usize, j: usize, w: f64) -> VectorField {
        let mut ux = vec![0.0; grid.len()];
        ux[grid.index(i, j)] = w;
        VectorField::new(grid, ux, vec![0.0; grid.len()]).unwrap()
    }

    #[test]
    fn reflect_examples() {
        let g = Grid2D::new(5, 3, 1.0).unwrap();
        assert_eq!(reflect(&VectorField::zeros(g)).max_abs(), 0.0);
        let c = VectorField::from_fn(g, |_, _| [1.0, 2.0]);
        let r = reflect(&c);
        assert!(r.ux().iter().all(|&v| v == -1.0));
        assert!(r.uy().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn reflect_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in [6, 7] {
            let g = Grid2D::new(w, 4, 0.5).unwrap();
            let f = random_field(g, &mut rng);
            assert_eq!(reflect(&reflect(&f)), f);
        }
    }

    #[test]
    fn impulse_response_is_peak_one_gaussian() {
        let g = Grid2D::square(32).unwrap();
        let v = apply_kernel(&KernelSpec::gaussian(3.0).unwrap(), &impulse(g, 10, 20, 1.0)).unwrap();
        assert_eq!(v.get(10, 20)[0], 1.0);
        let expected = (-(4.0f64 + 1.0) / 18.0).exp();
        assert!((v.get(12, 21)[0] - expected).abs() < 1e-15);
        assert_eq!(v.uy().iter().fold(0.0f64, |m, x| m.max(x.abs())), 0.0);
    }

    #[test]
    fn symmetrized_c0_is_bitwise_inner() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid2D::square(16).unwrap();
        let p = random_field(g, &mut rng);
        let inner = KernelSpec::gaussian(2.0).unwrap();
        let sym = KernelSpec::symmetrized(0.0, inner.clone()).unwrap();
        assert_eq!(apply_kernel(&sym, &p).unwrap(), apply_kernel(&inner, &p).unwrap());
    }

    #[test]
    fn symmetrized_c1_output_is_mirror_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid2D::new(15, 10, 1.0).unwrap();
        let p = random_field(g, &mut rng);
        let sym = KernelSpec::symmetrized(1.0, KernelSpec::gaussian(2.5).unwrap()).unwrap();
        let v = apply_kernel(&sym, &p).unwrap();
        assert_eq!(reflect(&v), v);
    }

    #[test]
    fn zero_momentum_maps_to_zero() {
        let g = Grid2D::square(8).unwrap();
        let w = Image::filled(g, 1.0);
        let spec = KernelSpec::sum(vec![
            KernelSpec::soft_symmetric_mixture(0.5, 3.0, 1.0).unwrap(),
            KernelSpec::partition(vec![PartitionPart {
                weights: w,
                kernel: KernelSpec::gaussian(1.0).unwrap(),
            }])
            .unwrap(),
        ])
        .unwrap();
        assert_eq!(apply_kernel(&spec, &VectorField::zeros(g)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn vnorm_of_impulse() {
        let g = Grid2D::new(16, 16, 0.5).unwrap();
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let n = vnorm_sq(&spec, &impulse(g, 7, 8, 3.0)).unwrap();
        assert!((n - 9.0 * 0.25).abs() < 1e-14);
        assert_eq!(vnorm_sq(&spec, &VectorField::zeros(g)).unwrap(), 0.0);
    }

    #[test]
    fn single_part_partition_is_inner_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Grid2D::square(12).unwrap();
        let p = random_field(g, &mut rng);
        let inner = KernelSpec::gaussian(2.0).unwrap();
        let part = KernelSpec::partition(vec![PartitionPart {
            weights: Image::filled(g, 1.0),
            kernel: inner.clone(),
        }])
        .unwrap();
        assert_eq!(apply_kernel(&part, &p).unwrap(), apply_kernel(&inner, &p).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::sum(vec![]).is_err());
        assert!(KernelSpec::symmetrized(1.5, KernelSpec::gaussian(1.0).unwrap()).is_err());
        assert!(KernelSpec::symmetrized(-0.1, KernelSpec::gaussian(1.0).unwrap()).is_err());
        let g = Grid2D::square(4).unwrap();
        let half = Image::filled(g, 0.5);
        assert!(KernelSpec::partition(vec![PartitionPart {
            weights: half,
            kernel: KernelSpec::gaussian(1.0).unwrap(),
        }])
        .is_err());
    }

    #[test]
    fn partition_grid_mismatch() {
        let g = Grid2D::square(4).unwrap();
        let spec = KernelSpec::partition(vec![PartitionPart {
            weights: Image::filled(g, 1.0),
            kernel: KernelSpec::gaussian(1.0).unwrap(),
        }])
        .unwrap();
        let p = VectorField::zeros(Grid2D::square(5).unwrap());
        assert!(matches!(apply_kernel(&spec, &p), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn partition_weights_examples() {
        let g = Grid2D::square(32).unwrap();
        let ones = make_partition_weights(&[Mask::filled(g, true)], 3.0).unwrap();
        assert!(ones[0].data().iter().all(|&v| v == 1.0));

        let left = Mask::from_fn(g, |i, _| i < 16);
        let right = left.complement();
        let sharp = make_partition_weights(&[left.clone(), right.clone()], 0.0).unwrap();
        assert_eq!(sharp[0], left.to_image());
        assert_eq!(sharp[1], right.to_image());

        let smooth = make_partition_weights(&[left, right], 4.0).unwrap();
        for k in 0..g.len() {
            let s = smooth[0].data()[k] + smooth[1].data()[k];
            assert!((s - 1.0).abs() < 1e-12);
        }
        // monotone transition across the cut
        let row: Vec<f64> = (0..32).map(|i| smooth[0].get(i, 16)).collect();
        assert!(row.windows(2).all(|w| w[1] <= w[0]));
        assert!(row[10] > 0.9 && row[21] < 0.1);
    }

    #[test]
    fn degenerate_partition() {
        let g = Grid2D::square(8).unwrap();
        let m = Mask::from_fn(g, |i, _| i < 2);
        assert!(matches!(
            make_partition_weights(&[m], 0.0),
            Err(Error::DegeneratePartition { .. })
        ));
    }

    #[test]
    fn not_psd_is_reported() {
        assert!(matches!(check_psd(-1e-3, 1.0), Err(Error::NotPsd { .. })));
        assert_eq!(check_psd(-1e-12, 1.0).unwrap(), -1e-12);
        let bad = KernelSpec::Gaussian {
            sigma: 1.0,
            weight: -1.0,
        };
        let g = Grid2D::square(8).unwrap();
        assert!(matches!(
            vnorm_sq(&bad, &impulse(g, 2, 2, 1.0)),
            Err(Error::InvalidKernel(_))
        ));
    }
}
