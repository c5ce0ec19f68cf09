use diffeo_core::flows::{integrate_spatial, Stepper};
use diffeo_core::grid::{Grid2D, Image, VectorField};
use diffeo_core::kernels::{apply_kernel, gaussian_smooth, reflect, KernelSpec};
use diffeo_core::matching::{gradient, objective, register, register_observed, MatchConfig, StopReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob(g: Grid2D, cx: f64, cy: f64, r: f64) -> Image {
    Image::from_fn(g, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
}

fn noise_field(g: Grid2D, rng: &mut ChaCha8Rng, amp: f64) -> VectorField {
    let nx: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-amp..amp)).collect();
    let ny: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-amp..amp)).collect();
    VectorField::new(g, nx, ny).unwrap()
}

fn smooth_noise(g: Grid2D, rng: &mut ChaCha8Rng, sigma: f64) -> VectorField {
    let f = noise_field(g, rng, 1.0);
    let sx = gaussian_smooth(&f.x_image(), sigma);
    let sy = gaussian_smooth(&f.y_image(), sigma);
    let f = VectorField::new(g, sx.into_data(), sy.into_data()).unwrap();
    f.scaled(1.0 / f.max_norm())
}

#[test]
fn gradient_matches_finite_differences() {
    let g = Grid2D::square(32).unwrap();
    let source = blob(g, 14.0, 15.0, 5.0);
    let target = blob(g, 17.0, 16.0, 5.5);
    let mut cfg = MatchConfig::new(KernelSpec::gaussian(4.0).unwrap());
    cfg.n_timesteps = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let momenta: Vec<VectorField> = (0..8).map(|_| noise_field(g, &mut rng, 0.02)).collect();
    let grad = gradient(&momenta, &source, &target, &cfg).unwrap();

    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dir: Vec<VectorField> = (0..8).map(|_| smooth_noise(g, &mut rng, 2.0)).collect();
        // unit velocity perturbation, so eps is in pixels
        let top = dir.iter().map(|d| apply_kernel(&cfg.kernel, d).unwrap().max_norm()).fold(0.0, f64::max);
        let dir: Vec<VectorField> = dir.iter().map(|d| d.scaled(1.0 / top)).collect();
        let shifted = |s: f64| -> Vec<VectorField> {
            momenta.iter().zip(&dir).map(|(p, d)| p.add_scaled(s, d).unwrap()).collect()
        };
        let fp = objective(&shifted(eps), &source, &target, &cfg).unwrap();
        let fm = objective(&shifted(-eps), &source, &target, &cfg).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        let an: f64 = grad.iter().zip(&dir).map(|(a, d)| a.dot(d).unwrap()).sum();
        let rel = (fd - an).abs() / an.abs().max(1e-12);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn translated_blob_is_matched() {
    let g = Grid2D::square(64).unwrap();
    let source = blob(g, 29.0, 32.0, 7.0);
    let target = blob(g, 31.0, 32.0, 7.0);
    let mut cfg = MatchConfig::new(KernelSpec::gaussian(8.0).unwrap());
    cfg.n_timesteps = 8;
    cfg.max_iters = 200;
    cfg.sim_weight = 100.0;
    let res = register(&source, &target, &cfg).unwrap();
    let initial = res.trace[0].ssd;
    assert!(res.final_ssd < 0.05 * initial, "{} vs {}", res.final_ssd, initial);
    let obj = res.objective_trace();
    assert!(obj.windows(2).all(|w| w[1] < w[0]));
    // the right path reproduces the warp endpoint
    let phi = integrate_spatial(&res.velocity, Stepper::Rk2);
    assert_eq!(phi.last(), res.phi_right.last());
    assert_eq!(res.phi_left.last(), res.phi_right.last());
    assert!(res.phi_right.last().is_valid());
}

#[test]
fn symmetric_kernel_keeps_velocities_symmetric() {
    let g = Grid2D::square(48).unwrap();
    let source = blob(g, 14.0, 24.0, 5.0).data().iter().zip(blob(g, 33.0, 24.0, 5.0).data()).map(|(a, b)| a + b).collect();
    let target = blob(g, 12.0, 22.0, 5.0).data().iter().zip(blob(g, 35.0, 22.0, 5.0).data()).map(|(a, b)| a + b).collect();
    let source = Image::new(g, source).unwrap();
    let target = Image::new(g, target).unwrap();
    let mut cfg = MatchConfig::new(KernelSpec::symmetric_projection(6.0).unwrap());
    cfg.n_timesteps = 6;
    cfg.max_iters = 40;
    let mut worst: f64 = 0.0;
    let res = register_observed(&source, &target, &cfg, |it| {
        for v in it.velocities {
            let r = reflect(v);
            worst = worst.max(v.add_scaled(-1.0, &r).unwrap().max_abs());
        }
    })
    .unwrap();
    assert!(res.trace.len() > 1);
    assert!(worst < 1e-12, "asymmetry {worst:e}");
}

#[test]
fn identical_images_stop_at_once() {
    let g = Grid2D::square(24).unwrap();
    let img = blob(g, 12.0, 11.0, 4.0);
    let cfg = MatchConfig::new(KernelSpec::gaussian(3.0).unwrap());
    let res = register(&img, &img, &cfg).unwrap();
    assert_eq!(res.stop, StopReason::Converged);
    assert_eq!(res.objective_trace(), vec![0.0]);
}
