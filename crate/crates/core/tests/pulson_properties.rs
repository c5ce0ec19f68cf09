use diffeo_core::pulsons::{shoot, total_momentum, PulsonState, ScalarKernel, Side};

fn collision() -> PulsonState {
    PulsonState::new(vec![[-3.0, 0.0], [3.0, 0.0]], vec![[1.0, 0.0], [-0.6, 0.8]]).unwrap()
}

#[test]
fn hamiltonian_is_conserved_on_both_sides() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    for side in [Side::Right, Side::Left] {
        let t = shoot(&collision(), &k, side, 20.0, 4000).unwrap();
        let drift = t.max_relative_drift(&k);
        assert!(drift < 1e-8, "{side:?}: drift {drift:e}");
        let mom = t.max_momentum_drift();
        assert!(mom < 1e-10, "{side:?}: momentum drift {mom:e}");
    }
}

#[test]
fn pulsons_interact() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    let s0 = collision();
    let t = shoot(&s0, &k, Side::Right, 20.0, 4000).unwrap();
    // momenta exchange during the encounter
    assert!(t.last().max_abs_diff(&s0) > 1.0);
    assert!(t.last().momenta()[0] != s0.momenta()[0]);
}

#[test]
fn left_is_time_reversed_right() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    let left = shoot(&collision(), &k, Side::Left, 20.0, 4000).unwrap();
    let back = shoot(&collision(), &k, Side::Right, -20.0, 4000).unwrap();
    let worst = left
        .states
        .iter()
        .zip(&back.states)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst:e}");
}

#[test]
fn reflection_commutes_with_flow() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    let s0 = collision();
    for side in [Side::Right, Side::Left] {
        let a = shoot(&s0, &k, side, 20.0, 2000).unwrap().last().reflected();
        let b = shoot(&s0.reflected(), &k, side, 20.0, 2000).unwrap();
        assert!(a.max_abs_diff(b.last()) < 1e-12);
    }
}

#[test]
fn fourth_order_convergence() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    let s0 = collision();
    let end = |n| shoot(&s0, &k, Side::Right, 20.0, n).unwrap().last().clone();
    let reference = end(6400);
    let e1 = end(200).max_abs_diff(&reference);
    let e2 = end(400).max_abs_diff(&reference);
    let ratio = e1 / e2;
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_momentum_stays_put() {
    let k = ScalarKernel::gaussian(1.0).unwrap();
    let s0 = PulsonState::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![[0.0, 0.0]; 2]).unwrap();
    let t = shoot(&s0, &k, Side::Left, 5.0, 50).unwrap();
    assert_eq!(t.last(), &s0);
    assert_eq!(total_momentum(t.last()), [0.0, 0.0]);
}
