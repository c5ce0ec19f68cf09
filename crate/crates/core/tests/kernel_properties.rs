use diffeo_core::grid::{Grid2D, Mask, VectorField};
use diffeo_core::kernels::{
    apply_kernel, l2_pairing, make_partition_weights, reflect, vnorm_sq, KernelSpec, PartitionPart,
};
use proptest::prelude::*;

const N: usize = 20;

fn grid() -> Grid2D {
    Grid2D::new(N, N, 0.75).unwrap()
}

fn field() -> impl Strategy<Value = VectorField> {
    (
        prop::collection::vec(-1.0..1.0f64, N * N),
        prop::collection::vec(-1.0..1.0f64, N * N),
    )
        .prop_map(|(x, y)| VectorField::new(grid(), x, y).unwrap())
}

fn partition() -> KernelSpec {
    let g = grid();
    let left = Mask::from_fn(g, |i, _| i < N / 2);
    let weights = make_partition_weights(&[left.clone(), left.complement()], 1.5).unwrap();
    let kernels = [KernelSpec::gaussian(2.0).unwrap(), KernelSpec::gaussian(0.8).unwrap()];
    KernelSpec::partition(
        weights
            .into_iter()
            .zip(kernels)
            .map(|(weights, kernel)| PartitionPart { weights, kernel })
            .collect(),
    )
    .unwrap()
}

fn kernel() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        (0.5..4.0f64).prop_map(|s| KernelSpec::gaussian(s).unwrap()),
        (0.5..4.0f64, 0.3..1.5f64).prop_map(|(a, b)| {
            KernelSpec::sum(vec![KernelSpec::gaussian(a).unwrap(), KernelSpec::weighted_gaussian(b, 0.5).unwrap()])
                .unwrap()
        }),
        (prop::sample::select(vec![0.0, 0.5, 1.0]), 1.0..4.0f64, 0.5..1.5f64)
            .prop_map(|(c, a, b)| KernelSpec::soft_symmetric_mixture(c, a, b).unwrap()),
        Just(partition()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_linear(k in kernel(), p in field(), q in field(), a in -2.0..2.0f64) {
        let lhs = apply_kernel(&k, &p.add_scaled(a, &q).unwrap()).unwrap();
        let rhs = apply_kernel(&k, &p).unwrap().add_scaled(a, &apply_kernel(&k, &q).unwrap()).unwrap();
        let scale = 1.0 + rhs.max_abs();
        prop_assert!(lhs.add_scaled(-1.0, &rhs).unwrap().max_abs() < 1e-12 * scale);
    }

    #[test]
    fn kernels_are_self_adjoint(k in kernel(), p in field(), q in field()) {
        let a = l2_pairing(&apply_kernel(&k, &p).unwrap(), &q).unwrap();
        let b = l2_pairing(&p, &apply_kernel(&k, &q).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn vnorm_is_nonnegative(k in kernel(), p in field()) {
        prop_assert!(vnorm_sq(&k, &p).unwrap() >= 0.0);
    }

    #[test]
    fn full_symmetry_projects(s in 0.5..4.0f64, p in field()) {
        let k = KernelSpec::symmetric_projection(s).unwrap();
        let v = apply_kernel(&k, &p).unwrap();
        let d = reflect(&v).add_scaled(-1.0, &v).unwrap().max_abs();
        prop_assert!(d <= 1e-13 * v.max_abs().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn reflection_is_an_involution(p in field()) {
        prop_assert_eq!(reflect(&reflect(&p)), p);
    }
}
