use approx::assert_relative_eq;
use potbench_core::geometry::{discretize_graph, discretize_sphere, BoundaryMesh, BumpProfile, GraphDomain};
use potbench_core::potentials::{
    adjoint_k_apply, boundary_k_apply, double_layer_interior, eps_grid, hl_maximal, maximal_k, riesz_apply,
    single_layer_mod, svd_decay, truncated_op, KernelKind, KernelSpec, MaskSide, MaximalSide,
};
use proptest::prelude::*;

fn bump() -> BoundaryMesh {
    discretize_graph(&GraphDomain::bump(2, 1.0, 0.2, 0.5, BumpProfile::Smooth), 0.1).unwrap()
}

fn smooth(mesh: &BoundaryMesh) -> Vec<f64> {
    (0..mesh.len()).map(|i| (mesh.node(i)[0] + 0.3 * mesh.node(i)[1]).sin()).collect()
}

#[test]
fn gauss_identity_on_the_sphere() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let one = vec![1.0; mesh.len()];
    assert!((double_layer_interior(&mesh, &one, &[0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-3);
    assert!(double_layer_interior(&mesh, &one, &[0.0, 0.0, 3.0]).unwrap().abs() < 1e-3);
    for v in boundary_k_apply(&mesh, &one, 0.0) {
        assert!((v - 0.5).abs() < 1e-3);
    }
    for v in adjoint_k_apply(&mesh, &one, 0.0) {
        assert!((v - 0.5).abs() < 1e-3);
    }
}

#[test]
fn flat_kernels_vanish() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
    let g = smooth(&mesh);
    assert!(boundary_k_apply(&mesh, &g, 0.0).iter().all(|&v| v == 0.0));
    assert!(adjoint_k_apply(&mesh, &g, 0.0).iter().all(|&v| v == 0.0));
    assert!(riesz_apply(&mesh, &g, 2, 0.0).unwrap().iter().all(|&v| v == 0.0));
    let grid = eps_grid(&mesh, 0.5);
    assert!(maximal_k(&mesh, &g, MaximalSide::K, &grid).iter().all(|&v| v == 0.0));
}

#[test]
fn flat_riesz_of_radial_density_vanishes_at_the_centre() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
    let g: Vec<f64> = (0..mesh.len()).map(|i| (-4.0 * (mesh.node(i)[0].powi(2) + mesh.node(i)[1].powi(2))).exp()).collect();
    let centre = mesh.nearest_node(&[0.0, 0.0, 0.0]).0;
    for j in 0..2 {
        assert!(riesz_apply(&mesh, &g, j, 0.0).unwrap()[centre].abs() < 1e-10);
    }
}

#[test]
fn large_truncation_empties_the_integral() {
    let mesh = bump();
    let g = smooth(&mesh);
    let far = 2.0 * mesh.extent() * 2f64.sqrt() + 1.0;
    assert!(boundary_k_apply(&mesh, &g, far).iter().all(|&v| v == 0.0));
}

#[test]
fn shell_theorem_for_the_single_layer() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let one = vec![1.0; mesh.len()];
    let a = single_layer_mod(&mesh, &one, &[0.0, 0.0, 0.0]).unwrap();
    let b = single_layer_mod(&mesh, &one, &[0.2, -0.3, 0.1]).unwrap();
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
}

#[test]
fn flat_spectrum_is_zero() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.125).unwrap();
    let op = truncated_op(&mesh, KernelSpec::full(KernelKind::DoubleLayer)).unwrap();
    assert!(svd_decay(&op, 5).unwrap().iter().all(|&s| s == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn windows_partition_the_full_operator(t in 0.05f64..0.4, gap in 0.05f64..0.8) {
        let mesh = bump();
        let big_t = t + gap;
        let kind = KernelKind::DoubleLayer;
        let full = truncated_op(&mesh, KernelSpec::full(kind)).unwrap();
        let parts = [
            truncated_op(&mesh, KernelSpec::window(kind, 0.0, t)).unwrap(),
            truncated_op(&mesh, KernelSpec::window(kind, t, big_t)).unwrap(),
            truncated_op(&mesh, KernelSpec::window(kind, big_t, f64::INFINITY)).unwrap(),
        ];
        for (k, &v) in full.matrix.as_slice().iter().enumerate() {
            let sum: f64 = parts.iter().map(|p| p.matrix.as_slice()[k]).sum();
            prop_assert!((sum - v).abs() <= 1e-14 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn masks_partition_the_window(radius in 0.1f64..1.2) {
        let mesh = bump();
        let spec = KernelSpec::window(KernelKind::AdjointDoubleLayer, 0.1, 0.5);
        let whole = truncated_op(&mesh, spec).unwrap();
        let inside = truncated_op(&mesh, spec.masked(radius, MaskSide::Inside)).unwrap();
        let outside = truncated_op(&mesh, spec.masked(radius, MaskSide::Outside)).unwrap();
        for k in 0..whole.matrix.as_slice().len() {
            prop_assert_eq!(inside.matrix.as_slice()[k] + outside.matrix.as_slice()[k], whole.matrix.as_slice()[k]);
        }
    }

    #[test]
    fn k_apply_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, eps in 0.0f64..0.3) {
        let mesh = discretize_sphere(3, 1.0, 2).unwrap();
        let g1 = smooth(&mesh);
        let g2: Vec<f64> = (0..mesh.len()).map(|i| mesh.node(i)[2].powi(2)).collect();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let (k1, k2, km) = (boundary_k_apply(&mesh, &g1, eps), boundary_k_apply(&mesh, &g2, eps), boundary_k_apply(&mesh, &mix, eps));
        for i in 0..mesh.len() {
            prop_assert!((km[i] - a * k1[i] - b * k2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn maximal_operator_dominates_each_truncation(seed in 0u64..1000) {
        let mesh = bump();
        let g: Vec<f64> = (0..mesh.len()).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0 - 0.5).collect();
        let grid = eps_grid(&mesh, 0.5);
        let star = maximal_k(&mesh, &g, MaximalSide::K, &grid);
        for &eps in &grid {
            let k = boundary_k_apply(&mesh, &g, eps);
            for i in 0..mesh.len() {
                prop_assert!(star[i] >= k[i].abs() * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn maximal_function_of_a_constant(c in -5.0f64..5.0, node in 0usize..100) {
        let mesh = discretize_sphere(3, 1.0, 2).unwrap();
        let f = vec![c; mesh.len()];
        let x = node % mesh.len();
        assert_relative_eq!(hl_maximal(&mesh, &f, 1.5, x).unwrap(), c.abs(), max_relative = 1e-12, epsilon = 1e-300);
    }
}
