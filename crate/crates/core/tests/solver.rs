use potbench_core::geometry::{discretize_graph, discretize_sphere, BoundaryMesh, GraphDomain, Side};
use potbench_core::solver::{
    lp_boundary_norm, nontangential_derivative_probe, nontangential_limit_probe, probe_radii, sigma_min_diagnostic,
    solve_dirichlet, solve_neumann,
};
use potbench_core::Error;
use proptest::prelude::*;

fn coord(mesh: &BoundaryMesh, axis: usize) -> Vec<f64> {
    (0..mesh.len()).map(|i| mesh.node(i)[axis]).collect()
}

#[test]
fn flat_solves_are_explicit() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
    let f: Vec<f64> = (0..mesh.len()).map(|i| (-3.0 * mesh.node(i)[0].powi(2)).exp()).collect();
    let d = solve_dirichlet(&mesh, &f).unwrap();
    let n = solve_neumann(&mesh, &f).unwrap();
    for i in 0..mesh.len() {
        assert_eq!(d.density[i], 2.0 * f[i]);
        assert_eq!(n.density[i], -2.0 * f[i]);
    }
    assert_eq!(sigma_min_diagnostic(&mesh, 0.5).unwrap(), 0.5);
}

#[test]
fn sphere_dirichlet_reproduces_harmonic_data() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let one = solve_dirichlet(&mesh, &vec![1.0; mesh.len()]).unwrap();
    assert!(one.density.iter().all(|g| (g - 1.0).abs() < 1e-3));
    assert!((one.u(&[0.1, 0.2, -0.3]) - 1.0).abs() < 1e-3);

    let r = solve_dirichlet(&mesh, &coord(&mesh, 2)).unwrap();
    assert!(r.residual <= 1e-10);
    assert!((r.u(&[0.0, 0.0, 0.5]) - 0.5).abs() < 1e-2);

    // The discrete potential is a finite sum of harmonic kernels, so the
    // centred difference Laplacian decays at second order in the step.
    let z = [0.1, -0.2, 0.3];
    let (coarse, fine) = (r.fd_laplacian(&z, 0.08).abs(), r.fd_laplacian(&z, 0.04).abs());
    let order = (coarse / fine).log2();
    assert!(order >= 1.8, "order {order}: {coarse:e} -> {fine:e}");
}

#[test]
fn sphere_neumann_compatibility() {
    let mesh = discretize_sphere(3, 1.0, 2).unwrap();
    assert!(matches!(solve_neumann(&mesh, &vec![1.0; mesh.len()]), Err(Error::IncompatibleNeumann { .. })));
    let zero = solve_neumann(&mesh, &vec![0.0; mesh.len()]).unwrap();
    assert!(zero.density.iter().all(|&g| g == 0.0));
}

#[test]
fn single_layer_jump_is_the_density() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let r = solve_neumann(&mesh, &coord(&mesh, 2)).unwrap();
    let radii = probe_radii(0.2, 4);
    for x in [0, 100, 333] {
        let inner = nontangential_derivative_probe(&r, x, 1.0, Side::Interior, &radii, None).unwrap();
        let outer = nontangential_derivative_probe(&r, x, 1.0, Side::Exterior, &radii, None).unwrap();
        let jump = outer.limit - inner.limit;
        assert!((jump - r.density[x]).abs() < 1e-2, "node {x}: jump {jump} vs g {}", r.density[x]);
    }
}

#[test]
fn interior_limit_of_the_constant_solution() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let r = solve_dirichlet(&mesh, &vec![1.0; mesh.len()]).unwrap();
    let rec = nontangential_limit_probe(&r, 7, 1.0, &probe_radii(0.2, 4), Some(1.0)).unwrap();
    assert!((rec.limit - 1.0).abs() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dirichlet_solve_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mesh = discretize_sphere(3, 1.0, 2).unwrap();
        let (f1, f2) = (coord(&mesh, 0), coord(&mesh, 1).iter().map(|v| v * v).collect::<Vec<_>>());
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let (g1, g2, gm) = (
            solve_dirichlet(&mesh, &f1).unwrap(),
            solve_dirichlet(&mesh, &f2).unwrap(),
            solve_dirichlet(&mesh, &mix).unwrap(),
        );
        prop_assert!(gm.residual <= 1e-10);
        for i in 0..mesh.len() {
            prop_assert!((gm.density[i] - a * g1.density[i] - b * g2.density[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn lp_norm_is_homogeneous(c in -10.0f64..10.0, p in 1.0f64..6.0) {
        let mesh = discretize_sphere(3, 1.0, 2).unwrap();
        let v = coord(&mesh, 0);
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let lhs = lp_boundary_norm(&mesh, &scaled, p).unwrap();
        let rhs = c.abs() * lp_boundary_norm(&mesh, &v, p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        let ones = lp_boundary_norm(&mesh, &vec![1.0; mesh.len()], p).unwrap();
        prop_assert!((ones - mesh.total_weight().powf(1.0 / p)).abs() <= 1e-12 * ones);
    }
}
