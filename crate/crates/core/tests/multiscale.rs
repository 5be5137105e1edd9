use std::sync::LazyLock;

use num_rational::Ratio;
use potbench_core::dyadic::build_lattice;
use potbench_core::dyadic::whitney::{whitney, Everything, HalfSpace, OpenSet};
use potbench_core::dyadic::DyadicLattice;
use potbench_core::flatness::{beta_inf, bmo_oscillation, dot_product_estimate, proof_parameters};
use potbench_core::geometry::{discretize_graph, discretize_sphere, BoundaryMesh, BumpProfile, GraphDomain};
use potbench_core::lipgraph::{build_graph, fit_plane, GraphBuild, GraphParams};
use proptest::prelude::*;

struct Fixture {
    mesh: BoundaryMesh,
    lattice: DyadicLattice,
    build: GraphBuild,
}

const S: f64 = 0.2;

/// A κ = 0.05 bump curve in the plane with its lattice and approximating graph.
static CURVE: LazyLock<Fixture> = LazyLock::new(|| {
    let dom = GraphDomain::bump(1, 1.0, 0.05, 0.5, BumpProfile::Smooth);
    let mesh = discretize_graph(&dom, 1.0 / 64.0).unwrap();
    let lattice = build_lattice(&mesh, -3, 0).unwrap();
    let (origin, _) = mesh.nearest_node(&[0.0, 0.0]);
    let root = lattice.cube_of(0, origin).unwrap();
    let build = build_graph(&mesh, &lattice, root, S, 0.5, GraphParams::default()).unwrap();
    Fixture { mesh, lattice, build }
});

static SURFACE: LazyLock<BoundaryMesh> = LazyLock::new(|| {
    discretize_graph(&GraphDomain::bump(2, 1.0, 0.2, 0.5, BumpProfile::Smooth), 1.0 / 32.0).unwrap()
});

#[test]
fn proof_parameters_for_the_plane_case() {
    let p = proof_parameters(2, 2.0, 1e-3, 1.0).unwrap();
    assert_eq!(p.gamma, Ratio::new(1, 6));
    assert_eq!(p.theta, Ratio::new(1, 70));
    assert!((p.a - 10f64.powf(3.0 / 70.0)).abs() < 1e-12);
    assert!((p.t_scale - p.a * p.a).abs() < 1e-12);
    assert!(proof_parameters(2, 2.0, 1.0, 1.0).is_err());
}

#[test]
fn flat_measures_vanish() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
    let x = mesh.nearest_node(&[0.1, 0.2, 0.0]).0;
    assert!(beta_inf(&mesh, x, 0.5).unwrap().beta <= 1e-12);
    assert_eq!(bmo_oscillation(&mesh, x, 0.5).unwrap(), 0.0);
    assert_eq!(dot_product_estimate(&mesh, x, 0.3).unwrap(), 0.0);
}

#[test]
fn whole_sphere_oscillation_is_one() {
    let mesh = discretize_sphere(3, 1.0, 3).unwrap();
    let v = bmo_oscillation(&mesh, 0, 3.0).unwrap();
    assert!((v - 1.0).abs() < 1e-2, "{v}");
}

#[test]
fn whitney_half_space_and_full_box() {
    let u = HalfSpace { dim: 2, axis: 0, offset: 0.0 };
    let cover = whitney(&u, &[-1.0, -1.0], 2.0, 7).unwrap();
    assert!(!cover.cubes.is_empty());
    for q in &cover.cubes {
        let d = u.distance_to_complement(&q.lo, q.side);
        assert!(2.0 * q.side <= d + 1e-12 && d <= 5.0 * 2f64.sqrt() * q.side + 1e-12, "{q:?}");
    }
    let all = whitney(&Everything { dim: 3 }, &[0.0; 3], 1.0, 4).unwrap();
    assert_eq!(all.cubes.len(), 1);
    assert_eq!(all.cubes[0].side, 1.0);
    assert!(all.unresolved.is_empty());
}

#[test]
fn stop_cubes_tile_the_neighborhood_once() {
    let f = &*CURVE;
    let mut covered = vec![0usize; f.mesh.len()];
    for q in f.build.tree.stop() {
        for &i in &f.lattice.cube(q).nodes {
            covered[i] += 1;
        }
    }
    let mut expected = vec![0usize; f.mesh.len()];
    for &q in &f.build.tree.neighborhood {
        for &i in &f.lattice.cube(q).nodes {
            expected[i] += 1;
        }
    }
    assert_eq!(covered, expected);
    assert!(expected.iter().all(|&c| c <= 1));
}

#[test]
fn d_is_bounded_by_tree_diameters() {
    let f = &*CURVE;
    for &q in &f.build.tree.tree {
        let c = f.lattice.cube(q);
        for &i in c.nodes.iter().step_by(5) {
            let d = f.build.tree.d_function(&f.mesh, &f.lattice, f.mesh.node(i));
            assert!(d <= c.diam + 1e-12);
        }
    }
}

#[test]
fn flat_plane_fit_is_exact() {
    let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 1.0 / 16.0).unwrap();
    let lattice = build_lattice(&mesh, -2, 0).unwrap();
    for &q in lattice.level(-1) {
        let fit = fit_plane(&mesh, &lattice, q, 3.0).unwrap();
        assert!(fit.epsilon <= 1e-12);
        assert!((fit.plane.normal[2].abs() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lattice_levels_partition_and_nest(j_min in -3i32..-1, span in 0i32..3) {
        let mesh = &*SURFACE;
        let lat = build_lattice(mesh, j_min, j_min + span).unwrap();
        let total: f64 = mesh.weights().iter().sum();
        for j in lat.j_min..=lat.j_max {
            let mut seen = vec![false; mesh.len()];
            let mut mass = 0.0;
            for &q in lat.level(j) {
                let c = lat.cube(q);
                mass += c.measure;
                for &i in &c.nodes {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
                if let Some(p) = c.parent {
                    let parent = &lat.cube(p).nodes;
                    prop_assert!(c.nodes.iter().all(|i| parent.binary_search(i).is_ok()));
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            prop_assert!((mass - total).abs() <= 1e-12 * total);
        }
    }

    #[test]
    fn inner_balls_stay_inside_their_cubes(level in -3i32..0) {
        let mesh = &*SURFACE;
        let lat = build_lattice(mesh, -3, -1).unwrap();
        let ids = lat.level(level);
        let balls: Vec<_> = ids.iter().map(|&q| lat.cube_balls(mesh, q)).collect();
        for (k, &q) in ids.iter().enumerate() {
            let inside = mesh.nodes_in_ball(&balls[k].center, balls[k].inner);
            let nodes = &lat.cube(q).nodes;
            prop_assert!(inside.iter().all(|i| nodes.binary_search(i).is_ok()));
        }
        for a in 0..balls.len() {
            for b in a + 1..balls.len() {
                let d: f64 = balls[a].center.iter().zip(&balls[b].center).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                prop_assert!(d >= balls[a].inner + balls[b].inner - 1e-12);
            }
        }
    }

    #[test]
    fn beta_bounded_by_lipschitz_constant(node in 0usize..1089, r in 0.5f64..0.8) {
        let mesh = &*SURFACE;
        let x = node % mesh.len();
        let beta = beta_inf(mesh, x, r).unwrap().beta;
        prop_assert!(beta <= 0.2 + 1e-12);
        let dot = dot_product_estimate(mesh, x, r / 2.0).unwrap();
        prop_assert!(dot <= 2.0 * 0.2 * 1.2 + 1e-12);
    }

    #[test]
    fn big_d_is_one_lipschitz_and_at_least_s(t in -1.0f64..1.0, u in -1.0f64..1.0) {
        let b = &CURVE.build;
        let p = [b.u0_center[0] + t * b.u0_radius];
        let q = [b.u0_center[0] + u * b.u0_radius];
        let (dp, dq) = (b.d_plane(&p), b.d_plane(&q));
        prop_assert!(dp >= S - 1e-12);
        prop_assert!((dp - dq).abs() <= (p[0] - q[0]).abs() + 1e-12);
    }

    #[test]
    fn partition_of_unity_sums_to_one(t in -1.0f64..1.0) {
        let b = &CURVE.build;
        let p = [b.u0_center[0] + 0.999 * t * b.u0_radius];
        prop_assume!(b.in_u0(&p));
        let terms = b.partition_of_unity(&p);
        let sum: f64 = terms.iter().map(|term| term.phi).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
        prop_assert!(terms.iter().all(|term| term.phi >= 0.0));
    }
}
