//! Stopping-time construction of a Lipschitz graph approximating the boundary
//! near a dyadic cube R, its verification, and the transfer of boundary
//! densities onto the graph.
//!
//! Coordinates on the base plane L_R are taken in the orthonormal [`Frame`] of
//! the plane fitted to R. The plane partition {R_i} is stored as a 2^n-ary tree
//! of dyadic boxes in those coordinates.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;

use crate::dyadic::DyadicLattice;
use crate::error::{invalid, Error, Result};
use crate::flatness::{pca_normal, Plane};
use crate::geometry::BoundaryMesh;
use crate::linalg::{dist, dot, norm, orthonormal_complement};
use crate::rng;

/// Orthonormal frame of a hyperplane.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub origin: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub normal: Vec<f64>,
}

impl Frame {
    /// Normal oriented towards the last ambient axis.
    pub fn from_plane(plane: &Plane) -> Frame {
        let mut normal = plane.normal.clone();
        let lead = normal.iter().rev().find(|v| **v != 0.0).copied().unwrap_or(1.0);
        if lead < 0.0 {
            for v in &mut normal {
                *v = -*v;
            }
        }
        let axes = orthonormal_complement(&normal);
        Frame { origin: plane.point.clone(), axes, normal }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Π(x) in plane coordinates.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.axes.iter().map(|e| offset_dot(x, &self.origin, e)).collect()
    }

    /// Π^⊥(x) as a signed height.
    pub fn height(&self, x: &[f64]) -> f64 {
        offset_dot(x, &self.origin, &self.normal)
    }

    pub fn lift(&self, p: &[f64], h: f64) -> Vec<f64> {
        let mut x = self.origin.clone();
        for (e, t) in self.axes.iter().zip(p) {
            for (a, v) in x.iter_mut().zip(e) {
                *a += t * v;
            }
        }
        for (a, v) in x.iter_mut().zip(&self.normal) {
            *a += h * v;
        }
        x
    }
}

fn offset_dot(x: &[f64], o: &[f64], e: &[f64]) -> f64 {
    x.iter().zip(o).zip(e).map(|((a, b), v)| (a - b) * v).sum()
}

fn angle_between(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v).abs().min(1.0).acos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    /// sup over the fitted nodes of dist(y, L_Q) / diam Q.
    pub epsilon: f64,
    pub support: usize,
}

/// Weighted PCA plane over the nodes within k·diam Q / 2 of the center of Q.
pub fn fit_plane(mesh: &BoundaryMesh, lattice: &DyadicLattice, q: usize, k: f64) -> Result<PlaneFit> {
    if !(k >= 1.0) {
        return Err(invalid("k", "neighborhood multiple must be at least 1"));
    }
    let cube = lattice.cube(q);
    let c = mesh.node(cube.center);
    let r = 0.5 * k * cube.diam;
    let mut ids: Vec<usize> = (0..mesh.len()).filter(|&i| dist(mesh.node(i), c) <= r).collect();
    ids.extend_from_slice(&cube.nodes);
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < mesh.ambient_dim() {
        return Err(Error::RankDeficient(q));
    }
    let (mean, normal) = pca_normal(mesh, &ids).map_err(|_| Error::RankDeficient(q))?;
    let plane = Plane { point: mean, normal };
    let sup = ids.iter().map(|&i| plane.distance(mesh.node(i))).fold(0.0, f64::max);
    let epsilon = if cube.diam > 0.0 { sup / cube.diam } else { 0.0 };
    Ok(PlaneFit { plane, epsilon, support: ids.len() })
}

#[derive(Debug, Clone)]
pub struct TreeBuild {
    pub root: usize,
    pub m: f64,
    pub k: f64,
    pub s_scale: f64,
    pub alpha_stop: f64,
    /// U_m(R): cubes of the generation of R meeting B(x_R, m diam R / 2).
    pub neighborhood: Vec<usize>,
    pub tree: Vec<usize>,
    pub big_angle: Vec<usize>,
    pub small_scale: Vec<usize>,
    /// Plane fits of every visited cube with diam ≥ S.
    pub fits: BTreeMap<usize, PlaneFit>,
    /// ∠(L_R, L_Q) for the same cubes.
    pub angles: BTreeMap<usize, f64>,
    pub frame: Frame,
}

impl TreeBuild {
    /// Stop(R) = BA(R) ∪ SA(R), sorted by id.
    pub fn stop(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.big_angle.iter().chain(&self.small_scale).copied().collect();
        s.sort_unstable();
        s
    }

    pub fn in_tree(&self, q: usize) -> bool {
        self.tree.binary_search(&q).is_ok()
    }

    /// Largest ε_Q over Tree(R) and the cube attaining it.
    pub fn max_tree_epsilon(&self) -> (usize, f64) {
        self.tree.iter().map(|&q| (q, self.fits[&q].epsilon)).fold((self.root, 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }

    /// d_R(x) = min over Q ∈ Tree(R) of dist(x, Q) + diam Q.
    pub fn d_function(&self, mesh: &BoundaryMesh, lattice: &DyadicLattice, x: &[f64]) -> f64 {
        self.tree
            .iter()
            .map(|&q| {
                let c = lattice.cube(q);
                c.nodes.iter().map(|&i| dist(x, mesh.node(i))).fold(f64::INFINITY, f64::min) + c.diam
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Top-down stopping-time traversal from U_m(R).
pub fn build_tree(
    mesh: &BoundaryMesh,
    lattice: &DyadicLattice,
    root: usize,
    s_scale: f64,
    alpha_stop: f64,
    m: f64,
    k: f64,
) -> Result<TreeBuild> {
    if root >= lattice.len() {
        return Err(invalid("root", format!("no cube {root}")));
    }
    let r = lattice.cube(root);
    if !(s_scale > 0.0) || r.diam < s_scale {
        return Err(invalid("S", format!("diam R = {:.3e} is below S = {s_scale:.3e}", r.diam)));
    }
    if !(alpha_stop > 0.0 && alpha_stop < 1.0) {
        return Err(invalid("alpha_stop", "need 0 < alpha < 1"));
    }
    if !(m >= 1.0) {
        return Err(invalid("m", "must be at least 1"));
    }
    let base = fit_plane(mesh, lattice, root, k)?;
    let frame = Frame::from_plane(&base.plane);
    let center = mesh.node(r.center);
    let reach = 0.5 * m * r.diam;
    let neighborhood: Vec<usize> = lattice
        .level(r.level)
        .iter()
        .copied()
        .filter(|&q| lattice.cube(q).nodes.iter().any(|&i| dist(mesh.node(i), center) <= reach))
        .collect();

    let mut fits = BTreeMap::new();
    let mut angles = BTreeMap::new();
    let (mut tree, mut big_angle, mut small_scale) = (Vec::new(), Vec::new(), Vec::new());
    let mut frontier = neighborhood.clone();
    while !frontier.is_empty() {
        let need: Vec<usize> = frontier.iter().copied().filter(|&q| lattice.cube(q).diam >= s_scale).collect();
        let fitted: Vec<(usize, Result<PlaneFit>)> =
            need.par_iter().map(|&q| (q, if q == root { Ok(base.clone()) } else { fit_plane(mesh, lattice, q, k) })).collect();
        for (q, f) in fitted {
            let f = f?;
            angles.insert(q, if q == root { 0.0 } else { angle_between(&frame.normal, &f.plane.normal) });
            fits.insert(q, f);
        }
        let mut next = Vec::new();
        for &q in &frontier {
            let cube = lattice.cube(q);
            if cube.diam < s_scale {
                small_scale.push(q);
            } else if angles[&q] > alpha_stop {
                big_angle.push(q);
            } else {
                if cube.children.is_empty() {
                    return Err(Error::Construction(format!(
                        "cube {q} (diam {:.3e}) is at the finest lattice level but not below S",
                        cube.diam
                    )));
                }
                tree.push(q);
                next.extend_from_slice(&cube.children);
            }
        }
        frontier = next;
    }
    tree.sort_unstable();
    big_angle.sort_unstable();
    small_scale.sort_unstable();
    Ok(TreeBuild { root, m, k, s_scale, alpha_stop, neighborhood, tree, big_angle, small_scale, fits, angles, frame })
}

/// Affine height function `offset + ⟨slope, p⟩` over L_R.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub offset: f64,
    pub slope: Vec<f64>,
}

impl Affine {
    pub fn eval(&self, p: &[f64]) -> f64 {
        self.offset + dot(&self.slope, p)
    }

    /// The plane as a graph over the frame.
    pub fn from_plane(frame: &Frame, plane: &Plane) -> Result<Affine> {
        let c = frame.project(&plane.point);
        let ch = frame.height(&plane.point);
        let nu: Vec<f64> = frame.axes.iter().map(|e| dot(&plane.normal, e)).collect();
        let nh = dot(&plane.normal, &frame.normal);
        if nh.abs() < 1e-12 {
            return Err(Error::Construction("plane is vertical over L_R".into()));
        }
        let slope: Vec<f64> = nu.iter().map(|v| -v / nh).collect();
        let offset = ch - dot(&slope, &c);
        Ok(Affine { offset, slope })
    }

    pub fn slope_norm(&self) -> f64 {
        norm(&self.slope)
    }
}

/// A cube R_i of the plane partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCube {
    pub lo: Vec<f64>,
    pub side: f64,
    pub level: i32,
    /// inf over R_i of D_R.
    pub inf_d: f64,
    /// i ∈ I₀: 3R_i meets U₀.
    pub active: bool,
    /// Q(i) and (dist(p, Π(Q*)) + diam Q*) / diam R_i for the witness cube Q*.
    pub selected: Option<usize>,
    pub witness_bound: f64,
    pub affine: Option<Affine>,
}

impl PlaneCube {
    pub fn diam(&self) -> f64 {
        self.side * (self.lo.len() as f64).sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().map(|l| l + 0.5 * self.side).collect()
    }

    /// The concentric box t·R_i.
    pub fn dilate(&self, t: f64) -> (Vec<f64>, f64) {
        let g = 0.5 * (t - 1.0) * self.side;
        (self.lo.iter().map(|l| l - g).collect(), t * self.side)
    }
}

#[derive(Debug, Clone)]
struct BoxNode {
    lo: Vec<f64>,
    side: f64,
    leaf: Option<usize>,
    children: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Projected {
    id: usize,
    points: Vec<Vec<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    diam: f64,
}

fn box_point(lo: &[f64], side: f64, p: &[f64]) -> f64 {
    lo.iter().zip(p).map(|(&l, &x)| (l - x).max(x - l - side).max(0.0).powi(2)).sum::<f64>().sqrt()
}

fn box_box(lo: &[f64], side: f64, blo: &[f64], bhi: &[f64]) -> f64 {
    lo.iter()
        .zip(blo.iter().zip(bhi))
        .map(|(&l, (&a, &b))| (l - b).max(a - l - side).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// min over Q of dist(box, Π(Q)) + diam Q, with the minimizing cube (lowest id on ties).
fn inf_over(proj: &[Projected], lo: &[f64], side: f64) -> (f64, usize) {
    let mut order: Vec<(f64, usize)> =
        proj.iter().enumerate().map(|(k, t)| (box_box(lo, side, &t.lo, &t.hi) + t.diam, k)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(proj[a.1].id.cmp(&proj[b.1].id)));
    let mut best = (f64::INFINITY, usize::MAX);
    for (lb, k) in order {
        if lb > best.0 {
            break;
        }
        let t = &proj[k];
        let d = t.points.iter().map(|p| box_point(lo, side, p)).fold(f64::INFINITY, f64::min) + t.diam;
        if d < best.0 || (d == best.0 && t.id < best.1) {
            best = (d, t.id);
        }
    }
    best
}

fn smoothstep_weight(t: f64) -> (f64, f64) {
    // 1 on |t| ≤ 1, 0 on |t| ≥ 3/2, C¹ cubic in between; returns value and d/dt.
    let a = t.abs();
    if a <= 1.0 {
        return (1.0, 0.0);
    }
    if a >= 1.5 {
        return (0.0, 0.0);
    }
    let u = 2.0 * (a - 1.0);
    let v = 1.0 - u * u * (3.0 - 2.0 * u);
    let dv = -6.0 * u * (1.0 - u) * 2.0 * t.signum();
    (v, dv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub m: f64,
    /// Plane-fit neighborhood multiple; default 2 C_D m + 1.
    pub k: Option<f64>,
    /// Default 8m.
    pub k0: Option<f64>,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams { m: 3.0, k: None, k0: None, seed: rng::DEFAULT_SEED }
    }
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub tree: TreeBuild,
    pub k0: f64,
    /// max ε_Q over Tree(R).
    pub epsilon: f64,
    pub u0_center: Vec<f64>,
    pub u0_radius: f64,
    pub cubes: Vec<PlaneCube>,
    boxes: Vec<BoxNode>,
    projected: Vec<Projected>,
    anchors: Vec<(Vec<f64>, f64)>,
    /// Sampled Lipschitz constant of A on U₀, used by the extension.
    pub lip_target: f64,
    pub max_slope: f64,
}

/// One term of the partition of unity at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PouTerm {
    pub cube: usize,
    pub phi: f64,
    pub grad: Vec<f64>,
}

/// Builds Tree(R), the plane partition, the affine pieces and the blended graph A.
pub fn build_graph(
    mesh: &BoundaryMesh,
    lattice: &DyadicLattice,
    root: usize,
    s_scale: f64,
    alpha_stop: f64,
    params: GraphParams,
) -> Result<GraphBuild> {
    let m = params.m;
    let k = params.k.unwrap_or(2.0 * lattice.constants.c_d * m + 1.0);
    let k0 = params.k0.unwrap_or(8.0 * m);
    if !(k0 > 0.0) {
        return Err(invalid("k0", "must be positive"));
    }
    let tree = build_tree(mesh, lattice, root, s_scale, alpha_stop, m, k)?;
    let (worst, epsilon) = tree.max_tree_epsilon();
    if epsilon > alpha_stop / 8.0 {
        return Err(Error::NotFlatEnough { cube: worst, eps: epsilon, limit: alpha_stop / 8.0 });
    }
    let frame = &tree.frame;
    let n = frame.dim();
    let projected: Vec<Projected> = tree
        .tree
        .iter()
        .map(|&q| {
            let c = lattice.cube(q);
            let points: Vec<Vec<f64>> = c.nodes.iter().map(|&i| frame.project(mesh.node(i))).collect();
            let mut lo = vec![f64::INFINITY; n];
            let mut hi = vec![f64::NEG_INFINITY; n];
            for p in &points {
                for a in 0..n {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            Projected { id: q, points, lo, hi, diam: c.diam }
        })
        .collect();
    if projected.is_empty() {
        return Err(Error::Construction("Tree(R) is empty".into()));
    }

    let r = lattice.cube(root);
    let u0_center = frame.project(mesh.node(r.center));
    let u0_radius = 2.0 * k0 * r.diam;
    let reach = u0_center.iter().map(|c| c.abs()).fold(0.0, f64::max) + u0_radius;
    let top = reach.log2().ceil() as i32 + 1;
    let (boxes, mut cubes) = plane_partition(&projected, n, top)?;

    let tree_set: BTreeSet<usize> = tree.tree.iter().copied().collect();
    for c in cubes.iter_mut() {
        let (lo3, s3) = c.dilate(3.0);
        c.active = box_point(&lo3, s3, &u0_center) < u0_radius;
    }
    let chosen: Vec<Option<(usize, f64)>> = cubes
        .par_iter()
        .map(|c| {
            if !c.active {
                return None;
            }
            let p = c.center();
            let (value, q_star) = inf_over(&projected, &p, 0.0);
            let limit = 120.0 * c.diam();
            let mut q = q_star;
            while let Some(parent) = lattice.cube(q).parent {
                if tree_set.contains(&parent) && lattice.cube(parent).diam <= limit {
                    q = parent;
                } else {
                    break;
                }
            }
            Some((q, value / c.diam()))
        })
        .collect();
    let mut max_slope = 0.0f64;
    for (c, ch) in cubes.iter_mut().zip(chosen) {
        if let Some((q, bound)) = ch {
            let affine = Affine::from_plane(frame, &tree.fits[&q].plane)?;
            max_slope = max_slope.max(affine.slope_norm());
            c.selected = Some(q);
            c.witness_bound = bound;
            c.affine = Some(affine);
        }
    }
    if !cubes.iter().any(|c| c.active) {
        return Err(Error::Construction("no partition cube meets U0".into()));
    }

    let mut build = GraphBuild {
        tree,
        k0,
        epsilon,
        u0_center,
        u0_radius,
        cubes,
        boxes,
        projected,
        anchors: Vec::new(),
        lip_target: 0.0,
        max_slope,
    };
    build.lip_target = build.sample_lipschitz(params.seed, 4000);
    build.anchors = build
        .cubes
        .iter()
        .filter(|c| c.active)
        .map(|c| c.center())
        .filter(|p| build.in_u0(p))
        .map(|p| {
            let v = build.blend(&p).0;
            (p, v)
        })
        .collect();
    Ok(build)
}

/// Maximal dyadic boxes of [−2^top, 2^top]^n with diam ≤ inf D / 20.
fn plane_partition(proj: &[Projected], n: usize, top: i32) -> Result<(Vec<BoxNode>, Vec<PlaneCube>)> {
    let side = 2f64.powi(top + 1);
    let mut boxes = vec![BoxNode { lo: vec![-0.5 * side; n], side, leaf: None, children: Vec::new() }];
    let mut cubes: Vec<PlaneCube> = Vec::new();
    let mut frontier = vec![0usize];
    let mut depth = 0;
    while !frontier.is_empty() {
        if depth > 80 {
            return Err(Error::Construction("plane partition recursion exceeded 80 generations".into()));
        }
        // The root is never accepted: it must be split at least once.
        let decided: Vec<(bool, f64)> = frontier
            .par_iter()
            .map(|&b| {
                let node = &boxes[b];
                let (d, _) = inf_over(proj, &node.lo, node.side);
                let diam = node.side * (n as f64).sqrt();
                (b != 0 && diam <= d / 20.0, d)
            })
            .collect();
        let mut next = Vec::new();
        for (&b, (accept, d)) in frontier.iter().zip(decided) {
            if accept {
                let node = &mut boxes[b];
                node.leaf = Some(cubes.len());
                cubes.push(PlaneCube {
                    lo: node.lo.clone(),
                    side: node.side,
                    level: node.side.log2().round() as i32,
                    inf_d: d,
                    active: false,
                    selected: None,
                    witness_bound: 0.0,
                    affine: None,
                });
                continue;
            }
            let (lo, half) = (boxes[b].lo.clone(), 0.5 * boxes[b].side);
            for corner in 0..1usize << n {
                let clo: Vec<f64> = (0..n).map(|a| lo[a] + if corner >> a & 1 == 1 { half } else { 0.0 }).collect();
                let id = boxes.len();
                boxes.push(BoxNode { lo: clo, side: half, leaf: None, children: Vec::new() });
                boxes[b].children.push(id);
                next.push(id);
            }
        }
        frontier = next;
        depth += 1;
    }
    Ok((boxes, cubes))
}

fn box_dilate_contains(lo: &[f64], side: f64, t: f64, p: &[f64]) -> bool {
    let g = 0.5 * (t - 1.0) * side;
    lo.iter().zip(p).all(|(&l, &x)| x > l - g && x < l + side + g)
}

fn boxes_meet(alo: &[f64], aside: f64, blo: &[f64], bside: f64) -> bool {
    alo.iter().zip(blo).all(|(&a, &b)| a <= b + bside && b <= a + aside)
}

impl GraphBuild {
    pub fn frame(&self) -> &Frame {
        &self.tree.frame
    }

    pub fn in_u0(&self, p: &[f64]) -> bool {
        dist(p, &self.u0_center) < self.u0_radius
    }

    /// D_R(p) = min over Q ∈ Tree(R) of dist(p, Π(Q)) + diam Q.
    pub fn d_plane(&self, p: &[f64]) -> f64 {
        inf_over(&self.projected, p, 0.0).0
    }

    /// Index of the partition cube containing p (closed; lowest box on shared faces).
    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        let root = &self.boxes[0];
        if box_point(&root.lo, root.side, p) > 0.0 {
            return None;
        }
        let mut b = 0;
        loop {
            let node = &self.boxes[b];
            if let Some(leaf) = node.leaf {
                return Some(leaf);
            }
            b = *node.children.iter().find(|&&c| box_point(&self.boxes[c].lo, self.boxes[c].side, p) == 0.0)?;
        }
    }

    /// Leaves j whose dilate t·R_j contains p.
    fn leaves_near(&self, p: &[f64], t: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(b) = stack.pop() {
            let node = &self.boxes[b];
            if !box_dilate_contains(&node.lo, node.side, t, p) {
                continue;
            }
            match node.leaf {
                Some(l) => out.push(l),
                None => stack.extend_from_slice(&node.children),
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaves j with t·R_j ∩ t·R_i ≠ ∅, j ≠ i.
    pub fn neighbors(&self, i: usize, t: f64) -> Vec<usize> {
        let (lo, side) = self.cubes[i].dilate(t);
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(b) = stack.pop() {
            let node = &self.boxes[b];
            let g = 0.5 * (t - 1.0) * node.side;
            let nlo: Vec<f64> = node.lo.iter().map(|l| l - g).collect();
            if !boxes_meet(&nlo, t * node.side, &lo, side) {
                continue;
            }
            match node.leaf {
                Some(l) if l != i => out.push(l),
                Some(_) => {}
                None => stack.extend_from_slice(&node.children),
            }
        }
        out.sort_unstable();
        out
    }

    /// φ_i(p) and ∇φ_i(p) for every cube with p in the support 3R_i.
    pub fn partition_of_unity(&self, p: &[f64]) -> Vec<PouTerm> {
        let n = p.len();
        let raw: Vec<(usize, f64, Vec<f64>)> = self
            .leaves_near(p, 3.0)
            .into_iter()
            .filter_map(|j| {
                let c = &self.cubes[j];
                let mut vals = Vec::with_capacity(n);
                let mut ders = Vec::with_capacity(n);
                for a in 0..n {
                    let t = (p[a] - (c.lo[a] + 0.5 * c.side)) / c.side;
                    let (v, dv) = smoothstep_weight(t);
                    vals.push(v);
                    ders.push(dv / c.side);
                }
                let psi: f64 = vals.iter().product();
                if psi <= 0.0 {
                    return None;
                }
                let grad: Vec<f64> = (0..n)
                    .map(|a| ders[a] * vals.iter().enumerate().filter(|(b, _)| *b != a).map(|(_, v)| v).product::<f64>())
                    .collect();
                Some((j, psi, grad))
            })
            .collect();
        let total: f64 = raw.iter().map(|r| r.1).sum();
        let mut gsum = vec![0.0; n];
        for r in &raw {
            for a in 0..n {
                gsum[a] += r.2[a];
            }
        }
        raw.into_iter()
            .map(|(j, psi, g)| {
                let phi = psi / total;
                let grad = (0..n).map(|a| (g[a] - phi * gsum[a]) / total).collect();
                PouTerm { cube: j, phi, grad }
            })
            .collect()
    }

    /// Σ φ_i A_i and its gradient.
    fn blend(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let n = p.len();
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        for t in self.partition_of_unity(p) {
            let a = self.cubes[t.cube].affine.as_ref().expect("cubes meeting U0 carry an affine piece");
            let v = a.eval(p);
            value += t.phi * v;
            for k in 0..n {
                grad[k] += t.grad[k] * v + t.phi * a.slope[k];
            }
        }
        (value, grad)
    }

    /// A(p): the blended graph on U₀, its McShane extension elsewhere.
    pub fn eval(&self, p: &[f64]) -> f64 {
        if self.in_u0(p) {
            return self.blend(p).0;
        }
        self.anchors.iter().map(|(q, v)| v + self.lip_target * dist(p, q)).fold(f64::INFINITY, f64::min)
    }

    /// ∇A(p) on U₀.
    pub fn gradient(&self, p: &[f64]) -> Option<Vec<f64>> {
        self.in_u0(p).then(|| self.blend(p).1)
    }

    /// Point (p, A(p)) of Γ_R in ambient coordinates.
    pub fn graph_point(&self, p: &[f64]) -> Vec<f64> {
        self.frame().lift(p, self.eval(p))
    }

    /// Bounding box of the projected mesh nodes.
    fn core_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.frame().dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for t in &self.projected {
            for a in 0..n {
                lo[a] = lo[a].min(t.lo[a]);
                hi[a] = hi[a].max(t.hi[a]);
            }
        }
        (lo, hi)
    }

    fn sample_lipschitz(&self, seed: u64, pairs: usize) -> f64 {
        let (lo, hi) = self.core_box();
        let n = lo.len();
        let span = dist(&lo, &hi).max(f64::MIN_POSITIVE);
        let smallest = self.cubes.iter().filter(|c| c.active).map(|c| c.side).fold(f64::INFINITY, f64::min);
        let mut rng = rng::stream(seed, "lipgraph-lipschitz");
        let mut samples = Vec::with_capacity(pairs);
        for k in 0..pairs {
            let p: Vec<f64> = if k % 4 == 3 {
                // A quarter of the pairs anywhere in U₀.
                let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = norm(&v).max(1e-12);
                let r = self.u0_radius * rng.random::<f64>();
                v.iter_mut().zip(&self.u0_center).for_each(|(a, c)| *a = c + *a / s * r);
                v
            } else {
                (0..n).map(|a| rng.random_range(lo[a] - 0.1 * span..=hi[a] + 0.1 * span)).collect()
            };
            let len = (smallest / 4.0).ln() + rng.random::<f64>() * ((2.0 * span).ln() - (smallest / 4.0).ln());
            let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = norm(&dir).max(1e-12);
            dir.iter_mut().for_each(|d| *d *= len.exp() / s);
            let q: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + b).collect();
            samples.push((p, q));
        }
        samples
            .par_iter()
            .filter(|(p, q)| self.in_u0(p) && self.in_u0(q))
            .map(|(p, q)| (self.blend(p).0 - self.blend(q).0).abs() / dist(p, q))
            .reduce(|| 0.0, f64::max)
    }
}

/// Measured constants of the plane partition and the assembled pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub cubes: usize,
    pub active: usize,
    /// min and max of D(y) / diam R_i over sample points y ∈ 10R_i.
    pub d_ratio: (f64, f64),
    /// min and max of diam R_i / diam R_j over pairs with 10R_i ∩ 10R_j ≠ ∅.
    pub neighbor_ratio: (f64, f64),
    /// max over the same pairs of sup_{100R_j} |A_i − A_j| / (ε diam R_j).
    pub consistency: f64,
    /// min and max of diam Q(i) / diam R_i.
    pub select_size: (f64, f64),
    /// max of dist(Π(Q(i)), R_i) / diam R_i.
    pub select_distance: f64,
    /// max of (dist(p, Π(Q*)) + diam Q*) / diam R_i for the witness cube.
    pub witness_bound: f64,
    pub max_slope: f64,
    /// max |Σφ_i − 1| at sample points.
    pub pou_sum_error: f64,
    /// max |∇φ_i| diam R_i at sample points.
    pub pou_gradient: f64,
    /// max |∇φ_i analytic − finite difference|, relative to 1/diam R_i.
    pub pou_gradient_fd: f64,
}

fn grid_in_box(lo: &[f64], side: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let n = lo.len();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut k| {
            (0..n)
                .map(|a| {
                    let i = k % per_axis;
                    k /= per_axis;
                    lo[a] + side * i as f64 / (per_axis - 1) as f64
                })
                .collect()
        })
        .collect()
}

pub fn check_partition(build: &GraphBuild, seed: u64) -> PartitionReport {
    let active: Vec<usize> = (0..build.cubes.len()).filter(|&i| build.cubes[i].active).collect();
    let per_cube: Vec<(f64, f64, f64, f64, f64)> = active
        .par_iter()
        .map(|&i| {
            let c = &build.cubes[i];
            let (lo, side) = c.dilate(10.0);
            let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
            for y in grid_in_box(&lo, side, 5) {
                let r = build.d_plane(&y) / c.diam();
                dmin = dmin.min(r);
                dmax = dmax.max(r);
            }
            let (mut rmin, mut rmax, mut cons) = (f64::INFINITY, 0.0f64, 0.0f64);
            let ai = c.affine.as_ref().unwrap();
            for j in build.neighbors(i, 10.0) {
                let cj = &build.cubes[j];
                let ratio = c.diam() / cj.diam();
                rmin = rmin.min(ratio);
                rmax = rmax.max(ratio);
                if let Some(aj) = &cj.affine {
                    let center = cj.center();
                    let diff_at = (ai.eval(&center) - aj.eval(&center)).abs();
                    let spread: f64 = ai.slope.iter().zip(&aj.slope).map(|(a, b)| (a - b).abs()).sum::<f64>() * 50.0 * cj.side;
                    let sup = diff_at + spread;
                    let scaled = if sup == 0.0 {
                        0.0
                    } else if build.epsilon == 0.0 {
                        f64::INFINITY
                    } else {
                        sup / (build.epsilon * cj.diam())
                    };
                    cons = cons.max(scaled);
                }
            }
            (dmin, dmax, rmin, rmax, cons)
        })
        .collect();
    let mut d_ratio = (f64::INFINITY, 0.0f64);
    let mut neighbor_ratio = (f64::INFINITY, 0.0f64);
    let mut consistency = 0.0f64;
    for &(dmin, dmax, rmin, rmax, cons) in &per_cube {
        d_ratio = (d_ratio.0.min(dmin), d_ratio.1.max(dmax));
        neighbor_ratio = (neighbor_ratio.0.min(rmin), neighbor_ratio.1.max(rmax));
        consistency = consistency.max(cons);
    }

    let mut select_size = (f64::INFINITY, 0.0f64);
    let mut select_distance = 0.0f64;
    let mut witness_bound = 0.0f64;
    for &i in &active {
        let c = &build.cubes[i];
        let q = c.selected.unwrap();
        let t = build.projected.iter().find(|t| t.id == q).unwrap();
        let r = t.diam / c.diam();
        select_size = (select_size.0.min(r), select_size.1.max(r));
        let d = t.points.iter().map(|p| box_point(&c.lo, c.side, p)).fold(f64::INFINITY, f64::min);
        select_distance = select_distance.max(d / c.diam());
        witness_bound = witness_bound.max(c.witness_bound);
    }

    let (lo, hi) = build.core_box();
    let n = lo.len();
    let mut rng = rng::stream(seed, "lipgraph-partition-of-unity");
    let points: Vec<Vec<f64>> = (0..2000).map(|_| (0..n).map(|a| rng.random_range(lo[a]..=hi[a])).collect()).collect();
    let (pou_sum_error, pou_gradient, pou_gradient_fd) = points
        .par_iter()
        .map(|p| {
            let terms = build.partition_of_unity(p);
            let sum: f64 = terms.iter().map(|t| t.phi).sum();
            let mut grad_c = 0.0f64;
            let mut fd_err = 0.0f64;
            for t in &terms {
                let d = build.cubes[t.cube].diam();
                grad_c = grad_c.max(norm(&t.grad) * d);
                let step = 1e-6 * build.cubes[t.cube].side;
                for a in 0..n {
                    let mut pp = p.clone();
                    pp[a] += step;
                    let up = phi_of(build, &pp, t.cube);
                    pp[a] -= 2.0 * step;
                    let down = phi_of(build, &pp, t.cube);
                    fd_err = fd_err.max(((up - down) / (2.0 * step) - t.grad[a]).abs() * d);
                }
            }
            ((sum - 1.0).abs(), grad_c, fd_err)
        })
        .reduce(|| (0.0, 0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));

    PartitionReport {
        cubes: build.cubes.len(),
        active: active.len(),
        d_ratio,
        neighbor_ratio,
        consistency,
        select_size,
        select_distance,
        witness_bound,
        max_slope: build.max_slope,
        pou_sum_error,
        pou_gradient,
        pou_gradient_fd,
    }
}

fn phi_of(build: &GraphBuild, p: &[f64], cube: usize) -> f64 {
    build.partition_of_unity(p).iter().find(|t| t.cube == cube).map_or(0.0, |t| t.phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphReport {
    /// max over nodes x ∈ k₀R of dist(x, (Πx, A(Πx))) / d_R(x).
    pub max_ratio: f64,
    pub worst_node: Option<usize>,
    pub nodes_checked: usize,
    pub sa_checked: usize,
    /// SA cubes whose ½B(Q) the graph misses.
    pub sa_missed: Vec<usize>,
    pub lip_u0: f64,
    /// Sampled Lipschitz quotient of A restricted to single boxes 2R_j.
    pub lip_local: f64,
    pub far_pairs: usize,
    /// Pairs with |Π^⊥x − Π^⊥y| > 2α |Πx − Πy|.
    pub far_violations: usize,
    /// max |Π^⊥x − Π^⊥y| / |Πx − Πy| over the sampled pairs.
    pub far_worst: f64,
}

pub fn verify_graph(build: &GraphBuild, mesh: &BoundaryMesh, lattice: &DyadicLattice, seed: u64) -> GraphReport {
    let frame = build.frame();
    let tree = &build.tree;
    let r = lattice.cube(tree.root);
    let xr = mesh.node(r.center);
    let reach = 0.5 * build.k0 * r.diam;
    let nodes: Vec<usize> = (0..mesh.len()).filter(|&i| dist(mesh.node(i), xr) <= reach).collect();
    let d_values: Vec<f64> = (0..mesh.len()).into_par_iter().map(|i| tree.d_function(mesh, lattice, mesh.node(i))).collect();
    let ratios: Vec<(f64, usize)> = nodes
        .par_iter()
        .map(|&i| {
            let x = mesh.node(i);
            let p = frame.project(x);
            ((frame.height(x) - build.eval(&p)).abs() / d_values[i], i)
        })
        .collect();
    let (max_ratio, worst_node) =
        ratios.iter().fold((0.0, None), |acc, &(v, i)| if v > acc.0 { (v, Some(i)) } else { acc });

    let sa_missed: Vec<usize> = tree
        .small_scale
        .par_iter()
        .copied()
        .filter(|&q| !graph_meets_ball(build, &lattice.cube_balls(mesh, q).center, 0.5 * lattice.cube_balls(mesh, q).inner))
        .collect();

    let mut rng = rng::stream(seed, "lipgraph-verify");
    let active: Vec<usize> = (0..build.cubes.len()).filter(|&i| build.cubes[i].active).collect();
    let mut local_pairs = Vec::new();
    for &j in &active {
        let (lo, side) = build.cubes[j].dilate(2.0);
        for _ in 0..2 {
            let p: Vec<f64> = lo.iter().map(|l| l + side * rng.random::<f64>()).collect();
            let q: Vec<f64> = lo.iter().map(|l| l + side * rng.random::<f64>()).collect();
            local_pairs.push((p, q));
        }
    }
    let lip_local = local_pairs
        .par_iter()
        .filter(|(p, q)| build.in_u0(p) && build.in_u0(q) && dist(p, q) > 0.0)
        .map(|(p, q)| (build.eval(p) - build.eval(q)).abs() / dist(p, q))
        .reduce(|| 0.0, f64::max);

    let mut far_pairs = 0;
    let mut far_violations = 0;
    let mut far_worst = 0.0f64;
    if mesh.len() > 1 {
        for _ in 0..20_000 {
            let a = rng.random_range(0..mesh.len());
            let b = rng.random_range(0..mesh.len());
            let (x, y) = (mesh.node(a), mesh.node(b));
            if a == b || dist(x, y) < 1e-3 * d_values[a].min(d_values[b]) {
                continue;
            }
            far_pairs += 1;
            let dp = dist(&frame.project(x), &frame.project(y));
            let dh = (frame.height(x) - frame.height(y)).abs();
            let ratio = if dp > 0.0 { dh / dp } else { f64::INFINITY };
            if ratio > 2.0 * tree.alpha_stop {
                far_violations += 1;
            }
            far_worst = far_worst.max(ratio);
        }
    }
    GraphReport {
        max_ratio,
        worst_node,
        nodes_checked: nodes.len(),
        sa_checked: tree.small_scale.len(),
        sa_missed,
        lip_u0: build.lip_target,
        lip_local,
        far_pairs,
        far_violations,
        far_worst,
    }
}

fn graph_meets_ball(build: &GraphBuild, center: &[f64], radius: f64) -> bool {
    let frame = build.frame();
    let c = frame.project(center);
    let inside = |p: &[f64]| dist(&build.graph_point(p), center) < radius;
    if inside(&c) {
        return true;
    }
    let lo: Vec<f64> = c.iter().map(|v| v - radius).collect();
    grid_in_box(&lo, 2.0 * radius, 17).iter().any(|p| inside(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub cube: usize,
    /// ∫_Q f 1_window dσ
    pub mass: f64,
    /// H^n(Γ_R ∩ B(Q))
    pub area: f64,
    pub value: f64,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl TransferCell {
    /// |value · area − mass|
    pub fn mass_defect(&self) -> f64 {
        (self.value * self.area - self.mass).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTransfer {
    pub cells: Vec<TransferCell>,
}

impl DensityTransfer {
    /// f_Γ at a point of Γ_R.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.cells.iter().filter(|c| dist(x, &c.center) < c.radius).map(|c| c.value).sum()
    }
}

/// Quadrature cells per axis for H^n(Γ_R ∩ B(Q)).
pub const AREA_CELLS: usize = 32;

/// f_Γ: on each Γ_R ∩ B(Q), Q ∈ SA(R), the constant carrying the mass of f on Q.
pub fn transfer_density(
    build: &GraphBuild,
    mesh: &BoundaryMesh,
    lattice: &DyadicLattice,
    f: &[f64],
    window: Option<&[bool]>,
) -> Result<DensityTransfer> {
    if f.len() != mesh.len() {
        return Err(Error::DimensionMismatch { expected: mesh.len(), found: f.len() });
    }
    if let Some(w) = window {
        if w.len() != mesh.len() {
            return Err(Error::DimensionMismatch { expected: mesh.len(), found: w.len() });
        }
    }
    if build.tree.small_scale.is_empty() {
        return Err(Error::Construction("SA(R) is empty".into()));
    }
    let frame = build.frame();
    let n = frame.dim();
    let cells: Vec<Result<TransferCell>> = build
        .tree
        .small_scale
        .par_iter()
        .map(|&q| {
            let cube = lattice.cube(q);
            let balls = lattice.cube_balls(mesh, q);
            let (center, radius) = (balls.center, balls.inner);
            let mass: f64 = cube
                .nodes
                .iter()
                .filter(|&&i| window.is_none_or(|w| w[i]))
                .map(|&i| f[i] * mesh.weight(i))
                .sum();
            let c = frame.project(&center);
            let cell = 2.0 * radius / AREA_CELLS as f64;
            let volume = cell.powi(n as i32);
            let mut area = 0.0;
            let lo: Vec<f64> = c.iter().map(|v| v - radius + 0.5 * cell).collect();
            for p in grid_in_box(&lo, 2.0 * radius - cell, AREA_CELLS) {
                if dist(&p, &c) >= radius || !build.in_u0(&p) {
                    continue;
                }
                let (h, g) = build.blend(&p);
                if dist(&frame.lift(&p, h), &center) < radius {
                    area += (1.0 + dot(&g, &g)).sqrt() * volume;
                }
            }
            if area <= 0.0 {
                return Err(Error::GraphMissesBall(q));
            }
            Ok(TransferCell { cube: q, mass, area, value: mass / area, center, radius })
        })
        .collect();
    Ok(DensityTransfer { cells: cells.into_iter().collect::<Result<_>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::build_lattice;
    use crate::geometry::{discretize_graph, BumpProfile, GraphDomain};

    fn root_at_origin(mesh: &BoundaryMesh, lattice: &DyadicLattice) -> usize {
        let (i, _) = mesh.nearest_node(&vec![0.0; mesh.ambient_dim()]);
        lattice.cube_of(lattice.j_max, i).unwrap()
    }

    #[test]
    fn flat_graph_is_zero() {
        let mesh = discretize_graph(&GraphDomain::flat(1, 1.0), 1.0 / 64.0).unwrap();
        let lat = build_lattice(&mesh, -3, 0).unwrap();
        let root = root_at_origin(&mesh, &lat);
        let g = build_graph(&mesh, &lat, root, 0.2, 0.3, GraphParams::default()).unwrap();
        assert!(g.tree.big_angle.is_empty());
        assert!(g.epsilon <= 1e-14);
        for p in [-0.7, 0.0, 0.33, 5.0] {
            assert!(g.eval(&[p]).abs() <= 1e-14);
        }
        let report = verify_graph(&g, &mesh, &lat, 0);
        assert!(report.max_ratio <= 1e-14);
        assert!(report.sa_missed.is_empty());
    }

    #[test]
    fn smoothstep_is_c1() {
        for t in [1.0, 1.1, 1.25, 1.4, 1.5] {
            let h = 1e-7;
            let (_, d) = smoothstep_weight(t);
            let fd = (smoothstep_weight(t + h).0 - smoothstep_weight(t - h).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-5, "{t}: {d} vs {fd}");
        }
        assert_eq!(smoothstep_weight(-1.6).0, 0.0);
        assert_eq!(smoothstep_weight(0.99).0, 1.0);
    }

    #[test]
    fn bump_curve_builds_and_verifies() {
        let dom = GraphDomain::bump(1, 1.0, 0.05, 0.5, BumpProfile::Smooth);
        let mesh = discretize_graph(&dom, 1.0 / 64.0).unwrap();
        let lat = build_lattice(&mesh, -3, 0).unwrap();
        let root = root_at_origin(&mesh, &lat);
        let g = build_graph(&mesh, &lat, root, 0.2, 0.5, GraphParams::default()).unwrap();
        assert!(g.max_slope <= 2.0 * 0.5);
        let rep = verify_graph(&g, &mesh, &lat, 0);
        assert!(rep.max_ratio <= 0.5, "{rep:?}");
        assert!(rep.sa_missed.is_empty());
        let part = check_partition(&g, 0);
        assert!(part.d_ratio.0 >= 10.0 && part.d_ratio.1 <= 60.0, "{part:?}");
        assert!(part.neighbor_ratio.0 >= 1.0 / 6.0 && part.neighbor_ratio.1 <= 6.0);
        assert!(part.pou_sum_error <= 1e-12);
    }

    #[test]
    fn small_neighborhoods_give_tilted_pieces() {
        let dom = GraphDomain::bump(1, 1.0, 0.1, 0.5, BumpProfile::Smooth);
        let mesh = discretize_graph(&dom, 1.0 / 128.0).unwrap();
        let lat = build_lattice(&mesh, -4, 0).unwrap();
        let root = root_at_origin(&mesh, &lat);
        let alpha = 0.6;
        let params = GraphParams { k: Some(2.0), ..GraphParams::default() };
        let g = build_graph(&mesh, &lat, root, 0.1, alpha, params).unwrap();
        assert!(g.max_slope > 0.0 && g.max_slope <= 2.0 * alpha, "{}", g.max_slope);
        let rep = verify_graph(&g, &mesh, &lat, 0);
        assert!(rep.lip_local <= 3.0 * alpha + 1e-9, "{rep:?}");
        assert!(rep.lip_u0 <= 10.0 * alpha);
        assert!(rep.sa_missed.is_empty());
        let part = check_partition(&g, 0);
        assert!(part.consistency.is_finite() && part.consistency > 0.0);
        assert!(part.pou_gradient <= 8.0 && part.pou_gradient_fd <= 1e-6, "{part:?}");
    }
}
