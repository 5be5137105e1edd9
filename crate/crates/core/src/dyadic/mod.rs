//! Dyadic cubes on the boundary and Whitney cubes in the ambient space.
//!
//! Boundary cubes at generation j are built by intersecting the node set with
//! the ambient grid of side 2^j, top-down inside each parent, and absorbing
//! pieces that come out too small into a sibling.

pub mod whitney;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::BoundaryMesh;
use crate::linalg::{dist, dist_sq};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCube {
    pub id: usize,
    pub level: i32,
    /// Lowest ambient grid index (at side 2^level) among the merged grid cells.
    pub corner: Vec<i64>,
    pub nodes: Vec<usize>,
    pub diam: f64,
    pub measure: f64,
    pub center: usize,
    /// Distance from the center node to the nearest node outside the cube.
    pub center_depth: f64,
    /// B(Q) has radius `c1 * diam`.
    pub c1: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl BoundaryCube {
    pub fn side(&self) -> f64 {
        2f64.powi(self.level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeConstants {
    /// max diam Q / 2^j
    pub c_d: f64,
    /// min diam Q / 2^j over cubes with more than one node
    pub diam_lower: f64,
    /// smallest C with σ(Q) ∈ [2^{jn}/C, C 2^{jn}]
    pub measure: f64,
    /// smallest c1 over all cubes
    pub c1_min: f64,
    /// largest σ{x ∈ Q : dist(x, ∂Ω∖Q) ≤ diam Q / 8} / σ(Q)
    pub thin_boundary: f64,
}

#[derive(Debug, Clone)]
pub struct DyadicLattice {
    pub j_min: i32,
    pub j_max: i32,
    cubes: Vec<BoundaryCube>,
    levels: Vec<Vec<usize>>,
    /// node -> cube id, per level (index j_max - j)
    owner: Vec<Vec<usize>>,
    pub constants: LatticeConstants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubeBalls {
    pub center: Vec<f64>,
    /// Radius of B(Q) = c1 diam Q.
    pub inner: f64,
    /// Radius of B_Q = diam Q.
    pub outer: f64,
}

fn diameter(mesh: &BoundaryMesh, ids: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            best = best.max(dist_sq(mesh.node(a), mesh.node(b)));
        }
    }
    best.sqrt()
}

fn set_distance(mesh: &BoundaryMesh, a: &[usize], b: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &i in a {
        for &j in b {
            best = best.min(dist_sq(mesh.node(i), mesh.node(j)));
        }
    }
    best.sqrt()
}

fn centroid(mesh: &BoundaryMesh, ids: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; mesh.ambient_dim()];
    for &i in ids {
        for (a, v) in c.iter_mut().zip(mesh.node(i)) {
            *a += v / ids.len() as f64;
        }
    }
    c
}

fn set_distance_to(mesh: &BoundaryMesh, x: &[f64], ids: &[usize]) -> f64 {
    ids.iter().map(|&i| dist_sq(x, mesh.node(i))).fold(f64::INFINITY, f64::min).sqrt()
}

struct Group {
    corner: Vec<i64>,
    nodes: Vec<usize>,
    diam: f64,
    measure: f64,
}

/// Groups by the ambient grid of side 2^j, then absorbs groups with
/// diam < 2^{j-1} or measure < 2^{jn}/4 into their nearest sibling until none
/// is left or a single group remains.
fn split(mesh: &BoundaryMesh, ids: &[usize], j: i32) -> Vec<Group> {
    let side = 2f64.powi(j);
    let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for &i in ids {
        let key = mesh.node(i).iter().map(|c| (c / side).floor() as i64).collect();
        cells.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Group> = cells
        .into_iter()
        .map(|(corner, nodes)| {
            let diam = diameter(mesh, &nodes);
            let measure = nodes.iter().map(|&i| mesh.weight(i)).sum();
            Group { corner, nodes, diam, measure }
        })
        .collect();
    let lower = 0.5 * side;
    let thin = 0.25 * side.powi(mesh.n() as i32);
    while groups.len() > 1 {
        let Some(small) = groups.iter().position(|g| g.diam < lower || g.measure < thin) else {
            break;
        };
        // Prefer the nearest sibling that is not small itself, so thin strips
        // along the patch edge do not chain together.
        // Ties in set distance go to the group nearest the small group's centroid.
        let centroid = centroid(mesh, &groups[small].nodes);
        let mut target = usize::MAX;
        let mut best = (true, f64::INFINITY, f64::INFINITY);
        for (k, g) in groups.iter().enumerate() {
            if k == small {
                continue;
            }
            let key = (
                g.diam < lower || g.measure < thin,
                set_distance(mesh, &groups[small].nodes, &g.nodes),
                set_distance_to(mesh, &centroid, &g.nodes),
            );
            if key.0 < best.0 || (key.0 == best.0 && (key.1 < best.1 || (key.1 == best.1 && key.2 < best.2))) {
                best = key;
                target = k;
            }
        }
        let absorbed = groups.remove(small);
        let target = if target > small { target - 1 } else { target };
        let g = &mut groups[target];
        g.nodes.extend(absorbed.nodes);
        g.nodes.sort_unstable();
        if absorbed.corner < g.corner {
            g.corner = absorbed.corner;
        }
        g.diam = diameter(mesh, &g.nodes);
        g.measure += absorbed.measure;
    }
    groups
}

/// Builds generations j_max (coarsest) down to j_min.
pub fn build_lattice(mesh: &BoundaryMesh, j_min: i32, j_max: i32) -> Result<DyadicLattice> {
    if j_max < j_min {
        return Err(invalid("j_max", "must be at least j_min"));
    }
    if 2f64.powi(j_min) < 4.0 * mesh.h() * (1.0 - 1e-12) {
        return Err(invalid("j_min", format!("2^j_min = {} below 4h = {}", 2f64.powi(j_min), 4.0 * mesh.h())));
    }
    let n = mesh.n();
    let mut cubes: Vec<BoundaryCube> = Vec::new();
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let all: Vec<usize> = (0..mesh.len()).collect();
    let mut parents: Vec<(Option<usize>, Vec<usize>)> = vec![(None, all)];
    for j in (j_min..=j_max).rev() {
        let mut level = Vec::new();
        for (parent, ids) in &parents {
            for g in split(mesh, ids, j) {
                let id = cubes.len();
                let measure = g.nodes.iter().map(|&i| mesh.weight(i)).sum();
                cubes.push(BoundaryCube {
                    id,
                    level: j,
                    corner: g.corner,
                    nodes: g.nodes,
                    diam: g.diam,
                    measure,
                    center: 0,
                    center_depth: 0.0,
                    c1: 0.0,
                    parent: *parent,
                    children: Vec::new(),
                });
                if let Some(p) = parent {
                    cubes[*p].children.push(id);
                }
                level.push(id);
            }
        }
        if level.is_empty() {
            return Err(Error::EmptyLevel(j));
        }
        parents = level.iter().map(|&id| (Some(id), cubes[id].nodes.clone())).collect();
        levels.push(level);
    }
    let owner: Vec<Vec<usize>> = levels
        .iter()
        .map(|level| {
            let mut own = vec![usize::MAX; mesh.len()];
            for &q in level {
                for &i in &cubes[q].nodes {
                    own[i] = q;
                }
            }
            own
        })
        .collect();

    // Centers: the node deepest inside its cube relative to the other nodes.
    let centers: Vec<(usize, f64, f64)> = cubes
        .par_iter()
        .map(|q| {
            let own = &owner[(j_max - q.level) as usize];
            let depth = |i: usize| {
                (0..mesh.len())
                    .filter(|&k| own[k] != q.id)
                    .map(|k| dist_sq(mesh.node(i), mesh.node(k)))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            };
            let depths: Vec<f64> = q.nodes.iter().map(|&i| depth(i)).collect();
            let thin: f64 = q
                .nodes
                .iter()
                .zip(&depths)
                .filter(|(_, &d)| d <= q.diam / 8.0)
                .map(|(&i, _)| mesh.weight(i))
                .sum::<f64>()
                / q.measure;
            if depths.iter().all(|d| d.is_infinite()) {
                // Whole node set in one cube: use the node nearest the weighted centroid.
                let d = mesh.ambient_dim();
                let mut c = vec![0.0; d];
                for &i in &q.nodes {
                    for (a, v) in c.iter_mut().zip(mesh.node(i)) {
                        *a += mesh.weight(i) * v / q.measure;
                    }
                }
                let best = q
                    .nodes
                    .iter()
                    .copied()
                    .min_by(|&a, &b| dist(mesh.node(a), &c).total_cmp(&dist(mesh.node(b), &c)))
                    .unwrap();
                return (best, f64::INFINITY, 0.0);
            }
            let mut best = (q.nodes[0], depths[0]);
            for (&i, &d) in q.nodes.iter().zip(&depths).skip(1) {
                if d > best.1 {
                    best = (i, d);
                }
            }
            (best.0, best.1, thin)
        })
        .collect();
    let mut thin_boundary = 0.0f64;
    for (q, (c, depth, thin)) in cubes.iter_mut().zip(centers) {
        q.center = c;
        q.center_depth = depth;
        thin_boundary = thin_boundary.max(thin);
    }

    for level in &levels {
        assign_balls(mesh, &mut cubes, level)?;
    }

    let mut c_d = 0.0f64;
    let mut diam_lower = f64::INFINITY;
    let mut measure_c = 1.0f64;
    let mut c1_min = f64::INFINITY;
    for q in &cubes {
        let side = q.side();
        c_d = c_d.max(q.diam / side);
        if q.nodes.len() > 1 {
            diam_lower = diam_lower.min(q.diam / side);
        }
        let scale = side.powi(n as i32);
        measure_c = measure_c.max(q.measure / scale).max(scale / q.measure);
        c1_min = c1_min.min(q.c1);
    }
    Ok(DyadicLattice {
        j_min,
        j_max,
        cubes,
        levels,
        owner,
        constants: LatticeConstants { c_d, diam_lower, measure: measure_c, c1_min, thin_boundary },
    })
}

const C1_FLOOR: f64 = 1.0 / 256.0;

fn assign_balls(mesh: &BoundaryMesh, cubes: &mut [BoundaryCube], level: &[usize]) -> Result<()> {
    for &q in level {
        let cube = &mut cubes[q];
        let mut c1 = 1.0;
        let radius_limit = cube.center_depth;
        while c1 * cube.diam >= radius_limit && c1 >= C1_FLOOR {
            c1 *= 0.5;
        }
        cube.c1 = c1;
    }
    // Shrink overlapping same-level balls; the lower id keeps its radius.
    loop {
        let mut changed = false;
        for (a_pos, &a) in level.iter().enumerate() {
            for &b in &level[a_pos + 1..] {
                let ra = cubes[a].c1 * cubes[a].diam;
                let rb = cubes[b].c1 * cubes[b].diam;
                let d = dist(mesh.node(cubes[a].center), mesh.node(cubes[b].center));
                if ra + rb > d && rb > 0.0 {
                    cubes[b].c1 *= 0.5;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for &q in level {
        let cube = &cubes[q];
        if cube.c1 < C1_FLOOR && cube.nodes.len() > 1 {
            return Err(Error::DegenerateCube { cube: q, reason: format!("c1 = {:.3e} below 2^-8", cube.c1) });
        }
    }
    Ok(())
}

impl DyadicLattice {
    pub fn cubes(&self) -> &[BoundaryCube] {
        &self.cubes
    }

    pub fn cube(&self, id: usize) -> &BoundaryCube {
        &self.cubes[id]
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    /// Cube ids of generation j.
    pub fn level(&self, j: i32) -> &[usize] {
        if j < self.j_min || j > self.j_max {
            return &[];
        }
        &self.levels[(self.j_max - j) as usize]
    }

    /// The generation-j cube containing `node`.
    pub fn cube_of(&self, j: i32, node: usize) -> Option<usize> {
        if j < self.j_min || j > self.j_max {
            return None;
        }
        self.owner[(self.j_max - j) as usize].get(node).copied()
    }

    /// All descendants of `q` including itself, top-down.
    pub fn subtree(&self, q: usize) -> Vec<usize> {
        let mut out = vec![q];
        let mut k = 0;
        while k < out.len() {
            out.extend_from_slice(&self.cubes[out[k]].children);
            k += 1;
        }
        out
    }

    pub fn cube_balls(&self, mesh: &BoundaryMesh, q: usize) -> CubeBalls {
        let c = &self.cubes[q];
        CubeBalls { center: mesh.node(c.center).to_vec(), inner: c.c1 * c.diam, outer: c.diam }
    }
}
