//! Whitney decomposition of an open set into maximal dyadic cubes Q with 5Q ⊂ U.

use crate::error::{invalid, Result};

/// An open subset of R^d described through exact tests on closed cubes.
pub trait OpenSet: Sync {
    fn dim(&self) -> usize;

    /// Whether the closed cube `[lo, lo + side]` lies in U.
    fn contains_cube(&self, lo: &[f64], side: f64) -> bool;

    /// Whether the closed cube misses U entirely.
    fn misses_cube(&self, _lo: &[f64], _side: f64) -> bool {
        false
    }

    /// Euclidean distance from the closed cube to the complement of U.
    fn distance_to_complement(&self, lo: &[f64], side: f64) -> f64;
}

/// U = {x : x_axis > offset}.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub dim: usize,
    pub axis: usize,
    pub offset: f64,
}

impl OpenSet for HalfSpace {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contains_cube(&self, lo: &[f64], _side: f64) -> bool {
        lo[self.axis] > self.offset
    }

    fn misses_cube(&self, lo: &[f64], side: f64) -> bool {
        lo[self.axis] + side <= self.offset
    }

    fn distance_to_complement(&self, lo: &[f64], _side: f64) -> f64 {
        (lo[self.axis] - self.offset).max(0.0)
    }
}

/// U = R^d minus one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PuncturedSpace {
    pub point: Vec<f64>,
}

fn point_cube_distance(p: &[f64], lo: &[f64], side: f64) -> f64 {
    p.iter()
        .zip(lo)
        .map(|(&c, &l)| {
            let d = (l - c).max(c - l - side).max(0.0);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl OpenSet for PuncturedSpace {
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn contains_cube(&self, lo: &[f64], side: f64) -> bool {
        point_cube_distance(&self.point, lo, side) > 0.0
    }

    fn distance_to_complement(&self, lo: &[f64], side: f64) -> f64 {
        point_cube_distance(&self.point, lo, side)
    }
}

/// U = R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Everything {
    pub dim: usize,
}

impl OpenSet for Everything {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contains_cube(&self, _lo: &[f64], _side: f64) -> bool {
        true
    }

    fn distance_to_complement(&self, _lo: &[f64], _side: f64) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitneyCube {
    pub lo: Vec<f64>,
    pub side: f64,
    pub depth: usize,
    /// Indices of cubes Q' with 3Q ∩ 3Q' ≠ ∅ (excluding itself).
    pub neighbors: Vec<usize>,
}

impl WhitneyCube {
    /// The concentric cube t·Q as (lo, side).
    pub fn dilate(&self, t: f64) -> (Vec<f64>, f64) {
        let grow = 0.5 * (t - 1.0) * self.side;
        (self.lo.iter().map(|c| c - grow).collect(), t * self.side)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lo).all(|(&x, &l)| x >= l && x <= l + self.side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitneyCover {
    pub cubes: Vec<WhitneyCube>,
    /// Cubes at max_depth that neither satisfy 5Q ⊂ U nor miss U.
    pub unresolved: Vec<WhitneyCube>,
    /// Largest number of dilates 3Q containing a common probe point.
    pub overlap: usize,
}

fn boxes_meet(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> bool {
    a.0.iter().zip(&b.0).all(|(&x, &y)| x <= y + b.1 && y <= x + a.1)
}

/// Maximal dyadic subcubes of the box `[lo, lo + side]^d` with 5Q ⊂ U.
pub fn whitney(u: &dyn OpenSet, lo: &[f64], side: f64, max_depth: usize) -> Result<WhitneyCover> {
    if lo.len() != u.dim() {
        return Err(invalid("bbox", format!("dimension {} does not match the set ({})", lo.len(), u.dim())));
    }
    if !(side > 0.0) {
        return Err(invalid("bbox", "side must be positive"));
    }
    let d = lo.len();
    let mut cubes = Vec::new();
    let mut unresolved = Vec::new();
    let mut stack = vec![(lo.to_vec(), side, 0usize)];
    while let Some((clo, s, depth)) = stack.pop() {
        let cube = WhitneyCube { lo: clo.clone(), side: s, depth, neighbors: Vec::new() };
        let (flo, fs) = cube.dilate(5.0);
        if u.contains_cube(&flo, fs) {
            cubes.push(cube);
            continue;
        }
        if u.misses_cube(&clo, s) {
            continue;
        }
        if depth == max_depth {
            unresolved.push(cube);
            continue;
        }
        let half = 0.5 * s;
        // Reverse order so children come off the stack lowest corner first.
        for k in (0..1usize << d).rev() {
            let child: Vec<f64> = (0..d).map(|i| clo[i] + if k >> i & 1 == 1 { half } else { 0.0 }).collect();
            stack.push((child, half, depth + 1));
        }
    }
    let dilated: Vec<(Vec<f64>, f64)> = cubes.iter().map(|c| c.dilate(3.0)).collect();
    for a in 0..cubes.len() {
        cubes[a].neighbors = (0..cubes.len()).filter(|&b| b != a && boxes_meet(&dilated[a], &dilated[b])).collect();
    }
    // Overlap probes: centers and lower corners of every 3Q, nudged inward.
    let mut overlap = 0;
    for (k, (blo, bs)) in dilated.iter().enumerate() {
        let probes = [
            blo.iter().map(|c| c + 0.5 * bs).collect::<Vec<_>>(),
            blo.iter().map(|c| c + 1e-9 * bs).collect::<Vec<_>>(),
        ];
        for p in &probes {
            let count = 1 + cubes[k]
                .neighbors
                .iter()
                .filter(|&&b| p.iter().zip(&dilated[b].0).all(|(&x, &l)| x >= l && x <= l + dilated[b].1))
                .count();
            overlap = overlap.max(count);
        }
    }
    Ok(WhitneyCover { cubes, unresolved, overlap })
}

/// Index of the cube whose closure contains each point; on shared faces the
/// cube with the lexicographically lowest corner wins.
pub fn assign_points(cover: &WhitneyCover, points: &[Vec<f64>]) -> Vec<Option<usize>> {
    points
        .iter()
        .map(|p| {
            cover
                .cubes
                .iter()
                .enumerate()
                .filter(|(_, c)| c.contains(p))
                .min_by(|(_, a), (_, b)| a.lo.partial_cmp(&b.lo).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(k, _)| k)
        })
        .collect()
}
