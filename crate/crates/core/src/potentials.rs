//! Layer-potential kernels, their dense boundary realizations, and operator
//! diagnostics.
//!
//! Boundary operators use punctured Nyström quadrature. For the double layer
//! and its adjoint the diagonal of the window containing zero carries the
//! discrete Gauss correction `M[x][x] = K1_exact - sum_{y != x} M[x][y]`, where
//! `K1_exact` is ½ on closed surfaces and 0 on graphs. Off-diagonal entries
//! are never modified, so flat meshes still give identically zero matrices.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{BoundaryMesh, Side};
use crate::linalg::{dist, dist_sq, dot, power_iteration_sigma_max, singular_values, unit_sphere_area, DenseMatrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    DoubleLayer,
    AdjointDoubleLayer,
    /// Component j (0-based) of the Riesz kernel, without the 1/w_n factor.
    Riesz(usize),
    SingleLayerMod,
}

impl KernelKind {
    pub fn name(self) -> String {
        match self {
            KernelKind::DoubleLayer => "double_layer".into(),
            KernelKind::AdjointDoubleLayer => "adjoint_double_layer".into(),
            KernelKind::Riesz(j) => format!("riesz_{}", j + 1),
            KernelKind::SingleLayerMod => "single_layer_mod".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSide {
    Inside,
    Outside,
}

/// Target-side indicator of the ball B(0, radius) or of its complement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialMask {
    pub radius: f64,
    pub side: MaskSide,
}

impl SpatialMask {
    fn keeps(&self, x: &[f64]) -> bool {
        let inside = dot(x, x) < self.radius * self.radius;
        inside == (self.side == MaskSide::Inside)
    }
}

/// Kernel plus truncation window `epsilon_low < |x - y| <= epsilon_high`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub epsilon_low: f64,
    pub epsilon_high: f64,
    pub mask: Option<SpatialMask>,
}

impl KernelSpec {
    pub fn full(kind: KernelKind) -> Self {
        Self { kind, epsilon_low: 0.0, epsilon_high: f64::INFINITY, mask: None }
    }

    pub fn window(kind: KernelKind, low: f64, high: f64) -> Self {
        Self { kind, epsilon_low: low, epsilon_high: high, mask: None }
    }

    pub fn masked(mut self, radius: f64, side: MaskSide) -> Self {
        self.mask = Some(SpatialMask { radius, side });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_low >= 0.0 && self.epsilon_low < self.epsilon_high) {
            return Err(invalid("window", format!("need 0 <= low < high, got ({}, {}]", self.epsilon_low, self.epsilon_high)));
        }
        if let Some(m) = self.mask {
            if !(m.radius > 0.0) {
                return Err(invalid("mask", "radius must be positive"));
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest of the spec (FNV-1a over its textual form).
    pub fn digest(&self) -> u64 {
        let text = format!("{:?}", self);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn in_window(&self, r: f64) -> bool {
        r > self.epsilon_low && r <= self.epsilon_high
    }
}

/// Dense matrix of a boundary operator acting on node values.
#[derive(Debug, Clone)]
pub struct LayerOperator {
    pub matrix: DenseMatrix,
    pub spec: KernelSpec,
    pub w_n: f64,
    pub weights: Vec<f64>,
    pub quadrature_note: &'static str,
}

impl LayerOperator {
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.matrix.matvec(g)
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// W^{1/2} M W^{-1/2}: the matrix whose spectral norm is the L^2(σ) norm.
    pub fn weighted(&self) -> DenseMatrix {
        let s: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
        self.matrix.scaled(&s, &inv)
    }
}

pub const DEFAULT_ENTRY_CAP: usize = 64 << 20;

/// Double-layer kernel ⟨ν(y), y − x⟩ / |x − y|^{n+1} (without 1/w_n).
#[inline]
fn dl_kernel(x: &[f64], y: &[f64], nu_y: &[f64], n: usize) -> f64 {
    let mut num = 0.0;
    let mut r2 = 0.0;
    for k in 0..x.len() {
        let d = y[k] - x[k];
        num += nu_y[k] * d;
        r2 += d * d;
    }
    num / r2.powf(0.5 * (n as f64 + 1.0))
}

#[inline]
fn sl_kernel(x: &[f64], y: &[f64], n: usize) -> f64 {
    let r = dist(x, y);
    let ry = crate::linalg::norm(y);
    if n == 1 {
        r.ln() - if ry >= 1.0 { ry.ln() } else { 0.0 }
    } else {
        let e = 1.0 - n as f64;
        (r.powf(e) - if ry >= 1.0 { ry.powf(e) } else { 0.0 }) / e
    }
}

/// Unweighted entry k(x_i, x_j) (including 1/w_n where it belongs).
fn entry(mesh: &BoundaryMesh, kind: KernelKind, i: usize, j: usize, w_n: f64) -> f64 {
    let n = mesh.n();
    let (x, y) = (mesh.node(i), mesh.node(j));
    match kind {
        KernelKind::DoubleLayer => dl_kernel(x, y, mesh.normal(j), n) / w_n,
        KernelKind::AdjointDoubleLayer => dl_kernel(y, x, mesh.normal(i), n) / w_n,
        KernelKind::Riesz(c) => (x[c] - y[c]) / dist_sq(x, y).powf(0.5 * (n as f64 + 1.0)),
        KernelKind::SingleLayerMod => sl_kernel(x, y, n) / w_n,
    }
}

/// Diagonal of M(K) that makes the row sums equal the exact K1.
fn gauss_diagonal(mesh: &BoundaryMesh, i: usize, w_n: f64) -> f64 {
    let x = mesh.node(i);
    let n = mesh.n();
    let off: f64 = (0..mesh.len())
        .filter(|&j| j != i)
        .map(|j| dl_kernel(x, mesh.node(j), mesh.normal(j), n) * mesh.weight(j))
        .sum();
    mesh.gauss_trace() - off / w_n
}

pub fn truncated_op(mesh: &BoundaryMesh, spec: KernelSpec) -> Result<LayerOperator> {
    truncated_op_capped(mesh, spec, DEFAULT_ENTRY_CAP)
}

pub fn truncated_op_capped(mesh: &BoundaryMesh, spec: KernelSpec, cap: usize) -> Result<LayerOperator> {
    spec.validate()?;
    if let KernelKind::Riesz(c) = spec.kind {
        if c > mesh.n() {
            return Err(invalid("component", format!("Riesz component {} out of 1..={}", c + 1, mesh.n() + 1)));
        }
    }
    let nn = mesh.len();
    let entries = nn * nn;
    if entries > cap {
        return Err(Error::MemoryGuard { entries, cap });
    }
    let w_n = unit_sphere_area(mesh.n());
    let corrected = spec.epsilon_low == 0.0
        && matches!(spec.kind, KernelKind::DoubleLayer | KernelKind::AdjointDoubleLayer);
    let mut data = vec![0.0; entries];
    data.par_chunks_mut(nn.max(1)).enumerate().for_each(|(i, row)| {
        if let Some(m) = spec.mask {
            if !m.keeps(mesh.node(i)) {
                return;
            }
        }
        let x = mesh.node(i);
        for (j, v) in row.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            let r = dist(x, mesh.node(j));
            if spec.in_window(r) {
                *v = entry(mesh, spec.kind, i, j, w_n) * mesh.weight(j);
            }
        }
        if corrected {
            row[i] = gauss_diagonal(mesh, i, w_n);
        }
    });
    let matrix = DenseMatrix::from_row_major(nn, nn, data);
    if !matrix.is_finite() {
        return Err(Error::DegenerateGeometry("non-finite kernel entry (coincident nodes?)".into()));
    }
    Ok(LayerOperator {
        matrix,
        spec,
        w_n,
        weights: mesh.weights().to_vec(),
        quadrature_note: if corrected { "punctured sum, Gauss-corrected diagonal" } else { "punctured sum" },
    })
}

/// Full K and K* with the Gauss diagonal.
pub fn assemble_k(mesh: &BoundaryMesh) -> Result<LayerOperator> {
    truncated_op(mesh, KernelSpec::full(KernelKind::DoubleLayer))
}

pub fn assemble_k_adjoint(mesh: &BoundaryMesh) -> Result<LayerOperator> {
    truncated_op(mesh, KernelSpec::full(KernelKind::AdjointDoubleLayer))
}

/// Matrix-free K_ε g at all nodes; ε = 0 includes the Gauss diagonal.
pub fn boundary_k_apply(mesh: &BoundaryMesh, g: &[f64], epsilon: f64) -> Vec<f64> {
    apply_dl(mesh, g, epsilon, false)
}

/// Matrix-free K*_ε g at all nodes.
pub fn adjoint_k_apply(mesh: &BoundaryMesh, g: &[f64], epsilon: f64) -> Vec<f64> {
    apply_dl(mesh, g, epsilon, true)
}

fn apply_dl(mesh: &BoundaryMesh, g: &[f64], epsilon: f64, adjoint: bool) -> Vec<f64> {
    let w_n = unit_sphere_area(mesh.n());
    let n = mesh.n();
    let eps2 = epsilon * epsilon;
    (0..mesh.len())
        .into_par_iter()
        .map(|i| {
            let x = mesh.node(i);
            let mut acc = 0.0;
            let mut row_sum = 0.0;
            for j in 0..mesh.len() {
                if j == i {
                    continue;
                }
                let y = mesh.node(j);
                let k = if adjoint { dl_kernel(y, x, mesh.normal(i), n) } else { dl_kernel(x, y, mesh.normal(j), n) };
                if epsilon == 0.0 {
                    row_sum += dl_kernel(x, y, mesh.normal(j), n) * mesh.weight(j);
                }
                if dist_sq(x, y) > eps2 {
                    acc += k * g[j] * mesh.weight(j);
                }
            }
            let mut out = acc / w_n;
            if epsilon == 0.0 {
                out += (mesh.gauss_trace() - row_sum / w_n) * g[i];
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaximalSide {
    K,
    KAdjoint,
}

/// Default ratio of the ε grid used for maximal truncations.
pub const EPS_GRID_RATIO: f64 = 0.917_004_043_204_671_2; // 2^{-1/8}

/// Geometric grid from 2·extent down to h with the given ratio (< 1).
///
/// Panics unless `0 < ratio < 1`.
pub fn eps_grid(mesh: &BoundaryMesh, ratio: f64) -> Vec<f64> {
    assert!(ratio > 0.0 && ratio < 1.0, "eps_grid ratio must lie in (0, 1), got {ratio}");
    let mut out = Vec::new();
    let mut e = 2.0 * mesh.extent();
    while e >= mesh.h() * (1.0 - 1e-12) {
        out.push(e);
        e *= ratio;
    }
    out
}

/// sup of |K_ε g| (or |K*_ε g|) over every ε in [min grid, max grid], at every node.
///
/// K_ε g is a step function of ε that jumps at node distances, so the sup is
/// taken exactly over the jump points inside the range; every grid value is
/// dominated.
pub fn maximal_k(mesh: &BoundaryMesh, g: &[f64], side: MaximalSide, grid: &[f64]) -> Vec<f64> {
    let w_n = unit_sphere_area(mesh.n());
    let n = mesh.n();
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(0.0, f64::max);
    if grid.is_empty() {
        return vec![0.0; mesh.len()];
    }
    (0..mesh.len())
        .into_par_iter()
        .map(|i| {
            let x = mesh.node(i);
            let mut terms: Vec<(f64, f64)> = (0..mesh.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let y = mesh.node(j);
                    let k = match side {
                        MaximalSide::K => dl_kernel(x, y, mesh.normal(j), n),
                        MaximalSide::KAdjoint => dl_kernel(y, x, mesh.normal(i), n),
                    };
                    (dist(x, y), k * g[j] * mesh.weight(j) / w_n)
                })
                .collect();
            // Far to near, so a running sum gives K_ε for decreasing ε.
            terms.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut acc = 0.0;
            let mut k = 0;
            while k < terms.len() && terms[k].0 > hi {
                acc += terms[k].1;
                k += 1;
            }
            let mut best = acc.abs();
            while k < terms.len() && terms[k].0 > lo {
                let r = terms[k].0;
                while k < terms.len() && terms[k].0 == r {
                    acc += terms[k].1;
                    k += 1;
                }
                best = best.max(acc.abs());
            }
            best
        })
        .collect()
}

/// sup over ε ≥ t of |K_ε g| on a ratio-½ grid from 2·extent down to t.
pub fn large_scale_maximal(mesh: &BoundaryMesh, g: &[f64], t: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut e = 2.0 * mesh.extent();
    while e > t {
        grid.push(e);
        e *= 0.5;
    }
    grid.push(t);
    maximal_k(mesh, g, MaximalSide::K, &grid)
}

fn check_off_boundary(mesh: &BoundaryMesh, z: &[f64]) -> Result<()> {
    let (i, d) = mesh.nearest_node(z);
    if d < 0.5 * mesh.h() {
        return Err(Error::TooCloseToBoundary { point: z.to_vec(), node: i, distance: d });
    }
    Ok(())
}

/// 𝒟g(z) by plain quadrature; z must stay h/2 away from every node.
pub fn double_layer_interior(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> Result<f64> {
    check_off_boundary(mesh, z)?;
    Ok(double_layer_raw(mesh, g, z, None))
}

fn double_layer_raw(mesh: &BoundaryMesh, g: &[f64], z: &[f64], anchor: Option<f64>) -> f64 {
    let n = mesh.n();
    let c = anchor.unwrap_or(0.0);
    let s: f64 = (0..mesh.len())
        .map(|j| dl_kernel(z, mesh.node(j), mesh.normal(j), n) * (g[j] - c) * mesh.weight(j))
        .sum();
    s / unit_sphere_area(n)
}

/// 𝒟g(z) near the boundary by subtracting g(x) for the anchor node x and
/// adding back g(x)·𝒟1(z) from the exact Gauss identity.
pub fn double_layer_near(mesh: &BoundaryMesh, g: &[f64], z: &[f64], anchor: usize) -> f64 {
    let c = g[anchor];
    double_layer_raw(mesh, g, z, Some(c)) + c * mesh.gauss_value(mesh.side_of(z))
}

/// ∇𝒟g(z); with an anchor the constant g(x) is subtracted (∇𝒟1 = 0 off the boundary).
pub fn grad_double_layer(mesh: &BoundaryMesh, g: &[f64], z: &[f64], anchor: Option<usize>) -> Vec<f64> {
    let n = mesh.n();
    let d = n + 1;
    let c = anchor.map(|a| g[a]).unwrap_or(0.0);
    let mut out = vec![0.0; d];
    for j in 0..mesh.len() {
        let y = mesh.node(j);
        let nu = mesh.normal(j);
        let diff: Vec<f64> = (0..d).map(|k| z[k] - y[k]).collect();
        let r2 = dot(&diff, &diff);
        let r = r2.sqrt();
        let p = r.powi(n as i32 + 1);
        // k(z, y) = -⟨ν, z − y⟩ / r^{n+1}
        let s = dot(nu, &diff);
        let coef = (g[j] - c) * mesh.weight(j);
        for k in 0..d {
            out[k] += coef * (-nu[k] / p + (n as f64 + 1.0) * s * diff[k] / (p * r2));
        }
    }
    let w_n = unit_sphere_area(n);
    out.iter_mut().for_each(|v| *v /= w_n);
    out
}

/// 𝒮_mod g(z) with kernel (|z − y|^{1−n} − 1_{|y|≥1}|y|^{1−n}) / (w_n (1 − n)),
/// logarithmic for n = 1.
pub fn single_layer_mod(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> Result<f64> {
    check_off_boundary(mesh, z)?;
    Ok(single_layer_raw(mesh, g, z))
}

/// 𝒮_mod g(z) without the distance check (coincident nodes must carry g = 0).
pub fn single_layer_unchecked(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> f64 {
    let n = mesh.n();
    let s: f64 = (0..mesh.len())
        .filter(|&j| g[j] != 0.0)
        .map(|j| sl_kernel(z, mesh.node(j), n) * g[j] * mesh.weight(j))
        .sum();
    s / unit_sphere_area(n)
}

/// ∇𝒮_mod g(z) without the distance check.
pub fn grad_single_layer_unchecked(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> Vec<f64> {
    grad_single_layer_raw(mesh, g, z, 0.0)
}

fn single_layer_raw(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> f64 {
    let n = mesh.n();
    let s: f64 = (0..mesh.len()).map(|j| sl_kernel(z, mesh.node(j), n) * g[j] * mesh.weight(j)).sum();
    s / unit_sphere_area(n)
}

/// ∇𝒮_mod g(z) = (1/w_n) Σ (z − y)/|z − y|^{n+1} g(y) w(y).
pub fn grad_single_layer(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_off_boundary(mesh, z)?;
    Ok(grad_single_layer_raw(mesh, g, z, 0.0))
}

fn grad_single_layer_raw(mesh: &BoundaryMesh, g: &[f64], z: &[f64], shift: f64) -> Vec<f64> {
    let n = mesh.n();
    let d = n + 1;
    let mut out = vec![0.0; d];
    for j in 0..mesh.len() {
        let y = mesh.node(j);
        let r2 = dist_sq(z, y);
        let coef = (g[j] - shift) * mesh.weight(j) / r2.powf(0.5 * (n as f64 + 1.0));
        for k in 0..d {
            out[k] += coef * (z[k] - y[k]);
        }
    }
    let w_n = unit_sphere_area(n);
    out.iter_mut().for_each(|v| *v /= w_n);
    out
}

/// ⟨ν(x), ∇𝒮_mod g(z)⟩ for z near the anchor node x.
///
/// The constant g(x) is split off; its contribution is replaced by the
/// boundary trace g(x)·(∓½ + (K*1)(x)) of the discrete operator.
pub fn single_layer_normal_derivative_near(mesh: &BoundaryMesh, g: &[f64], z: &[f64], anchor: usize, k_adj_one: f64) -> f64 {
    let c = g[anchor];
    let grad = grad_single_layer_raw(mesh, g, z, c);
    let jump = match mesh.side_of(z) {
        Side::Interior => -0.5,
        Side::Exterior => 0.5,
    };
    dot(mesh.normal(anchor), &grad) + c * (jump + k_adj_one)
}

/// Truncated Riesz transform component j (0-based) at every node.
pub fn riesz_apply(mesh: &BoundaryMesh, g: &[f64], component: usize, epsilon: f64) -> Result<Vec<f64>> {
    if component > mesh.n() {
        return Err(invalid("component", format!("{} out of 1..={}", component + 1, mesh.n() + 1)));
    }
    let n = mesh.n();
    let eps2 = epsilon * epsilon;
    Ok((0..mesh.len())
        .into_par_iter()
        .map(|i| {
            let x = mesh.node(i);
            (0..mesh.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let y = mesh.node(j);
                    let r2 = dist_sq(x, y);
                    if r2 > eps2 {
                        (x[component] - y[component]) / r2.powf(0.5 * (n as f64 + 1.0)) * g[j] * mesh.weight(j)
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect())
}

/// Ratio between consecutive radii of the maximal-function ball grid.
pub const HL_RADIUS_RATIO: f64 = 1.021_897_148_654_116_7; // 2^{1/32}

/// Uncentered maximal function M_q f at every node over balls centered at
/// nodes with radii `h/2 · 2^{k/32}`.
pub fn hl_maximal_all(mesh: &BoundaryMesh, f: &[f64], q: f64) -> Result<Vec<f64>> {
    if !(q >= 1.0) {
        return Err(invalid("q", "need q >= 1"));
    }
    let r0 = 0.5 * mesh.h();
    let nn = mesh.len();
    let per_center: Vec<Vec<f64>> = (0..nn)
        .into_par_iter()
        .map(|c| {
            let center = mesh.node(c);
            let mut order: Vec<(f64, usize)> = (0..nn).map(|j| (dist(center, mesh.node(j)), j)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let far = order.last().map(|p| p.0).unwrap_or(0.0);
            // Prefix length and mean for each grid radius (open ball |y - c| < r).
            let mut means: Vec<(usize, f64)> = Vec::new();
            let (mut k, mut num, mut den) = (0usize, 0.0, 0.0);
            let mut r = r0;
            loop {
                while k < nn && order[k].0 < r {
                    let j = order[k].1;
                    num += f[j].abs().powf(q) * mesh.weight(j);
                    den += mesh.weight(j);
                    k += 1;
                }
                if k > 0 {
                    means.push((k, (num / den).powf(1.0 / q)));
                }
                if r > far {
                    break;
                }
                r *= HL_RADIUS_RATIO;
            }
            let mut out = vec![0.0; nn];
            // Suffix maxima: a node at sorted position p is in every ball with prefix > p.
            let mut best = 0.0f64;
            for (k, &(len, m)) in means.iter().enumerate().rev() {
                best = best.max(m);
                let next = if k > 0 { means[k - 1].0 } else { 0 };
                for slot in &order[next..len] {
                    out[slot.1] = best;
                }
            }
            out
        })
        .collect();
    let mut out = vec![0.0f64; nn];
    for v in per_center {
        for (o, x) in out.iter_mut().zip(v) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

pub fn hl_maximal(mesh: &BoundaryMesh, f: &[f64], q: f64, x: usize) -> Result<f64> {
    Ok(hl_maximal_all(mesh, f, q)?[x])
}

/// σ-weighted L^2 operator norm by power iteration.
pub fn operator_norm_2(op: &LayerOperator) -> Result<f64> {
    operator_norm_2_seeded(op, rng::DEFAULT_SEED)
}

pub fn operator_norm_2_seeded(op: &LayerOperator, seed: u64) -> Result<f64> {
    let b = op.weighted();
    let mut rng = rng::stream(seed, "operator-norm");
    power_iteration_sigma_max(b.rows(), |v| b.matvec(v), |v| b.matvec_transpose(v), &mut rng, 1e-8, 10_000)
}

/// Leading k singular values of W^{1/2} M W^{-1/2}.
pub fn svd_decay(op: &LayerOperator, k: usize) -> Result<Vec<f64>> {
    let b = op.weighted();
    if k > b.rows().min(b.cols()) {
        return Err(invalid("k", format!("{k} exceeds the matrix dimension")));
    }
    // Zero rows and columns (masked targets) carry no singular values.
    let rows: Vec<usize> = (0..b.rows()).filter(|&i| b.row(i).iter().any(|v| *v != 0.0)).collect();
    let cols: Vec<usize> = (0..b.cols()).filter(|&j| rows.iter().any(|&i| b.get(i, j) != 0.0)).collect();
    let reduced = DenseMatrix::from_fn(rows.len(), cols.len(), |a, c| b.get(rows[a], cols[c]));
    let mut s = singular_values(&reduced);
    s.resize(k.max(s.len()), 0.0);
    s.truncate(k);
    Ok(s)
}

/// Estimated contribution of the boundary beyond the patch to K g at the nodes.
pub fn tail_bound(mesh: &BoundaryMesh, g: &[f64]) -> f64 {
    let edge = mesh.edge_density_bound(g);
    if edge == 0.0 {
        return 0.0;
    }
    (0..mesh.len()).map(|i| mesh.truncation_tail(mesh.node(i), edge)).filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// Same estimate for an off-boundary evaluation point.
pub fn point_tail_bound(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> f64 {
    mesh.truncation_tail(z, mesh.edge_density_bound(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize_graph, discretize_sphere, BumpProfile, GraphDomain};
    use crate::linalg::norm;

    fn interior_points() -> Vec<[f64; 3]> {
        vec![
            [0.0, 0.0, 0.0],
            [0.3, 0.0, 0.0],
            [0.0, -0.4, 0.1],
            [0.2, 0.2, 0.2],
            [-0.5, 0.1, 0.0],
            [0.1, 0.5, -0.2],
            [0.0, 0.0, 0.6],
            [-0.3, -0.3, 0.3],
            [0.45, -0.1, -0.35],
            [0.05, 0.05, -0.55],
        ]
    }

    #[test]
    fn gauss_identity_on_sphere() {
        let s = discretize_sphere(3, 1.0, 3).unwrap();
        let one = vec![1.0; s.len()];
        for z in interior_points() {
            let v = double_layer_interior(&s, &one, &z).unwrap();
            assert!((v - 1.0).abs() <= 1e-3, "{z:?}: {v}");
        }
        for z in [[0.0, 0.0, 3.0], [2.0, 0.0, 0.0], [-1.5, 1.5, 0.0], [0.0, -2.5, 1.0], [1.2, 1.2, 1.2]] {
            let v = double_layer_interior(&s, &one, &z).unwrap();
            assert!(v.abs() <= 1e-3, "{z:?}: {v}");
        }
        let k1 = boundary_k_apply(&s, &one, 0.0);
        assert!(k1.iter().all(|v| (v - 0.5).abs() <= 1e-3));
        let ks1 = adjoint_k_apply(&s, &one, 0.0);
        assert!(ks1.iter().all(|v| (v - 0.5).abs() <= 1e-3));
    }

    #[test]
    fn near_evaluator_rejected_by_plain_quadrature() {
        let s = discretize_sphere(3, 1.0, 3).unwrap();
        let one = vec![1.0; s.len()];
        let z = [0.0, 0.0, 0.99];
        assert!(matches!(double_layer_interior(&s, &one, &z), Err(Error::TooCloseToBoundary { .. })));
        let top = s.nearest_node(&z).0;
        assert!((double_layer_near(&s, &one, &z, top) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_mesh_operators_vanish() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        for kind in [KernelKind::DoubleLayer, KernelKind::AdjointDoubleLayer] {
            for spec in [KernelSpec::full(kind), KernelSpec::window(kind, 0.2, 0.8), KernelSpec::full(kind).masked(0.5, MaskSide::Inside)] {
                let op = truncated_op(&mesh, spec).unwrap();
                assert_eq!(op.matrix.max_abs(), 0.0);
            }
        }
        let g: Vec<f64> = (0..mesh.len()).map(|i| (i as f64).sin()).collect();
        assert!(boundary_k_apply(&mesh, &g, 0.0).iter().all(|v| *v == 0.0));
        assert!(riesz_apply(&mesh, &g, 2, 0.0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_identity_and_additivity() {
        let dom = GraphDomain::bump(2, 1.0, 0.2, 0.6, BumpProfile::Smooth);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let k = assemble_k(&mesh).unwrap();
        let ks = assemble_k_adjoint(&mesh).unwrap();
        let nn = mesh.len();
        for i in 0..nn {
            for j in 0..nn {
                let lhs = mesh.weight(i) * ks.matrix.get(i, j);
                let rhs = k.matrix.get(j, i) * mesh.weight(j);
                assert!((lhs - rhs).abs() <= 1e-15 * (lhs.abs() + rhs.abs()) + 1e-300, "{i} {j}");
            }
        }
        let (t, big_t) = (0.15, 0.7);
        let parts = [
            truncated_op(&mesh, KernelSpec::window(KernelKind::DoubleLayer, 0.0, t)).unwrap(),
            truncated_op(&mesh, KernelSpec::window(KernelKind::DoubleLayer, t, big_t)).unwrap(),
            truncated_op(&mesh, KernelSpec::window(KernelKind::DoubleLayer, big_t, f64::INFINITY)).unwrap(),
        ];
        let sum = parts[0].matrix.add(&parts[1].matrix).add(&parts[2].matrix);
        assert_eq!(sum, k.matrix);
        let mid = KernelSpec::window(KernelKind::DoubleLayer, t, big_t);
        let inside = truncated_op(&mesh, mid.masked(0.4, MaskSide::Inside)).unwrap();
        let outside = truncated_op(&mesh, mid.masked(0.4, MaskSide::Outside)).unwrap();
        assert_eq!(inside.matrix.add(&outside.matrix), parts[1].matrix);
        let g: Vec<f64> = (0..nn).map(|i| mesh.node(i)[0].cos()).collect();
        let dense = k.apply(&g);
        let free = boundary_k_apply(&mesh, &g, 0.0);
        for (a, b) in dense.iter().zip(&free) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_window_is_zero() {
        let s = discretize_sphere(3, 1.0, 2).unwrap();
        let g = vec![1.0; s.len()];
        assert!(boundary_k_apply(&s, &g, 2.0 * s.extent() + 1e-9).iter().all(|v| *v == 0.0));
    }

    /// Poisson integral of a bump over the plane, computed by a fine midpoint rule.
    fn poisson(f: impl Fn(f64, f64) -> f64, z: [f64; 3], half: f64, cells: usize) -> f64 {
        let dx = 2.0 * half / cells as f64;
        let t = z[2];
        let mut s = 0.0;
        for a in 0..cells {
            for b in 0..cells {
                let (x, y) = (-half + (a as f64 + 0.5) * dx, -half + (b as f64 + 0.5) * dx);
                let r2 = (x - z[0]).powi(2) + (y - z[1]).powi(2) + t * t;
                s += f(x, y) * t / r2.powf(1.5);
            }
        }
        s * dx * dx / (2.0 * std::f64::consts::PI)
    }

    #[test]
    fn flat_double_layer_is_half_poisson() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 2.0), 0.05).unwrap();
        let bump = |x: f64, y: f64| {
            let r2 = x * x + y * y;
            if r2 < 1.0 { (1.0 - r2).powi(3) } else { 0.0 }
        };
        let g: Vec<f64> = (0..mesh.len()).map(|i| bump(mesh.node(i)[0], mesh.node(i)[1])).collect();
        for z in [[0.0, 0.0, 0.5], [0.3, -0.2, 0.4], [0.8, 0.8, 0.6]] {
            let v = double_layer_interior(&mesh, &g, &z).unwrap();
            let oracle = 0.5 * poisson(bump, z, 1.0, 800);
            assert!((v - oracle).abs() <= 1e-3 * oracle.abs(), "{z:?}: {v} vs {oracle}");
        }
    }

    #[test]
    fn maximal_dominates_and_matches_finer_grid() {
        let dom = GraphDomain::bump(2, 1.0, 0.3, 0.7, BumpProfile::Cone);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let g: Vec<f64> = (0..mesh.len()).map(|i| if norm(&mesh.node(i)[..2]) < 0.3 { 1.0 } else { 0.0 }).collect();
        let grid = eps_grid(&mesh, EPS_GRID_RATIO);
        let m = maximal_k(&mesh, &g, MaximalSide::K, &grid);
        for &e in &grid {
            for (a, b) in m.iter().zip(boundary_k_apply(&mesh, &g, e)) {
                assert!(*a + 1e-15 >= b.abs());
            }
        }
        let fine = eps_grid(&mesh, EPS_GRID_RATIO.powf(0.25));
        let lo = fine.iter().cloned().fold(f64::INFINITY, f64::min);
        let mf = maximal_k(&mesh, &g, MaximalSide::K, &fine);
        let applied: Vec<Vec<f64>> = fine.iter().map(|&e| boundary_k_apply(&mesh, &g, e)).collect();
        for i in (0..mesh.len()).step_by(37) {
            let x = mesh.node(i);
            let mut dists: Vec<f64> = (0..mesh.len()).filter(|&j| j != i).map(|j| dist(x, mesh.node(j))).collect();
            dists.push(2.0 * mesh.extent());
            let mut brute = 0.0f64;
            for &e in &dists {
                for eps in [e, e * (1.0 - 1e-12)] {
                    if eps >= lo && eps <= 2.0 * mesh.extent() {
                        let mut v = 0.0;
                        for j in 0..mesh.len() {
                            let y = mesh.node(j);
                            if j != i && dist(x, y) > eps {
                                v += dl_kernel(x, y, mesh.normal(j), 2) * g[j] * mesh.weight(j);
                            }
                        }
                        brute = brute.max((v / unit_sphere_area(2)).abs());
                    }
                }
            }
            assert!((mf[i] - brute).abs() <= 1e-12 * brute.max(1e-300) + 1e-15, "{i}: {} vs {brute}", mf[i]);
            for v in &applied {
                assert!(mf[i] + 1e-15 >= v[i].abs());
            }
        }
    }

    #[test]
    fn riesz_matches_double_loop() {
        let s = discretize_sphere(3, 1.0, 1).unwrap();
        assert!(s.len() <= 64);
        let g: Vec<f64> = (0..s.len()).map(|i| s.node(i)[2] + 0.5).collect();
        for c in 0..3 {
            let fast = riesz_apply(&s, &g, c, 0.3).unwrap();
            for i in 0..s.len() {
                let mut slow = 0.0;
                for j in 0..s.len() {
                    let (x, y) = (s.node(i), s.node(j));
                    let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
                    if i != j && r > 0.3 {
                        slow += (x[c] - y[c]) / (r * r * r) * g[j] * s.weight(j);
                    }
                }
                assert!((fast[i] - slow).abs() <= 1e-13 * slow.abs().max(1.0));
            }
        }
        let flat = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        let center = flat.nearest_node(&[0.0, 0.0, 0.0]).0;
        let g: Vec<f64> = (0..flat.len()).map(|i| (-norm(flat.node(i)).powi(2)).exp()).collect();
        for c in 0..2 {
            assert!(riesz_apply(&flat, &g, c, 0.0).unwrap()[center].abs() < 1e-10);
        }
    }

    #[test]
    fn norms_against_svd() {
        let s = discretize_sphere(3, 1.0, 1).unwrap();
        let k = assemble_k(&s).unwrap();
        let sv = svd_decay(&k, 5).unwrap();
        let p = operator_norm_2(&k).unwrap();
        assert!((p - sv[0]).abs() <= 1e-6 * sv[0], "{p} vs {}", sv[0]);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let mut zero = k.clone();
        zero.matrix = DenseMatrix::zeros(s.len(), s.len());
        assert_eq!(operator_norm_2(&zero).unwrap(), 0.0);
        assert!(svd_decay(&zero, 3).unwrap().iter().all(|v| *v == 0.0));
        let mut id = zero.clone();
        id.matrix = DenseMatrix::identity(s.len());
        assert!((operator_norm_2(&id).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_layer_shell_theorem_and_symmetry() {
        let s = discretize_sphere(3, 1.0, 3).unwrap();
        let one = vec![1.0; s.len()];
        let a = single_layer_mod(&s, &one, &[0.0, 0.0, 0.0]).unwrap();
        let b = single_layer_mod(&s, &one, &[0.2, -0.3, 0.1]).unwrap();
        assert!((a - b).abs() < 1e-3, "{a} {b}");
        let zero = vec![0.0; s.len()];
        assert_eq!(single_layer_mod(&s, &zero, &[0.1, 0.0, 0.0]).unwrap(), 0.0);
        assert!(grad_single_layer(&s, &zero, &[0.1, 0.0, 0.0]).unwrap().iter().all(|v| *v == 0.0));

        let flat = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        let g: Vec<f64> = (0..flat.len()).map(|i| (-norm(flat.node(i)).powi(2)).exp()).collect();
        let grad = grad_single_layer(&flat, &g, &[0.0, 0.0, 0.3]).unwrap();
        assert!(grad[0].abs() < 1e-10 && grad[1].abs() < 1e-10);
    }

    #[test]
    fn hl_maximal_against_exhaustive_balls() {
        let c = discretize_sphere(2, 1.0, 5).unwrap();
        assert!(c.len() <= 128);
        let f: Vec<f64> = (0..c.len()).map(|i| if c.node(i)[0] > 0.5 { 1.0 } else { 0.1 * c.node(i)[1].abs() }).collect();
        let grid = hl_maximal_all(&c, &f, 1.5).unwrap();
        let nn = c.len();
        let mut exact = vec![0.0f64; nn];
        for ctr in 0..nn {
            let mut order: Vec<(f64, usize)> = (0..nn).map(|j| (dist(c.node(ctr), c.node(j)), j)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..nn {
                let j = order[k].1;
                num += f[j].abs().powf(1.5) * c.weight(j);
                den += c.weight(j);
                if k + 1 < nn && order[k + 1].0 == order[k].0 {
                    continue;
                }
                let m = (num / den).powf(1.0 / 1.5);
                for &(_, p) in &order[..=k] {
                    exact[p] = exact[p].max(m);
                }
            }
        }
        for i in 0..nn {
            assert!(grid[i] <= exact[i] + 1e-12 && grid[i] >= 0.98 * exact[i], "{i}: {} vs {}", grid[i], exact[i]);
        }
        let constant = hl_maximal_all(&c, &vec![-2.5; nn], 2.0).unwrap();
        assert!(constant.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
