//! Second-kind boundary equations for the Dirichlet and Neumann problems,
//! solution evaluation, nontangential probes and invertibility diagnostics.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::flatness::ProofParameters;
use crate::geometry::{cone_points, BoundaryMesh, Side};
use crate::linalg::{dot, inverse_iteration_sigma_min, norm, solve_refined, DenseMatrix, Lu};
use crate::potentials::{
    adjoint_k_apply, assemble_k, assemble_k_adjoint, double_layer_near, grad_double_layer, grad_single_layer,
    hl_maximal_all, large_scale_maximal, single_layer_mod, single_layer_normal_derivative_near, LayerOperator,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Dirichlet,
    Neumann,
}

impl Problem {
    pub fn as_str(self) -> &'static str {
        match self {
            Problem::Dirichlet => "dirichlet",
            Problem::Neumann => "neumann",
        }
    }
}

/// Density of a solved boundary equation together with its evaluators.
#[derive(Debug, Clone)]
pub struct SolveResult<'m> {
    pub mesh: &'m BoundaryMesh,
    pub problem: Problem,
    pub density: Vec<f64>,
    /// Right-hand side actually solved (projected for bounded Neumann).
    pub data: Vec<f64>,
    pub residual: f64,
    pub sigma_min: f64,
    pub mean_projection_applied: bool,
    /// K for Dirichlet, K* for Neumann.
    pub operator: LayerOperator,
    k_adj_one: Vec<f64>,
}

const NEAR_FACTOR: f64 = 2.0;

impl<'m> SolveResult<'m> {
    /// u(z) = 𝒟g(z) or 𝒮_mod g(z). Near the boundary the double layer switches
    /// to the subtracted evaluator anchored at the nearest node.
    pub fn u(&self, z: &[f64]) -> f64 {
        let (anchor, d) = self.mesh.nearest_node(z);
        match self.problem {
            Problem::Dirichlet => {
                if d < NEAR_FACTOR * self.mesh.h() {
                    double_layer_near(self.mesh, &self.density, z, anchor)
                } else {
                    crate::potentials::double_layer_interior(self.mesh, &self.density, z)
                        .unwrap_or_else(|_| double_layer_near(self.mesh, &self.density, z, anchor))
                }
            }
            Problem::Neumann => single_layer_plain(self.mesh, &self.density, z),
        }
    }

    pub fn grad_u(&self, z: &[f64]) -> Vec<f64> {
        let (anchor, d) = self.mesh.nearest_node(z);
        match self.problem {
            Problem::Dirichlet => {
                let anchor = (d < NEAR_FACTOR * self.mesh.h()).then_some(anchor);
                grad_double_layer(self.mesh, &self.density, z, anchor)
            }
            Problem::Neumann => {
                grad_single_layer(self.mesh, &self.density, z).unwrap_or_else(|_| grad_plain(self.mesh, &self.density, z))
            }
        }
    }

    /// ⟨ν(x), ∇u(z)⟩ for z near the node x.
    pub fn normal_derivative_near(&self, z: &[f64], anchor: usize) -> f64 {
        match self.problem {
            Problem::Dirichlet => dot(self.mesh.normal(anchor), &grad_double_layer(self.mesh, &self.density, z, Some(anchor))),
            Problem::Neumann => {
                single_layer_normal_derivative_near(self.mesh, &self.density, z, anchor, self.k_adj_one[anchor])
            }
        }
    }

    /// Discrete boundary trace: (½I + K)g for Dirichlet, (−½I + K*)g for Neumann.
    pub fn boundary_trace(&self) -> Vec<f64> {
        let shift = match self.problem {
            Problem::Dirichlet => 0.5,
            Problem::Neumann => -0.5,
        };
        self.operator.apply(&self.density).iter().zip(&self.density).map(|(k, g)| k + shift * g).collect()
    }

    /// Second-order finite-difference Laplacian of u at z with step `step`.
    pub fn fd_laplacian(&self, z: &[f64], step: f64) -> f64 {
        let centre = self.u(z);
        let mut p = z.to_vec();
        let mut acc = 0.0;
        for k in 0..z.len() {
            p[k] = z[k] + step;
            let plus = self.u(&p);
            p[k] = z[k] - step;
            let minus = self.u(&p);
            p[k] = z[k];
            acc += plus - 2.0 * centre + minus;
        }
        acc / (step * step)
    }
}

fn single_layer_plain(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> f64 {
    single_layer_mod(mesh, g, z).unwrap_or_else(|_| {
        // Within h/2 of a node: drop coincident nodes, keep the rest of the sum.
        let filtered: Vec<f64> = (0..mesh.len())
            .map(|j| if crate::linalg::dist(z, mesh.node(j)) < 1e-14 { 0.0 } else { g[j] })
            .collect();
        crate::potentials::single_layer_unchecked(mesh, &filtered, z)
    })
}

fn grad_plain(mesh: &BoundaryMesh, g: &[f64], z: &[f64]) -> Vec<f64> {
    crate::potentials::grad_single_layer_unchecked(mesh, g, z)
}

fn weighted_norm(mesh: &BoundaryMesh, v: &[f64]) -> f64 {
    lp_boundary_norm(mesh, v, 2.0).unwrap_or(0.0)
}

fn relative_residual(a: &DenseMatrix, g: &[f64], f: &[f64]) -> f64 {
    let ag = a.matvec(g);
    let r: Vec<f64> = ag.iter().zip(f).map(|(x, y)| x - y).collect();
    let fnorm = norm(f);
    if fnorm == 0.0 {
        norm(&r)
    } else {
        norm(&r) / fnorm
    }
}

/// Smallest singular value of W^{1/2} A W^{-1/2} from an LU of A.
fn weighted_sigma_min(mesh: &BoundaryMesh, lu: &Lu, seed: u64, stream: &str) -> Result<f64> {
    if lu.is_singular() {
        return Ok(0.0);
    }
    let s: Vec<f64> = mesh.weights().iter().map(|w| w.sqrt()).collect();
    let mut rng = rng::stream(seed, stream);
    // B^{-1} v = W^{1/2} A^{-1} W^{-1/2} v and B^{-T} v = W^{-1/2} A^{-T} W^{1/2} v.
    inverse_iteration_sigma_min(
        mesh.len(),
        |v| {
            let y: Vec<f64> = v.iter().zip(&s).map(|(x, w)| x / w).collect();
            lu.solve(&y).iter().zip(&s).map(|(x, w)| x * w).collect()
        },
        |v| {
            let y: Vec<f64> = v.iter().zip(&s).map(|(x, w)| x * w).collect();
            lu.solve_transpose(&y).iter().zip(&s).map(|(x, w)| x / w).collect()
        },
        &mut rng,
        1e-8,
        10_000,
    )
}

const SINGULAR_LIMIT: f64 = 1e-8;

/// g = (½I + K)^{-1} f, u = 𝒟g.
pub fn solve_dirichlet<'m>(mesh: &'m BoundaryMesh, f: &[f64]) -> Result<SolveResult<'m>> {
    solve_dirichlet_seeded(mesh, f, rng::DEFAULT_SEED)
}

/// As [`solve_dirichlet`], with the σ_min start vector drawn from `seed`.
pub fn solve_dirichlet_seeded<'m>(mesh: &'m BoundaryMesh, f: &[f64], seed: u64) -> Result<SolveResult<'m>> {
    check_len(mesh, f)?;
    let k = assemble_k(mesh)?;
    let a = k.matrix.shifted(0.5);
    let lu = Lu::factor(&a)?;
    let sigma_min = weighted_sigma_min(mesh, &lu, seed, "sigma-min-dirichlet")?;
    if sigma_min <= SINGULAR_LIMIT {
        return Err(Error::NearSingular { sigma_min });
    }
    let g = solve_refined(&a, &lu, f, 2);
    let residual = relative_residual(&a, &g, f);
    Ok(SolveResult {
        mesh,
        problem: Problem::Dirichlet,
        density: g,
        data: f.to_vec(),
        residual,
        sigma_min,
        mean_projection_applied: false,
        operator: k,
        k_adj_one: Vec::new(),
    })
}

/// g = (−½I + K*)^{-1} f, u = 𝒮_mod g.
///
/// On closed surfaces f is projected to σ-mean zero and the singular system is
/// deflated with the rank-one term 1·wᵀ, which also pins σ-mean(g) = 0.
pub fn solve_neumann<'m>(mesh: &'m BoundaryMesh, f: &[f64]) -> Result<SolveResult<'m>> {
    solve_neumann_seeded(mesh, f, rng::DEFAULT_SEED)
}

pub fn solve_neumann_seeded<'m>(mesh: &'m BoundaryMesh, f: &[f64], seed: u64) -> Result<SolveResult<'m>> {
    check_len(mesh, f)?;
    let ks = assemble_k_adjoint(mesh)?;
    let a = ks.matrix.shifted(-0.5);
    let ones = vec![1.0; mesh.len()];
    let k_adj_one = adjoint_k_apply(mesh, &ones, 0.0);
    let (data, system, projected) = if mesh.is_bounded() {
        let total = mesh.total_weight();
        let mean = f.iter().zip(mesh.weights()).map(|(v, w)| v * w).sum::<f64>() / total;
        let fnorm = weighted_norm(mesh, f);
        let mean_norm = mean.abs() * total.sqrt();
        if mean_norm > 0.1 * fnorm {
            return Err(Error::IncompatibleNeumann { mean: mean_norm, norm: fnorm });
        }
        let projected: Vec<f64> = f.iter().map(|v| v - mean).collect();
        let nn = mesh.len();
        let w = mesh.weights();
        let deflated = DenseMatrix::from_fn(nn, nn, |i, j| a.get(i, j) + w[j]);
        (projected, deflated, true)
    } else {
        (f.to_vec(), a.clone(), false)
    };
    let lu = Lu::factor(&system)?;
    let sigma_min = weighted_sigma_min(mesh, &lu, seed, "sigma-min-neumann")?;
    if sigma_min <= SINGULAR_LIMIT {
        return Err(Error::NearSingular { sigma_min });
    }
    let g = solve_refined(&system, &lu, &data, 2);
    let residual = relative_residual(&a, &g, &data);
    Ok(SolveResult {
        mesh,
        problem: Problem::Neumann,
        density: g,
        data,
        residual,
        sigma_min,
        mean_projection_applied: projected,
        operator: ks,
        k_adj_one,
    })
}

fn check_len(mesh: &BoundaryMesh, f: &[f64]) -> Result<()> {
    if f.len() != mesh.len() {
        return Err(Error::DimensionMismatch { expected: mesh.len(), found: f.len() });
    }
    Ok(())
}

/// Values of u along a normal ray and their extrapolated boundary limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub node: usize,
    pub side: Side,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// `2 u(t_last) − u(t_prev)`: first-order Richardson extrapolation to t = 0.
    pub limit: f64,
    /// |u(t) − reference| when a reference value was supplied.
    pub errors: Option<Vec<f64>>,
    /// Successive differences (or errors) fail to decrease over the last three radii.
    pub oscillatory: bool,
    pub dropped: usize,
}

pub const PROBE_R0: f64 = 0.4;
pub const PROBE_COUNT: usize = 4;

/// `r0 · 2^{-k}` for k < count.
pub fn probe_radii(r0: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| r0 * 0.5f64.powi(k as i32)).collect()
}

fn finish_probe(
    node: usize,
    side: Side,
    radii: Vec<f64>,
    values: Vec<f64>,
    reference: Option<f64>,
    dropped: usize,
) -> Result<ProbeRecord> {
    if values.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("fewer than two admissible probe points at node {node}")));
    }
    let m = values.len();
    let limit = 2.0 * values[m - 1] - values[m - 2];
    let errors = reference.map(|r| values.iter().map(|v| (v - r).abs()).collect::<Vec<_>>());
    let seq: Vec<f64> = match &errors {
        Some(e) => e.clone(),
        None => values.windows(2).map(|w| (w[1] - w[0]).abs()).collect(),
    };
    let tail = &seq[seq.len().saturating_sub(3)..];
    let oscillatory = tail.windows(2).any(|w| w[1] > w[0]);
    Ok(ProbeRecord { node, side, radii, values, limit, errors, oscillatory, dropped })
}

/// Nontangential limit of u at node x along the inward normal.
pub fn nontangential_limit_probe(
    result: &SolveResult<'_>,
    x: usize,
    a: f64,
    radii: &[f64],
    reference: Option<f64>,
) -> Result<ProbeRecord> {
    let cone = cone_points(result.mesh, Side::Interior, x, a, radii)?;
    let values: Vec<f64> = match result.problem {
        Problem::Dirichlet => cone.points.iter().map(|z| double_layer_near(result.mesh, &result.density, z, x)).collect(),
        Problem::Neumann => cone.points.iter().map(|z| result.u(z)).collect(),
    };
    finish_probe(x, Side::Interior, cone.radii, values, reference, cone.dropped)
}

/// Nontangential limit of ⟨ν(x), ∇u⟩ from the given side.
pub fn nontangential_derivative_probe(
    result: &SolveResult<'_>,
    x: usize,
    a: f64,
    side: Side,
    radii: &[f64],
    reference: Option<f64>,
) -> Result<ProbeRecord> {
    let cone = cone_points(result.mesh, side, x, a, radii)?;
    let values: Vec<f64> = cone.points.iter().map(|z| result.normal_derivative_near(z, x)).collect();
    finish_probe(x, side, cone.radii, values, reference, cone.dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    U,
    GradU,
}

/// N^δ_a u (or |∇u|) at every node: sup over normal-ray cone points with
/// |y − x| < 2δ on the absolute dyadic grid t = 2^k ≥ h/8.
pub fn nt_maximal_sample(result: &SolveResult<'_>, delta: f64, a: f64, which: Field) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(invalid("delta", "must be positive"));
    }
    let mesh = result.mesh;
    let floor = mesh.h() / 8.0;
    let mut radii = Vec::new();
    let mut t = 2f64.powi((2.0 * delta).log2().ceil() as i32);
    while t >= floor {
        if t < 2.0 * delta {
            radii.push(t);
        }
        t *= 0.5;
    }
    (0..mesh.len())
        .into_par_iter()
        .map(|x| {
            let cone = cone_points(mesh, Side::Interior, x, a, &radii)?;
            Ok(cone
                .points
                .iter()
                .map(|z| match which {
                    Field::U => match result.problem {
                        Problem::Dirichlet => double_layer_near(mesh, &result.density, z, x).abs(),
                        Problem::Neumann => result.u(z).abs(),
                    },
                    Field::GradU => norm(&result.grad_u(z)),
                })
                .fold(0.0, f64::max))
        })
        .collect()
}

/// (Σ |v|^p w)^{1/p}.
pub fn lp_boundary_norm(mesh: &BoundaryMesh, values: &[f64], p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(invalid("p", "need p >= 1"));
    }
    check_len(mesh, values)?;
    Ok(values.iter().zip(mesh.weights()).map(|(v, w)| v.abs().powf(p) * w).sum::<f64>().powf(1.0 / p))
}

/// Smallest singular value of sign·I + K* in the σ-weighted norm.
pub fn sigma_min_diagnostic(mesh: &BoundaryMesh, sign: f64) -> Result<f64> {
    sigma_min_diagnostic_seeded(mesh, sign, rng::DEFAULT_SEED)
}

pub fn sigma_min_diagnostic_seeded(mesh: &BoundaryMesh, sign: f64, seed: u64) -> Result<f64> {
    let ks = assemble_k_adjoint(mesh)?;
    if ks.matrix.max_abs() == 0.0 {
        // sign·I exactly; skip the iteration and its rounding.
        return Ok(sign.abs());
    }
    let lu = Lu::factor(&ks.matrix.shifted(sign))?;
    weighted_sigma_min(mesh, &lu, seed, "sigma-min-diagnostic")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodLambdaRow {
    pub lambda: f64,
    /// σ{K_{l,*} f > 101 λ, M_{1+γ} f ≤ A λ}
    pub numerator: f64,
    /// σ{K_{l,*} f > λ}
    pub denominator: f64,
    pub ratio: f64,
    /// Numerator node set ⊆ denominator node set.
    pub nested: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodLambdaTable {
    pub rows: Vec<GoodLambdaRow>,
    pub max_ratio: f64,
    pub large_scale: f64,
}

/// λ grid spanning [max K_{l,*} f / 10^4, max K_{l,*} f], 25 log-spaced points.
pub fn default_lambda_grid(kstar: &[f64]) -> Vec<f64> {
    let top = kstar.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Vec::new();
    }
    (0..25).map(|k| top * 10f64.powf(-4.0 + 4.0 * k as f64 / 24.0)).collect()
}

/// Empirical good-lambda ratios for K_{l(T),*} and M_{1+γ} with T = S A².
pub fn good_lambda_probe(
    mesh: &BoundaryMesh,
    f: &[f64],
    lambda_grid: Option<&[f64]>,
    params: &ProofParameters,
) -> Result<GoodLambdaTable> {
    check_len(mesh, f)?;
    let kstar = large_scale_maximal(mesh, f, params.t_scale);
    let maximal = hl_maximal_all(mesh, f, 1.0 + params.gamma_f64())?;
    let grid: Vec<f64> = match lambda_grid {
        Some(g) => g.to_vec(),
        None => default_lambda_grid(&kstar),
    };
    let rows: Vec<GoodLambdaRow> = grid
        .iter()
        .map(|&lambda| {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut nested = true;
            for i in 0..mesh.len() {
                let in_den = kstar[i] > lambda;
                let in_num = kstar[i] > 101.0 * lambda && maximal[i] <= params.a * lambda;
                if in_den {
                    den += mesh.weight(i);
                }
                if in_num {
                    num += mesh.weight(i);
                    nested &= in_den;
                }
            }
            let ratio = if den == 0.0 { 0.0 } else { num / den };
            GoodLambdaRow { lambda, numerator: num, denominator: den, ratio, nested }
        })
        .collect();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(GoodLambdaTable { rows, max_ratio, large_scale: params.t_scale })
}
