//! Flatness coefficients of a discretized boundary and the scale parameters
//! of the large-scale estimate.

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::BoundaryMesh;
use crate::linalg::{dot, nelder_mead, norm, normalize, orthonormal_complement, symmetric_eigen};

/// A hyperplane through `point` with unit `normal`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
}

impl Plane {
    pub fn distance(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.point).zip(&self.normal).map(|((a, b), v)| (a - b) * v).sum::<f64>().abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaResult {
    pub beta: f64,
    pub plane: Plane,
}

fn ball_nodes(mesh: &BoundaryMesh, x: usize, r: f64) -> Vec<usize> {
    // Closed ball so that the defining sup sees the boundary of the ball.
    let c = mesh.node(x);
    let r2 = r * r * (1.0 + 1e-12);
    (0..mesh.len()).filter(|&i| crate::linalg::dist_sq(mesh.node(i), c) <= r2).collect()
}

fn plane_sup(mesh: &BoundaryMesh, x: &[f64], ids: &[usize], normal: &[f64]) -> f64 {
    ids.iter()
        .map(|&i| mesh.node(i).iter().zip(x).zip(normal).map(|((a, b), v)| (a - b) * v).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Weighted principal-component normal of a node set (direction of least variance).
pub fn pca_normal(mesh: &BoundaryMesh, ids: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = mesh.ambient_dim();
    let total: f64 = ids.iter().map(|&i| mesh.weight(i)).sum();
    let mut mean = vec![0.0; d];
    for &i in ids {
        for (m, c) in mean.iter_mut().zip(mesh.node(i)) {
            *m += mesh.weight(i) * c / total;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for &i in ids {
        let y = mesh.node(i);
        let w = mesh.weight(i) / total;
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += w * (y[a] - mean[a]) * (y[b] - mean[b]);
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov);
    // The plane directions must carry variance, otherwise the fit is ambiguous.
    if vals.len() > 1 && vals[1] <= 1e-14 * vals[d - 1].max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficient(ids.first().copied().unwrap_or(0)));
    }
    Ok((mean, vecs[0].clone()))
}

/// Upper bound for the infimum over planes L through x of
/// `sup_{y in B(x,r)} dist(y, L) / r`.
pub fn beta_inf(mesh: &BoundaryMesh, x: usize, r: f64) -> Result<BetaResult> {
    if r < 4.0 * mesh.h() * (1.0 - 1e-12) {
        return Err(invalid("r", format!("radius {r:.3e} below 4h = {:.3e}", 4.0 * mesh.h())));
    }
    let ids = ball_nodes(mesh, x, r);
    let d = mesh.ambient_dim();
    if ids.len() < d {
        return Err(Error::BallTooSmall { node: x, radius: r, found: ids.len(), needed: d });
    }
    let base = mesh.node(x).to_vec();
    let mut seeds: Vec<Vec<f64>> = vec![mesh.normal(x).to_vec()];
    if let Ok((_, v)) = pca_normal(mesh, &ids) {
        seeds.push(v);
    }
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        seeds.push(e);
    }
    let mut best_normal = seeds[0].clone();
    let mut best = f64::INFINITY;
    for seed in &seeds {
        let v = plane_sup(mesh, &base, &ids, seed);
        if v < best {
            best = v;
            best_normal = seed.clone();
        }
    }
    // Local refinement around the best seed in tangent coordinates.
    let frame = orthonormal_complement(&best_normal);
    let to_normal = |u: &[f64]| -> Vec<f64> {
        let mut v = best_normal.clone();
        for (c, t) in u.iter().zip(&frame) {
            for i in 0..d {
                v[i] += c * t[i];
            }
        }
        normalize(&mut v);
        v
    };
    let (u, val) = nelder_mead(|u| plane_sup(mesh, &base, &ids, &to_normal(u)), &vec![0.0; d - 1], 0.05, 400, 1e-14 * r);
    if val < best {
        best = val;
        best_normal = to_normal(&u);
    }
    Ok(BetaResult { beta: (best / r).min(1.0), plane: Plane { point: base, normal: best_normal } })
}

fn mean_normal(mesh: &BoundaryMesh, ids: &[usize]) -> (Vec<f64>, f64) {
    let d = mesh.ambient_dim();
    let mut m = vec![0.0; d];
    let mut total = 0.0;
    for &i in ids {
        let w = mesh.weight(i);
        total += w;
        for (a, v) in m.iter_mut().zip(mesh.normal(i)) {
            *a += w * v;
        }
    }
    for a in &mut m {
        *a /= total;
    }
    (m, total)
}

/// Weighted mean of |nu - m_B nu| over nodes in B(x, r).
pub fn bmo_oscillation(mesh: &BoundaryMesh, x: usize, r: f64) -> Result<f64> {
    let ids = mesh.nodes_in_ball(mesh.node(x), r);
    oscillation(mesh, &ids, 1).ok_or(Error::EmptyBall { node: x, radius: r })
}

/// L^q mean oscillation of the normal over a node set; `None` when empty.
fn oscillation(mesh: &BoundaryMesh, ids: &[usize], q: i32) -> Option<f64> {
    if ids.is_empty() {
        return None;
    }
    let (m, total) = mean_normal(mesh, ids);
    let s: f64 = ids
        .iter()
        .map(|&i| {
            let dev: f64 = mesh.normal(i).iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            mesh.weight(i) * dev.powi(q)
        })
        .sum();
    Some((s / total).powf(1.0 / q as f64))
}

/// Radii of the sub-ball family used by [`bmo_star_norm`]: `2h * 2^{k/4}`.
///
/// The grid is absolute (independent of R) so families for nested balls are nested.
pub fn bmo_star_radii(mesh: &BoundaryMesh, r_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = 2.0 * mesh.h();
    while r <= r_max * (1.0 + 1e-12) {
        out.push(r);
        r *= 2f64.powf(0.25);
    }
    out
}

/// sup of the L^2 mean oscillation of nu over sub-balls B(y, t) ⊂ B(x, R) with
/// node centers y and t on the grid of [`bmo_star_radii`].
pub fn bmo_star_norm(mesh: &BoundaryMesh, x: usize, big_r: f64) -> Result<f64> {
    if big_r < 8.0 * mesh.h() * (1.0 - 1e-12) {
        return Err(invalid("R", format!("radius {big_r:.3e} below 8h")));
    }
    let radii = bmo_star_radii(mesh, big_r);
    Ok(bmo_star_over(mesh, mesh.node(x), big_r, &radii))
}

/// Same supremum over an explicit radius list (used as an enumeration oracle).
pub fn bmo_star_over(mesh: &BoundaryMesh, center: &[f64], big_r: f64, radii: &[f64]) -> f64 {
    let centers = mesh.nodes_in_ball(center, big_r);
    centers
        .par_iter()
        .map(|&y| {
            let off = crate::linalg::dist(mesh.node(y), center);
            radii
                .iter()
                .filter(|&&t| off + t <= big_r * (1.0 + 1e-12))
                .filter_map(|&t| oscillation(mesh, &mesh.nodes_in_ball(mesh.node(y), t), 2))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessRecord {
    pub x: usize,
    pub r: f64,
    pub beta: Option<f64>,
    pub bmo: Option<f64>,
    pub beta_pass: bool,
    pub bmo_pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub x: usize,
    pub r: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSsrReport {
    pub records: Vec<FlatnessRecord>,
    pub bmo_pass: bool,
    pub beta_pass: bool,
    pub worst_bmo: Option<Witness>,
    pub worst_beta: Option<Witness>,
}

impl DeltaSsrReport {
    pub fn pass(&self) -> bool {
        self.bmo_pass && self.beta_pass
    }
}

/// Scans the two clauses of the δ-(s,S;R) definition on a subsampled grid.
///
/// Centers are every 4th node; radii are `4h * 2^k` up to the mesh extent.
/// The BMO clause is checked at every radius for centers outside B_R(0) and
/// at radii outside (s, S) for centers inside. The β clause is checked at all
/// radii ≥ S with planes through the center.
pub fn check_delta_ssr(mesh: &BoundaryMesh, delta: f64, s: f64, big_s: f64, big_r: f64) -> Result<DeltaSsrReport> {
    if !(s > 0.0 && s < big_s) {
        return Err(invalid("s", "need 0 < s < S"));
    }
    if !(big_r > 0.0) {
        return Err(invalid("R", "must be positive"));
    }
    let mut radii = Vec::new();
    let mut r = 4.0 * mesh.h();
    while r <= mesh.extent() * (1.0 + 1e-12) {
        radii.push(r);
        r *= 2.0;
    }
    if radii.is_empty() {
        return Err(Error::EmptyGrid(format!("no radius in [4h, extent] = [{}, {}]", 4.0 * mesh.h(), mesh.extent())));
    }
    let centers: Vec<usize> = (0..mesh.len()).step_by(4).collect();
    let records: Vec<FlatnessRecord> = centers
        .par_iter()
        .flat_map_iter(|&x| {
            let outside = norm(mesh.node(x)) >= big_r;
            radii
                .iter()
                .filter_map(|&r| {
                    let check_bmo = outside || r <= s || r >= big_s;
                    let check_beta = r >= big_s;
                    if !check_bmo && !check_beta {
                        return None;
                    }
                    let bmo = if check_bmo { bmo_oscillation(mesh, x, r).ok() } else { None };
                    let beta = if check_beta { beta_inf(mesh, x, r).ok().map(|b| b.beta) } else { None };
                    Some(FlatnessRecord {
                        x,
                        r,
                        bmo_pass: bmo.is_none_or(|v| v <= delta),
                        beta_pass: beta.is_none_or(|v| v <= delta),
                        beta,
                        bmo,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyGrid("no (x, r) pair falls in either clause".into()));
    }
    let worst = |get: fn(&FlatnessRecord) -> Option<f64>| {
        records
            .iter()
            .filter_map(|rec| get(rec).map(|v| Witness { x: rec.x, r: rec.r, value: v }))
            .fold(None, |acc: Option<Witness>, w| match acc {
                Some(a) if a.value >= w.value => Some(a),
                _ => Some(w),
            })
    };
    Ok(DeltaSsrReport {
        bmo_pass: records.iter().all(|r| r.bmo_pass),
        beta_pass: records.iter().all(|r| r.beta_pass),
        worst_bmo: worst(|r| r.bmo),
        worst_beta: worst(|r| r.beta),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// |<m_B nu, N_B>|
    pub inner: f64,
    /// |m_B nu - N_B| with N_B oriented so the inner product is nonnegative.
    pub difference: f64,
    /// |m_B nu|
    pub mean_norm: f64,
    pub beta: f64,
    pub bmo: f64,
}

pub fn normal_plane_alignment(mesh: &BoundaryMesh, x: usize, r: f64) -> Result<Alignment> {
    let b = beta_inf(mesh, x, r)?;
    let bmo = bmo_oscillation(mesh, x, r)?;
    let (m, _) = mean_normal(mesh, &mesh.nodes_in_ball(mesh.node(x), r));
    let mut nb = b.plane.normal.clone();
    if !(norm(&nb) - 1.0).abs().lt(&1e-9) {
        return Err(Error::DegenerateGeometry(format!("plane fit at node {x} lost unit length")));
    }
    if dot(&m, &nb) < 0.0 {
        nb.iter_mut().for_each(|v| *v = -*v);
    }
    let difference = m.iter().zip(&nb).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
    Ok(Alignment { inner: dot(&m, &nb), difference, mean_norm: norm(&m), beta: b.beta, bmo })
}

/// `sup_{y in B(x, 2r)} |<x - y, m_{B(x,r)} nu>| / r` over mesh nodes.
pub fn dot_product_estimate(mesh: &BoundaryMesh, x: usize, r: f64) -> Result<f64> {
    let inner = mesh.nodes_in_ball(mesh.node(x), r);
    if inner.is_empty() {
        return Err(Error::EmptyBall { node: x, radius: r });
    }
    let (m, _) = mean_normal(mesh, &inner);
    let px = mesh.node(x);
    Ok(mesh
        .nodes_in_ball(px, 2.0 * r)
        .iter()
        .map(|&i| mesh.node(i).iter().zip(px).zip(&m).map(|((y, a), v)| (a - y) * v).sum::<f64>().abs() / r)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProofParameters {
    pub n: usize,
    pub p: f64,
    pub delta: f64,
    pub s_scale: f64,
    pub gamma: Ratio<i64>,
    pub theta: Ratio<i64>,
    pub a: f64,
    pub n_big: f64,
    pub alpha_stop: f64,
    pub t_scale: f64,
    /// Magnitudes of the six smallness conditions, in order:
    /// A, A/N, δ^{γ/(1+γ)} N^{n+1} A, α, α A², A S / T.
    pub conditions: [f64; 6],
}

impl ProofParameters {
    pub fn gamma_f64(&self) -> f64 {
        ratio_f64(self.gamma)
    }

    pub fn theta_f64(&self) -> f64 {
        ratio_f64(self.theta)
    }

    /// Exponent of δ in δ^{γ/(1+γ)}.
    pub fn flatness_exponent(&self) -> Ratio<i64> {
        self.gamma / (Ratio::from_integer(1) + self.gamma)
    }
}

fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// T = S A².
pub fn large_scale(s: f64, a: f64) -> f64 {
    s * a * a
}

/// γ = ½ min{1, p − 1, 1/(2n − 1)} as an exact rational (p is read as the
/// nearest small-denominator rational).
pub fn gamma_exact(n: usize, p: f64) -> Result<Ratio<i64>> {
    let p = Ratio::<i64>::approximate_float(p).ok_or_else(|| invalid("p", "not representable"))?;
    let one = Ratio::from_integer(1);
    let m = one.min(p - one).min(Ratio::new(1, 2 * n as i64 - 1));
    Ok(m / 2)
}

pub fn proof_parameters(n: usize, p: f64, delta: f64, s_scale: f64) -> Result<ProofParameters> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if !(p > 1.0 && p.is_finite()) {
        return Err(invalid("p", "need 1 < p < infinity"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "need 0 < delta < 1"));
    }
    if !(s_scale > 0.0) {
        return Err(invalid("S", "must be positive"));
    }
    let gamma = gamma_exact(n, p)?;
    let one = Ratio::from_integer(1);
    let theta = gamma / (Ratio::from_integer(2 * (n as i64 + 3)) * (one + gamma));
    let g = ratio_f64(gamma);
    let a = delta.powf(-ratio_f64(theta));
    let n_big = a.powf(1.0 + 1.0 / (n as f64 + 1.0));
    let alpha_stop = delta.powf(g / (3.0 * (1.0 + g)));
    let t_scale = large_scale(s_scale, a);
    let conditions = [
        a,
        a / n_big,
        delta.powf(g / (1.0 + g)) * n_big.powi(n as i32 + 1) * a,
        alpha_stop,
        alpha_stop * a * a,
        a * s_scale / t_scale,
    ];
    Ok(ProofParameters { n, p, delta, s_scale, gamma, theta, a, n_big, alpha_stop, t_scale, conditions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize_graph, discretize_sphere, BumpProfile, GraphDomain};

    #[test]
    fn flat_graph_is_flat() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        let x = mesh.len() / 2;
        let b = beta_inf(&mesh, x, 0.5).unwrap();
        assert!(b.beta <= 1e-12);
        assert!(bmo_oscillation(&mesh, x, 0.5).unwrap() <= 1e-12);
        assert_eq!(dot_product_estimate(&mesh, x, 0.3).unwrap(), 0.0);
        let al = normal_plane_alignment(&mesh, x, 0.5).unwrap();
        assert!((al.inner - 1.0).abs() < 1e-12 && al.difference < 1e-12);
        assert_eq!(bmo_star_norm(&mesh, x, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn beta_matches_grid_search_at_bump_apex() {
        let dom = GraphDomain::bump(2, 2.0, 0.2, 1.0, BumpProfile::Cone);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let x = mesh.nearest_node(&[0.0, 0.0, 0.0]).0;
        let b = beta_inf(&mesh, x, 1.0).unwrap();
        assert!(b.beta > 0.0 && b.beta <= 0.2, "{}", b.beta);
        let ids = super::ball_nodes(&mesh, x, 1.0);
        let mut oracle = f64::INFINITY;
        let steps = 200;
        for i in 0..=steps {
            let polar = 0.5 * std::f64::consts::PI * i as f64 / steps as f64;
            for j in 0..4 * steps {
                let az = 2.0 * std::f64::consts::PI * j as f64 / (4 * steps) as f64;
                let v = [polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()];
                oracle = oracle.min(super::plane_sup(&mesh, mesh.node(x), &ids, &v));
            }
        }
        assert!((b.beta - oracle).abs() <= 0.05 * oracle, "{} vs {}", b.beta, oracle);
    }

    #[test]
    fn full_sphere_oscillation_is_one() {
        let s = discretize_sphere(3, 1.0, 3).unwrap();
        assert!((bmo_oscillation(&s, 0, 2.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circle_dot_product_estimate_matches_brute_force() {
        let c = discretize_sphere(2, 1.0, 6).unwrap();
        let v = dot_product_estimate(&c, 3, 0.5).unwrap();
        assert!(v <= 2.0);
        let ids = c.nodes_in_ball(c.node(3), 0.5);
        let (m, _) = mean_normal(&c, &ids);
        let mut brute = 0.0f64;
        for i in 0..c.len() {
            let y = c.node(i);
            if crate::linalg::dist(y, c.node(3)) < 1.0 {
                brute = brute.max(((c.node(3)[0] - y[0]) * m[0] + (c.node(3)[1] - y[1]) * m[1]).abs() / 0.5);
            }
        }
        assert_eq!(v, brute);
    }

    #[test]
    fn delta_ssr_flat_passes_and_zero_delta_fails() {
        let flat = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        assert!(check_delta_ssr(&flat, 0.01, 0.1, 0.5, 0.5).unwrap().pass());
        let bump = discretize_graph(&GraphDomain::bump(2, 1.0, 0.1, 0.3, BumpProfile::Cone), 0.1).unwrap();
        let rep = check_delta_ssr(&bump, 0.0, 0.1, 0.5, 0.5).unwrap();
        assert!(!rep.pass());
        assert!(rep.worst_bmo.unwrap().value > 0.0 || rep.worst_beta.unwrap().value > 0.0);
        assert!(check_delta_ssr(&bump, 0.1, 0.5, 0.1, 0.5).is_err());
    }

    #[test]
    fn parameters_exact_values() {
        let p = proof_parameters(2, 2.0, 1e-3, 1.0).unwrap();
        assert_eq!(p.gamma, Ratio::new(1, 6));
        assert_eq!(p.theta, Ratio::new(1, 70));
        assert!((p.a - 10f64.powf(3.0 / 70.0)).abs() < 1e-12);
        assert!((p.a - 1.1038).abs() < 1e-4);
        assert_eq!(large_scale(1.0, 2.0), 4.0);
        assert!(proof_parameters(2, 2.0, 1.0, 1.0).is_err());
    }
}
