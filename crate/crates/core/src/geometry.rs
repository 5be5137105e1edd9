//! Test domains and their boundary discretizations.
//!
//! Two families are meshed: graph domains `{x_{n+1} > phi(x')}` over a square
//! patch of the base plane, and spheres (circles for n = 1). A mesh keeps the
//! analytic surface it came from, which gives exact inside tests and distances
//! for cone probes.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::linalg::{dist, dot, norm, normalize};

/// Lipschitz constant of `r -> (1 - r^2)^3` on [0, 1], attained at r = 1/sqrt(5).
const SMOOTH_BUMP_SLOPE: f64 = 96.0 / (25.0 * 2.236_067_977_499_79);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BumpProfile {
    /// `kappa * max(0, 1 - r/R) * r`; Lipschitz constant exactly kappa.
    Cone,
    /// `a * (1 - (r/R)^2)^3` for r < R; C^2 with compact support.
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    pub profile: BumpProfile,
}

impl BumpSpec {
    fn eval(&self, x: &[f64]) -> f64 {
        let r = dist(x, &self.center);
        if r >= self.radius {
            return 0.0;
        }
        let s = r / self.radius;
        match self.profile {
            BumpProfile::Cone => 4.0 * self.amplitude * (1.0 - s) * s,
            BumpProfile::Smooth => self.amplitude * (1.0 - s * s).powi(3),
        }
    }

    /// Exact Lipschitz constant of the profile.
    pub fn lipschitz(&self) -> f64 {
        match self.profile {
            BumpProfile::Cone => 4.0 * self.amplitude / self.radius,
            BumpProfile::Smooth => SMOOTH_BUMP_SLOPE * self.amplitude / self.radius,
        }
    }
}

type SurfaceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A graph domain `Omega = {x_{n+1} > phi(x')}` with outward normal pointing down.
#[derive(Clone)]
pub struct GraphDomain {
    n: usize,
    phi: SurfaceFn,
    kappa: f64,
    extent: f64,
    base_height: f64,
    bump: Option<BumpSpec>,
}

impl fmt::Debug for GraphDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GraphDomain")
            .field("n", &self.n)
            .field("kappa", &self.kappa)
            .field("extent", &self.extent)
            .field("base_height", &self.base_height)
            .field("bump", &self.bump)
            .finish()
    }
}

impl GraphDomain {
    pub fn flat(n: usize, extent: f64) -> Self {
        Self { n, phi: Arc::new(|_| 0.0), kappa: 0.0, extent, base_height: 0.0, bump: None }
    }

    /// Radial bump with Lipschitz constant `kappa` supported in `B(center, radius)`.
    pub fn bump(n: usize, extent: f64, kappa: f64, radius: f64, profile: BumpProfile) -> Self {
        let amplitude = match profile {
            BumpProfile::Cone => kappa * radius / 4.0,
            BumpProfile::Smooth => kappa * radius / SMOOTH_BUMP_SLOPE,
        };
        Self::with_bump(n, extent, BumpSpec { center: vec![0.0; n], radius, amplitude, profile })
    }

    pub fn with_bump(n: usize, extent: f64, bump: BumpSpec) -> Self {
        let kappa = bump.lipschitz();
        let spec = bump.clone();
        Self {
            n,
            phi: Arc::new(move |x| spec.eval(x)),
            kappa,
            extent,
            base_height: 0.0,
            bump: Some(bump),
        }
    }

    /// Arbitrary surface function with a claimed Lipschitz constant.
    ///
    /// The claim is checked by difference quotients on a 33^n grid over the patch.
    pub fn from_fn(
        n: usize,
        extent: f64,
        kappa: f64,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let dom = Self { n, phi: Arc::new(phi), kappa, extent, base_height: 0.0, bump: None };
        let measured = dom.measured_lipschitz(33);
        if measured > kappa * (1.0 + 1e-9) + 1e-12 {
            return Err(invalid("kappa", format!("sampled Lipschitz quotient {measured:.6e} exceeds {kappa:.6e}")));
        }
        Ok(dom)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn bump_spec(&self) -> Option<&BumpSpec> {
        self.bump.as_ref()
    }

    /// Height of the surface far from the bump.
    pub fn far_height(&self) -> f64 {
        self.base_height
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    /// Central-difference gradient of phi.
    pub fn grad_phi(&self, x: &[f64], step: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..self.n)
            .map(|k| {
                p[k] = x[k] + step;
                let fp = self.phi(&p);
                p[k] = x[k] - step;
                let fm = self.phi(&p);
                p[k] = x[k];
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    /// Largest difference quotient over pairs of points on a `per_axis^n` grid.
    pub fn measured_lipschitz(&self, per_axis: usize) -> f64 {
        let pts = tensor_grid(self.n, per_axis, self.extent);
        let vals: Vec<f64> = pts.iter().map(|p| self.phi(p)).collect();
        let mut best = 0.0f64;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = dist(&pts[i], &pts[j]);
                best = best.max((vals[i] - vals[j]).abs() / d);
            }
        }
        best
    }

    fn squared_distance_to_graph(&self, y: &[f64], start: &[f64]) -> f64 {
        let n = self.n;
        let yh = y[n];
        let f = |p: &[f64]| {
            let dh = self.phi(p) - yh;
            p.iter().zip(&y[..n]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + dh * dh
        };
        let mut p = start.to_vec();
        let mut best = f(&p);
        let step = 1e-7 * self.extent.max(1.0);
        for _ in 0..60 {
            let g = self.grad_phi(&p, step);
            let dh = self.phi(&p) - yh;
            let next: Vec<f64> = (0..n).map(|k| y[k] - dh * g[k]).collect();
            let val = f(&next);
            if val >= best - 1e-18 {
                // Damped step when the fixed-point map stops contracting.
                let half: Vec<f64> = p.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
                let hv = f(&half);
                if hv < best {
                    best = hv;
                    p = half;
                    continue;
                }
                break;
            }
            best = val;
            p = next;
        }
        best
    }
}

fn tensor_grid(n: usize, per_axis: usize, extent: f64) -> Vec<Vec<f64>> {
    let step = if per_axis > 1 { 2.0 * extent / (per_axis - 1) as f64 } else { 0.0 };
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    -extent + i as f64 * step
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTag {
    GraphPatch,
    Sphere,
    /// Graph node inside the support of the bump.
    Cap,
}

impl NodeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeTag::GraphPatch => "graph-patch",
            NodeTag::Sphere => "sphere",
            NodeTag::Cap => "cap",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Surface {
    Graph(GraphDomain),
    Sphere { radius: f64 },
}

/// Which side of the boundary a point or probe lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Interior,
    Exterior,
}

/// Discretized boundary: nodes, outward unit normals and quadrature weights.
#[derive(Debug, Clone)]
pub struct BoundaryMesh {
    n: usize,
    nodes: Vec<f64>,
    normals: Vec<f64>,
    weights: Vec<f64>,
    h: f64,
    extent: f64,
    tags: Vec<NodeTag>,
    surface: Surface,
    patch_area: f64,
}

impl BoundaryMesh {
    /// Boundary dimension n (the ambient space is R^{n+1}).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ambient_dim(&self) -> usize {
        self.n + 1
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.n + 1;
        &self.nodes[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn normal(&self, i: usize) -> &[f64] {
        let d = self.n + 1;
        &self.normals[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tag(&self, i: usize) -> NodeTag {
        self.tags[i]
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn surface(&self) -> &Surface {
        &self.surface
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Analytic measure of the surface piece the nodes represent.
    pub fn patch_area(&self) -> f64 {
        self.patch_area
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self.surface, Surface::Sphere { .. })
    }

    pub fn graph(&self) -> Option<&GraphDomain> {
        match &self.surface {
            Surface::Graph(g) => Some(g),
            Surface::Sphere { .. } => None,
        }
    }

    /// Boundary value of K1 for the exact surface: 1/2 on closed surfaces, 0 on
    /// asymptotically flat graphs.
    pub fn gauss_trace(&self) -> f64 {
        if self.is_bounded() {
            0.5
        } else {
            0.0
        }
    }

    /// Exact double layer of the unit density off the boundary.
    pub fn gauss_value(&self, side: Side) -> f64 {
        match (self.is_bounded(), side) {
            (true, Side::Interior) => 1.0,
            (true, Side::Exterior) => 0.0,
            (false, Side::Interior) => 0.5,
            (false, Side::Exterior) => -0.5,
        }
    }

    /// Whether `y` lies in the open domain.
    pub fn contains(&self, y: &[f64]) -> bool {
        match &self.surface {
            Surface::Graph(g) => y[self.n] > g.phi(&y[..self.n]),
            Surface::Sphere { radius } => norm(y) < *radius,
        }
    }

    pub fn side_of(&self, y: &[f64]) -> Side {
        if self.contains(y) {
            Side::Interior
        } else {
            Side::Exterior
        }
    }

    /// Distance from `y` to the analytic boundary surface.
    pub fn distance(&self, y: &[f64]) -> f64 {
        match &self.surface {
            Surface::Sphere { radius } => (norm(y) - radius).abs(),
            Surface::Graph(g) => {
                if g.kappa == 0.0 {
                    return (y[self.n] - g.phi(&y[..self.n])).abs();
                }
                let (i, d_node) = self.nearest_node(y);
                let start = self.node(i)[..self.n].to_vec();
                let d_vertical = (y[self.n] - g.phi(&y[..self.n])).abs();
                let d_proj = g.squared_distance_to_graph(y, &start).sqrt();
                d_node.min(d_vertical).min(d_proj)
            }
        }
    }

    pub fn nearest_node(&self, y: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d = crate::linalg::dist_sq(self.node(i), y);
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Indices of nodes with |y - center| < r.
    pub fn nodes_in_ball(&self, center: &[f64], r: f64) -> Vec<usize> {
        let r2 = r * r;
        (0..self.len()).filter(|&i| crate::linalg::dist_sq(self.node(i), center) < r2).collect()
    }

    /// sigma(B(center, r)) with each node contributing the fraction of its cell
    /// inside the ball (linear ramp over the cell width).
    pub fn ball_measure(&self, center: &[f64], r: f64) -> f64 {
        let inv_n = 1.0 / self.n as f64;
        (0..self.len())
            .map(|i| {
                let w = self.weights[i];
                let cell = w.powf(inv_n);
                let d = dist(self.node(i), center);
                let frac = ((r - d) / cell + 0.5).clamp(0.0, 1.0);
                frac * w
            })
            .sum()
    }

    /// Estimated contribution of the boundary beyond the patch to a double-layer
    /// type integral at `x`, given a bound for the density near the patch edge.
    ///
    /// The surface is flat at height `far_height` outside the patch, so the
    /// kernel there is `|x_{n+1} - c| / |x - y|^{n+1}`, whose integral over
    /// `|y' - x'| > rho` is `w_{n-1} |x_{n+1} - c| / rho`.
    pub fn truncation_tail(&self, x: &[f64], density_bound: f64) -> f64 {
        let Surface::Graph(g) = &self.surface else {
            return 0.0;
        };
        let n = self.n;
        let half = self.extent + 0.5 * self.h;
        let rho = x[..n].iter().map(|c| half - c.abs()).fold(f64::INFINITY, f64::min);
        if rho <= 0.0 {
            return f64::INFINITY;
        }
        let height = (x[n] - g.far_height()).abs();
        density_bound * crate::linalg::unit_sphere_area(n - 1) / crate::linalg::unit_sphere_area(n) * height / rho
    }

    /// sup |g| over nodes within 2h of the patch edge (graph meshes).
    pub fn edge_density_bound(&self, g: &[f64]) -> f64 {
        if self.is_bounded() {
            return 0.0;
        }
        let limit = self.extent - 2.0 * self.h;
        (0..self.len())
            .filter(|&i| self.node(i)[..self.n].iter().any(|c| c.abs() > limit))
            .map(|i| g[i].abs())
            .fold(0.0, f64::max)
    }
}

/// Samples a graph domain on a uniform tensor grid of the base patch
/// `[-extent, extent]^n` with spacing `h`.
pub fn discretize_graph(domain: &GraphDomain, h: f64) -> Result<BoundaryMesh> {
    let n = domain.n;
    if n == 0 || n > 2 {
        return Err(Error::UnsupportedDimension(n + 1));
    }
    if !(h > 0.0) {
        return Err(invalid("h", "spacing must be positive"));
    }
    if h > domain.extent / 8.0 + 1e-12 {
        return Err(invalid("h", format!("spacing {h} exceeds extent/8 = {}", domain.extent / 8.0)));
    }
    let per_axis = (2.0 * domain.extent / h + 1e-9).floor() as usize + 1;
    let total = per_axis.pow(n as u32);
    let d = n + 1;
    let step = 1e-4 * h;
    let mut nodes = Vec::with_capacity(total * d);
    let mut normals = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);
    let cell = h.powi(n as i32);
    for idx in 0..total {
        let mut rem = idx;
        let base: Vec<f64> = (0..n)
            .map(|_| {
                let i = rem % per_axis;
                rem /= per_axis;
                -domain.extent + i as f64 * h
            })
            .collect();
        let height = domain.phi(&base);
        if !height.is_finite() {
            return Err(Error::NonFiniteSurface { node: idx, base });
        }
        let grad = domain.grad_phi(&base, step);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteSurface { node: idx, base });
        }
        let jac = (1.0 + dot(&grad, &grad)).sqrt();
        let tag = match &domain.bump {
            Some(b) if dist(&base, &b.center) < b.radius => NodeTag::Cap,
            _ => NodeTag::GraphPatch,
        };
        nodes.extend_from_slice(&base);
        nodes.push(height);
        normals.extend(grad.iter().map(|g| g / jac));
        normals.push(-1.0 / jac);
        weights.push(cell * jac);
        tags.push(tag);
    }
    let side = per_axis as f64 * h;
    let patch_area = refined_graph_area(domain, side / 2.0, 4 * per_axis);
    Ok(BoundaryMesh {
        n,
        nodes,
        normals,
        weights,
        h,
        extent: domain.extent,
        tags,
        surface: Surface::Graph(domain.clone()),
        patch_area,
    })
}

/// Midpoint-rule area of the graph over `[-half, half]^n` with `cells^n` cells.
pub fn refined_graph_area(domain: &GraphDomain, half: f64, cells: usize) -> f64 {
    let n = domain.n;
    let dx = 2.0 * half / cells as f64;
    let step = 1e-5 * dx;
    let total = cells.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let p: Vec<f64> = (0..n)
                .map(|_| {
                    let i = idx % cells;
                    idx /= cells;
                    -half + (i as f64 + 0.5) * dx
                })
                .collect();
            let g = domain.grad_phi(&p, step);
            (1.0 + dot(&g, &g)).sqrt()
        })
        .sum::<f64>()
        * dx.powi(n as i32)
}

/// Sphere of the given radius centered at the origin.
///
/// For `ambient_dim = 3` the nodes are the vertices of an icosahedron
/// subdivided `level` times (10 * 4^level + 2 nodes) and each node carries a
/// third of the spherical area of its incident triangles, so the weights sum
/// to the sphere area. For `ambient_dim = 2` the circle gets `4 * 2^level`
/// equally spaced nodes.
pub fn discretize_sphere(ambient_dim: usize, radius: f64, level: usize) -> Result<BoundaryMesh> {
    if !(radius > 0.0) {
        return Err(invalid("radius", "must be positive"));
    }
    match ambient_dim {
        2 => Ok(circle(radius, 4 << level)),
        3 => Ok(icosphere(radius, level)),
        d => Err(Error::UnsupportedDimension(d)),
    }
}

fn circle(radius: f64, count: usize) -> BoundaryMesh {
    let w = 2.0 * std::f64::consts::PI * radius / count as f64;
    let mut nodes = Vec::with_capacity(2 * count);
    let mut normals = Vec::with_capacity(2 * count);
    for k in 0..count {
        let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
        let (s, c) = t.sin_cos();
        nodes.extend([radius * c, radius * s]);
        normals.extend([c, s]);
    }
    BoundaryMesh {
        n: 1,
        nodes,
        normals,
        weights: vec![w; count],
        h: w,
        extent: radius,
        tags: vec![NodeTag::Sphere; count],
        surface: Surface::Sphere { radius },
        patch_area: 2.0 * std::f64::consts::PI * radius,
    }
}

fn icosphere(radius: f64, level: usize) -> BoundaryMesh {
    use std::collections::HashMap;

    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut verts {
        normalize(v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| {
            let key = (a.min(b), a.max(b));
            *mids.entry(key).or_insert_with(|| {
                let mut m = [0.0; 3];
                for k in 0..3 {
                    m[k] = 0.5 * (verts[a][k] + verts[b][k]);
                }
                normalize(&mut m);
                verts.push(m);
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let mut weights = vec![0.0; verts.len()];
    for &[a, b, c] in &faces {
        let area = spherical_triangle_area(&verts[a], &verts[b], &verts[c]) * radius * radius;
        for v in [a, b, c] {
            weights[v] += area / 3.0;
        }
    }
    let count = verts.len();
    let mut nodes = Vec::with_capacity(3 * count);
    let mut normals = Vec::with_capacity(3 * count);
    for v in &verts {
        nodes.extend(v.iter().map(|c| c * radius));
        normals.extend_from_slice(v);
    }
    let h = (4.0 * std::f64::consts::PI * radius * radius / count as f64).sqrt();
    BoundaryMesh {
        n: 2,
        nodes,
        normals,
        weights,
        h,
        extent: radius,
        tags: vec![NodeTag::Sphere; count],
        surface: Surface::Sphere { radius },
        patch_area: 4.0 * std::f64::consts::PI * radius * radius,
    }
}

/// Area of the spherical triangle with unit vertices a, b, c (Van Oosterom–Strackee).
fn spherical_triangle_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let cross = [
        b[1] * c[2] - b[2] * c[1],
        b[2] * c[0] - b[0] * c[2],
        b[0] * c[1] - b[1] * c[0],
    ];
    let triple = dot(a, &cross);
    let denom = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * triple.abs().atan2(denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorkscrewPoint {
    pub point: Vec<f64>,
    /// Achieved constant: B(point, r / m) lies in B(x, r) ∩ Omega.
    pub m: f64,
}

/// Finds A_r(x): an interior point whose ball of radius r/M sits inside
/// B(x, r) ∩ Omega, by a line search along the inward normal.
pub fn corkscrew_point(mesh: &BoundaryMesh, x: usize, r: f64) -> Result<CorkscrewPoint> {
    if !(r > 0.0 && r < mesh.extent) {
        return Err(invalid("r", format!("need 0 < r < extent = {}", mesh.extent)));
    }
    let base = mesh.node(x);
    let nu = mesh.normal(x);
    let depth = |s: f64| -> (f64, Vec<f64>) {
        let y: Vec<f64> = base.iter().zip(nu).map(|(b, v)| b - s * v).collect();
        if !mesh.contains(&y) {
            return (0.0, y);
        }
        let rho = mesh.distance(&y).min(r - dist(&y, base));
        (rho, y)
    };
    let steps = 64;
    let mut best_s = 0.0;
    let mut best = 0.0;
    for k in 1..steps {
        let s = r * k as f64 / steps as f64;
        let (rho, _) = depth(s);
        if rho > best {
            best = rho;
            best_s = s;
        }
    }
    // Golden-section refinement on the bracketing interval.
    let (mut lo, mut hi) = ((best_s - r / steps as f64).max(0.0), (best_s + r / steps as f64).min(r));
    let g = 0.618_033_988_749_894_9;
    for _ in 0..40 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if depth(a).0 >= depth(b).0 {
            hi = b;
        } else {
            lo = a;
        }
    }
    let (rho_ref, _) = depth(0.5 * (lo + hi));
    if rho_ref > best {
        best_s = 0.5 * (lo + hi);
    }
    let (rho, point) = depth(best_s);
    let m = if rho > 0.0 { r / rho } else { f64::INFINITY };
    if m > 16.0 {
        return Err(Error::DegenerateGeometry(format!(
            "no corkscrew point for node {x} at radius {r:.3e} (best M = {m:.3e})"
        )));
    }
    Ok(CorkscrewPoint { point, m })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdrReport {
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
}

/// Empirical Ahlfors–David constants: min and max of sigma(B(x,r)) / r^n over
/// random nodes and log-uniform radii in [4h, extent/4].
///
/// On graph meshes the center is drawn among nodes whose ball stays inside the patch.
pub fn adr_report(mesh: &BoundaryMesh, samples: usize, rng: &mut ChaCha8Rng) -> AdrReport {
    let (r_lo, r_hi) = (4.0 * mesh.h, (mesh.extent / 4.0).max(4.0 * mesh.h));
    let mut lower = f64::INFINITY;
    let mut upper = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < samples && attempts < 100 * samples.max(1) {
        attempts += 1;
        let r = r_lo * (r_hi / r_lo).powf(rng.random::<f64>());
        let i = rng.random_range(0..mesh.len());
        if !mesh.is_bounded() {
            let limit = mesh.extent - r;
            if mesh.node(i)[..mesh.n].iter().any(|c| c.abs() > limit) {
                continue;
            }
        }
        let ratio = mesh.ball_measure(mesh.node(i), r) / r.powi(mesh.n as i32);
        lower = lower.min(ratio);
        upper = upper.max(ratio);
        done += 1;
    }
    if done == 0 {
        lower = 0.0;
    }
    AdrReport { lower, upper, samples: done }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSample {
    pub base: usize,
    pub aperture: f64,
    pub side: Side,
    pub points: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    /// Points rejected by the cone inequality.
    pub dropped: usize,
}

pub const DEFAULT_APERTURE: f64 = 1.0;

/// Points `x - t_k nu(x)`, `t_k = r0 / 2^k`, inside the interior cone of aperture `a`.
pub fn cone_samples(mesh: &BoundaryMesh, x: usize, a: f64, count: usize, r0: f64) -> Result<ConeSample> {
    cone_samples_on(mesh, Side::Interior, x, a, count, r0)
}

/// As [`cone_samples`], on either side of the boundary.
pub fn cone_samples_on(
    mesh: &BoundaryMesh,
    side: Side,
    x: usize,
    a: f64,
    count: usize,
    r0: f64,
) -> Result<ConeSample> {
    if !(a > 0.0) {
        return Err(invalid("a", "aperture must be positive"));
    }
    if !(r0 > 0.0) || r0 > mesh.extent / 4.0 + 1e-12 {
        return Err(invalid("r0", format!("need 0 < r0 <= extent/4 = {}", mesh.extent / 4.0)));
    }
    let radii: Vec<f64> = (0..count).map(|k| r0 * 0.5f64.powi(k as i32)).collect();
    cone_points(mesh, side, x, a, &radii)
}

/// Points `x ∓ t ν(x)` for the given distances, keeping those that satisfy the
/// cone inequality `|y − x| < (1 + a) dist(y, ∂Ω)` on the requested side.
pub fn cone_points(mesh: &BoundaryMesh, side: Side, x: usize, a: f64, distances: &[f64]) -> Result<ConeSample> {
    if !(a > 0.0) {
        return Err(invalid("a", "aperture must be positive"));
    }
    let base = mesh.node(x);
    let nu = mesh.normal(x);
    let sign = match side {
        Side::Interior => -1.0,
        Side::Exterior => 1.0,
    };
    let mut points = Vec::new();
    let mut radii = Vec::new();
    let mut dropped = 0;
    for &t in distances {
        let y: Vec<f64> = base.iter().zip(nu).map(|(b, v)| b + sign * t * v).collect();
        let r = dist(&y, base);
        let ok = mesh.side_of(&y) == side && r < (1.0 + a) * mesh.distance(&y);
        if ok {
            points.push(y);
            radii.push(r);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("cone points: dropped {dropped} points at node {x}");
    }
    Ok(ConeSample { base: x, aperture: a, side, points, radii, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::f64::consts::PI;

    #[test]
    fn flat_graph_normals_and_weights() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 1.0), 0.1).unwrap();
        assert_eq!(mesh.len(), 21 * 21);
        for i in 0..mesh.len() {
            assert_eq!(mesh.normal(i), &[0.0, 0.0, -1.0]);
            assert!((mesh.weight(i) - 0.01).abs() < 1e-15);
        }
        assert!((mesh.total_weight() - mesh.patch_area()).abs() / mesh.patch_area() < 1e-12);
    }

    #[test]
    fn cone_bump_area_matches_refined_quadrature() {
        let dom = GraphDomain::bump(2, 2.0, 0.1, 1.0, BumpProfile::Cone);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let oracle = refined_graph_area(&dom, mesh.extent() + 0.05, 400);
        assert!((mesh.total_weight() - oracle).abs() / oracle < 0.02);
        // Normals point down and are unit.
        for i in 0..mesh.len() {
            assert!((norm(mesh.normal(i)) - 1.0).abs() < 1e-12);
            assert!(mesh.normal(i)[2] < 0.0);
            let x = mesh.node(i);
            assert_eq!(x[2], dom.phi(&x[..2]));
        }
    }

    #[test]
    fn flat_lipschitz_certificate_is_zero() {
        let dom = GraphDomain::from_fn(2, 1.0, 0.0, |_| 0.0).unwrap();
        assert_eq!(dom.measured_lipschitz(9), 0.0);
        assert!(GraphDomain::from_fn(1, 1.0, 0.1, |x| 0.5 * x[0]).is_err());
    }

    #[test]
    fn bump_lipschitz_constants_hold_on_grids() {
        for profile in [BumpProfile::Cone, BumpProfile::Smooth] {
            let dom = GraphDomain::bump(1, 2.0, 0.3, 1.0, profile);
            let measured = dom.measured_lipschitz(801);
            assert!(measured <= dom.kappa() * (1.0 + 1e-9), "{profile:?}: {measured}");
            assert!(measured > 0.9 * dom.kappa());
            assert_eq!(dom.phi(&[1.5]), 0.0);
        }
    }

    #[test]
    fn sphere_weights() {
        let s = discretize_sphere(3, 1.0, 3).unwrap();
        assert_eq!(s.len(), 642);
        assert!((s.total_weight() - 4.0 * PI).abs() / (4.0 * PI) < 0.01);
        let s2 = discretize_sphere(3, 2.0, 3).unwrap();
        assert!((s2.total_weight() - 16.0 * PI).abs() / (16.0 * PI) < 0.01);
        let c = discretize_sphere(2, 1.0, 6).unwrap();
        assert_eq!(c.len(), 256);
        for i in 0..c.len() {
            assert!((c.weight(i) - 2.0 * PI / 256.0).abs() < 1e-15);
        }
        assert!(matches!(discretize_sphere(4, 1.0, 1), Err(Error::UnsupportedDimension(4))));
    }

    #[test]
    fn corkscrew_on_half_space_and_sphere() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 2.0), 0.1).unwrap();
        let x = mesh.len() / 2;
        let c = corkscrew_point(&mesh, x, 1.0).unwrap();
        let expected: Vec<f64> = mesh.node(x).iter().zip([0.0, 0.0, 0.5]).map(|(a, b)| a + b).collect();
        assert!(dist(&c.point, &expected) < 1e-6);
        assert!((c.m - 2.0).abs() < 1e-6);

        let s = discretize_sphere(3, 1.0, 3).unwrap();
        let top = (0..s.len()).find(|&i| (s.node(i)[2] - 1.0).abs() < 1e-12).unwrap();
        let c = corkscrew_point(&s, top, 0.5).unwrap();
        assert!(dist(&c.point, s.node(top)) < 0.5);
        assert!(s.distance(&c.point) >= 0.5 / c.m - 1e-12);

        let small = corkscrew_point(&mesh, x, 1e-4).unwrap();
        assert!(dist(&small.point, mesh.node(x)) < 1e-4);
    }

    #[test]
    fn adr_constants() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 2.0), 0.05).unwrap();
        let rep = adr_report(&mesh, 40, &mut rng::stream(0, "adr"));
        assert!((rep.lower - PI).abs() / PI < 0.05, "{rep:?}");
        assert!((rep.upper - PI).abs() / PI < 0.05, "{rep:?}");

        let circle = discretize_sphere(2, 1.0, 6).unwrap();
        let rep = adr_report(&circle, 40, &mut rng::stream(0, "adr"));
        assert!((rep.lower - 2.0).abs() / 2.0 < 0.05, "{rep:?}");
        assert!((rep.upper - 2.0).abs() / 2.0 < 0.05, "{rep:?}");

        let kappa = 0.1;
        let bump = discretize_graph(&GraphDomain::bump(2, 2.0, kappa, 1.0, BumpProfile::Cone), 0.05).unwrap();
        let rep = adr_report(&bump, 40, &mut rng::stream(0, "adr"));
        assert!(rep.lower >= PI / 1.2 && rep.upper <= 1.2 * PI * (1.0f64 + kappa * kappa).sqrt(), "{rep:?}");
    }

    #[test]
    fn cone_samples_flat_and_sphere() {
        let mesh = discretize_graph(&GraphDomain::flat(2, 2.0), 0.1).unwrap();
        let x = mesh.len() / 2;
        let cs = cone_samples(&mesh, x, 1.0, 4, 0.5).unwrap();
        let heights: Vec<f64> = cs.points.iter().map(|p| p[2]).collect();
        assert_eq!(heights, vec![0.5, 0.25, 0.125, 0.0625]);

        let s = discretize_sphere(3, 1.0, 2).unwrap();
        for i in (0..s.len()).step_by(7) {
            let cs = cone_samples(&s, i, 1.0, 5, 0.25).unwrap();
            for p in &cs.points {
                assert!(dist(p, s.node(i)) < 2.0 * (1.0 - norm(p)));
            }
        }
    }

    #[test]
    fn cone_samples_at_bump_apex() {
        let dom = GraphDomain::bump(2, 2.0, 0.2, 1.0, BumpProfile::Smooth);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let apex = mesh.nearest_node(&[0.0, 0.0, dom.phi(&[0.0, 0.0])]).0;
        let cs = cone_samples(&mesh, apex, 1.0, 6, 0.5).unwrap();
        assert!(cs.points.len() >= 3);
    }

    #[test]
    fn graph_distance_is_exact_for_flat_and_bounded_for_bump() {
        let dom = GraphDomain::bump(2, 2.0, 0.2, 1.0, BumpProfile::Smooth);
        let mesh = discretize_graph(&dom, 0.1).unwrap();
        let y = [0.3, -0.2, 0.4];
        let d = mesh.distance(&y);
        let vertical = y[2] - dom.phi(&y[..2]);
        assert!(d <= vertical + 1e-12);
        assert!(d >= vertical / (1.0f64 + 0.04).sqrt() - 1e-9);
    }
}
