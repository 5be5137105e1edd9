//! Experiment drivers. Each writes its CSV tables and a `manifest.txt`.

use std::path::{Path, PathBuf};

use log::{info, warn};
use potbench_core::dyadic::{build_lattice, DyadicLattice};
use potbench_core::flatness::{check_delta_ssr, proof_parameters, ProofParameters};
use potbench_core::geometry::{adr_report, discretize_graph, discretize_sphere, BoundaryMesh, Side};
use potbench_core::lipgraph::{build_graph, check_partition, transfer_density, verify_graph, GraphParams};
use potbench_core::potentials::{
    assemble_k, assemble_k_adjoint, double_layer_interior, operator_norm_2_seeded, svd_decay, tail_bound,
    truncated_op, KernelKind, KernelSpec, LayerOperator, MaskSide,
};
use potbench_core::rng;
use potbench_core::solver::{
    good_lambda_probe, lp_boundary_norm, nontangential_derivative_probe, nontangential_limit_probe, nt_maximal_sample,
    probe_radii, sigma_min_diagnostic_seeded, solve_dirichlet_seeded, solve_neumann_seeded, Field, Problem,
    SolveResult, PROBE_COUNT, PROBE_R0,
};
use potbench_core::Error;

use crate::config::{DataSpec, DomainSpec, Experiment, ProblemKind, RunConfig, ScaleValue, StudyQuantity};
use crate::error::BenchError;
use crate::output::{emit_csv, format_f64, lattice_text, write_matrix, write_text, Cell, Manifest, Table};

pub const ADR_SAMPLES: usize = 256;
const PROBE_NODES: usize = 16;

/// Files written by one experiment.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub manifest: Manifest,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    files: Vec<PathBuf>,
    manifest: Manifest,
}

impl Run<'_> {
    fn csv(&mut self, name: &str, table: &Table) -> Result<(), BenchError> {
        let path = self.dir.join(name);
        emit_csv(table, &path)?;
        self.files.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), BenchError> {
        let path = self.dir.join(name);
        write_text(text, &path)?;
        self.files.push(path);
        Ok(())
    }
}

pub fn build_mesh(cfg: &RunConfig) -> Result<BoundaryMesh, BenchError> {
    Ok(match &cfg.domain {
        DomainSpec::Sphere { dim, radius, level } => discretize_sphere(*dim, *radius, *level)?,
        DomainSpec::Graph { h, .. } => discretize_graph(&cfg.domain.graph_domain().expect("graph domain"), *h)?,
    })
}

pub fn boundary_data(cfg: &RunConfig, mesh: &BoundaryMesh) -> Result<Vec<f64>, BenchError> {
    let data = cfg.data.as_ref().ok_or_else(|| BenchError::invalid("data", "this experiment needs boundary data"))?;
    Ok((0..mesh.len()).map(|i| data.eval(mesh.node(i))).collect())
}

/// Three generations starting at the finest admissible side 2^j ≥ 4h.
pub fn default_lattice_levels(mesh: &BoundaryMesh) -> (i32, i32) {
    let j_min = (4.0 * mesh.h()).log2().ceil() as i32;
    (j_min, j_min + 2)
}

pub fn run_lattice(cfg: &RunConfig, mesh: &BoundaryMesh) -> Result<DyadicLattice, BenchError> {
    let (j_min, j_max) = cfg.lattice.map_or_else(|| default_lattice_levels(mesh), |l| (l.j_min, l.j_max));
    Ok(build_lattice(mesh, j_min, j_max)?)
}

pub fn run_proof_parameters(cfg: &RunConfig, n: usize) -> Result<Option<ProofParameters>, BenchError> {
    match (cfg.scales.delta, cfg.scales.p, cfg.scales.big) {
        (Some(delta), Some(p), Some(big)) => Ok(Some(proof_parameters(n, p, delta, big)?)),
        _ => Ok(None),
    }
}

/// Truncation scales after resolving `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedTruncation {
    pub t: f64,
    pub big_t: f64,
    pub r_tilde: f64,
}

/// `t` auto is 2h (the finest resolved scale), `T` auto is S·A², and `R̃` auto
/// is R + T so that B_R̃ holds every point within T of B_R.
pub fn resolve_truncation(cfg: &RunConfig, mesh: &BoundaryMesh) -> Result<Option<ResolvedTruncation>, BenchError> {
    let Some(tr) = cfg.truncation else {
        return Ok(None);
    };
    let params = run_proof_parameters(cfg, mesh.n())?;
    let t = match tr.t {
        ScaleValue::Value(v) => v,
        ScaleValue::Auto(_) => 2.0 * mesh.h(),
    };
    let big_t = match tr.big_t {
        ScaleValue::Value(v) => v,
        ScaleValue::Auto(_) => params.as_ref().expect("validated").t_scale,
    };
    let r_tilde = match tr.r_tilde {
        ScaleValue::Value(v) => v,
        ScaleValue::Auto(_) => cfg.scales.radius.expect("validated") + big_t,
    };
    if t >= big_t {
        return Err(BenchError::invalid("truncation.t", format!("resolved t = {t} is not below T = {big_t}")));
    }
    Ok(Some(ResolvedTruncation { t, big_t, r_tilde }))
}

/// Ten interior and five exterior evaluation points for the Gauss identity.
pub fn gauss_points(dim: usize, radius: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let direction = |k: usize| -> Vec<f64> {
        let (a, b) = (2.399_963_229_728_653 * k as f64, 1.234_567_890_123_456 * k as f64 + 0.3);
        match dim {
            2 => vec![a.cos(), a.sin()],
            _ => vec![a.cos(), a.sin() * b.cos(), a.sin() * b.sin()],
        }
    };
    let scaled = |k: usize, r: f64| direction(k).into_iter().map(|c| c * r * radius).collect::<Vec<f64>>();
    let interior = (0..10).map(|k| scaled(k, 0.06 * k as f64)).collect();
    let exterior = (0..5).map(|k| scaled(k + 10, 1.5 + 0.35 * k as f64)).collect();
    (interior, exterior)
}

/// Nodes probed by the solve experiments: up to 16 evenly spread indices, on
/// graph meshes among nodes with |x'|∞ ≤ extent/2.
pub fn probe_nodes(mesh: &BoundaryMesh) -> Vec<usize> {
    let half = 0.5 * mesh.extent();
    let candidates: Vec<usize> = (0..mesh.len())
        .filter(|&i| mesh.is_bounded() || mesh.node(i)[..mesh.n()].iter().all(|c| c.abs() <= half))
        .collect();
    let count = PROBE_NODES.min(candidates.len());
    (0..count).map(|k| candidates[k * candidates.len() / count]).collect()
}

fn common_manifest(run: &mut Run<'_>, experiment: Experiment, mesh: &BoundaryMesh) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let m = &mut run.manifest;
    m.text("command", experiment.as_str());
    m.text("config_sha256", cfg.hash());
    m.text("seed", cfg.seed.to_string());
    m.text("domain", cfg.domain.kind());
    m.int("ambient_dim", mesh.ambient_dim() as i64);
    m.int("nodes", mesh.len() as i64);
    m.num("h", mesh.h());
    m.num("extent", mesh.extent());
    m.num("aperture", cfg.a);
    let adr = adr_report(mesh, ADR_SAMPLES, &mut rng::stream(cfg.seed, "adr"));
    m.num("adr_lower", adr.lower);
    m.num("adr_upper", adr.upper);
    m.int("adr_samples", adr.samples as i64);
    let lattice = run_lattice(cfg, mesh)?;
    let c = lattice.constants;
    m.int("lattice_j_min", lattice.j_min as i64);
    m.int("lattice_j_max", lattice.j_max as i64);
    m.int("lattice_cubes", lattice.len() as i64);
    m.num("c_d", c.c_d);
    m.num("diam_lower", c.diam_lower);
    m.num("measure_constant", c.measure);
    m.num("c1_min", c.c1_min);
    m.num("thin_boundary", c.thin_boundary);
    let sc = &cfg.scales;
    for (key, v) in [("s", sc.small), ("S", sc.big), ("R", sc.radius), ("delta", sc.delta), ("p", sc.p)] {
        if let Some(v) = v {
            m.num(&format!("scale_{key}"), v);
        }
    }
    if let Some(tr) = resolve_truncation(cfg, mesh)? {
        m.num("truncation_t", tr.t);
        m.num("truncation_T", tr.big_t);
        m.num("truncation_R_tilde", tr.r_tilde);
    }
    if let Some(p) = run_proof_parameters(cfg, mesh.n())? {
        proof_block(m, &p);
    }
    Ok(())
}

fn proof_block(m: &mut Manifest, p: &ProofParameters) {
    m.text("gamma", p.gamma.to_string());
    m.text("theta", p.theta.to_string());
    m.num("A", p.a);
    m.num("N", p.n_big);
    m.num("alpha_stop", p.alpha_stop);
    m.num("T", p.t_scale);
    for (k, c) in p.conditions.iter().enumerate() {
        m.num(&format!("condition_{}", k + 1), *c);
    }
}

/// Runs one experiment, writing into `dir`.
pub fn run_experiment(cfg: &RunConfig, experiment: Experiment, dir: &Path) -> Result<RunOutput, BenchError> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let mut run = Run { cfg, dir: dir.to_path_buf(), files: Vec::new(), manifest: Manifest::default() };
    info!("{experiment}: writing to {}", dir.display());
    match experiment {
        Experiment::ConvergenceStudy => convergence_study(&mut run)?,
        _ => {
            let mesh = build_mesh(cfg)?;
            common_manifest(&mut run, experiment, &mesh)?;
            match experiment {
                Experiment::SolveDirichlet => solve(&mut run, &mesh, Problem::Dirichlet)?,
                Experiment::SolveNeumann => solve(&mut run, &mesh, Problem::Neumann)?,
                Experiment::FlatnessReport => flatness_report(&mut run, &mesh)?,
                Experiment::Spectrum => spectrum(&mut run, &mesh)?,
                Experiment::LipgraphBuild => lipgraph_build(&mut run, &mesh)?,
                Experiment::GoodLambda => good_lambda(&mut run, &mesh)?,
                Experiment::ConvergenceStudy => unreachable!(),
            }
        }
    }
    let path = dir.join("manifest.txt");
    run.manifest.write(&path)?;
    run.files.push(path);
    Ok(RunOutput { experiment, dir: run.dir, files: run.files, manifest: run.manifest })
}

/// Runs the config's experiment list, each into its own subdirectory.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<Vec<RunOutput>, BenchError> {
    if cfg.experiments.is_empty() {
        return Err(BenchError::invalid("experiments", "the list is empty"));
    }
    cfg.experiments.iter().map(|&e| run_experiment(cfg, e, &dir.join(e.as_str()))).collect()
}

fn coordinate_header(prefix: &str, dim: usize) -> Vec<String> {
    (1..=dim).map(|k| format!("{prefix}{k}")).collect()
}

fn solve(run: &mut Run<'_>, mesh: &BoundaryMesh, problem: Problem) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let conflict = matches!(
        (cfg.problem, problem),
        (ProblemKind::Dirichlet, Problem::Neumann) | (ProblemKind::Neumann, Problem::Dirichlet)
    );
    if conflict {
        return Err(BenchError::invalid("problem", format!("config problem does not match solve-{}", problem.as_str())));
    }
    let f = boundary_data(cfg, mesh)?;
    let result = match problem {
        Problem::Dirichlet => solve_dirichlet_seeded(mesh, &f, cfg.seed)?,
        Problem::Neumann => solve_neumann_seeded(mesh, &f, cfg.seed)?,
    };
    let m = &mut run.manifest;
    m.text("problem", problem.as_str());
    m.text("data", cfg.data.as_ref().map_or("", DataSpec::name));
    m.num("residual", result.residual);
    m.num("sigma_min", result.sigma_min);
    m.text("mean_projection_applied", result.mean_projection_applied.to_string());
    m.num("data_l2", lp_boundary_norm(mesh, &f, 2.0)?);
    m.num("density_l2", lp_boundary_norm(mesh, &result.density, 2.0)?);
    m.num("tail_bound", tail_bound(mesh, &result.density));

    let d = mesh.ambient_dim();
    let trace = result.boundary_trace();
    let mut header = vec!["node".to_string()];
    header.extend(coordinate_header("x", d));
    header.extend(["f", "g", "trace"].map(String::from));
    let mut density = Table::new(&header);
    for i in 0..mesh.len() {
        let mut row: Vec<Cell> = vec![i.into()];
        row.extend(mesh.node(i).iter().map(|&v| Cell::from(v)));
        row.extend([result.data[i], result.density[i], trace[i]].map(Cell::from));
        density.push(row);
    }
    run.csv("density.csv", &density)?;

    let r0 = PROBE_R0 * mesh.extent().min(1.0);
    let radii = probe_radii(r0, PROBE_COUNT);
    let mut probes = Table::new(&["node", "k", "radius", "value", "error", "limit", "oscillatory"]);
    let mut skipped = 0;
    let mut worst_limit = 0.0f64;
    for x in probe_nodes(mesh) {
        let rec = match problem {
            Problem::Dirichlet => nontangential_limit_probe(&result, x, cfg.a, &radii, Some(result.data[x])),
            Problem::Neumann => {
                nontangential_derivative_probe(&result, x, cfg.a, Side::Interior, &radii, Some(result.data[x]))
            }
        };
        let rec = match rec {
            Ok(r) => r,
            Err(Error::DegenerateGeometry(msg)) => {
                warn!("probe skipped: {msg}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        worst_limit = worst_limit.max((rec.limit - result.data[x]).abs());
        for (k, (&r, &v)) in rec.radii.iter().zip(&rec.values).enumerate() {
            let err = rec.errors.as_ref().map(|e| e[k]);
            probes.push(vec![x.into(), k.into(), r.into(), v.into(), err.into(), rec.limit.into(), rec.oscillatory.into()]);
        }
    }
    run.manifest.int("probes_skipped", skipped as i64);
    run.manifest.num("probe_worst_limit_error", worst_limit);
    run.csv("probes.csv", &probes)?;

    if let (Some(delta), Some(p)) = (cfg.scales.delta, cfg.scales.p) {
        let field = match problem {
            Problem::Dirichlet => Field::U,
            Problem::Neumann => Field::GradU,
        };
        let nu = nt_maximal_sample(&result, delta, cfg.a, field)?;
        let num = lp_boundary_norm(mesh, &nu, p)?;
        let den = lp_boundary_norm(mesh, &f, p)?;
        run.manifest.num("nt_maximal_lp", num);
        run.manifest.num("data_lp", den);
        run.manifest.num("nt_ratio", if den > 0.0 { num / den } else { 0.0 });
    }

    if !cfg.points.is_empty() {
        run.csv("points.csv", &point_table(&result, &cfg.points))?;
    }
    Ok(())
}

fn point_table(result: &SolveResult<'_>, points: &[Vec<f64>]) -> Table {
    let d = result.mesh.ambient_dim();
    let mut header = vec!["point".to_string()];
    header.extend(coordinate_header("z", d));
    header.push("u".into());
    header.extend(coordinate_header("grad_u", d));
    let mut t = Table::new(&header);
    for (k, z) in points.iter().enumerate() {
        let mut row: Vec<Cell> = vec![k.into()];
        row.extend(z.iter().map(|&v| Cell::from(v)));
        row.push(result.u(z).into());
        row.extend(result.grad_u(z).into_iter().map(Cell::from));
        t.push(row);
    }
    t
}

fn flatness_report(run: &mut Run<'_>, mesh: &BoundaryMesh) -> Result<(), BenchError> {
    let sc = &run.cfg.scales;
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| BenchError::invalid(format!("scales.{key}"), "flatness-report needs s, S, R and delta"))
    };
    let (s, big_s, big_r, delta) = (need(sc.small, "s")?, need(sc.big, "S")?, need(sc.radius, "R")?, need(sc.delta, "delta")?);
    let report = check_delta_ssr(mesh, delta, s, big_s, big_r)?;
    let mut t = Table::new(&["node", "r", "beta", "bmo", "beta_pass", "bmo_pass"]);
    for r in &report.records {
        t.push(vec![r.x.into(), r.r.into(), r.beta.into(), r.bmo.into(), r.beta_pass.into(), r.bmo_pass.into()]);
    }
    let m = &mut run.manifest;
    m.int("records", report.records.len() as i64);
    m.text("beta_pass", report.beta_pass.to_string());
    m.text("bmo_pass", report.bmo_pass.to_string());
    m.text("pass", report.pass().to_string());
    for (name, w) in [("worst_beta", report.worst_beta), ("worst_bmo", report.worst_bmo)] {
        if let Some(w) = w {
            m.int(&format!("{name}_node"), w.x as i64);
            m.num(&format!("{name}_radius"), w.r);
            m.num(&format!("{name}_value"), w.value);
        }
    }
    run.csv("flatness.csv", &t)?;
    if let Some(p) = run_proof_parameters(run.cfg, mesh.n())? {
        let mut block = Manifest::default();
        proof_block(&mut block, &p);
        run.text("proof_parameters.txt", &block.render())?;
    }
    Ok(())
}

fn spectrum(run: &mut Run<'_>, mesh: &BoundaryMesh) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let mut ops: Vec<(String, LayerOperator)> =
        vec![("K".into(), assemble_k(mesh)?), ("K_adjoint".into(), assemble_k_adjoint(mesh)?)];
    let truncation = resolve_truncation(cfg, mesh)?;
    if let Some(tr) = truncation {
        let dl = KernelKind::DoubleLayer;
        let specs = [
            ("K_small", KernelSpec::window(dl, 0.0, tr.t)),
            ("K_intermediate", KernelSpec::window(dl, tr.t, tr.big_t)),
            ("K_large", KernelSpec::window(dl, tr.big_t, f64::INFINITY)),
            ("K_intermediate_inside", KernelSpec::window(dl, tr.t, tr.big_t).masked(tr.r_tilde, MaskSide::Inside)),
            ("K_intermediate_outside", KernelSpec::window(dl, tr.t, tr.big_t).masked(tr.r_tilde, MaskSide::Outside)),
        ];
        for (name, spec) in specs {
            ops.push((name.into(), truncated_op(mesh, spec)?));
        }
    }
    let mut norms = Table::new(&["operator", "epsilon_low", "epsilon_high", "mask_radius", "mask_side", "norm"]);
    for (name, op) in &ops {
        let norm = operator_norm_2_seeded(op, cfg.seed)?;
        let (radius, side) = match op.spec.mask {
            Some(m) => (Some(m.radius), if m.side == MaskSide::Inside { "inside" } else { "outside" }),
            None => (None, ""),
        };
        norms.push(vec![
            name.as_str().into(),
            op.spec.epsilon_low.into(),
            op.spec.epsilon_high.into(),
            radius.into(),
            side.into(),
            norm.into(),
        ]);
        run.manifest.num(&format!("norm_{name}"), norm);
        if cfg.export_matrices {
            write_matrix(op, &run.dir.join(format!("{name}.bin")))?;
            run.files.push(run.dir.join(format!("{name}.bin")));
        }
    }
    run.csv("norms.csv", &norms)?;
    if mesh.is_bounded() {
        run.manifest.num("sigma_min_plus_half", sigma_min_diagnostic_seeded(mesh, 0.5, cfg.seed)?);
        run.manifest.num("sigma_min_minus_half", sigma_min_diagnostic_seeded(mesh, -0.5, cfg.seed)?);
    }
    if truncation.is_some() {
        let (_, op) = ops.iter().find(|(n, _)| n == "K_intermediate_inside").expect("assembled above");
        let k = cfg.svd_k.min(mesh.len());
        let sigma = svd_decay(op, k)?;
        let mut t = Table::new(&["k", "sigma", "ratio"]);
        for (i, &s) in sigma.iter().enumerate() {
            t.push(vec![(i + 1).into(), s.into(), (if sigma[0] > 0.0 { s / sigma[0] } else { 0.0 }).into()]);
        }
        if let Some(&last) = sigma.last() {
            run.manifest.num("svd_last_ratio", if sigma[0] > 0.0 { last / sigma[0] } else { 0.0 });
        }
        run.csv("svd.csv", &t)?;
    }
    Ok(())
}

fn lipgraph_build(run: &mut Run<'_>, mesh: &BoundaryMesh) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let spec = cfg.lipgraph.clone().ok_or_else(|| BenchError::invalid("lipgraph", "lipgraph-build needs a lipgraph section"))?;
    let big_s = cfg.scales.big.ok_or_else(|| BenchError::invalid("scales.S", "lipgraph-build needs S"))?;
    let alpha = match spec.alpha {
        ScaleValue::Value(v) => v,
        ScaleValue::Auto(_) => run_proof_parameters(cfg, mesh.n())?.expect("validated").alpha_stop,
    };
    let lattice = run_lattice(cfg, mesh)?;
    let level = spec.root_level.unwrap_or(lattice.j_max);
    if level < lattice.j_min || level > lattice.j_max {
        return Err(BenchError::invalid("lipgraph.root_level", format!("level {level} is outside the lattice")));
    }
    let point = spec.root_point.clone().unwrap_or_else(|| vec![0.0; mesh.ambient_dim()]);
    let node = mesh.nearest_node(&point).0;
    let root = lattice.cube_of(level, node).expect("every node has a cube at every level");
    let params = GraphParams { m: spec.m, k: spec.k, k0: spec.k0, seed: cfg.seed };
    let build = build_graph(mesh, &lattice, root, big_s, alpha, params)?;
    run.text("lattice.txt", &lattice_text(&lattice))?;

    let n = mesh.n();
    let mut header = vec!["cube".to_string(), "level".into(), "side".into()];
    header.extend(coordinate_header("lo", n));
    header.extend(["inf_d", "active", "selected", "witness_bound", "slope_norm"].map(String::from));
    let mut part = Table::new(&header);
    for (i, c) in build.cubes.iter().enumerate() {
        let mut row: Vec<Cell> = vec![i.into(), c.level.into(), c.side.into()];
        row.extend(c.lo.iter().map(|&v| Cell::from(v)));
        row.extend([
            c.inf_d.into(),
            c.active.into(),
            c.selected.into(),
            c.witness_bound.into(),
            c.affine.as_ref().map(|a| a.slope_norm()).into(),
        ]);
        part.push(row);
    }
    run.csv("partition.csv", &part)?;

    let per_axis = spec.grid;
    let mut header = coordinate_header("p", n);
    header.extend(["a", "in_u0"].map(String::from));
    let mut grid = Table::new(&header);
    let lo: Vec<f64> = build.u0_center.iter().map(|c| c - build.u0_radius).collect();
    let step = 2.0 * build.u0_radius / (per_axis - 1) as f64;
    for k in 0..per_axis.pow(n as u32) {
        let mut rest = k;
        let p: Vec<f64> = (0..n)
            .map(|a| {
                let i = rest % per_axis;
                rest /= per_axis;
                lo[a] + step * i as f64
            })
            .collect();
        let mut row: Vec<Cell> = p.iter().map(|&v| Cell::from(v)).collect();
        row.push(build.eval(&p).into());
        row.push(build.in_u0(&p).into());
        grid.push(row);
    }
    run.csv("graph.csv", &grid)?;

    let pr = check_partition(&build, cfg.seed);
    let gr = verify_graph(&build, mesh, &lattice, cfg.seed);
    let tree = &build.tree;
    let mut rep = Manifest::default();
    rep.int("root", root as i64);
    rep.num("alpha_stop", alpha);
    rep.num("S", big_s);
    rep.num("m", tree.m);
    rep.num("k", tree.k);
    rep.num("k0", build.k0);
    rep.int("tree_cubes", tree.tree.len() as i64);
    rep.int("big_angle_cubes", tree.big_angle.len() as i64);
    rep.int("small_scale_cubes", tree.small_scale.len() as i64);
    rep.num("epsilon", build.epsilon);
    rep.num("u0_radius", build.u0_radius);
    rep.num("lip_target", build.lip_target);
    rep.num("max_slope", build.max_slope);
    rep.int("partition_cubes", pr.cubes as i64);
    rep.int("partition_active", pr.active as i64);
    rep.num("d_ratio_min", pr.d_ratio.0);
    rep.num("d_ratio_max", pr.d_ratio.1);
    rep.num("neighbor_ratio_min", pr.neighbor_ratio.0);
    rep.num("neighbor_ratio_max", pr.neighbor_ratio.1);
    rep.num("consistency", pr.consistency);
    rep.num("select_size_min", pr.select_size.0);
    rep.num("select_size_max", pr.select_size.1);
    rep.num("select_distance", pr.select_distance);
    rep.num("witness_bound", pr.witness_bound);
    rep.num("pou_sum_error", pr.pou_sum_error);
    rep.num("pou_gradient", pr.pou_gradient);
    rep.num("pou_gradient_fd", pr.pou_gradient_fd);
    rep.num("graph_max_ratio", gr.max_ratio);
    rep.int("graph_nodes_checked", gr.nodes_checked as i64);
    rep.int("sa_checked", gr.sa_checked as i64);
    rep.int("sa_missed", gr.sa_missed.len() as i64);
    rep.num("lip_u0", gr.lip_u0);
    rep.num("lip_local", gr.lip_local);
    rep.int("far_pairs", gr.far_pairs as i64);
    rep.int("far_violations", gr.far_violations as i64);
    rep.num("far_worst", gr.far_worst);

    if cfg.data.is_some() {
        let f = boundary_data(cfg, mesh)?;
        let transfer = transfer_density(&build, mesh, &lattice, &f, None)?;
        let mut t = Table::new(&["cube", "mass", "area", "value", "mass_defect"]);
        let mut worst = 0.0f64;
        for c in &transfer.cells {
            worst = worst.max(c.mass_defect());
            t.push(vec![c.cube.into(), c.mass.into(), c.area.into(), c.value.into(), c.mass_defect().into()]);
        }
        rep.num("transfer_max_mass_defect", worst);
        run.csv("transfer.csv", &t)?;
    }
    run.text("report.txt", &rep.render())?;
    run.manifest.entries.extend(rep.entries);
    Ok(())
}

fn good_lambda(run: &mut Run<'_>, mesh: &BoundaryMesh) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let params = run_proof_parameters(cfg, mesh.n())?
        .ok_or_else(|| BenchError::invalid("scales", "good-lambda needs delta, p and S"))?;
    let f = boundary_data(cfg, mesh)?;
    let table = good_lambda_probe(mesh, &f, None, &params)?;
    let mut t = Table::new(&["lambda", "numerator", "denominator", "ratio", "nested"]);
    for r in &table.rows {
        t.push(vec![r.lambda.into(), r.numerator.into(), r.denominator.into(), r.ratio.into(), r.nested.into()]);
    }
    run.manifest.num("large_scale", table.large_scale);
    run.manifest.num("max_ratio", table.max_ratio);
    run.manifest.int("lambda_count", table.rows.len() as i64);
    run.csv("good_lambda.csv", &t)
}

/// Error of the study quantity on one sphere mesh.
pub fn study_error(quantity: StudyQuantity, mesh: &BoundaryMesh, seed: u64) -> Result<f64, BenchError> {
    let d = mesh.ambient_dim();
    let radius = mesh.extent();
    let (inside, outside) = gauss_points(d, radius);
    let axis = d - 1;
    match quantity {
        StudyQuantity::Gauss => {
            let ones = vec![1.0; mesh.len()];
            let mut worst = 0.0f64;
            for z in &inside {
                worst = worst.max((double_layer_interior(mesh, &ones, z)? - 1.0).abs());
            }
            for z in &outside {
                worst = worst.max(double_layer_interior(mesh, &ones, z)?.abs());
            }
            Ok(worst)
        }
        StudyQuantity::Dirichlet => {
            let f: Vec<f64> = (0..mesh.len()).map(|i| mesh.node(i)[axis]).collect();
            let res = solve_dirichlet_seeded(mesh, &f, seed)?;
            Ok(inside.iter().map(|z| (res.u(z) - z[axis]).abs()).fold(0.0, f64::max))
        }
        StudyQuantity::Neumann => {
            // x_d / R has outward normal derivative x_d / R on the sphere of radius R.
            let f: Vec<f64> = (0..mesh.len()).map(|i| mesh.node(i)[axis] / radius).collect();
            let res = solve_neumann_seeded(mesh, &f, seed)?;
            let diff: Vec<f64> = inside.iter().map(|z| res.u(z) - z[axis] / radius).collect();
            let c = diff.iter().sum::<f64>() / diff.len() as f64;
            Ok(diff.iter().map(|v| (v - c).abs()).fold(0.0, f64::max))
        }
    }
}

fn convergence_study(run: &mut Run<'_>) -> Result<(), BenchError> {
    let cfg = run.cfg;
    let study = cfg.study.clone().ok_or_else(|| BenchError::invalid("study", "convergence-study needs a study section"))?;
    let DomainSpec::Sphere { dim, radius, .. } = cfg.domain else {
        return Err(BenchError::invalid("domain", "convergence studies run on sphere domains"));
    };
    let m = &mut run.manifest;
    m.text("command", Experiment::ConvergenceStudy.as_str());
    m.text("config_sha256", cfg.hash());
    m.text("seed", cfg.seed.to_string());
    m.text("quantity", study.quantity.as_str());
    let mut t = Table::new(&["level", "nodes", "h", "error", "order"]);
    let mut prev: Option<(f64, f64)> = None;
    for &level in &study.levels {
        let mesh = discretize_sphere(dim, radius, level)?;
        let err = study_error(study.quantity, &mesh, cfg.seed)?;
        let h = mesh.h();
        let order = prev.map(|(h0, e0)| (e0 / err).ln() / (h0 / h).ln());
        t.push(vec![level.into(), mesh.len().into(), h.into(), err.into(), order.into()]);
        let adr = adr_report(&mesh, ADR_SAMPLES, &mut rng::stream(cfg.seed, "adr"));
        let lattice = run_lattice(cfg, &mesh)?;
        m.int(&format!("level_{level}_nodes"), mesh.len() as i64);
        m.num(&format!("level_{level}_error"), err);
        m.num(&format!("level_{level}_adr_lower"), adr.lower);
        m.num(&format!("level_{level}_adr_upper"), adr.upper);
        m.num(&format!("level_{level}_c_d"), lattice.constants.c_d);
        prev = Some((h, err));
    }
    if let Some((_, e)) = prev {
        m.text("final_error", format_f64(e));
    }
    run.csv("convergence.csv", &t)
}
