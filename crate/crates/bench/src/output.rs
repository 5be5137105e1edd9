//! Artifact formats: CSV tables, key-value manifests, binary matrices,
//! mesh dumps and lattice listings.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use potbench_core::dyadic::DyadicLattice;
use potbench_core::geometry::BoundaryMesh;
use potbench_core::linalg::DenseMatrix;
use potbench_core::potentials::{KernelSpec, LayerOperator, MaskSide};

use crate::error::BenchError;

/// 17 significant digits in scientific notation: 0.5 → `5.0000000000000000e-1`.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => format_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i32> for Cell {
    fn from(v: i32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

impl From<Option<usize>> for Cell {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Cell::Empty, Cell::from)
    }
}

/// A rectangular table with a header row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|h| h.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    /// Panics if the row length differs from the header.
    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width does not match header {:?}", self.header);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<(), BenchError> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => BenchError::io(path, e),
        other => BenchError::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::render)).map_err(io)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn text(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.text(key, format_f64(value));
    }

    pub fn int(&mut self, key: &str, value: impl Into<i64>) {
        self.text(key, value.into().to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        std::fs::write(path, self.render()).map_err(|e| BenchError::io(path, e))
    }
}

pub const MATRIX_MAGIC: &[u8; 8] = b"POTBMAT1";

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn mask_text(spec: &KernelSpec) -> String {
    match spec.mask {
        None => "none".into(),
        Some(m) => format!(
            "{} B(0, {})",
            match m.side {
                MaskSide::Inside => "inside",
                MaskSide::Outside => "outside",
            },
            format_f64(m.radius)
        ),
    }
}

/// 32-byte header (magic, rows, cols, spec digest; little endian) followed by
/// the row-major f64 entries, plus a `<path>.txt` metadata sidecar.
pub fn write_matrix(op: &LayerOperator, path: &Path) -> Result<(), BenchError> {
    let m = &op.matrix;
    let digest = op.spec.digest();
    let file = File::create(path).map_err(|e| BenchError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(32 + 8 * m.as_slice().len());
    bytes.extend_from_slice(MATRIX_MAGIC);
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    bytes.extend_from_slice(&digest.to_le_bytes());
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| BenchError::io(path, e))?;
    let mut meta = Manifest::default();
    meta.text("kernel", op.spec.kind.name());
    meta.num("epsilon_low", op.spec.epsilon_low);
    meta.num("epsilon_high", op.spec.epsilon_high);
    meta.text("mask", mask_text(&op.spec));
    meta.int("rows", m.rows() as i64);
    meta.int("cols", m.cols() as i64);
    meta.text("spec_digest", format!("{digest:016x}"));
    meta.num("w_n", op.w_n);
    meta.text("quadrature", op.quadrature_note);
    meta.write(&sidecar(path))
}

/// Reads a matrix written by [`write_matrix`]; returns it with the spec digest.
pub fn read_matrix(path: &Path) -> Result<(DenseMatrix, u64), BenchError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| BenchError::io(path, e))?;
    let malformed = |what: &str| BenchError::io(path, std::io::Error::other(format!("malformed matrix file: {what}")));
    if bytes.len() < 32 || &bytes[..8] != MATRIX_MAGIC {
        return Err(malformed("bad header"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    let (rows, cols, digest) = (word(1) as usize, word(2) as usize, word(3));
    if bytes.len() != 32 + 8 * rows * cols {
        return Err(malformed("length does not match dimensions"));
    }
    let data = bytes[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((DenseMatrix::from_row_major(rows, cols, data), digest))
}

/// Columns: node coordinates, normal coordinates, weight, tag.
pub fn mesh_table(mesh: &BoundaryMesh) -> Table {
    let d = mesh.ambient_dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend((1..=d).map(|k| format!("nu{k}")));
    header.push("weight".into());
    header.push("tag".into());
    let mut t = Table::new(&header);
    for i in 0..mesh.len() {
        let mut row: Vec<Cell> = mesh.node(i).iter().map(|&v| v.into()).collect();
        row.extend(mesh.normal(i).iter().map(|&v| Cell::from(v)));
        row.push(mesh.weight(i).into());
        row.push(mesh.tag(i).as_str().into());
        t.push(row);
    }
    t
}

/// One cube per line: `level corner member_count center_node`, corner as
/// comma-separated grid indices.
pub fn lattice_text(lattice: &DyadicLattice) -> String {
    let mut s = String::from("# level corner members center\n");
    for j in (lattice.j_min..=lattice.j_max).rev() {
        for &q in lattice.level(j) {
            let c = lattice.cube(q);
            let corner: Vec<String> = c.corner.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{} {} {} {}\n", c.level, corner.join(","), c.nodes.len(), c.center));
        }
    }
    s
}

pub fn write_text(text: &str, path: &Path) -> Result<(), BenchError> {
    std::fs::write(path, text).map_err(|e| BenchError::io(path, e))
}
