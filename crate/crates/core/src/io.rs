//! On-disk formats.
//!
//! Model file: magic `ATTB`, little-endian u16 version, then the variable
//! count, bond bound, root edge, edges with update ages, the central
//! weight, the optional leaf-side isometry, and every node tensor as shape
//! plus row-major little-endian f64 data. All maps are written in sorted
//! order, so save/load/save is byte-identical.
//!
//! Batch text: first line `n m`, then `m` lines of `n` space-separated 0/1
//! digits, LF endings.
//!
//! Polytree spec: first line `n`, then one `parent child` line per edge,
//! then `r <value>`.
//!
//! Report CSV: header `iter,train_nll,test_nll`; iterations without a test
//! evaluation leave the field empty.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::batch::DataBatch;
use crate::data::BayesPolytree;
use crate::error::DataError;
use crate::model::{NodeTensor, TensorTreeModel};
use crate::tensor::DenseTensor;
use crate::topology::{Edge, NodeId, TreeTopology};
use crate::train::TrainReport;

pub const MODEL_MAGIC: [u8; 4] = *b"ATTB";
pub const MODEL_VERSION: u16 = 1;

struct W<'a, T: Write>(&'a mut T);

impl<T: Write> W<'_, T> {
    fn u16(&mut self, v: u16) -> Result<(), DataError> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u32(&mut self, v: u32) -> Result<(), DataError> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<(), DataError> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<(), DataError> {
        for v in vs {
            self.0.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn edge(&mut self, e: Edge) -> Result<(), DataError> {
        let (a, b) = e.endpoints();
        self.u32(a)?;
        self.u32(b)
    }
}

struct R<T: Read>(T);

impl<T: Read> R<T> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| DataError::Format(format!("truncated model file at {what}")))?;
        Ok(buf)
    }
    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.bytes::<2>(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }
    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f64::from_le_bytes(self.bytes::<8>(what)?));
        }
        Ok(out)
    }
    fn edge(&mut self, what: &str) -> Result<Edge, DataError> {
        let a = self.u32(what)?;
        let b = self.u32(what)?;
        Ok(Edge::new(a, b))
    }
}

pub fn write_model<T: Write>(out: &mut T, model: &TensorTreeModel) -> Result<(), DataError> {
    let mut w = W(out);
    w.0.write_all(&MODEL_MAGIC)?;
    w.u16(MODEL_VERSION)?;
    let topo = model.topology();
    w.u32(topo.leaf_count() as u32)?;
    w.u32(model.chi() as u32)?;
    w.edge(topo.root_edge())?;
    let edges = topo.edges();
    w.u32(edges.len() as u32)?;
    for e in &edges {
        w.edge(*e)?;
        w.u64(topo.edge_age(*e).unwrap_or(0))?;
    }
    w.u32(model.lambda().len() as u32)?;
    w.f64s(model.lambda())?;
    match model.root_leaf_isometry() {
        Some(p) => {
            w.u32(1)?;
            w.u32(p.shape()[0] as u32)?;
            w.u32(p.shape()[1] as u32)?;
            w.f64s(p.data())?;
        }
        None => w.u32(0)?,
    }
    w.u32(topo.internal_nodes().count() as u32)?;
    for node in topo.internal_nodes() {
        let nt = model.node_tensor(node).expect("internal node tensor");
        w.u32(node)?;
        for leg in &nt.legs {
            w.edge(*leg)?;
        }
        for &d in nt.tensor.shape() {
            w.u32(d as u32)?;
        }
        w.f64s(nt.tensor.data())?;
    }
    Ok(())
}

pub fn read_model<T: Read>(input: T) -> Result<TensorTreeModel, DataError> {
    let mut r = R(input);
    let magic = r.bytes::<4>("magic")?;
    if magic != MODEL_MAGIC {
        return Err(DataError::Format(format!(
            "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(DataError::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let n = r.u32("variable count")? as usize;
    let chi = r.u32("bond bound")? as usize;
    let root = r.edge("root edge")?;
    let edge_count = r.u32("edge count")? as usize;
    let mut edges = Vec::with_capacity(edge_count);
    let mut ages: BTreeMap<Edge, u64> = BTreeMap::new();
    for _ in 0..edge_count {
        let e = r.edge("edge")?;
        let age = r.u64("edge age")?;
        edges.push(e);
        ages.insert(e, age);
    }
    let topology = TreeTopology::from_edges(n, &edges, root)
        .map_err(|e| DataError::Format(format!("invalid topology: {e}")))?;
    let lam_len = r.u32("weight length")? as usize;
    if lam_len == 0 || lam_len > chi.max(2) {
        return Err(DataError::Format(format!(
            "central weight length {lam_len} out of range"
        )));
    }
    let lambda = r.f64s(lam_len, "central weight")?;
    let leaf_flag = r.u32("leaf isometry flag")?;
    let root_leaf_isometry = match leaf_flag {
        0 => None,
        1 => {
            let rows = r.u32("leaf isometry rows")? as usize;
            let cols = r.u32("leaf isometry cols")? as usize;
            if rows != 2 || cols == 0 || cols > 2 {
                return Err(DataError::Format(format!(
                    "leaf isometry shape {rows}x{cols} out of range"
                )));
            }
            let data = r.f64s(rows * cols, "leaf isometry data")?;
            Some(
                DenseTensor::new(vec![rows, cols], data)
                    .map_err(|e| DataError::Format(e.to_string()))?,
            )
        }
        other => {
            return Err(DataError::Format(format!(
                "bad leaf isometry flag {other}"
            )))
        }
    };
    let tensor_count = r.u32("tensor count")? as usize;
    if tensor_count != n.saturating_sub(2) {
        return Err(DataError::Format(format!(
            "expected {} node tensors, file declares {tensor_count}",
            n.saturating_sub(2)
        )));
    }
    let mut tensors: BTreeMap<NodeId, NodeTensor> = BTreeMap::new();
    for _ in 0..tensor_count {
        let node = r.u32("node id")?;
        let legs = [
            r.edge("leg")?,
            r.edge("leg")?,
            r.edge("leg")?,
        ];
        let shape = [
            r.u32("extent")? as usize,
            r.u32("extent")? as usize,
            r.u32("extent")? as usize,
        ];
        for (leg, &d) in legs.iter().zip(&shape) {
            if !topology.has_edge(*leg) {
                return Err(DataError::Format(format!(
                    "node {node} references unknown edge {leg}"
                )));
            }
            if d == 0 || d > chi.max(2) {
                return Err(DataError::Format(format!(
                    "node {node} extent {d} out of range"
                )));
            }
        }
        let len = shape.iter().product();
        let data = r.f64s(len, "tensor data")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Format(format!(
                "node {node} contains non-finite values"
            )));
        }
        let tensor = DenseTensor::new(shape.to_vec(), data)
            .map_err(|e| DataError::Format(e.to_string()))?;
        tensors.insert(
            node,
            NodeTensor {
                legs: legs.to_vec(),
                tensor,
            },
        );
    }
    let mut trailing = [0u8; 1];
    if r.0.read(&mut trailing)? != 0 {
        return Err(DataError::Format("trailing bytes after model data".into()));
    }
    let mut topology = topology;
    for (e, age) in ages {
        topology.set_edge_age(e, age);
    }
    let model = TensorTreeModel {
        topology,
        tensors,
        lambda,
        root_leaf_isometry,
        chi,
    };
    model
        .verify_canonical(1e-6)
        .map_err(|e| DataError::Format(format!("model fails canonical checks: {e}")))?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &TensorTreeModel) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TensorTreeModel, DataError> {
    read_model(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_batch<T: Write>(out: &mut T, batch: &DataBatch) -> Result<(), DataError> {
    writeln!(out, "{} {}", batch.n(), batch.len())?;
    let mut line = String::with_capacity(batch.n() * 2);
    for row in batch.rows() {
        line.clear();
        for (i, &b) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push(if b == 0 { '0' } else { '1' });
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_batch<T: BufRead>(input: T) -> Result<DataBatch, DataError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Format("empty batch file".into()))??;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .ok_or_else(|| DataError::Format("missing variable count in header".into()))?
        .parse()
        .map_err(|_| DataError::Format(format!("bad header: {header:?}")))?;
    let m: usize = parts
        .next()
        .ok_or_else(|| DataError::Format("missing row count in header".into()))?
        .parse()
        .map_err(|_| DataError::Format(format!("bad header: {header:?}")))?;
    if parts.next().is_some() {
        return Err(DataError::Format(format!(
            "header has extra tokens: {header:?}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(DataError::Format("batch dimensions must be positive".into()));
    }
    let mut data = Vec::with_capacity(n * m);
    let mut rows = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > m {
            return Err(DataError::Format(format!(
                "more than the declared {m} rows"
            )));
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let bit = match tok {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(DataError::Format(format!(
                        "row {rows}: entry {other:?} is not 0 or 1"
                    )))
                }
            };
            data.push(bit);
            count += 1;
        }
        if count != n {
            return Err(DataError::Format(format!(
                "row {rows} has {count} entries, expected {n}"
            )));
        }
    }
    if rows != m {
        return Err(DataError::Format(format!(
            "declared {m} rows but found {rows}"
        )));
    }
    DataBatch::new(n, data)
}

pub fn save_batch(path: &Path, batch: &DataBatch) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write_batch(&mut out, batch)?;
    out.flush()?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<DataBatch, DataError> {
    read_batch(BufReader::new(std::fs::File::open(path)?))
}

pub fn read_polytree_spec<T: BufRead>(input: T) -> Result<BayesPolytree, DataError> {
    let mut n: Option<usize> = None;
    let mut r: Option<f64> = None;
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if n.is_none() {
            n = Some(line.parse().map_err(|_| {
                DataError::Format(format!("first line must be the variable count, got {line:?}"))
            })?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("r ") {
            if r.is_some() {
                return Err(DataError::Format("duplicate r line".into()));
            }
            r = Some(rest.trim().parse().map_err(|_| {
                DataError::Format(format!("bad correlation rate {rest:?}"))
            })?);
            continue;
        }
        if r.is_some() {
            return Err(DataError::Format(format!(
                "edge line {line:?} after the r line"
            )));
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u32, DataError> {
            tok.ok_or_else(|| DataError::Format(format!("incomplete edge line {line:?}")))?
                .parse()
                .map_err(|_| DataError::Format(format!("bad edge line {line:?}")))
        };
        let p = parse(parts.next())?;
        let c = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(DataError::Format(format!(
                "edge line {line:?} has extra tokens"
            )));
        }
        edges.push((p, c));
    }
    let n = n.ok_or_else(|| DataError::Format("empty polytree spec".into()))?;
    let r = r.ok_or_else(|| DataError::Format("missing r line".into()))?;
    BayesPolytree::new(n, edges, r)
}

pub fn load_polytree_spec(path: &Path) -> Result<BayesPolytree, DataError> {
    read_polytree_spec(BufReader::new(std::fs::File::open(path)?))
}

/// CSV rows `iter,train_nll,test_nll` with the test column filled only at
/// iterations where it was evaluated.
pub fn write_report_csv<T: Write>(out: &mut T, report: &TrainReport) -> Result<(), DataError> {
    writeln!(out, "iter,train_nll,test_nll")?;
    let test: BTreeMap<u64, f64> = report.test_nll_history.iter().copied().collect();
    for (i, nll) in report.nll_history.iter().enumerate() {
        let iter = (i + 1) as u64;
        match test.get(&iter) {
            Some(t) => writeln!(out, "{iter},{nll:.9},{t:.9}")?,
            None => writeln!(out, "{iter},{nll:.9},")?,
        }
    }
    Ok(())
}
