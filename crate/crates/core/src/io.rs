//! On-disk formats.
//!
//! A matrix block is `[u64 rows][u64 cols][f64; rows*cols]`, little-endian,
//! row-major. A parametrix file is `[u64 len][JSON header][block]`. A
//! functional file is JSON with kernels stored once and referenced by index.

use crate::background::LatticeSpace;
use crate::error::{Error, Result};
use crate::functional::{Edge, FieldSpace, PolynomialFunctional, Term, Vertex};
use crate::parametrix::{Parametrix, ParametrixHeader};
use crate::C64;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub fn write_block(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_block(r: &mut impl Read) -> Result<DMatrix<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|l| *l <= 1 << 28)
        .ok_or_else(|| Error::Invalid("matrix block is too large".into()))?;
    let mut buf = vec![0u8; 8 * len];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

/// Columns with a header row; numbers use the shortest round-trip form.
pub fn write_csv<W: Write + ?Sized>(w: &mut W, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_parametrix(path: &Path, p: &Parametrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_vec(&p.header())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    write_block(&mut f, &p.kernel)?;
    f.flush()?;
    Ok(())
}

/// Reads a parametrix file; the lattice must carry the recorded background.
pub fn read_parametrix(path: &Path, lattice: &LatticeSpace) -> Result<Parametrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let len = read_u64(&mut f)? as usize;
    if len > 1 << 20 {
        return Err(Error::Invalid("parametrix header is too large".into()));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    let header: ParametrixHeader = serde_json::from_slice(&buf)?;
    if header.background_id != lattice.background_id {
        return Err(Error::BackgroundMismatch { left: header.background_id, right: lattice.background_id.clone() });
    }
    let kernel = read_block(&mut f)?;
    let mut p = Parametrix::from_kernel(kernel, lattice, Some(header.nu))?;
    p.order = header.order;
    p.is_exact_green = header.is_exact_green;
    Ok(p)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VertexRecord {
    weight_re: Vec<f64>,
    weight_im: Vec<f64>,
    legs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    a: usize,
    b: usize,
    kernel: usize,
    power: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRecord {
    coeff: [f64; 2],
    vertices: Vec<VertexRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunctionalRecord {
    background_id: String,
    sites: usize,
    jet_order: usize,
    /// Row-major `n×n` kernels.
    kernels: Vec<Vec<f64>>,
    terms: Vec<TermRecord>,
}

pub fn functional_to_json(f: &PolynomialFunctional) -> Result<String> {
    let mut kernels: Vec<Arc<DMatrix<f64>>> = Vec::new();
    let mut terms = Vec::new();
    for t in f.terms() {
        let mut edges = Vec::new();
        for e in &t.edges {
            let idx = match kernels.iter().position(|k| Arc::ptr_eq(k, &e.kernel)) {
                Some(i) => i,
                None => {
                    kernels.push(e.kernel.clone());
                    kernels.len() - 1
                }
            };
            edges.push(EdgeRecord { a: e.a, b: e.b, kernel: idx, power: e.power });
        }
        let vertices = t
            .vertices
            .iter()
            .map(|v| VertexRecord {
                weight_re: v.weight.iter().map(|c| c.re).collect(),
                weight_im: v.weight.iter().map(|c| c.im).collect(),
                legs: v.legs.clone(),
            })
            .collect();
        terms.push(TermRecord { coeff: [t.coeff.re, t.coeff.im], vertices, edges });
    }
    let rec = FunctionalRecord {
        background_id: f.lattice().background_id.clone(),
        sites: f.space().n(),
        jet_order: f.space().jet_order,
        kernels: kernels.iter().map(|k| k.transpose().as_slice().to_vec()).collect(),
        terms,
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn functional_from_json(s: &str, lattice: &LatticeSpace) -> Result<PolynomialFunctional> {
    let rec: FunctionalRecord = serde_json::from_str(s)?;
    if rec.background_id != lattice.background_id {
        return Err(Error::BackgroundMismatch { left: rec.background_id, right: lattice.background_id.clone() });
    }
    let n = lattice.n();
    if rec.sites != n {
        return Err(Error::LatticeMismatch(format!("file has {} sites, lattice has {n}", rec.sites)));
    }
    let kernels = rec
        .kernels
        .iter()
        .map(|k| {
            if k.len() != n * n {
                return Err(Error::LatticeMismatch("kernel size does not match the lattice".into()));
            }
            Ok(Arc::new(DMatrix::from_row_slice(n, n, k)))
        })
        .collect::<Result<Vec<_>>>()?;
    let space = FieldSpace::new(lattice.clone(), rec.jet_order)?;
    let mut terms = Vec::new();
    for t in rec.terms {
        let vertices = t
            .vertices
            .into_iter()
            .map(|v| {
                if v.weight_re.len() != v.weight_im.len() {
                    return Err(Error::Invalid("vertex weight parts differ in length".into()));
                }
                let w = v.weight_re.iter().zip(&v.weight_im).map(|(a, b)| C64::new(*a, *b)).collect();
                Ok(Vertex { weight: Arc::new(w), legs: v.legs })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = t
            .edges
            .into_iter()
            .map(|e| {
                let kernel = kernels
                    .get(e.kernel)
                    .cloned()
                    .ok_or_else(|| Error::Invalid("edge refers to a missing kernel".into()))?;
                Ok(Edge { a: e.a, b: e.b, kernel, power: e.power })
            })
            .collect::<Result<Vec<_>>>()?;
        terms.push(Term { coeff: C64::new(t.coeff[0], t.coeff[1]), vertices, edges });
    }
    PolynomialFunctional::from_terms(space, terms)
}
