//! Binary parameter files and embedding CSVs.
//!
//! Parameter layout: `b"GRAE"`, version as u32 LE, then blocks, each a u64 LE
//! element count followed by that many f32 LE values. Block 0 holds the dims
//! `[d, heads, layers, t_len]`; the rest follow [`ParamSet::blocks`] order.

use std::io::{Read, Write};

use crate::linalg::Mat;
use crate::scalar::Scalar;

use super::params::{block_shapes, GraphRaeDims, GraphRaeParams};
use super::{GraphRaeError, SceneEmbedding};

#[cfg(doc)]
use super::params::ParamSet;

pub const PARAMS_MAGIC: &[u8; 4] = b"GRAE";
pub const PARAMS_VERSION: u32 = 1;

fn write_block<W: Write>(w: &mut W, values: impl ExactSizeIterator<Item = f32>) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R, what: &str) -> Result<Vec<f32>, GraphRaeError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| GraphRaeError::Format(format!("truncated before {what}")))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(GraphRaeError::Format(format!("{what} claims {len} values")));
    }
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf).map_err(|_| GraphRaeError::Format(format!("truncated inside {what}")))?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_params<T: Scalar, W: Write>(p: &GraphRaeParams<T>, mut w: W) -> Result<(), GraphRaeError> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    let d = p.dims;
    write_block(&mut w, [d.d, d.heads, d.layers, d.t_len].into_iter().map(|x| x as f32))?;
    for (_, m) in p.blocks() {
        write_block(&mut w, m.as_slice().iter().map(|v| v.as_f64() as f32))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<T: Scalar, R: Read>(mut r: R) -> Result<GraphRaeParams<T>, GraphRaeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| GraphRaeError::Format("missing magic".into()))?;
    if &magic != PARAMS_MAGIC {
        return Err(GraphRaeError::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|_| GraphRaeError::Format("missing version".into()))?;
    let version = u32::from_le_bytes(version);
    if version != PARAMS_VERSION {
        return Err(GraphRaeError::Format(format!("unsupported version {version}")));
    }
    let dims = read_block(&mut r, "dims")?;
    if dims.len() != 4 || dims.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(GraphRaeError::Format(format!("bad dims block {dims:?}")));
    }
    let dims = GraphRaeDims { d: dims[0] as usize, heads: dims[1] as usize, layers: dims[2] as usize, t_len: dims[3] as usize };
    dims.validate().map_err(GraphRaeError::Format)?;
    let shapes = block_shapes(&dims);
    let mut blocks = Vec::new();
    for (name, &(rows, cols)) in shapes.blocks() {
        let values = read_block(&mut r, &name)?;
        if values.len() != rows * cols {
            return Err(GraphRaeError::Format(format!("{name} has {} values, expected {}", values.len(), rows * cols)));
        }
        let m = Mat::from_vec(rows, cols, values.into_iter().map(|v| T::lit(v as f64)).collect())
            .expect("length checked");
        if !m.is_finite() {
            return Err(GraphRaeError::Format(format!("{name} holds non-finite values")));
        }
        blocks.push(m);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(GraphRaeError::Format(format!("{} trailing bytes", rest.len())));
    }
    GraphRaeParams::from_blocks(dims, blocks).map_err(GraphRaeError::Format)
}

/// Writes `token_id, e0, …, e{d-1}` rows with a header.
pub fn write_embeddings_csv<T: Scalar, W: Write>(
    ids: &[&str],
    embeddings: &[SceneEmbedding<T>],
    w: W,
) -> Result<(), GraphRaeError> {
    if ids.len() != embeddings.len() {
        return Err(GraphRaeError::Dimension(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
    }
    let d = embeddings.first().map_or(0, |e| e.v.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["token_id".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    out.write_record(&header)?;
    for (id, e) in ids.iter().zip(embeddings) {
        if e.v.len() != d {
            return Err(GraphRaeError::Dimension(format!("embedding of {id} has width {}", e.v.len())));
        }
        let mut rec = vec![id.to_string()];
        rec.extend(e.v.iter().map(|v| format!("{:e}", v.as_f64())));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<T: Scalar, R: Read>(r: R) -> Result<Vec<(String, SceneEmbedding<T>)>, GraphRaeError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).ok_or_else(|| GraphRaeError::Format(format!("row {} is empty", i + 1)))?;
        let v = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map(T::lit))
            .collect::<Result<Vec<T>, _>>()
            .map_err(|e| GraphRaeError::Format(format!("row {}: {e}", i + 1)))?;
        out.push((id.to_string(), SceneEmbedding { v }));
    }
    Ok(out)
}
