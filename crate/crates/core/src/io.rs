//! On-disk formats for embedding matrices and label tables.
//!
//! Embedding files: an 8-byte little-endian header length, a JSON header
//! `{version, n, d, dtype, layout}`, then `n·d` little-endian values in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::{LabelSchema, MultiLabel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const EMBEDDING_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    version: u32,
    n: usize,
    d: usize,
    dtype: Dtype,
    layout: String,
}

/// Train/validation tag of a corpus item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

pub fn encode_embeddings(m: &Matrix, dtype: Dtype) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&EmbeddingHeader {
        version: EMBEDDING_FORMAT_VERSION,
        n: m.rows(),
        d: m.cols(),
        dtype,
        layout: "row-major".into(),
    })?;
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(8 + header.len() + m.as_slice().len() * width);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in m.as_slice() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Matrix> {
    let bad = |what: &str| Error::Format(format!("embedding file: {what}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let header: EmbeddingHeader = serde_json::from_slice(&body[..hlen])?;
    if header.version != EMBEDDING_FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    if header.layout != "row-major" {
        return Err(bad(&format!("unsupported layout {:?}", header.layout)));
    }
    let data = &body[hlen..];
    let count = header.n.checked_mul(header.d).ok_or_else(|| bad("size overflow"))?;
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => {
            if data.len() != count * 4 {
                return Err(bad(&format!("expected {} bytes of f32 data, found {}", count * 4, data.len())));
            }
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        }
        Dtype::F64 => {
            if data.len() != count * 8 {
                return Err(bad(&format!("expected {} bytes of f64 data, found {}", count * 8, data.len())));
            }
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        }
    };
    Matrix::from_vec(header.n, header.d, values)
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_embeddings(m, Dtype::F64)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

/// Label table: `id`, one column per attribute (empty cell = ∅), and an
/// optional `split` column.
pub fn labels_to_csv(schema: &LabelSchema, labels: &[MultiLabel], split: Option<&[Split]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(schema.attributes().iter().map(|a| a.name.clone()));
    if split.is_some() {
        header.push("split".into());
    }
    w.write_record(&header)?;
    for (i, y) in labels.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend((0..schema.len()).map(|a| schema.format_value(a, y.get(a))));
        if let Some(s) = split {
            row.push(s[i].as_str().to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parse a label table; attribute columns are matched by name, so their order
/// is free. Returns the split column when present.
pub fn labels_from_csv(schema: &LabelSchema, text: &str) -> Result<(Vec<MultiLabel>, Option<Vec<Split>>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let mut columns = Vec::with_capacity(schema.len());
    for a in schema.attributes() {
        let col = headers
            .iter()
            .position(|h| h == a.name)
            .ok_or_else(|| Error::Format(format!("label table lacks column {:?}", a.name)))?;
        columns.push(col);
    }
    let split_col = headers.iter().position(|h| h == "split");
    let mut labels = Vec::new();
    let mut splits = split_col.map(|_| Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut y = MultiLabel::missing(schema.len());
        for (a, &c) in columns.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("");
            let v = schema
                .parse_value(a, cell)
                .map_err(|e| Error::Format(format!("label row {}: {e}", line + 1)))?;
            y.set(a, v);
        }
        labels.push(y);
        if let (Some(c), Some(s)) = (split_col, splits.as_mut()) {
            s.push(Split::parse(rec.get(c).unwrap_or(""))?);
        }
    }
    Ok((labels, splits))
}

pub fn write_labels(path: &Path, schema: &LabelSchema, labels: &[MultiLabel], split: Option<&[Split]>) -> Result<()> {
    fs::write(path, labels_to_csv(schema, labels, split)?)?;
    Ok(())
}

pub fn read_labels(path: &Path, schema: &LabelSchema) -> Result<(Vec<MultiLabel>, Option<Vec<Split>>)> {
    labels_from_csv(schema, &fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::LabelValue;

    #[test]
    fn embedding_round_trip() {
        let m = Matrix::from_rows(&[[1.5, -2.0, 1e-300], [f64::MAX, 0.1, 3.0]]).unwrap();
        let bytes = encode_embeddings(&m, Dtype::F64).unwrap();
        assert_eq!(decode_embeddings(&bytes).unwrap(), m);
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["n"], 2);
        assert_eq!(header["layout"], "row-major");

        let small = Matrix::from_rows(&[[0.5, 0.25]]).unwrap();
        let b32 = encode_embeddings(&small, Dtype::F32).unwrap();
        assert_eq!(decode_embeddings(&b32).unwrap(), small);
        assert!(decode_embeddings(&b32[..b32.len() - 1]).is_err());
        assert!(decode_embeddings(&[1, 2]).is_err());
    }

    #[test]
    fn label_table_round_trip() {
        let schema = LabelSchema::voicelens_default(8).unwrap();
        let labels = vec![
            MultiLabel(vec![LabelValue::Class(0), LabelValue::Missing, LabelValue::Value(31.25)]),
            MultiLabel(vec![LabelValue::Missing, LabelValue::Class(1), LabelValue::Missing]),
        ];
        let split = [Split::Train, Split::Val];
        let text = labels_to_csv(&schema, &labels, Some(&split)).unwrap();
        assert_eq!(text, "id,gender,age,snr,split\n0,F,,31.25,train\n1,,adult,,val\n");
        let (back, s) = labels_from_csv(&schema, &text).unwrap();
        assert_eq!(back, labels);
        assert_eq!(s.unwrap(), split.to_vec());
        let reordered = "snr,gender,age\n40,M,child\n";
        let (y, s) = labels_from_csv(&schema, reordered).unwrap();
        assert!(s.is_none());
        assert_eq!(y[0].values(), &[LabelValue::Class(1), LabelValue::Class(0), LabelValue::Value(40.0)]);
        assert!(labels_from_csv(&schema, "gender,age\nF,child\n").is_err());
        assert!(labels_from_csv(&schema, "gender,age,snr\nX,child,30\n").is_err());
    }
}
