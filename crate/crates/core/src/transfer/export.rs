//! Embedding and projection CSVs.
//!
//! Embeddings: `z0,…,z{d-1}` then optional `label`, `score` and `flag`
//! columns (`flag` is ignored on read).
//! Projection: `x,y,label,score`, with empty cells where a value is absent.

use std::io::{Read, Write};

use super::{Result, TransferError};

/// Embeddings read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub scores: Option<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn csv_err(e: csv::Error) -> TransferError {
    TransferError::Schema(e.to_string())
}

pub fn write_embeddings_csv<W: Write>(
    out: W,
    dim: usize,
    vectors: &[f32],
    labels: Option<&[usize]>,
    scores: Option<&[f64]>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|i| format!("z{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    if scores.is_some() {
        header.push("score".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in vectors.chunks_exact(dim).enumerate() {
        let mut rec: Vec<String> = row.iter().map(f32::to_string).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        if let Some(s) = scores {
            rec.push(s[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projection_csv<W: Write>(
    out: W,
    points: &[[f64; 2]],
    labels: Option<&[usize]>,
    scores: Option<&[f64]>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["x", "y", "label", "score"]).map_err(csv_err)?;
    for (i, p) in points.iter().enumerate() {
        w.write_record([
            p[0].to_string(),
            p[1].to_string(),
            labels.map_or(String::new(), |l| l[i].to_string()),
            scores.map_or(String::new(), |s| s[i].to_string()),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses an embeddings CSV, naming the offending column or line on any
/// schema violation.
pub fn read_embeddings_csv<R: Read>(input: R) -> Result<EmbeddingTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let mut dim = 0;
    for (i, name) in header.iter().enumerate() {
        if name == format!("z{i}") {
            dim += 1;
        } else {
            break;
        }
    }
    if dim == 0 {
        return Err(TransferError::Schema(format!(
            "first column must be `z0`, found `{}`",
            header.get(0).unwrap_or("")
        )));
    }
    // optional trailing columns, in this order
    let mut label_col = None;
    let mut score_col = None;
    let mut expected = ["label", "score", "flag"].into_iter();
    for (c, name) in header.iter().enumerate().skip(dim) {
        match expected.by_ref().find(|&e| e == name) {
            Some("label") => label_col = Some(c),
            Some("score") => score_col = Some(c),
            Some(_) => {}
            None => {
                return Err(TransferError::Schema(format!(
                    "column {c} `{name}`: after z0..z{} only `label`, `score`, `flag` may follow, in that order",
                    dim - 1
                )))
            }
        }
    }
    let mut vectors = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut scores = score_col.map(|_| Vec::new());
    for (n, rec) in r.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(TransferError::Schema(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        for (c, field) in rec.iter().take(dim).enumerate() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| TransferError::Schema(format!("line {line}, column `z{c}`: `{field}` is not a number")))?;
            vectors.push(v);
        }
        if let (Some(c), Some(l)) = (label_col, labels.as_mut()) {
            let field = &rec[c];
            l.push(field.trim().parse().map_err(|_| {
                TransferError::Schema(format!("line {line}, column `label`: `{field}` is not a class index"))
            })?);
        }
        if let (Some(c), Some(s)) = (score_col, scores.as_mut()) {
            let field = &rec[c];
            s.push(
                field
                    .trim()
                    .parse()
                    .map_err(|_| TransferError::Schema(format!("line {line}, column `score`: `{field}` is not a number")))?,
            );
        }
    }
    Ok(EmbeddingTable {
        dim,
        vectors,
        labels,
        scores,
    })
}
