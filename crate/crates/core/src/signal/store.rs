//! On-disk layout of an ingested dataset: a JSON manifest plus one binary
//! segment file per split side. Windows are rebuilt on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::IngestReport;
use super::{build_windows, DomainTag, LabeledDataset, NormStats, Result, Segment, SignalError, SplitDataset};

pub const DATASET_MANIFEST: &str = "dataset.json";
const SEG_MAGIC: &[u8; 8] = b"TSEG0001";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    domain: DomainTag,
    windowed: bool,
    seg_len: usize,
    norm_stats: NormStats,
    report: IngestReport,
}

fn encode_segments(segments: &[Segment], seg_len: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SEG_MAGIC);
    buf.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seg_len as u32).to_le_bytes());
    for s in segments {
        buf.extend_from_slice(&(s.source_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.source_id.as_bytes());
        buf.extend_from_slice(&(s.index as u32).to_le_bytes());
        buf.extend_from_slice(&s.label.map_or(-1i32, |l| l as i32).to_le_bytes());
        for v in &s.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SignalError::Truncated {
                path: self.path.clone(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_segments(path: &Path, bytes: &[u8]) -> Result<Vec<Segment>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if cur.take(8)? != SEG_MAGIC {
        return Err(SignalError::BadMagic {
            path: cur.path,
            expected: String::from_utf8_lossy(SEG_MAGIC).into_owned(),
        });
    }
    let count = cur.u32()? as usize;
    let seg_len = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = cur.u32()? as usize;
        let source_id = String::from_utf8(cur.take(id_len)?.to_vec())
            .map_err(|_| SignalError::Store(format!("{}: source id is not UTF-8", path.display())))?;
        let index = cur.u32()? as usize;
        let label = cur.u32()? as i32;
        let data: Vec<f32> = cur
            .take(seg_len * 2 * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Segment {
            source_id,
            index,
            data,
            label: (label >= 0).then_some(label as usize),
        });
    }
    if cur.pos != bytes.len() {
        return Err(SignalError::Store(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, ds: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let seg_len = ds.train.seg_len().unwrap_or(0);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_classes: ds.train.num_classes(),
        domain: ds.train.domain(),
        windowed: ds.train.is_windowed(),
        seg_len,
        norm_stats: ds.train.norm_stats().clone(),
        report: ds.report.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SignalError::Store(e.to_string()))?;
    fs::write(dir.join(DATASET_MANIFEST), json)?;
    fs::write(dir.join("train.seg"), encode_segments(ds.train.segments(), seg_len))?;
    fs::write(dir.join("test.seg"), encode_segments(ds.test.segments(), seg_len))?;
    Ok(())
}

fn rebuild(segments: Vec<Segment>, m: &Manifest) -> Result<LabeledDataset> {
    let mut windows = Vec::new();
    if m.windowed {
        let mut start = 0;
        for i in 1..=segments.len() {
            let boundary = i == segments.len()
                || segments[i].source_id != segments[i - 1].source_id
                || segments[i].index != segments[i - 1].index + 1;
            if boundary {
                windows.extend(build_windows(&segments[start..i])?);
                start = i;
            }
        }
    }
    LabeledDataset::new(segments, windows, m.num_classes, m.norm_stats.clone(), m.domain, m.windowed)
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| SignalError::Store(format!("{}: {e}", manifest_path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| SignalError::Store(format!("{}: {e}", manifest_path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(SignalError::Store(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    let read = |name: &str| -> Result<Vec<Segment>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| SignalError::Store(format!("{}: {e}", p.display())))?;
        decode_segments(&p, &bytes)
    };
    let train = rebuild(read("train.seg")?, &m)?;
    let test = rebuild(read("test.seg")?, &m)?;
    Ok(SplitDataset {
        train,
        test,
        report: m.report,
    })
}
