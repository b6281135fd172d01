//! `TRAW` raw recording files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 8    | magic `TRAW0001`                |
//! | 8      | 4    | u32 channel count               |
//! | 12     | 4    | u32 samples per channel         |
//! | 16     | 4    | u32 sample rate (Hz)            |
//! | 20     | 4    | i32 label, -1 when unlabelled   |
//! | 24     | …    | f32 samples, channel-major      |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Recording, Result, SignalError};

pub const TRAW_MAGIC: &[u8; 8] = b"TRAW0001";
pub const TRAW_HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RecordingFormat {
    Traw,
    /// One column per channel with a header row. CSV carries no metadata.
    Csv { sample_rate_hz: u32, label: Option<usize> },
}

fn recording_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_recording(path: &Path, format: RecordingFormat) -> Result<Recording> {
    match format {
        RecordingFormat::Traw => parse_traw(path, &fs::read(path)?),
        RecordingFormat::Csv { sample_rate_hz, label } => {
            let text = fs::read(path)?;
            parse_csv_recording(path, &text[..], sample_rate_hz, label)
        }
    }
}

fn parse_traw(path: &Path, bytes: &[u8]) -> Result<Recording> {
    let p = path.display().to_string();
    if bytes.len() < TRAW_HEADER_LEN {
        return Err(SignalError::Truncated {
            path: p,
            expected: TRAW_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != TRAW_MAGIC {
        return Err(SignalError::BadMagic {
            path: p,
            expected: String::from_utf8_lossy(TRAW_MAGIC).into_owned(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let channels = u32_at(8) as usize;
    let samples = u32_at(12) as usize;
    let rate = u32_at(16);
    let label = i32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    if channels == 0 || samples == 0 || rate == 0 {
        return Err(SignalError::Header {
            path: p,
            detail: format!("channels={channels}, samples={samples}, rate={rate}: all must be positive"),
        });
    }
    if label < -1 {
        return Err(SignalError::Header {
            path: p,
            detail: format!("label {label} (use -1 for unlabelled)"),
        });
    }
    let payload = (channels as u64) * (samples as u64) * 4;
    let expected = TRAW_HEADER_LEN as u64 + payload;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(SignalError::Truncated { path: p, expected, actual });
    }
    if actual > expected {
        return Err(SignalError::CountMismatch {
            path: p,
            expected: payload,
            actual: actual - TRAW_HEADER_LEN as u64,
        });
    }
    let mut data = Vec::with_capacity(channels);
    for c in 0..channels {
        let off = TRAW_HEADER_LEN + c * samples * 4;
        let ch: Vec<f32> = bytes[off..off + samples * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(t) = ch.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite {
                path: p,
                channel: c,
                sample: t,
            });
        }
        data.push(ch);
    }
    Ok(Recording {
        id: recording_id(path),
        sample_rate_hz: rate,
        channels: data,
        label: (label >= 0).then_some(label as usize),
    })
}

pub fn write_traw(path: &Path, rec: &Recording) -> Result<()> {
    rec.validate()?;
    let mut buf = Vec::with_capacity(TRAW_HEADER_LEN + rec.num_channels() * rec.len() * 4);
    buf.extend_from_slice(TRAW_MAGIC);
    buf.extend_from_slice(&(rec.num_channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(rec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    let label = rec.label.map_or(-1, |l| l as i32);
    buf.extend_from_slice(&label.to_le_bytes());
    for ch in &rec.channels {
        for v in ch {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Parses a header-row CSV with one numeric column per channel.
pub fn parse_csv_recording<R: std::io::Read>(
    path: &Path,
    reader: R,
    sample_rate_hz: u32,
    label: Option<usize>,
) -> Result<Recording> {
    let p = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let width = rdr
        .headers()
        .map_err(|e| SignalError::Csv {
            path: p.clone(),
            line: 1,
            detail: e.to_string(),
        })?
        .len();
    let mut channels: Vec<Vec<f32>> = vec![Vec::new(); width];
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| SignalError::Csv {
            path: p.clone(),
            line,
            detail: e.to_string(),
        })?;
        if row.len() != width {
            return Err(SignalError::Csv {
                path: p,
                line,
                detail: format!("{} fields, header has {width}", row.len()),
            });
        }
        for (c, field) in row.iter().enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| SignalError::Csv {
                path: p.clone(),
                line,
                detail: format!("column {c}: `{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(SignalError::NonFinite {
                    path: p,
                    channel: c,
                    sample: i,
                });
            }
            channels[c].push(v);
        }
    }
    Recording::new(recording_id(path), sample_rate_hz, channels, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(len: usize) -> Recording {
        let a: Vec<f32> = (0..len).map(|t| (t as f32 * 0.1).sin()).collect();
        let b: Vec<f32> = (0..len).map(|t| (t as f32 * 0.07).cos() * 2.0).collect();
        Recording::new("fixture", 12_000, vec![a, b], Some(3)).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.traw");
        let rec = sample(2048);
        write_traw(&path, &rec).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 24 + 2 * 2048 * 4);
        let back = load_recording(&path, RecordingFormat::Traw).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.len(), 2048);
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.traw");
        write_traw(&path, &sample(100)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_recording(&path, RecordingFormat::Traw).unwrap_err() {
            SignalError::Truncated { expected, actual, .. } => {
                assert_eq!(expected, 824);
                assert_eq!(actual, 814);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn distinct_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.traw");
        write_traw(&path, &sample(16)).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_recording(&path, RecordingFormat::Traw), Err(SignalError::BadMagic { .. })));

        let mut extra = good.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(load_recording(&path, RecordingFormat::Traw), Err(SignalError::CountMismatch { .. })));

        let mut nan = good.clone();
        nan[24 + 4 * 20..24 + 4 * 21].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        match load_recording(&path, RecordingFormat::Traw).unwrap_err() {
            SignalError::NonFinite { channel, sample, .. } => assert_eq!((channel, sample), (1, 4)),
            e => panic!("unexpected {e}"),
        }

        let mut zero = good;
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &zero).unwrap();
        assert!(matches!(load_recording(&path, RecordingFormat::Traw), Err(SignalError::Header { .. })));
    }

    #[test]
    fn csv_parsing() {
        let text = "acc_x,acc_y,tacho\n1.0,2.0,0\n3.5,-1,0\n";
        let rec = parse_csv_recording(Path::new("run7.csv"), text.as_bytes(), 50_000, Some(2)).unwrap();
        assert_eq!(rec.id, "run7");
        assert_eq!(rec.channels, vec![vec![1.0, 3.5], vec![2.0, -1.0], vec![0.0, 0.0]]);
        let err = parse_csv_recording(Path::new("bad.csv"), "a,b\n1,x\n".as_bytes(), 1, None).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
