//! Recordings, overlapping segmentation and teacher windows.
//!
//! A [`Recording`] is cut into fixed-length two-channel [`Segment`]s with a
//! fractional overlap. Five consecutive segments of one recording form a
//! [`TemporalWindow`] labelled by its central segment.

mod normalize;
mod split;
mod store;
mod synth;
mod traw;

pub use normalize::{fit_normalizer, NormStats, SegmentKey, TwoChannel};
pub use split::{prepare_dataset, IngestReport, split_dataset, DomainTag, LabeledDataset, PipelineConfig, Split, SplitDataset};
pub use store::{load_dataset, save_dataset, DATASET_MANIFEST};
pub use synth::{synth_generate, SynthSpec};
pub use traw::{load_recording, parse_csv_recording, write_traw, RecordingFormat, TRAW_HEADER_LEN, TRAW_MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channels per segment fed to every model.
pub const CHANNELS: usize = 2;
/// Segments per teacher window (two past, centre, two future).
pub const WINDOW_SEGMENTS: usize = 5;
pub const DEFAULT_SEG_LEN: usize = 1024;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("recording `{id}` has {found} channel(s); at least {needed} are required")]
    ChannelCount { id: String, found: usize, needed: usize },
    #[error("recording `{id}`: channel index {index} out of range ({available} channels)")]
    ChannelIndex { id: String, index: usize, available: usize },
    #[error("recording `{id}` has {len} samples, shorter than one {seg_len}-sample segment: no segments produced")]
    TooShort { id: String, len: usize, seg_len: usize },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("overlap fraction {0} must lie in [0, 1)")]
    InvalidOverlap(f64),
    #[error("window input mixes recordings `{first}` and `{other}`")]
    MixedSources { first: String, other: String },
    #[error("segments of `{id}` are not consecutive: expected index {expected}, found {found}")]
    NonConsecutive { id: String, expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("test set is empty (train fraction {0})")]
    EmptyTestSet(f64),
    #[error("train fraction {0} must lie in (0, 1]")]
    InvalidTrainFraction(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated { path: String, expected: u64, actual: u64 },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{path}: header declares {expected} bytes of samples but file holds {actual}")]
    CountMismatch { path: String, expected: u64, actual: u64 },
    #[error("{path}: non-finite sample at channel {channel}, index {sample}")]
    NonFinite { path: String, channel: usize, sample: usize },
    #[error("{path}: CSV line {line}: {detail}")]
    Csv { path: String, line: usize, detail: String },
    #[error("dataset store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

/// A raw multi-channel acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub sample_rate_hz: u32,
    /// `channels[c][t]`
    pub channels: Vec<Vec<f32>>,
    pub label: Option<usize>,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        sample_rate_hz: u32,
        channels: Vec<Vec<f32>>,
        label: Option<usize>,
    ) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            sample_rate_hz,
            channels,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(SignalError::InvalidRecording(format!("`{}`: sample rate must be positive", self.id)));
        }
        let Some(first) = self.channels.first() else {
            return Err(SignalError::InvalidRecording(format!("`{}`: no channels", self.id)));
        };
        if first.is_empty() {
            return Err(SignalError::InvalidRecording(format!("`{}`: no samples", self.id)));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.len() != first.len() {
                return Err(SignalError::InvalidRecording(format!(
                    "`{}`: channel {c} has {} samples, channel 0 has {}",
                    self.id,
                    ch.len(),
                    first.len()
                )));
            }
            if let Some(t) = ch.iter().position(|v| !v.is_finite()) {
                return Err(SignalError::InvalidRecording(format!(
                    "`{}`: non-finite sample at channel {c}, index {t}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One two-channel slice, stored row-major as `[channel][sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub source_id: String,
    pub index: usize,
    pub data: Vec<f32>,
    pub label: Option<usize>,
}

impl Segment {
    pub fn seg_len(&self) -> usize {
        self.data.len() / CHANNELS
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.seg_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn key(&self) -> SegmentKey {
        SegmentKey {
            source_id: self.source_id.clone(),
            index: self.index,
        }
    }
}

/// Five consecutive segments concatenated along time, labelled by the centre.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWindow {
    pub source_id: String,
    pub center_index: usize,
    pub data: Vec<f32>,
    pub label: Option<usize>,
}

impl TemporalWindow {
    pub fn window_len(&self) -> usize {
        self.data.len() / CHANNELS
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.window_len();
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub seg_len: usize,
    pub overlap_fraction: f64,
    /// Source channels used as the two model inputs.
    pub channels: [usize; 2],
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            seg_len: DEFAULT_SEG_LEN,
            overlap_fraction: 0.5,
            channels: [0, 1],
        }
    }
}

impl SegmentConfig {
    pub fn hop(&self) -> Result<usize> {
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(SignalError::InvalidOverlap(self.overlap_fraction));
        }
        Ok(((self.seg_len as f64 * (1.0 - self.overlap_fraction)).round() as usize).max(1))
    }

    /// Segments produced from `len` samples: `floor((len - seg_len) / hop) + 1`.
    pub fn segment_count(&self, len: usize) -> Result<usize> {
        let hop = self.hop()?;
        Ok(if len < self.seg_len { 0 } else { (len - self.seg_len) / hop + 1 })
    }
}

/// Windows obtainable from `n` consecutive segments.
pub fn window_count(n: usize) -> usize {
    n.saturating_sub(WINDOW_SEGMENTS - 1)
}

/// Cuts the configured two channels of `rec` into overlapping segments.
/// Segment `j` covers samples `[j*hop, j*hop + seg_len)`.
pub fn segment_recording(rec: &Recording, cfg: &SegmentConfig) -> Result<Vec<Segment>> {
    if rec.num_channels() < CHANNELS {
        return Err(SignalError::ChannelCount {
            id: rec.id.clone(),
            found: rec.num_channels(),
            needed: CHANNELS,
        });
    }
    for &index in &cfg.channels {
        if index >= rec.num_channels() {
            return Err(SignalError::ChannelIndex {
                id: rec.id.clone(),
                index,
                available: rec.num_channels(),
            });
        }
    }
    let hop = cfg.hop()?;
    let len = rec.len();
    if cfg.seg_len == 0 || len < cfg.seg_len {
        return Err(SignalError::TooShort {
            id: rec.id.clone(),
            len,
            seg_len: cfg.seg_len,
        });
    }
    let count = cfg.segment_count(len)?;
    let segments = (0..count)
        .map(|j| {
            let start = j * hop;
            let mut data = Vec::with_capacity(CHANNELS * cfg.seg_len);
            for &c in &cfg.channels {
                data.extend_from_slice(&rec.channels[c][start..start + cfg.seg_len]);
            }
            Segment {
                source_id: rec.id.clone(),
                index: j,
                data,
                label: rec.label,
            }
        })
        .collect();
    Ok(segments)
}

/// Builds one window per centre index `i` with `2 <= i <= N - 3`.
pub fn build_windows(segments: &[Segment]) -> Result<Vec<TemporalWindow>> {
    let Some(first) = segments.first() else {
        return Ok(Vec::new());
    };
    for (offset, s) in segments.iter().enumerate() {
        if s.source_id != first.source_id {
            return Err(SignalError::MixedSources {
                first: first.source_id.clone(),
                other: s.source_id.clone(),
            });
        }
        if s.index != first.index + offset {
            return Err(SignalError::NonConsecutive {
                id: s.source_id.clone(),
                expected: first.index + offset,
                found: s.index,
            });
        }
        if s.data.len() != first.data.len() {
            return Err(SignalError::InvalidRecording(format!(
                "`{}`: segment {} has {} values, expected {}",
                s.source_id,
                s.index,
                s.data.len(),
                first.data.len()
            )));
        }
    }
    let seg_len = first.seg_len();
    let half = WINDOW_SEGMENTS / 2;
    let windows = segments
        .windows(WINDOW_SEGMENTS)
        .map(|group| {
            let mut data = Vec::with_capacity(CHANNELS * WINDOW_SEGMENTS * seg_len);
            for c in 0..CHANNELS {
                for s in group {
                    data.extend_from_slice(s.channel(c));
                }
            }
            let center = &group[half];
            TemporalWindow {
                source_id: center.source_id.clone(),
                center_index: center.index,
                data,
                label: center.label,
            }
        })
        .collect();
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(len: usize, channels: usize) -> Recording {
        let chans = (0..channels)
            .map(|c| (0..len).map(|t| (t + c * 1_000_000) as f32).collect())
            .collect();
        Recording::new("ramp", 25_000, chans, Some(1)).unwrap()
    }

    /// Independent enumerator: every start position stepping by hop that fits.
    fn brute_force_starts(len: usize, seg_len: usize, hop: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut s = 0;
        while s + seg_len <= len {
            starts.push(s);
            s += hop;
        }
        starts
    }

    #[test]
    fn exact_fit_gives_one_segment() {
        let segs = segment_recording(&ramp(1024, 2), &SegmentConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].label, Some(1));
    }

    #[test]
    fn count_examples_match_enumerator() {
        let cfg = SegmentConfig::default();
        for (len, expected) in [(250_000, 487), (25_000, 47)] {
            assert_eq!(brute_force_starts(len, 1024, 512).len(), expected);
            assert_eq!(cfg.segment_count(len).unwrap(), expected);
        }
        let segs = segment_recording(&ramp(25_000, 2), &cfg).unwrap();
        assert_eq!(segs.len(), 47);
        let starts = brute_force_starts(25_000, 1024, 512);
        for (s, start) in segs.iter().zip(starts) {
            assert_eq!(s.channel(0)[0], start as f32);
        }
    }

    #[test]
    fn too_few_channels_or_samples() {
        let err = segment_recording(&ramp(2048, 1), &SegmentConfig::default()).unwrap_err();
        assert!(matches!(err, SignalError::ChannelCount { found: 1, .. }));
        let err = segment_recording(&ramp(1000, 2), &SegmentConfig::default()).unwrap_err();
        assert!(matches!(err, SignalError::TooShort { len: 1000, .. }));
    }

    #[test]
    fn channel_selection_override() {
        let cfg = SegmentConfig {
            channels: [2, 0],
            ..SegmentConfig::default()
        };
        let segs = segment_recording(&ramp(1024, 3), &cfg).unwrap();
        assert_eq!(segs[0].channel(0)[0], 2_000_000.0);
        assert_eq!(segs[0].channel(1)[0], 0.0);
    }

    #[test]
    fn window_counts() {
        let cfg = SegmentConfig::default();
        let segs = segment_recording(&ramp(1024 + 4 * 512, 2), &cfg).unwrap();
        assert_eq!(segs.len(), 5);
        let w = build_windows(&segs).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].center_index, 2);
        assert!(build_windows(&segs[..4]).unwrap().is_empty());

        let segs = segment_recording(&ramp(250_000, 2), &cfg).unwrap();
        let w = build_windows(&segs).unwrap();
        let valid_centres = (0..segs.len()).filter(|&i| i >= 2 && i + 2 < segs.len()).count();
        assert_eq!(valid_centres, 483);
        assert_eq!(w.len(), 483);
    }

    #[test]
    fn window_rejects_bad_input() {
        let cfg = SegmentConfig::default();
        let mut segs = segment_recording(&ramp(4096, 2), &cfg).unwrap();
        segs.remove(3);
        assert!(matches!(build_windows(&segs), Err(SignalError::NonConsecutive { .. })));
        let mut segs = segment_recording(&ramp(4096, 2), &cfg).unwrap();
        segs[2].source_id = "other".into();
        assert!(matches!(build_windows(&segs), Err(SignalError::MixedSources { .. })));
    }

    #[test]
    fn window_layout_and_label() {
        let cfg = SegmentConfig::default();
        let mut segs = segment_recording(&ramp(8192, 2), &cfg).unwrap();
        for (i, s) in segs.iter_mut().enumerate() {
            s.label = Some(i % 3);
        }
        let windows = build_windows(&segs).unwrap();
        for w in &windows {
            let i = w.center_index;
            assert_eq!(w.label, segs[i].label);
            for c in 0..CHANNELS {
                let row = w.channel(c);
                for (slot, seg) in segs[i - 2..=i + 2].iter().enumerate() {
                    assert_eq!(&row[slot * 1024..(slot + 1) * 1024], seg.channel(c));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn count_laws(len in 1usize..40_000) {
            let cfg = SegmentConfig::default();
            let expected = brute_force_starts(len, 1024, 512).len();
            prop_assert_eq!(cfg.segment_count(len).unwrap(), expected);
            prop_assert_eq!(window_count(expected), (0..expected).filter(|&i| i >= 2 && i + 2 < expected).count());
        }

        #[test]
        fn even_segments_reconstruct_stream(len in 1024usize..12_000) {
            let rec = ramp(len, 2);
            let segs = segment_recording(&rec, &SegmentConfig::default()).unwrap();
            let stream: Vec<f32> = segs.iter().step_by(2).flat_map(|s| s.channel(0).to_vec()).collect();
            prop_assert_eq!(&stream[..], &rec.channels[0][..stream.len()]);
        }

        #[test]
        fn centre_columns_match_segment(len in 3072usize..9000) {
            let segs = segment_recording(&ramp(len, 2), &SegmentConfig::default()).unwrap();
            for w in build_windows(&segs).unwrap() {
                let centre = &segs[w.center_index];
                for c in 0..CHANNELS {
                    prop_assert_eq!(&w.channel(c)[2048..3072], centre.channel(c));
                }
            }
        }
    }
}
