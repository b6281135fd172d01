use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    build_windows, fit_normalizer, segment_recording, window_count, NormStats, Recording, Result, Segment,
    SegmentConfig, SegmentKey, SignalError, TemporalWindow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

impl std::str::FromStr for DomainTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(format!("unknown domain `{other}` (expected source|target)")),
        }
    }
}

/// Normalised segments of one split side plus the windows built from them.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    segments: Vec<Segment>,
    windows: Vec<TemporalWindow>,
    num_classes: usize,
    norm_stats: NormStats,
    domain: DomainTag,
    windowed: bool,
    /// `window_centre[w]` = position in `segments` of window `w`'s centre.
    window_centre: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        segments: Vec<Segment>,
        windows: Vec<TemporalWindow>,
        num_classes: usize,
        norm_stats: NormStats,
        domain: DomainTag,
        windowed: bool,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(SignalError::InvalidRecording("num_classes must be positive".into()));
        }
        if let Some(c) = norm_stats.std.iter().position(|&s| !(s > 0.0)) {
            return Err(SignalError::InvalidRecording(format!("norm stats channel {c} has non-positive std")));
        }
        if let Some(s) = segments.iter().find(|s| s.label.is_some_and(|l| l >= num_classes)) {
            return Err(SignalError::InvalidRecording(format!(
                "segment {}#{} label {:?} outside [0, {num_classes})",
                s.source_id, s.index, s.label
            )));
        }
        let lookup: HashMap<(&str, usize), usize> = segments
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.source_id.as_str(), s.index), i))
            .collect();
        let mut window_centre = Vec::with_capacity(windows.len());
        for w in &windows {
            let Some(&i) = lookup.get(&(w.source_id.as_str(), w.center_index)) else {
                return Err(SignalError::InvalidRecording(format!(
                    "window centred on {}#{} has no matching segment",
                    w.source_id, w.center_index
                )));
            };
            if segments[i].label != w.label {
                return Err(SignalError::InvalidRecording(format!(
                    "window {}#{} label differs from its centre segment",
                    w.source_id, w.center_index
                )));
            }
            window_centre.push(i);
        }
        Ok(Self {
            segments,
            windows,
            num_classes,
            norm_stats,
            domain,
            windowed,
            window_centre,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn windows(&self) -> &[TemporalWindow] {
        &self.windows
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn is_windowed(&self) -> bool {
        self.windowed
    }

    pub fn seg_len(&self) -> Option<usize> {
        self.segments.first().map(Segment::seg_len)
    }

    /// Samples for narrow (single-segment) models. When windows were built,
    /// only window centres are used so narrow and wide models see exactly
    /// the same labelled instants.
    pub fn narrow_samples(&self) -> Vec<&Segment> {
        if self.windowed {
            self.window_centre.iter().map(|&i| &self.segments[i]).collect()
        } else {
            self.segments.iter().collect()
        }
    }

    /// Centre segment paired with its window, in window order.
    pub fn pairs(&self) -> impl Iterator<Item = (&Segment, &TemporalWindow)> {
        self.window_centre.iter().map(|&i| &self.segments[i]).zip(&self.windows)
    }

    /// Number of segments that have no window (recording boundaries).
    pub fn unwindowed_count(&self) -> usize {
        self.segments.len() - self.windows.len()
    }
}

/// Train/test halves sharing one set of normalisation statistics.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub report: IngestReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub recordings: usize,
    pub segments: usize,
    pub windows: usize,
    pub train_segments: usize,
    pub test_segments: usize,
    pub excluded_boundary_segments: usize,
    pub degenerate_recordings: Vec<String>,
    pub sample_rates: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub segment: SegmentConfig,
    pub train_fraction: f64,
    pub norm_epsilon: f64,
    pub build_windows: bool,
    pub num_classes: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segment: SegmentConfig::default(),
            train_fraction: 0.8,
            norm_epsilon: 1e-8,
            build_windows: true,
            num_classes: None,
        }
    }
}

/// Per-recording contiguous split.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<Vec<Segment>>,
    pub test: Vec<Vec<Segment>>,
    pub excluded: usize,
    pub degenerate: Vec<String>,
}

/// Splits each recording's segments into a leading train block
/// (`ceil(f * N)` segments) and a trailing test block. Test segments whose
/// raw samples overlap the last train segment are dropped. A recording left
/// with no test segment goes wholly to train.
pub fn split_dataset(groups: Vec<Vec<Segment>>, train_fraction: f64, cfg: &SegmentConfig) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(SignalError::InvalidTrainFraction(train_fraction));
    }
    let hop = cfg.hop()?;
    // segments i+1..=i+overlapping share samples with segment i
    let overlapping = cfg.seg_len.div_ceil(hop) - 1;
    let mut split = Split::default();
    for group in groups {
        let n = group.len();
        if n == 0 {
            continue;
        }
        let n_train = ((train_fraction * n as f64).ceil() as usize).min(n);
        let test_start = n_train + overlapping;
        if test_start >= n {
            if n_train < n || train_fraction < 1.0 {
                log::warn!("recording `{}` ({n} segments) too short to split; assigned to train", group[0].source_id);
                split.degenerate.push(group[0].source_id.clone());
            }
            split.train.push(group);
            continue;
        }
        split.excluded += overlapping;
        let mut it = group.into_iter();
        let train: Vec<Segment> = it.by_ref().take(n_train).collect();
        let test: Vec<Segment> = it.skip(overlapping).collect();
        split.train.push(train);
        split.test.push(test);
    }
    if split.train.iter().all(Vec::is_empty) {
        return Err(SignalError::EmptyTrainingSet);
    }
    if split.test.iter().all(Vec::is_empty) {
        return Err(SignalError::EmptyTestSet(train_fraction));
    }
    Ok(split)
}

/// Segments, splits, normalises and windows a set of recordings.
/// Output is ordered by recording id, then segment index.
pub fn prepare_dataset(recordings: &[Recording], domain: DomainTag, cfg: &PipelineConfig) -> Result<SplitDataset> {
    let mut by_id: BTreeMap<&str, &Recording> = BTreeMap::new();
    for rec in recordings {
        rec.validate()?;
        if by_id.insert(rec.id.as_str(), rec).is_some() {
            return Err(SignalError::InvalidRecording(format!("duplicate recording id `{}`", rec.id)));
        }
    }
    let mut rates: Vec<u32> = recordings.iter().map(|r| r.sample_rate_hz).collect();
    rates.sort_unstable();
    rates.dedup();
    if rates.len() > 1 {
        log::warn!("recordings use mixed sample rates: {rates:?}");
    }

    let mut groups = Vec::with_capacity(by_id.len());
    let mut report = IngestReport {
        recordings: by_id.len(),
        sample_rates: rates,
        ..IngestReport::default()
    };
    for rec in by_id.values() {
        let segs = segment_recording(rec, &cfg.segment)?;
        report.segments += segs.len();
        report.windows += window_count(segs.len());
        groups.push(segs);
    }

    let num_classes = match cfg.num_classes {
        Some(n) => n,
        None => recordings.iter().filter_map(|r| r.label).max().map_or(1, |m| m + 1),
    };

    let split = split_dataset(groups, cfg.train_fraction, &cfg.segment)?;
    report.excluded_boundary_segments = split.excluded;
    report.degenerate_recordings = split.degenerate.clone();

    let train_flat: Vec<Segment> = split.train.iter().flatten().cloned().collect();
    let stats = fit_normalizer(&train_flat, cfg.norm_epsilon)?;

    let side = |groups: Vec<Vec<Segment>>| -> Result<LabeledDataset> {
        let mut segments = Vec::new();
        let mut windows = Vec::new();
        for mut g in groups {
            for s in &mut g {
                stats.apply_in_place(s);
            }
            if cfg.build_windows {
                windows.extend(build_windows(&g)?);
            }
            segments.extend(g);
        }
        LabeledDataset::new(segments, windows, num_classes, stats.clone(), domain, cfg.build_windows)
    };
    let train = side(split.train)?;
    let test = side(split.test)?;
    report.train_segments = train.segments().len();
    report.test_segments = test.segments().len();
    debug_assert!(test.segments().iter().all(|s| !stats.was_fitted_on(&s.key())));
    Ok(SplitDataset { train, test, report })
}

impl SplitDataset {
    /// Test segments that also contributed to the normaliser fit (should be none).
    pub fn normalizer_leaks(&self) -> Vec<SegmentKey> {
        self.test
            .segments()
            .iter()
            .map(Segment::key)
            .filter(|k| self.train.norm_stats().was_fitted_on(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segments(id: &str, n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| Segment {
                source_id: id.into(),
                index: i,
                data: vec![i as f32; 2 * 1024],
                label: Some(0),
            })
            .collect()
    }

    /// Raw sample range of a segment under 1024/512 segmentation.
    fn raw_range(s: &Segment) -> std::ops::Range<usize> {
        s.index * 512..s.index * 512 + 1024
    }

    fn audit_no_shared_samples(split: &Split) -> bool {
        split.train.iter().flatten().all(|a| {
            split
                .test
                .iter()
                .flatten()
                .filter(|b| b.source_id == a.source_id)
                .all(|b| raw_range(a).end <= raw_range(b).start || raw_range(b).end <= raw_range(a).start)
        })
    }

    #[test]
    fn ten_segments() {
        let split = split_dataset(vec![segments("a", 10)], 0.8, &SegmentConfig::default()).unwrap();
        assert_eq!(split.train[0].len(), 8);
        assert_eq!(split.test[0].len(), 1);
        assert_eq!(split.test[0][0].index, 9);
        assert!(audit_no_shared_samples(&split));
    }

    #[test]
    fn long_recording() {
        let split = split_dataset(vec![segments("a", 487)], 0.8, &SegmentConfig::default()).unwrap();
        assert_eq!(split.train[0].len(), 390);
        assert_eq!(split.test[0].len(), 96);
        assert!(audit_no_shared_samples(&split));
    }

    #[test]
    fn full_train_fraction_is_an_error() {
        let err = split_dataset(vec![segments("a", 10)], 1.0, &SegmentConfig::default()).unwrap_err();
        assert!(matches!(err, SignalError::EmptyTestSet(_)));
    }

    #[test]
    fn tiny_recording_goes_to_train() {
        let split = split_dataset(vec![segments("a", 2), segments("b", 10)], 0.8, &SegmentConfig::default()).unwrap();
        assert_eq!(split.degenerate, vec!["a".to_string()]);
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn heavier_overlap_drops_more() {
        let cfg = SegmentConfig {
            overlap_fraction: 0.75,
            ..SegmentConfig::default()
        };
        let split = split_dataset(vec![segments("a", 20)], 0.8, &cfg).unwrap();
        assert_eq!(split.train[0].len(), 16);
        assert_eq!(split.test[0].first().unwrap().index, 19);
    }

    fn rec(id: &str, label: usize, len: usize) -> Recording {
        let ch: Vec<f32> = (0..len).map(|t| ((t * 7 % 13) as f32) * (label + 1) as f32).collect();
        Recording::new(id, 25_600, vec![ch.clone(), ch], Some(label)).unwrap()
    }

    #[test]
    fn pipeline_is_leak_free_and_windowed() {
        let recs = vec![rec("b", 1, 16_384), rec("a", 0, 16_384)];
        let ds = prepare_dataset(&recs, DomainTag::Source, &PipelineConfig::default()).unwrap();
        assert_eq!(ds.report.segments, 62);
        assert_eq!(ds.report.windows, 54);
        assert!(ds.normalizer_leaks().is_empty());
        assert_eq!(ds.train.num_classes(), 2);
        // ordered by recording id
        assert_eq!(ds.train.segments()[0].source_id, "a");
        // 31 segments: 25 train (21 windows), 5 test (1 window) per recording
        assert_eq!(ds.train.windows().len(), 42);
        assert_eq!(ds.test.windows().len(), 2);
        assert_eq!(ds.train.narrow_samples().len(), 42);
        for (s, w) in ds.test.pairs() {
            assert_eq!(&w.channel(0)[2048..3072], s.channel(0));
        }
    }

    #[test]
    fn pipeline_without_windows_uses_all_segments() {
        let recs = vec![rec("a", 0, 16_384)];
        let cfg = PipelineConfig {
            build_windows: false,
            ..PipelineConfig::default()
        };
        let ds = prepare_dataset(&recs, DomainTag::Source, &cfg).unwrap();
        assert!(ds.train.windows().is_empty());
        assert_eq!(ds.train.narrow_samples().len(), ds.train.segments().len());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![rec("a", 0, 4096), rec("a", 1, 4096)];
        assert!(prepare_dataset(&recs, DomainTag::Source, &PipelineConfig::default()).is_err());
    }
}
