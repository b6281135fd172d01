use serde::{Deserialize, Serialize};

use super::{Result, Segment, SignalError, TemporalWindow, CHANNELS};

/// Identity of a segment inside the corpus.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub source_id: String,
    pub index: usize,
}

/// Per-channel z-score statistics plus the segments they were fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    /// Channels whose variance fell below the epsilon and were clamped.
    pub clamped: Vec<usize>,
    pub provenance: Vec<SegmentKey>,
}

/// Anything stored as `[channel][time]` with two channels.
pub trait TwoChannel: Clone {
    fn values(&self) -> &[f32];
    fn values_mut(&mut self) -> &mut [f32];
}

impl TwoChannel for Segment {
    fn values(&self) -> &[f32] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl TwoChannel for TemporalWindow {
    fn values(&self) -> &[f32] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Fits per-channel mean and population std over the training segments only.
pub fn fit_normalizer(train: &[Segment], epsilon: f64) -> Result<NormStats> {
    if train.is_empty() {
        return Err(SignalError::EmptyTrainingSet);
    }
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    let mut clamped = Vec::new();
    for c in 0..CHANNELS {
        let mut count = 0usize;
        let mut sum = 0.0;
        for s in train {
            sum += s.channel(c).iter().map(|&v| v as f64).sum::<f64>();
            count += s.seg_len();
        }
        let m = sum / count as f64;
        let mut ss = 0.0;
        for s in train {
            ss += s.channel(c).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        let mut sd = (ss / count as f64).sqrt();
        if !(sd > epsilon) {
            log::warn!("channel {c} has (near-)zero variance; std clamped to {epsilon:e}");
            sd = epsilon;
            clamped.push(c);
        }
        mean[c] = m;
        std[c] = sd;
    }
    let mut provenance: Vec<SegmentKey> = train.iter().map(Segment::key).collect();
    provenance.sort();
    Ok(NormStats {
        mean,
        std,
        clamped,
        provenance,
    })
}

impl NormStats {
    /// `(x - mean) / std` per channel.
    pub fn apply<T: TwoChannel>(&self, item: &T) -> T {
        let mut out = item.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place<T: TwoChannel>(&self, item: &mut T) {
        let values = item.values_mut();
        let n = values.len() / CHANNELS;
        for (c, row) in values.chunks_exact_mut(n).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in row {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }

    pub fn was_fitted_on(&self, key: &SegmentKey) -> bool {
        self.provenance.binary_search(key).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(index: usize, a: f32, b: f32) -> Segment {
        let mut data = vec![a; 8];
        data.extend(vec![b; 8]);
        Segment {
            source_id: "r".into(),
            index,
            data,
            label: Some(0),
        }
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let stats = fit_normalizer(&[seg(0, 5.0, 1.0), seg(1, 5.0, 3.0)], 1e-8).unwrap();
        assert_eq!(stats.clamped, vec![0]);
        assert_eq!(stats.std[0], 1e-8);
        let out = stats.apply(&seg(0, 5.0, 1.0));
        assert!(out.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_segment_hand_example() {
        let stats = fit_normalizer(&[seg(0, 0.0, 0.0), seg(1, 2.0, 2.0)], 1e-8).unwrap();
        assert_eq!(stats.mean, [1.0, 1.0]);
        assert_eq!(stats.std, [1.0, 1.0]);
        assert!(stats.apply(&seg(0, 0.0, 0.0)).data.iter().all(|&v| v == -1.0));
        assert!(stats.apply(&seg(1, 2.0, 2.0)).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn standard_channel_is_identity() {
        // alternating +-1 has mean 0 and std 1
        let mk = |i| {
            let data: Vec<f32> = (0..16).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
            Segment {
                source_id: "r".into(),
                index: i,
                data,
                label: None,
            }
        };
        let segs = vec![mk(0), mk(1)];
        let stats = fit_normalizer(&segs, 1e-8).unwrap();
        let out = stats.apply(&segs[0]);
        for (a, b) in out.data.iter().zip(&segs[0].data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn windows_use_same_stats() {
        let stats = fit_normalizer(&[seg(0, 0.0, 0.0), seg(1, 2.0, 2.0)], 1e-8).unwrap();
        let w = TemporalWindow {
            source_id: "r".into(),
            center_index: 2,
            data: vec![3.0; 40],
            label: None,
        };
        assert!(stats.apply(&w).data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(matches!(fit_normalizer(&[], 1e-8), Err(SignalError::EmptyTrainingSet)));
    }

    #[test]
    fn provenance_lists_training_segments() {
        let stats = fit_normalizer(&[seg(3, 0.0, 0.0), seg(1, 2.0, 2.0)], 1e-8).unwrap();
        assert!(stats.was_fitted_on(&seg(1, 0.0, 0.0).key()));
        assert!(stats.was_fitted_on(&seg(3, 0.0, 0.0).key()));
        assert!(!stats.was_fitted_on(&seg(2, 0.0, 0.0).key()));
    }
}
