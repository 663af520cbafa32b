//! Per-second scoring of long recordings and merging of above-threshold
//! seconds into detection events.

use std::collections::BTreeMap;

use crate::audio::{extract_patches, resample_to_16k, AudioClip, LogMelFrontend, PATCH_FRAMES, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::WeightBundle;

#[derive(Debug, Clone, PartialEq)]
pub struct SecondScore {
    pub clip_id: String,
    pub second_index: usize,
    pub probability: f64,
}

/// A run of positive seconds, `[start_s, end_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub clip_id: String,
    pub start_s: usize,
    pub end_s: usize,
    pub peak_probability: f64,
}

impl DetectionEvent {
    /// One JSON object, probability fixed at six decimals.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"clip_id\":{},\"start_s\":{},\"end_s\":{},\"peak_prob\":{:.6}}}",
            serde_json::Value::String(self.clip_id.clone()),
            self.start_s,
            self.end_s,
            self.peak_probability
        )
    }
}

/// Scores every whole second of `clip` with the probability of
/// `positive_class`. Each second is featurized on its own, so identical
/// seconds score identically wherever they occur.
pub fn score_stream(bundle: &WeightBundle, clip: &AudioClip, positive_class: usize) -> Result<Vec<SecondScore>> {
    score_stream_with(&LogMelFrontend::new(), bundle, clip, positive_class)
}

pub fn score_stream_with(
    frontend: &LogMelFrontend,
    bundle: &WeightBundle,
    clip: &AudioClip,
    positive_class: usize,
) -> Result<Vec<SecondScore>> {
    let num_classes = bundle.spec().num_classes;
    if positive_class >= num_classes {
        return Err(Error::Index(format!("positive class {positive_class} out of range for {num_classes} classes")));
    }
    let clip = resample_to_16k(clip);
    let second = TARGET_SAMPLE_RATE as usize;
    let seconds = clip.samples.len() / second;
    if seconds == 0 {
        return Err(Error::TooShort(format!("{:.3} s of audio, need at least one second", clip.duration_s())));
    }
    (0..seconds)
        .map(|s| {
            let piece = AudioClip {
                samples: clip.samples[s * second..(s + 1) * second].to_vec(),
                sample_rate: TARGET_SAMPLE_RATE,
                source_id: clip.source_id.clone(),
            };
            let spec = frontend.spectrogram(&piece)?;
            let patch = extract_patches(&spec, PATCH_FRAMES, true)?.swap_remove(0);
            let probs = bundle.forward_probs(&patch)?;
            Ok(SecondScore { clip_id: clip.source_id.clone(), second_index: s, probability: probs[positive_class] })
        })
        .collect()
}

/// Joins seconds scoring at least `threshold` into events. Inside an event,
/// up to `max_gap_s` consecutive seconds may fall below the threshold (or be
/// missing). Events never span clips; output is sorted by clip id, then start.
pub fn merge_events(scores: &[SecondScore], threshold: f64, max_gap_s: usize) -> Vec<DetectionEvent> {
    let mut by_clip: BTreeMap<&str, Vec<&SecondScore>> = BTreeMap::new();
    for s in scores {
        by_clip.entry(&s.clip_id).or_default().push(s);
    }
    let mut events = Vec::new();
    for (clip_id, mut seconds) in by_clip {
        seconds.sort_by_key(|s| s.second_index);
        let mut current: Option<DetectionEvent> = None;
        for s in seconds.into_iter().filter(|s| s.probability >= threshold) {
            match current.as_mut() {
                Some(ev) if s.second_index - ev.end_s <= max_gap_s => {
                    ev.end_s = s.second_index + 1;
                    ev.peak_probability = ev.peak_probability.max(s.probability);
                }
                _ => {
                    events.extend(current.take());
                    current = Some(DetectionEvent {
                        clip_id: clip_id.to_string(),
                        start_s: s.second_index,
                        end_s: s.second_index + 1,
                        peak_probability: s.probability,
                    });
                }
            }
        }
        events.extend(current);
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_aug_vggish_with, StackPlan};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn scores(probs: &[f64]) -> Vec<SecondScore> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| SecondScore { clip_id: "c".into(), second_index: i, probability: p })
            .collect()
    }

    fn spans(events: &[DetectionEvent]) -> Vec<(usize, usize)> {
        events.iter().map(|e| (e.start_s, e.end_s)).collect()
    }

    #[test]
    fn merge_examples() {
        let one = merge_events(&scores(&[0.9; 5]), 0.5, 0);
        assert_eq!(spans(&one), vec![(0, 5)]);
        assert_eq!(one[0].peak_probability, 0.9);
        assert_eq!(spans(&merge_events(&scores(&[0.9, 0.1, 0.9]), 0.5, 0)), vec![(0, 1), (2, 3)]);
        assert_eq!(spans(&merge_events(&scores(&[0.9, 0.1, 0.9]), 0.5, 1)), vec![(0, 3)]);
        assert!(merge_events(&scores(&[0.1, 0.2]), 0.5, 3).is_empty());
    }

    #[test]
    fn events_do_not_cross_clips() {
        let mut s = scores(&[0.9, 0.9]);
        s.push(SecondScore { clip_id: "b".into(), second_index: 2, probability: 0.8 });
        let ev = merge_events(&s, 0.5, 5);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].clip_id, "b");
        assert_eq!(ev[1].clip_id, "c");
    }

    #[test]
    fn json_line_format() {
        let ev = DetectionEvent { clip_id: "saw \"1\"".into(), start_s: 3, end_s: 7, peak_probability: 0.9 };
        assert_eq!(ev.to_json_line(), r#"{"clip_id":"saw \"1\"","start_s":3,"end_s":7,"peak_prob":0.900000}"#);
        let v: serde_json::Value = serde_json::from_str(&ev.to_json_line()).unwrap();
        assert_eq!(v["end_s"], 7);
    }

    proptest! {
        #[test]
        fn gap_zero_events_cover_exactly_the_positive_seconds(
            probs in prop::collection::vec(0.0f64..1.0, 0..60), threshold in 0.0f64..1.0
        ) {
            let ev = merge_events(&scores(&probs), threshold, 0);
            prop_assert!(ev.windows(2).all(|w| w[0].end_s < w[1].start_s));
            let covered: BTreeSet<usize> = ev.iter().flat_map(|e| e.start_s..e.end_s).collect();
            let positive: BTreeSet<usize> = (0..probs.len()).filter(|&i| probs[i] >= threshold).collect();
            prop_assert_eq!(covered, positive);
            for e in &ev {
                prop_assert!(e.end_s > e.start_s && e.peak_probability >= threshold);
            }
        }

        #[test]
        fn higher_threshold_never_adds_seconds(
            probs in prop::collection::vec(0.0f64..1.0, 0..60), a in 0.0f64..1.0, b in 0.0f64..1.0
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let count = |t: f64| merge_events(&scores(&probs), t, 0).iter().map(|e| e.end_s - e.start_s).sum::<usize>();
            prop_assert!(count(hi) <= count(lo));
        }
    }

    fn small_bundle() -> WeightBundle {
        WeightBundle::random(build_aug_vggish_with(&StackPlan::aug_vggish().narrowed(16), 2).unwrap(), 4)
    }

    #[test]
    fn one_score_per_whole_second() {
        let b = small_bundle();
        let clip = AudioClip::new(vec![0.01; 16_000 * 5 + 9000], 16_000, "x").unwrap();
        let s = score_stream(&b, &clip, 1).unwrap();
        assert_eq!(s.iter().map(|s| s.second_index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let short = AudioClip::new(vec![0.0; 15_999], 16_000, "y").unwrap();
        assert!(matches!(score_stream(&b, &short, 1), Err(Error::TooShort(_))));
        assert!(matches!(score_stream(&b, &clip, 2), Err(Error::Index(_))));
    }

    #[test]
    fn silence_with_zero_weights_is_uniform() {
        let spec = build_aug_vggish_with(&StackPlan::aug_vggish().narrowed(16), 4).unwrap();
        let b = WeightBundle::zeros(spec);
        let clip = AudioClip::new(vec![0.0; 48_000], 16_000, "s").unwrap();
        assert!(score_stream(&b, &clip, 3).unwrap().iter().all(|s| s.probability == 0.25));
    }

    #[test]
    fn repeated_seconds_score_identically() {
        let b = small_bundle();
        let second: Vec<f32> = (0..16_000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
        let mut samples = second.clone();
        samples.extend(&second);
        samples.extend(&second);
        let s = score_stream(&b, &AudioClip::new(samples, 16_000, "r").unwrap(), 1).unwrap();
        assert_eq!(s[0].probability.to_bits(), s[1].probability.to_bits());
        assert_eq!(s[1].probability.to_bits(), s[2].probability.to_bits());
    }
}
