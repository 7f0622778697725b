use crate::dsp::epoch::{epoch_segment, normalize_window, WINDOW_SAMPLES, WINDOW_STRIDE};
use crate::dsp::filter::{bandpass_filter, FilterSpec};
use crate::dsp::recording::{AttentionClass, EegRecording, EYES_CLOSED_TASK, NUM_CHANNELS};
use crate::error::{Error, Result, ResultExt};
use crate::tensor::Tensor;

/// A normalized `[14, 128]` window with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub subject_id: String,
    pub label: AttentionClass,
    /// Index of the source segment within the subject's recording.
    pub segment: usize,
    /// First sample of the window within its segment.
    pub offset: usize,
    pub data: Tensor,
}

impl LabeledWindow {
    /// Half-open raw-sample span `[offset, offset + 128)` in the segment.
    pub fn span(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + WINDOW_SAMPLES
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetOptions {
    /// Keep eyes-closed baseline segments in the Relaxed class.
    pub include_eyes_closed: bool,
}

/// Filter each whole segment, cut it into windows, z-score each window and
/// tag it. Output order is (subject, segment, offset).
pub fn build_dataset(
    recordings: &[EegRecording],
    spec: &FilterSpec,
    options: &DatasetOptions,
) -> Result<Vec<LabeledWindow>> {
    let mut out = Vec::new();
    for rec in recordings {
        rec.validate()?;
        for (si, seg) in rec.segments.iter().enumerate() {
            if !options.include_eyes_closed && seg.task.as_deref() == Some(EYES_CLOSED_TASK) {
                continue;
            }
            let filtered = bandpass_filter(&seg.samples, spec, rec.sample_rate as f64)
                .context(|| format!("subject {} segment {si} ({})", rec.subject_id, seg.label))?;
            let windows = epoch_segment(&filtered, WINDOW_SAMPLES, WINDOW_STRIDE)?;
            for (wi, w) in windows.into_iter().enumerate() {
                out.push(LabeledWindow {
                    subject_id: rec.subject_id.clone(),
                    label: seg.label,
                    segment: si,
                    offset: wi * WINDOW_STRIDE,
                    data: normalize_window(&w)?,
                });
            }
        }
    }
    Ok(out)
}

/// Stack windows into a `[B, 14, 128]` batch.
pub fn batch_tensor<'a>(windows: impl IntoIterator<Item = &'a LabeledWindow>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    for w in windows {
        if w.data.shape() != [NUM_CHANNELS, WINDOW_SAMPLES] {
            return Err(Error::shape(format!(
                "window of shape {:?}, expected [{NUM_CHANNELS}, {WINDOW_SAMPLES}]",
                w.data.shape()
            )));
        }
        data.extend_from_slice(w.data.data());
        count += 1;
    }
    Tensor::new(vec![count, NUM_CHANNELS, WINDOW_SAMPLES], data)
}

/// Distinct subject ids in first-appearance order.
pub fn subjects(windows: &[LabeledWindow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in windows {
        if out.last() != Some(&w.subject_id) && !out.contains(&w.subject_id) {
            out.push(w.subject_id.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::recording::Segment;

    fn recording(id: &str, segs: &[(AttentionClass, usize)]) -> EegRecording {
        let segments = segs
            .iter()
            .enumerate()
            .map(|(k, &(label, n))| Segment {
                label,
                task: None,
                samples: Tensor::from_fn(&[NUM_CHANNELS, n], |i| ((i * 7 + k) as f64 * 0.37).sin()),
            })
            .collect();
        EegRecording::new(id, segments)
    }

    #[test]
    fn single_window_segment() {
        let rec = recording("s1", &[(AttentionClass::Relaxed, 128)]);
        let ds = build_dataset(&[rec], &FilterSpec::default(), &DatasetOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].label, AttentionClass::Relaxed);
        assert_eq!(ds[0].data.shape(), &[14, 128]);
    }

    #[test]
    fn labels_follow_segments_and_order_is_stable() {
        let rec = recording("s1", &[(AttentionClass::Selective, 300), (AttentionClass::Divided, 200)]);
        let ds = build_dataset(&[rec], &FilterSpec::default(), &DatasetOptions::default()).unwrap();
        assert_eq!(ds.len(), 6 + 3);
        assert!(ds[..6].iter().all(|w| w.label == AttentionClass::Selective && w.segment == 0));
        assert!(ds[6..].iter().all(|w| w.label == AttentionClass::Divided && w.segment == 1));
        assert!(ds.windows(2).all(|p| (p[0].segment, p[0].offset) < (p[1].segment, p[1].offset)));
        // no window runs past its segment
        assert!(ds[..6].iter().all(|w| w.span().end <= 300));
    }

    #[test]
    fn identical_recordings_differ_only_in_subject() {
        let a = recording("a", &[(AttentionClass::Sustained, 400)]);
        let mut b = a.clone();
        b.subject_id = "b".into();
        let ds = build_dataset(&[a, b], &FilterSpec::default(), &DatasetOptions::default()).unwrap();
        let half = ds.len() / 2;
        for (x, y) in ds[..half].iter().zip(&ds[half..]) {
            assert_eq!(x.data, y.data);
            assert_ne!(x.subject_id, y.subject_id);
        }
    }

    #[test]
    fn short_segment_error_names_subject() {
        let rec = recording("s9", &[(AttentionClass::Relaxed, 10)]);
        let err = build_dataset(&[rec], &FilterSpec::default(), &DatasetOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("s9"), "{err}");
    }

    #[test]
    fn eyes_closed_excluded_by_default() {
        let mut rec = recording("s1", &[(AttentionClass::Relaxed, 128), (AttentionClass::Relaxed, 128)]);
        rec.segments[0].task = Some(EYES_CLOSED_TASK.into());
        let ds = build_dataset(std::slice::from_ref(&rec), &FilterSpec::default(), &DatasetOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].segment, 1);
        let all = build_dataset(&[rec], &FilterSpec::default(), &DatasetOptions { include_eyes_closed: true }).unwrap();
        assert_eq!(all.len(), 2);
    }
}
