//! Recordings, their text file format, and the segment manifest.
//!
//! A segment file starts with `key=value` header lines (`subject`, `label`,
//! `rate`, `channels`, optionally `task`) followed by one line per sample
//! holding 14 comma-separated microvolt values. Values are written with the
//! shortest decimal form that parses back to the same `f64`.
//!
//! A manifest lists segment files, one `subject<TAB>relative-path` per
//! line; `#` starts a comment. Segment order within a subject follows the
//! manifest.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 128;
pub const NUM_CHANNELS: usize = 14;
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];

/// Task tag of the eyes-closed baseline; excluded from datasets by default.
pub const EYES_CLOSED_TASK: &str = "eyes-closed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionClass {
    Relaxed = 0,
    Selective = 1,
    Sustained = 2,
    Alternating = 3,
    Divided = 4,
}

impl AttentionClass {
    pub const ALL: [AttentionClass; 5] = [
        AttentionClass::Relaxed,
        AttentionClass::Selective,
        AttentionClass::Sustained,
        AttentionClass::Alternating,
        AttentionClass::Divided,
    ];
    pub const COUNT: usize = 5;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class code {code} outside 0..5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionClass::Relaxed => "relaxed",
            AttentionClass::Selective => "selective",
            AttentionClass::Sustained => "sustained",
            AttentionClass::Alternating => "alternating",
            AttentionClass::Divided => "divided",
        }
    }
}

impl fmt::Display for AttentionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown attention class '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub label: AttentionClass,
    /// Free-form task tag, e.g. `eyes-open`.
    pub task: Option<String>,
    /// `[14, N]` microvolts.
    pub samples: Tensor,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One subject's labeled continuous signal.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub subject_id: String,
    pub sample_rate: usize,
    pub channel_names: Vec<String>,
    pub segments: Vec<Segment>,
}

impl EegRecording {
    pub fn new(subject_id: impl Into<String>, segments: Vec<Segment>) -> Self {
        Self {
            subject_id: subject_id.into(),
            sample_rate: SAMPLE_RATE,
            channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            segments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "subject {}: sample rate {} Hz, expected {SAMPLE_RATE}",
                self.subject_id, self.sample_rate
            )));
        }
        if self.channel_names.len() != NUM_CHANNELS {
            return Err(Error::invalid(format!(
                "subject {}: {} channels, expected {NUM_CHANNELS}",
                self.subject_id,
                self.channel_names.len()
            )));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let (c, _) = seg.samples.dims2()?;
            if c != NUM_CHANNELS {
                return Err(Error::invalid(format!(
                    "subject {} segment {i}: {c} channels, expected {NUM_CHANNELS}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Render one segment in the text format.
pub fn format_segment(subject_id: &str, segment: &Segment) -> String {
    let (c, n) = (NUM_CHANNELS, segment.len());
    let mut s = String::with_capacity(n * c * 20);
    writeln!(s, "subject={subject_id}").unwrap();
    writeln!(s, "label={}", segment.label).unwrap();
    writeln!(s, "rate={SAMPLE_RATE}").unwrap();
    writeln!(s, "channels={}", CHANNEL_NAMES.join(",")).unwrap();
    if let Some(task) = &segment.task {
        writeln!(s, "task={task}").unwrap();
    }
    let d = segment.samples.data();
    for t in 0..n {
        for ch in 0..c {
            if ch > 0 {
                s.push(',');
            }
            // `{:?}` is the shortest representation that round-trips exactly
            write!(s, "{:?}", d[ch * n + t]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parse a segment file. Returns the subject id from the header with the
/// segment.
pub fn parse_segment(text: &str, path: &Path) -> Result<(String, Segment)> {
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut subject = None;
    let mut label = None;
    let mut rate = None;
    let mut channels: Option<Vec<String>> = None;
    let mut task = None;
    let mut rows: Vec<[f64; NUM_CHANNELS]> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if rows.is_empty() {
            if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "subject" => subject = Some(value.to_string()),
                    "label" => {
                        label = Some(value.parse::<AttentionClass>().map_err(|e| fmt_err(lineno, e.to_string()))?)
                    }
                    "rate" => {
                        rate = Some(value.parse::<usize>().map_err(|e| fmt_err(lineno, format!("bad rate: {e}")))?)
                    }
                    "channels" => channels = Some(value.split(',').map(|s| s.trim().to_string()).collect()),
                    "task" => task = Some(value.to_string()),
                    other => return Err(fmt_err(lineno, format!("unknown header key '{other}'"))),
                }
                continue;
            }
        }
        let mut row = [0.0; NUM_CHANNELS];
        let mut count = 0;
        for field in line.split(',') {
            if count < NUM_CHANNELS {
                row[count] = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| fmt_err(lineno, format!("bad value '{}': {e}", field.trim())))?;
            }
            count += 1;
        }
        if count != NUM_CHANNELS {
            return Err(fmt_err(
                lineno,
                format!("expected {NUM_CHANNELS} channel values, found {count}"),
            ));
        }
        rows.push(row);
    }

    let subject = subject.ok_or_else(|| fmt_err(0, "missing 'subject' header".into()))?;
    let label = label.ok_or_else(|| fmt_err(0, "missing 'label' header".into()))?;
    let rate = rate.ok_or_else(|| fmt_err(0, "missing 'rate' header".into()))?;
    if rate != SAMPLE_RATE {
        return Err(fmt_err(0, format!("rate {rate} Hz, expected {SAMPLE_RATE}")));
    }
    let channels = channels.ok_or_else(|| fmt_err(0, "missing 'channels' header".into()))?;
    if channels.len() != NUM_CHANNELS {
        return Err(fmt_err(
            0,
            format!("header lists {} channels, expected {NUM_CHANNELS}", channels.len()),
        ));
    }
    if rows.is_empty() {
        return Err(fmt_err(0, "segment has no samples".into()));
    }
    let n = rows.len();
    let mut data = vec![0.0; NUM_CHANNELS * n];
    for (t, row) in rows.iter().enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            data[ch * n + t] = v;
        }
    }
    Ok((
        subject,
        Segment {
            label,
            task,
            samples: Tensor::new(vec![NUM_CHANNELS, n], data)?,
        },
    ))
}

pub fn read_segment(path: &Path) -> Result<(String, Segment)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_segment(&text, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: PathBuf,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (subject, file) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected '<subject>\\t<path>'".into(),
        })?;
        out.push(ManifestEntry {
            subject_id: subject.trim().to_string(),
            path: PathBuf::from(file.trim()),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# attentionet recording manifest v1\n");
    for e in entries {
        writeln!(s, "{}\t{}", e.subject_id, e.path.display()).unwrap();
    }
    s
}

/// Load every recording listed in a manifest, grouping segments by subject
/// in order of first appearance.
pub fn load_manifest(manifest: &Path) -> Result<Vec<EegRecording>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut recordings: Vec<EegRecording> = Vec::new();
    for entry in parse_manifest(&text, manifest)? {
        let path = base.join(&entry.path);
        let (subject, segment) = read_segment(&path)?;
        if subject != entry.subject_id {
            return Err(Error::Format {
                path,
                line: 1,
                message: format!(
                    "file header names subject '{subject}' but manifest lists '{}'",
                    entry.subject_id
                ),
            });
        }
        match recordings.iter_mut().find(|r| r.subject_id == subject) {
            Some(r) => r.segments.push(segment),
            None => recordings.push(EegRecording::new(subject, vec![segment])),
        }
    }
    Ok(recordings)
}

/// Write recordings as `<dir>/<subject>/<index>_<label>.txt` plus
/// `<dir>/manifest.txt`. Returns the manifest path.
pub fn write_recordings(dir: &Path, recordings: &[EegRecording]) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for rec in recordings {
        rec.validate()?;
        let sub = dir.join(&rec.subject_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, seg) in rec.segments.iter().enumerate() {
            let rel = PathBuf::from(&rec.subject_id).join(format!("{i:02}_{}.txt", seg.label));
            let path = dir.join(&rel);
            fs::write(&path, format_segment(&rec.subject_id, seg)).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                subject_id: rec.subject_id.clone(),
                path: rel,
            });
        }
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, format_manifest(&entries)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn segment(n: usize, seed: f64) -> Segment {
        Segment {
            label: AttentionClass::Divided,
            task: Some("reading".into()),
            samples: Tensor::from_fn(&[NUM_CHANNELS, n], |i| ((i as f64 + seed) * 0.731).sin() * 37.123456789),
        }
    }

    #[test]
    fn class_codes_are_stable() {
        let names: Vec<_> = AttentionClass::ALL.iter().map(|c| (c.code(), c.name())).collect();
        assert_eq!(
            names,
            vec![(0, "relaxed"), (1, "selective"), (2, "sustained"), (3, "alternating"), (4, "divided")]
        );
        assert_eq!("Sustained".parse::<AttentionClass>().unwrap(), AttentionClass::Sustained);
        assert!("focused".parse::<AttentionClass>().is_err());
    }

    #[test]
    fn wrong_column_count_names_line_and_expected() {
        let mut text = format_segment("s1", &segment(3, 0.0));
        text.push_str("1,2,3\n");
        let err = parse_segment(&text, Path::new("bad.txt")).unwrap_err().to_string();
        assert!(err.contains("bad.txt") && err.contains("14") && err.contains(":9"), "{err}");
    }

    #[test]
    fn wrong_rate_rejected() {
        let text = format_segment("s1", &segment(3, 0.0)).replace("rate=128", "rate=256");
        assert!(parse_segment(&text, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn text_roundtrip_is_bit_exact(seed in -1e6f64..1e6, n in 1usize..20) {
            let seg = segment(n, seed);
            let text = format_segment("subject-7", &seg);
            let (sub, back) = parse_segment(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(sub, "subject-7");
            prop_assert_eq!(back, seg);
        }
    }
}
