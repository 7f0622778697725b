//! Binary archive of preprocessed windows.
//!
//! Layout, all integers little-endian:
//! `b"ATNWINDO"`, u32 version, u64 window count, u32 channels, u32 samples,
//! u32 class count then one length-prefixed name per class, u32 subject
//! count then one length-prefixed id per subject, and finally per window
//! u32 subject index, u8 class code, u32 segment, u64 offset and
//! `channels * samples` f64 values.

use std::path::Path;

use crate::dsp::dataset::LabeledWindow;
use crate::dsp::epoch::WINDOW_SAMPLES;
use crate::dsp::recording::{AttentionClass, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ATNWINDO";
pub const ARCHIVE_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn to_bytes(windows: &[LabeledWindow]) -> Result<Vec<u8>> {
    let mut subjects: Vec<&str> = Vec::new();
    for w in windows {
        if !subjects.contains(&w.subject_id.as_str()) {
            subjects.push(&w.subject_id);
        }
        if w.data.shape() != [NUM_CHANNELS, WINDOW_SAMPLES] {
            return Err(Error::shape(format!(
                "window of {} has shape {:?}, expected [{NUM_CHANNELS}, {WINDOW_SAMPLES}]",
                w.subject_id,
                w.data.shape()
            )));
        }
    }
    let per = NUM_CHANNELS * WINDOW_SAMPLES;
    let mut out = Vec::with_capacity(64 + windows.len() * (17 + 8 * per));
    out.extend(MAGIC);
    out.extend(ARCHIVE_VERSION.to_le_bytes());
    out.extend((windows.len() as u64).to_le_bytes());
    out.extend((NUM_CHANNELS as u32).to_le_bytes());
    out.extend((WINDOW_SAMPLES as u32).to_le_bytes());
    out.extend((AttentionClass::COUNT as u32).to_le_bytes());
    for c in AttentionClass::ALL {
        put_str(&mut out, c.name());
    }
    out.extend((subjects.len() as u32).to_le_bytes());
    for s in &subjects {
        put_str(&mut out, s);
    }
    for w in windows {
        let si = subjects.iter().position(|s| *s == w.subject_id).expect("collected above");
        out.extend((si as u32).to_le_bytes());
        out.push(w.label.code() as u8);
        out.extend((w.segment as u32).to_le_bytes());
        out.extend((w.offset as u64).to_le_bytes());
        for v in w.data.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::invalid(format!("window archive truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::invalid("window archive holds invalid UTF-8"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<LabeledWindow>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::invalid("not a window archive (bad magic)"));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::invalid(format!(
            "window archive version {version} unsupported (expected {ARCHIVE_VERSION})"
        )));
    }
    let count = r.u64()? as usize;
    let (c, t) = (r.u32()? as usize, r.u32()? as usize);
    if (c, t) != (NUM_CHANNELS, WINDOW_SAMPLES) {
        return Err(Error::shape(format!("archive windows are {c}x{t}, expected {NUM_CHANNELS}x{WINDOW_SAMPLES}")));
    }
    let n_classes = r.u32()? as usize;
    if n_classes != AttentionClass::COUNT {
        return Err(Error::invalid(format!("archive lists {n_classes} classes, expected 5")));
    }
    for class in AttentionClass::ALL {
        let name = r.string()?;
        if name != class.name() {
            return Err(Error::invalid(format!("archive class table has '{name}' where '{class}' was expected")));
        }
    }
    let n_subjects = r.u32()? as usize;
    let subjects = (0..n_subjects).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut windows = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let si = r.u32()? as usize;
        let subject_id = subjects
            .get(si)
            .ok_or_else(|| Error::invalid(format!("window {i} refers to subject {si} of {n_subjects}")))?
            .clone();
        let label = AttentionClass::from_code(r.take(1)?[0] as usize)?;
        let segment = r.u32()? as usize;
        let offset = r.u64()? as usize;
        let data = r
            .take(8 * c * t)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        windows.push(LabeledWindow {
            subject_id,
            label,
            segment,
            offset,
            data: Tensor::new(vec![c, t], data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!("{} trailing bytes after window archive", bytes.len() - r.pos)));
    }
    Ok(windows)
}

pub fn save(windows: &[LabeledWindow], path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(windows)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<LabeledWindow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Context {
        context: path.display().to_string(),
        source: Box::new(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<LabeledWindow> {
        (0..4)
            .map(|i| LabeledWindow {
                subject_id: format!("S{}", i % 2),
                label: AttentionClass::ALL[i],
                segment: i,
                offset: 32 * i,
                data: Tensor::from_fn(&[14, 128], |j| (j as f64 * 0.1 + i as f64).sin() * 1e-3),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ws = sample();
        assert_eq!(from_bytes(&to_bytes(&ws).unwrap()).unwrap(), ws);
        assert!(from_bytes(&to_bytes(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
