//! Class-conditional synthetic EEG with per-subject variability.
//!
//! Every channel is pink background noise plus, for the channels a class
//! activates, narrow-band oscillations. Signals are synthesized in the
//! frequency domain from a target power spectral density with random
//! phases, so spectra are exact in expectation.
//!
//! Subject effects act on the oscillations only: a log-normal gain per
//! channel and one frequency offset per subject shared by every class, in
//! the manner of individual alpha-peak differences. A gain applied to the
//! whole channel would be removed by per-window z-scoring.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::recording::{AttentionClass, EegRecording, Segment, CHANNEL_NAMES, NUM_CHANNELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian spectral bump on a set of channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    pub channels: Vec<usize>,
    pub center_hz: f64,
    /// Standard deviation of the bump in Hz.
    pub bandwidth_hz: f64,
    /// Peak power spectral density in µV²/Hz.
    pub peak_psd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub label: AttentionClass,
    pub oscillations: Vec<Oscillation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Mild subject effects.
    Easy,
    /// Strong subject effects.
    Shifted,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Profile::Easy),
            "shifted" => Ok(Profile::Shifted),
            _ => Err(Error::invalid(format!("unknown profile '{s}' (expected easy or shifted)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub seconds_per_class: usize,
    pub classes: Vec<ClassProfile>,
    /// σ of the log-normal per-channel oscillation gain.
    pub gain_sigma: f64,
    /// Per-subject frequency offsets cover ±`jitter_hz`, one draw per
    /// equal-width stratum so that every cohort spans the range.
    pub jitter_hz: f64,
    /// Background PSD is `noise_level / f` µV²/Hz inside the noise band.
    pub noise_level: f64,
    pub noise_band_hz: (f64, f64),
    /// Required excess of every oscillation's peak PSD over the background
    /// at its center, in dB.
    pub min_margin_db: f64,
    pub seed: u64,
}

const NYQUIST_GUARD_HZ: f64 = 44.0;

fn peak_for_margin(noise_level: f64, f0: f64, margin_db: f64) -> f64 {
    noise_level / f0 * 10f64.powf(margin_db / 10.0)
}

/// Standard five-class spec. Relaxed (alpha) and selective (theta) share
/// the posterior and temporal electrodes; sustained (low beta) and
/// alternating (high beta) share the frontal ones; divided is a broad gamma
/// band over central and temporal sites. Within a pair only frequency
/// separates the classes.
pub fn default_spec(n_subjects: usize, profile: Profile, seed: u64) -> SynthSpec {
    let noise_level = 25.0;
    let margin = 10.0;
    let osc = |channels: &[usize], f0: f64, bw: f64| Oscillation {
        channels: channels.to_vec(),
        center_hz: f0,
        bandwidth_hz: bw,
        peak_psd: peak_for_margin(noise_level, f0, margin),
    };
    let classes = vec![
        ClassProfile {
            label: AttentionClass::Relaxed,
            oscillations: vec![osc(&[4, 5, 6, 7, 8, 9], 10.0, 1.0)],
        },
        ClassProfile {
            label: AttentionClass::Selective,
            oscillations: vec![osc(&[4, 5, 6, 7, 8, 9], 6.0, 1.0)],
        },
        ClassProfile {
            label: AttentionClass::Sustained,
            oscillations: vec![osc(&[0, 1, 2, 11, 12, 13], 18.0, 1.5)],
        },
        ClassProfile {
            label: AttentionClass::Alternating,
            oscillations: vec![osc(&[0, 1, 2, 11, 12, 13], 24.0, 1.5)],
        },
        ClassProfile {
            label: AttentionClass::Divided,
            oscillations: vec![osc(&[3, 4, 9, 10], 35.0, 2.5)],
        },
    ];
    let (gain_sigma, jitter_hz) = match profile {
        Profile::Easy => (0.1, 0.5),
        Profile::Shifted => (0.5, 6.0),
    };
    SynthSpec {
        n_subjects,
        seconds_per_class: 60,
        classes,
        gain_sigma,
        jitter_hz,
        noise_level,
        noise_band_hz: (1.0, 42.0),
        min_margin_db: 6.0,
        seed,
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::invalid(format!("{field}: {msg}")));
        if self.n_subjects < 1 {
            return bad("n_subjects", "must be at least 1".into());
        }
        if self.seconds_per_class < 10 {
            return bad("seconds_per_class", format!("must be at least 10, got {}", self.seconds_per_class));
        }
        if !(self.gain_sigma >= 0.0 && self.gain_sigma.is_finite()) {
            return bad("gain_sigma", format!("must be finite and non-negative, got {}", self.gain_sigma));
        }
        if !(self.jitter_hz >= 0.0 && self.jitter_hz.is_finite()) {
            return bad("jitter_hz", format!("must be finite and non-negative, got {}", self.jitter_hz));
        }
        if !(self.noise_level > 0.0) {
            return bad("noise_level", format!("must be positive, got {}", self.noise_level));
        }
        let (lo, hi) = self.noise_band_hz;
        if !(0.5 < lo && lo < hi && hi < 45.0) {
            return bad("noise_band_hz", format!("must lie within (0.5, 45) Hz, got {lo}..{hi}"));
        }
        let mut seen = Vec::new();
        for class in &self.classes {
            if seen.contains(&class.label) {
                return bad("classes", format!("{} listed twice", class.label));
            }
            seen.push(class.label);
            for o in &class.oscillations {
                if !(o.center_hz > 0.5 && o.center_hz < 45.0) {
                    return bad("center_hz", format!("{} Hz for {} is outside (0.5, 45)", o.center_hz, class.label));
                }
                if !(o.bandwidth_hz > 0.0) || !(o.peak_psd > 0.0) {
                    return bad("oscillations", format!("{} needs positive bandwidth and power", class.label));
                }
                if o.channels.is_empty() || o.channels.iter().any(|&c| c >= NUM_CHANNELS) {
                    return bad("channels", format!("{} needs channel indices in 0..{NUM_CHANNELS}", class.label));
                }
                let m = self.margin_db(o);
                if m < self.min_margin_db {
                    return bad(
                        "peak_psd",
                        format!("{} at {} Hz is {m:.1} dB over the background, below {} dB", class.label, o.center_hz, self.min_margin_db),
                    );
                }
            }
        }
        if seen.len() != AttentionClass::COUNT {
            return bad("classes", format!("expected all {} classes, got {}", AttentionClass::COUNT, seen.len()));
        }
        Ok(())
    }

    /// Background PSD at `f` Hz.
    pub fn noise_psd(&self, f: f64) -> f64 {
        let (lo, hi) = self.noise_band_hz;
        if f >= lo && f <= hi {
            self.noise_level / f
        } else {
            0.0
        }
    }

    /// Peak-to-background ratio of an oscillation at unit gain, in dB.
    pub fn margin_db(&self, o: &Oscillation) -> f64 {
        10.0 * (o.peak_psd / (self.noise_level / o.center_hz)).log10()
    }
}

/// Per-subject random effects.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEffects {
    pub gains: [f64; NUM_CHANNELS],
    /// Frequency offset of every oscillation.
    pub shift_hz: f64,
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

/// Random assignment of subjects to frequency-shift strata.
fn shift_strata(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Effects of one subject. `stratum` of `n_strata` selects the slice of
/// the shift range the subject's offset is drawn from.
pub fn subject_effects(
    spec: &SynthSpec,
    stratum: usize,
    n_strata: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SubjectEffects> {
    let gain = LogNormal::new(0.0, spec.gain_sigma).map_err(|e| Error::invalid(format!("gain_sigma: {e}")))?;
    let mut gains = [1.0; NUM_CHANNELS];
    for g in &mut gains {
        *g = gain.sample(rng);
    }
    let u: f64 = rng.random();
    let shift_hz = spec.jitter_hz * (2.0 * (stratum as f64 + u) / n_strata as f64 - 1.0);
    Ok(SubjectEffects { gains, shift_hz })
}

/// Expected one-sided PSD of channel `ch` for `class` under `effects`.
pub fn channel_psd(spec: &SynthSpec, class: &ClassProfile, effects: &SubjectEffects, ch: usize, f: f64) -> f64 {
    let mut s = spec.noise_psd(f);
    for o in class.oscillations.iter().filter(|o| o.channels.contains(&ch)) {
        let f0 = shifted_center(o, effects.shift_hz);
        let g = effects.gains[ch];
        s += g * g * o.peak_psd * (-(f - f0).powi(2) / (2.0 * o.bandwidth_hz.powi(2))).exp();
    }
    if f > NYQUIST_GUARD_HZ {
        0.0
    } else {
        s
    }
}

fn shifted_center(o: &Oscillation, jitter: f64) -> f64 {
    // keep clear of the band edges
    let lo = 1.0 + o.bandwidth_hz;
    let hi = NYQUIST_GUARD_HZ - 2.0 * o.bandwidth_hz;
    (o.center_hz + jitter).clamp(lo, hi)
}

/// One real Gaussian process of `n` samples with one-sided PSD `psd(f)`.
fn synthesize(n: usize, psd: impl Fn(f64) -> f64, rng: &mut ChaCha8Rng, fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let df = fs / n as f64;
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..n.div_ceil(2) {
        // E|X_k|^2 = n^2 S(f) df / 2 gives Var(x) = sum_k S(f_k) df
        let amp = (n as f64) * (psd(k as f64 * df) * df / 2.0).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let c = Complex64::new(re, im) * (amp / 2f64.sqrt());
        spec[k] = c;
        spec[n - k] = c.conj();
    }
    fft.process(&mut spec);
    spec.iter().map(|c| c.re / n as f64).collect()
}

/// Generate every subject's recording: one segment per class, in class
/// order.
pub fn generate(spec: &SynthSpec) -> Result<Vec<EegRecording>> {
    spec.validate()?;
    let n = spec.seconds_per_class * SAMPLE_RATE;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n);
    let mut classes = spec.classes.clone();
    classes.sort_by_key(|c| c.label);
    let strata = shift_strata(spec.seed, spec.n_subjects);
    (0..spec.n_subjects)
        .map(|s| {
            let mut rng = subject_rng(spec.seed, s);
            let effects = subject_effects(spec, strata[s], spec.n_subjects, &mut rng)?;
            let segments = classes
                .iter()
                .map(|class| {
                    let mut data = Vec::with_capacity(NUM_CHANNELS * n);
                    for ch in 0..NUM_CHANNELS {
                        data.extend(synthesize(n, |f| channel_psd(spec, class, &effects, ch, f), &mut rng, fft.as_ref()));
                    }
                    Ok(Segment {
                        label: class.label,
                        task: None,
                        samples: Tensor::new(vec![NUM_CHANNELS, n], data)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EegRecording::new(subject_id(s), segments))
        })
        .collect()
}

/// Names of the channels an oscillation occupies, for reports.
pub fn channel_names(o: &Oscillation) -> Vec<&'static str> {
    o.channels.iter().map(|&c| CHANNEL_NAMES[c]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_specs_validate() {
        for p in [Profile::Easy, Profile::Shifted] {
            let s = default_spec(3, p, 1);
            s.validate().unwrap();
            assert_eq!(s.classes.len(), 5);
        }
        assert_eq!(default_spec(2, Profile::Easy, 0).gain_sigma, 0.1);
        assert_eq!(default_spec(2, Profile::Shifted, 0).gain_sigma, 0.5);
    }

    #[test]
    fn signatures_are_distinct() {
        let s = default_spec(2, Profile::Easy, 0);
        for (i, a) in s.classes.iter().enumerate() {
            for b in &s.classes[i + 1..] {
                let sa = (&a.oscillations[0].channels, a.oscillations[0].center_hz);
                let sb = (&b.oscillations[0].channels, b.oscillations[0].center_hz);
                assert_ne!(sa, sb);
            }
        }
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut s = default_spec(2, Profile::Easy, 0);
        s.seconds_per_class = 5;
        assert!(s.validate().unwrap_err().to_string().contains("seconds_per_class"));
        let mut s = default_spec(2, Profile::Easy, 0);
        s.classes[0].oscillations[0].center_hz = 50.0;
        assert!(s.validate().unwrap_err().to_string().contains("center_hz"));
        let mut s = default_spec(2, Profile::Easy, 0);
        s.classes[1].oscillations[0].peak_psd = 1e-3;
        assert!(s.validate().unwrap_err().to_string().contains("peak_psd"));
    }

    #[test]
    fn variance_matches_target_psd() {
        // white PSD of 2 µV²/Hz over (0, 64) Hz has variance 128
        let n = 4096;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_inverse(n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..20 {
            let x = synthesize(n, |_| 2.0, &mut rng, fft.as_ref());
            total += x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        }
        let var = total / 20.0;
        assert!((var / 128.0 - 1.0).abs() < 0.05, "{var}");
    }
}
