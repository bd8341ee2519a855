//! Audio loading, resampling, pitch shifting, and 1D dataset augmentation.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{self, Complex};

/// Mono sample buffer with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<String>,
    pub source_id: String,
    /// 1.0 for originals, the pitch factor for crafted clips.
    pub shift_factor: f64,
}

impl AudioClip {
    /// Validates invariants and hard-clips samples into [-1, 1].
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        label: Option<String>,
        source_id: impl Into<String>,
        shift_factor: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("clip contains non-finite samples".into()));
        }
        let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(AudioClip {
            samples,
            sample_rate,
            label,
            source_id: source_id.into(),
            shift_factor,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM WAV file (8- or 16-bit, mono or stereo). Stereo is downmixed
/// by channel averaging; integers scale by 2^(bits-1).
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedWav("float samples not supported".into()));
    }
    if spec.bits_per_sample != 8 && spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "{}-bit samples not supported (want 8 or 16)",
            spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedWav(format!(
            "{} channels not supported (want mono or stereo)",
            spec.channels
        )));
    }
    let scale = 1.0 / f64::from(1i32 << (spec.bits_per_sample - 1));
    let raw: Vec<f64> = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| f64::from(v) * scale).map_err(map_hound))
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = if spec.channels == 2 {
        raw.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        raw
    };
    if samples.is_empty() {
        return Err(Error::WavFormat("wav contains no samples".into()));
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    AudioClip::new(samples, spec.sample_rate, None, source_id, 1.0)
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedWav("unsupported wav encoding".into()),
        other => Error::WavFormat(other.to_string()),
    }
}

/// Writes a clip as 16-bit PCM mono.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &v in &clip.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

const SINC_HALF_TAPS: f64 = 16.0; // 32-tap kernel
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    // power series; converges quickly for the beta range used here
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x_sq = (x / 2.0) * (x / 2.0);
    for k in 1..40 {
        term *= half_x_sq / (k as f64 * k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

fn kaiser(frac: f64) -> f64 {
    if frac.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - frac * frac).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        let pt = std::f64::consts::PI * t;
        pt.sin() / pt
    }
}

/// Band-limited resampling of a raw buffer by `ratio` = out_len/in_len.
fn resample_buffer(x: &[f64], ratio: f64) -> Vec<f64> {
    let out_len = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    let cutoff = 0.5 * ratio.min(1.0); // cycles per input sample
    let step = 1.0 / ratio;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let lo = ((pos - SINC_HALF_TAPS).ceil() as i64).max(0);
        let hi = ((pos + SINC_HALF_TAPS).floor() as i64).min(x.len() as i64 - 1);
        let mut acc = 0.0;
        for j in lo..=hi {
            let t = pos - j as f64;
            acc += x[j as usize] * 2.0 * cutoff * sinc(2.0 * cutoff * t) * kaiser(t / SINC_HALF_TAPS);
        }
        out.push(acc);
    }
    out
}

/// Windowed-sinc resampling to `target_rate`. The same-rate case is an exact
/// identity, which also makes repeated resampling bit-stable.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Parameter("target rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = f64::from(target_rate) / f64::from(clip.sample_rate);
    let out = resample_buffer(&clip.samples, ratio);
    AudioClip::new(
        out,
        target_rate,
        clip.label.clone(),
        clip.source_id.clone(),
        clip.shift_factor,
    )
}

const PV_FRAME: usize = 1024;
const PV_HOP: usize = 256;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    p - two_pi * (p / two_pi).round()
}

/// Phase-vocoder time stretch by `factor` (output duration = input * factor).
fn time_stretch(x: &[f64], factor: f64) -> Vec<f64> {
    let n = PV_FRAME;
    let syn_hop = ((PV_HOP as f64) * factor).round().max(1.0) as usize;
    let window = hann(n);

    let mut padded = x.to_vec();
    if padded.len() < n {
        padded.resize(n, 0.0);
    }
    let n_frames = (padded.len() - n) / PV_HOP + 1;
    let out_len = ((x.len() as f64) * factor).round() as usize;
    let mut out = vec![0.0; (n_frames - 1) * syn_hop + n + 1];
    let mut norm = vec![0.0; out.len()];

    let mut prev_phase = vec![0.0; n];
    let mut synth_phase = vec![0.0; n];
    let mut buf = vec![Complex::ZERO; n];

    for frame in 0..n_frames {
        let off = frame * PV_HOP;
        for i in 0..n {
            buf[i] = Complex::new(padded[off + i] * window[i], 0.0);
        }
        fft::fft(&mut buf);

        let mut spec = vec![Complex::ZERO; n];
        for k in 0..n {
            let mag = buf[k].abs();
            let phase = buf[k].im.atan2(buf[k].re);
            if frame == 0 {
                synth_phase[k] = phase;
            } else {
                let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let expected = omega * PV_HOP as f64;
                let delta = wrap_phase(phase - prev_phase[k] - expected);
                let true_freq = omega + delta / PV_HOP as f64;
                synth_phase[k] += true_freq * syn_hop as f64;
            }
            prev_phase[k] = phase;
            spec[k] = Complex::new(mag * synth_phase[k].cos(), mag * synth_phase[k].sin());
        }
        fft::ifft(&mut spec);

        let pos = frame * syn_hop;
        for i in 0..n {
            out[pos + i] += spec[i].re * window[i];
            norm[pos + i] += window[i] * window[i];
        }
    }

    let mut res: Vec<f64> = out
        .iter()
        .zip(norm.iter())
        .map(|(&v, &w)| if w > 1e-8 { v / w } else { 0.0 })
        .collect();
    res.resize(out_len, 0.0);
    res
}

/// Pitch shift by ratio `t` (dominant frequencies multiply by `t`), duration
/// preserved: resample by 1/t, then phase-vocoder time-stretch by t.
pub fn pitch_shift(clip: &AudioClip, t: f64) -> Result<AudioClip> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("pitch factor must be > 0, got {t}")));
    }
    if (t - 1.0).abs() < 1e-12 {
        let mut c = clip.clone();
        c.shift_factor = 1.0;
        return Ok(c);
    }
    let resampled = resample_buffer(&clip.samples, 1.0 / t);
    let mut stretched = time_stretch(&resampled, t);
    stretched.resize(clip.samples.len(), 0.0);
    AudioClip::new(
        stretched,
        clip.sample_rate,
        clip.label.clone(),
        clip.source_id.clone(),
        t,
    )
}

/// A skipped clip/factor combination with the failure message.
#[derive(Debug, Clone)]
pub struct AugmentFailure {
    pub source_id: String,
    pub factor: f64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct AugmentResult {
    /// Originals first (input order), then the crafted clips grouped per
    /// original in factor order.
    pub clips: Vec<AudioClip>,
    pub failures: Vec<AugmentFailure>,
}

/// Expands a dataset with pitch-shifted copies: output size is
/// |clips| * (1 + |factors|) minus reported failures.
pub fn augment_dataset(clips: &[AudioClip], factors: &[f64]) -> Result<AugmentResult> {
    if factors.is_empty() {
        return Err(Error::Parameter("pitch factor list is empty".into()));
    }
    for &f in factors {
        if !(f > 0.0) {
            return Err(Error::Parameter(format!("pitch factor {f} must be > 0")));
        }
        if (f - 1.0).abs() < 1e-12 {
            return Err(Error::Parameter(
                "pitch factor 1.0 would duplicate originals".into(),
            ));
        }
    }

    let jobs: Vec<(usize, f64)> = clips
        .iter()
        .enumerate()
        .flat_map(|(i, _)| factors.iter().map(move |&f| (i, f)))
        .collect();
    let shifted: Vec<std::result::Result<AudioClip, AugmentFailure>> = jobs
        .par_iter()
        .map(|&(i, f)| {
            pitch_shift(&clips[i], f).map_err(|e| AugmentFailure {
                source_id: clips[i].source_id.clone(),
                factor: f,
                message: e.to_string(),
            })
        })
        .collect();

    let mut result = AugmentResult::default();
    result.clips.extend(clips.iter().cloned());
    for item in shifted {
        match item {
            Ok(c) => result.clips.push(c),
            Err(f) => result.failures.push(f),
        }
    }
    Ok(result)
}

/// Sine test helper shared by unit and acceptance tests.
pub fn sine_clip(freq: f64, rate: u32, secs: f64, amp: f64, id: &str) -> AudioClip {
    let n = (secs * rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    AudioClip::new(samples, rate, None, id, 1.0).expect("sine parameters are valid")
}
