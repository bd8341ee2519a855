//! DWT power scalograms and 8-bit spectrogram rendering.
//!
//! A clip is convolved with a bank of scaled Morlet wavelets (evaluated in
//! the frequency domain), sampled at frame centers, squared, compressed to
//! dB and quantized to an 8-bit image, then enhanced by histogram
//! equalization. Images persist as binary PGM (P5), bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::fft::{self, Complex};

/// Morlet center frequency parameter.
const OMEGA0: f64 = 6.0;
const DB_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalogramConfig {
    /// Output columns (time axis).
    pub width: usize,
    /// Output rows: one wavelet scale per row, log-spaced scale_min..scale_max.
    pub height: usize,
    /// Analysis frame length in milliseconds.
    pub frame_ms: f64,
    /// Frame overlap fraction; the pipeline uses 0.5 throughout.
    pub overlap: f64,
    /// Smallest wavelet scale (row 0 = highest frequency).
    pub scale_min: f64,
    /// Largest wavelet scale (bottom row = lowest frequency).
    pub scale_max: f64,
}

impl ScalogramConfig {
    /// Scales derived from a frequency band: row 0 maps to `freq_max`
    /// (clamped to Nyquist), the last row to `freq_min`.
    pub fn from_freq_band(
        width: usize,
        height: usize,
        frame_ms: f64,
        sample_rate: u32,
        freq_min: f64,
        freq_max: f64,
    ) -> Result<Self> {
        if freq_min <= 0.0 || freq_max <= freq_min {
            return Err(Error::Parameter("need 0 < freq_min < freq_max".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_hi = freq_max.min(nyquist);
        let fs = sample_rate as f64;
        let cfg = ScalogramConfig {
            width,
            height,
            frame_ms,
            overlap: 0.5,
            scale_min: OMEGA0 * fs / (2.0 * std::f64::consts::PI * f_hi),
            scale_max: OMEGA0 * fs / (2.0 * std::f64::consts::PI * freq_min),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Paper-scale rendering: 768x384 over 20 Hz..Nyquist.
    pub fn full_scale(sample_rate: u32, frame_ms: f64) -> Self {
        ScalogramConfig::from_freq_band(768, 384, frame_ms, sample_rate, 20.0, 1e9)
            .expect("fixed band parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("scalogram dimensions must be positive".into()));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::Parameter(format!(
                "overlap must be in (0,1), got {}",
                self.overlap
            )));
        }
        if !(self.frame_ms > 0.0) {
            return Err(Error::Parameter("frame_ms must be positive".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max) {
            return Err(Error::Parameter(
                "need 0 < scale_min < scale_max".into(),
            ));
        }
        Ok(())
    }

    /// Wavelet scale for a row, log-spaced.
    pub fn scale_at_row(&self, row: usize) -> f64 {
        if self.height == 1 {
            return self.scale_min;
        }
        let t = row as f64 / (self.height - 1) as f64;
        self.scale_min * (self.scale_max / self.scale_min).powf(t)
    }

    /// Closest row for a tone at `freq_hz`, from the Morlet scale-frequency
    /// correspondence a = omega0 * fs / (2*pi*f).
    pub fn row_for_frequency(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        let a = OMEGA0 * sample_rate as f64 / (2.0 * std::f64::consts::PI * freq_hz);
        (self.height - 1) as f64 * (a / self.scale_min).ln()
            / (self.scale_max / self.scale_min).ln()
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        ((self.frame_ms / 1000.0) * sample_rate as f64).round().max(2.0) as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        let frame = self.frame_len(sample_rate);
        ((frame as f64) * (1.0 - self.overlap)).round().max(1.0) as usize
    }
}

/// Non-negative power values, height x width row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PowerGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// 8-bit intensity image with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub pixels: Vec<u8>,
    pub config: ScalogramConfig,
    pub clip_id: String,
    pub label: Option<String>,
}

impl Spectrogram {
    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width() + col]
    }

    pub fn from_pixels(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        clip_id: impl Into<String>,
        label: Option<String>,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels do not fill {height}x{width}",
                pixels.len()
            )));
        }
        let mut config = ScalogramConfig {
            width,
            height,
            frame_ms: 50.0,
            overlap: 0.5,
            scale_min: 1.0,
            scale_max: 2.0,
        };
        config.width = width;
        config.height = height;
        Ok(Spectrogram {
            pixels,
            config,
            clip_id: clip_id.into(),
            label,
        })
    }
}

/// DWT power scalogram: row r holds |wavelet convolution at scale(r)|^2
/// sampled at frame centers (50% hop). Short clips are loop-padded until the
/// frame grid fills `width` columns; longer clips are nearest-neighbor
/// resampled along the frame axis to exactly `width` columns.
pub fn dwt_power(clip: &AudioClip, cfg: &ScalogramConfig) -> Result<PowerGrid> {
    cfg.validate()?;
    let frame = cfg.frame_len(clip.sample_rate);
    let hop = cfg.hop(clip.sample_rate);
    if clip.samples.len() < frame {
        return Err(Error::InputTooShort {
            needed: frame,
            got: clip.samples.len(),
        });
    }

    let frames_avail = (clip.samples.len() - frame) / hop + 1;
    let mut samples: Vec<f64>;
    let n_frames;
    if frames_avail < cfg.width {
        let needed = (cfg.width - 1) * hop + frame;
        samples = Vec::with_capacity(needed);
        while samples.len() < needed {
            let take = (needed - samples.len()).min(clip.samples.len());
            samples.extend_from_slice(&clip.samples[..take]);
        }
        n_frames = cfg.width;
    } else {
        samples = clip.samples.clone();
        n_frames = frames_avail;
    }

    // Frame centers, downselected to `width` columns when over-long.
    let centers: Vec<usize> = (0..cfg.width)
        .map(|col| {
            let f = if n_frames == cfg.width {
                col
            } else {
                ((col as f64 + 0.5) * n_frames as f64 / cfg.width as f64).floor() as usize
            }
            .min(n_frames - 1);
            f * hop + frame / 2
        })
        .collect();

    let n = fft::next_pow2(samples.len());
    let mut spectrum = vec![Complex::ZERO; n];
    for (i, &s) in samples.iter().enumerate() {
        spectrum[i] = Complex::new(s, 0.0);
    }
    fft::fft(&mut spectrum);

    let mut grid = vec![0.0f64; cfg.height * cfg.width];
    let norm = std::f64::consts::PI.powf(-0.25);
    grid.par_chunks_mut(cfg.width)
        .enumerate()
        .for_each(|(row, out_row)| {
            let a = cfg.scale_at_row(row);
            let mut band = vec![Complex::ZERO; n];
            // analytic Morlet: support on positive frequencies only
            for (k, b) in band.iter_mut().enumerate().take(n / 2 + 1) {
                let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let g = (2.0 * a).sqrt() * norm * (-(a * omega - OMEGA0).powi(2) / 2.0).exp();
                *b = spectrum[k].scale(g);
            }
            fft::ifft(&mut band);
            for (col, &c) in centers.iter().enumerate() {
                out_row[col] = band[c].norm_sq();
            }
        });

    Ok(PowerGrid {
        height: cfg.height,
        width: cfg.width,
        data: grid,
    })
}

/// dB compression 10*log10(p + 1e-10) followed by an affine min-max map onto
/// {0..255} with floor rounding; a constant grid maps to the all-zero image.
pub fn to_image(
    power: &PowerGrid,
    cfg: &ScalogramConfig,
    clip_id: impl Into<String>,
    label: Option<String>,
) -> Result<Spectrogram> {
    if power.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Parameter("power grid must be non-negative".into()));
    }
    let db: Vec<f64> = power.data.iter().map(|&p| 10.0 * (p + DB_EPS).log10()).collect();
    let lo = db.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = if span <= 0.0 {
        vec![0u8; db.len()]
    } else {
        db.iter()
            .map(|&v| (((v - lo) / span) * 255.0).floor().clamp(0.0, 255.0) as u8)
            .collect()
    };
    let mut out_cfg = *cfg;
    out_cfg.height = power.height;
    out_cfg.width = power.width;
    Ok(Spectrogram {
        pixels,
        config: out_cfg,
        clip_id: clip_id.into(),
        label,
    })
}

/// Histogram equalization: out = floor(255 * cdf(intensity)). Monotone
/// non-decreasing in the input intensity and exactly idempotent.
pub fn hist_equalize(img: &Spectrogram) -> Spectrogram {
    let total = img.pixels.len() as f64;
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut map = [0u8; 256];
    let mut cum = 0u64;
    for v in 0..256 {
        cum += hist[v];
        map[v] = (255.0 * (cum as f64 / total)).floor().min(255.0) as u8;
    }
    Spectrogram {
        pixels: img.pixels.iter().map(|&p| map[p as usize]).collect(),
        config: img.config,
        clip_id: img.clip_id.clone(),
        label: img.label.clone(),
    }
}

/// Writes a binary PGM (P5, maxval 255).
pub fn write_pgm(img: &Spectrogram, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width(), img.height())?;
    f.write_all(&img.pixels)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]; the clip id defaults to the
/// file stem.
pub fn read_pgm(path: &Path) -> Result<Spectrogram> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push_str(&line);
    }
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(Error::Data(format!("{}: not a binary PGM", path.display())));
    }
    let w: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Data("bad PGM width".into()))?;
    let h: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Data("bad PGM height".into()))?;
    let maxval: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Data("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data("PGM maxval must be 255".into()));
    }
    let mut pixels = vec![0u8; w * h];
    r.read_exact(&mut pixels)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Spectrogram::from_pixels(h, w, pixels, id, None)
}
