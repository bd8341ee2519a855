//! Scalar radix-2 FFT.
//!
//! Deliberately plain f64 code (no SIMD dispatch) so transforms — and every
//! artifact derived from them — are bit-identical across platforms.

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    pub fn scale(self, k: f64) -> Complex {
        Complex {
            re: self.re * k,
            im: self.im * k,
        }
    }

    pub fn norm_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.norm_sq().sqrt()
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

fn transform(buf: &mut [Complex], invert: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }

    let sign = if invert { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex::new(ang.cos(), ang.sin());
        let half = len / 2;
        let mut i = 0;
        while i < n {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..half {
                let u = buf[i + k];
                let v = buf[i + k + half].mul(w);
                buf[i + k] = Complex::new(u.re + v.re, u.im + v.im);
                buf[i + k + half] = Complex::new(u.re - v.re, u.im - v.im);
                w = w.mul(wlen);
            }
            i += len;
        }
        len <<= 1;
    }

    if invert {
        let inv = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v = v.scale(inv);
        }
    }
}

/// In-place forward FFT; `buf.len()` must be a power of two.
pub fn fft(buf: &mut [Complex]) {
    transform(buf, false);
}

/// In-place inverse FFT (includes the 1/N scale).
pub fn ifft(buf: &mut [Complex]) {
    transform(buf, true);
}

/// Magnitude spectrum of a real signal, Hann-windowed and zero-padded to the
/// next power of two. Returns (bin magnitudes, bin width in Hz).
pub fn magnitude_spectrum(samples: &[f64], sample_rate: u32) -> (Vec<f64>, f64) {
    let n = next_pow2(samples.len().max(2));
    let mut buf = vec![Complex::ZERO; n];
    let m = samples.len();
    for (i, &s) in samples.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / m as f64).cos();
        buf[i] = Complex::new(s * w, 0.0);
    }
    fft(&mut buf);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.abs()).collect();
    (mags, sample_rate as f64 / n as f64)
}

/// Dominant frequency of a real signal in Hz, refined by parabolic
/// interpolation around the spectral peak.
pub fn dominant_frequency(samples: &[f64], sample_rate: u32) -> f64 {
    let (mags, bin_hz) = magnitude_spectrum(samples, sample_rate);
    let mut best = 1usize;
    for (i, &m) in mags.iter().enumerate().skip(1) {
        if m > mags[best] {
            best = i;
        }
    }
    let mut delta = 0.0;
    if best > 0 && best + 1 < mags.len() {
        let (a, b, c) = (mags[best - 1], mags[best], mags[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            delta = 0.5 * (a - c) / denom;
        }
    }
    (best as f64 + delta) * bin_hz
}
