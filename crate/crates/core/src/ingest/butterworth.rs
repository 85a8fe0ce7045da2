//! Causal digital Butterworth low-pass as a cascade of bilinear-transformed
//! sections in transposed direct form II.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
struct Section {
    b: [f64; 3],
    a: [f64; 2],
    s: [f64; 2],
}

impl Section {
    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.s[0];
        self.s[0] = self.b[1] * x - self.a[0] * y + self.s[1];
        self.s[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Low-pass filter with maximally flat passband and unit DC gain.
#[derive(Debug, Clone)]
pub struct Butterworth {
    sections: Vec<Section>,
    order: usize,
    cutoff: f64,
    fs: f64,
}

impl Butterworth {
    pub const MIN_ORDER: usize = 2;
    pub const MAX_ORDER: usize = 8;

    /// `cutoff` is the 3-dB frequency and `fs` the sample rate, both in Hz.
    pub fn new(order: usize, cutoff: f64, fs: f64) -> Result<Self> {
        if !(Self::MIN_ORDER..=Self::MAX_ORDER).contains(&order) {
            return Err(Error::Precondition(format!(
                "Butterworth order must be in {}..={}, got {order}",
                Self::MIN_ORDER,
                Self::MAX_ORDER
            )));
        }
        if !(cutoff > 0.0 && cutoff < 0.5 * fs) {
            return Err(Error::Precondition(format!(
                "cutoff {cutoff} Hz must lie in (0, fs/2) for fs = {fs} Hz"
            )));
        }
        let k = (PI * cutoff / fs).tan();
        let k2 = k * k;
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        for i in 1..=order / 2 {
            let q = 1.0 / (2.0 * ((2 * i - 1) as f64 * PI / (2 * order) as f64).sin());
            let norm = 1.0 / (1.0 + k / q + k2);
            let b0 = k2 * norm;
            sections.push(Section {
                b: [b0, 2.0 * b0, b0],
                a: [2.0 * (k2 - 1.0) * norm, (1.0 - k / q + k2) * norm],
                s: [0.0; 2],
            });
        }
        if order % 2 == 1 {
            let norm = 1.0 / (1.0 + k);
            sections.push(Section {
                b: [k * norm, k * norm, 0.0],
                a: [(k - 1.0) * norm, 0.0],
                s: [0.0; 2],
            });
        }
        Ok(Butterworth {
            sections,
            order,
            cutoff,
            fs,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn sample_rate(&self) -> f64 {
        self.fs
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        self.sections.iter_mut().fold(x, |acc, s| s.process(acc))
    }

    pub fn reset(&mut self) {
        for s in &mut self.sections {
            s.s = [0.0; 2];
        }
    }

    /// First `n` samples of the response to a unit impulse at sample 0.
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut f = self.clone();
        f.reset();
        (0..n).map(|i| f.process(if i == 0 { 1.0 } else { 0.0 })).collect()
    }

    /// Magnitude of the frequency response at `f` Hz.
    pub fn gain(&self, f: f64) -> f64 {
        let w = 2.0 * PI * f / self.fs;
        let (z1, z2) = ((-w).sin_cos(), (-2.0 * w).sin_cos());
        let mut g = 1.0;
        for s in &self.sections {
            let num = (
                s.b[0] + s.b[1] * z1.1 + s.b[2] * z2.1,
                s.b[1] * z1.0 + s.b[2] * z2.0,
            );
            let den = (1.0 + s.a[0] * z1.1 + s.a[1] * z2.1, s.a[0] * z1.0 + s.a[1] * z2.0);
            g *= (num.0.hypot(num.1)) / (den.0.hypot(den.1));
        }
        g
    }

    /// Equivalent noise bandwidth of the analog prototype, in Hz.
    pub fn analog_noise_bandwidth(&self) -> f64 {
        let x = PI / (2.0 * self.order as f64);
        self.cutoff * x / x.sin()
    }
}
