//! Baseband symbol generators for the supported modulation schemes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Samples per symbol for the continuous-phase schemes.
const FSK_SPS: usize = 4;
/// Modulation index shared by CPFSK and GFSK.
const FSK_INDEX: f64 = 0.5;
/// Gaussian filter bandwidth-time product for GFSK.
const GFSK_BT: f64 = 0.35;
/// Modulation depth of the AM-DSB source.
const AM_DEPTH: f64 = 0.5;
/// Width (in samples) of the smoothing kernel that band-limits the AM source.
const AM_SMOOTHING: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "8PSK")]
    Psk8,
    #[serde(rename = "PAM4")]
    Pam4,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "CPFSK")]
    Cpfsk,
    #[serde(rename = "GFSK")]
    Gfsk,
    #[serde(rename = "AM-DSB")]
    AmDsb,
}

impl Modulation {
    pub const ALL: [Modulation; 8] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Pam4,
        Modulation::Qam16,
        Modulation::Cpfsk,
        Modulation::Gfsk,
        Modulation::AmDsb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Pam4 => "PAM4",
            Modulation::Qam16 => "QAM16",
            Modulation::Cpfsk => "CPFSK",
            Modulation::Gfsk => "GFSK",
            Modulation::AmDsb => "AM-DSB",
        }
    }

    /// Draws `len` complex baseband samples as `(re, im)` pairs with unit
    /// average power (before any channel).
    pub fn symbols<R: Rng + ?Sized>(self, len: usize, rng: &mut R) -> Vec<(f64, f64)> {
        match self {
            Modulation::Bpsk => psk(2, 0.0, len, rng),
            Modulation::Qpsk => psk(4, PI / 4.0, len, rng),
            Modulation::Psk8 => psk(8, 0.0, len, rng),
            Modulation::Pam4 => {
                let scale = 1.0 / 5f64.sqrt();
                (0..len)
                    .map(|_| {
                        let level = [-3.0, -1.0, 1.0, 3.0][rng.random_range(0..4)];
                        (level * scale, 0.0)
                    })
                    .collect()
            }
            Modulation::Qam16 => {
                let scale = 1.0 / 10f64.sqrt();
                let levels = [-3.0, -1.0, 1.0, 3.0];
                (0..len)
                    .map(|_| {
                        let i = levels[rng.random_range(0..4)];
                        let q = levels[rng.random_range(0..4)];
                        (i * scale, q * scale)
                    })
                    .collect()
            }
            Modulation::Cpfsk => {
                let freq = fsk_frequencies(len, rng);
                integrate_phase(&freq)
            }
            Modulation::Gfsk => {
                let freq = fsk_frequencies(len, rng);
                let sigma = (2f64.ln()).sqrt() / (2.0 * PI * GFSK_BT) * FSK_SPS as f64;
                integrate_phase(&gaussian_smooth(&freq, sigma))
            }
            Modulation::AmDsb => {
                let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
                let mut message = gaussian_smooth(&white, AM_SMOOTHING);
                let var = message.iter().map(|m| m * m).sum::<f64>() / len as f64;
                let norm = if var > 0.0 { var.sqrt() } else { 1.0 };
                for m in &mut message {
                    *m /= norm;
                }
                let power = 1.0 + AM_DEPTH * AM_DEPTH;
                message
                    .into_iter()
                    .map(|m| ((1.0 + AM_DEPTH * m) / power.sqrt(), 0.0))
                    .collect()
            }
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_uppercase().replace('_', "-");
        Modulation::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "AMDSB" && *m == Modulation::AmDsb))
            .ok_or_else(|| Error::Scheme(s.to_string()))
    }
}

fn psk<R: Rng + ?Sized>(order: usize, offset: f64, len: usize, rng: &mut R) -> Vec<(f64, f64)> {
    (0..len)
        .map(|_| {
            let k = rng.random_range(0..order) as f64;
            let phase = offset + 2.0 * PI * k / order as f64;
            if order == 4 && offset != 0.0 {
                // exact (±1, ±1)/√2 points
                (
                    phase.cos().signum() * FRAC_1_SQRT_2,
                    phase.sin().signum() * FRAC_1_SQRT_2,
                )
            } else {
                // snap the ±1e-16 residue of cos/sin at multiples of π/2
                let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
                (snap(phase.cos()), snap(phase.sin()))
            }
        })
        .collect()
}

fn fsk_frequencies<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let n_symbols = len.div_ceil(FSK_SPS);
    let symbols: Vec<f64> = (0..n_symbols)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    (0..len).map(|n| symbols[n / FSK_SPS]).collect()
}

fn integrate_phase(freq: &[f64]) -> Vec<(f64, f64)> {
    let step = PI * FSK_INDEX / FSK_SPS as f64;
    let mut phase = 0.0;
    freq.iter()
        .map(|f| {
            phase += step * f;
            (phase.cos(), phase.sin())
        })
        .collect()
}

/// Convolves with a normalized Gaussian kernel (edge samples renormalized).
fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let idx = i + j as isize - half;
                if (0..n).contains(&idx) {
                    acc += w * x[idx as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}
