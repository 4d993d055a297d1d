//! Synthetic modulated-signal datasets.
//!
//! A received window is `r = h·s + n` for a flat complex channel tap `h`,
//! baseband symbols `s` and circular complex Gaussian noise `n` whose power
//! is set from the requested SNR. Every window is then scaled to unit energy
//! and stored as an `ℓ×2` real matrix in row-major `[I₀, Q₀, I₁, Q₁, …]`
//! order.

mod io;
mod modulation;

pub(crate) use io::Cursor;
pub use io::{read_dataset_bin, read_dataset_csv, write_dataset_bin, write_dataset_csv};
pub use modulation::Modulation;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest window the generators accept.
pub const MIN_LENGTH: usize = 8;

/// One labelled IQ window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    /// Row-major `ℓ×2` matrix.
    pub iq: Vec<f64>,
    pub label: usize,
    /// `f64::INFINITY` marks a noiseless sample.
    pub snr_db: f64,
}

impl SignalSample {
    pub fn length(&self) -> usize {
        self.iq.len() / 2
    }

    pub fn energy(&self) -> f64 {
        self.iq.iter().map(|v| v * v).sum()
    }

    pub fn in_phase(&self) -> impl Iterator<Item = f64> + '_ {
        self.iq.iter().step_by(2).copied()
    }

    pub fn quadrature(&self) -> impl Iterator<Item = f64> + '_ {
        self.iq.iter().skip(1).step_by(2).copied()
    }
}

/// Channel applied between transmitter and receiver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// One complex tap per window, `h ~ CN(0, 1)`: Rayleigh magnitude with
    /// uniform phase.
    #[default]
    Rayleigh,
    /// `h = 1`.
    Identity,
}

/// A synthesized sample along with its signal and noise parts, both scaled
/// by the same normalization factor as the sample.
#[derive(Debug, Clone)]
pub struct SynthParts {
    pub sample: SignalSample,
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Labelled collection of equal-length samples with dense class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<SignalSample>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<SignalSample>, class_count: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            let len = first.iq.len();
            for (i, s) in samples.iter().enumerate() {
                if s.iq.len() != len {
                    return Err(Error::dim(format!(
                        "sample {i} has {} reals, expected {len}",
                        s.iq.len()
                    )));
                }
                if s.label >= class_count {
                    return Err(Error::Config(format!(
                        "sample {i} has label {} but class_count is {class_count}",
                        s.label
                    )));
                }
            }
        }
        Ok(Self { samples, class_count })
    }

    pub fn empty(class_count: usize) -> Self {
        Self {
            samples: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Window length ℓ, or 0 for an empty dataset.
    pub fn length(&self) -> usize {
        self.samples.first().map_or(0, SignalSample::length)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for s in &self.samples {
            hist[s.label] += 1;
        }
        hist
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        self.class_histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn extend(&mut self, other: LabeledDataset) {
        self.samples.extend(other.samples);
    }
}

/// Synthesizes one unit-energy window. `snr_db = f64::INFINITY` disables
/// noise.
pub fn synth_signal<R: Rng + ?Sized>(
    scheme: Modulation,
    snr_db: f64,
    length: usize,
    channel: Channel,
    rng: &mut R,
) -> Result<SignalSample> {
    synth_components(scheme, snr_db, length, channel, rng).map(|p| p.sample)
}

/// Like [`synth_signal`] but also returns the normalized signal and noise
/// components, which sum to the sample.
pub fn synth_components<R: Rng + ?Sized>(
    scheme: Modulation,
    snr_db: f64,
    length: usize,
    channel: Channel,
    rng: &mut R,
) -> Result<SynthParts> {
    if length < MIN_LENGTH {
        return Err(Error::dim(format!(
            "window length {length} is below the minimum of {MIN_LENGTH}"
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!("invalid SNR {snr_db}")));
    }

    let symbols = scheme.symbols(length, rng);
    let (hr, hi) = match channel {
        Channel::Rayleigh => {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            (a * std::f64::consts::FRAC_1_SQRT_2, b * std::f64::consts::FRAC_1_SQRT_2)
        }
        Channel::Identity => (1.0, 0.0),
    };

    let mut signal = Vec::with_capacity(2 * length);
    for (sr, si) in symbols {
        signal.push(hr * sr - hi * si);
        signal.push(hr * si + hi * sr);
    }
    let signal_power = signal.iter().map(|v| v * v).sum::<f64>() / length as f64;

    let noise: Vec<f64> = if snr_db.is_finite() {
        let noise_power = signal_power / db_to_linear(snr_db);
        let sigma = (noise_power / 2.0).sqrt();
        (0..2 * length)
            .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    } else {
        vec![0.0; 2 * length]
    };

    let mut iq: Vec<f64> = signal.iter().zip(&noise).map(|(s, n)| s + n).collect();
    let energy: f64 = iq.iter().map(|v| v * v).sum();
    if !(energy > 0.0) {
        return Err(Error::Config("synthesized window has zero energy".into()));
    }
    let scale = energy.sqrt().recip();
    for v in &mut iq {
        *v *= scale;
    }
    let signal = signal.into_iter().map(|v| v * scale).collect();
    let noise = noise.into_iter().map(|v| v * scale).collect();

    Ok(SynthParts {
        sample: SignalSample { iq, label: 0, snr_db },
        signal,
        noise,
    })
}

/// Balanced dataset: `per_class` samples for every (scheme, SNR) pair.
/// Labels are positions in `schemes`.
pub fn build_dataset<R: Rng + ?Sized>(
    schemes: &[Modulation],
    per_class: usize,
    snr_levels: &[f64],
    length: usize,
    channel: Channel,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if schemes.is_empty() {
        return Err(Error::Config("no modulation schemes given".into()));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if snr_levels.is_empty() {
        return Err(Error::Config("no SNR levels given".into()));
    }
    let mut samples = Vec::with_capacity(schemes.len() * per_class * snr_levels.len());
    for (label, &scheme) in schemes.iter().enumerate() {
        for &snr in snr_levels {
            for _ in 0..per_class {
                let mut s = synth_signal(scheme, snr, length, channel, rng)?;
                s.label = label;
                samples.push(s);
            }
        }
    }
    LabeledDataset::new(samples, schemes.len())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Perturbation-to-noise ratio from the perturbation-to-signal ratio and SNR,
/// all in dB.
pub fn pnr_db(psr_db: f64, snr_db: f64) -> f64 {
    psr_db + snr_db
}

/// Share of a sample's energy attributable to the signal at the given SNR.
pub fn signal_power(sample: &SignalSample, snr_db: f64) -> f64 {
    let energy = sample.energy();
    if snr_db == f64::INFINITY {
        energy
    } else {
        let snr = db_to_linear(snr_db);
        energy * snr / (1.0 + snr)
    }
}

/// Perturbation power for a given PSR (dB) and signal power.
pub fn perturbation_power(psr_db: f64, signal_power: f64) -> f64 {
    db_to_linear(psr_db) * signal_power
}

/// Perturbation power that realizes `pnr_db` on a sample received at
/// `snr_db`.
pub fn perturbation_power_for_pnr(pnr_db: f64, snr_db: f64, sample: &SignalSample) -> f64 {
    let sp = signal_power(sample, snr_db);
    if snr_db == f64::INFINITY {
        // PSR is undefined without noise; treat PNR as PSR.
        return perturbation_power(pnr_db, sp);
    }
    perturbation_power(pnr_db - snr_db, sp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    fn rng() -> crate::rng::SimRng {
        stream(11, Domain::Dataset, 0)
    }

    #[test]
    fn noiseless_bpsk_is_antipodal() {
        let s = synth_signal(Modulation::Bpsk, f64::INFINITY, 32, Channel::Identity, &mut rng()).unwrap();
        assert!(s.quadrature().all(|q| q == 0.0));
        let c = s.iq[0].abs();
        assert!(c > 0.0);
        for i in s.in_phase() {
            assert!((i.abs() - c).abs() < 1e-15);
        }
        assert!((c - (1.0f64 / 32.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn every_sample_has_unit_energy() {
        let mut r = rng();
        for m in Modulation::ALL {
            for snr in [0.0, 8.0, 10.0, f64::INFINITY] {
                let s = synth_signal(m, snr, 32, Channel::Rayleigh, &mut r).unwrap();
                assert!((s.energy() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn short_windows_are_rejected() {
        let err = synth_signal(Modulation::Qpsk, 10.0, 7, Channel::Rayleigh, &mut rng());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn empirical_snr_matches_target() {
        // Ground-truth components are returned alongside each sample, so the
        // estimate compares their powers directly.
        let mut r = rng();
        let mut sig = 0.0;
        let mut noise = 0.0;
        for i in 0..10_000 {
            let m = Modulation::ALL[i % Modulation::ALL.len()];
            let p = synth_components(m, 10.0, 64, Channel::Rayleigh, &mut r).unwrap();
            sig += p.signal.iter().map(|v| v * v).sum::<f64>();
            noise += p.noise.iter().map(|v| v * v).sum::<f64>();
            let recon: f64 = p
                .sample
                .iq
                .iter()
                .zip(p.signal.iter().zip(&p.noise))
                .map(|(x, (s, n))| (x - s - n).abs())
                .sum();
            assert!(recon < 1e-12);
        }
        let est = 10.0 * (sig / noise).log10();
        assert!((est - 10.0).abs() < 1.0, "estimated SNR {est}");
    }

    #[test]
    fn dataset_counts() {
        let ds = build_dataset(
            &[Modulation::Bpsk, Modulation::Qam16],
            5,
            &[10.0],
            16,
            Channel::Rayleigh,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.class_histogram(), vec![5, 5]);

        let ds = build_dataset(&Modulation::ALL, 100, &[8.0, 10.0], 16, Channel::Rayleigh, &mut rng()).unwrap();
        assert_eq!(ds.len(), 1600);
        assert_eq!(ds.class_histogram(), vec![200; 8]);
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let a = build_dataset(&Modulation::ALL, 3, &[8.0], 16, Channel::Rayleigh, &mut rng()).unwrap();
        let b = build_dataset(&Modulation::ALL, 3, &[8.0], 16, Channel::Rayleigh, &mut rng()).unwrap();
        let bits = |d: &LabeledDataset| -> Vec<u64> {
            d.samples
                .iter()
                .flat_map(|s| s.iq.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn dataset_errors() {
        assert!(matches!(
            build_dataset(&[], 5, &[8.0], 16, Channel::Rayleigh, &mut rng()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_dataset(&[Modulation::Bpsk], 0, &[8.0], 16, Channel::Rayleigh, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pnr_examples() {
        assert_eq!(pnr_db(-2.0, 10.0), 8.0);
        assert_eq!(pnr_db(0.0, 0.0), 0.0);
        assert_eq!(pnr_db(-4.0, 8.0), 4.0);
    }

    #[test]
    fn perturbation_power_examples() {
        // 0 dB SNR puts half of a unit-energy sample in the signal.
        let s = synth_signal(Modulation::Qpsk, 0.0, 16, Channel::Rayleigh, &mut rng()).unwrap();
        assert!((signal_power(&s, 0.0) - 0.5).abs() < 1e-12);
        assert!((perturbation_power_for_pnr(0.0, 0.0, &s) - 0.5).abs() < 1e-12);
        assert!((perturbation_power(-10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((perturbation_power(-3.0, 1.0) - 0.501_187_233_627_272_3).abs() < 1e-12);
    }

    #[test]
    fn high_power_attack_at_matching_pnr_equals_signal_power() {
        let s = synth_signal(Modulation::Psk8, 8.0, 32, Channel::Rayleigh, &mut rng()).unwrap();
        let p = perturbation_power_for_pnr(8.0, 8.0, &s);
        let snr = db_to_linear(8.0);
        assert!((p - snr / (1.0 + snr)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pnr_inverts(psr in -40.0f64..40.0, snr in -20.0f64..30.0) {
            let diff = pnr_db(psr, snr) - snr;
            prop_assert!((diff - psr).abs() <= 1e-12 * (1.0 + psr.abs() + snr.abs()));
        }
    }
}
