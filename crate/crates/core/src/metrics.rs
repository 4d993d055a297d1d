//! Evaluation metrics: confusion matrices, detection false positives and
//! paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::neural::{predict, ModelParams};
use crate::sigsyn::LabeledDataset;

/// `C×C` counts; entry `(i, j)` counts true class `i` predicted as `j`.
pub fn confusion_matrix(params: &ModelParams, test: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = test.class_count.max(params.arch().output_dim);
    let mut m = vec![vec![0usize; c]; c];
    for s in &test.samples {
        m[s.label][predict(params, &s.iq)?] += 1;
    }
    Ok(m)
}

/// Server's perceived adversary set in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub round: usize,
    /// Ids of the devices active in this round.
    pub devices: Vec<usize>,
    pub perceived: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpStats {
    /// Mean number of honest devices flagged per sampled round.
    pub nominal: f64,
    /// `nominal` as a percentage of the honest devices.
    pub rate: f64,
    pub samples: usize,
}

/// `nominal / honest · 100`.
pub fn fp_rate(nominal: f64, honest: f64) -> f64 {
    if honest > 0.0 {
        nominal / honest * 100.0
    } else {
        0.0
    }
}

/// False positives sampled every `window` entries of `log` (starting at the
/// first entry).
pub fn false_positive_stats(log: &[Detection], true_adversaries: &[usize], window: usize) -> FpStats {
    let window = window.max(1);
    let mut flagged = 0.0;
    let mut honest = 0.0;
    let mut samples = 0;
    for d in log.iter().step_by(window) {
        flagged += d.perceived.iter().filter(|id| !true_adversaries.contains(id)).count() as f64;
        honest += d.devices.iter().filter(|id| !true_adversaries.contains(id)).count() as f64;
        samples += 1;
    }
    if samples == 0 {
        return FpStats {
            nominal: 0.0,
            rate: 0.0,
            samples: 0,
        };
    }
    let nominal = flagged / samples as f64;
    FpStats {
        nominal,
        rate: fp_rate(nominal, honest / samples as f64),
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
}

/// Two-sided paired t-test of `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "paired series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        return Err(Error::DegenerateTest);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        // constant non-zero difference: infinitely significant
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            dof,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Config(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, p, dof })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ArchSpec;
    use crate::sigsyn::SignalSample;

    fn two_class_identity() -> ModelParams {
        ModelParams::unflatten(ArchSpec::linear(2, 2), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()
    }

    fn ds(rows: &[([f64; 2], usize)]) -> LabeledDataset {
        LabeledDataset::new(
            rows.iter()
                .map(|(iq, l)| SignalSample {
                    iq: iq.to_vec(),
                    label: *l,
                    snr_db: 10.0,
                })
                .collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn confusion_examples() {
        let p = two_class_identity();
        let perfect = ds(&[([1.0, 0.0], 0), ([0.0, 1.0], 1), ([2.0, 0.0], 0)]);
        assert_eq!(confusion_matrix(&p, &perfect).unwrap(), vec![vec![2, 0], vec![0, 1]]);

        let one_error = ds(&[([1.0, 0.0], 0), ([0.0, 1.0], 1), ([0.0, 3.0], 0), ([0.2, 0.9], 1)]);
        assert_eq!(confusion_matrix(&p, &one_error).unwrap(), vec![vec![1, 1], vec![0, 2]]);

        let constant = ModelParams::unflatten(
            ArchSpec::linear(2, 2),
            &[0.0; 4].iter().copied().chain([1.0, 0.0]).collect::<Vec<_>>(),
        )
        .unwrap();
        let m = confusion_matrix(&constant, &one_error).unwrap();
        assert_eq!(m, vec![vec![2, 0], vec![2, 0]]);
        assert!(matches!(
            confusion_matrix(&p, &LabeledDataset::empty(2)),
            Err(Error::EmptyDataset)
        ));
    }

    fn log(perceived: Vec<usize>, rounds: usize) -> Vec<Detection> {
        (0..rounds)
            .map(|r| Detection {
                round: r,
                devices: (0..10).collect(),
                perceived: perceived.clone(),
            })
            .collect()
    }

    #[test]
    fn false_positive_examples() {
        let adv = [0, 1, 2];
        let none = false_positive_stats(&log(vec![], 20), &adv, 5);
        assert_eq!((none.nominal, none.rate), (0.0, 0.0));
        let all = false_positive_stats(&log((3..10).collect(), 20), &adv, 5);
        assert_eq!((all.nominal, all.rate), (7.0, 100.0));
        assert_eq!(all.samples, 4);
        // flagged adversaries are not false positives
        let only_adv = false_positive_stats(&log(vec![0, 2], 20), &adv, 5);
        assert_eq!(only_adv.nominal, 0.0);
    }

    #[test]
    fn false_positives_sample_every_window() {
        let mut l = log(vec![], 11);
        l[3].perceived = vec![5];
        l[5].perceived = vec![5, 6];
        let s = false_positive_stats(&l, &[0, 1, 2], 5);
        // sampled entries 0, 5, 10
        assert_eq!(s.samples, 3);
        assert!((s.nominal - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tabulated_rate_relation() {
        assert!((fp_rate(2.41, 7.0) - 34.4).abs() < 0.05);
    }

    #[test]
    fn t_test_examples() {
        let a = [2.0, 4.0, 6.0];
        let b = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((r.p - 0.0742).abs() < 5e-4, "p {}", r.p);
        assert_eq!(r.dof, 2);
        let s = paired_t_test(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert!((s.p - r.p).abs() < 1e-15);
        assert!(matches!(paired_t_test(&a, &a), Err(Error::DegenerateTest)));
    }
}
