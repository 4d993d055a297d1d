//! Result files.
//!
//! Every CSV has a header row, UTF-8 text and `.` decimals; floats use the
//! shortest representation that round-trips, so identical runs produce
//! identical bytes. Missing values are empty fields.
//!
//! * `rounds.csv`: `seed,round,global_acc,test_acc,twin_test_acc,threshold,
//!   avg_distance,penalty,n_perceived,fp_count,all_filtered`
//! * `confusion.csv`: `seed,true_label,pred_0,…,pred_{C-1}`
//! * `detections.csv`: `seed,round,device,adversary,time_in_network,size,
//!   accuracy,threshold,perceived`
//! * `attacks.csv`: `seed,round,device,kind,power,fallback_count`
//! * `wasserstein_t.csv` (when distances are kept):
//!   `seed,round,device_a,device_b,distance`
//! * `summary.json`: [`Summary`], versioned by `schema_version`
//! * `theory_report.json`: [`TheoryReport`] when the theory checks ran

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{ResultsBundle, Summary};
use crate::theory::TheoryReport;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn rounds_csv(bundle: &ResultsBundle) -> String {
    let mut s =
        String::from("seed,round,global_acc,test_acc,twin_test_acc,threshold,avg_distance,penalty,n_perceived,fp_count,all_filtered\n");
    for run in &bundle.runs {
        for (i, r) in run.records.iter().enumerate() {
            let twin = run.twin_accuracy.as_ref().and_then(|c| c.get(i).copied());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                run.seed,
                r.round,
                r.global_acc,
                opt(r.test_acc),
                opt(twin),
                opt(r.threshold()),
                opt(r.avg_distance),
                opt(r.penalty),
                r.perceived.len(),
                r.false_positives(),
                r.all_filtered
            );
        }
    }
    s
}

pub fn confusion_csv(bundle: &ResultsBundle) -> String {
    let c = bundle.config.classes();
    let mut s = String::from("seed,true_label");
    for j in 0..c {
        let _ = write!(s, ",pred_{j}");
    }
    s.push('\n');
    for run in &bundle.runs {
        for (i, row) in run.confusion.iter().enumerate() {
            let _ = write!(s, "{},{i}", run.seed);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn detections_csv(bundle: &ResultsBundle) -> String {
    let mut s = String::from("seed,round,device,adversary,time_in_network,size,accuracy,threshold,perceived\n");
    for run in &bundle.runs {
        for r in &run.records {
            for (i, id) in r.device_ids.iter().enumerate() {
                let th = r.thresholds.as_ref().map(|t| t[i]);
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    run.seed,
                    r.round,
                    id,
                    r.device_adversary[i],
                    r.device_times[i],
                    r.device_sizes[i],
                    r.device_acc.get(i).map(|a| a.to_string()).unwrap_or_default(),
                    opt(th),
                    r.perceived.contains(id)
                );
            }
        }
    }
    s
}

pub fn attacks_csv(bundle: &ResultsBundle) -> String {
    let mut s = String::from("seed,round,device,kind,power,fallback_count\n");
    for run in &bundle.runs {
        for a in run.attack_log() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                run.seed,
                a.round,
                a.device,
                a.kind.name(),
                a.power,
                a.fallback_count
            );
        }
    }
    s
}

/// `None` when no round kept its distance matrix.
pub fn wasserstein_csv(bundle: &ResultsBundle) -> Option<String> {
    let mut s = String::from("seed,round,device_a,device_b,distance\n");
    let mut any = false;
    for run in &bundle.runs {
        for r in &run.records {
            let Some(m) = &r.distances else { continue };
            any = true;
            for a in 0..m.len() {
                for b in a + 1..m.len() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        run.seed, r.round, r.device_ids[a], r.device_ids[b], m[a][b]
                    );
                }
            }
        }
    }
    any.then_some(s)
}

/// Writes every result file into `dir` (created if needed).
pub fn write_results(bundle: &ResultsBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("rounds.csv"), rounds_csv(bundle).as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), confusion_csv(bundle).as_bytes())?;
    write_atomic(&dir.join("detections.csv"), detections_csv(bundle).as_bytes())?;
    write_atomic(&dir.join("attacks.csv"), attacks_csv(bundle).as_bytes())?;
    if let Some(w) = wasserstein_csv(bundle) {
        write_atomic(&dir.join("wasserstein_t.csv"), w.as_bytes())?;
    }
    write_json(&dir.join("summary.json"), &bundle.summary())?;
    if let Some(t) = &bundle.theory {
        write_theory_report(t, dir)?;
    }
    Ok(())
}

pub fn write_theory_report(report: &TheoryReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("theory_report.json"), report)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
