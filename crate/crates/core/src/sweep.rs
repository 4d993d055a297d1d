//! Parameter sweeps: a base configuration plus axes that overwrite dotted
//! JSON paths (`reserve.labels`, `defense.kind`, …). The Cartesian product
//! of all axes is run, one experiment per point.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{parse_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, Summary};
use crate::results::{write_atomic, write_results};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "empty_object")]
    pub base: Value,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Sets `path` (dot-separated object keys) in `doc`, creating objects on
/// the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Validation(format!("bad sweep path `{path}`")));
    }
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Validation(format!("sweep path `{path}` crosses a non-object")))?;
        cur = obj.entry(key.to_string()).or_insert_with(empty_object);
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Validation(format!("sweep path `{path}` crosses a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Axis values and configuration document of every point.
pub fn expand(spec: &SweepSpec) -> Result<Vec<(Vec<Value>, Value)>> {
    let mut points = vec![(Vec::new(), spec.base.clone())];
    for axis in &spec.axes {
        if axis.values.is_empty() {
            return Err(Error::Validation(format!("sweep axis `{}` has no values", axis.path)));
        }
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (vals, doc) in &points {
            for v in &axis.values {
                let mut d = doc.clone();
                set_path(&mut d, &axis.path, v.clone())?;
                let mut vs = vals.clone();
                vs.push(v.clone());
                next.push((vs, d));
            }
        }
        points = next;
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub values: Vec<Value>,
    pub outcome: std::result::Result<Summary, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axes: Vec<String>,
    pub points: Vec<SweepPoint>,
    /// For a single numeric axis: whether final accuracy is non-decreasing
    /// in the axis value over the successful points.
    pub non_decreasing: Option<bool>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for a in &self.axes {
            let _ = write!(s, "{a},");
        }
        s.push_str("status,final_accuracy,post_t0_accuracy,fp_nominal,fp_rate,error\n");
        for p in &self.points {
            for v in &p.values {
                let cell = match v {
                    Value::String(x) => x.clone(),
                    other => other.to_string(),
                };
                let _ = write!(s, "{},", csv_field(&cell));
            }
            match &p.outcome {
                Ok(sum) => {
                    let _ = writeln!(
                        s,
                        "ok,{},{},{},{},",
                        sum.final_accuracy, sum.post_t0_accuracy, sum.fp_nominal, sum.fp_rate
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "failed,,,,,{}", csv_field(e));
                }
            }
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_point(doc: &Value, out: Option<&Path>) -> std::result::Result<Summary, String> {
    let text = doc.to_string();
    let mut cfg: ExperimentConfig = parse_config(&text).map_err(|e| e.to_string())?;
    cfg.output_dir = out.map(Path::to_path_buf);
    let bundle = run_experiment(&cfg).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        write_results(&bundle, dir).map_err(|e| e.to_string())?;
    }
    Ok(bundle.summary())
}

/// Runs every point (in parallel); a failing point is recorded and the
/// sweep continues. With `out`, each point writes its results into
/// `point_NNN/` and the merged table goes to `sweep.csv`.
pub fn sweep(spec: &SweepSpec, out: Option<&Path>) -> Result<SweepTable> {
    let points = expand(spec)?;
    let results: Vec<SweepPoint> = points
        .par_iter()
        .enumerate()
        .map(|(i, (values, doc))| {
            let dir = out.map(|o| o.join(format!("point_{i:03}")));
            SweepPoint {
                values: values.clone(),
                outcome: run_point(doc, dir.as_deref()),
            }
        })
        .collect();
    let non_decreasing = (spec.axes.len() == 1).then(|| trend(&results)).flatten();
    let table = SweepTable {
        axes: spec.axes.iter().map(|a| a.path.clone()).collect(),
        points: results,
        non_decreasing,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("sweep.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

fn trend(points: &[SweepPoint]) -> Option<bool> {
    let mut xy: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| Some((p.values.first()?.as_f64()?, p.outcome.as_ref().ok()?.final_accuracy)))
        .collect();
    if xy.len() < 2 {
        return None;
    }
    xy.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(xy.windows(2).all(|w| w[1].1 >= w[0].1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({"dataset": {"per_class": 20, "length": 16, "schemes": ["BPSK", "QPSK", "PAM4", "QAM16"]},
               "devices": 3, "rounds": 2, "t0": 1, "model": {"hidden": [4]}, "training": {"lr": 0.05},
               "reserve": {"size": 20}, "defense": {"kind": "none"}, "attack": {"kind": "awgn"}})
    }

    #[test]
    fn set_path_creates_objects() {
        let mut v = json!({"a": 1});
        set_path(&mut v, "b.c", json!(2)).unwrap();
        set_path(&mut v, "a", json!(3)).unwrap();
        assert_eq!(v, json!({"a": 3, "b": {"c": 2}}));
        assert!(set_path(&mut v, "a.x", json!(0)).is_err());
        assert!(set_path(&mut v, "", json!(0)).is_err());
    }

    #[test]
    fn axes_expand_to_product() {
        let spec = SweepSpec {
            base: base(),
            axes: vec![
                SweepAxis {
                    path: "reserve.labels".into(),
                    values: vec![json!(2), json!(4)],
                },
                SweepAxis {
                    path: "seed".into(),
                    values: vec![json!(1), json!(2), json!(3)],
                },
            ],
        };
        assert_eq!(expand(&spec).unwrap().len(), 6);
    }

    #[test]
    fn single_point_matches_direct_run() {
        let spec = SweepSpec {
            base: base(),
            axes: vec![],
        };
        let t = sweep(&spec, None).unwrap();
        assert_eq!(t.points.len(), 1);
        let cfg = parse_config(&base().to_string()).unwrap();
        let direct = run_experiment(&cfg).unwrap();
        let s = t.points[0].outcome.as_ref().unwrap();
        assert_eq!(s.final_accuracy, direct.final_accuracy());
        assert_eq!(s.final_accuracy_per_seed, direct.summary().final_accuracy_per_seed);
    }

    #[test]
    fn failures_are_recorded_and_sweep_continues() {
        let spec = SweepSpec {
            base: base(),
            axes: vec![SweepAxis {
                path: "reserve.labels".into(),
                values: vec![json!(2), json!(12), json!(4)],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let t = sweep(&spec, Some(dir.path())).unwrap();
        assert_eq!(t.points.len(), 3);
        assert!(t.points[0].outcome.is_ok());
        assert!(t.points[1].outcome.is_err());
        assert!(t.points[2].outcome.is_ok());
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("12,failed"));
        assert!(dir.path().join("point_000/rounds.csv").exists());
        assert!(t.non_decreasing.is_some());
    }

    #[test]
    fn trend_flag() {
        let pt = |x: f64, acc: f64| SweepPoint {
            values: vec![json!(x)],
            outcome: Ok(Summary {
                schema_version: String::new(),
                name: None,
                n_runs: 1,
                seeds: vec![1],
                final_accuracy: acc,
                final_accuracy_per_seed: vec![acc],
                post_t0_accuracy: acc,
                twin_final_accuracy: None,
                fp_nominal: 0.0,
                fp_rate: 0.0,
                all_filtered_rounds: 0,
                attack_fallbacks: 0,
                runtime_secs: 0.0,
            }),
        };
        assert_eq!(trend(&[pt(300.0, 0.6), pt(100.0, 0.5), pt(500.0, 0.7)]), Some(true));
        assert_eq!(trend(&[pt(100.0, 0.6), pt(200.0, 0.5)]), Some(false));
        assert_eq!(trend(&[pt(100.0, 0.6)]), None);
    }
}
