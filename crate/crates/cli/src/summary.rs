//! Per-unit results and the across-seed summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use relcomm::Error;
use serde::{Deserialize, Serialize};

pub const RESULT_FILE: &str = "result.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Outcome of one (group, seed) unit, stored in the unit's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    /// e.g. `refgame/random`, `transfer/state`.
    pub group: String,
    pub seed: u64,
    /// `None` marks an undefined value.
    pub values: BTreeMap<String, Option<f64>>,
}

impl UnitResult {
    pub fn new(group: impl Into<String>, seed: u64) -> Self {
        Self { group: group.into(), seed, values: BTreeMap::new() }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.into(), value.is_finite().then_some(value));
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(RESULT_FILE))?)?)
    }
}

/// Mean and one standard error over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    /// Sample standard deviation over `sqrt(n)`; absent for fewer than 2 values.
    pub se: Option<f64>,
    pub n: usize,
    /// Seeds whose value was undefined (e.g. TopSim of a constant code).
    pub undefined: usize,
    pub values: Vec<f64>,
}

pub fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

pub type Summary = BTreeMap<String, BTreeMap<String, Stat>>;

pub fn summarize_results(results: &[UnitResult]) -> Summary {
    let mut collected: BTreeMap<String, BTreeMap<String, (Vec<(u64, f64)>, usize)>> = BTreeMap::new();
    for r in results {
        for (name, v) in &r.values {
            let slot = collected.entry(r.group.clone()).or_default().entry(name.clone()).or_default();
            match v {
                Some(v) => slot.0.push((r.seed, *v)),
                None => slot.1 += 1,
            }
        }
    }
    collected
        .into_iter()
        .map(|(group, metrics)| {
            let stats = metrics
                .into_iter()
                .map(|(name, (mut seeded, undefined))| {
                    seeded.sort_by_key(|(s, _)| *s);
                    let values: Vec<f64> = seeded.into_iter().map(|(_, v)| v).collect();
                    let (mean, se) = mean_se(&values);
                    (name, Stat { mean, se, n: values.len(), undefined, values })
                })
                .collect();
            (group, stats)
        })
        .collect()
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            if path.join(RESULT_FILE).is_file() {
                out.push(path.clone());
            }
            find_results(&path, out)?;
        }
    }
    Ok(())
}

/// Collects every unit result under `run_dir` and writes `summary.json`.
pub fn summarize(run_dir: &Path) -> Result<Summary, Error> {
    let mut dirs = Vec::new();
    find_results(run_dir, &mut dirs)?;
    let results = dirs.iter().map(|d| UnitResult::load(d)).collect::<Result<Vec<_>, _>>()?;
    let summary = summarize_results(&results);
    fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_known_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, Some(3.0));
        // sample variance 2.5, se = sqrt(2.5 / 5)
        assert!((se.unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[7.0]), (Some(7.0), None));
        assert_eq!(mean_se(&[]), (None, None));
    }

    #[test]
    fn undefined_values_are_counted_not_averaged() {
        let mut a = UnitResult::new("refgame/fixed", 0);
        a.set("topsim", f64::NAN);
        let mut b = UnitResult::new("refgame/fixed", 1);
        b.set("topsim", 0.4);
        let s = summarize_results(&[a, b]);
        let stat = &s["refgame/fixed"]["topsim"];
        assert_eq!((stat.n, stat.undefined, stat.mean), (1, 1, Some(0.4)));
    }
}
