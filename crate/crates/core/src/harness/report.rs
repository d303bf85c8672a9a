//! Per-run CSV files and their aggregation across replications.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::Trajectory;
use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "k,eta,batch,samples_cum,eta_cum,etaB_cum,objective,stationarity_sq,saturated";

pub const AGGREGATE_HEADER: &str = "k,samples_cum_mean,eta_cum_mean,etaB_cum_mean,\
objective_mean,objective_min,objective_max,\
stationarity_sq_mean,stationarity_sq_min,stationarity_sq_max,\
eta_mean,eta_min,eta_max";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub k: usize,
    pub eta: u64,
    pub batch: u64,
    pub samples_cum: u64,
    pub eta_cum: u64,
    pub eta_b_cum: u64,
    pub objective: f64,
    pub stationarity_sq: f64,
    pub saturated: bool,
}

pub fn trajectory_rows(t: &Trajectory) -> Vec<CsvRow> {
    t.records
        .iter()
        .map(|r| CsvRow {
            k: r.k,
            eta: r.eta,
            batch: r.batch,
            samples_cum: r.totals.samples,
            eta_cum: r.totals.eta,
            eta_b_cum: r.totals.eta_b,
            objective: r.objective,
            stationarity_sq: r.stationarity_sq,
            saturated: r.saturated,
        })
        .collect()
}

pub fn format_rows(rows: &[CsvRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.k,
            r.eta,
            r.batch,
            r.samples_cum,
            r.eta_cum,
            r.eta_b_cum,
            r.objective,
            r.stationarity_sq,
            r.saturated as u8
        );
    }
    out
}

pub fn write_trajectory_csv(path: &Path, t: &Trajectory) -> Result<()> {
    std::fs::write(path, format_rows(&trajectory_rows(t))).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| csv_err(path, line, format!("cannot parse {name} from `{field}`")))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_HEADER => {}
        _ => return Err(csv_err(path, 1, "unexpected header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(csv_err(path, n, format!("expected 9 fields, found {}", f.len())));
        }
        rows.push(CsvRow {
            k: parse(path, n, f[0], "k")?,
            eta: parse(path, n, f[1], "eta")?,
            batch: parse(path, n, f[2], "batch")?,
            samples_cum: parse(path, n, f[3], "samples_cum")?,
            eta_cum: parse(path, n, f[4], "eta_cum")?,
            eta_b_cum: parse(path, n, f[5], "etaB_cum")?,
            objective: parse(path, n, f[6], "objective")?,
            stationarity_sq: parse(path, n, f[7], "stationarity_sq")?,
            saturated: match f[8] {
                "0" => false,
                "1" => true,
                other => return Err(csv_err(path, n, format!("saturated must be 0 or 1, got `{other}`"))),
            },
        });
    }
    Ok(rows)
}

/// Mean and min/max envelope of one series across replications.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Envelope {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Envelope {
    fn from_columns(columns: &[Vec<f64>]) -> Self {
        let len = columns.first().map_or(0, |c| c.len());
        let mut env = Envelope::default();
        for i in 0..len {
            let vals = columns.iter().map(|c| c[i]);
            let n = columns.len() as f64;
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for v in vals {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            let mean = sum / n;
            // NaN stays NaN; rounding never pushes the mean outside the envelope
            let mean = if mean.is_nan() { mean } else { mean.clamp(lo, hi) };
            env.mean.push(mean);
            env.min.push(lo);
            env.max.push(hi);
        }
        env
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub label: String,
    pub completed: usize,
    pub requested: usize,
    pub k: Vec<usize>,
    pub samples_cum: Vec<f64>,
    pub eta_cum: Vec<f64>,
    pub eta_b_cum: Vec<f64>,
    pub objective: Envelope,
    pub stationarity_sq: Envelope,
    pub eta: Envelope,
}

impl AggregateReport {
    pub fn complete(&self) -> bool {
        self.completed == self.requested
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn axis(&self, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::Iteration => self.k.iter().map(|&k| k as f64).collect(),
            Axis::Samples => self.samples_cum.clone(),
            Axis::Eta => self.eta_cum.clone(),
            Axis::EtaB => self.eta_b_cum.clone(),
        }
    }

    pub fn series(&self, s: Series) -> &Envelope {
        match s {
            Series::Objective => &self.objective,
            Series::Stationarity => &self.stationarity_sq,
            Series::Eta => &self.eta,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(AGGREGATE_HEADER);
        out.push('\n');
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.k[i],
                self.samples_cum[i],
                self.eta_cum[i],
                self.eta_b_cum[i],
                self.objective.mean[i],
                self.objective.min[i],
                self.objective.max[i],
                self.stationarity_sq.mean[i],
                self.stationarity_sq.min[i],
                self.stationarity_sq.max[i],
                self.eta.mean[i],
                self.eta.min[i],
                self.eta.max[i]
            );
        }
        out
    }

    /// Reads an aggregate CSV; completeness is not stored in the file and is
    /// reported as `completed = requested = 0`.
    pub fn read_csv(path: &Path, label: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == AGGREGATE_HEADER => {}
            _ => return Err(csv_err(path, 1, "unexpected aggregate header")),
        }
        let mut rep = AggregateReport {
            label: label.to_string(),
            completed: 0,
            requested: 0,
            k: Vec::new(),
            samples_cum: Vec::new(),
            eta_cum: Vec::new(),
            eta_b_cum: Vec::new(),
            objective: Envelope::default(),
            stationarity_sq: Envelope::default(),
            eta: Envelope::default(),
        };
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(csv_err(path, n, format!("expected 13 fields, found {}", f.len())));
            }
            let v = |j: usize| parse::<f64>(path, n, f[j], "value");
            rep.k.push(parse(path, n, f[0], "k")?);
            rep.samples_cum.push(v(1)?);
            rep.eta_cum.push(v(2)?);
            rep.eta_b_cum.push(v(3)?);
            for (env, j) in [(&mut rep.objective, 4), (&mut rep.stationarity_sq, 7), (&mut rep.eta, 10)] {
                env.mean.push(v(j)?);
                env.min.push(v(j + 1)?);
                env.max.push(v(j + 2)?);
            }
        }
        Ok(rep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Iteration,
    Samples,
    Eta,
    EtaB,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Iteration, Axis::Samples, Axis::Eta, Axis::EtaB];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Iteration => "k",
            Axis::Samples => "samples_cum",
            Axis::Eta => "eta_cum",
            Axis::EtaB => "etaB_cum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Objective,
    Stationarity,
    Eta,
}

impl Series {
    pub const ALL: [Series; 3] = [Series::Objective, Series::Stationarity, Series::Eta];

    pub fn name(self) -> &'static str {
        match self {
            Series::Objective => "objective",
            Series::Stationarity => "stationarity_sq",
            Series::Eta => "eta",
        }
    }
}

/// Aggregates completed replications of one algorithm. `requested` is the
/// number of replications that were attempted.
pub fn aggregate(label: &str, runs: &[Vec<CsvRow>], requested: usize) -> Result<AggregateReport> {
    let len = runs.first().map_or(0, |r| r.len());
    if let Some(bad) = runs.iter().find(|r| r.len() != len) {
        return Err(Error::config(format!(
            "replications of `{label}` have different lengths ({len} and {})",
            bad.len()
        )));
    }
    let col = |f: &dyn Fn(&CsvRow) -> f64| -> Vec<Vec<f64>> { runs.iter().map(|r| r.iter().map(f).collect()).collect() };
    let mean_of = |cols: Vec<Vec<f64>>| Envelope::from_columns(&cols).mean;
    Ok(AggregateReport {
        label: label.to_string(),
        completed: runs.len(),
        requested,
        k: runs.first().map_or_else(Vec::new, |r| r.iter().map(|row| row.k).collect()),
        samples_cum: mean_of(col(&|r| r.samples_cum as f64)),
        eta_cum: mean_of(col(&|r| r.eta_cum as f64)),
        eta_b_cum: mean_of(col(&|r| r.eta_b_cum as f64)),
        objective: Envelope::from_columns(&col(&|r| r.objective)),
        stationarity_sq: Envelope::from_columns(&col(&|r| r.stationarity_sq)),
        eta: Envelope::from_columns(&col(&|r| r.eta as f64)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: usize, obj: f64) -> CsvRow {
        CsvRow {
            k,
            eta: 2,
            batch: 3,
            samples_cum: 3 * k as u64,
            eta_cum: 2 * k as u64,
            eta_b_cum: 6 * k as u64,
            objective: obj,
            stationarity_sq: obj * obj,
            saturated: k % 2 == 0,
        }
    }

    #[test]
    fn single_run_aggregate_is_the_run() {
        let run = vec![row(1, 0.3), row(2, 0.1 + 0.2)];
        let a = aggregate("x", &[run.clone()], 1).unwrap();
        assert_eq!(a.objective.mean, vec![0.3, 0.1 + 0.2]);
        assert_eq!(a.objective.min, a.objective.max);
        assert_eq!(a.samples_cum, vec![3.0, 6.0]);
        assert!(a.complete());
    }

    #[test]
    fn envelope_contains_mean() {
        let runs = vec![vec![row(1, 1.0)], vec![row(1, 3.0)], vec![row(1, 0.1)]];
        let a = aggregate("x", &runs, 4).unwrap();
        assert!(a.objective.min[0] <= a.objective.mean[0] && a.objective.mean[0] <= a.objective.max[0]);
        assert!(!a.complete());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row(1, 0.1 + 0.2), row(2, f64::NAN), row(3, 1e-300)];
        std::fs::write(&p, format_rows(&rows)).unwrap();
        let back = read_trajectory_csv(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].objective.is_nan());
        assert_eq!(back[2], rows[2]);
        assert!(format_rows(&rows).starts_with(TRAJECTORY_HEADER));
    }

    #[test]
    fn aggregate_csv_round_trip() {
        let runs = vec![vec![row(1, 1.0), row(2, 0.5)], vec![row(1, 3.0), row(2, 0.25)]];
        let a = aggregate("x", &runs, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, a.to_csv()).unwrap();
        let b = AggregateReport::read_csv(&p, "x").unwrap();
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.eta_b_cum, b.eta_b_cum);
    }

    #[test]
    fn bad_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, format!("{TRAJECTORY_HEADER}\n1,2,3\n")).unwrap();
        match read_trajectory_csv(&p) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
