//! Columnar output. Every file is a [`Table`] written as CSV or as a JSON
//! array of row objects. Floats are written with 17 significant digits so a
//! reader recovers the exact value.
//!
//! Covariance columns hold the trace of the matrix (the value itself for a
//! scalar state). Vector columns are split into `name_0, name_1, …` when the
//! state has more than one component.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::qcd::{moving_average_detector, AgeObservation};
use crate::scenario::Scenario;
use crate::simulator::{Calibration, Estimate, RunTrace, SummaryStats};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Cell {
    fn opt_int(v: Option<u64>) -> Self {
        v.map_or(Cell::Empty, Cell::Int)
    }

    fn opt_float(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }

    fn to_csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Bool(b) => u8::from(*b).to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(v) if v.is_finite() => json!(v),
            Cell::Float(_) | Cell::Empty => Value::Null,
            Cell::Bool(b) => json!(b),
            Cell::Text(s) => json!(s),
        }
    }
}

/// 17 significant digits in scientific notation; `inf`, `-inf`, `nan` otherwise.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(headers: Vec<String>) -> Self {
        Self {
            headers,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io {
            path: "<csv buffer>".into(),
            message: e.to_string(),
        };
        w.write_record(&self.headers).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::to_csv)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io {
            path: "<csv buffer>".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let mut obj = Map::new();
                    for (h, c) in self.headers.iter().zip(row) {
                        obj.insert(h.clone(), c.to_json());
                    }
                    Value::Object(obj)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::config("format", format!("{other:?} is not csv or json"))),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes `<dir>/<stem>.<ext>` for each table, creating `dir` if needed.
pub fn write_tables(dir: &Path, tables: &[(&str, Table)], format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut written = Vec::with_capacity(tables.len());
    for (stem, table) in tables {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        let text = match format {
            Format::Csv => table.to_csv()?,
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&table.to_json()).expect("json serializes");
                s.push('\n');
                s
            }
        };
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    write_text(path, &s)
}

fn vector_headers(name: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![name.to_string()]
    } else {
        (0..n).map(|i| format!("{name}_{i}")).collect()
    }
}

fn z_header(name: &str) -> String {
    format!("z_{name}")
}

/// One row per step.
pub fn step_table(trace: &RunTrace, state_dim: usize) -> Table {
    let mut headers = vec!["k".to_string()];
    for name in ["x", "x_hat_s", "x_hat", "x_hat_e"] {
        headers.extend(vector_headers(name, state_dim));
    }
    headers.extend(
        [
            "p_s",
            "p",
            "p_e",
            "gamma",
            "gamma_e",
            "gamma_a",
            "blocked",
            "ack_delivered",
            "t_k",
            "eavesdropper_synced",
            "attacker_active",
        ]
        .map(String::from),
    );
    let mut table = Table::new(headers);
    for r in &trace.steps {
        let mut row = vec![Cell::Int(r.k)];
        for v in [&r.x, &r.x_hat_s, &r.x_hat, &r.x_hat_e] {
            row.extend(v.iter().map(|&x| Cell::Float(x)));
        }
        row.extend([
            Cell::Float(r.p_s.trace()),
            Cell::Float(r.p.trace()),
            Cell::Float(r.p_e.trace()),
            Cell::Bool(r.gamma),
            Cell::Bool(r.gamma_e),
            Cell::Bool(r.gamma_a),
            Cell::Bool(r.blocked),
            Cell::Bool(r.ack_delivered),
            Cell::Int(r.t_k),
            Cell::Bool(r.eavesdropper_synced),
            Cell::Bool(r.attacker_active),
        ]);
        table.push(row);
    }
    table
}

/// One row per legitimate receipt.
pub fn receipt_table(trace: &RunTrace) -> Table {
    let mut headers: Vec<String> = ["m", "k", "ref_time", "age", "post_change", "window_mean"]
        .map(String::from)
        .to_vec();
    headers.extend(trace.receiver_detectors.iter().map(|n| z_header(n)));
    let mut table = Table::new(headers);
    for r in &trace.receipt_log {
        let mut row = vec![
            Cell::Int(r.m),
            Cell::Int(r.k),
            Cell::Int(r.ref_time),
            Cell::Int(r.age),
            Cell::Bool(r.post_change),
            Cell::opt_float(r.window_mean),
        ];
        row.extend(r.z_hat.iter().map(|&z| Cell::Float(z)));
        table.push(row);
    }
    table
}

/// One row per acknowledgment delivered to the sensor.
pub fn ack_table(trace: &RunTrace) -> Table {
    let mut headers: Vec<String> = ["n", "k", "age", "post_change"].map(String::from).to_vec();
    headers.extend(trace.sensor_detectors.iter().map(|n| z_header(n)));
    let mut table = Table::new(headers);
    for r in &trace.ack_log {
        let mut row = vec![Cell::Int(r.n), Cell::Int(r.k), Cell::Int(r.age), Cell::Bool(r.post_change)];
        row.extend(r.z_hat.iter().map(|&z| Cell::Float(z)));
        table.push(row);
    }
    table
}

/// One row per detector and threshold.
pub fn alarm_table(trace: &RunTrace) -> Table {
    let mut table = Table::new(
        [
            "detector",
            "side",
            "threshold",
            "alarm_index",
            "alarm_time",
            "change_index",
            "activation_step",
            "false_alarm",
            "delay_index",
            "delay_steps",
        ]
        .map(String::from)
        .to_vec(),
    );
    for d in &trace.detectors {
        for t in &d.thresholds {
            let false_alarm = match (t.alarm_index, d.change_index) {
                (Some(a), Some(l)) => a < l,
                (Some(_), None) => true,
                (None, _) => false,
            };
            let delay_index = match (t.alarm_index, d.change_index) {
                (Some(a), Some(l)) if a >= l => Some(a - l),
                _ => None,
            };
            let delay_steps = match (t.alarm_time, trace.activation_step) {
                (Some(a), Some(s)) if !false_alarm && a >= s => Some(a - s),
                _ => None,
            };
            table.push(vec![
                Cell::Text(d.name.clone()),
                Cell::Text(d.side.as_str().into()),
                Cell::Float(t.threshold),
                Cell::opt_int(t.alarm_index),
                Cell::opt_int(t.alarm_time),
                Cell::opt_int(d.change_index),
                Cell::opt_int(trace.activation_step),
                Cell::Bool(false_alarm),
                Cell::opt_int(delay_index),
                Cell::opt_int(delay_steps),
            ]);
        }
    }
    table
}

/// Files of a single run: `step_trace`, `receipt_trace`, `ack_trace`, `alarms`.
pub fn run_tables(trace: &RunTrace, state_dim: usize) -> Vec<(&'static str, Table)> {
    vec![
        ("step_trace", step_table(trace, state_dim)),
        ("receipt_trace", receipt_table(trace)),
        ("ack_trace", ack_table(trace)),
        ("alarms", alarm_table(trace)),
    ]
}

fn estimate_cells(e: &Estimate) -> [Cell; 2] {
    [Cell::Float(e.mean), Cell::Float(e.half_width)]
}

/// One row per detector and threshold.
pub fn summary_table(stats: &SummaryStats) -> Table {
    let mut table = Table::new(
        [
            "detector",
            "side",
            "threshold",
            "runs",
            "false_alarms",
            "pfa",
            "pfa_half_width",
            "detections",
            "misses",
            "delay_runs",
            "delay_receipts",
            "delay_receipts_half_width",
            "delay_steps",
            "delay_steps_half_width",
            "bayes_risk",
            "delay_penalty",
        ]
        .map(String::from)
        .to_vec(),
    );
    for r in &stats.rows {
        let mut row = vec![
            Cell::Text(r.detector.clone()),
            Cell::Text(r.side.as_str().into()),
            Cell::Float(r.threshold),
            Cell::Int(r.runs),
            Cell::Int(r.false_alarms),
        ];
        row.extend(estimate_cells(&r.pfa));
        row.extend([Cell::Int(r.detections), Cell::Int(r.misses), Cell::Int(r.delay_receipts.count)]);
        row.extend(estimate_cells(&r.delay_receipts));
        row.extend(estimate_cells(&r.delay_steps));
        row.extend([Cell::Float(r.bayes_risk), Cell::Float(stats.delay_penalty)]);
        table.push(row);
    }
    table
}

/// `calibration` (the sweep) and, when a target was given, `calibrated_thresholds`.
pub fn calibration_tables(cal: &Calibration) -> Vec<(&'static str, Table)> {
    let mut tables = vec![("calibration", summary_table(&cal.sweep))];
    if !cal.targets.is_empty() {
        let mut t = Table::new(
            ["detector", "target_pfa", "threshold", "achieved_pfa"]
                .map(String::from)
                .to_vec(),
        );
        for c in &cal.targets {
            t.push(vec![
                Cell::Text(c.detector.clone()),
                Cell::Float(c.target_pfa),
                Cell::Float(c.threshold),
                Cell::Float(c.achieved_pfa),
            ]);
        }
        tables.push(("calibrated_thresholds", t));
    }
    tables
}

/// The series behind the age, moving-average and posterior figures of one run,
/// plus the annotation values drawn on them.
pub fn figure_tables(trace: &RunTrace, scenario: &Scenario) -> Result<(Vec<(&'static str, Table)>, Value)> {
    let mut age = Table::new(["m", "k", "age", "post_change"].map(String::from).to_vec());
    for r in &trace.receipt_log {
        age.push(vec![Cell::Int(r.m), Cell::Int(r.k), Cell::Int(r.age), Cell::Bool(r.post_change)]);
    }

    let channels = &scenario.channels;
    let rho1 = channels.ack_success_rate();
    let rho2 = channels.ack_success_rate_under_attack();
    let observations: Vec<AgeObservation> = trace
        .receipt_log
        .iter()
        .map(|r| AgeObservation {
            index: r.m,
            receipt_time: r.k,
            age: r.age,
        })
        .collect();
    let true_model = crate::qcd::GeometricModel {
        rho1,
        rho2,
        rho_i: scenario.rho_i,
    };
    let series = moving_average_detector(&observations, scenario.moving_average_window, &true_model)?;
    let mut ma = Table::new(["m", "k", "mean_age"].map(String::from).to_vec());
    for p in &series.points {
        ma.push(vec![Cell::Int(p.index), Cell::Int(p.receipt_time), Cell::Float(p.mean_age)]);
    }

    let mut headers: Vec<String> = ["m", "k"].map(String::from).to_vec();
    headers.extend(trace.receiver_detectors.iter().map(|n| z_header(n)));
    let mut receiver = Table::new(headers);
    for r in &trace.receipt_log {
        let mut row = vec![Cell::Int(r.m), Cell::Int(r.k)];
        row.extend(r.z_hat.iter().map(|&z| Cell::Float(z)));
        receiver.push(row);
    }

    let mut combined = Table::new(["detector", "side", "index", "k", "z_hat"].map(String::from).to_vec());
    for (i, name) in trace.receiver_detectors.iter().enumerate() {
        for r in &trace.receipt_log {
            combined.push(vec![
                Cell::Text(name.clone()),
                Cell::Text("receiver".into()),
                Cell::Int(r.m),
                Cell::Int(r.k),
                Cell::Float(r.z_hat[i]),
            ]);
        }
    }
    for (i, name) in trace.sensor_detectors.iter().enumerate() {
        for r in &trace.ack_log {
            combined.push(vec![
                Cell::Text(name.clone()),
                Cell::Text("sensor".into()),
                Cell::Int(r.n),
                Cell::Int(r.k),
                Cell::Float(r.z_hat[i]),
            ]);
        }
    }

    let detectors: Vec<Value> = trace
        .detectors
        .iter()
        .map(|d| {
            let spec = scenario.detector(&d.name).expect("trace detectors come from the scenario");
            let model = spec.model(scenario)?;
            Ok(json!({
                "name": d.name,
                "side": d.side.as_str(),
                "rho1": model.rho1,
                "rho2": model.rho2,
                "change_index": d.change_index,
                "thresholds": d.thresholds.iter().map(|t| json!({
                    "threshold": t.threshold,
                    "alarm_index": t.alarm_index,
                    "alarm_time": t.alarm_time,
                })).collect::<Vec<_>>(),
            }))
        })
        .collect::<Result<_>>()?;
    let annotations = json!({
        "run_index": trace.run_index,
        "horizon": trace.horizon,
        "activation_step": trace.activation_step,
        "moving_average_window": scenario.moving_average_window,
        "pre_change_mean_age": series.pre_change_mean,
        "post_change_mean_age": series.post_change_mean,
        "detectors": detectors,
    });

    Ok((
        vec![
            ("fig2_age", age),
            ("fig3_moving_average", ma),
            ("fig4_posterior_receiver", receiver),
            ("fig5_posterior_combined", combined),
        ],
        annotations,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario_str;
    use crate::simulator::{run_monte_carlo, run_once};

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
        assert_eq!(format_float(1.001), "1.0009999999999999e0");
        assert_eq!(format_float(f64::INFINITY), "inf");
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5e17] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_and_json_shapes() {
        let mut t = Table::new(vec!["a".into(), "b".into(), "c".into()]);
        t.push(vec![Cell::Int(3), Cell::Bool(true), Cell::Empty]);
        t.push(vec![Cell::Text("x,y".into()), Cell::Float(0.5), Cell::Float(f64::NAN)]);
        assert_eq!(t.to_csv().unwrap(), "a,b,c\n3,1,\n\"x,y\",5.0000000000000000e-1,nan\n");
        let j = t.to_json();
        assert_eq!(j[0]["a"], json!(3));
        assert_eq!(j[0]["c"], Value::Null);
        assert_eq!(j[1]["b"], json!(0.5));
    }

    #[test]
    fn run_files_have_documented_headers() {
        let s = parse_scenario_str("horizon = 100\n[attacker]\nactivation = { step = 50 }\n").unwrap();
        let trace = run_once(&s, 0).unwrap();
        let tables = run_tables(&trace, 1);
        let names: Vec<_> = tables.iter().map(|t| t.0).collect();
        assert_eq!(names, vec!["step_trace", "receipt_trace", "ack_trace", "alarms"]);
        assert_eq!(tables[0].1.headers[..5], ["k", "x", "x_hat_s", "x_hat", "x_hat_e"].map(String::from));
        assert_eq!(tables[0].1.rows.len(), 101);
        assert_eq!(
            tables[1].1.headers,
            ["m", "k", "ref_time", "age", "post_change", "window_mean", "z_exact", "z_misspec"].map(String::from)
        );
        assert_eq!(tables[2].1.headers, ["n", "k", "age", "post_change", "z_sensor"].map(String::from));
        assert_eq!(tables[3].1.rows.len(), 3);
    }

    #[test]
    fn summary_row_per_detector_threshold() {
        let s = parse_scenario_str(
            "horizon = 100\nruns = 3\n[[detection.detectors]]\nname = \"a\"\nside = \"receiver\"\nthresholds = [0.5, 0.9]\n\
             [[detection.detectors]]\nname = \"b\"\nside = \"sensor\"\nthresholds = [0.7]\n",
        )
        .unwrap();
        let t = summary_table(&run_monte_carlo(&s).unwrap());
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[1][2], Cell::Float(0.9));
    }

    #[test]
    fn figure_series() {
        let s = parse_scenario_str("horizon = 400\n[attacker]\nactivation = { step = 200 }\n[detection]\nmoving_average_window = 20\n")
            .unwrap();
        let trace = run_once(&s, 0).unwrap();
        let (tables, ann) = figure_tables(&trace, &s).unwrap();
        assert_eq!(tables.len(), 4);
        assert_eq!(tables[1].1.rows.len(), trace.receipt_log.len() - 19);
        assert_eq!(ann["activation_step"], json!(200));
        assert!((ann["pre_change_mean_age"].as_f64().unwrap() - 1.0 / 0.63).abs() < 1e-12);
        assert_eq!(
            tables[3].1.rows.len(),
            trace.receipt_log.len() * 2 + trace.ack_log.len()
        );
    }

    #[test]
    fn written_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let s = parse_scenario_str("horizon = 60\n").unwrap();
        let a = write_tables(&dir.path().join("a"), &run_tables(&run_once(&s, 0).unwrap(), 1), Format::Csv).unwrap();
        let b = write_tables(&dir.path().join("b"), &run_tables(&run_once(&s, 0).unwrap(), 1), Format::Json).unwrap();
        assert_eq!(a.len(), 4);
        assert!(b[0].extension().unwrap() == "json");
        let c = write_tables(&dir.path().join("c"), &run_tables(&run_once(&s, 0).unwrap(), 1), Format::Csv).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
}
