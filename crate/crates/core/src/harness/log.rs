//! Per-step trajectory records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::plant::BenchmarkId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub u: Vec<f64>,
    pub pi_des: Vec<f64>,
    pub h_x: f64,
    pub h_xhat: f64,
    pub delta_mean_abs: f64,
    pub delta_max_abs: f64,
    /// Largest `‖ω/ρ‖` over the extrapolation points.
    pub omega_rho_max: f64,
    pub wc: Vec<f64>,
    pub wa: Vec<f64>,
    /// Row-major `p × n` outer-layer weights.
    pub theta: Vec<f64>,
    /// `λ_min` of the normalized extrapolation Gram matrix.
    pub rank_min: f64,
    pub stack_min_eig: f64,
    pub gamma_eig_min: f64,
    pub gamma_eig_max: f64,
    /// `‖x̃‖ ≤ ε` at this step.
    pub hyp_ok: bool,
    pub stack_event: String,
    pub qp_status: String,
    pub gamma_clamped: bool,
    pub degenerate: bool,
    /// Some input channel hit the actuator bound.
    pub saturated: bool,
}

impl StepRecord {
    pub fn xtilde_norm(&self) -> f64 {
        self.x.iter().zip(&self.xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub benchmark: BenchmarkId,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub p: usize,
    pub records: Vec<StepRecord>,
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn indexed(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}_{i}"))
}

impl TrajectoryLog {
    pub fn new(benchmark: BenchmarkId, n: usize, m: usize, l: usize, p: usize) -> Self {
        Self { benchmark, n, m, l, p, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(indexed("x", self.n));
        h.extend(indexed("xhat", self.n));
        h.push("xtilde_norm".into());
        h.extend(indexed("u", self.m));
        h.extend(indexed("pi_des", self.m));
        h.extend(["h_x", "h_xhat", "delta_mean_abs", "delta_max_abs", "omega_rho_max"].map(String::from));
        h.extend(indexed("wc", self.l));
        h.extend(indexed("wa", self.l));
        for i in 1..=self.p {
            for j in 1..=self.n {
                h.push(format!("theta_{i}_{j}"));
            }
        }
        h.extend(
            [
                "rank_min",
                "stack_min_eig",
                "gamma_eig_min",
                "gamma_eig_max",
                "hyp_ok",
                "stack_event",
                "qp_status",
                "gamma_clamped",
                "degenerate",
                "saturated",
            ]
            .map(String::from),
        );
        h
    }

    fn row(r: &StepRecord) -> Vec<String> {
        let mut row = vec![fmt(r.t)];
        row.extend(r.x.iter().map(|v| fmt(*v)));
        row.extend(r.xhat.iter().map(|v| fmt(*v)));
        row.push(fmt(r.xtilde_norm()));
        row.extend(r.u.iter().map(|v| fmt(*v)));
        row.extend(r.pi_des.iter().map(|v| fmt(*v)));
        for v in [r.h_x, r.h_xhat, r.delta_mean_abs, r.delta_max_abs, r.omega_rho_max] {
            row.push(fmt(v));
        }
        row.extend(r.wc.iter().map(|v| fmt(*v)));
        row.extend(r.wa.iter().map(|v| fmt(*v)));
        row.extend(r.theta.iter().map(|v| fmt(*v)));
        for v in [r.rank_min, r.stack_min_eig, r.gamma_eig_min, r.gamma_eig_max] {
            row.push(fmt(v));
        }
        row.push(u8::from(r.hyp_ok).to_string());
        row.push(r.stack_event.clone());
        row.push(r.qp_status.clone());
        row.push(u8::from(r.gamma_clamped).to_string());
        row.push(u8::from(r.degenerate).to_string());
        row.push(u8::from(r.saturated).to_string());
        row
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.records {
            w.write_record(Self::row(r))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Outcome of comparing two CSV logs row by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsvDiff {
    Identical,
    /// Header differs.
    Header,
    /// First differing data row (0-based, header excluded) and column name.
    Row { index: usize, column: String },
    /// One log has more rows; index of the first unmatched row.
    Length { index: usize },
}

/// Compares two CSV documents cell by cell, as text.
pub fn diff_csv<R1: Read, R2: Read>(expected: R1, actual: R2) -> Result<CsvDiff, csv::Error> {
    let mut a = csv::ReaderBuilder::new().has_headers(true).from_reader(expected);
    let mut b = csv::ReaderBuilder::new().has_headers(true).from_reader(actual);
    let ha = a.headers()?.clone();
    let hb = b.headers()?.clone();
    if ha != hb {
        return Ok(CsvDiff::Header);
    }
    let mut ra = a.records();
    let mut rb = b.records();
    let mut index = 0;
    loop {
        match (ra.next(), rb.next()) {
            (None, None) => return Ok(CsvDiff::Identical),
            (Some(_), None) | (None, Some(_)) => return Ok(CsvDiff::Length { index }),
            (Some(x), Some(y)) => {
                let (x, y) = (x?, y?);
                if x != y {
                    let col = (0..x.len().max(y.len()))
                        .find(|&c| x.get(c) != y.get(c))
                        .and_then(|c| ha.get(c))
                        .unwrap_or("?")
                        .to_string();
                    return Ok(CsvDiff::Row { index, column: col });
                }
            }
        }
        index += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(t: f64, x: [f64; 2], xhat: [f64; 2]) -> StepRecord {
        StepRecord {
            t,
            x: x.to_vec(),
            xhat: xhat.to_vec(),
            u: vec![0.0],
            pi_des: vec![0.0],
            h_x: 1.0,
            h_xhat: 1.0,
            delta_mean_abs: 0.0,
            delta_max_abs: 0.0,
            omega_rho_max: 0.0,
            wc: vec![0.0; 3],
            wa: vec![0.0; 3],
            theta: vec![0.0; 2],
            rank_min: 0.0,
            stack_min_eig: 0.0,
            gamma_eig_min: 1.0,
            gamma_eig_max: 1.0,
            hyp_ok: true,
            stack_event: "none".into(),
            qp_status: "optimal".into(),
            gamma_clamped: false,
            degenerate: false,
            saturated: false,
        }
    }

    #[test]
    fn header_matches_row_width() {
        let mut log = TrajectoryLog::new(BenchmarkId::ConvexSet, 2, 1, 3, 1);
        log.records.push(record(0.0, [1.0, 2.0], [1.0, 2.0]));
        let text = log.to_csv_string();
        let mut lines = text.lines();
        let h = lines.next().unwrap().split(',').count();
        let r = lines.next().unwrap().split(',').count();
        assert_eq!(h, r);
        assert_eq!(h, log.header().len());
    }

    #[test]
    fn floats_carry_seventeen_digits() {
        assert_eq!(fmt(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn diff_finds_first_edited_row() {
        let mut log = TrajectoryLog::new(BenchmarkId::ConvexSet, 2, 1, 3, 1);
        for k in 0..5 {
            log.records.push(record(k as f64, [k as f64, 0.0], [0.0, 0.0]));
        }
        let a = log.to_csv_string();
        assert_eq!(diff_csv(a.as_bytes(), a.as_bytes()).unwrap(), CsvDiff::Identical);
        log.records[3].h_x = 2.0;
        let b = log.to_csv_string();
        assert_eq!(diff_csv(a.as_bytes(), b.as_bytes()).unwrap(), CsvDiff::Row { index: 3, column: "h_x".into() });
        log.records.pop();
        let c = log.to_csv_string();
        assert_eq!(diff_csv(a.as_bytes(), c.as_bytes()).unwrap(), CsvDiff::Row { index: 3, column: "h_x".into() });
    }
}
