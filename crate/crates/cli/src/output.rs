//! Result rows and their CSV encoding.

use std::io;

pub const HEADER: [&str; 16] = [
    "scenario",
    "seed",
    "n",
    "d",
    "K",
    "tau",
    "lambda",
    "method",
    "mc_risk",
    "mc_stderr",
    "oracle_risk",
    "bound_value",
    "excess_risk",
    "comm_floats_up",
    "comm_floats_down",
    "wall_ms",
];

/// Position of a row in the output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub replicate: usize,
    pub tau_idx: usize,
    pub n_idx: usize,
    pub lambda_idx: usize,
    pub method_idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub key: RowKey,
    pub scenario: &'static str,
    pub seed: u64,
    pub n: Option<usize>,
    pub d: usize,
    pub k: usize,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub method: &'static str,
    pub mc_risk: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub oracle_risk: Option<f64>,
    pub bound_value: Option<f64>,
    pub excess_risk: Option<f64>,
    pub comm_floats_up: u64,
    pub comm_floats_down: u64,
    pub wall_ms: Option<f64>,
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

impl Row {
    pub fn fields(&self) -> [String; 16] {
        [
            self.scenario.to_string(),
            self.seed.to_string(),
            opt(self.n, |n| n.to_string()),
            self.d.to_string(),
            self.k.to_string(),
            opt(self.tau, fmt_float),
            opt(self.lambda, fmt_float),
            self.method.to_string(),
            opt(self.mc_risk, fmt_float),
            opt(self.mc_stderr, fmt_float),
            opt(self.oracle_risk, fmt_float),
            opt(self.bound_value, fmt_float),
            opt(self.excess_risk, fmt_float),
            self.comm_floats_up.to_string(),
            self.comm_floats_down.to_string(),
            opt(self.wall_ms, |w| format!("{w:.3}")),
        ]
    }
}

/// Sort rows into their canonical order and write them with the header.
pub fn write_csv<W: io::Write>(writer: W, rows: &mut [Row]) -> csv::Result<()> {
    rows.sort_by_key(|r| r.key);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for row in rows.iter() {
        w.write_record(row.fields())?;
    }
    w.flush()?;
    Ok(())
}
