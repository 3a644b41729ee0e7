//! Closed-loop traces and their CSV form.
//!
//! Floats are written with 17 significant digits, which is enough for an
//! exact `f64` round trip.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    pub r: Vec<f64>,
    pub psi: Vec<f64>,
    pub kkt_res: f64,
    pub term_margin: f64,
    pub max_cviol: f64,
    pub rdot_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub rows: Vec<TraceRow>,
}

impl SimTrace {
    pub fn new(n: usize, m: usize, l: usize) -> Self {
        Self { n, m, l, rows: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn header(&self) -> Vec<String> {
        header(self.n, self.m, self.l)
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    /// Column `i` of a per-row vector field.
    pub fn series(&self, pick: impl Fn(&TraceRow) -> &Vec<f64>, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| pick(r)[i]).collect()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        for row in &self.rows {
            let fields: Vec<String> = std::iter::once(row.t)
                .chain(row.xi.iter().copied())
                .chain(row.nu.iter().copied())
                .chain(row.r.iter().copied())
                .chain(row.psi.iter().copied())
                .chain([row.kkt_res, row.term_margin, row.max_cviol, row.rdot_norm])
                .map(format_float)
                .collect();
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Trace("empty file: missing header".into()))??;
        let (n, m, l) = parse_header(&head)?;
        let mut trace = SimTrace::new(n, m, l);
        let width = 1 + n + m + 2 * l + 4;
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Trace(format!("line {}: {e}", k + 2)))?;
            if vals.len() != width {
                return Err(Error::Trace(format!("line {}: {} fields, header has {width}", k + 2, vals.len())));
            }
            let mut it = vals.into_iter();
            let mut take = |c: usize| -> Vec<f64> { it.by_ref().take(c).collect() };
            let t = take(1)[0];
            let xi = take(n);
            let nu = take(m);
            let r = take(l);
            let psi = take(l);
            let tail = take(4);
            trace.rows.push(TraceRow {
                t,
                xi,
                nu,
                r,
                psi,
                kkt_res: tail[0],
                term_margin: tail[1],
                max_cviol: tail[2],
                rdot_norm: tail[3],
            });
        }
        Ok(trace)
    }
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(n: usize, m: usize, l: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("xi_{i}")));
    h.extend((1..=m).map(|i| format!("nu_{i}")));
    h.extend((1..=l).map(|i| format!("r_{i}")));
    h.extend((1..=l).map(|i| format!("psi_{i}")));
    h.extend(["kkt_res", "term_margin", "max_cviol", "rdot_norm"].map(String::from));
    h
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let cols: Vec<&str> = line.trim().split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
    let (n, m, l) = (count("xi_"), count("nu_"), count("r_"));
    let expected = header(n, m, l);
    if n == 0 || m == 0 || l == 0 || cols != expected {
        return Err(Error::Trace(format!("header does not match the trace schema: {line}")));
    }
    Ok((n, m, l))
}
