//! Sampled trajectories and their CSV representation.
//!
//! Columns: `t,Vs_1..Vs_ns,Vl_1..Vl_nl,P_1..P_ns[,p_1..p_ns],M,geomean_log`.
//! Values are written with 17 significant digits so a parse round-trips bit-exactly.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{GridError, Result};
use crate::simulator::integrate::RunStats;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub vs: DVector<f64>,
    pub vl: DVector<f64>,
    pub p: Option<DVector<f64>>,
    /// Source power injections (W).
    pub ps: DVector<f64>,
    /// Lyapunov (Bregman) value, when a reference equilibrium was supplied.
    pub m: Option<f64>,
    /// `Σ C_i ln V_i`.
    pub geomean_log: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Sharing weights of the run.
    pub c: DVector<f64>,
    pub samples: Vec<Sample>,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn n_sources(&self) -> usize {
        self.c.len()
    }

    pub fn n_loads(&self) -> usize {
        self.samples.first().map_or(0, |s| s.vl.len())
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Copy restricted to samples with `t >= t0`.
    pub fn after(&self, t0: f64) -> Trajectory {
        Trajectory {
            c: self.c.clone(),
            samples: self.samples.iter().filter(|s| s.t >= t0).cloned().collect(),
            stats: self.stats,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let ns = self.n_sources();
        let nl = self.n_loads();
        let has_p = self.samples.first().is_some_and(|s| s.p.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=ns).map(|i| format!("Vs_{i}")));
        header.extend((1..=nl).map(|i| format!("Vl_{i}")));
        header.extend((1..=ns).map(|i| format!("P_{i}")));
        if has_p {
            header.extend((1..=ns).map(|i| format!("p_{i}")));
        }
        header.push("M".into());
        header.push("geomean_log".into());
        w.write_record(&header).map_err(csv_err)?;

        let fmt = |x: f64| format!("{x:.16e}");
        for s in &self.samples {
            let mut row = Vec::with_capacity(header.len());
            row.push(fmt(s.t));
            row.extend(s.vs.iter().map(|&x| fmt(x)));
            row.extend(s.vl.iter().map(|&x| fmt(x)));
            row.extend(s.ps.iter().map(|&x| fmt(x)));
            if let Some(p) = &s.p {
                row.extend(p.iter().map(|&x| fmt(x)));
            }
            row.push(s.m.map_or_else(|| "NaN".to_string(), fmt));
            row.push(fmt(s.geomean_log));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| GridError::Trajectory(e.to_string()))?;
        Ok(())
    }

    /// Parses a CSV produced by [`Trajectory::write_csv`]; `c` supplies the sharing weights.
    pub fn read_csv<R: Read>(input: R, c: &DVector<f64>) -> Result<Trajectory> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let ns = count("Vs_");
        let nl = count("Vl_");
        let np = count("p_");
        if ns != c.len() {
            return Err(GridError::Trajectory(format!(
                "CSV has {ns} source columns but {} sharing weights were given",
                c.len()
            )));
        }
        let expected = 1 + 2 * ns + nl + np + 2;
        if header.len() != expected
            || header[0] != "t"
            || (np != 0 && np != ns)
            || header[expected - 2] != "M"
            || header[expected - 1] != "geomean_log"
        {
            return Err(GridError::Trajectory(format!("unexpected header {header:?}")));
        }

        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != expected {
                return Err(GridError::Trajectory(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| GridError::Trajectory(format!("row {}: {e}", line + 1)))
                })
                .collect::<Result<_>>()?;
            let mut at = 1;
            let mut take = |n: usize| {
                let v = DVector::from_column_slice(&vals[at..at + n]);
                at += n;
                v
            };
            let vs = take(ns);
            let vl = take(nl);
            let ps = take(ns);
            let p = (np > 0).then(|| take(np));
            let m = vals[expected - 2];
            samples.push(Sample {
                t: vals[0],
                vs,
                vl,
                p,
                ps,
                m: (!m.is_nan()).then_some(m),
                geomean_log: vals[expected - 1],
            });
        }
        if samples.is_empty() {
            return Err(GridError::Trajectory("no samples".into()));
        }
        if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(GridError::Trajectory("time column is not strictly increasing".into()));
        }
        Ok(Trajectory {
            c: c.clone(),
            samples,
            stats: RunStats::default(),
        })
    }
}

fn csv_err(e: csv::Error) -> GridError {
    GridError::Trajectory(e.to_string())
}
