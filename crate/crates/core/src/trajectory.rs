//! Episode time series and their CSV form.
//!
//! One row per control step: the state at the start of the step, the
//! command issued, the acceleration that acted during the step and the
//! clipped reward received for it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["t", "e", "e_dot", "v_i", "u", "a", "reward"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub e: f64,
    pub e_dot: f64,
    pub v_i: f64,
    pub u: f64,
    pub a: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.e)
    }

    pub fn episode_reward(&self) -> f64 {
        self.rows.iter().map(|r| r.reward).sum()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Parse {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            // `{}` on f64 prints the shortest representation that parses back
            // to the same bits.
            let fields = [r.t, r.e, r.e_dot, r.v_i, r.u, r.a, r.reward].map(|v| v.to_string());
            w.write_record(&fields).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(file))
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header {}, found {}",
                    CSV_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != CSV_HEADER.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 7 fields, found {}", record.len()),
                });
            }
            let mut v = [0.0; 7];
            for (slot, (field, name)) in v.iter_mut().zip(record.iter().zip(CSV_HEADER)) {
                *slot = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {name}: cannot parse {field:?} as a number"),
                })?;
            }
            rows.push(TrajectoryRow {
                t: v[0],
                e: v[1],
                e_dot: v[2],
                v_i: v[3],
                u: v[4],
                a: v[5],
                reward: v[6],
            });
        }
        Ok(Self { rows })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        Trajectory {
            rows: (0..5)
                .map(|i| TrajectoryRow {
                    t: i as f64 * 0.1,
                    e: 1.0 / 3.0 + i as f64,
                    e_dot: -0.1 * i as f64,
                    v_i: 30.0 + 0.1 * i as f64,
                    u: std::f64::consts::PI / 7.0,
                    a: 1e-300,
                    reward: -0.123456789012345678,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let tr = sample();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,e,e_dot,v_i,u,a,reward\n"));
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn header_mismatch_is_a_parse_error() {
        let text = "t,e,edot,v_i,u,a,reward\n0,0,0,0,0,0,0\n";
        match Trajectory::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "t,e,e_dot,v_i,u,a,reward\n0,0,0,0,0,0,0\n0.1,x,0,0,0,0,0\n";
        match Trajectory::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("column e"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
