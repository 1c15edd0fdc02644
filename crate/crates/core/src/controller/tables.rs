//! Calibrated lookup tables: security level to temperature increment, and
//! temperature increment to generator power.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A table read that may have fallen outside the calibrated domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub value: f64,
    pub clamped: bool,
}

/// Monotone piecewise-linear map from temperature increment (°C) to
/// generator power (W), anchored at `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PTable {
    points: Vec<(f64, f64)>,
}

impl PTable {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let Some(&(d0, p0)) = points.first() else {
            return Err(Error::EmptyTable);
        };
        if d0 != 0.0 || p0 != 0.0 {
            return Err(Error::validation("power table must start at (0, 0)"));
        }
        for w in points.windows(2) {
            let ((da, pa), (db, pb)) = (w[0], w[1]);
            if !(db.is_finite() && pb.is_finite()) {
                return Err(Error::validation("power table entries must be finite"));
            }
            if db <= da {
                return Err(Error::validation(
                    "power table increments must be strictly increasing",
                ));
            }
            if pb < pa {
                return Err(Error::validation("power table must be nondecreasing"));
            }
        }
        Ok(PTable { points })
    }

    /// `power = slope * delta` on `[0, max_delta]`.
    pub fn linear(slope: f64, max_delta: f64) -> Result<Self> {
        PTable::new(vec![(0.0, 0.0), (max_delta, slope * max_delta)])
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn max_delta(&self) -> f64 {
        self.points.last().unwrap().0
    }

    pub fn max_power(&self) -> f64 {
        self.points.last().unwrap().1
    }

    /// Average W/°C over the calibrated domain; 0 for a one-point table.
    pub fn slope(&self) -> f64 {
        if self.max_delta() > 0.0 {
            self.max_power() / self.max_delta()
        } else {
            0.0
        }
    }

    pub fn lookup(&self, delta: f64) -> Lookup {
        if delta <= 0.0 {
            return Lookup {
                value: 0.0,
                clamped: delta < 0.0,
            };
        }
        if delta > self.max_delta() {
            return Lookup {
                value: self.max_power(),
                clamped: true,
            };
        }
        let i = self.points.partition_point(|&(d, _)| d < delta);
        let (d1, p1) = self.points[i];
        let (d0, p0) = self.points[i - 1];
        Lookup {
            value: p0 + (p1 - p0) * (delta - d0) / (d1 - d0),
            clamped: false,
        }
    }

    /// Smallest increment whose power equals `power`.
    pub fn inverse(&self, power: f64) -> Lookup {
        if power <= 0.0 {
            return Lookup {
                value: 0.0,
                clamped: power < 0.0,
            };
        }
        if power > self.max_power() {
            return Lookup {
                value: self.max_delta(),
                clamped: true,
            };
        }
        let i = self.points.partition_point(|&(_, p)| p < power);
        let (d1, p1) = self.points[i];
        let (d0, p0) = self.points[i - 1];
        let value = if p1 > p0 {
            d0 + (d1 - d0) * (power - p0) / (p1 - p0)
        } else {
            d0
        };
        Lookup {
            value,
            clamped: false,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_t_c,power_w\n");
        for (d, p) in &self.points {
            out.push_str(&format!("{d},{p}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let rows = parse_pairs(text, path, ["delta_t_c", "power_w"])?;
        PTable::new(rows.into_iter().map(|(_, a, b)| (a, b)).collect())
    }
}

/// Security level (index) to temperature increment (°C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTable {
    increments: Vec<f64>,
    /// False when the table is the default fallback.
    pub calibrated: bool,
}

pub const DEFAULT_BASE_INCREMENT: f64 = 3.5;
pub const DEFAULT_INCREMENT_STEP: f64 = 0.5;
pub const DEFAULT_LEVELS: usize = 8;

impl Default for TTable {
    fn default() -> Self {
        TTable {
            increments: default_increments(),
            calibrated: false,
        }
    }
}

/// `3.5, 4.0, ..., 7.0` °C.
pub fn default_increments() -> Vec<f64> {
    (0..DEFAULT_LEVELS)
        .map(|s| DEFAULT_BASE_INCREMENT + DEFAULT_INCREMENT_STEP * s as f64)
        .collect()
}

impl TTable {
    pub fn new(increments: Vec<f64>) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::EmptyTable);
        }
        if increments.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::validation(
                "temperature increments must be finite and >= 0",
            ));
        }
        Ok(TTable {
            increments,
            calibrated: true,
        })
    }

    /// A one-level table, used to pin the controller at a fixed increment.
    pub fn fixed(delta: f64) -> Result<Self> {
        TTable::new(vec![delta])
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn max_level(&self) -> usize {
        self.increments.len() - 1
    }

    pub fn lookup(&self, level: usize) -> Option<f64> {
        self.increments.get(level).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,delta_t_c\n");
        for (s, d) in self.increments.iter().enumerate() {
            out.push_str(&format!("{s},{d}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let rows = parse_pairs(text, path, ["level", "delta_t_c"])?;
        for (i, (line, level, _)) in rows.iter().enumerate() {
            if *level != i as f64 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("expected level {i}, found {level}"),
                });
            }
        }
        TTable::new(rows.into_iter().map(|(_, _, d)| d).collect())
    }
}

fn parse_pairs(text: &str, path: &Path, header: [&str; 2]) -> Result<Vec<(usize, f64, f64)>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    for col in header {
        if !found.iter().any(|f| f == col) {
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: col.into(),
            });
        }
    }
    if found.len() != 2 || found[0] != header[0] {
        return Err(err(
            1,
            format!("expected header `{},{}`", header[0], header[1]),
        ));
    }
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let num = |f: &str| -> Result<f64> {
            f.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("not a finite number: `{f}`")))
        };
        out.push((line, num(&rec[0])?, num(&rec[1])?));
    }
    if out.is_empty() {
        return Err(Error::EmptyTable);
    }
    Ok(out)
}
