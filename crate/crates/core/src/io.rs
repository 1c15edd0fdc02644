//! CSV encodings for traces and tables, plus atomic file writes.
//!
//! Trace files: header `time_s,<channel>,...`, one row per sample, uniform
//! strictly increasing `time_s`, `\n` line endings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Trace, Unit};

pub const TIME_COLUMN: &str = "time_s";

/// Writes `contents` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Plain decimal rendering, rounded to 12 significant decimals so time
/// stamps do not carry float noise.
pub fn fmt_time(t: f64) -> String {
    let r = (t * 1e12).round() / 1e12;
    format!("{r}")
}

pub fn trace_to_csv(trace: &Trace) -> String {
    let mut out = String::new();
    out.push_str(TIME_COLUMN);
    for c in trace.channels() {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, row) in trace.rows().enumerate() {
        out.push_str(&fmt_time(trace.time(i)));
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    atomic_write(path, trace_to_csv(trace).as_bytes())
}

/// What a trace file must contain.
#[derive(Debug, Clone)]
pub struct TraceSchema {
    pub unit: Unit,
    /// Required channels; `None` accepts whatever the header lists.
    pub channels: Option<Vec<String>>,
}

impl TraceSchema {
    pub fn any(unit: Unit) -> Self {
        TraceSchema {
            unit,
            channels: None,
        }
    }
}

pub fn read_trace(path: &Path, schema: &TraceSchema) -> Result<Trace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path, schema)
}

pub fn parse_trace(text: &str, path: &Path, schema: &TraceSchema) -> Result<Trace> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some(TIME_COLUMN) {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: TIME_COLUMN.into(),
        });
    }
    let file_channels = &header[1..];
    if file_channels.is_empty() {
        return Err(parse_err(1, "no data columns".into()));
    }
    let channels: Vec<String> = match &schema.channels {
        Some(req) => {
            for c in req {
                if !file_channels.contains(c) {
                    return Err(Error::MissingColumn {
                        path: path.to_path_buf(),
                        column: c.clone(),
                    });
                }
            }
            req.clone()
        }
        None => file_channels.to_vec(),
    };
    let picks: Vec<usize> = channels
        .iter()
        .map(|c| file_channels.iter().position(|f| f == c).unwrap())
        .collect();

    let mut times = Vec::new();
    let mut values = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let nums = rec
            .iter()
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("not a number: `{f}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite value `{f}`")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        times.push((line, nums[0]));
        values.extend(picks.iter().map(|&p| nums[p + 1]));
    }
    if times.len() < 2 {
        return Err(parse_err(
            1,
            "need at least two samples to infer the interval".into(),
        ));
    }
    let interval = times[1].1 - times[0].1;
    if interval <= 0.0 {
        return Err(parse_err(
            times[1].0,
            "time_s must be strictly increasing".into(),
        ));
    }
    for w in times.windows(2) {
        let d = w[1].1 - w[0].1;
        if d <= 0.0 {
            return Err(parse_err(
                w[1].0,
                "time_s must be strictly increasing".into(),
            ));
        }
        if (d - interval).abs() > 1e-6 * interval {
            return Err(parse_err(
                w[1].0,
                format!("non-uniform sampling: step {d} vs {interval}"),
            ));
        }
    }
    Trace::new(interval, channels, values, schema.unit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.csv")
    }

    #[test]
    fn three_rows_parse() {
        let t = parse_trace(
            "time_s,a,b\n0,1,2\n0.002,3,4\n0.004,5,6\n",
            p(),
            &TraceSchema::any(Unit::Instructions),
        )
        .unwrap();
        assert_eq!(t.num_samples(), 3);
        assert_eq!(t.channels(), &["a".to_string(), "b".to_string()]);
        assert!((t.sample_interval() - 0.002).abs() < 1e-15);
    }

    #[test]
    fn missing_column_is_named() {
        let schema = TraceSchema {
            unit: Unit::Instructions,
            channels: Some(vec!["a".into(), "fpu".into()]),
        };
        match parse_trace("time_s,a\n0,1\n1,2\n", p(), &schema) {
            Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "fpu"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_uniform_time_is_rejected_with_line() {
        match parse_trace(
            "time_s,a\n0,1\n1,2\n3,4\n",
            p(),
            &TraceSchema::any(Unit::Celsius),
        ) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_nan_rows() {
        let s = TraceSchema::any(Unit::Celsius);
        match parse_trace("time_s,a\n0,1\n1,x\n", p(), &s) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_trace("time_s,a\n0,1\n1,NaN\n", p(), &s).is_err());
        assert!(parse_trace("time_s,a\n0,1\n1\n", p(), &s).is_err());
        assert!(parse_trace("t,a\n0,1\n1,2\n", p(), &s).is_err());
    }

    #[test]
    fn write_then_read_preserves_trace() {
        let t = Trace::from_rows(
            0.002,
            vec!["x".into(), "y".into()],
            &[vec![1.5, -2.0], vec![0.1, 3.0], vec![7.0, 1e-7]],
            Unit::Watts,
        )
        .unwrap();
        let csv = trace_to_csv(&t);
        assert!(csv.starts_with("time_s,x,y\n0,1.5,-2\n0.002,"));
        let back = parse_trace(&csv, p(), &TraceSchema::any(Unit::Watts)).unwrap();
        assert_eq!(back.values(), t.values());
    }

    #[test]
    fn atomic_write_creates_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.csv");
        atomic_write(&path, b"hi\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hi\n");
        assert!(!dir.path().join("a/b/out.csv.tmp").exists());
    }
}
