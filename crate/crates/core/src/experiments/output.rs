//! `rates.csv`, `slopes.json` and `trajectories.csv`. Every file opens with
//! `# mspde <version> config=<hash>`; only the JSON carries a timestamp.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::rates::{RateFit, RatePoint, RateReport};
use super::{timestamp, Status, VERSION};
use crate::error::{Error, Result};
use crate::integrators::PathBundle;

pub const RATES_FILE: &str = "rates.csv";
pub const SLOPES_FILE: &str = "slopes.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";

const RATE_COLUMNS: &str = "experiment,epsilon,gamma,q,error,stderr,n,paths,seed";

pub fn header_line(hash: &str) -> String {
    format!("# mspde {VERSION} config={hash}")
}

#[derive(Serialize)]
struct Slopes<'a> {
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    timestamp: u64,
    status: Status,
    fits: Vec<&'a RateFit>,
    notes: Vec<&'a str>,
}

/// Writes `rates.csv` and `slopes.json` for the given reports into `dir`.
pub fn emit_outputs(dir: &Path, reports: &[&RateReport]) -> Result<Vec<PathBuf>> {
    let first = reports.first().ok_or_else(|| Error::config("no reports to write"))?;
    if reports.iter().any(|r| r.config_hash != first.config_hash) {
        return Err(Error::config("reports come from different configurations"));
    }
    fs::create_dir_all(dir)?;
    let rates = dir.join(RATES_FILE);
    let mut csv = String::new();
    csv.push_str(&header_line(&first.config_hash));
    csv.push('\n');
    csv.push_str(RATE_COLUMNS);
    csv.push('\n');
    for p in reports.iter().flat_map(|r| &r.points) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.experiment, p.epsilon, p.gamma, p.q, p.error, p.stderr, p.n, p.paths, p.seed
        ));
    }
    fs::write(&rates, csv)?;

    let slopes = dir.join(SLOPES_FILE);
    let body = Slopes {
        version: VERSION,
        config_hash: &first.config_hash,
        seed: first.seed,
        timestamp: timestamp(),
        status: reports.iter().fold(Status::Pass, |s, r| s.and(r.status)),
        fits: reports.iter().flat_map(|r| &r.fits).collect(),
        notes: reports.iter().flat_map(|r| r.notes.iter().map(String::as_str)).collect(),
    };
    write_json(&slopes, &body)?;
    Ok(vec![rates, slopes])
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(line: usize, what: &str) -> Error {
    Error::config(format!("{RATES_FILE} line {line}: {what}"))
}

/// Reads back `rates.csv`: the config hash from the header and the rows.
/// The quarantine count is not part of the file and reads as zero.
pub fn read_rates_csv(path: &Path) -> Result<(String, Vec<RatePoint>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let hash = header
        .strip_prefix("# mspde ")
        .and_then(|rest| rest.split_once(" config="))
        .map(|(_, h)| h.to_string())
        .ok_or_else(|| parse_err(1, "missing version/config header"))?;
    if lines.next() != Some(RATE_COLUMNS) {
        return Err(parse_err(2, "unexpected column header"));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(parse_err(i + 3, "expected 9 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(i + 3, "bad number"));
        let int = |s: &str| s.parse::<u64>().map_err(|_| parse_err(i + 3, "bad integer"));
        points.push(RatePoint {
            experiment: f[0].to_string(),
            epsilon: num(f[1])?,
            gamma: num(f[2])?,
            q: num(f[3])?,
            error: num(f[4])?,
            stderr: num(f[5])?,
            n: int(f[6])? as usize,
            paths: int(f[7])? as usize,
            quarantined: 0,
            seed: int(f[8])?,
        });
    }
    Ok((hash, points))
}

/// One row of `trajectories.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub time: f64,
    /// 1-based mode index.
    pub mode: usize,
    pub value: f64,
    pub series: String,
}

/// Rows for the slow, fast and averaged paths stored in a bundle, tagged
/// `slow`, `fast`, `averaged`.
pub fn trajectory_rows(bundle: &PathBundle) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for (tag, series) in [("slow", &bundle.slow), ("fast", &bundle.fast), ("averaged", &bundle.averaged)] {
        for (t, field) in bundle.times.iter().zip(series.iter()) {
            for (k, v) in field.coeffs().iter().enumerate() {
                rows.push(TrajectoryRow {
                    time: *t,
                    mode: k + 1,
                    value: *v,
                    series: tag.into(),
                });
            }
        }
    }
    rows
}

pub fn write_trajectories_csv(path: &Path, hash: &str, rows: &[TrajectoryRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", header_line(hash))?;
    writeln!(out, "time,mode,value,series")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.time, r.mode, r.value, r.series)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::rates::fit_rate;

    fn report() -> RateReport {
        let points: Vec<RatePoint> = [0.5, 0.25, 0.125, 0.0625]
            .iter()
            .enumerate()
            .map(|(i, &eps)| RatePoint {
                experiment: "strong".into(),
                epsilon: eps,
                gamma: 0.25,
                q: 2.0,
                error: 0.37 * eps * (1.0 + 0.01 * i as f64),
                stderr: 1e-3 / 3.0,
                n: 8,
                paths: 256,
                quarantined: 0,
                seed: 42,
            })
            .collect();
        let fits = vec![fit_rate("strong", 0.25, 2.0, &points, (0.8, 1.2), Some(0.95))];
        RateReport {
            experiment: "strong".into(),
            version: VERSION.into(),
            config_hash: "00ff00ff00ff00ff".into(),
            seed: 42,
            timestamp: 1,
            points,
            fits,
            status: Status::Pass,
            notes: vec![],
        }
    }

    #[test]
    fn csv_round_trip_reproduces_the_fit() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        emit_outputs(dir.path(), &[&r]).unwrap();
        let (hash, points) = read_rates_csv(&dir.path().join(RATES_FILE)).unwrap();
        assert_eq!(hash, r.config_hash);
        assert_eq!(points, r.points);
        let refit = fit_rate("strong", 0.25, 2.0, &points, (0.8, 1.2), None);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(SLOPES_FILE)).unwrap()).unwrap();
        let slope = json["fits"][0]["slope"].as_f64().unwrap();
        assert!((refit.slope.unwrap() - slope).abs() < 1e-12);
        assert_eq!(json["config_hash"], "00ff00ff00ff00ff");
    }

    #[test]
    fn trajectories_have_header_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![TrajectoryRow {
            time: 0.5,
            mode: 1,
            value: -1.25,
            series: "slow".into(),
        }];
        let path = dir.path().join(TRAJECTORIES_FILE);
        write_trajectories_csv(&path, "abc", &rows).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text, format!("# mspde {VERSION} config=abc\ntime,mode,value,series\n0.5,1,-1.25,slow\n"));
    }
}
