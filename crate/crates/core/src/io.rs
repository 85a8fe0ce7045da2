//! File formats for records, raw traces, trajectories and metrics.
//!
//! Binary record layout (little endian): `dt: f64`, `n: u64`, `eta: f64`,
//! `seed: u64`, then `n` interleaved `(i1, i2)` pairs of `f64`.
//! Binary raw-trace layout: `fs: f64`, `n: u64`, then `n` samples of `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimate::{EffectTrajectory, Trajectory};
use crate::ingest::RawTrace;
use crate::metrics::{ConsistencySeries, DeltaSeries, HsSeries, VacfResult};
use crate::simulate::MeasurementRecord;

const RECORD_HEADER: usize = 32;
const RAW_HEADER: usize = 16;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn f64_at(buf: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(buf[off..off + 8].try_into().expect("8-byte slice"))
}

fn u64_at(buf: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(buf[off..off + 8].try_into().expect("8-byte slice"))
}

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:?}")
    }
}

pub fn record_to_bytes(rec: &MeasurementRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_HEADER + 16 * rec.len());
    out.extend_from_slice(&rec.dt.to_le_bytes());
    out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
    out.extend_from_slice(&rec.eta_effective.to_le_bytes());
    out.extend_from_slice(&rec.seed.to_le_bytes());
    for (a, b) in rec.i1.iter().zip(&rec.i2) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn record_from_bytes(buf: &[u8]) -> Result<MeasurementRecord> {
    let bad = |detail: String| Error::Format {
        what: "binary record",
        detail,
    };
    if buf.len() < RECORD_HEADER {
        return Err(bad(format!("{} bytes is shorter than the header", buf.len())));
    }
    let n = u64_at(buf, 8) as usize;
    let expect = n
        .checked_mul(16)
        .and_then(|p| p.checked_add(RECORD_HEADER))
        .ok_or_else(|| bad(format!("sample count {n} overflows")))?;
    if buf.len() != expect {
        return Err(bad(format!("expected {expect} bytes for {n} samples, found {}", buf.len())));
    }
    let mut i1 = Vec::with_capacity(n);
    let mut i2 = Vec::with_capacity(n);
    for k in 0..n {
        let off = RECORD_HEADER + 16 * k;
        i1.push(f64_at(buf, off));
        i2.push(f64_at(buf, off + 8));
    }
    MeasurementRecord::new(f64_at(buf, 0), i1, i2, f64_at(buf, 16), u64_at(buf, 24))
}

pub fn write_record_binary(path: &Path, rec: &MeasurementRecord) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&record_to_bytes(rec))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_record_binary(path: &Path) -> Result<MeasurementRecord> {
    record_from_bytes(&read_all(path)?)
}

/// CSV columns `t_s,i1,i2`. The format carries no efficiency or seed.
pub fn write_record_csv(path: &Path, rec: &MeasurementRecord) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["t_s", "i1", "i2"]).map_err(err)?;
    for k in 0..rec.len() {
        w.write_record([num(k as f64 * rec.dt), num(rec.i1[k]), num(rec.i2[k])])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `t_s,i1,i2` CSV; `dt` is taken from the first two time stamps.
pub fn read_record_csv(path: &Path, eta: f64) -> Result<MeasurementRecord> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut t = Vec::new();
    let mut i1 = Vec::new();
    let mut i2 = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    what: "record csv",
                    detail: format!("{}: bad field {i} on data line {}", path.display(), line + 1),
                })
        };
        t.push(field(0)?);
        i1.push(field(1)?);
        i2.push(field(2)?);
    }
    let dt = uniform_step(&t, path)?;
    MeasurementRecord::new(dt, i1, i2, eta, 0)
}

fn uniform_step(t: &[f64], path: &Path) -> Result<f64> {
    if t.len() < 2 {
        return Err(Error::Format {
            what: "csv",
            detail: format!("{}: need at least two samples", path.display()),
        });
    }
    let dt = t[1] - t[0];
    if !(dt > 0.0) || t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt) {
        return Err(Error::Format {
            what: "csv",
            detail: format!("{}: time stamps are not uniformly increasing", path.display()),
        });
    }
    Ok(dt)
}

pub fn write_raw_binary(path: &Path, raw: &RawTrace) -> Result<()> {
    let mut out = Vec::with_capacity(RAW_HEADER + 8 * raw.samples.len());
    out.extend_from_slice(&raw.fs.to_le_bytes());
    out.extend_from_slice(&(raw.samples.len() as u64).to_le_bytes());
    for v in &raw.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut w = create(path)?;
    w.write_all(&out)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_raw_binary(path: &Path) -> Result<RawTrace> {
    let buf = read_all(path)?;
    let bad = |detail: String| Error::Format {
        what: "binary raw trace",
        detail,
    };
    if buf.len() < RAW_HEADER {
        return Err(bad("file shorter than the header".into()));
    }
    let n = u64_at(&buf, 8) as usize;
    if Some(buf.len()) != n.checked_mul(8).and_then(|p| p.checked_add(RAW_HEADER)) {
        return Err(bad(format!("length does not match {n} samples")));
    }
    let fs = f64_at(&buf, 0);
    if !(fs > 0.0) {
        return Err(bad(format!("sample rate {fs} must be positive")));
    }
    let samples = (0..n).map(|k| f64_at(&buf, RAW_HEADER + 8 * k)).collect();
    Ok(RawTrace {
        fs,
        samples,
        shot_level: None,
    })
}

/// CSV columns `t_s,value`.
pub fn write_raw_csv(path: &Path, raw: &RawTrace) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["t_s", "value"]).map_err(err)?;
    for (m, v) in raw.samples.iter().enumerate() {
        w.write_record([num(m as f64 / raw.fs), num(*v)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_csv(path: &Path) -> Result<RawTrace> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut t = Vec::new();
    let mut samples = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let parse = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    what: "raw csv",
                    detail: format!("{}: bad field {i} on data line {}", path.display(), line + 1),
                })
        };
        t.push(parse(0)?);
        samples.push(parse(1)?);
    }
    let dt = uniform_step(&t, path)?;
    Ok(RawTrace {
        fs: 1.0 / dt,
        samples,
        shot_level: None,
    })
}

/// Appends trajectory rows `t_s,mean_x1,mean_x2,v,kind` to an open writer.
pub fn write_trajectory_rows<W: Write>(w: &mut csv::Writer<W>, traj: &Trajectory, record: Option<usize>) -> csv::Result<()> {
    for k in 0..traj.len() {
        let mut row = Vec::with_capacity(6);
        if let Some(r) = record {
            row.push(r.to_string());
        }
        row.extend([
            num(traj.times[k]),
            num(traj.means[k][0]),
            num(traj.means[k][1]),
            num(traj.variances[k]),
            traj.kind.label().to_string(),
        ]);
        w.write_record(row)?;
    }
    Ok(())
}

/// Appends effect rows `t_s,mean_x1,mean_x2,w,kind`; means are blank where `w = 0`.
pub fn write_effect_rows<W: Write>(w: &mut csv::Writer<W>, e: &EffectTrajectory, record: Option<usize>) -> csv::Result<()> {
    for k in 0..e.len() {
        let m = e.mean(k).unwrap_or([f64::NAN; 2]);
        let mut row = Vec::with_capacity(6);
        if let Some(r) = record {
            row.push(r.to_string());
        }
        row.extend([
            num(e.times[k]),
            num(m[0]),
            num(m[1]),
            num(e.precision[k]),
            "Retrofiltered".to_string(),
        ]);
        w.write_record(row)?;
    }
    Ok(())
}

/// Writes trajectories of possibly several records to one CSV; a leading
/// `record` column is added when there is more than one.
pub fn write_trajectories_csv(path: &Path, trajs: &[&Trajectory]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let multi = trajs.len() > 1;
    let mut header = vec!["t_s", "mean_x1", "mean_x2", "v", "kind"];
    if multi {
        header.insert(0, "record");
    }
    w.write_record(&header).map_err(err)?;
    for (i, t) in trajs.iter().enumerate() {
        write_trajectory_rows(&mut w, t, multi.then_some(i)).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_effects_csv(path: &Path, effects: &[&EffectTrajectory]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let multi = effects.len() > 1;
    let mut header = vec!["t_s", "mean_x1", "mean_x2", "w", "kind"];
    if multi {
        header.insert(0, "record");
    }
    w.write_record(&header).map_err(err)?;
    for (i, e) in effects.iter().enumerate() {
        write_effect_rows(&mut w, e, multi.then_some(i)).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a single-record trajectory CSV written by [`write_trajectories_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            what: "trajectory csv",
            detail: format!("{}: missing column {name}", path.display()),
        })
    };
    let (ct, c1, c2, cv, ck) = (col("t_s")?, col("mean_x1")?, col("mean_x2")?, col("v")?, col("kind")?);
    let mut kind = None;
    let (mut times, mut means, mut variances) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let f = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| Error::Format {
                what: "trajectory csv",
                detail: format!("{}: bad number {:?}", path.display(), &row[i]),
            })
        };
        times.push(f(ct)?);
        means.push([f(c1)?, f(c2)?]);
        variances.push(f(cv)?);
        if kind.is_none() {
            kind = Some(parse_kind(&row[ck]).ok_or_else(|| Error::Format {
                what: "trajectory csv",
                detail: format!("unknown kind {:?}", &row[ck]),
            })?);
        }
    }
    let kind = kind.ok_or_else(|| Error::Format {
        what: "trajectory csv",
        detail: format!("{}: no rows", path.display()),
    })?;
    Ok(Trajectory {
        kind,
        physical: kind != crate::estimate::TrajectoryKind::ClassicalSmoothed,
        converged: true,
        times,
        means,
        variances,
    })
}

pub fn parse_kind(s: &str) -> Option<crate::estimate::TrajectoryKind> {
    use crate::estimate::TrajectoryKind::*;
    [Filtered, Retrofiltered, Ltl, SmoothedLtl, SmoothedTrue, SmoothedCustom, ClassicalSmoothed, True]
        .into_iter()
        .find(|k| k.label() == s)
}

/// Per-time metrics, columns `t_s,kind,var_ens,theory,sev,hs_empirical,hs_theory`.
///
/// Consistency rows leave the HS columns blank; HS rows are labelled
/// `estimator|target` and leave the variance columns blank.
pub fn write_metrics_csv(path: &Path, consistency: &[ConsistencySeries], hs: &[HsSeries]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["t_s", "kind", "var_ens", "theory", "sev", "hs_empirical", "hs_sem", "hs_theory"])
        .map_err(err)?;
    for c in consistency {
        for k in 0..c.times.len() {
            w.write_record([
                num(c.times[k]),
                c.kind.label().to_string(),
                num(c.var_ens[k]),
                num(c.theory[k]),
                num(c.sev[k]),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(err)?;
        }
    }
    for h in hs {
        let label = format!("{}|{}", h.estimator.label(), h.target.label());
        for k in 0..h.times.len() {
            w.write_record([
                num(h.times[k]),
                label.clone(),
                String::new(),
                String::new(),
                String::new(),
                num(h.mean[k]),
                num(h.sem[k]),
                num(h.theory[k]),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Empirical and theoretical spreads of estimator errors, `t_s,kind,std,se,theory`.
pub fn write_delta_std_csv(path: &Path, rows: &[(DeltaSeries, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["t_s", "kind", "std", "se", "theory"]).map_err(err)?;
    for (d, theory) in rows {
        let label = format!("{}|{}", d.estimator.label(), d.target.label());
        for k in 0..d.times.len() {
            w.write_record([num(d.times[k]), label.clone(), num(d.std[k]), num(d.se[k]), num(theory[k])])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// VACF columns `lag_s,kind,value`.
pub fn write_vacf_csv(path: &Path, v: &VacfResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["lag_s", "kind", "value"]).map_err(err)?;
    for s in &v.series {
        for (lag, value) in v.lags.iter().zip(&s.values) {
            w.write_record([num(*lag), s.kind.label().to_string(), num(*value)])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Format {
        what: "json",
        detail: e.to_string(),
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> MeasurementRecord {
        MeasurementRecord::new(1e-6, vec![1.5, -2.25, 1e-300], vec![0.1, 0.2, 3e8], 0.38, 99).unwrap()
    }

    #[test]
    fn binary_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        let rec = sample_record();
        write_record_binary(&p, &rec).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 32 + 3 * 16);
        assert_eq!(read_record_binary(&p).unwrap(), rec);
        let mut bytes = record_to_bytes(&rec);
        bytes.pop();
        assert!(record_from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rec = sample_record();
        write_record_csv(&p, &rec).unwrap();
        let back = read_record_csv(&p, 0.38).unwrap();
        assert_eq!(back.i1, rec.i1);
        assert_eq!(back.i2, rec.i2);
        assert!((back.dt - rec.dt).abs() < 1e-18);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t_s,i1,i2\n"));
    }

    #[test]
    fn raw_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let raw = RawTrace { fs: 5e6, samples: vec![0.5, -1.0, 2.0, 0.0], shot_level: None };
        let b = dir.path().join("raw.bin");
        write_raw_binary(&b, &raw).unwrap();
        assert_eq!(read_raw_binary(&b).unwrap(), raw);
        let c = dir.path().join("raw.csv");
        write_raw_csv(&c, &raw).unwrap();
        let back = read_raw_csv(&c).unwrap();
        assert_eq!(back.samples, raw.samples);
        assert!((back.fs - raw.fs).abs() < 1e-3);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = Trajectory {
            kind: crate::estimate::TrajectoryKind::SmoothedLtl,
            times: vec![0.0, 1e-6],
            means: vec![[1.0, 2.0], [3.0, 4.0]],
            variances: vec![13.1, 12.9],
            physical: true,
            converged: true,
        };
        write_trajectories_csv(&p, &[&t]).unwrap();
        assert_eq!(read_trajectory_csv(&p).unwrap(), t);
    }

    #[test]
    fn io_errors_carry_paths() {
        let err = read_record_binary(Path::new("/nonexistent/x.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.bin"));
    }
}
