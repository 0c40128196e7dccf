//! CSV and manifest persistence.
//!
//! Floats are written with 17 significant digits so that values round-trip
//! exactly. Nothing written here depends on the clock or on thread
//! scheduling; wall times go to their own file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::enkf::StepRecord;
use crate::error::{Error, Result};
use crate::experiment::StudyReport;
use crate::observation::ObservationRecord;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `n, y_1..y_m`; one row per observation time.
pub fn write_observations(path: &Path, records: &[ObservationRecord], m: usize) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["n".to_string()];
    header.extend((1..=m).map(|i| format!("y_{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.y.len() != m {
            return Err(Error::Dimension(format!("observation {} has {} entries, expected {m}", r.n, r.y.len())));
        }
        let mut row = vec![r.n.to_string()];
        row.extend(r.y.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    finish(w, path)
}

pub fn read_observations(path: &Path) -> Result<Vec<ObservationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let width = r.headers()?.len();
    if width < 2 || &r.headers()?[0] != "n" {
        return Err(Error::Parse(format!("{}: expected header n,y_1,..", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)));
        let n = rec[0].trim().parse::<usize>().map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
        if n != i + 1 {
            return Err(Error::Parse(format!("row {} has time index {n}", i + 1)));
        }
        let y = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation file"));
        }
        out.push(ObservationRecord { n, y });
    }
    Ok(out)
}

/// Per-step filter output for `n = 1..=N`.
pub fn write_estimates(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["n", "estimate", "cost_cum", "min_eig_S", "truncated_eig_count"])?;
    for r in records.iter().filter(|r| r.n > 0) {
        let diag = r.update.ok_or(Error::Phase("step record without update diagnostics"))?;
        w.write_record([
            r.n.to_string(),
            fmt_f64(r.estimate),
            fmt_f64(r.cost_cum),
            fmt_f64(diag.min_eig_s),
            diag.truncated.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_study(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "epsilon", "L", "rmse", "rmse_stderr", "cost_units"])?;
    for r in &report.rows {
        w.write_record([
            r.method.name().to_string(),
            fmt_f64(r.epsilon),
            r.level.to_string(),
            fmt_f64(r.errors.rmse),
            fmt_f64(r.errors.rmse_stderr),
            fmt_f64(r.cost_units),
        ])?;
    }
    finish(w, path)
}

/// RMSE at every assimilation step.
pub fn write_study_steps(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "epsilon", "n", "rmse"])?;
    for r in &report.rows {
        for (n, v) in r.rmse_per_step.iter().enumerate() {
            w.write_record([r.method.name().to_string(), fmt_f64(r.epsilon), n.to_string(), fmt_f64(*v)])?;
        }
    }
    finish(w, path)
}

pub fn write_timings(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "epsilon", "wall_s"])?;
    for r in &report.rows {
        w.write_record([r.method.name().to_string(), fmt_f64(r.epsilon), fmt_f64(r.wall_seconds)])?;
    }
    finish(w, path)
}

pub fn slope_report(report: &StudyReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("reference_level {}\n", report.reference_level));
    for e in &report.slopes {
        match (&e.fit, &e.note) {
            (Some(f), _) => s.push_str(&format!(
                "{} {} slope {} +/- {} points {}\n",
                e.method.name(),
                e.quantity,
                fmt_f64(f.slope),
                fmt_f64(f.half_width),
                f.points
            )),
            (None, note) => s.push_str(&format!(
                "{} {} slope none ({})\n",
                e.method.name(),
                e.quantity,
                note.as_deref().unwrap_or("not fitted")
            )),
        }
    }
    for (m, ok) in &report.monotone {
        s.push_str(&format!("{} rmse_monotone {}\n", m.name(), ok));
    }
    for r in &report.rows {
        s.push_str(&format!(
            "{} epsilon {} within_block_var {} between_block_var {}\n",
            r.method.name(),
            fmt_f64(r.epsilon),
            fmt_f64(r.errors.within_block_var),
            fmt_f64(r.errors.between_block_var)
        ));
    }
    for w in &report.warnings {
        s.push_str(&format!("warning {w}\n"));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// An input file pinned by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to redo a run byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Subcommand name.
    pub command: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub seed: u64,
    /// Command-line overrides that shaped the outputs.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub inputs: Vec<InputFile>,
    /// Output file name to content hash.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let config = config.canonical();
        let config_sha256 = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        let mut versions = BTreeMap::new();
        versions.insert("mlenkf-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Ok(Self {
            command: command.to_string(),
            seed: config.seed,
            config,
            config_sha256,
            overrides: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
            versions,
        })
    }

    /// Hashes the named files of `dir` into `outputs`.
    pub fn record_outputs(&mut self, dir: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            self.outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
        }
        Ok(())
    }

    pub fn verify_config_hash(&self) -> Result<()> {
        let h = sha256_hex(serde_json::to_string(&self.config)?.as_bytes());
        if h != self.config_sha256 {
            return Err(Error::InvalidConfig("manifest config hash does not match its config".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkf::UpdateDiagnostics;
    use crate::spectral::{LevelHierarchy, SpectralField};

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn observations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let recs: Vec<ObservationRecord> =
            (1..=3).map(|n| ObservationRecord { n, y: vec![n as f64 / 7.0, -1e-12, 3.0] }).collect();
        write_observations(&p, &recs, 3).unwrap();
        assert_eq!(read_observations(&p).unwrap(), recs);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "n,y_1,y_2,y_3");
    }

    #[test]
    fn empty_observation_file_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        write_observations(&p, &[], 4).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "n,y_1,y_2,y_3,y_4\n");
        assert!(read_observations(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_observations_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        fs::write(&p, "n,y_1\n2,0.5\n").unwrap();
        assert!(read_observations(&p).is_err());
        fs::write(&p, "n,y_1\n1,abc\n").unwrap();
        assert!(read_observations(&p).is_err());
    }

    #[test]
    fn estimates_skip_initial_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("est.csv");
        let mean = SpectralField::zeros(&LevelHierarchy::dyadic(0), 0).unwrap();
        let diag = UpdateDiagnostics { min_eig_s: 0.01, truncated: 1 };
        let recs = vec![
            StepRecord { n: 0, estimate: 0.0, cost_cum: 0.0, mean: mean.clone(), update: None },
            StepRecord { n: 1, estimate: 0.5, cost_cum: 12.0, mean, update: Some(diag) },
        ];
        write_estimates(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn manifest_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { output_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let m = Manifest::new("simulate", &cfg).unwrap();
        assert_eq!(m.config.output_dir, None);
        m.verify_config_hash().unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        let mut tampered = m.clone();
        tampered.config.seed += 1;
        assert!(tampered.verify_config_hash().is_err());
    }
}
