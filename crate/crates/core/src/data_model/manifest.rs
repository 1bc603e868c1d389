use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EcgRecord, Sex, Signal};
use crate::error::{Error, Result};

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub signal_path: String,
    pub n_leads: usize,
    pub n_samples: usize,
    pub sampling_rate_hz: u32,
    #[serde(default)]
    pub age_years: Option<u32>,
    #[serde(default)]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub machine_report: Option<String>,
}

fn signal_file_name(record_id: &str) -> String {
    let safe: String = record_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

/// Writes `records` as a manifest at `path` plus one signal file per record
/// under `signals/` next to it.
pub fn save_manifest(path: &Path, records: &[EcgRecord]) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let sig_dir = dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;

    let mut seen = HashSet::new();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        rec.validate()?;
        if !seen.insert(rec.record_id.as_str()) {
            return Err(Error::Validation(format!("duplicate record_id {}", rec.record_id)));
        }
        let rel = format!("signals/{}", signal_file_name(&rec.record_id));
        write_signal(&dir.join(&rel), &rec.signal)?;
        let entry = ManifestEntry {
            record_id: rec.record_id.clone(),
            signal_path: rel,
            n_leads: rec.signal.n_leads(),
            n_samples: rec.signal.n_samples(),
            sampling_rate_hz: rec.sampling_rate_hz,
            age_years: rec.age_years,
            sex: rec.sex,
            labels: rec.labels.clone(),
            machine_report: rec.machine_report.clone(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_signal(path: &Path, signal: &Signal) -> Result<()> {
    let mut bytes = Vec::with_capacity(signal.as_slice().len() * 4);
    for v in signal.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and every signal file it references, in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<EcgRecord>> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if !seen.insert(entry.record_id.clone()) {
            return Err(Error::Validation(format!("duplicate record_id {}", entry.record_id)));
        }
        records.push(load_entry(&dir, entry)?);
    }
    Ok(records)
}

fn load_entry(dir: &Path, entry: ManifestEntry) -> Result<EcgRecord> {
    let sig_path: PathBuf = dir.join(&entry.signal_path);
    let bytes = fs::read(&sig_path).map_err(|e| Error::Load {
        record_id: entry.record_id.clone(),
        message: format!("{}: {e}", sig_path.display()),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Load {
            record_id: entry.record_id.clone(),
            message: format!("{} is not a whole number of f32 values", sig_path.display()),
        });
    }
    let expected = entry.n_leads * entry.n_samples;
    if bytes.len() / 4 != expected {
        return Err(Error::Validation(format!(
            "record {}: manifest declares {}x{} samples but {} holds {} values",
            entry.record_id,
            entry.n_leads,
            entry.n_samples,
            sig_path.display(),
            bytes.len() / 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let signal = Signal::new(entry.n_leads, entry.n_samples, data).map_err(|e| {
        Error::Validation(format!("record {}: {e}", entry.record_id))
    })?;
    let rec = EcgRecord {
        record_id: entry.record_id,
        signal,
        sampling_rate_hz: entry.sampling_rate_hz,
        age_years: entry.age_years,
        sex: entry.sex,
        labels: entry.labels,
        machine_report: entry.machine_report,
    };
    rec.validate()?;
    Ok(rec)
}

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// `record_id<TAB>description` per line. Tabs and newlines inside a
/// description are flattened to spaces.
pub fn write_descriptions<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, desc) in rows {
        writeln!(out, "{}\t{}", clean_field(id), clean_field(desc)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_descriptions(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, desc) = line.split_once('\t').ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {} has no tab separator", lineno + 1),
        })?;
        map.insert(id.to_string(), desc.to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, n_leads: usize, n_samples: usize) -> EcgRecord {
        let data = (0..n_leads * n_samples).map(|i| (i as f32).sin() * 1e-3 + 0.1).collect();
        let mut r = EcgRecord::new(id, Signal::new(n_leads, n_samples, data).unwrap(), 500);
        r.age_years = Some(54);
        r.sex = Some(Sex::Female);
        r.labels = vec!["NORM".into()];
        r
    }

    #[test]
    fn three_entries_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut recs = vec![record("b", 2, 10), record("a", 2, 10), record("c/1", 3, 7)];
        recs[1].machine_report = Some("sinus rhythm".into());
        recs[2].sex = None;
        save_manifest(&path, &recs).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, recs);
    }

    #[test]
    fn short_signal_file_is_a_validation_error_naming_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&path, &[record("rec-7", 1, 5000)]).unwrap();
        let sig = dir.path().join("signals/rec-7.f32");
        let bytes = fs::read(&sig).unwrap();
        fs::write(&sig, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("rec-7"));
    }

    #[test]
    fn missing_signal_file_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&path, &[record("gone", 1, 4)]).unwrap();
        fs::remove_file(dir.path().join("signals/gone.f32")).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Load { record_id, .. } => assert_eq!(record_id, "gone"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        assert!(save_manifest(&path, &[record("x", 1, 4), record("x", 1, 4)]).is_err());
    }

    #[test]
    fn signal_files_are_little_endian_lead_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = EcgRecord::new("le", Signal::new(2, 2, vec![1.0, 2.0, -3.5, 0.25]).unwrap(), 500);
        save_manifest(&path, &[rec]).unwrap();
        let bytes = fs::read(dir.path().join("signals/le.f32")).unwrap();
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[8..12], &(-3.5f32).to_le_bytes());
    }

    #[test]
    fn descriptions_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        write_descriptions(&path, [("a", "first\tline"), ("b", "second")]).unwrap();
        let map = read_descriptions(&path).unwrap();
        assert_eq!(map["a"], "first line");
        assert_eq!(map["b"], "second");
    }
}
