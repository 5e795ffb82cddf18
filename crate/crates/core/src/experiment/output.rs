use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Bumped whenever any CSV layout changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROGRESS_FILE: &str = "progress.json";

/// CSV text whose first line is `# schema: <name> v<version>`.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(schema: &str, columns: &[&str]) -> Self {
        Csv {
            text: format!(
                "# schema: {schema} v{CSV_SCHEMA_VERSION}\n{}\n",
                columns.join(",")
            ),
            columns: columns.len(),
        }
    }

    pub fn row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: Display,
    {
        let fields: Vec<String> = fields.into_iter().map(|f| f.to_string()).collect();
        debug_assert_eq!(fields.len(), self.columns);
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

/// Data rows of a file written by [`Csv`], keyed by column name.
pub fn read_csv(bytes: &[u8]) -> Result<Vec<BTreeMap<String, String>>> {
    let text =
        std::str::from_utf8(bytes).map_err(|e| Error::Data(format!("csv is not utf-8: {e}")))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Data("csv has no header".into()))?
        .split(',')
        .collect();
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(Error::Data(format!(
                    "csv row `{line}` has {} fields",
                    fields.len()
                )));
            }
            Ok(header
                .iter()
                .zip(fields)
                .map(|(h, f)| (h.to_string(), f.to_string()))
                .collect())
        })
        .collect()
}

/// Parses a field written with `Display`, which round-trips floats exactly.
pub fn field<T: std::str::FromStr>(row: &BTreeMap<String, String>, name: &str) -> Result<T> {
    row.get(name)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("csv field `{name}` missing or malformed")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
    /// Outputs were taken from an earlier, interrupted run.
    #[serde(default)]
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub cell: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub csv_schema: u32,
    pub started_utc: String,
    pub finished_utc: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    pub stages: Vec<Stage>,
    pub files: Vec<FileRecord>,
    /// Cells or members that diverged and were skipped.
    pub divergences: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Completed cells of a run in progress, persisted after every cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    config: Option<ExperimentConfig>,
    cells: BTreeMap<String, Vec<FileRecord>>,
}

/// An output directory `<out>/<experiment>/<timestamp>/` plus the record of
/// everything written into it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, FileRecord>,
    progress: Progress,
    started: String,
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunDir {
    pub fn create(config: &ExperimentConfig) -> Result<Self> {
        let parent = config.out.join(config.experiment.name());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut root = parent.join(&stamp);
        let mut n = 1;
        while root.exists() {
            root = parent.join(format!("{stamp}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let dir = RunDir {
            root,
            files: BTreeMap::new(),
            progress: Progress {
                config: Some(config.clone()),
                cells: BTreeMap::new(),
            },
            started: now_utc(),
        };
        dir.save_progress()?;
        Ok(dir)
    }

    /// Reopens an interrupted run. The stored config must equal `config`.
    pub fn resume(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        let path = root.join(PROGRESS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let progress: Progress = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if progress.config.as_ref() != Some(config) {
            return Err(Error::Config(format!(
                "{} was started with a different configuration",
                root.display()
            )));
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            progress,
            started: now_utc(),
        })
    }

    #[cfg(test)]
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.files.insert(
            rel.to_string(),
            FileRecord {
                path: rel.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    /// Contents of a finished cell's files, if every one is still on disk
    /// with its recorded hash. The files count as written by this run.
    pub fn cached(&mut self, cell: &str) -> Option<BTreeMap<String, Vec<u8>>> {
        let records = self.progress.cells.get(cell)?.clone();
        let mut out = BTreeMap::new();
        for r in &records {
            let bytes = std::fs::read(self.root.join(&r.path)).ok()?;
            if sha256_hex(&bytes) != r.sha256 {
                return None;
            }
            out.insert(r.path.clone(), bytes);
        }
        for r in records {
            self.files.insert(r.path.clone(), r);
        }
        Some(out)
    }

    /// Marks `cell` finished with the given (already written) files.
    pub fn complete(&mut self, cell: &str, files: &[String]) -> Result<()> {
        let records = files
            .iter()
            .map(|f| {
                self.files
                    .get(f)
                    .cloned()
                    .ok_or(Error::State("cell file was never written"))
            })
            .collect::<Result<_>>()?;
        self.progress.cells.insert(cell.to_string(), records);
        self.save_progress()
    }

    fn save_progress(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.progress).expect("progress serializes");
        write_atomic(&self.root.join(PROGRESS_FILE), &json)
    }

    /// Writes the manifest atomically and drops the progress file.
    pub fn finish(
        self,
        config: &ExperimentConfig,
        seeds: Vec<SeedRecord>,
        stages: Vec<Stage>,
        divergences: Vec<String>,
    ) -> Result<(PathBuf, RunManifest)> {
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema: CSV_SCHEMA_VERSION,
            started_utc: self.started,
            finished_utc: now_utc(),
            config: config.clone(),
            seeds,
            stages,
            files: self.files.into_values().collect(),
            divergences,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.root.join(MANIFEST_FILE), &json)?;
        let progress = self.root.join(PROGRESS_FILE);
        std::fs::remove_file(&progress).map_err(|e| Error::io(&progress, e))?;
        Ok((self.root, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_floats_exact() {
        let mut c = Csv::new("demo", &["a", "b"]);
        let x = 0.1 + 0.2;
        c.row([x.to_string(), "z".into()]);
        let bytes = c.into_bytes();
        assert!(bytes.starts_with(b"# schema: demo v1\na,b\n"));
        let rows = read_csv(&bytes).unwrap();
        assert_eq!(field::<f64>(&rows[0], "a").unwrap(), x);
        assert!(field::<f64>(&rows[0], "b").is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn cached_cells_need_matching_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::for_kind(super::super::ExperimentKind::SyntheticSweep);
        cfg.out = tmp.path().to_path_buf();
        let mut dir = RunDir::create(&cfg).unwrap();
        dir.write("a.csv", b"1").unwrap();
        dir.write("b.csv", b"2").unwrap();
        dir.complete("cell-a", &["a.csv".into()]).unwrap();
        dir.complete("cell-b", &["b.csv".into()]).unwrap();
        let root = dir.root().to_path_buf();
        std::fs::write(root.join("b.csv"), b"tampered").unwrap();

        let mut again = RunDir::resume(&root, &cfg).unwrap();
        assert_eq!(again.cached("cell-a").unwrap()["a.csv"], b"1");
        assert!(again.cached("cell-b").is_none());
        assert!(again.cached("cell-c").is_none());

        let mut other = cfg.clone();
        other.seed = 99;
        assert!(RunDir::resume(&root, &other).is_err());

        let (_, m) = again.finish(&cfg, vec![], vec![], vec![]).unwrap();
        assert_eq!(m.files.len(), 1);
        assert!(root.join(MANIFEST_FILE).is_file());
        assert!(!root.join(PROGRESS_FILE).exists());
    }
}
