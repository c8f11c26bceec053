//! Run directory layout:
//!
//! ```text
//! manifest.json            run configuration and space hash
//! observations.jsonl       one record per evaluation, appended as they finish
//! checkpoints/iter_N.json  surrogate parameters after iteration N
//! summary.json             written when the run completes
//! ```
//!
//! A checkpoint is the commit point of an iteration: resuming keeps exactly
//! the `log_len` records it names and replays everything after it.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DriverError, ObservationRecord, ObservationSet, RunConfig, RunSummary};
use crate::bench::baselines::SubModel;
use crate::nn::container::ParamContainer;
use crate::space::SearchSpace;

pub const MANIFEST_FORMAT: &str = "condbo.run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub run: RunConfig,
    /// SHA-256 of the search space document.
    pub space_hash: String,
    pub space: String,
    pub objective: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    /// Number of log records covered by this checkpoint.
    pub log_len: usize,
    pub model: Option<ParamContainer>,
    /// Optimizer moments carried between warm-continued fits.
    #[serde(default)]
    pub optimizer: Option<ParamContainer>,
    #[serde(default)]
    pub sub_models: BTreeMap<usize, SubModel>,
}

pub struct RunDir {
    root: PathBuf,
    log: File,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DriverError + '_ {
    move |source| DriverError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<(), DriverError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn checkpoint_iter(name: &str) -> Option<usize> {
    name.strip_prefix("iter_")?.strip_suffix(".json")?.parse().ok()
}

impl RunDir {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("observations.jsonl")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn open_log(path: &Path) -> Result<File, DriverError> {
        OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))
    }

    pub fn create(root: &Path, run: &RunConfig, space: &SearchSpace, objective: &str) -> Result<Self, DriverError> {
        if root.join("manifest.json").exists() {
            return Err(DriverError::Config(format!(
                "{} already holds a run; resume it or choose another directory",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("checkpoints")).map_err(io_err(root))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            run: run.clone(),
            space_hash: space.fingerprint(),
            space: space.source_text.clone(),
            objective: objective.into(),
        };
        let log_path = root.join("observations.jsonl");
        File::create(&log_path).map_err(io_err(&log_path))?;
        let dir = RunDir {
            root: root.to_path_buf(),
            log: Self::open_log(&log_path)?,
        };
        write_atomic(&dir.manifest_path(), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(dir)
    }

    pub fn read_manifest(root: &Path) -> Result<Manifest, DriverError> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DriverError::Corrupt(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(DriverError::Corrupt(format!("{}: unknown format `{}`", path.display(), m.format)));
        }
        Ok(m)
    }

    /// Opens an existing run, refusing a space that differs from the one it was created with.
    pub fn open(root: &Path, space: &SearchSpace) -> Result<(Self, Manifest), DriverError> {
        let manifest = Self::read_manifest(root)?;
        let found = space.fingerprint();
        if manifest.space_hash != found {
            return Err(DriverError::SpaceMismatch {
                expected: manifest.space_hash,
                found,
            });
        }
        let log = Self::open_log(&root.join("observations.jsonl"))?;
        Ok((
            RunDir {
                root: root.to_path_buf(),
                log,
            },
            manifest,
        ))
    }

    pub fn rewrite_manifest(&mut self, run: &RunConfig) -> Result<(), DriverError> {
        let mut m = Self::read_manifest(&self.root)?;
        m.run = run.clone();
        write_atomic(&self.manifest_path(), &serde_json::to_string_pretty(&m).expect("manifest serializes"))
    }

    pub fn append(&mut self, record: &ObservationRecord) -> Result<(), DriverError> {
        let path = self.log_path();
        let mut line = record.to_line();
        line.push('\n');
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.flush().map_err(io_err(&path))
    }

    pub fn write_checkpoint(&mut self, ckpt: &Checkpoint, keep: usize) -> Result<(), DriverError> {
        let dir = self.checkpoint_dir();
        let path = dir.join(format!("iter_{:06}.json", ckpt.iter));
        write_atomic(&path, &serde_json::to_string(ckpt).expect("checkpoint serializes"))?;
        let mut iters = self.checkpoint_iters()?;
        iters.sort_unstable_by(|a, b| b.cmp(a));
        for old in iters.into_iter().skip(keep.max(1)) {
            let p = dir.join(format!("iter_{old:06}.json"));
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
        Ok(())
    }

    fn checkpoint_iters(&self) -> Result<Vec<usize>, DriverError> {
        let dir = self.checkpoint_dir();
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if let Some(i) = entry.file_name().to_str().and_then(checkpoint_iter) {
                out.push(i);
            }
        }
        Ok(out)
    }

    pub fn load_checkpoint(&self, iter: usize) -> Result<Checkpoint, DriverError> {
        let path = self.checkpoint_dir().join(format!("iter_{iter:06}.json"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DriverError::Corrupt(format!("{}: {e}", path.display())))
    }

    /// Restores the newest readable checkpoint and the log prefix it covers,
    /// truncating the log file to that prefix. Returns `None` (and empties
    /// the log) when no checkpoint exists yet.
    pub fn restore(&mut self, space: &SearchSpace) -> Result<Option<(Checkpoint, ObservationSet)>, DriverError> {
        let mut iters = self.checkpoint_iters()?;
        iters.sort_unstable_by(|a, b| b.cmp(a));
        let mut found = None;
        let mut last_err = None;
        for i in iters {
            match self.load_checkpoint(i) {
                Ok(c) => {
                    found = Some(c);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let path = self.log_path();
        let Some(ckpt) = found else {
            if let Some(e) = last_err {
                return Err(e);
            }
            self.truncate_log(0)?;
            return Ok(None);
        };
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let mut set = ObservationSet::new();
        let mut offset = 0;
        while set.len() < ckpt.log_len {
            let line_no = set.len() + 1;
            let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
                return Err(DriverError::Log {
                    line: line_no,
                    msg: format!("log ends before the {} records named by checkpoint {}", ckpt.log_len, ckpt.iter),
                });
            };
            let text = std::str::from_utf8(&bytes[offset..offset + end]).map_err(|e| DriverError::Log {
                line: line_no,
                msg: e.to_string(),
            })?;
            let record = ObservationRecord::from_line(text, space).map_err(|msg| DriverError::Log { line: line_no, msg })?;
            set.push(record);
            offset += end + 1;
        }
        self.truncate_log(offset as u64)?;
        Ok(Some((ckpt, set)))
    }

    fn truncate_log(&mut self, len: u64) -> Result<(), DriverError> {
        let path = self.log_path();
        let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
        f.set_len(len).map_err(io_err(&path))?;
        self.log = Self::open_log(&path)?;
        Ok(())
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<(), DriverError> {
        write_atomic(&self.summary_path(), &serde_json::to_string_pretty(summary).expect("summary serializes"))
    }
}
