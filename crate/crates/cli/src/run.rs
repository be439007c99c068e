//! Run directories: resolved config, JSONL log and output digests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use restora_core::config::RunConfig;
use restora_core::trainer::StepRecord;
use restora_core::{Error, Result};
use sha2::{Digest, Sha256};

pub struct RunDir {
    pub path: PathBuf,
    log: Option<BufWriter<File>>,
    /// Running hash over log records without their wall time.
    log_hash: Sha256,
    log_lines: u64,
    pub digests: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let cfg = path.join("config.resolved");
        std::fs::write(&cfg, config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        let mut digests = BTreeMap::new();
        digests.insert("config".to_string(), config.digest());
        Ok(RunDir { path: path.to_path_buf(), log: None, log_hash: Sha256::new(), log_lines: 0, digests })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn open_log(&mut self) -> Result<()> {
        let p = self.file("log.jsonl");
        self.log = Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?));
        Ok(())
    }

    pub fn record(&mut self, r: &StepRecord) {
        let line = serde_json::to_string(r).expect("records serialize");
        let stable = StepRecord { wall_time: 0.0, ..r.clone() };
        self.log_hash.update(serde_json::to_vec(&stable).expect("records serialize"));
        self.log_lines += 1;
        if let Some(f) = &mut self.log {
            // A failed log write surfaces at flush time in `finish`.
            let _ = writeln!(f, "{line}");
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.digests.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Flushes the log and writes `digests.json`; returns the overall
    /// digest, a hash of every other entry.
    pub fn finish(mut self) -> Result<String> {
        if let Some(mut f) = self.log.take() {
            let p = self.file("log.jsonl");
            f.flush().map_err(|e| Error::io(&p, e))?;
            self.digests.insert("log".to_string(), hex::encode(self.log_hash.clone().finalize()));
            self.digests.insert("log_lines".to_string(), self.log_lines.to_string());
        }
        let overall = sha256_hex(serde_json::to_string(&self.digests).expect("digests serialize").as_bytes());
        self.digests.insert("output".to_string(), overall.clone());
        let json = serde_json::to_string_pretty(&self.digests).expect("digests serialize");
        let p = self.file("digests.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        Ok(overall)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}
