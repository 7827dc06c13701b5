//! Append-only run manifest (`manifest.ndjson` in the output directory).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

pub const MANIFEST: &str = "manifest.ndjson";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Start { command: String, config_hash: String, code_version: String, timestamp: u64, workers: usize },
    Job { command: String, config_hash: String, key: String, status: JobStatus, timestamp: u64 },
    Output { command: String, config_hash: String, file: String, timestamp: u64 },
    Finish { command: String, config_hash: String, status: String, new_jobs: usize, timestamp: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Done,
    Failed,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writer bound to one command invocation.
pub struct RunManifest {
    path: PathBuf,
    command: String,
    config_hash: String,
}

impl RunManifest {
    pub fn open(dir: &Path, command: &str, config_hash: &str) -> Self {
        RunManifest { path: dir.join(MANIFEST), command: command.into(), config_hash: config_hash.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn events(&self) -> Result<Vec<Event>> {
        io::read_ndjson(&self.path)
    }

    fn append(&self, e: Event) -> Result<()> {
        io::append_ndjson(&self.path, &[e])
    }

    pub fn start(&self, workers: usize) -> Result<()> {
        self.append(Event::Start {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            code_version: CODE_VERSION.into(),
            timestamp: now(),
            workers,
        })
    }

    pub fn job(&self, key: &str, status: JobStatus) -> Result<()> {
        self.append(Event::Job {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            key: key.into(),
            status,
            timestamp: now(),
        })
    }

    /// Records a file relative to the output directory.
    pub fn output(&self, file: &str) -> Result<()> {
        self.append(Event::Output {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            file: file.into(),
            timestamp: now(),
        })
    }

    pub fn finish(&self, status: &str, new_jobs: usize) -> Result<()> {
        self.append(Event::Finish {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            status: status.into(),
            new_jobs,
            timestamp: now(),
        })
    }

    /// Keys recorded as done for this command and config.
    pub fn completed(&self) -> Result<BTreeSet<String>> {
        Ok(self
            .events()?
            .into_iter()
            .filter_map(|e| match e {
                Event::Job { command, config_hash, key, status: JobStatus::Done, .. }
                    if command == self.command && config_hash == self.config_hash =>
                {
                    Some(key)
                }
                _ => None,
            })
            .collect())
    }

    /// Every file recorded for this config.
    pub fn outputs(&self) -> Result<BTreeSet<String>> {
        Ok(self
            .events()?
            .into_iter()
            .filter_map(|e| match e {
                Event::Output { config_hash, file, .. } if config_hash == self.config_hash => Some(file),
                _ => None,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completed_jobs_are_scoped_to_command_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunManifest::open(dir.path(), "tmm", "abc");
        a.start(1).unwrap();
        a.job("k1", JobStatus::Done).unwrap();
        a.job("k2", JobStatus::Failed).unwrap();
        RunManifest::open(dir.path(), "tmm", "other").job("k3", JobStatus::Done).unwrap();
        a.output("scan.ndjson").unwrap();
        assert_eq!(a.completed().unwrap().into_iter().collect::<Vec<_>>(), ["k1"]);
        assert!(a.outputs().unwrap().contains("scan.ndjson"));
        assert_eq!(a.events().unwrap().len(), 5);
    }
}
