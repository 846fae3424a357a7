//! Shared fixtures for the integration suites: a disposable workspace with
//! the fraud-score bundle, a registry, and materialized corpus candidates,
//! plus a runner for the `pdd` binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdd::corpus::{self, CandidateMode};

pub fn pdd_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pdd"))
}

pub fn candidate_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pdd-candidate"))
}

/// A throwaway toolchain workspace.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub bundle_dir: PathBuf,
    pub registry_dir: PathBuf,
    pub candidates_dir: PathBuf,
}

impl Workspace {
    pub fn new() -> Workspace {
        let dir = tempfile::tempdir().expect("tempdir");
        let bundle_dir = dir.path().join("fraud-score.protocol");
        corpus::write_fraud_score_bundle(&bundle_dir).expect("bundle fixture");
        let registry_dir = dir.path().join("registry");
        let candidates_dir = dir.path().join("candidates");
        std::fs::create_dir_all(&candidates_dir).expect("candidates dir");
        Workspace {
            dir,
            bundle_dir,
            registry_dir,
            candidates_dir,
        }
    }

    /// Materialize a candidate shim + manifest; returns the manifest path.
    pub fn candidate(&self, mode: CandidateMode, artifact_id: &str) -> PathBuf {
        corpus::write_candidate(&self.candidates_dir, &candidate_bin(), mode, artifact_id)
            .expect("candidate fixture")
    }

    /// Run `pdd` with this workspace's registry.
    pub fn pdd(&self, args: &[&str]) -> Output {
        Command::new(pdd_bin())
            .args(args)
            .env("PDD_REGISTRY", &self.registry_dir)
            .output()
            .expect("pdd runs")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.bundle_dir.join("evidence/runtime-ledger.jsonl")
    }
}

pub fn stdout_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Parse the single canonical document a `--output json` command emits.
pub fn json_doc(output: &Output) -> serde_json::Value {
    let text = stdout_str(output);
    assert_eq!(
        text.lines().count(),
        1,
        "expected exactly one document on stdout, got: {text:?}"
    );
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("bad json output: {e}: {text}"))
}

pub fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

/// Write a serializable value as a canonical JSON file; returns the path.
pub fn write_json(path: &Path, value: &impl serde::Serialize) -> PathBuf {
    let doc = serde_json::to_value(value).expect("serializes");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).expect("mkdir");
    }
    std::fs::write(path, pdd::canon::canonical_line(&doc)).expect("write");
    path.to_path_buf()
}
