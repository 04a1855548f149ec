#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tempfile::TempDir;
use tir_sql::bench::{parse_dataset, TaskSample};
use tir_sql::demo::{write_demo_databases, DEMO_DATASET_JSON};
use tir_sql::sandbox::{Sandbox, SandboxConfig};

/// Demo databases in a fresh temporary directory.
pub struct Demo {
    pub dir: TempDir,
}

impl Demo {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        write_demo_databases(dir.path()).expect("demo databases");
        Demo { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn sandbox(&self) -> Sandbox {
        Sandbox::new(SandboxConfig::new(self.root())).expect("sandbox")
    }

    pub fn sandbox_with(&self, f: impl FnOnce(SandboxConfig) -> SandboxConfig) -> Sandbox {
        Sandbox::new(f(SandboxConfig::new(self.root()))).expect("sandbox")
    }

    pub fn dataset_file(&self) -> PathBuf {
        let path = self.root().join("dataset.json");
        std::fs::write(&path, DEMO_DATASET_JSON).expect("write dataset");
        path
    }
}

pub fn demo_samples() -> Vec<TaskSample> {
    parse_dataset(DEMO_DATASET_JSON).expect("demo dataset parses")
}

pub fn snapshot_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name)
}
