//! Small bundled databases, a matching dataset, and three replayable
//! multi-turn transcripts. Used by the examples, the tests and `--demo` runs.

use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

pub const DEMO_DATASET_JSON: &str = include_str!("../data/demo_dataset.json");

const CASE_FILES: [&str; 3] = [
    include_str!("../data/cases/case1.json"),
    include_str!("../data/cases/case2.json"),
    include_str!("../data/cases/case3.json"),
];

const TOY: &str = "
CREATE TABLE t (a INTEGER);
WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM n WHERE i < 25)
INSERT INTO t SELECT i FROM n;
";

const CALIFORNIA_SCHOOLS: &str = r#"
CREATE TABLE schools (
    CDSCode TEXT PRIMARY KEY,
    School TEXT,
    County TEXT,
    Virtual TEXT
);
CREATE TABLE satscores (
    cds TEXT PRIMARY KEY,
    sname TEXT,
    NumTstTakr INTEGER,
    AvgScrMath INTEGER,
    FOREIGN KEY (cds) REFERENCES schools (CDSCode)
);
CREATE TABLE frpm (
    CDSCode TEXT PRIMARY KEY,
    "School Name" TEXT,
    "Enrollment (K-12)" REAL,
    "FRPM Count (K-12)" REAL,
    FOREIGN KEY (CDSCode) REFERENCES schools (CDSCode)
);
INSERT INTO schools VALUES
    ('01100170000001', 'Alder Online Academy', 'Alameda', 'F'),
    ('01100170000002', 'Birch Virtual High', 'Alameda', 'F'),
    ('01100170000003', 'Cedar Distance School', 'Fresno', 'F'),
    ('01100170000004', 'Dogwood eLearning', 'Kern', 'F'),
    ('01100170000005', 'Elm Home Study', 'Kern', 'F'),
    ('01100170000006', 'Fir Street High', 'Los Angeles', 'N'),
    ('01100170000007', 'Grove Unified High', 'Los Angeles', 'N'),
    ('01100170000008', 'Hazel Union High', 'San Diego', 'P');
INSERT INTO satscores VALUES
    ('01100170000001', 'Alder Online Academy', 120, 455),
    ('01100170000002', 'Birch Virtual High', 85, 512),
    ('01100170000003', 'Cedar Distance School', 64, 401),
    ('01100170000004', 'Dogwood eLearning', 210, 430),
    ('01100170000005', 'Elm Home Study', 40, 380),
    ('01100170000006', 'Fir Street High', 900, 520),
    ('01100170000007', 'Grove Unified High', 150000, 470),
    ('01100170000008', 'Hazel Union High', 67547, 390);
INSERT INTO frpm VALUES
    ('01100170000001', 'Alder Online Academy', 300, 120),
    ('01100170000002', 'Birch Virtual High', 250, 80),
    ('01100170000003', 'Cedar Distance School', 180, 95),
    ('01100170000004', 'Dogwood eLearning', 600, 410),
    ('01100170000005', 'Elm Home Study', 90, 12),
    ('01100170000006', 'Fir Street High', 2400, 1800),
    ('01100170000007', 'Grove Unified High', 12000, 9999),
    ('01100170000008', 'Hazel Union High', 11000, 9999);
"#;

const TOXICOLOGY: &str = "
CREATE TABLE molecule (
    molecule_id TEXT PRIMARY KEY,
    label TEXT
);
CREATE TABLE atom (
    atom_id TEXT PRIMARY KEY,
    molecule_id TEXT,
    element TEXT,
    FOREIGN KEY (molecule_id) REFERENCES molecule (molecule_id)
);
INSERT INTO molecule VALUES ('TR001', '+'), ('TR002', '-'), ('TR003', '-'), ('TR004', '+');
INSERT INTO atom VALUES
    ('TR001_1', 'TR001', 'c'),
    ('TR001_2', 'TR001', 'cl'),
    ('TR002_1', 'TR002', 'ca'),
    ('TR002_2', 'TR002', 'o'),
    ('TR003_1', 'TR003', 'ca'),
    ('TR003_2', 'TR003', 'h'),
    ('TR004_1', 'TR004', 'c'),
    ('TR004_2', 'TR004', 'n');
";

pub const DEMO_DATABASES: [(&str, &str); 3] =
    [("toy", TOY), ("california_schools", CALIFORNIA_SCHOOLS), ("toxicology", TOXICOLOGY)];

/// Create (or recreate) the demo databases as `<dir>/<name>.sqlite`.
pub fn write_demo_databases(dir: &Path) -> rusqlite::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| rusqlite::Error::ToSqlConversionFailure(Box::new(e)))?;
    let mut paths = Vec::new();
    for (name, ddl) in DEMO_DATABASES {
        let path = dir.join(format!("{name}.sqlite"));
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| rusqlite::Error::ToSqlConversionFailure(Box::new(e)))?;
        }
        let conn = Connection::open(&path)?;
        conn.execute_batch(ddl)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Write the demo dataset (BIRD-style JSON array) to `path`.
pub fn write_demo_dataset(path: &Path) -> std::io::Result<()> {
    std::fs::write(path, DEMO_DATASET_JSON)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseExpectation {
    /// Assistant generations.
    pub turns: usize,
    pub tool_records: usize,
    /// Tool responses whose only cell is null.
    pub null_results: usize,
}

/// A recorded multi-turn transcript with its gold query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub db_id: String,
    pub evidence: String,
    pub question: String,
    pub gold_sql: String,
    pub turns: Vec<String>,
    pub expected: CaseExpectation,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    CASE_FILES.iter().map(|s| serde_json::from_str(s).expect("bundled case parses")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn databases_build() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_demo_databases(dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let conn = Connection::open(&paths[0]).unwrap();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM t", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 25);
        // Idempotent.
        write_demo_databases(dir.path()).unwrap();
    }

    #[test]
    fn cases_load() {
        let cases = golden_cases();
        assert_eq!(cases.len(), 3);
        assert_eq!(cases[0].turns.len(), cases[0].expected.turns);
        assert_eq!(cases[2].expected.tool_records, 5);
    }
}
