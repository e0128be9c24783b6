//! Line-delimited scenario files: a header record followed by one scenario
//! per line.

use super::scenario::ScenarioRecord;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
}

pub fn save_scenarios(path: &Path, scenarios: &[ScenarioRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&Header { schema_version: SCENARIO_SCHEMA_VERSION })
        .expect("header serializes");
    writeln!(w, "{header}")?;
    for s in scenarios {
        let line = serde_json::to_string(s)
            .map_err(|e| CoreError::Contract(format!("scenario serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CoreError::Parse { line: 1, msg: "empty scenario file".into() })?;
    let header: Header = serde_json::from_str(&header?)
        .map_err(|e| CoreError::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.schema_version != SCENARIO_SCHEMA_VERSION {
        return Err(CoreError::Parse {
            line: 1,
            msg: format!("unsupported schema_version {}", header.schema_version),
        });
    }
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScenarioRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::scenario::{generate_scenario, ScenarioConfig, ScenarioFamily};

    #[test]
    fn round_trip_all_families_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (i, family) in [
            ScenarioFamily::StraightRoad,
            ScenarioFamily::Intersection,
            ScenarioFamily::DenseTraffic,
        ]
        .iter()
        .enumerate()
        {
            let s = generate_scenario(20 + i as u64, &ScenarioConfig::new(*family, 2)).unwrap();
            let p1 = dir.path().join(format!("a{i}.jsonl"));
            let p2 = dir.path().join(format!("b{i}.jsonl"));
            save_scenarios(&p1, &[s]).unwrap();
            let loaded = load_scenarios(&p1).unwrap();
            save_scenarios(&p2, &loaded).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"schema_version\":1}\nnot json\n").unwrap();
        match load_scenarios(&p) {
            Err(crate::error::CoreError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
