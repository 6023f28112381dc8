//! Line-delimited JSON dataset files, one scenario per line.
//!
//! Floats are decimal text with round-trip precision, angles radians. Parse
//! failures report the 1-based line number and, via serde, the field path.

use super::{Scenario, ScenarioError};
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string(s).expect("scenario serialization cannot fail")
}

pub fn parse_scenario(line: &str, line_no: usize) -> Result<Scenario, ScenarioError> {
    let s: Scenario =
        serde_json::from_str(line).map_err(|source| ScenarioError::Json { line: line_no, source })?;
    s.validate().map_err(|msg| ScenarioError::Invalid { line: line_no, msg })?;
    Ok(s)
}

pub fn write_jsonl(path: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    let mut f = fs::File::create(path)?;
    for s in scenarios {
        writeln!(f, "{}", scenario_to_json(s))?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_scenario(line, i + 1)?);
    }
    Ok(out)
}
