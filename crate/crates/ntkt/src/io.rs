//! Line-delimited JSON and CSV record files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ntkt_core::data::{Dataset, Exercise, Interaction};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const EXERCISES_FILE: &str = "exercises.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Format { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialise");
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Exercise row in CSV form; list fields are `|`-separated.
#[derive(Debug, Serialize, Deserialize)]
struct ExerciseRow {
    exercise_id: String,
    question_text: String,
    options: String,
    #[serde(default)]
    concepts: String,
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for record in reader.deserialize() {
        out.push(record.map_err(|e: csv::Error| {
            // Header is line 1, so the first record sits on line 2.
            let line = e.position().map_or(0, |p| p.line() as usize);
            CliError::Format { path: path.to_path_buf(), line, message: e.to_string() }
        })?);
    }
    Ok(out)
}

fn split_list(s: &str) -> Vec<String> {
    if s.is_empty() {
        return Vec::new();
    }
    s.split('|').map(str::to_string).collect()
}

/// Loads `dataset.{jsonl,csv}` and `exercises.{jsonl,csv}` from `dir`.
pub fn ingest_dataset(dir: &Path, format: Format) -> Result<Dataset> {
    let (interactions, exercises) = match format {
        Format::Jsonl => (
            read_jsonl::<Interaction>(&dir.join(DATASET_FILE))?,
            read_jsonl::<Exercise>(&dir.join(EXERCISES_FILE))?,
        ),
        Format::Csv => {
            let interactions = read_csv::<Interaction>(&dir.join("dataset.csv"))?;
            let exercises = read_csv::<ExerciseRow>(&dir.join("exercises.csv"))?
                .into_iter()
                .map(|r| Exercise {
                    exercise_id: r.exercise_id,
                    question_text: r.question_text,
                    options: split_list(&r.options),
                    concepts: split_list(&r.concepts),
                })
                .collect();
            (interactions, exercises)
        }
    };
    Ok(Dataset::new(exercises, interactions)?)
}

/// Writes the canonical jsonl pair: exercises in id order, interactions in `(learner, timestep)` order.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    write_jsonl(&dir.join(EXERCISES_FILE), dataset.exercises().values())?;
    write_jsonl(&dir.join(DATASET_FILE), dataset.interactions())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_lists_split_on_pipes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("exercises.csv"),
            "exercise_id,question_text,options,concepts\nq1,\"Add 2, 3\",5|6|7,add|sum\nq2,x,a|b,\n",
        )
        .unwrap();
        fs::write(dir.path().join("dataset.csv"), "learner_id,timestep,exercise_id,outcome\nl1,4,q1,true\nl1,9,q2,false\n")
            .unwrap();
        let ds = ingest_dataset(dir.path(), Format::Csv).unwrap();
        let q1 = ds.exercise("q1").unwrap();
        assert_eq!(q1.options, ["5", "6", "7"]);
        assert_eq!(q1.concepts, ["add", "sum"]);
        assert!(ds.exercise("q2").unwrap().concepts.is_empty());
        // Sparse timesteps are re-ranked.
        let ts: Vec<u32> = ds.learners()[0].interactions.iter().map(|i| i.timestep).collect();
        assert_eq!(ts, [1, 2]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"a\":1}\n\n{\"a\":\n").unwrap();
        #[derive(Deserialize)]
        #[allow(dead_code)]
        struct A {
            a: u32,
        }
        match read_jsonl::<A>(&p) {
            Err(CliError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{:?}", other.map(|v| v.len())),
        }
    }
}
