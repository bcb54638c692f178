//! Multi-property datasets with missing labels.
//!
//! Data file: JSON Lines, one `{"smiles": "...", "labels": [0 | 1 | null, ...]}`
//! per molecule. Tasks file: `{"properties": [...], "train_properties": [...],
//! "test_properties": [...]}`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::MolGraph;
use super::smiles::parse_smiles;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Missing,
}

impl Label {
    pub fn from_json(v: Option<u8>) -> Option<Self> {
        match v {
            Some(1) => Some(Self::Positive),
            Some(0) => Some(Self::Negative),
            None => Some(Self::Missing),
            Some(_) => None,
        }
    }

    pub fn to_json(self) -> Option<u8> {
        match self {
            Self::Positive => Some(1),
            Self::Negative => Some(0),
            Self::Missing => None,
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Self::Positive => Some(true),
            Self::Negative => Some(false),
            Self::Missing => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub smiles: String,
    pub graph: MolGraph,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub properties: Vec<String>,
    pub train_properties: Vec<usize>,
    pub test_properties: Vec<usize>,
}

impl TaskSplit {
    pub fn validate(&self) -> Result<()> {
        let n = self.properties.len();
        for &p in self.train_properties.iter().chain(&self.test_properties) {
            if p >= n {
                return Err(Error::IndexOutOfRange {
                    what: "property list".into(),
                    index: p,
                    size: n,
                });
            }
        }
        let train: BTreeSet<_> = self.train_properties.iter().collect();
        if let Some(p) = self.test_properties.iter().find(|p| train.contains(p)) {
            return Err(Error::SplitOverlap(*p));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub split: TaskSplit,
    /// `labels[molecule][property]`.
    labels: Vec<Vec<Label>>,
}

#[derive(Deserialize)]
struct RecordIn {
    smiles: String,
    labels: Vec<Option<u8>>,
}

#[derive(Deserialize)]
struct SmilesOnly {
    smiles: String,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    smiles: &'a str,
    labels: Vec<Option<u8>>,
}

impl Dataset {
    pub fn new(molecules: Vec<Molecule>, labels: Vec<Vec<Label>>, split: TaskSplit) -> Result<Self> {
        split.validate()?;
        if labels.len() != molecules.len() {
            return Err(Error::Config(format!(
                "{} label rows for {} molecules",
                labels.len(),
                molecules.len()
            )));
        }
        let p = split.properties.len();
        if let Some(row) = labels.iter().position(|r| r.len() != p) {
            return Err(Error::Config(format!(
                "label row {row} has {} entries, expected {p}",
                labels[row].len()
            )));
        }
        Ok(Self {
            molecules,
            split,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn num_properties(&self) -> usize {
        self.split.properties.len()
    }

    pub fn train_properties(&self) -> &[usize] {
        &self.split.train_properties
    }

    pub fn test_properties(&self) -> &[usize] {
        &self.split.test_properties
    }

    pub fn property_name(&self, p: usize) -> &str {
        &self.split.properties[p]
    }

    pub fn label(&self, molecule: usize, property: usize) -> Label {
        self.labels[molecule][property]
    }

    pub fn set_label(&mut self, molecule: usize, property: usize, label: Label) {
        self.labels[molecule][property] = label;
    }

    /// Molecule indices with a positive and with a negative label for `property`.
    pub fn labeled(&self, property: usize) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (m, row) in self.labels.iter().enumerate() {
            match row[property] {
                Label::Positive => pos.push(m),
                Label::Negative => neg.push(m),
                Label::Missing => {}
            }
        }
        (pos, neg)
    }

    pub fn graphs(&self) -> impl Iterator<Item = &MolGraph> {
        self.molecules.iter().map(|m| &m.graph)
    }

    pub fn write(&self, data_path: &Path, tasks_path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (m, row) in self.molecules.iter().zip(&self.labels) {
            let rec = RecordOut {
                smiles: &m.smiles,
                labels: row.iter().map(|l| l.to_json()).collect(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json(data_path, e))?;
            out.push(b'\n');
        }
        fs::write(data_path, out).map_err(|e| Error::io(data_path, e))?;
        let mut f = fs::File::create(tasks_path).map_err(|e| Error::io(tasks_path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.split).map_err(|e| Error::json(tasks_path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(tasks_path, e))
    }
}

/// Load a dataset; returns it with the number of records skipped because
/// their SMILES could not be parsed.
pub fn load_dataset(data_path: &Path, tasks_path: &Path) -> Result<(Dataset, usize)> {
    let tasks_text = fs::read_to_string(tasks_path).map_err(|e| Error::io(tasks_path, e))?;
    let split: TaskSplit = serde_json::from_str(&tasks_text).map_err(|e| Error::json(tasks_path, e))?;
    split.validate()?;
    let p = split.properties.len();

    let text = fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
    let mut molecules = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Record {
            path: data_path.to_path_buf(),
            line: line_no,
            reason,
        };
        let rec: RecordIn = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if rec.labels.len() != p {
            return Err(malformed(format!("{} labels, expected {p}", rec.labels.len())));
        }
        let row = rec
            .labels
            .iter()
            .map(|&v| Label::from_json(v))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| malformed("labels must be 0, 1 or null".into()))?;
        match parse_smiles(&rec.smiles) {
            Ok(graph) => {
                molecules.push(Molecule {
                    smiles: rec.smiles,
                    graph,
                });
                labels.push(row);
            }
            Err(e) => {
                log::warn!("{}:{line_no}: skipping `{}`: {e}", data_path.display(), rec.smiles);
                skipped += 1;
            }
        }
    }
    Ok((Dataset::new(molecules, labels, split)?, skipped))
}

/// Read only the SMILES column of a data file, skipping unparseable entries.
/// Returns the molecules and the skip count.
pub fn load_molecules(data_path: &Path) -> Result<(Vec<Molecule>, usize)> {
    let text = fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
    let mut molecules = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SmilesOnly = serde_json::from_str(line).map_err(|e| Error::Record {
            path: data_path.to_path_buf(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        match parse_smiles(&rec.smiles) {
            Ok(graph) => molecules.push(Molecule {
                smiles: rec.smiles,
                graph,
            }),
            Err(e) => {
                log::warn!("{}:{}: skipping `{}`: {e}", data_path.display(), lineno + 1, rec.smiles);
                skipped += 1;
            }
        }
    }
    Ok((molecules, skipped))
}
