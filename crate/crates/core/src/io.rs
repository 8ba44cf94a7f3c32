//! Panel CSV files: one row per visit, `subject_id,z,censoring_time,visit_time,y`.
//!
//! Floats are written in shortest round-trip form, so writing a panel and
//! reading it back reproduces it exactly.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{build_panel_with, DomainError, GapCovariates, PanelDataset, Subject};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: z must be 0 or 1, got {value}")]
    BadTreatment { line: u64, value: f64 },
    #[error("subject {subject}: rows disagree on {field}")]
    Inconsistent { subject: u32, field: &'static str },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    subject_id: u32,
    z: f64,
    censoring_time: f64,
    visit_time: f64,
    y: f64,
}

pub fn write_panel_csv<W: Write>(panel: &PanelDataset, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for s in &panel.subjects {
        for (t, y) in s.visit_times.iter().zip(&s.outcomes) {
            w.serialize(PanelRow {
                subject_id: s.id,
                z: s.z(),
                censoring_time: s.censoring_time,
                visit_time: *t,
                y: *y,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a panel; subjects keep the order of their first row.
pub fn read_panel_csv<R: Read>(input: R) -> Result<PanelDataset, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut subjects: Vec<Subject> = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: PanelRow = record?;
        let line = i as u64 + 2;
        let treated = match row.z {
            1.0 => true,
            0.0 => false,
            value => return Err(IoError::BadTreatment { line, value }),
        };
        let slot = *index.entry(row.subject_id).or_insert_with(|| {
            subjects.push(Subject {
                id: row.subject_id,
                treated,
                censoring_time: row.censoring_time,
                visit_times: Vec::new(),
                outcomes: Vec::new(),
                latent: None,
            });
            subjects.len() - 1
        });
        let s = &mut subjects[slot];
        if s.treated != treated {
            return Err(IoError::Inconsistent {
                subject: s.id,
                field: "z",
            });
        }
        if s.censoring_time != row.censoring_time {
            return Err(IoError::Inconsistent {
                subject: s.id,
                field: "censoring_time",
            });
        }
        s.visit_times.push(row.visit_time);
        s.outcomes.push(row.y);
    }
    Ok(build_panel_with(subjects, "", GapCovariates::Treatment)?)
}
