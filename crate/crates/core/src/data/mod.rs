//! Mixed-type, multi-group datasets: schema, rows, sequential schedules,
//! stratified folds and simulation.

mod folds;
mod io;
mod schedule;
mod simulate;

pub use folds::split_folds;
pub use io::{load_dataset, read_dataset, write_dataset};
pub use schedule::{interleave_groups, SequentialSchedule};
pub use simulate::{reference_theta, simulate_dataset, simulate_with_schema, REFERENCE_COUNTS};

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub name: String,
    pub kind: ItemKind,
}

/// Outcome items in canonical order (continuous first) and treatment groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeSchema {
    items: Vec<Item>,
    group_labels: Vec<String>,
}

impl OutcomeSchema {
    pub fn new(items: Vec<Item>, group_labels: Vec<String>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Schema("at least one item is required".into()));
        }
        if group_labels.is_empty() {
            return Err(Error::Schema("at least one group is required".into()));
        }
        if let Some(pos) = items
            .windows(2)
            .position(|w| w[0].kind == ItemKind::Binary && w[1].kind == ItemKind::Continuous)
        {
            return Err(Error::Schema(format!(
                "continuous item `{}` listed after a binary item",
                items[pos + 1].name
            )));
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.name.as_str()) {
                return Err(Error::Schema(format!("duplicate item name `{}`", it.name)));
            }
        }
        let mut seen = HashSet::new();
        for g in &group_labels {
            if !seen.insert(g.as_str()) {
                return Err(Error::Schema(format!("duplicate group label `{g}`")));
            }
        }
        Ok(OutcomeSchema { items, group_labels })
    }

    /// Two continuous efficacy outcomes, four binary adverse events and the
    /// three arms of the reference diabetes study.
    pub fn diabetes_reference() -> Self {
        let cont = ["haemoglobin", "glucose"];
        let bin = ["diarrhoea", "nausea", "vomiting", "dyspepsia"];
        let items = cont
            .iter()
            .map(|n| Item {
                name: n.to_string(),
                kind: ItemKind::Continuous,
            })
            .chain(bin.iter().map(|n| Item {
                name: n.to_string(),
                kind: ItemKind::Binary,
            }))
            .collect();
        let groups = ["AVM", "MET", "RSG"].iter().map(|s| s.to_string()).collect();
        OutcomeSchema::new(items, groups).expect("reference schema is valid")
    }

    /// Schema with the given shape: the reference schema when the shape
    /// matches it, otherwise items `c1.., b1..` and groups `g1..`.
    pub fn for_shape(p_c: usize, p_b: usize, n_groups: usize) -> Result<Self> {
        let reference = Self::diabetes_reference();
        if reference.n_continuous() == p_c && reference.n_binary() == p_b && reference.n_groups() == n_groups {
            return Ok(reference);
        }
        let items = (1..=p_c)
            .map(|j| Item {
                name: format!("c{j}"),
                kind: ItemKind::Continuous,
            })
            .chain((1..=p_b).map(|j| Item {
                name: format!("b{j}"),
                kind: ItemKind::Binary,
            }))
            .collect();
        Self::new(items, (1..=n_groups).map(|g| format!("g{g}")).collect())
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_continuous(&self) -> usize {
        self.items
            .iter()
            .filter(|i| i.kind == ItemKind::Continuous)
            .count()
    }

    pub fn n_binary(&self) -> usize {
        self.n_items() - self.n_continuous()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.group_labels.iter().position(|g| g == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub subject_id: String,
    pub group: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: OutcomeSchema,
    rows: Vec<Row>,
}

impl Dataset {
    pub fn new(schema: OutcomeSchema, rows: Vec<Row>) -> Result<Self> {
        let p = schema.n_items();
        for (i, row) in rows.iter().enumerate() {
            if row.group >= schema.n_groups() {
                return Err(Error::UnknownGroup {
                    row: i + 1,
                    label: row.group.to_string(),
                });
            }
            if row.y.len() != p {
                return Err(Error::InvalidValue {
                    row: i + 1,
                    column: "<row>".into(),
                    message: format!("expected {p} values, found {}", row.y.len()),
                });
            }
            for (item, &v) in schema.items().iter().zip(&row.y) {
                match item.kind {
                    ItemKind::Continuous if !v.is_finite() => {
                        return Err(Error::InvalidValue {
                            row: i + 1,
                            column: item.name.clone(),
                            message: format!("non-finite value {v}"),
                        })
                    }
                    ItemKind::Binary if v != 0.0 && v != 1.0 => {
                        return Err(Error::InvalidValue {
                            row: i + 1,
                            column: item.name.clone(),
                            message: format!("binary value must be 0 or 1, found {v}"),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Dataset { schema, rows })
    }

    pub fn schema(&self) -> &OutcomeSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.schema.n_groups()];
        for r in &self.rows {
            c[r.group] += 1;
        }
        c
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn continuous<'a>(&self, row: &'a Row) -> &'a [f64] {
        &row.y[..self.schema.n_continuous()]
    }

    pub fn binary<'a>(&self, row: &'a Row) -> &'a [f64] {
        &row.y[self.schema.n_continuous()..]
    }

    /// Pooled within-group sample covariance of the continuous items
    /// (divisor `n - R`). Falls back to the identity when too few rows.
    pub fn pooled_continuous_covariance(&self) -> DMatrix<f64> {
        let pc = self.schema.n_continuous();
        let r = self.schema.n_groups();
        let mut means = vec![vec![0.0; pc]; r];
        let counts = self.group_counts();
        for row in &self.rows {
            for j in 0..pc {
                means[row.group][j] += row.y[j];
            }
        }
        for (g, m) in means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= counts[g].max(1) as f64;
            }
        }
        let dof = self.n() as f64 - counts.iter().filter(|&&c| c > 0).count() as f64;
        if dof < pc as f64 + 1.0 {
            return DMatrix::identity(pc, pc);
        }
        let mut s = DMatrix::zeros(pc, pc);
        for row in &self.rows {
            let m = &means[row.group];
            for a in 0..pc {
                for b in 0..pc {
                    s[(a, b)] += (row.y[a] - m[a]) * (row.y[b] - m[b]);
                }
            }
        }
        s / dof
    }
}
