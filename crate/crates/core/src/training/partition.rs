//! Maps `(predicted, true)` label pairs to error types, plus the JSON
//! configuration format for it.
//!
//! ```json
//! {
//!   "num_classes": 3,
//!   "rules": [
//!     { "cells": "diagonal", "type": 0 },
//!     { "cells": "off-diagonal", "type": 1 },
//!     { "cells": [[0, 2]], "type": 2 }
//!   ],
//!   "losses": [0.0, 1.0, 5.0]
//! }
//! ```
//!
//! Rules apply in order, later ones overriding earlier ones. Cells are
//! `[predicted, true]`. `"fully_refined": true` instead gives every cell its
//! own type `predicted * num_classes + true`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::LossVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPartition {
    num_classes: usize,
    /// `table[pred * C + truth]`
    table: Vec<usize>,
    losses: LossVector,
}

impl ErrorPartition {
    pub fn from_table(num_classes: usize, table: Vec<usize>, losses: LossVector) -> Result<Self> {
        if num_classes < 1 {
            return Err(Error::InvalidPartition("need at least one class".into()));
        }
        if table.len() != num_classes * num_classes {
            return Err(Error::InvalidPartition(format!(
                "table has {} cells, expected {}",
                table.len(),
                num_classes * num_classes
            )));
        }
        let types = losses.dim();
        if let Some(bad) = table.iter().find(|&&j| j >= types) {
            return Err(Error::InvalidPartition(format!(
                "type {bad} has no loss (only {types} losses)"
            )));
        }
        if let Some(unused) = (0..types).find(|j| !table.contains(j)) {
            return Err(Error::InvalidPartition(format!(
                "error type {unused} contains no cell"
            )));
        }
        Ok(Self {
            num_classes,
            table,
            losses,
        })
    }

    /// One type per `(predicted, true)` cell.
    pub fn fully_refined(num_classes: usize, losses: LossVector) -> Result<Self> {
        Self::from_table(
            num_classes,
            (0..num_classes * num_classes).collect(),
            losses,
        )
    }

    /// Type 0 on the diagonal, type 1 elsewhere.
    pub fn correct_incorrect(num_classes: usize, losses: LossVector) -> Result<Self> {
        let table = (0..num_classes * num_classes)
            .map(|cell| usize::from(cell / num_classes != cell % num_classes))
            .collect();
        Self::from_table(num_classes, table, losses)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_types(&self) -> usize {
        self.losses.dim()
    }

    pub fn losses(&self) -> &LossVector {
        &self.losses
    }

    pub fn type_of(&self, predicted: usize, truth: usize) -> usize {
        self.table[predicted * self.num_classes + truth]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<PartitionConfig>(text)?.build()
    }

    pub fn from_json_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellSelector {
    Named(String),
    Explicit(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRule {
    pub cells: CellSelector,
    #[serde(rename = "type")]
    pub error_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_classes: usize,
    #[serde(default)]
    pub fully_refined: bool,
    #[serde(default)]
    pub rules: Vec<PartitionRule>,
    pub losses: Vec<f64>,
}

impl PartitionConfig {
    pub fn build(&self) -> Result<ErrorPartition> {
        let c = self.num_classes;
        let losses = LossVector::new(self.losses.clone())?;
        if self.fully_refined {
            if !self.rules.is_empty() {
                return Err(Error::InvalidPartition(
                    "use either fully_refined or rules, not both".into(),
                ));
            }
            return ErrorPartition::fully_refined(c, losses);
        }
        let mut table: Vec<Option<usize>> = vec![None; c * c];
        for rule in &self.rules {
            match &rule.cells {
                CellSelector::Named(name) => {
                    let keep: fn(usize, usize) -> bool = match name.as_str() {
                        "diagonal" => |p, t| p == t,
                        "off-diagonal" => |p, t| p != t,
                        "all" => |_, _| true,
                        other => {
                            return Err(Error::InvalidPartition(format!(
                                "unknown cell class '{other}'"
                            )))
                        }
                    };
                    for p in 0..c {
                        for t in 0..c {
                            if keep(p, t) {
                                table[p * c + t] = Some(rule.error_type);
                            }
                        }
                    }
                }
                CellSelector::Explicit(cells) => {
                    for &[p, t] in cells {
                        if p >= c || t >= c {
                            return Err(Error::InvalidPartition(format!(
                                "cell [{p}, {t}] out of range"
                            )));
                        }
                        table[p * c + t] = Some(rule.error_type);
                    }
                }
            }
        }
        let table = table
            .into_iter()
            .enumerate()
            .map(|(cell, j)| {
                j.ok_or_else(|| {
                    Error::InvalidPartition(format!(
                        "cell [{}, {}] is not assigned a type",
                        cell / c,
                        cell % c
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ErrorPartition::from_table(c, table, losses)
    }
}
