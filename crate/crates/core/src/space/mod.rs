//! Cells, supernet placement rules, architecture parameters and genotypes.

mod config;
mod discrete;
mod genotype;
mod supernet;

use std::fmt;
use std::str::FromStr;

use advnas_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{CellPlan, Placement, SupernetConfig};
pub use discrete::DiscreteNetwork;
pub use genotype::{discretize, CellGenotype, EdgeRetention, GeneEdge, Genotype, GENOTYPE_FORMAT_VERSION};
pub use supernet::{mixed_op, Supernet};

use crate::error::{Error, Result};
use crate::nn::OpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Accurate,
    Robust,
    Reduction,
}

impl CellKind {
    /// In α order.
    pub const ALL: [CellKind; 3] = [CellKind::Accurate, CellKind::Robust, CellKind::Reduction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Accurate => "accurate",
            CellKind::Robust => "robust",
            CellKind::Reduction => "reduction",
        }
    }

    pub fn letter(self) -> char {
        match self {
            CellKind::Accurate => 'A',
            CellKind::Robust => 'R',
            CellKind::Reduction => 'D',
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown cell kind `{s}`")))
    }
}

/// Number of candidate edges in a cell with `nodes` intermediate nodes.
pub fn edge_count(nodes: usize) -> usize {
    (0..nodes).map(|i| i + 2).sum()
}

/// Index of the edge from `predecessor` into intermediate node `node`
/// (0-based among intermediate nodes). Predecessors 0 and 1 are the cell inputs.
pub fn edge_index(node: usize, predecessor: usize) -> usize {
    edge_count(node) + predecessor
}

/// Architecture parameters: one `[edges, 7]` matrix per cell kind, stored as a
/// single `[3, edges, 7]` tensor. Flattening order is kind, then edge, then op.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    nodes: usize,
    values: Tensor,
}

impl ArchParams {
    pub const INIT_STD: f64 = 1e-3;

    pub fn zeros(nodes: usize) -> Self {
        Self {
            nodes,
            values: Tensor::zeros(&[3, edge_count(nodes), OpKind::COUNT]),
        }
    }

    /// Zero-mean Gaussian initialisation with standard deviation 1e-3.
    pub fn random(nodes: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid normal");
        let mut a = Self::zeros(nodes);
        for v in a.values.data_mut() {
            *v = normal.sample(rng);
        }
        a
    }

    pub fn from_tensor(nodes: usize, values: Tensor) -> Result<Self> {
        let want = [3, edge_count(nodes), OpKind::COUNT];
        if values.shape() != want {
            return Err(Error::Invalid(format!(
                "architecture parameters for {nodes} nodes need shape {want:?}, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { nodes, values })
    }

    pub fn from_flat(nodes: usize, flat: Vec<f64>) -> Result<Self> {
        let shape = [3, edge_count(nodes), OpKind::COUNT];
        if flat.len() != shape.iter().product::<usize>() {
            return Err(Error::Invalid(format!(
                "architecture parameters for {nodes} nodes need {} values, got {}",
                shape.iter().product::<usize>(),
                flat.len()
            )));
        }
        Ok(Self {
            nodes,
            values: Tensor::new(&shape, flat)?,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> usize {
        edge_count(self.nodes)
    }

    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }

    /// Offset of a row in the flattened vector.
    pub fn row_offset(&self, kind: CellKind, edge: usize) -> usize {
        (kind.index() * self.edges() + edge) * OpKind::COUNT
    }

    pub fn row(&self, kind: CellKind, edge: usize) -> &[f64] {
        let o = self.row_offset(kind, edge);
        &self.values.data()[o..o + OpKind::COUNT]
    }

    pub fn row_mut(&mut self, kind: CellKind, edge: usize) -> &mut [f64] {
        let o = self.row_offset(kind, edge);
        &mut self.values.data_mut()[o..o + OpKind::COUNT]
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }
}

/// Numerically stable softmax of one α row.
pub fn mixture_weights(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
