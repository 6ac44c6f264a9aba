use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{edge_index, mixture_weights, ArchParams, CellKind, SupernetConfig};
use crate::error::{Error, Result};
use crate::nn::OpKind;

pub const GENOTYPE_FORMAT_VERSION: u32 = 1;
const HEADER: &str = "advnas-genotype";
const COLUMNS: &str = "kind,node,predecessor,op";

/// How many incoming edges each node keeps after discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRetention {
    /// The two edges whose best operation has the largest weight.
    #[default]
    TopTwo,
    /// Every edge, each with its best operation.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneEdge {
    /// Node number: 0 and 1 are the cell inputs, intermediate nodes start at 2.
    pub predecessor: usize,
    pub op: OpKind,
}

/// Chosen edges of one cell kind; `nodes[i]` feeds node `i + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellGenotype {
    pub nodes: Vec<Vec<GeneEdge>>,
}

/// A discrete architecture: edges for each cell kind plus the network shape
/// it was derived for.
#[derive(Debug, Clone, PartialEq)]
pub struct Genotype {
    pub config: SupernetConfig,
    /// Indexed by [`CellKind::index`].
    pub cells: [CellGenotype; 3],
}

fn best_op(row: &[f64]) -> (usize, f64) {
    let w = mixture_weights(row);
    let mut best = 0;
    for (i, &v) in w.iter().enumerate().skip(1) {
        if v > w[best] {
            best = i;
        }
    }
    (best, w[best])
}

/// Argmax operation per edge, then the retained edges per node. Ties go to
/// the lower operation index and the lower predecessor.
pub fn discretize(alpha: &ArchParams, config: &SupernetConfig, retention: EdgeRetention) -> Result<Genotype> {
    if !alpha.is_finite() {
        return Err(Error::Invalid("cannot discretize non-finite architecture parameters".into()));
    }
    if alpha.nodes() != config.intermediate_nodes {
        return Err(Error::Invalid(format!(
            "architecture parameters have {} nodes but the config asks for {}",
            alpha.nodes(),
            config.intermediate_nodes
        )));
    }
    let cells = CellKind::ALL.map(|kind| {
        let nodes = (0..alpha.nodes())
            .map(|node| {
                let mut scored: Vec<(usize, usize, f64)> = (0..node + 2)
                    .map(|pred| {
                        let (op, w) = best_op(alpha.row(kind, edge_index(node, pred)));
                        (pred, op, w)
                    })
                    .collect();
                if retention == EdgeRetention::TopTwo {
                    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
                    scored.truncate(2);
                    scored.sort_by_key(|s| s.0);
                }
                scored
                    .into_iter()
                    .map(|(pred, op, _)| GeneEdge {
                        predecessor: pred,
                        op: OpKind::ALL[op],
                    })
                    .collect()
            })
            .collect();
        CellGenotype { nodes }
    });
    Ok(Genotype {
        config: config.clone(),
        cells,
    })
}

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        &self.cells[kind.index()]
    }

    /// Uniformly random operations and two distinct random predecessors per node.
    pub fn random(config: &SupernetConfig, rng: &mut impl Rng) -> Self {
        let cells = CellKind::ALL.map(|_| CellGenotype {
            nodes: (0..config.intermediate_nodes)
                .map(|node| {
                    let mut preds = sample(rng, node + 2, 2).into_vec();
                    preds.sort_unstable();
                    preds
                        .into_iter()
                        .map(|p| GeneEdge {
                            predecessor: p,
                            op: OpKind::ALL[rng.random_range(0..OpKind::COUNT)],
                        })
                        .collect()
                })
                .collect(),
        });
        Self {
            config: config.clone(),
            cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in CellKind::ALL {
            let cell = self.cell(kind);
            if cell.nodes.len() != self.config.intermediate_nodes {
                return Err(Error::Genotype(format!(
                    "{kind} cell has {} nodes, config has {}",
                    cell.nodes.len(),
                    self.config.intermediate_nodes
                )));
            }
            for (i, edges) in cell.nodes.iter().enumerate() {
                let node = i + 2;
                if edges.is_empty() {
                    return Err(Error::Genotype(format!("{kind} node {node} has no incoming edge")));
                }
                for (j, e) in edges.iter().enumerate() {
                    if e.predecessor >= node {
                        return Err(Error::Genotype(format!(
                            "{kind} node {node}: predecessor {} is not earlier",
                            e.predecessor
                        )));
                    }
                    if edges[..j].iter().any(|o| o.predecessor == e.predecessor) {
                        return Err(Error::Genotype(format!(
                            "{kind} node {node}: predecessor {} repeated",
                            e.predecessor
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Text form: a header line with the format version, a `config` line with
    /// the target shape as JSON, the column line, then one
    /// `kind,node,predecessor,op` row per retained edge.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} v{GENOTYPE_FORMAT_VERSION}\n");
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        let _ = writeln!(s, "config {cfg}");
        let _ = writeln!(s, "{COLUMNS}");
        for kind in CellKind::ALL {
            for (i, edges) in self.cell(kind).nodes.iter().enumerate() {
                for e in edges {
                    let _ = writeln!(s, "{kind},{},{},{}", i + 2, e.predecessor, e.op);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |n: usize, m: &str| Error::Genotype(format!("line {}: {m}", n + 1));
        let (n, header) = lines.next().ok_or_else(|| Error::Genotype("empty genotype file".into()))?;
        let version = header
            .strip_prefix(HEADER)
            .and_then(|r| r.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad(n, "missing genotype header"))?;
        if version != GENOTYPE_FORMAT_VERSION {
            return Err(bad(
                n,
                &format!("format version {version} unsupported (expected {GENOTYPE_FORMAT_VERSION})"),
            ));
        }
        let (n, cfg) = lines.next().ok_or_else(|| Error::Genotype("missing config line".into()))?;
        let cfg = cfg.strip_prefix("config ").ok_or_else(|| bad(n, "expected `config {...}`"))?;
        let config: SupernetConfig =
            serde_json::from_str(cfg).map_err(|e| bad(n, &format!("bad config: {e}")))?;
        let (n, cols) = lines.next().ok_or_else(|| Error::Genotype("missing column line".into()))?;
        if cols.trim() != COLUMNS {
            return Err(bad(n, &format!("expected column line `{COLUMNS}`")));
        }
        let mut cells: [CellGenotype; 3] = Default::default();
        for c in &mut cells {
            c.nodes = vec![Vec::new(); config.intermediate_nodes];
        }
        for (n, line) in lines {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad(n, "expected 4 comma-separated fields"));
            }
            let kind: CellKind = f[0].parse().map_err(|e: Error| bad(n, &e.to_string()))?;
            let node: usize = f[1].parse().map_err(|_| bad(n, "bad node number"))?;
            let predecessor: usize = f[2].parse().map_err(|_| bad(n, "bad predecessor"))?;
            let op: OpKind = f[3].parse().map_err(|e: Error| bad(n, &e.to_string()))?;
            if node < 2 || node >= config.intermediate_nodes + 2 {
                return Err(bad(n, &format!("node {node} out of range")));
            }
            cells[kind.index()].nodes[node - 2].push(GeneEdge { predecessor, op });
        }
        let g = Genotype { config, cells };
        g.validate()?;
        Ok(g)
    }
}
