use advnas_tensor::{Tape, TensorError, Var};
use rand::Rng;

use super::{edge_count, edge_index, ArchParams, CellKind, CellPlan, SupernetConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{FactorizedReduce, ReluConvBn};
use crate::nn::{apply_op, Builder, Fwd, Head, Model, OpBlock, OpKind, ParamStore, Session, Stem};

/// Input adapter for the cell two positions back.
#[derive(Debug, Clone)]
pub(crate) enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub(crate) fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, plan: &CellPlan, affine: bool) -> Result<Self> {
        Ok(if plan.reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(b, name, plan.prev_prev_channels, plan.channels, affine)?)
        } else {
            Preprocess::Conv(ReluConvBn::new(b, name, plan.prev_prev_channels, plan.channels, affine))
        })
    }

    pub(crate) fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        match self {
            Preprocess::Conv(p) => p.forward(f, x),
            Preprocess::Reduce(p) => p.forward(f, x),
        }
    }
}

/// Softmax-weighted sum of all candidate operations on one edge.
/// `weights` holds mixture weights; the seven used start at `offset`.
pub fn mixed_op(f: &mut Fwd<'_>, blocks: &[OpBlock], x: Var, weights: Var, offset: usize) -> Result<Var> {
    let mut outs = Vec::with_capacity(blocks.len());
    for b in blocks {
        outs.push(apply_op(b, f, x)?);
    }
    Ok(f.tape.weighted_sum(&outs, weights, offset)?)
}

#[derive(Debug, Clone)]
struct SuperCell {
    plan: CellPlan,
    pre0: Preprocess,
    pre1: ReluConvBn,
    /// `edges[e]` holds the seven candidate blocks of edge `e`.
    edges: Vec<Vec<OpBlock>>,
}

/// The over-parameterised network holding every candidate operation.
#[derive(Debug, Clone)]
pub struct Supernet {
    config: SupernetConfig,
    store: ParamStore,
    alpha: ArchParams,
    stem: Stem,
    cells: Vec<SuperCell>,
    head: Head,
}

impl Supernet {
    /// Builds weights and draws α from `rng`. Batch norms in cells carry no
    /// affine parameters.
    pub fn new(config: SupernetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let stem = Stem::new(&mut b, config.input_shape[0], config.init_channels, config.normalization)?;
        let nodes = config.intermediate_nodes;
        let mut cells = Vec::with_capacity(config.cells);
        for (i, plan) in config.plan().into_iter().enumerate() {
            let name = format!("cell{i}");
            let pre0 = Preprocess::new(&mut b, &format!("{name}.pre0"), &plan, false)?;
            let pre1 = ReluConvBn::new(&mut b, &format!("{name}.pre1"), plan.prev_channels, plan.channels, false);
            let mut edges = Vec::with_capacity(edge_count(nodes));
            for node in 0..nodes {
                for pred in 0..node + 2 {
                    let stride = if plan.reduction && pred < 2 { 2 } else { 1 };
                    let e = edge_index(node, pred);
                    let mut blocks = Vec::with_capacity(OpKind::COUNT);
                    for op in OpKind::ALL {
                        blocks.push(OpBlock::new(
                            &mut b,
                            &format!("{name}.e{e}.{op}"),
                            op,
                            plan.channels,
                            stride,
                            false,
                        )?);
                    }
                    edges.push(blocks);
                }
            }
            cells.push(SuperCell {
                plan,
                pre0,
                pre1,
                edges,
            });
        }
        let head = Head::new(&mut b, config.output_channels(), config.classes)?;
        let alpha = ArchParams::random(nodes, b.rng);
        Ok(Self {
            config,
            store,
            alpha,
            stem,
            cells,
            head,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn alpha(&self) -> &ArchParams {
        &self.alpha
    }

    pub fn set_alpha(&mut self, alpha: ArchParams) -> Result<()> {
        if alpha.nodes() != self.alpha.nodes() {
            return Err(Error::Invalid(format!(
                "architecture parameters for {} nodes cannot replace {}",
                alpha.nodes(),
                self.alpha.nodes()
            )));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// Cell kinds by position.
    pub fn layout(&self) -> Vec<CellKind> {
        self.cells.iter().map(|c| c.plan.kind).collect()
    }

    pub fn plans(&self) -> Vec<CellPlan> {
        self.cells.iter().map(|c| c.plan).collect()
    }

    fn cell_forward(&self, cell: &SuperCell, f: &mut Fwd<'_>, s0: Var, s1: Var, weights: Var, index: usize) -> Result<Var> {
        let wrap = |e: Error| match e {
            Error::Tensor(TensorError::Shape { op, detail }) => Error::Invalid(format!("cell {index}: {op}: {detail}")),
            Error::Invalid(m) => Error::Invalid(format!("cell {index}: {m}")),
            other => other,
        };
        let p0 = cell.pre0.forward(f, s0).map_err(wrap)?;
        let p1 = cell.pre1.forward(f, s1).map_err(wrap)?;
        let mut states = vec![p0, p1];
        let base = self.alpha.row_offset(cell.plan.kind, 0);
        for node in 0..self.config.intermediate_nodes {
            let mut acc: Option<Var> = None;
            for pred in 0..node + 2 {
                let e = edge_index(node, pred);
                let out = mixed_op(f, &cell.edges[e], states[pred], weights, base + e * OpKind::COUNT).map_err(wrap)?;
                acc = Some(match acc {
                    None => out,
                    Some(a) => f.tape.add(a, out).map_err(|e| wrap(e.into()))?,
                });
            }
            states.push(acc.expect("every node has predecessors"));
        }
        Ok(f.tape.concat(&states[2..])?)
    }
}

impl Model for Supernet {
    fn forward(&self, tape: &mut Tape, input: Var, sess: &mut Session) -> Result<Var> {
        if !self.alpha.is_finite() {
            return Err(TensorError::NonFinite("architecture parameters").into());
        }
        let a = sess.arch(tape, self.alpha.tensor());
        let weights = tape.softmax(a)?;
        let mut f = Fwd {
            tape,
            store: &self.store,
            sess,
        };
        let s = self.stem.forward(&mut f, input)?;
        let (mut s0, mut s1) = (s, s);
        for (i, cell) in self.cells.iter().enumerate() {
            let out = self.cell_forward(cell, &mut f, s0, s1, weights, i)?;
            s0 = s1;
            s1 = out;
        }
        self.head.forward(&mut f, s1)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn classes(&self) -> usize {
        self.config.classes
    }
}
