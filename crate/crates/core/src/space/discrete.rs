use advnas_tensor::{Tape, Var};
use rand::Rng;

use super::supernet::Preprocess;
use super::{CellPlan, Genotype, SupernetConfig};
use crate::error::{Error, Result};
use crate::nn::layers::ReluConvBn;
use crate::nn::{apply_op, Builder, Fwd, Head, Model, OpBlock, ParamStore, Session, Stem};

#[derive(Debug, Clone)]
struct DiscreteCell {
    plan: CellPlan,
    pre0: Preprocess,
    pre1: ReluConvBn,
    /// `nodes[i]` holds `(predecessor, block)` pairs feeding node `i + 2`.
    nodes: Vec<Vec<(usize, OpBlock)>>,
}

/// A network built from a genotype, keeping only the chosen edges.
#[derive(Debug, Clone)]
pub struct DiscreteNetwork {
    config: SupernetConfig,
    genotype: Genotype,
    store: ParamStore,
    stem: Stem,
    cells: Vec<DiscreteCell>,
    head: Head,
}

impl DiscreteNetwork {
    /// Stacks the genotype's cells according to `config`, which may differ
    /// from the search-time config in depth, width and input shape.
    pub fn new(genotype: &Genotype, config: SupernetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        genotype.validate()?;
        if genotype.config.intermediate_nodes != config.intermediate_nodes {
            return Err(Error::Genotype(format!(
                "genotype has {} intermediate nodes, config expects {}",
                genotype.config.intermediate_nodes, config.intermediate_nodes
            )));
        }
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let stem = Stem::new(&mut b, config.input_shape[0], config.init_channels, config.normalization)?;
        let mut cells = Vec::with_capacity(config.cells);
        for (i, plan) in config.plan().into_iter().enumerate() {
            let name = format!("cell{i}");
            let pre0 = Preprocess::new(&mut b, &format!("{name}.pre0"), &plan, true)?;
            let pre1 = ReluConvBn::new(&mut b, &format!("{name}.pre1"), plan.prev_channels, plan.channels, true);
            let mut nodes = Vec::new();
            for (n, edges) in genotype.cell(plan.kind).nodes.iter().enumerate() {
                let mut blocks = Vec::with_capacity(edges.len());
                for e in edges {
                    let stride = if plan.reduction && e.predecessor < 2 { 2 } else { 1 };
                    let block = OpBlock::new(
                        &mut b,
                        &format!("{name}.n{}.p{}.{}", n + 2, e.predecessor, e.op),
                        e.op,
                        plan.channels,
                        stride,
                        true,
                    )?;
                    blocks.push((e.predecessor, block));
                }
                nodes.push(blocks);
            }
            cells.push(DiscreteCell {
                plan,
                pre0,
                pre1,
                nodes,
            });
        }
        let head = Head::new(&mut b, config.output_channels(), config.classes)?;
        Ok(Self {
            config,
            genotype: genotype.clone(),
            store,
            stem,
            cells,
            head,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.weight_count()
    }

    pub fn plans(&self) -> Vec<CellPlan> {
        self.cells.iter().map(|c| c.plan).collect()
    }
}

impl Model for DiscreteNetwork {
    fn forward(&self, tape: &mut Tape, input: Var, sess: &mut Session) -> Result<Var> {
        let mut f = Fwd {
            tape,
            store: &self.store,
            sess,
        };
        let s = self.stem.forward(&mut f, input)?;
        let (mut s0, mut s1) = (s, s);
        for (i, cell) in self.cells.iter().enumerate() {
            let wrap = |e: Error| Error::Invalid(format!("cell {i}: {e}"));
            let p0 = cell.pre0.forward(&mut f, s0).map_err(wrap)?;
            let p1 = cell.pre1.forward(&mut f, s1).map_err(wrap)?;
            let mut states = vec![p0, p1];
            for edges in &cell.nodes {
                let mut acc: Option<Var> = None;
                for (pred, block) in edges {
                    let out = apply_op(block, &mut f, states[*pred]).map_err(wrap)?;
                    acc = Some(match acc {
                        None => out,
                        Some(a) => f.tape.add(a, out)?,
                    });
                }
                states.push(acc.expect("validated genotype"));
            }
            let out = f.tape.concat(&states[2..])?;
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
