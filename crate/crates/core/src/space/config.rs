use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CellKind;
use crate::error::{Error, Result};
use crate::nn::Normalization;

/// Kinds of the normal cells in each of the three stretches delimited by the
/// reduction cells, written like `A-A-R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Placement(pub [CellKind; 3]);

impl Placement {
    /// Accurate cells before the second reduction, robust cells after it.
    pub const ACCURATE_ROBUST: Placement =
        Placement([CellKind::Accurate, CellKind::Accurate, CellKind::Robust]);
    /// One normal-cell kind everywhere, as in conventional cell search spaces.
    pub const ALL_ACCURATE: Placement =
        Placement([CellKind::Accurate, CellKind::Accurate, CellKind::Accurate]);
}

impl Default for Placement {
    fn default() -> Self {
        Self::ACCURATE_ROBUST
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0.map(CellKind::letter);
        write!(f, "{a}-{b}-{c}")
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let bad = || Error::Config(format!("placement `{s}` must look like A-A-R (A = accurate, R = robust)"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut kinds = [CellKind::Accurate; 3];
        for (k, p) in kinds.iter_mut().zip(parts) {
            *k = match p.trim() {
                "A" | "a" => CellKind::Accurate,
                "R" | "r" => CellKind::Robust,
                _ => return Err(bad()),
            };
        }
        Ok(Placement(kinds))
    }
}

impl TryFrom<String> for Placement {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Placement> for String {
    fn from(p: Placement) -> String {
        p.to_string()
    }
}

fn default_multipliers() -> [usize; 3] {
    [1, 2, 2]
}

fn default_nodes() -> usize {
    4
}

/// Shape of a cell-stacked network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    /// Total cell count L, reductions included.
    pub cells: usize,
    /// Channels C0 of the stem and the first stretch of cells.
    pub init_channels: usize,
    /// Per-node channel multiple of C0 in each stretch.
    #[serde(default = "default_multipliers")]
    pub channel_multipliers: [usize; 3],
    /// Defaults to `[L/3, 2L/3]` (floored).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "default_nodes")]
    pub intermediate_nodes: usize,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

/// Layout of one cell position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellPlan {
    pub kind: CellKind,
    /// Channels per intermediate node.
    pub channels: usize,
    pub reduction: bool,
    pub reduction_prev: bool,
    pub prev_prev_channels: usize,
    pub prev_channels: usize,
}

impl SupernetConfig {
    /// The 8-cell, 24-channel search network on 32×32 ten-class images.
    pub fn search_scale() -> Self {
        Self {
            cells: 8,
            init_channels: 24,
            channel_multipliers: default_multipliers(),
            reduction_positions: None,
            placement: Placement::default(),
            intermediate_nodes: default_nodes(),
            input_shape: [3, 32, 32],
            classes: 10,
            normalization: None,
        }
    }

    /// The 20-cell, 64-channel evaluation network.
    pub fn evaluation_scale() -> Self {
        Self {
            cells: 20,
            init_channels: 64,
            ..Self::search_scale()
        }
    }

    /// Four cells, eight channels, 16×16 two-class inputs.
    pub fn desk_scale() -> Self {
        Self {
            cells: 4,
            init_channels: 8,
            input_shape: [3, 16, 16],
            classes: 2,
            ..Self::search_scale()
        }
    }

    pub fn reductions(&self) -> Vec<usize> {
        match &self.reduction_positions {
            Some(p) => p.clone(),
            None => vec![self.cells / 3, 2 * self.cells / 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.cells == 0 {
            return err("cells must be positive".into());
        }
        if self.init_channels == 0 {
            return err("init_channels must be positive".into());
        }
        if self.intermediate_nodes == 0 {
            return err("intermediate_nodes must be positive".into());
        }
        if self.classes < 2 {
            return err(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.channel_multipliers.contains(&0) {
            return err("channel multipliers must be positive".into());
        }
        let red = self.reductions();
        if red.is_empty() || red.len() > 2 {
            return err(format!("need one or two reduction positions, got {red:?}"));
        }
        if red.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("reduction positions must be strictly increasing, got {red:?}"));
        }
        if red.iter().any(|&p| p == 0 || p >= self.cells) {
            return err(format!(
                "reduction positions {red:?} must lie strictly inside (0, {})",
                self.cells
            ));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return err(format!("input shape {:?} has an empty extent", self.input_shape));
        }
        let div = 1 << red.len();
        if h % div != 0 || w % div != 0 {
            return err(format!(
                "input extent {h}x{w} must be divisible by {div} for {} reductions",
                red.len()
            ));
        }
        for m in self.channel_multipliers {
            if (self.init_channels * m) % 2 != 0 {
                return err(format!(
                    "per-node channels {} must be even for factorized reduction",
                    self.init_channels * m
                ));
            }
        }
        if let Some(n) = &self.normalization {
            if c != 3 {
                return err("normalization needs 3-channel input".into());
            }
            if n.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || n.mean.iter().any(|m| !m.is_finite()) {
                return err("normalization std must be positive and finite".into());
            }
        }
        Ok(())
    }

    /// Per-position layout. Assumes a validated config.
    pub fn plan(&self) -> Vec<CellPlan> {
        let red = self.reductions();
        let mut out = Vec::with_capacity(self.cells);
        let (mut pp, mut p) = (self.init_channels, self.init_channels);
        let mut reduction_prev = false;
        for i in 0..self.cells {
            let reduction = red.contains(&i);
            let stretch = red.iter().filter(|&&r| r <= i).count();
            let channels = self.init_channels * self.channel_multipliers[stretch];
            let kind = if reduction {
                CellKind::Reduction
            } else {
                self.placement.0[stretch]
            };
            out.push(CellPlan {
                kind,
                channels,
                reduction,
                reduction_prev,
                prev_prev_channels: pp,
                prev_channels: p,
            });
            pp = p;
            p = self.intermediate_nodes * channels;
            reduction_prev = reduction;
        }
        out
    }

    /// Channels reaching the classifier head.
    pub fn output_channels(&self) -> usize {
        self.plan()
            .last()
            .map(|c| c.channels * self.intermediate_nodes)
            .unwrap_or(self.init_channels)
    }
}
