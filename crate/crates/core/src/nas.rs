//! Cell-based NAS data model: candidate operations, the cell supernet, sampled
//! cells and the macro-architecture that stacks them.
//!
//! Node naming follows the usual two-input cell convention. `a` is the output of
//! the cell two steps back, `b` the output of the previous cell, and `n0..n{B-1}`
//! are the intermediate nodes. Every intermediate node sums exactly two inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A candidate operation attached to a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    Skip,
    SepConv {
        kernel: u32,
    },
    /// `dilation` is the number of spaces inserted between kernel taps.
    DilSepConv {
        kernel: u32,
        dilation: u32,
    },
    AvgPool {
        kernel: u32,
    },
    MaxPool {
        kernel: u32,
    },
    NormalConv {
        kernel: u32,
    },
    FullyConnected,
}

impl OperationKind {
    pub const SKIP: Self = OperationKind::Skip;
    pub const SEP_3: Self = OperationKind::SepConv { kernel: 3 };
    pub const SEP_5: Self = OperationKind::SepConv { kernel: 5 };
    pub const DIL_3: Self = OperationKind::DilSepConv {
        kernel: 3,
        dilation: 1,
    };
    pub const DIL_5: Self = OperationKind::DilSepConv {
        kernel: 5,
        dilation: 1,
    };
    pub const AVG_3: Self = OperationKind::AvgPool { kernel: 3 };
    pub const MAX_3: Self = OperationKind::MaxPool { kernel: 3 };

    /// The seven-member candidate set used by the default search space.
    pub fn default_candidates() -> Vec<OperationKind> {
        vec![
            Self::SKIP,
            Self::SEP_3,
            Self::SEP_5,
            Self::DIL_3,
            Self::DIL_5,
            Self::AVG_3,
            Self::MAX_3,
        ]
    }

    pub fn kernel(&self) -> Option<u32> {
        match *self {
            OperationKind::SepConv { kernel }
            | OperationKind::DilSepConv { kernel, .. }
            | OperationKind::AvgPool { kernel }
            | OperationKind::MaxPool { kernel }
            | OperationKind::NormalConv { kernel } => Some(kernel),
            OperationKind::Skip | OperationKind::FullyConnected => None,
        }
    }

    pub fn is_pool(&self) -> bool {
        matches!(
            self,
            OperationKind::AvgPool { .. } | OperationKind::MaxPool { .. }
        )
    }

    /// Whether the operation issues any GEMM calls.
    pub fn uses_gemm(&self) -> bool {
        !matches!(
            self,
            OperationKind::Skip | OperationKind::AvgPool { .. } | OperationKind::MaxPool { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidOperation(msg));
        match *self {
            OperationKind::SepConv { kernel } | OperationKind::NormalConv { kernel } => {
                if ![1, 3, 5].contains(&kernel) {
                    return bad(format!("convolution kernel {kernel} not in {{1,3,5}}"));
                }
            }
            OperationKind::DilSepConv { kernel, dilation } => {
                if ![1, 3, 5].contains(&kernel) {
                    return bad(format!("convolution kernel {kernel} not in {{1,3,5}}"));
                }
                if dilation == 0 {
                    return bad("dilated convolution needs dilation > 0".into());
                }
            }
            OperationKind::AvgPool { kernel } | OperationKind::MaxPool { kernel } => {
                if kernel != 3 {
                    return bad(format!("pooling kernel {kernel} must be 3"));
                }
            }
            OperationKind::Skip | OperationKind::FullyConnected => {}
        }
        Ok(())
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            OperationKind::Skip => write!(f, "skip"),
            OperationKind::SepConv { kernel } => write!(f, "sep_conv_{kernel}x{kernel}"),
            OperationKind::DilSepConv {
                kernel,
                dilation: 1,
            } => {
                write!(f, "dil_conv_{kernel}x{kernel}")
            }
            OperationKind::DilSepConv { kernel, dilation } => {
                write!(f, "dil_conv_{kernel}x{kernel}_d{dilation}")
            }
            OperationKind::AvgPool { kernel } => write!(f, "avg_pool_{kernel}x{kernel}"),
            OperationKind::MaxPool { kernel } => write!(f, "max_pool_{kernel}x{kernel}"),
            OperationKind::NormalConv { kernel } => write!(f, "conv_{kernel}x{kernel}"),
            OperationKind::FullyConnected => write!(f, "fc"),
        }
    }
}

fn parse_square(s: &str) -> Option<u32> {
    let (a, b) = s.split_once('x')?;
    let a: u32 = a.parse().ok()?;
    let b: u32 = b.parse().ok()?;
    (a == b).then_some(a)
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::InvalidOperation(format!("unknown operation `{s}`"));
        let op = match s {
            "skip" => OperationKind::Skip,
            "fc" => OperationKind::FullyConnected,
            _ => {
                if let Some(rest) = s.strip_prefix("sep_conv_") {
                    OperationKind::SepConv {
                        kernel: parse_square(rest).ok_or_else(unknown)?,
                    }
                } else if let Some(rest) = s.strip_prefix("dil_conv_") {
                    let (size, dilation) = match rest.split_once("_d") {
                        Some((size, d)) => (size, d.parse().map_err(|_| unknown())?),
                        None => (rest, 1),
                    };
                    OperationKind::DilSepConv {
                        kernel: parse_square(size).ok_or_else(unknown)?,
                        dilation,
                    }
                } else if let Some(rest) = s.strip_prefix("avg_pool_") {
                    OperationKind::AvgPool {
                        kernel: parse_square(rest).ok_or_else(unknown)?,
                    }
                } else if let Some(rest) = s.strip_prefix("max_pool_") {
                    OperationKind::MaxPool {
                        kernel: parse_square(rest).ok_or_else(unknown)?,
                    }
                } else if let Some(rest) = s.strip_prefix("conv_") {
                    OperationKind::NormalConv {
                        kernel: parse_square(rest).ok_or_else(unknown)?,
                    }
                } else {
                    return Err(unknown());
                }
            }
        };
        op.validate()?;
        Ok(op)
    }
}

impl Serialize for OperationKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OperationKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A node of the cell DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    InputA,
    InputB,
    Inner(usize),
}

impl Node {
    /// Position in the total node order `a < b < n0 < n1 < ...`.
    pub fn index(&self) -> usize {
        match *self {
            Node::InputA => 0,
            Node::InputB => 1,
            Node::Inner(j) => j + 2,
        }
    }

    pub fn is_input(&self) -> bool {
        !matches!(self, Node::Inner(_))
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Node::InputA => write!(f, "a"),
            Node::InputB => write!(f, "b"),
            Node::Inner(j) => write!(f, "n{j}"),
        }
    }
}

impl FromStr for Node {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Node::InputA),
            "b" => Ok(Node::InputB),
            _ => s
                .strip_prefix('n')
                .and_then(|j| j.parse().ok())
                .map(Node::Inner)
                .ok_or_else(|| Error::InvalidCell(format!("unknown node `{s}`"))),
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A directed supernet edge into intermediate node `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: Node,
    pub dst: usize,
}

impl Edge {
    pub fn new(src: Node, dst: usize) -> Self {
        Edge { src, dst }
    }

    /// Tie-breaking key for execution order: target first, then source.
    pub fn order_key(&self) -> (usize, usize) {
        (self.dst, self.src.index())
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->n{}", self.src, self.dst)
    }
}

/// The fully connected cell DAG together with its candidate operations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSupernet {
    pub nodes: usize,
    pub ops: Vec<OperationKind>,
}

impl CellSupernet {
    pub fn new(num_nodes: usize, ops: Vec<OperationKind>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidSupernet(
                "a cell needs at least one node".into(),
            ));
        }
        if ops.is_empty() {
            return Err(Error::InvalidSupernet(
                "candidate operation set is empty".into(),
            ));
        }
        for op in &ops {
            op.validate()?;
        }
        let mut dedup = ops.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != ops.len() {
            return Err(Error::InvalidSupernet(
                "duplicate candidate operations".into(),
            ));
        }
        Ok(CellSupernet {
            nodes: num_nodes,
            ops,
        })
    }

    /// Four intermediate nodes with the seven default candidates.
    pub fn standard() -> Self {
        Self::new(4, OperationKind::default_candidates()).expect("default supernet is valid")
    }

    /// Node count including the two inputs.
    pub fn total_nodes(&self) -> usize {
        self.nodes + 2
    }

    /// Number of incoming-edge slots a sampled cell fills (two per node).
    pub fn slot_count(&self) -> usize {
        2 * self.nodes
    }

    pub fn sources(&self, dst: usize) -> Vec<Node> {
        let mut out = vec![Node::InputA, Node::InputB];
        out.extend((0..dst.min(self.nodes)).map(Node::Inner));
        out
    }

    pub fn admits(&self, edge: &Edge) -> bool {
        edge.dst < self.nodes
            && match edge.src {
                Node::Inner(i) => i < edge.dst,
                _ => true,
            }
    }

    /// Every admissible edge, ordered by target then source.
    pub fn edges(&self) -> Vec<Edge> {
        (0..self.nodes)
            .flat_map(|dst| {
                self.sources(dst)
                    .into_iter()
                    .map(move |src| Edge::new(src, dst))
            })
            .collect()
    }

    pub fn has_op(&self, op: &OperationKind) -> bool {
        self.ops.contains(op)
    }

    /// Number of edges on the longest source-to-sink path.
    pub fn longest_path(&self) -> usize {
        // depth[j] = longest path ending at n_j
        let mut depth = vec![0usize; self.nodes];
        for dst in 0..self.nodes {
            depth[dst] = self
                .sources(dst)
                .iter()
                .map(|s| match s {
                    Node::Inner(i) => depth[*i] + 1,
                    _ => 1,
                })
                .max()
                .unwrap_or(1);
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn stride(&self) -> u32 {
        match self {
            CellKind::Normal => 1,
            CellKind::Reduction => 2,
        }
    }
}

/// An edge of a sampled cell with its operation. Serialized as `[src, dst, op]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChosenEdge {
    pub edge: Edge,
    pub op: OperationKind,
}

impl ChosenEdge {
    pub fn new(src: Node, dst: usize, op: OperationKind) -> Self {
        ChosenEdge {
            edge: Edge::new(src, dst),
            op,
        }
    }
}

impl Serialize for ChosenEdge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.edge.src, format!("n{}", self.edge.dst), self.op).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChosenEdge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (src, dst, op) = <(Node, Node, OperationKind)>::deserialize(d)?;
        match dst {
            Node::Inner(dst) => Ok(ChosenEdge::new(src, dst, op)),
            other => Err(serde::de::Error::custom(format!(
                "edge target `{other}` is an input"
            ))),
        }
    }
}

/// One step of a cell's execution: a chosen edge (by index into `edges`) or an
/// operation whose output nobody consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExecStep {
    Edge(usize),
    Dead { dead: OperationKind },
}

fn is_unit(x: &f64) -> bool {
    *x == 1.0
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    pub edges: Vec<ChosenEdge>,
    #[serde(rename = "order")]
    pub exec_order: Vec<ExecStep>,
    /// Compute-time multiplier; weight pruning makes the GEMMs cheaper.
    #[serde(default = "unit", skip_serializing_if = "is_unit")]
    pub duration_scale: f64,
}

impl Cell {
    /// Builds a cell with the canonical execution order (target, then source).
    pub fn new(kind: CellKind, edges: Vec<ChosenEdge>) -> Self {
        let mut idx: Vec<usize> = (0..edges.len()).collect();
        idx.sort_by_key(|&i| edges[i].edge.order_key());
        Cell {
            kind,
            edges,
            exec_order: idx.into_iter().map(ExecStep::Edge).collect(),
            duration_scale: 1.0,
        }
    }

    /// Operations in execution order, dead operations included.
    pub fn ordered_ops(&self) -> Vec<OperationKind> {
        self.exec_order
            .iter()
            .map(|step| match *step {
                ExecStep::Edge(i) => self.edges[i].op,
                ExecStep::Dead { dead } => dead,
            })
            .collect()
    }

    pub fn find(&self, edge: &Edge) -> Option<&ChosenEdge> {
        self.edges.iter().find(|e| e.edge == *edge)
    }

    /// True when every edge step runs after all edges producing its source.
    pub fn is_topological(&self) -> bool {
        let mut done = vec![false; self.edges.len()];
        for step in &self.exec_order {
            if let ExecStep::Edge(i) = *step {
                let Some(e) = self.edges.get(i) else {
                    return false;
                };
                if let Node::Inner(u) = e.edge.src {
                    let ready = self
                        .edges
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.edge.dst == u)
                        .all(|(j, _)| done[j]);
                    if !ready {
                        return false;
                    }
                }
                done[i] = true;
            }
        }
        true
    }

    /// Checks the cell is a complete sample of `supernet`.
    pub fn validate(&self, supernet: &CellSupernet) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCell(m));
        let mut incoming: BTreeMap<usize, Vec<Node>> = BTreeMap::new();
        for ce in &self.edges {
            if !supernet.admits(&ce.edge) {
                return bad(format!("edge {} not admissible", ce.edge));
            }
            if !supernet.has_op(&ce.op) {
                return bad(format!("operation {} not in candidate set", ce.op));
            }
            incoming.entry(ce.edge.dst).or_default().push(ce.edge.src);
        }
        for dst in 0..supernet.nodes {
            let srcs = incoming.get(&dst).map(Vec::as_slice).unwrap_or(&[]);
            if srcs.len() != 2 {
                return bad(format!("node n{dst} has {} inputs, expected 2", srcs.len()));
            }
            if srcs[0] == srcs[1] {
                return bad(format!("node n{dst} sums the same input twice"));
            }
        }
        let mut seen = vec![false; self.edges.len()];
        for step in &self.exec_order {
            if let ExecStep::Edge(i) = *step {
                if i >= self.edges.len() || seen[i] {
                    return bad(format!("execution order references edge {i} incorrectly"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("execution order misses an edge".into());
        }
        if !self.is_topological() {
            return bad("execution order violates data dependencies".into());
        }
        Ok(())
    }
}

/// Macro-level stacking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroParams {
    pub blocks: usize,
    pub cells_per_block: usize,
    pub initial_channels: u32,
    pub input_width: u32,
    pub input_height: u32,
    pub input_channels: u32,
    /// Number of normal convolutions ahead of the first cell.
    pub preprocessing: usize,
    pub classes: u32,
    pub batch: u32,
}

impl Default for MacroParams {
    fn default() -> Self {
        MacroParams {
            blocks: 3,
            cells_per_block: 6,
            initial_channels: 33,
            input_width: 32,
            input_height: 32,
            input_channels: 3,
            preprocessing: 3,
            classes: 10,
            batch: 1,
        }
    }
}

impl MacroParams {
    pub fn cell_count(&self) -> usize {
        self.blocks * self.cells_per_block + self.blocks.saturating_sub(1)
    }

    /// The nominal sequence of cell kinds.
    pub fn layout(&self) -> Vec<CellKind> {
        let mut out = Vec::with_capacity(self.cell_count());
        for b in 0..self.blocks {
            out.extend(std::iter::repeat_n(CellKind::Normal, self.cells_per_block));
            if b + 1 < self.blocks {
                out.push(CellKind::Reduction);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub nodes: usize,
    pub ops: Vec<OperationKind>,
    pub cells: Vec<Cell>,
    #[serde(rename = "macro")]
    pub macro_params: MacroParams,
}

impl Architecture {
    pub fn supernet(&self) -> Result<CellSupernet> {
        CellSupernet::new(self.nodes, self.ops.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Repeats `normal` in blocks joined by `reduction`.
pub fn stack_architecture(
    supernet: &CellSupernet,
    normal: &Cell,
    reduction: &Cell,
    macro_params: MacroParams,
) -> Result<Architecture> {
    if normal.kind != CellKind::Normal {
        return Err(Error::InvalidArchitecture(
            "first cell must be a normal cell".into(),
        ));
    }
    if reduction.kind != CellKind::Reduction {
        return Err(Error::InvalidArchitecture(
            "second cell must be a reduction cell".into(),
        ));
    }
    if macro_params.blocks == 0 || macro_params.cells_per_block == 0 {
        return Err(Error::InvalidArchitecture(
            "need at least one block of one cell".into(),
        ));
    }
    if macro_params.initial_channels == 0
        || macro_params.input_width == 0
        || macro_params.input_height == 0
    {
        return Err(Error::InvalidArchitecture(
            "input dimensions must be positive".into(),
        ));
    }
    let cells = macro_params
        .layout()
        .into_iter()
        .map(|k| match k {
            CellKind::Normal => normal.clone(),
            CellKind::Reduction => reduction.clone(),
        })
        .collect();
    Ok(Architecture {
        nodes: supernet.nodes,
        ops: supernet.ops.clone(),
        cells,
        macro_params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
}

impl TensorShape {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        TensorShape {
            width,
            height,
            channels,
        }
    }

    /// Spatial positions, i.e. im2col rows at stride 1 with size-preserving padding.
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn reduced(&self) -> Self {
        TensorShape {
            width: self.width.div_ceil(2),
            height: self.height.div_ceil(2),
            channels: self.channels * 2,
        }
    }
}

/// Input shape seen by every cell of `arch`, in cell order.
pub fn propagate_shapes(arch: &Architecture) -> Result<Vec<TensorShape>> {
    let m = &arch.macro_params;
    let mut shape = TensorShape::new(m.input_width, m.input_height, m.initial_channels);
    if shape.width == 0 || shape.height == 0 || shape.channels == 0 {
        return Err(Error::InvalidShape("input shape must be positive".into()));
    }
    let mut out = Vec::with_capacity(arch.cells.len());
    for (i, cell) in arch.cells.iter().enumerate() {
        out.push(shape);
        if cell.kind == CellKind::Reduction {
            if shape.width < 2 || shape.height < 2 {
                return Err(Error::ShapeUnderflow {
                    cell: i,
                    width: shape.width,
                    height: shape.height,
                });
            }
            shape = shape.reduced();
        }
    }
    Ok(out)
}
