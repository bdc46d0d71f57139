//! Stamp paths and marking/verification key generation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::{CellKind, CellSupernet, Edge, MacroParams, Node, OperationKind};

/// A fixed path of edge/operation pairs inside one cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stamp {
    pub edges: Vec<Edge>,
    pub ops: Vec<OperationKind>,
}

impl Stamp {
    pub fn new(edges: Vec<Edge>, ops: Vec<OperationKind>) -> Result<Self> {
        if edges.len() != ops.len() {
            return Err(Error::InvalidKey(format!(
                "stamp has {} edges but {} operations",
                edges.len(),
                ops.len()
            )));
        }
        Ok(Stamp { edges, ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Index of the first edge whose source is not the previous edge's target.
    pub fn break_index(&self) -> Option<usize> {
        self.edges
            .windows(2)
            .position(|w| w[1].src != Node::Inner(w[0].dst))
            .map(|i| i + 1)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Edge, &OperationKind)> {
        self.edges.iter().zip(self.ops.iter())
    }
}

/// How many cells of each kind a key covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: usize,
    pub cells_per_block: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            blocks: 3,
            cells_per_block: 6,
        }
    }
}

impl Layout {
    pub fn kinds(&self) -> Vec<CellKind> {
        MacroParams {
            blocks: self.blocks,
            cells_per_block: self.cells_per_block,
            ..MacroParams::default()
        }
        .layout()
    }

    pub fn from_macro(m: &MacroParams) -> Self {
        Layout {
            blocks: m.blocks,
            cells_per_block: m.cells_per_block,
        }
    }
}

/// Supernet plus macro layout: everything key generation needs to know.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub supernet: CellSupernet,
    pub layout: Layout,
}

impl SearchSpace {
    pub fn standard() -> Self {
        SearchSpace {
            supernet: CellSupernet::standard(),
            layout: Layout::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyMode {
    /// One stamp per cell kind, replicated over every cell of that kind.
    #[default]
    PerType,
    /// A freshly sampled stamp for every cell.
    PerCell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkingKey {
    pub n_s: usize,
    pub normal: Stamp,
    pub reduction: Stamp,
    pub layout: Layout,
    /// Per-cell stamps; overrides `normal`/`reduction` when non-empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<Stamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSequence {
    pub ops: Vec<OperationKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationKey {
    pub n_s: usize,
    pub normal: OpSequence,
    pub reduction: OpSequence,
    pub layout: Layout,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<OpSequence>,
}

impl MarkingKey {
    pub fn per_type(n_s: usize, normal: Stamp, reduction: Stamp, layout: Layout) -> Self {
        MarkingKey {
            n_s,
            normal,
            reduction,
            layout,
            cells: Vec::new(),
        }
    }

    /// Stamp for every cell of the nominal layout, in order.
    pub fn cell_stamps(&self) -> Vec<(CellKind, &Stamp)> {
        let kinds = self.layout.kinds();
        if self.cells.is_empty() {
            kinds
                .into_iter()
                .map(|k| match k {
                    CellKind::Normal => (k, &self.normal),
                    CellKind::Reduction => (k, &self.reduction),
                })
                .collect()
        } else {
            kinds.into_iter().zip(self.cells.iter()).collect()
        }
    }

    pub fn stamp_for(&self, kind: CellKind) -> &Stamp {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    /// Projects away the edges.
    pub fn verification_key(&self) -> VerificationKey {
        let ops = |s: &Stamp| OpSequence { ops: s.ops.clone() };
        VerificationKey {
            n_s: self.n_s,
            normal: ops(&self.normal),
            reduction: ops(&self.reduction),
            layout: self.layout,
            cells: self.cells.iter().map(ops).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl VerificationKey {
    /// Expected operation sequence for every cell, in order.
    pub fn expanded(&self) -> Vec<&[OperationKind]> {
        let kinds = self.layout.kinds();
        if self.cells.is_empty() {
            kinds
                .into_iter()
                .map(|k| match k {
                    CellKind::Normal => self.normal.ops.as_slice(),
                    CellKind::Reduction => self.reduction.ops.as_slice(),
                })
                .collect()
        } else {
            self.cells.iter().map(|c| c.ops.as_slice()).collect()
        }
    }

    pub fn size(&self) -> usize {
        self.expanded().len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// All consecutive paths with exactly `n_s` edges.
///
/// Builds the node paths `P_i` ending at each intermediate node (any earlier
/// path, or a bare input, extended by `n_i`) and slices every path ending at
/// the last node into its length-`n_s` windows.
pub fn get_path(supernet: &CellSupernet, n_s: usize) -> Result<Vec<Vec<Edge>>> {
    let b = supernet.nodes;
    if n_s == 0 || n_s > b {
        return Err(Error::InvalidStampSize { n_s, max: b });
    }
    let mut per_node: Vec<Vec<Vec<Node>>> = Vec::with_capacity(b);
    for i in 0..b {
        let mut paths = vec![vec![Node::InputA], vec![Node::InputB]];
        for earlier in &per_node {
            paths.extend(earlier.iter().cloned());
        }
        for p in &mut paths {
            p.push(Node::Inner(i));
        }
        per_node.push(paths);
    }
    let mut out = BTreeSet::new();
    for p in &per_node[b - 1] {
        let edges = p.len() - 1;
        if edges < n_s {
            continue;
        }
        for start in 0..=(edges - n_s) {
            let sub: Vec<Edge> = (start..start + n_s)
                .map(|k| match p[k + 1] {
                    Node::Inner(dst) => Edge::new(p[k], dst),
                    _ => unreachable!("inputs only start paths"),
                })
                .collect();
            out.insert(sub);
        }
    }
    Ok(out.into_iter().collect())
}

fn sample_stamp<R: Rng>(paths: &[Vec<Edge>], ops: &[OperationKind], rng: &mut R) -> Stamp {
    let edges = paths[rng.random_range(0..paths.len())].clone();
    let chosen = (0..edges.len())
        .map(|_| ops[rng.random_range(0..ops.len())])
        .collect();
    Stamp { edges, ops: chosen }
}

/// Samples a marking key and its verification key. Deterministic in `seed`.
pub fn wmgen(
    n_s: usize,
    space: &SearchSpace,
    mode: KeyMode,
    seed: u64,
) -> Result<(MarkingKey, VerificationKey)> {
    let paths = get_path(&space.supernet, n_s)?;
    if paths.is_empty() {
        return Err(Error::InvalidStampSize {
            n_s,
            max: space.supernet.nodes,
        });
    }
    let ops = &space.supernet.ops;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = sample_stamp(&paths, ops, &mut rng);
    let reduction = sample_stamp(&paths, ops, &mut rng);
    let cells = match mode {
        KeyMode::PerType => Vec::new(),
        KeyMode::PerCell => space
            .layout
            .kinds()
            .iter()
            .map(|_| sample_stamp(&paths, ops, &mut rng))
            .collect(),
    };
    let mk = MarkingKey {
        n_s,
        normal,
        reduction,
        layout: space.layout,
        cells,
    };
    let vk = mk.verification_key();
    Ok((mk, vk))
}

/// Lists everything wrong with `mk` against `space`. Empty means valid.
pub fn validate_key(mk: &MarkingKey, space: &SearchSpace) -> Vec<String> {
    let mut out = Vec::new();
    let b = space.supernet.nodes;
    if mk.n_s == 0 || mk.n_s > b {
        out.push(format!("n_s {} out of range 1..={b}", mk.n_s));
    }
    if !mk.cells.is_empty() && mk.cells.len() != mk.layout.kinds().len() {
        out.push(format!(
            "key has {} cell stamps but layout has {} cells",
            mk.cells.len(),
            mk.layout.kinds().len()
        ));
    }
    let mut stamps: Vec<(String, &Stamp)> = vec![
        ("normal".into(), &mk.normal),
        ("reduction".into(), &mk.reduction),
    ];
    stamps.extend(
        mk.cells
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("cell {i}"), s)),
    );
    for (name, s) in stamps {
        if s.edges.len() != s.ops.len() {
            out.push(format!(
                "{name}: {} edges vs {} operations",
                s.edges.len(),
                s.ops.len()
            ));
        }
        if s.len() != mk.n_s {
            out.push(format!(
                "{name}: stamp length {} differs from n_s {}",
                s.len(),
                mk.n_s
            ));
        }
        if let Some(i) = s.break_index() {
            out.push(format!("{name}: path broken at index {i}"));
        }
        for e in &s.edges {
            if !space.supernet.admits(e) {
                out.push(format!("{name}: edge {e} not admissible"));
            }
        }
        for op in &s.ops {
            if !space.supernet.has_op(op) {
                out.push(format!("{name}: unknown operation {op}"));
            }
        }
    }
    out
}

/// The four-edge key used throughout the examples and docs.
pub fn reference_key() -> MarkingKey {
    let chain = |first: Node| {
        vec![
            Edge::new(first, 0),
            Edge::new(Node::Inner(0), 1),
            Edge::new(Node::Inner(1), 2),
            Edge::new(Node::Inner(2), 3),
        ]
    };
    let normal = Stamp {
        edges: chain(Node::InputA),
        ops: vec![
            OperationKind::AVG_3,
            OperationKind::SEP_5,
            OperationKind::DIL_3,
            OperationKind::SEP_3,
        ],
    };
    let reduction = Stamp {
        edges: chain(Node::InputB),
        ops: vec![
            OperationKind::DIL_3,
            OperationKind::SEP_3,
            OperationKind::SEP_3,
            OperationKind::SKIP,
        ],
    };
    MarkingKey::per_type(4, normal, reduction, Layout::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: depth-first enumeration of every directed path.
    fn all_paths_dfs(s: &CellSupernet, len: usize) -> BTreeSet<Vec<Edge>> {
        fn extend(
            s: &CellSupernet,
            path: &mut Vec<Edge>,
            len: usize,
            out: &mut BTreeSet<Vec<Edge>>,
        ) {
            if path.len() == len {
                out.insert(path.clone());
                return;
            }
            let tail = path.last().unwrap().dst;
            for e in s.edges() {
                if e.src == Node::Inner(tail) {
                    path.push(e);
                    extend(s, path, len, out);
                    path.pop();
                }
            }
        }
        let mut out = BTreeSet::new();
        for e in s.edges() {
            let mut p = vec![e];
            extend(s, &mut p, len, &mut out);
        }
        out
    }

    #[test]
    fn full_length_paths() {
        let s = CellSupernet::standard();
        let paths = get_path(&s, 4).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0][0].src, Node::InputA);
        assert_eq!(paths[1][0].src, Node::InputB);
        for p in &paths {
            let dsts: Vec<usize> = p.iter().map(|e| e.dst).collect();
            assert_eq!(dsts, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn single_node_paths() {
        let s = CellSupernet::new(1, vec![OperationKind::Skip]).unwrap();
        let paths = get_path(&s, 1).unwrap();
        assert_eq!(
            paths,
            vec![
                vec![Edge::new(Node::InputA, 0)],
                vec![Edge::new(Node::InputB, 0)]
            ]
        );
    }

    #[test]
    fn matches_dfs_oracle_for_all_sizes() {
        for b in 1..=5 {
            let s = CellSupernet::new(b, vec![OperationKind::Skip]).unwrap();
            for n_s in 1..=b {
                let got: BTreeSet<_> = get_path(&s, n_s).unwrap().into_iter().collect();
                assert_eq!(got, all_paths_dfs(&s, n_s), "B={b} n_s={n_s}");
            }
        }
    }

    #[test]
    fn single_edges_cover_every_admissible_edge() {
        let s = CellSupernet::standard();
        let paths = get_path(&s, 1).unwrap();
        assert_eq!(paths.len(), s.edges().len());
        assert_eq!(paths.len(), 14);
    }

    #[test]
    fn stamp_size_bounds() {
        let s = CellSupernet::standard();
        assert!(matches!(
            get_path(&s, 0),
            Err(Error::InvalidStampSize { .. })
        ));
        assert!(matches!(
            get_path(&s, 5),
            Err(Error::InvalidStampSize { n_s: 5, max: 4 })
        ));
    }

    #[test]
    fn wmgen_is_seeded_and_valid() {
        let space = SearchSpace::standard();
        let (mk1, vk1) = wmgen(4, &space, KeyMode::PerType, 7).unwrap();
        let (mk2, vk2) = wmgen(4, &space, KeyMode::PerType, 7).unwrap();
        assert_eq!(mk1, mk2);
        assert_eq!(vk1, vk2);
        assert!(validate_key(&mk1, &space).is_empty());
        assert_eq!(vk1.normal.ops, mk1.normal.ops);
        assert_eq!(mk1.normal.edges.last().unwrap().dst, 3);
        assert_eq!(vk1.size(), 20);
    }

    #[test]
    fn wmgen_forced_single_op() {
        let space = SearchSpace {
            supernet: CellSupernet::new(1, vec![OperationKind::SEP_3]).unwrap(),
            layout: Layout {
                blocks: 1,
                cells_per_block: 1,
            },
        };
        let (mk, vk) = wmgen(1, &space, KeyMode::PerType, 0).unwrap();
        assert_eq!(vk.normal.ops, vec![OperationKind::SEP_3]);
        assert_eq!(mk.normal.ops, vec![OperationKind::SEP_3]);
    }

    #[test]
    fn per_cell_mode() {
        let space = SearchSpace::standard();
        let (mk, vk) = wmgen(3, &space, KeyMode::PerCell, 11).unwrap();
        assert_eq!(mk.cells.len(), 20);
        assert!(validate_key(&mk, &space).is_empty());
        assert_eq!(vk.expanded()[5], mk.cells[5].ops.as_slice());
    }

    #[test]
    fn edge_choice_is_uniform() {
        let space = SearchSpace::standard();
        let paths = get_path(&space.supernet, 3).unwrap();
        let k = paths.len();
        let mut counts = vec![0u64; k];
        let draws = 10_000u64;
        for seed in 0..draws {
            let (mk, _) = wmgen(3, &space, KeyMode::PerType, seed).unwrap();
            let i = paths.iter().position(|p| *p == mk.normal.edges).unwrap();
            counts[i] += 1;
        }
        let expected = draws as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // k-1 dof; mean k-1, sd sqrt(2(k-1)); 3 sigma bound
        let dof = (k - 1) as f64;
        assert!(
            chi2 < dof + 3.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2} with {k} paths: {counts:?}"
        );
        for p in &paths {
            assert!(p.windows(2).all(|w| w[1].src == Node::Inner(w[0].dst)));
        }
    }

    #[test]
    fn validation_reports() {
        let space = SearchSpace::standard();
        let mk = reference_key();
        assert!(validate_key(&mk, &space).is_empty());

        let mut broken = mk.clone();
        broken.normal.edges[2] = Edge::new(Node::InputA, 2);
        let report = validate_key(&broken, &space);
        assert!(
            report.iter().any(|r| r.contains("path broken at index 2")),
            "{report:?}"
        );

        let mut alien = mk.clone();
        alien.reduction.ops[0] = OperationKind::NormalConv { kernel: 3 };
        let report = validate_key(&alien, &space);
        assert!(
            report.iter().any(|r| r.contains("unknown operation")),
            "{report:?}"
        );
    }

    #[test]
    fn vk_projection_is_idempotent() {
        let mk = reference_key();
        let vk = mk.verification_key();
        assert_eq!(vk, mk.clone().verification_key());
        let json = vk.to_json().unwrap();
        assert!(!json.contains("edges"));
        assert_eq!(VerificationKey::from_json(&json).unwrap(), vk);
    }

    #[test]
    fn key_json_contract() {
        let mk = reference_key();
        let v: serde_json::Value = serde_json::from_str(&mk.to_json().unwrap()).unwrap();
        assert_eq!(v["n_s"], 4);
        assert_eq!(v["normal"]["ops"][0], "avg_pool_3x3");
        assert_eq!(v["normal"]["edges"][0]["src"], "a");
        assert_eq!(v["reduction"]["ops"][3], "skip");
        assert_eq!(MarkingKey::from_json(&mk.to_json().unwrap()).unwrap(), mk);
    }
}
