//! Watermark embedding: fix the stamped edges, then let a search strategy fill
//! the remaining slots of every cell.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nas::{
    stack_architecture, Architecture, Cell, CellKind, CellSupernet, ChosenEdge, Edge, MacroParams,
    Node,
};
use crate::watermark::{MarkingKey, Stamp};

/// The cell search space left after fixing a stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestrictedSpace {
    pub base: CellSupernet,
    pub fixed: Stamp,
    /// Admissible edges minus the stamped ones.
    pub free_edges: Vec<Edge>,
}

impl RestrictedSpace {
    pub fn new(base: &CellSupernet, fixed: &Stamp) -> Result<Self> {
        for (e, op) in fixed.pairs() {
            if !base.admits(e) {
                return Err(Error::InvalidKey(format!("stamp edge {e} not in supernet")));
            }
            if !base.has_op(op) {
                return Err(Error::InvalidKey(format!(
                    "stamp operation {op} not in supernet"
                )));
            }
        }
        let free_edges = base
            .edges()
            .into_iter()
            .filter(|e| !fixed.edges.contains(e))
            .collect();
        Ok(RestrictedSpace {
            base: base.clone(),
            fixed: fixed.clone(),
            free_edges,
        })
    }

    /// Slots still to be chosen at node `dst` (two minus stamped inputs).
    pub fn free_slots(&self, dst: usize) -> usize {
        2usize.saturating_sub(self.fixed.edges.iter().filter(|e| e.dst == dst).count())
    }

    pub fn total_free_slots(&self) -> usize {
        (0..self.base.nodes).map(|d| self.free_slots(d)).sum()
    }

    /// Samples a completion uniformly: free sources without replacement, ops i.i.d.
    pub fn sample<R: Rng>(&self, kind: CellKind, rng: &mut R) -> Result<Cell> {
        let mut edges: Vec<ChosenEdge> = self
            .fixed
            .pairs()
            .map(|(e, op)| ChosenEdge { edge: *e, op: *op })
            .collect();
        for dst in 0..self.base.nodes {
            let need = self.free_slots(dst);
            let taken: Vec<Node> = self
                .fixed
                .edges
                .iter()
                .filter(|e| e.dst == dst)
                .map(|e| e.src)
                .collect();
            let candidates: Vec<Node> = self
                .free_edges
                .iter()
                .filter(|e| e.dst == dst && !taken.contains(&e.src))
                .map(|e| e.src)
                .collect();
            if candidates.len() < need {
                return Err(Error::SearchInfeasible(format!(
                    "node n{dst} needs {need} free inputs but only {} remain",
                    candidates.len()
                )));
            }
            for src in candidates.choose_multiple(rng, need) {
                let op = *self.base.ops.choose(rng).expect("non-empty candidate set");
                edges.push(ChosenEdge::new(*src, dst, op));
            }
        }
        Ok(Cell::new(kind, edges))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    UniformRandom,
    /// Keeps the best-scoring of `candidates` random completions.
    GreedyMock { candidates: usize },
}

/// Deterministic stand-in for a trained accuracy estimate.
pub fn pseudo_score(normal: &Cell, reduction: &Cell) -> u64 {
    let mut h = Sha256::new();
    for cell in [normal, reduction] {
        for step in cell.ordered_ops() {
            h.update(step.to_string().as_bytes());
        }
        for e in &cell.edges {
            h.update(e.edge.to_string().as_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Embeds `mk` into a searched architecture.
pub fn mark(
    mk: &MarkingKey,
    supernet: &CellSupernet,
    macro_params: MacroParams,
    strategy: Strategy,
    seed: u64,
) -> Result<Architecture> {
    if !mk.cells.is_empty() {
        return mark_per_cell(mk, supernet, macro_params, seed);
    }
    let normal_space = RestrictedSpace::new(supernet, &mk.normal)?;
    let reduction_space = RestrictedSpace::new(supernet, &mk.reduction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rounds = match strategy {
        Strategy::UniformRandom => 1,
        Strategy::GreedyMock { candidates } => candidates.max(1),
    };
    let mut best: Option<(u64, Cell, Cell)> = None;
    for _ in 0..rounds {
        let n = normal_space.sample(CellKind::Normal, &mut rng)?;
        let r = reduction_space.sample(CellKind::Reduction, &mut rng)?;
        let score = pseudo_score(&n, &r);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, n, r));
        }
    }
    let (_, normal, reduction) = best.expect("at least one round");
    stack_architecture(supernet, &normal, &reduction, macro_params)
}

fn mark_per_cell(
    mk: &MarkingKey,
    supernet: &CellSupernet,
    macro_params: MacroParams,
    seed: u64,
) -> Result<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = macro_params.layout();
    if layout.len() != mk.cells.len() {
        return Err(Error::InvalidKey(format!(
            "key has {} cell stamps, architecture has {} cells",
            mk.cells.len(),
            layout.len()
        )));
    }
    let cells = layout
        .iter()
        .zip(&mk.cells)
        .map(|(kind, stamp)| RestrictedSpace::new(supernet, stamp)?.sample(*kind, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Architecture {
        nodes: supernet.nodes,
        ops: supernet.ops.clone(),
        cells,
        macro_params,
    })
}

/// Samples an unwatermarked architecture with both cells drawn uniformly.
pub fn random_architecture(
    supernet: &CellSupernet,
    macro_params: MacroParams,
    seed: u64,
) -> Result<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = Stamp {
        edges: vec![],
        ops: vec![],
    };
    let space = RestrictedSpace::new(supernet, &empty)?;
    let n = space.sample(CellKind::Normal, &mut rng)?;
    let r = space.sample(CellKind::Reduction, &mut rng)?;
    stack_architecture(supernet, &n, &r, macro_params)
}

pub fn cell_contains(cell: &Cell, stamp: &Stamp) -> bool {
    stamp
        .pairs()
        .all(|(e, op)| cell.find(e).is_some_and(|c| c.op == *op))
}

/// Ground truth: every cell carries its stamp's exact edge/operation pairs.
pub fn contains_stamp(arch: &Architecture, mk: &MarkingKey) -> bool {
    if mk.cells.is_empty() {
        arch.cells
            .iter()
            .all(|c| cell_contains(c, mk.stamp_for(c.kind)))
    } else {
        arch.cells.len() == mk.cells.len()
            && arch
                .cells
                .iter()
                .zip(&mk.cells)
                .all(|(c, s)| cell_contains(c, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::OperationKind;
    use crate::watermark::{reference_key, wmgen, KeyMode, Layout, SearchSpace};

    #[test]
    fn reference_key_embeds() {
        let mk = reference_key();
        let s = CellSupernet::standard();
        let arch = mark(&mk, &s, MacroParams::default(), Strategy::UniformRandom, 3).unwrap();
        assert!(contains_stamp(&arch, &mk));
        let first = &arch.cells[0];
        let stamped: Vec<OperationKind> = mk
            .normal
            .edges
            .iter()
            .map(|e| first.find(e).unwrap().op)
            .collect();
        assert_eq!(stamped, mk.normal.ops);
        let s2 = CellSupernet::standard();
        for c in &arch.cells {
            c.validate(&s2).unwrap();
        }
    }

    #[test]
    fn free_slot_count() {
        let mk = reference_key();
        let rs = RestrictedSpace::new(&CellSupernet::standard(), &mk.normal).unwrap();
        assert_eq!(rs.total_free_slots(), 8 - 4);
        assert_eq!(rs.free_edges.len(), 14 - 4);
        assert!((0..4).all(|d| rs.free_slots(d) == 1));
    }

    #[test]
    fn forced_completion() {
        let s = CellSupernet::new(1, vec![OperationKind::SEP_3]).unwrap();
        let stamp = Stamp {
            edges: vec![Edge::new(Node::InputA, 0)],
            ops: vec![OperationKind::SEP_3],
        };
        let mk = MarkingKey::per_type(
            1,
            stamp.clone(),
            stamp,
            Layout {
                blocks: 1,
                cells_per_block: 1,
            },
        );
        let m = MacroParams {
            blocks: 1,
            cells_per_block: 1,
            ..MacroParams::default()
        };
        let a = mark(&mk, &s, m, Strategy::UniformRandom, 0).unwrap();
        let b = mark(&mk, &s, m, Strategy::UniformRandom, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells[0].edges.len(), 2);
    }

    #[test]
    fn many_seeds_all_contain_stamp_and_vary() {
        let space = SearchSpace::standard();
        let (mk, _) = wmgen(4, &space, KeyMode::PerType, 42).unwrap();
        let mut distinct = std::collections::BTreeSet::new();
        for seed in 0..100 {
            for strategy in [
                Strategy::UniformRandom,
                Strategy::GreedyMock { candidates: 4 },
            ] {
                let arch =
                    mark(&mk, &space.supernet, MacroParams::default(), strategy, seed).unwrap();
                assert!(contains_stamp(&arch, &mk));
                distinct.insert(serde_json::to_string(&arch.cells[0]).unwrap());
            }
        }
        assert!(distinct.len() > 50);
    }

    #[test]
    fn replaced_op_breaks_containment() {
        let mk = reference_key();
        let s = CellSupernet::standard();
        let mut arch = mark(&mk, &s, MacroParams::default(), Strategy::UniformRandom, 1).unwrap();
        let e = mk.normal.edges[1];
        let i = arch.cells[3]
            .edges
            .iter()
            .position(|c| c.edge == e)
            .unwrap();
        arch.cells[3].edges[i].op = OperationKind::MAX_3;
        assert!(!contains_stamp(&arch, &mk));
    }

    #[test]
    fn random_architectures_rarely_collide() {
        let mk = reference_key();
        let s = CellSupernet::standard();
        let hits = (0..200)
            .filter(|&seed| {
                contains_stamp(
                    &random_architecture(&s, MacroParams::default(), seed).unwrap(),
                    &mk,
                )
            })
            .count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn per_cell_keys_embed() {
        let space = SearchSpace::standard();
        let (mk, _) = wmgen(2, &space, KeyMode::PerCell, 5).unwrap();
        let arch = mark(
            &mk,
            &space.supernet,
            MacroParams::default(),
            Strategy::UniformRandom,
            8,
        )
        .unwrap();
        assert!(contains_stamp(&arch, &mk));
    }
}
