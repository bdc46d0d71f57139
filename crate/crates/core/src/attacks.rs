//! Model-modification attacks against a watermarked architecture.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::MachineProfile;
use crate::nas::{Architecture, Cell, CellKind, ChosenEdge, ExecStep, Node, OperationKind};
use crate::trace::{simulate, Trace};
use crate::watermark::{MarkingKey, Stamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// The attacker does not know the key and picks operations uniformly.
    #[default]
    Uniform,
    /// The attacker knows the key and removes stamp operations.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackKind {
    ShuffleParallelOps,
    InjectUselessOp,
    InjectUselessCell,
    WeightPrune { rate: f64 },
    Binarize,
    StructuredPrune { count: usize, mode: PruneMode },
    GaussianNoise { sigma: f64 },
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::ShuffleParallelOps => f.write_str("shuffle"),
            AttackKind::InjectUselessOp => f.write_str("useless-op"),
            AttackKind::InjectUselessCell => f.write_str("useless-cell"),
            AttackKind::WeightPrune { rate } => write!(f, "prune:{rate}"),
            AttackKind::Binarize => f.write_str("binarize"),
            AttackKind::StructuredPrune {
                count,
                mode: PruneMode::Uniform,
            } => write!(f, "structured:{count}"),
            AttackKind::StructuredPrune {
                count,
                mode: PruneMode::Oracle,
            } => write!(f, "structured:{count}:oracle"),
            AttackKind::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidAttack(format!("unrecognized attack '{s}'"));
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let arg = parts.next();
        let extra = parts.next();
        let num = |a: Option<&str>| a.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        let kind = match (head, extra) {
            ("shuffle", None) if arg.is_none() => AttackKind::ShuffleParallelOps,
            ("useless-op", None) if arg.is_none() => AttackKind::InjectUselessOp,
            ("useless-cell", None) if arg.is_none() => AttackKind::InjectUselessCell,
            ("binarize", None) if arg.is_none() => AttackKind::Binarize,
            ("prune", None) => AttackKind::WeightPrune { rate: num(arg)? },
            ("noise", None) => AttackKind::GaussianNoise { sigma: num(arg)? },
            ("structured", mode) => AttackKind::StructuredPrune {
                count: arg.ok_or_else(bad)?.parse().map_err(|_| bad())?,
                mode: match mode {
                    None | Some("uniform") => PruneMode::Uniform,
                    Some("oracle") => PruneMode::Oracle,
                    Some(_) => return Err(bad()),
                },
            },
            _ => return Err(bad()),
        };
        kind.validate(None)?;
        Ok(kind)
    }
}

impl AttackKind {
    pub fn validate(&self, n_s: Option<usize>) -> Result<()> {
        match *self {
            AttackKind::WeightPrune { rate } if !(0.0..=1.0).contains(&rate) => Err(
                Error::InvalidAttack(format!("pruning rate {rate} outside [0, 1]")),
            ),
            AttackKind::GaussianNoise { sigma } if !(0.0..=0.5).contains(&sigma) => Err(
                Error::InvalidAttack(format!("noise sigma {sigma} outside [0, 0.5]")),
            ),
            AttackKind::StructuredPrune { count, .. } if n_s.is_some_and(|n| count > n) => {
                Err(Error::InvalidAttack(format!(
                    "cannot remove {count} operations from a stamp of {}",
                    n_s.unwrap_or(0)
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    pub seed: u64,
}

/// An attacked model: its architecture plus the execution conditions the
/// attack changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attacked {
    pub arch: Architecture,
    pub speedup: f64,
    pub noise: f64,
}

impl Attacked {
    pub fn clean(arch: Architecture) -> Self {
        Attacked {
            arch,
            speedup: 1.0,
            noise: 0.0,
        }
    }

    /// Simulates the attacked model; `noise` is the floor measurement noise.
    pub fn simulate(&self, profile: &MachineProfile, seed: u64, noise: f64) -> Result<Trace> {
        let p = MachineProfile {
            speedup: profile.speedup * self.speedup,
            ..profile.clone()
        };
        simulate(&self.arch, &p, seed, noise.max(self.noise))
    }
}

/// Applies `spec`. `mk` is needed only for oracle structured pruning.
pub fn apply_attack(
    arch: &Architecture,
    spec: &AttackSpec,
    profile: &MachineProfile,
    mk: Option<&MarkingKey>,
) -> Result<Attacked> {
    spec.kind.validate(mk.map(|k| k.n_s))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Attacked::clean(arch.clone());
    match spec.kind {
        AttackKind::ShuffleParallelOps => {
            for cell in &mut out.arch.cells {
                shuffle_cell(cell, &mut rng);
            }
        }
        AttackKind::InjectUselessOp => {
            for cell in &mut out.arch.cells {
                let at = rng.random_range(0..=cell.exec_order.len());
                cell.exec_order.insert(
                    at,
                    ExecStep::Dead {
                        dead: OperationKind::SEP_3,
                    },
                );
            }
        }
        AttackKind::InjectUselessCell => {
            let template = arch
                .cells
                .iter()
                .find(|c| c.kind == CellKind::Normal)
                .ok_or_else(|| Error::InvalidAttack("architecture has no normal cell".into()))?;
            let decoy = decoy_cell(template, &arch.ops, &mut rng);
            let at = rng.random_range(0..=out.arch.cells.len());
            out.arch.cells.insert(at, decoy);
        }
        AttackKind::WeightPrune { rate } => {
            for cell in &mut out.arch.cells {
                cell.duration_scale *= profile.prune_scale(rate);
            }
        }
        AttackKind::Binarize => out.speedup = 20.0,
        AttackKind::StructuredPrune { count, mode } => {
            let stamps: Vec<Option<&Stamp>> = match (mode, mk) {
                (PruneMode::Uniform, _) => vec![None; arch.cells.len()],
                (PruneMode::Oracle, None) => {
                    return Err(Error::InvalidAttack(
                        "oracle pruning needs the marking key".into(),
                    ))
                }
                (PruneMode::Oracle, Some(k)) if k.cells.is_empty() => arch
                    .cells
                    .iter()
                    .map(|c| Some(k.stamp_for(c.kind)))
                    .collect(),
                (PruneMode::Oracle, Some(k)) => k.cells.iter().map(Some).collect(),
            };
            for (cell, stamp) in out.arch.cells.iter_mut().zip(stamps) {
                let victims = prune_targets(cell, stamp, count, &mut rng);
                remove_edges(cell, &victims);
            }
        }
        AttackKind::GaussianNoise { sigma } => out.noise = sigma,
    }
    Ok(out)
}

/// Random topological order of the cell's steps; dead steps float freely.
fn shuffle_cell<R: Rng>(cell: &mut Cell, rng: &mut R) {
    let n = cell.exec_order.len();
    let producers = |step: &ExecStep| -> Vec<usize> {
        match *step {
            ExecStep::Edge(i) => match cell.edges[i].edge.src {
                Node::Inner(u) => cell
                    .exec_order
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| matches!(s, ExecStep::Edge(j) if cell.edges[*j].edge.dst == u))
                    .map(|(p, _)| p)
                    .collect(),
                _ => Vec::new(),
            },
            ExecStep::Dead { .. } => Vec::new(),
        }
    };
    let deps: Vec<Vec<usize>> = cell.exec_order.iter().map(producers).collect();
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let ready: Vec<usize> = (0..n)
            .filter(|&i| !placed[i] && deps[i].iter().all(|&d| placed[d]))
            .collect();
        let &pick = ready.choose(rng).expect("acyclic cell");
        placed[pick] = true;
        order.push(cell.exec_order[pick]);
    }
    cell.exec_order = order;
}

fn decoy_cell<R: Rng>(template: &Cell, ops: &[OperationKind], rng: &mut R) -> Cell {
    let gemm_ops: Vec<OperationKind> = ops.iter().copied().filter(|o| o.uses_gemm()).collect();
    loop {
        let edges: Vec<ChosenEdge> = template
            .edges
            .iter()
            .map(|e| ChosenEdge {
                edge: e.edge,
                op: *ops.choose(rng).expect("non-empty candidates"),
            })
            .collect();
        // a decoy must leave a visible window
        if gemm_ops.is_empty() || edges.iter().any(|e| e.op.uses_gemm()) {
            let mut c = Cell::new(CellKind::Normal, edges);
            c.duration_scale = template.duration_scale;
            return c;
        }
    }
}

/// Edge indices to remove: stamp operations in oracle mode (leaving skips
/// for last, since they leave no trace), uniform over the cell otherwise.
fn prune_targets<R: Rng>(
    cell: &Cell,
    stamp: Option<&Stamp>,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let all: Vec<usize> = (0..cell.edges.len()).collect();
    let Some(stamp) = stamp else {
        return all
            .choose_multiple(rng, count.min(all.len()))
            .copied()
            .collect();
    };
    let on_stamp: Vec<usize> = all
        .into_iter()
        .filter(|&i| {
            stamp
                .pairs()
                .any(|(e, op)| cell.edges[i].edge == *e && cell.edges[i].op == *op)
        })
        .collect();
    let (mut visible, mut skips): (Vec<usize>, Vec<usize>) = on_stamp
        .into_iter()
        .partition(|&i| cell.edges[i].op != OperationKind::SKIP);
    visible.shuffle(rng);
    skips.shuffle(rng);
    visible.into_iter().chain(skips).take(count).collect()
}

fn remove_edges(cell: &mut Cell, victims: &[usize]) {
    if victims.is_empty() {
        return;
    }
    let mut remap = vec![None; cell.edges.len()];
    let mut kept = Vec::with_capacity(cell.edges.len());
    for (i, e) in cell.edges.iter().enumerate() {
        if !victims.contains(&i) {
            remap[i] = Some(kept.len());
            kept.push(*e);
        }
    }
    cell.exec_order = cell
        .exec_order
        .iter()
        .filter_map(|s| match *s {
            ExecStep::Edge(i) => remap[i].map(ExecStep::Edge),
            dead => Some(dead),
        })
        .collect();
    cell.edges = kept;
}

/// True when `stamp.ops` is a subsequence of the cell's executed operations.
pub fn stamp_is_subsequence(cell: &Cell, stamp: &Stamp) -> bool {
    let mut want = stamp.ops.iter().peekable();
    for op in cell.ordered_ops() {
        if want.peek() == Some(&&op) {
            want.next();
        }
    }
    want.peek().is_none()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::{CellSupernet, MacroParams};
    use crate::search::{contains_stamp, mark, Strategy};
    use crate::watermark::{reference_key, wmgen, KeyMode, SearchSpace};

    fn marked(seed: u64) -> (MarkingKey, Architecture) {
        let mk = reference_key();
        let arch = mark(
            &mk,
            &CellSupernet::standard(),
            MacroParams::default(),
            Strategy::UniformRandom,
            seed,
        )
        .unwrap();
        (mk, arch)
    }

    fn spec(kind: AttackKind, seed: u64) -> AttackSpec {
        AttackSpec { kind, seed }
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            "shuffle",
            "useless-op",
            "useless-cell",
            "prune:0.9",
            "binarize",
            "structured:2",
            "structured:1:oracle",
            "noise:0.3",
        ] {
            let k: AttackKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        for s in [
            "prune:1.5",
            "noise:0.7",
            "shuffle:1",
            "structured",
            "structured:1:foo",
            "melt",
        ] {
            assert!(s.parse::<AttackKind>().is_err(), "{s}");
        }
    }

    #[test]
    fn parallel_ops_can_run_before_stamp_path() {
        let mk = reference_key();
        // stamped chain a->n0->n1->n2->n3 plus four edges from input b
        let mut edges = Vec::new();
        for (j, (e, op)) in mk.normal.pairs().enumerate() {
            edges.push(ChosenEdge { edge: *e, op: *op });
            edges.push(ChosenEdge::new(Node::InputB, j, OperationKind::SEP_3));
        }
        let mut cell = Cell::new(CellKind::Normal, edges);
        cell.exec_order = [1, 3, 5, 7, 0, 2, 4, 6]
            .into_iter()
            .map(ExecStep::Edge)
            .collect();
        assert!(cell.is_topological());
        assert!(stamp_is_subsequence(&cell, &mk.normal));
        let mut seen_b_first = false;
        for seed in 0..200 {
            let mut c = cell.clone();
            shuffle_cell(&mut c, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(c.is_topological());
            assert!(stamp_is_subsequence(&c, &mk.normal));
            seen_b_first |= c.exec_order[..4]
                .iter()
                .all(|s| matches!(s, ExecStep::Edge(i) if i % 2 == 1));
        }
        assert!(seen_b_first);
    }

    #[test]
    fn sequential_cell_shuffle_is_identity() {
        let chain: Vec<ChosenEdge> = (0..4)
            .flat_map(|j| {
                let src = if j == 0 {
                    Node::InputA
                } else {
                    Node::Inner(j - 1)
                };
                let other = if j < 2 {
                    Node::InputB
                } else {
                    Node::Inner(j - 2)
                };
                [
                    ChosenEdge::new(src, j, OperationKind::SEP_3),
                    ChosenEdge::new(other, j, OperationKind::SEP_5),
                ]
            })
            .collect();
        let cell = Cell::new(CellKind::Normal, chain);
        for seed in 0..20 {
            let mut c = cell.clone();
            shuffle_cell(&mut c, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(c.is_topological());
        }
    }

    #[test]
    fn non_removal_attacks_keep_stamp_order() {
        let prof = MachineProfile::default();
        for seed in 0..30 {
            let (mk, arch) = marked(seed);
            for kind in [
                AttackKind::ShuffleParallelOps,
                AttackKind::InjectUselessOp,
                AttackKind::InjectUselessCell,
                AttackKind::WeightPrune { rate: 0.9 },
                AttackKind::Binarize,
                AttackKind::GaussianNoise { sigma: 0.3 },
            ] {
                let out = apply_attack(&arch, &spec(kind, seed), &prof, Some(&mk)).unwrap();
                for c in &out.arch.cells {
                    assert!(c.is_topological());
                }
                let stamped = out
                    .arch
                    .cells
                    .iter()
                    .filter(|c| stamp_is_subsequence(c, mk.stamp_for(c.kind)))
                    .count();
                assert!(stamped >= 20, "{kind}");
            }
        }
    }

    #[test]
    fn useless_cell_adds_one_window() {
        let (mk, arch) = marked(2);
        let out = apply_attack(
            &arch,
            &spec(AttackKind::InjectUselessCell, 5),
            &MachineProfile::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.arch.cells.len(), 21);
        assert!(!contains_stamp(&out.arch, &mk));
        let decoys = out
            .arch
            .cells
            .iter()
            .filter(|c| !crate::search::cell_contains(c, mk.stamp_for(c.kind)))
            .count();
        assert!(decoys >= 1);
    }

    #[test]
    fn useless_op_lands_in_every_cell() {
        let (_, arch) = marked(2);
        let out = apply_attack(
            &arch,
            &spec(AttackKind::InjectUselessOp, 5),
            &MachineProfile::default(),
            None,
        )
        .unwrap();
        for (a, b) in arch.cells.iter().zip(&out.arch.cells) {
            assert_eq!(b.exec_order.len(), a.exec_order.len() + 1);
            assert_eq!(b.edges, a.edges);
        }
    }

    #[test]
    fn oracle_prune_breaks_every_cell() {
        let prof = MachineProfile::default();
        let space = SearchSpace::standard();
        for seed in 0..50 {
            let (mk, _) = wmgen(1 + (seed as usize % 4), &space, KeyMode::PerType, seed).unwrap();
            let arch = mark(
                &mk,
                &space.supernet,
                MacroParams::default(),
                Strategy::UniformRandom,
                seed,
            )
            .unwrap();
            let out = apply_attack(
                &arch,
                &spec(
                    AttackKind::StructuredPrune {
                        count: 1,
                        mode: PruneMode::Oracle,
                    },
                    seed,
                ),
                &prof,
                Some(&mk),
            )
            .unwrap();
            assert!(!contains_stamp(&out.arch, &mk));
            for c in &out.arch.cells {
                assert_eq!(c.edges.len(), 7);
                assert_eq!(c.exec_order.len(), 7);
            }
        }
    }

    #[test]
    fn uniform_prune_hit_rate_matches_enumeration() {
        // exact: 1 - C(8 - n_s, c) / C(8, c) per cell
        fn choose(n: u64, k: u64) -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        let mk = reference_key();
        let (_, arch) = marked(9);
        let cell = &arch.cells[0];
        let stamp = &mk.normal;
        let trials = 4000;
        for count in [1usize, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(count as u64);
            let hits = (0..trials)
                .filter(|_| {
                    let v = prune_targets(cell, None, count, &mut rng);
                    v.iter().any(|&i| stamp.edges.contains(&cell.edges[i].edge))
                })
                .count();
            let exact = 1.0 - choose(4, count as u64) / choose(8, count as u64);
            let rate = hits as f64 / trials as f64;
            assert!((rate - exact).abs() < 0.03, "{rate} vs {exact}");
        }
    }

    #[test]
    fn oracle_prune_needs_key() {
        let (_, arch) = marked(1);
        let k = AttackKind::StructuredPrune {
            count: 1,
            mode: PruneMode::Oracle,
        };
        assert!(apply_attack(&arch, &spec(k, 0), &MachineProfile::default(), None).is_err());
        let k = AttackKind::StructuredPrune {
            count: 5,
            mode: PruneMode::Oracle,
        };
        assert!(apply_attack(
            &arch,
            &spec(k, 0),
            &MachineProfile::default(),
            Some(&reference_key())
        )
        .is_err());
    }

    #[test]
    fn binarize_and_prune_tagging() {
        let (_, arch) = marked(1);
        let prof = MachineProfile::default();
        let b = apply_attack(&arch, &spec(AttackKind::Binarize, 0), &prof, None).unwrap();
        assert_eq!(b.speedup, 20.0);
        let p = apply_attack(
            &arch,
            &spec(AttackKind::WeightPrune { rate: 0.6 }, 0),
            &prof,
            None,
        )
        .unwrap();
        assert!(p
            .arch
            .cells
            .iter()
            .all(|c| (c.duration_scale - 0.7).abs() < 1e-12));
    }
}
