//! Collision analysis: how likely is an unmarked architecture to carry a stamp?

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::{Cell, CellKind, CellSupernet, Edge, MacroParams, OperationKind};
use crate::search::{cell_contains, mark, pseudo_score, RestrictedSpace, Strategy};
use crate::watermark::{get_path, MarkingKey, SearchSpace, Stamp};

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    /// `C(2B, n_s) / |O|^n_s` as written, possibly above one.
    pub raw: f64,
    pub value: f64,
    /// Set when the formula exceeds one and says nothing.
    pub loose: bool,
}

impl Bound {
    fn new(raw: f64) -> Self {
        Bound {
            raw,
            value: raw.min(1.0),
            loose: raw > 1.0,
        }
    }

    /// Both cell types must collide; the per-type stamps are independent.
    pub fn joint(&self) -> Bound {
        Bound::new(self.raw * self.raw)
    }
}

pub fn analytic_bound(nodes: usize, n_s: usize, num_ops: usize) -> Result<Bound> {
    if n_s == 0 || n_s > nodes {
        return Err(Error::InvalidStampSize { n_s, max: nodes });
    }
    if num_ops == 0 {
        return Err(Error::InvalidSupernet("empty candidate set".into()));
    }
    Ok(Bound::new(
        binomial(2 * nodes as u64, n_s as u64) / (num_ops as f64).powi(n_s as i32),
    ))
}

/// Every way a uniform cell can choose its inputs: per node, a 2-subset of its
/// admissible sources.
pub fn edge_configurations(supernet: &CellSupernet) -> Vec<Vec<Edge>> {
    let mut configs: Vec<Vec<Edge>> = vec![Vec::new()];
    for dst in 0..supernet.nodes {
        let srcs = supernet.sources(dst);
        let mut next = Vec::new();
        for base in &configs {
            for i in 0..srcs.len() {
                for j in i + 1..srcs.len() {
                    let mut c = base.clone();
                    c.push(Edge::new(srcs[i], dst));
                    c.push(Edge::new(srcs[j], dst));
                    next.push(c);
                }
            }
        }
        configs = next;
    }
    configs
}

/// Exact probability that a uniformly sampled cell contains `stamp`
/// (edges and operations), by enumerating every input configuration.
pub fn exact_cell_collision(supernet: &CellSupernet, stamp: &Stamp) -> f64 {
    let configs = edge_configurations(supernet);
    let hits = configs
        .iter()
        .filter(|c| stamp.edges.iter().all(|e| c.contains(e)))
        .count();
    let ops = (1.0 / supernet.ops.len() as f64).powi(stamp.len() as i32);
    hits as f64 / configs.len() as f64 * ops
}

/// Closed form of [`exact_cell_collision`] for stamps with distinct targets:
/// node `j` keeps a given source with probability `2 / (j + 2)`.
pub fn closed_form_cell_collision(supernet: &CellSupernet, stamp: &Stamp) -> f64 {
    let edges: f64 = stamp
        .edges
        .iter()
        .map(|e| 2.0 / supernet.sources(e.dst).len() as f64)
        .product();
    edges * (1.0 / supernet.ops.len() as f64).powi(stamp.len() as i32)
}

/// Probability that a uniform cell carries the stamp's operation sequence on
/// any valid length-`n_s` path, i.e. a collision as seen by the verifier's key.
pub fn exact_any_path_collision(supernet: &CellSupernet, ops: &[OperationKind]) -> Result<f64> {
    let paths = get_path(supernet, ops.len())?;
    let p_op = 1.0 / supernet.ops.len() as f64;
    if !ops.iter().all(|o| supernet.has_op(o)) {
        return Ok(0.0);
    }
    let configs = edge_configurations(supernet);
    let mut total = 0.0;
    for c in &configs {
        let present: Vec<&Vec<Edge>> = paths
            .iter()
            .filter(|p| p.iter().all(|e| c.contains(e)))
            .collect();
        // inclusion-exclusion over the present paths
        let mut prob = 0.0;
        for mask in 1u64..(1 << present.len()) {
            let mut need: BTreeMap<Edge, OperationKind> = BTreeMap::new();
            let mut consistent = true;
            for (i, p) in present.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    for (e, op) in p.iter().zip(ops) {
                        if *need.entry(*e).or_insert(*op) != *op {
                            consistent = false;
                        }
                    }
                }
            }
            if consistent {
                let sign = if mask.count_ones() % 2 == 1 {
                    1.0
                } else {
                    -1.0
                };
                prob += sign * p_op.powi(need.len() as i32);
            }
        }
        total += prob;
    }
    Ok(total / configs.len() as f64)
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(hits: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = trials as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    pub hits: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci95: (f64, f64),
}

impl Empirical {
    fn new(hits: u64, trials: u64) -> Self {
        Empirical {
            hits,
            trials,
            rate: hits as f64 / trials.max(1) as f64,
            ci95: wilson_interval(hits, trials),
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        p >= self.ci95.0 && p <= self.ci95.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCollision {
    pub analytic: Bound,
    pub exact: f64,
    pub exact_any_path: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical: Option<Empirical>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_any_path: Option<Empirical>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionStats {
    pub n_s: usize,
    pub nodes: usize,
    pub num_ops: usize,
    pub normal: CellCollision,
    pub reduction: CellCollision,
    pub joint: CellCollision,
    /// Normal-cell operation counts per edge over all sampled architectures.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub histogram: BTreeMap<String, BTreeMap<String, u64>>,
}

/// Closed-form part of the statistics.
pub fn collision_stats(space: &SearchSpace, mk: &MarkingKey) -> Result<CollisionStats> {
    let s = &space.supernet;
    let bound = analytic_bound(s.nodes, mk.n_s, s.ops.len())?;
    let cell = |stamp: &Stamp| -> Result<CellCollision> {
        Ok(CellCollision {
            analytic: bound,
            exact: exact_cell_collision(s, stamp),
            exact_any_path: exact_any_path_collision(s, &stamp.ops)?,
            empirical: None,
            empirical_any_path: None,
        })
    };
    let normal = cell(&mk.normal)?;
    let reduction = cell(&mk.reduction)?;
    let joint = CellCollision {
        analytic: bound.joint(),
        exact: normal.exact * reduction.exact,
        exact_any_path: normal.exact_any_path * reduction.exact_any_path,
        empirical: None,
        empirical_any_path: None,
    };
    Ok(CollisionStats {
        n_s: mk.n_s,
        nodes: s.nodes,
        num_ops: s.ops.len(),
        normal,
        reduction,
        joint,
        histogram: BTreeMap::new(),
    })
}

/// How Monte-Carlo trials produce their architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Unmarked search with the given strategy.
    Search(Strategy),
    /// The owner's own marked model; every trial must collide.
    Marked,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Search(Strategy::UniformRandom)
    }
}

#[derive(Default)]
struct Tally {
    normal: u64,
    reduction: u64,
    joint: u64,
    normal_any: u64,
    reduction_any: u64,
    joint_any: u64,
    histogram: BTreeMap<(Edge, OperationKind), u64>,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.normal += other.normal;
        self.reduction += other.reduction;
        self.joint += other.joint;
        self.normal_any += other.normal_any;
        self.reduction_any += other.reduction_any;
        self.joint_any += other.joint_any;
        for (k, v) in other.histogram {
            *self.histogram.entry(k).or_default() += v;
        }
        self
    }
}

fn has_any_path(cell: &Cell, paths: &[Vec<Edge>], ops: &[OperationKind]) -> bool {
    paths.iter().any(|p| {
        p.iter()
            .zip(ops)
            .all(|(e, op)| cell.find(e).is_some_and(|c| c.op == *op))
    })
}

fn sample_pair(
    space: &RestrictedSpace,
    strategy: Strategy,
    rng: &mut ChaCha8Rng,
) -> Result<(Cell, Cell)> {
    let rounds = match strategy {
        Strategy::UniformRandom => 1,
        Strategy::GreedyMock { candidates } => candidates.max(1),
    };
    let mut best: Option<(u64, Cell, Cell)> = None;
    for _ in 0..rounds {
        let n = space.sample(CellKind::Normal, rng)?;
        let r = space.sample(CellKind::Reduction, rng)?;
        let score = pseudo_score(&n, &r);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, n, r));
        }
    }
    let (_, n, r) = best.expect("at least one round");
    Ok((n, r))
}

/// Samples `trials` architectures (in parallel, one RNG stream per trial) and
/// counts per-cell and joint stamp collisions.
pub fn monte_carlo(
    space: &SearchSpace,
    mk: &MarkingKey,
    trials: u64,
    seed: u64,
    sampler: Sampler,
) -> Result<CollisionStats> {
    if trials == 0 {
        return Err(Error::InvalidKey(
            "monte carlo needs at least one trial".into(),
        ));
    }
    let mut stats = collision_stats(space, mk)?;
    let s = &space.supernet;
    let empty = RestrictedSpace::new(
        s,
        &Stamp {
            edges: vec![],
            ops: vec![],
        },
    )?;
    let paths = get_path(s, mk.n_s)?;
    let macro_params = MacroParams {
        blocks: 2,
        cells_per_block: 1,
        ..MacroParams::default()
    };
    let one = |t: u64| -> Result<Tally> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t);
        let (n, r) = match sampler {
            Sampler::Search(strategy) => sample_pair(&empty, strategy, &mut rng)?,
            Sampler::Marked => {
                let arch = mark(mk, s, macro_params, Strategy::UniformRandom, seed ^ t)?;
                (arch.cells[0].clone(), arch.cells[1].clone())
            }
        };
        let hn = cell_contains(&n, &mk.normal);
        let hr = cell_contains(&r, &mk.reduction);
        let an = has_any_path(&n, &paths, &mk.normal.ops);
        let ar = has_any_path(&r, &paths, &mk.reduction.ops);
        let mut tally = Tally {
            normal: hn as u64,
            reduction: hr as u64,
            joint: (hn && hr) as u64,
            normal_any: an as u64,
            reduction_any: ar as u64,
            joint_any: (an && ar) as u64,
            histogram: BTreeMap::new(),
        };
        for e in &n.edges {
            *tally.histogram.entry((e.edge, e.op)).or_default() += 1;
        }
        Ok(tally)
    };
    let tally = (0..trials)
        .into_par_iter()
        .map(one)
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    stats.normal.empirical = Some(Empirical::new(tally.normal, trials));
    stats.reduction.empirical = Some(Empirical::new(tally.reduction, trials));
    stats.joint.empirical = Some(Empirical::new(tally.joint, trials));
    stats.normal.empirical_any_path = Some(Empirical::new(tally.normal_any, trials));
    stats.reduction.empirical_any_path = Some(Empirical::new(tally.reduction_any, trials));
    stats.joint.empirical_any_path = Some(Empirical::new(tally.joint_any, trials));
    for ((edge, op), count) in tally.histogram {
        stats
            .histogram
            .entry(edge.to_string())
            .or_default()
            .insert(op.to_string(), count);
    }
    Ok(stats)
}

/// Exact collision probability of a marking key against uniform search.
pub fn exact_collision(space: &SearchSpace, mk: &MarkingKey) -> Result<f64> {
    Ok(collision_stats(space, mk)?.joint.exact)
}
