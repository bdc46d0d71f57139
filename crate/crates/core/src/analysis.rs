//! Trace analysis: split a trace into cell windows and operation clusters,
//! decode each cluster into GEMM calls and recover operation classes, kernel
//! sizes, channel counts and matrix dimension ranges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{
    depthwise_ratio, invert_iterations, kernel_size_from_timing, DimRanges, KernelEstimate,
    MachineProfile,
};
use crate::trace::{Api, Source, Trace, TraceEvent};

/// Public knowledge the analyst brings: input geometry and kernel candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub input_width: u32,
    pub input_height: u32,
    pub kernels: Vec<u32>,
    /// Relative band around the midpoint of two kernel predictions that stays unresolved.
    pub tie_band: f64,
    /// Relative spread of cell gaps below which gap arithmetic is trusted at cell boundaries.
    pub quiet_spread: f64,
    pub max_boundary_skips: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            input_width: 32,
            input_height: 32,
            kernels: vec![3, 5],
            tie_band: 0.05,
            quiet_spread: 0.01,
            max_boundary_skips: 8,
        }
    }
}

/// One decoded GEMM call (one loop-2 pass per call unless `iter2 > 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gemm {
    pub start: u64,
    pub last: u64,
    pub events: usize,
    pub iter2: u64,
    pub iter3: u64,
    pub iter4: u64,
}

impl Gemm {
    /// Mean spacing between events; also the expected tail after the last one.
    pub fn spacing(&self) -> f64 {
        if self.events > 1 {
            (self.last - self.start) as f64 / (self.events - 1) as f64
        } else {
            0.0
        }
    }

    pub fn end(&self) -> f64 {
        self.last as f64 + self.spacing()
    }

    fn signature(&self) -> (u64, u64) {
        (self.iter3, self.iter4)
    }
}

/// A burst of BLAS events with no gap at or above the operation threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub start: u64,
    pub last: u64,
    pub gemms: Vec<Gemm>,
    /// Set when the events do not follow the I O+ I* loop grammar.
    pub malformed: bool,
}

impl Cluster {
    pub fn end(&self) -> f64 {
        self.gemms.last().map_or(self.last as f64, Gemm::end)
    }

    pub fn duration(&self) -> f64 {
        self.end() - self.start as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Anchor {
    Cluster(Cluster),
    Pool { t: u64, api: Api },
}

impl Anchor {
    fn start(&self) -> f64 {
        match self {
            Anchor::Cluster(c) => c.start as f64,
            Anchor::Pool { t, .. } => *t as f64,
        }
    }

    fn end(&self) -> f64 {
        match self {
            Anchor::Cluster(c) => c.end(),
            Anchor::Pool { t, .. } => *t as f64,
        }
    }

    fn is_pool(&self) -> bool {
        matches!(self, Anchor::Pool { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellWindow {
    pub index: usize,
    pub start: u64,
    pub last: u64,
    pub anchors: Vec<Anchor>,
    /// Estimated skips hidden in the gaps before and after the window.
    pub lead_skips: usize,
    pub trail_skips: usize,
    /// Windows with no events at all, inferred from an oversized cell gap.
    pub phantom: bool,
}

impl CellWindow {
    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.anchors.iter().filter_map(|a| match a {
            Anchor::Cluster(c) => Some(c),
            Anchor::Pool { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub prologue: Vec<Cluster>,
    pub windows: Vec<CellWindow>,
    pub epilogue: Vec<Cluster>,
    pub op_threshold: f64,
    pub cell_threshold: f64,
    /// Estimated operation latency in trace cycles.
    pub base_gap: f64,
    /// Relative spread (MAD / median) of the cell gaps.
    pub cell_gap_spread: f64,
    pub framework_events: bool,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Splits an operation cluster's events into GEMM calls. A new call starts at
/// every itcopy immediately followed by an oncopy.
pub fn decode_gemms(events: &[TraceEvent]) -> (Vec<Gemm>, bool) {
    let mut pieces: Vec<&[TraceEvent]> = Vec::new();
    let mut start = 0;
    for i in 1..events.len() {
        if events[i].api == Api::Itcopy && events.get(i + 1).is_some_and(|e| e.api == Api::Oncopy) {
            pieces.push(&events[start..i]);
            start = i;
        }
    }
    if !events.is_empty() {
        pieces.push(&events[start..]);
    }
    let mut malformed = false;
    let mut gemms = Vec::with_capacity(pieces.len());
    for p in pieces {
        let lead = p.first().is_some_and(|e| e.api == Api::Itcopy);
        let ons = p
            .iter()
            .skip(1)
            .take_while(|e| e.api == Api::Oncopy)
            .count();
        let tail = p
            .iter()
            .skip(1 + ons)
            .take_while(|e| e.api == Api::Itcopy)
            .count();
        if !lead || ons == 0 || 1 + ons + tail != p.len() {
            malformed = true;
        }
        gemms.push(Gemm {
            start: p[0].t,
            last: p[p.len() - 1].t,
            events: p.len(),
            iter2: 1,
            iter3: tail as u64,
            iter4: ons as u64,
        });
    }
    // a lone repeated pattern is one GEMM with several loop-2 passes
    if gemms.len() > 1 && !malformed && gemms.iter().all(|g| g.signature() == gemms[0].signature())
    {
        let n = gemms.len() as u64;
        let first = gemms[0].clone();
        let last = gemms[gemms.len() - 1].last;
        let events = gemms.iter().map(|g| g.events).sum();
        gemms = vec![Gemm {
            last,
            events,
            iter2: n,
            ..first
        }];
    }
    (gemms, malformed)
}

fn make_cluster(events: &[TraceEvent]) -> Cluster {
    let (gemms, malformed) = decode_gemms(events);
    Cluster {
        start: events[0].t,
        last: events[events.len() - 1].t,
        gemms,
        malformed,
    }
}

/// Groups events into anchors: operation clusters split at `op_threshold`,
/// and framework pooling events.
fn anchors(events: &[TraceEvent], op_threshold: f64) -> Vec<Anchor> {
    let mut out = Vec::new();
    let mut run: Vec<TraceEvent> = Vec::new();
    let flush = |run: &mut Vec<TraceEvent>, out: &mut Vec<Anchor>| {
        if !run.is_empty() {
            out.push(Anchor::Cluster(make_cluster(run)));
            run.clear();
        }
    };
    for e in events {
        if e.src == Source::Framework {
            flush(&mut run, &mut out);
            out.push(Anchor::Pool { t: e.t, api: e.api });
            continue;
        }
        if run
            .last()
            .is_some_and(|p| (e.t - p.t) as f64 >= op_threshold)
        {
            flush(&mut run, &mut out);
        }
        run.push(*e);
    }
    flush(&mut run, &mut out);
    out
}

/// Splits the trace into prologue, cell windows and epilogue.
pub fn segment(trace: &Trace, profile: &MachineProfile) -> Result<Segmentation> {
    profile.validate()?;
    let ev = &trace.events;
    if ev.len() < 2 {
        return Err(Error::NotNasModel("trace has fewer than two events".into()));
    }
    let gaps: Vec<f64> = ev.windows(2).map(|w| (w[1].t - w[0].t) as f64).collect();
    let largest = gaps.iter().copied().fold(0.0, f64::max);
    let cell_threshold = profile.cell_gap_threshold.unwrap_or(largest / 30.0);
    let (above, below): (Vec<f64>, Vec<f64>) = gaps.iter().partition(|&&g| g >= cell_threshold);
    if above.len() < 2 || below.len() < above.len() {
        return Err(Error::NotNasModel("no cell window structure".into()));
    }
    let min_above = above.iter().copied().fold(f64::INFINITY, f64::min);
    let max_below = below.iter().copied().fold(0.0, f64::max);
    if min_above < 2.0 * max_below {
        return Err(Error::NotNasModel(format!(
            "cell gaps are not separated from operation gaps ({min_above:.0} vs {max_below:.0} cycles)"
        )));
    }

    let mut cell_gaps = above.clone();
    let cell_gap = median(&mut cell_gaps);
    let mut dev: Vec<f64> = above.iter().map(|g| (g - cell_gap).abs()).collect();
    let cell_gap_spread = median(&mut dev) / cell_gap;
    let scale0 = cell_gap / profile.cell_gap();
    let op_threshold = profile
        .op_gap_threshold
        .unwrap_or(profile.op_threshold() * scale0);

    let mut bounds = vec![0];
    bounds.extend(
        gaps.iter()
            .enumerate()
            .filter(|(_, &g)| g >= cell_threshold)
            .map(|(i, _)| i + 1),
    );
    bounds.push(ev.len());
    let segments: Vec<&[TraceEvent]> = bounds.windows(2).map(|b| &ev[b[0]..b[1]]).collect();
    let mut parts: Vec<Vec<Anchor>> = segments.iter().map(|s| anchors(s, op_threshold)).collect();

    // operation latency: every gap inside a window is a whole number of
    // latencies (halves for unseen pools) past its expected minimum
    let framework = trace.has_framework_events();
    let b0 = profile.base_gap * scale0;
    let mut op_gaps: Vec<f64> = parts[1..parts.len() - 1]
        .iter()
        .flat_map(|a| a.windows(2))
        .filter_map(|w| {
            let g = w[1].start() - w[0].end();
            let left = if w[0].is_pool() { 0.75 } else { 0.0 };
            let right = if w[1].is_pool() { 0.75 } else { 1.0 };
            let step = if framework { 1.0 } else { 0.5 };
            let extra = ((g / b0 - left - right) / step).round().max(0.0) * step;
            (g >= op_threshold).then(|| g / (left + right + extra))
        })
        .collect();
    let base_gap = if op_gaps.is_empty() {
        b0
    } else {
        median(&mut op_gaps)
    };

    let quiet = cell_gap_spread < AnalysisConfig::default().quiet_spread;
    let epilogue_anchors = parts.pop().unwrap_or_default();
    let prologue_anchors = parts.remove(0);
    let to_clusters = |a: Vec<Anchor>| -> Vec<Cluster> {
        a.into_iter()
            .filter_map(|x| match x {
                Anchor::Cluster(c) => Some(c),
                Anchor::Pool { .. } => None,
            })
            .collect()
    };
    let prologue = to_clusters(prologue_anchors);
    let epilogue = to_clusters(epilogue_anchors);

    let mut windows: Vec<CellWindow> = Vec::new();
    let mut prev_end = prologue.last().map_or(ev[0].t as f64, Cluster::end);
    let mut prev_pool = false;
    let nominal_cell = profile.cell_gap_factor * base_gap;
    let max_skips = AnalysisConfig::default().max_boundary_skips as f64;
    let last_seg = segments.len() - 2;
    let mut pending_lead = 0usize;
    for (k, anchors) in parts.into_iter().enumerate() {
        let first = &anchors[0];
        let gap = first.start() - prev_end;
        if quiet {
            let cells = (gap / nominal_cell).round().max(1.0);
            let lead = if first.is_pool() { 0.75 } else { 1.0 };
            let trail = if prev_pool { 0.75 } else { 0.0 };
            let residue = (gap - cells * nominal_cell) / base_gap - lead - trail;
            let skips = if (-0.5..=max_skips * cells + 0.5).contains(&residue) {
                residue.round().max(0.0) as usize
            } else {
                0
            };
            if let Some(w) = windows.last_mut() {
                w.trail_skips = skips;
            }
            for _ in 1..cells as usize {
                windows.push(CellWindow {
                    index: windows.len(),
                    start: prev_end as u64,
                    last: prev_end as u64,
                    anchors: Vec::new(),
                    lead_skips: skips,
                    trail_skips: skips,
                    phantom: true,
                });
            }
            pending_lead = skips;
        }
        let seg = segments[k + 1];
        prev_end = anchors
            .last()
            .map_or(seg[seg.len() - 1].t as f64, Anchor::end);
        prev_pool = anchors.last().is_some_and(Anchor::is_pool);
        windows.push(CellWindow {
            index: windows.len(),
            start: seg[0].t,
            last: seg[seg.len() - 1].t,
            anchors,
            lead_skips: pending_lead,
            trail_skips: 0,
            phantom: false,
        });
        if k + 1 == last_seg && quiet {
            let gap = epilogue.first().map_or(prev_end, |c| c.start as f64) - prev_end;
            let trail = if prev_pool { 0.75 } else { 0.0 };
            let residue = (gap - nominal_cell) / base_gap - 1.0 - trail;
            if (-0.5..=max_skips + 0.5).contains(&residue) {
                if let Some(w) = windows.last_mut() {
                    w.trail_skips = residue.round().max(0.0) as usize;
                }
            }
        }
    }
    Ok(Segmentation {
        prologue,
        windows,
        epilogue,
        op_threshold,
        cell_threshold,
        base_gap,
        cell_gap_spread,
        framework_events: trace.has_framework_events(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class")]
pub enum OpClass {
    #[serde(rename = "sc")]
    SepConv,
    #[serde(rename = "ds")]
    DilSepConv,
    NormalConvOrFc,
    Pool {
        pool: PoolKind,
    },
    GapOnly,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredDims {
    pub ranges: DimRanges,
    /// `m` fixed to a feasible spatial area.
    pub m: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredOp {
    #[serde(flatten)]
    pub class: OpClass,
    pub kernel: KernelEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<u32>,
    /// Depthwise then pointwise ranges for separable classes; one entry otherwise.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dims: Vec<RecoveredDims>,
    /// Depthwise-to-pointwise timing ratio used for the kernel decision.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ratio: Option<f64>,
    pub start: u64,
    pub duration: u64,
}

impl RecoveredOp {
    fn token(class: OpClass, t: f64) -> Self {
        RecoveredOp {
            class,
            kernel: KernelEstimate::Unresolved,
            channels: None,
            dims: Vec::new(),
            timing_ratio: None,
            start: t.max(0.0) as u64,
            duration: 0,
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.class, OpClass::SepConv | OpClass::DilSepConv)
    }
}

/// Recovers the dimension ranges of one GEMM; `m_hint` is the area the NAS
/// macro-structure predicts, kept when it lies in the recovered range.
pub fn recover_dims(gemm: &Gemm, profile: &MachineProfile, m_hint: Option<u64>) -> RecoveredDims {
    let ranges = invert_iterations(gemm.iter2, gemm.iter3, gemm.iter4, profile);
    let m = m_hint.filter(|&m| ranges.m.contains(m)).or_else(|| {
        let lo = ((ranges.m.lo + 1) as f64).sqrt().ceil() as u64;
        let hi = (ranges.m.hi as f64).sqrt().floor() as u64;
        let mid = (ranges.m.lo + ranges.m.hi) as f64 / 2.0;
        (lo..=hi)
            .map(|w| w * w)
            .min_by(|a, b| (*a as f64 - mid).abs().total_cmp(&(*b as f64 - mid).abs()))
    });
    RecoveredDims { ranges, m }
}

/// Depthwise groups of a cluster: `Some((passes, channels))` when the GEMMs
/// form one or two runs of `D` single-patch GEMMs each closed by a pointwise GEMM.
fn separable_shape(gemms: &[Gemm], profile: &MachineProfile) -> Option<(usize, usize)> {
    let group = |g: &[Gemm]| -> Option<usize> {
        let d = g.len().checked_sub(1).filter(|&d| d >= 1)?;
        let m = g[0].iter3;
        let dw_ok = g[..d]
            .iter()
            .all(|x| x.iter4 == 1 && x.iter3 == m && x.iter2 == 1);
        let pw = &g[d];
        let pw_ok = pw.iter3 == m && pw.iter4 == (d as u64).div_ceil(profile.patch_quantum());
        (dw_ok && pw_ok).then_some(d)
    };
    let n = gemms.len();
    let twice = n
        .is_multiple_of(2)
        .then(|| {
            let (a, b) = gemms.split_at(n / 2);
            let same = a.iter().zip(b).all(|(x, y)| x.signature() == y.signature());
            group(a).filter(|_| same).and_then(|d| group(b).map(|_| d))
        })
        .flatten();
    let once = group(gemms);
    match (twice, once) {
        (Some(d), Some(d1)) => {
            // tiny channel counts: a pointwise GEMM in the middle runs far longer than a depthwise one
            let mid = &gemms[n / 2 - 1];
            let dw = &gemms[0];
            let span = |g: &Gemm| g.spacing() * g.events as f64;
            if span(mid) > 2.0 * span(dw) {
                Some((2, d))
            } else {
                Some((1, d1))
            }
        }
        (Some(d), None) => Some((2, d)),
        (None, Some(d)) => Some((1, d)),
        (None, None) => None,
    }
}

/// Timing spans of each separable pass: (depthwise span, pointwise span).
fn pass_spans(gemms: &[Gemm], passes: usize) -> Vec<(f64, f64)> {
    gemms
        .chunks(gemms.len() / passes)
        .map(|g| {
            let pw = &g[g.len() - 1];
            ((pw.start - g[0].start) as f64, (pw.last - pw.start) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredWindow {
    pub index: usize,
    pub start: u64,
    pub phantom: bool,
    pub ops: Vec<RecoveredOp>,
}

impl RecoveredWindow {
    pub fn channels(&self) -> Option<u32> {
        self.ops.iter().filter_map(|o| o.channels).max()
    }

    /// Visible structure used to compare windows (gap-only tokens excluded).
    pub fn signature(&self) -> Vec<(OpClass, KernelEstimate, Option<u32>)> {
        self.ops
            .iter()
            .filter(|o| o.class != OpClass::GapOnly)
            .map(|o| (o.class, o.kernel, o.channels))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub channels: Option<u32>,
    pub windows: Vec<usize>,
    /// Windows sharing the block's majority structure.
    pub similar: Vec<usize>,
    pub distinct: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSummary {
    pub windows: usize,
    pub blocks: Vec<BlockSummary>,
    pub prologue_clusters: usize,
    pub epilogue_clusters: usize,
}

impl MacroSummary {
    pub fn similar_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.similar.len()).collect()
    }

    pub fn distinct_count(&self) -> usize {
        self.blocks.iter().map(|b| b.distinct.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredArchitecture {
    pub windows: Vec<RecoveredWindow>,
    pub prologue: Vec<RecoveredOp>,
    pub epilogue: Vec<RecoveredOp>,
    #[serde(rename = "macro")]
    pub macro_summary: MacroSummary,
    pub base_gap: f64,
    pub op_threshold: f64,
    pub cell_threshold: f64,
    pub framework_events: bool,
}

struct Decoded {
    op: RecoveredOp,
    passes: usize,
    spans: Vec<(f64, f64)>,
}

fn decode_cluster(c: &Cluster, profile: &MachineProfile) -> Decoded {
    let mut op = RecoveredOp::token(OpClass::Unknown, c.start as f64);
    op.duration = c.duration().round() as u64;
    if c.malformed {
        return Decoded {
            op,
            passes: 0,
            spans: Vec::new(),
        };
    }
    if c.gemms.len() == 1 {
        op.class = OpClass::NormalConvOrFc;
        op.dims = vec![recover_dims(&c.gemms[0], profile, None)];
        return Decoded {
            op,
            passes: 0,
            spans: Vec::new(),
        };
    }
    match separable_shape(&c.gemms, profile) {
        Some((passes, d)) => {
            op.class = if passes == 2 {
                OpClass::SepConv
            } else {
                OpClass::DilSepConv
            };
            op.channels = Some(d as u32);
            Decoded {
                op,
                passes,
                spans: pass_spans(&c.gemms, passes),
            }
        }
        None => Decoded {
            op,
            passes: 0,
            spans: Vec::new(),
        },
    }
}

/// Converts one window into its operation sequence. `channels0` is the
/// channel count of the first block, `m` hints come from channel doubling.
pub fn classify_window(
    window: &CellWindow,
    seg: &Segmentation,
    profile: &MachineProfile,
    cfg: &AnalysisConfig,
    channels0: Option<u32>,
) -> RecoveredWindow {
    let b = seg.base_gap;
    let mut decoded: Vec<Option<Decoded>> = Vec::new();
    let mut ops: Vec<RecoveredOp> = Vec::new();
    let gap_tokens =
        |n: usize, t: f64, ops: &mut Vec<RecoveredOp>, decoded: &mut Vec<Option<Decoded>>| {
            for _ in 0..n {
                ops.push(RecoveredOp::token(OpClass::GapOnly, t));
                decoded.push(None);
            }
        };
    gap_tokens(
        window.lead_skips,
        window.start as f64,
        &mut ops,
        &mut decoded,
    );
    for (i, a) in window.anchors.iter().enumerate() {
        if i > 0 {
            let prev = &window.anchors[i - 1];
            let gap = (a.start() - prev.end()) / b;
            let left = if prev.is_pool() { 0.75 } else { 0.0 };
            if seg.framework_events {
                let right = if a.is_pool() { 0.75 } else { 1.0 };
                let skips = (gap - left - right).round().max(0.0) as usize;
                gap_tokens(skips, prev.end(), &mut ops, &mut decoded);
            } else {
                // pools leave 1.5 operation latencies and no event
                let halves = (2.0 * (gap - left - 1.0)).round().max(0.0) as usize;
                let pools = halves % 2;
                if pools == 1 {
                    ops.push(RecoveredOp::token(
                        OpClass::Pool {
                            pool: PoolKind::Unknown,
                        },
                        prev.end(),
                    ));
                    decoded.push(None);
                }
                gap_tokens(
                    halves.saturating_sub(3 * pools) / 2,
                    prev.end(),
                    &mut ops,
                    &mut decoded,
                );
            }
        }
        match a {
            Anchor::Pool { t, api } => {
                let pool = match api {
                    Api::PoolAvg => PoolKind::Avg,
                    Api::PoolMax => PoolKind::Max,
                    _ => PoolKind::Unknown,
                };
                ops.push(RecoveredOp::token(OpClass::Pool { pool }, *t as f64));
                decoded.push(None);
            }
            Anchor::Cluster(c) => {
                let d = decode_cluster(c, profile);
                ops.push(d.op.clone());
                decoded.push(Some(d));
            }
        }
    }
    gap_tokens(
        window.trail_skips,
        window.last as f64,
        &mut ops,
        &mut decoded,
    );

    // pointwise GEMMs of one cell share their shape; pool their spans
    let pw: Vec<f64> = decoded
        .iter()
        .flatten()
        .flat_map(|d| d.spans.iter().map(|s| s.1))
        .collect();
    let pw_ref = if pw.is_empty() {
        f64::NAN
    } else {
        pw.iter().sum::<f64>() / pw.len() as f64
    };
    let cluster_of = {
        let clusters: Vec<&Cluster> = window.clusters().collect();
        move |k: usize| clusters[k]
    };
    let mut k = 0;
    for (op, d) in ops.iter_mut().zip(&decoded) {
        let Some(d) = d else { continue };
        let cluster = cluster_of(k);
        k += 1;
        if d.passes == 0 {
            continue;
        }
        let ch = op.channels.expect("separable ops carry channels");
        let m_hint = channels0.and_then(|c0| {
            let ratio = ch / c0.max(1);
            (ch % c0.max(1) == 0 && ratio.is_power_of_two()).then(|| {
                let shift = ratio.trailing_zeros();
                (cfg.input_width.div_ceil(1 << shift) as u64)
                    * (cfg.input_height.div_ceil(1 << shift) as u64)
            })
        });
        let group = cluster.gemms.len() / d.passes;
        let dw = recover_dims(&cluster.gemms[0], profile, m_hint);
        let mut pwd = recover_dims(&cluster.gemms[group - 1], profile, m_hint);
        pwd.ranges.n = crate::machine::Range {
            lo: ch as u64 - 1,
            hi: ch as u64,
        };
        let dilated = op.class == OpClass::DilSepConv;
        if let Some(m) = pwd.m {
            let ratio = d.spans.iter().map(|s| s.0).sum::<f64>() / d.spans.len() as f64 / pw_ref;
            let cands: Vec<(u32, f64)> = cfg
                .kernels
                .iter()
                .map(|&kk| (kk, depthwise_ratio(kk, dilated, m, ch, profile)))
                .collect();
            op.kernel = kernel_size_from_timing(&cands, ratio, cfg.tie_band);
            op.timing_ratio = Some(ratio);
        }
        op.dims = vec![dw, pwd];
    }
    RecoveredWindow {
        index: window.index,
        start: window.start,
        phantom: window.phantom,
        ops,
    }
}

fn summarize(windows: &[RecoveredWindow], prologue: usize, epilogue: usize) -> MacroSummary {
    let mut blocks: Vec<BlockSummary> = Vec::new();
    let mut current: Option<u32> = None;
    for w in windows {
        let ch = w.channels();
        let new_block = match (current, ch) {
            (_, None) => blocks.is_empty(),
            (None, Some(_)) => blocks.is_empty(),
            (Some(c), Some(d)) => d > c,
        };
        if new_block {
            blocks.push(BlockSummary {
                channels: ch,
                windows: Vec::new(),
                similar: Vec::new(),
                distinct: Vec::new(),
            });
        }
        if ch.is_some() {
            current = ch;
        }
        let block = blocks.last_mut().expect("block exists");
        if block.channels.is_none() {
            block.channels = ch;
        }
        block.windows.push(w.index);
    }
    for b in &mut blocks {
        let sigs: Vec<_> = b.windows.iter().map(|&i| windows[i].signature()).collect();
        let majority = sigs
            .iter()
            .max_by_key(|s| sigs.iter().filter(|t| t == s).count())
            .cloned()
            .unwrap_or_default();
        for (&i, s) in b.windows.iter().zip(&sigs) {
            if *s == majority {
                b.similar.push(i);
            } else {
                b.distinct.push(i);
            }
        }
    }
    MacroSummary {
        windows: windows.len(),
        blocks,
        prologue_clusters: prologue,
        epilogue_clusters: epilogue,
    }
}

/// Full extraction pipeline.
pub fn analyze(
    trace: &Trace,
    profile: &MachineProfile,
    cfg: &AnalysisConfig,
) -> Result<RecoveredArchitecture> {
    let seg = segment(trace, profile)?;
    let first_pass: Vec<RecoveredWindow> = seg
        .windows
        .iter()
        .map(|w| classify_window(w, &seg, profile, cfg, None))
        .collect();
    let channels0 = first_pass
        .iter()
        .filter_map(RecoveredWindow::channels)
        .min();
    let windows: Vec<RecoveredWindow> = seg
        .windows
        .iter()
        .map(|w| classify_window(w, &seg, profile, cfg, channels0))
        .collect();
    let area = cfg.input_width as u64 * cfg.input_height as u64;
    let single = |c: &Cluster, hint: Option<u64>| {
        let mut op = decode_cluster(c, profile).op;
        if let (OpClass::NormalConvOrFc, Some(g)) = (op.class, c.gemms.first()) {
            op.dims = vec![recover_dims(g, profile, hint)];
        }
        op
    };
    let prologue: Vec<RecoveredOp> = seg.prologue.iter().map(|c| single(c, Some(area))).collect();
    let epilogue: Vec<RecoveredOp> = seg.epilogue.iter().map(|c| single(c, None)).collect();
    let macro_summary = summarize(&windows, prologue.len(), epilogue.len());
    Ok(RecoveredArchitecture {
        windows,
        prologue,
        epilogue,
        macro_summary,
        base_gap: seg.base_gap,
        op_threshold: seg.op_threshold,
        cell_threshold: seg.cell_threshold,
        framework_events: seg.framework_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::Range;
    use crate::nas::{CellSupernet, MacroParams, OperationKind};
    use crate::search::{mark, random_architecture, Strategy};
    use crate::trace::simulate;
    use crate::watermark::reference_key;
    use rand::{Rng, SeedableRng};

    fn prof() -> MachineProfile {
        MachineProfile::default()
    }

    fn run(arch: &crate::nas::Architecture, sigma: f64, seed: u64) -> RecoveredArchitecture {
        let t = simulate(arch, &prof(), seed, sigma).unwrap();
        analyze(&t, &prof(), &AnalysisConfig::default()).unwrap()
    }

    fn expected(op: &OperationKind) -> Option<(OpClass, u32)> {
        match *op {
            OperationKind::SepConv { kernel } => Some((OpClass::SepConv, kernel)),
            OperationKind::DilSepConv { kernel, .. } => Some((OpClass::DilSepConv, kernel)),
            _ => None,
        }
    }

    #[test]
    fn gemm_grammar() {
        let ev = |s: &str| -> Vec<TraceEvent> {
            s.chars()
                .enumerate()
                .map(|(i, c)| {
                    TraceEvent::new(
                        i as u64 * 10,
                        if c == 'I' { Api::Itcopy } else { Api::Oncopy },
                    )
                })
                .collect()
        };
        let (g, bad) = decode_gemms(&ev("IOOOIIIIOIO"));
        assert!(!bad);
        assert_eq!(g.len(), 3);
        assert_eq!((g[0].iter3, g[0].iter4), (3, 3));
        assert_eq!((g[1].iter3, g[1].iter4), (0, 1));
        let (g, _) = decode_gemms(&ev("IOIO"));
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].iter2, 2);
        assert!(decode_gemms(&ev("OOI")).1);
    }

    #[test]
    fn published_dims() {
        let g = Gemm {
            start: 0,
            last: 0,
            events: 13,
            iter2: 1,
            iter3: 3,
            iter4: 3,
        };
        let d = recover_dims(&g, &prof(), Some(1024));
        assert_eq!(d.ranges.m, Range { lo: 960, hi: 1280 });
        assert_eq!(d.m, Some(1024));
        assert!(!d.ranges.k_informative);
    }

    #[test]
    fn flat_trace_is_not_nas() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut t = 0u64;
        let events = (0..5000)
            .map(|_| {
                t += rng.random_range(1..100_000u64);
                TraceEvent::new(
                    t,
                    if rng.random_bool(0.5) {
                        Api::Itcopy
                    } else {
                        Api::Oncopy
                    },
                )
            })
            .collect();
        let trace = Trace {
            events,
            ..Trace::default()
        };
        assert!(matches!(
            analyze(&trace, &prof(), &AnalysisConfig::default()),
            Err(Error::NotNasModel(_))
        ));
        assert!(matches!(
            segment(&Trace::default(), &prof()),
            Err(Error::NotNasModel(_))
        ));
    }

    #[test]
    fn reference_normal_cell_window() {
        let mk = reference_key();
        let arch = mark(
            &mk,
            &CellSupernet::standard(),
            MacroParams::default(),
            Strategy::UniformRandom,
            11,
        )
        .unwrap();
        let rec = run(&arch, 0.0, 0);
        assert_eq!(rec.windows.len(), 20);
        assert_eq!(rec.prologue.len(), 3);
        assert_eq!(rec.epilogue.len(), 1);
        let ops: Vec<OperationKind> = arch.cells[0].ordered_ops();
        let visible: Vec<&RecoveredOp> = rec.windows[0]
            .ops
            .iter()
            .filter(|o| o.class != OpClass::GapOnly)
            .collect();
        let truth: Vec<&OperationKind> =
            ops.iter().filter(|o| **o != OperationKind::SKIP).collect();
        assert_eq!(visible.len(), truth.len());
        for (r, t) in visible.iter().zip(truth) {
            match expected(t) {
                Some((class, k)) => {
                    assert_eq!(r.class, class);
                    assert_eq!(r.kernel, KernelEstimate::Resolved(k));
                    assert_eq!(r.channels, Some(33));
                    assert_eq!(r.dims[1].m, Some(1024));
                }
                None => assert!(matches!(r.class, OpClass::Pool { .. })),
            }
        }
        let skips = ops.iter().filter(|o| **o == OperationKind::SKIP).count();
        let gaps = rec.windows[0]
            .ops
            .iter()
            .filter(|o| o.class == OpClass::GapOnly)
            .count();
        assert_eq!(gaps, skips);
    }

    #[test]
    fn macro_structure() {
        let arch =
            random_architecture(&CellSupernet::standard(), MacroParams::default(), 5).unwrap();
        let rec = run(&arch, 0.0, 0);
        assert_eq!(rec.macro_summary.similar_counts(), vec![6, 6, 6]);
        assert_eq!(rec.macro_summary.distinct_count(), 2);
        let noisy = run(&arch, 0.3, 9);
        assert_eq!(noisy.windows.len(), 20);
    }

    #[test]
    fn faithful_at_zero_noise() {
        for seed in 0..8 {
            let arch = random_architecture(&CellSupernet::standard(), MacroParams::default(), seed)
                .unwrap();
            let rec = run(&arch, 0.0, seed);
            assert_eq!(rec.windows.len(), arch.cells.len());
            for (w, cell) in rec.windows.iter().zip(&arch.cells) {
                let truth: Vec<OperationKind> = cell
                    .ordered_ops()
                    .into_iter()
                    .filter(|o| *o != OperationKind::SKIP)
                    .collect();
                let got: Vec<&RecoveredOp> = w
                    .ops
                    .iter()
                    .filter(|o| o.class != OpClass::GapOnly)
                    .collect();
                assert_eq!(got.len(), truth.len());
                for (g, t) in got.iter().zip(&truth) {
                    if let Some((class, k)) = expected(t) {
                        assert_eq!(
                            (g.class, g.kernel),
                            (class, KernelEstimate::Resolved(k)),
                            "seed {seed}"
                        );
                    }
                }
                let skips = cell
                    .ordered_ops()
                    .iter()
                    .filter(|o| **o == OperationKind::SKIP)
                    .count();
                // boundary gaps cannot tell trailing from leading skips; both sides get them
                assert!(
                    w.ops.len() - got.len() >= skips,
                    "seed {seed} window {} {:?} {:?}",
                    w.index,
                    cell.ordered_ops()
                        .iter()
                        .map(|o| o.to_string())
                        .collect::<Vec<_>>(),
                    w.ops.iter().map(|o| o.class).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn blas_only_pools_are_unknown() {
        let mk = reference_key();
        let arch = mark(
            &mk,
            &CellSupernet::standard(),
            MacroParams::default(),
            Strategy::UniformRandom,
            11,
        )
        .unwrap();
        let t = simulate(&arch, &prof(), 0, 0.0).unwrap().blas_only();
        let rec = analyze(&t, &prof(), &AnalysisConfig::default()).unwrap();
        assert!(!rec.framework_events);
        let ops: Vec<&RecoveredOp> = rec.windows.iter().flat_map(|w| &w.ops).collect();
        assert!(ops.iter().any(|o| o.class
            == OpClass::Pool {
                pool: PoolKind::Unknown
            }));
        assert!(ops.iter().all(|o| !matches!(
            o.class,
            OpClass::Pool {
                pool: PoolKind::Avg | PoolKind::Max
            }
        )));
    }
}
