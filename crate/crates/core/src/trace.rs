//! Simulated itcopy/oncopy access traces and their JSONL file format.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{conv_gemm, fc_gemm, op_to_gemms, plan, GemmPlan, MachineProfile};
use crate::nas::{
    propagate_shapes, Architecture, Cell, CellKind, ExecStep, Node, OperationKind, TensorShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Blas,
    Framework,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Api {
    Itcopy,
    Oncopy,
    PoolAvg,
    PoolMax,
}

impl Api {
    pub fn source(self) -> Source {
        match self {
            Api::Itcopy | Api::Oncopy => Source::Blas,
            Api::PoolAvg | Api::PoolMax => Source::Framework,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Api::Itcopy => 'I',
            Api::Oncopy => 'O',
            Api::PoolAvg => 'A',
            Api::PoolMax => 'M',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u64,
    pub src: Source,
    pub api: Api,
}

impl TraceEvent {
    pub fn new(t: u64, api: Api) -> Self {
        TraceEvent {
            t,
            src: api.source(),
            api,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TraceMeta {
    pub profile: String,
    pub seed: u64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> u64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }

    pub fn api_sequence(&self) -> String {
        self.events.iter().map(|e| e.api.symbol()).collect()
    }

    pub fn has_framework_events(&self) -> bool {
        self.events.iter().any(|e| e.src == Source::Framework)
    }

    /// The same trace as seen by a spy monitoring only the BLAS library.
    pub fn blas_only(&self) -> Trace {
        Trace {
            events: self
                .events
                .iter()
                .copied()
                .filter(|e| e.src == Source::Blas)
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Applies multiplicative N(1, sigma) noise to every inter-event interval.
    pub fn perturbed(&self, sigma: f64, seed: u64, granularity: u64) -> Result<Trace> {
        check_sigma(sigma)?;
        let Some(first) = self.events.first() else {
            return Ok(self.clone());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = NoiseSource::new(sigma)?;
        let mut clock = first.t as f64;
        let mut prev = first.t;
        let mut events = Vec::with_capacity(self.events.len());
        events.push(*first);
        for e in &self.events[1..] {
            clock += (e.t - prev) as f64 * noise.factor(&mut rng);
            prev = e.t;
            events.push(TraceEvent::new(quantize(clock, granularity), e.api));
        }
        Ok(Trace {
            events,
            meta: TraceMeta {
                noise: sigma,
                ..self.meta.clone()
            },
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            meta: self.meta.clone(),
        })
        .expect("meta serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Trace> {
        let mut trace = Trace::default();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::TraceParse {
                line: lineno,
                reason,
            };
            if trace.events.is_empty() && text.contains("\"meta\"") {
                let h: Header = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
                trace.meta = h.meta;
                continue;
            }
            let e: TraceEvent = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
            if e.src != e.api.source() {
                return Err(parse_err(format!(
                    "{:?} is not a {:?} function",
                    e.api, e.src
                )));
            }
            if trace.events.last().is_some_and(|p| p.t > e.t) {
                return Err(parse_err(format!("non-monotonic timestamp {}", e.t)));
            }
            trace.events.push(e);
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Trace> {
        Trace::from_reader(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

impl FromStr for Trace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Trace> {
        Trace::from_reader(s.as_bytes())
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_jsonl())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: TraceMeta,
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&sigma) {
        return Err(Error::InvalidAttack(format!(
            "noise sigma {sigma} outside [0, 0.5]"
        )));
    }
    Ok(())
}

fn quantize(t: f64, g: u64) -> u64 {
    (t / g as f64).round() as u64 * g
}

struct NoiseSource {
    dist: Option<Normal<f64>>,
}

impl NoiseSource {
    fn new(sigma: f64) -> Result<Self> {
        let dist = if sigma > 0.0 {
            Some(Normal::new(1.0, sigma).map_err(|e| Error::InvalidAttack(e.to_string()))?)
        } else {
            None
        };
        Ok(NoiseSource { dist })
    }

    fn factor(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        self.dist.map_or(1.0, |d| d.sample(rng).max(0.1))
    }
}

/// Event times (relative to `t0`) of one GEMM: per loop-2 iteration one
/// itcopy, `iter4` oncopy, then `iter3` itcopy, spread evenly over the call.
pub fn gemm_pattern(plan: &GemmPlan) -> Vec<Api> {
    let mut out = Vec::with_capacity(plan.event_count() as usize);
    for _ in 0..plan.iter2 {
        out.push(Api::Itcopy);
        out.extend(std::iter::repeat_n(Api::Oncopy, plan.iter4 as usize));
        out.extend(std::iter::repeat_n(Api::Itcopy, plan.iter3 as usize));
    }
    out
}

pub fn emit_gemm(plan: &GemmPlan, t0: u64, granularity: u64) -> Vec<TraceEvent> {
    let pattern = gemm_pattern(plan);
    let step = plan.duration / pattern.len() as f64;
    pattern
        .into_iter()
        .enumerate()
        .map(|(j, api)| TraceEvent::new(quantize(t0 as f64 + j as f64 * step, granularity), api))
        .collect()
}

/// Nominal timeline: each event carries the interval since the previous one.
#[derive(Default)]
struct Timeline {
    pending: f64,
    items: Vec<(f64, Api)>,
}

impl Timeline {
    fn wait(&mut self, dt: f64) {
        self.pending += dt;
    }

    fn event(&mut self, api: Api) {
        self.items.push((self.pending, api));
        self.pending = 0.0;
    }

    fn gemms(&mut self, plans: &[GemmPlan], sub_gap: f64) {
        for (i, p) in plans.iter().enumerate() {
            if i > 0 {
                self.wait(sub_gap);
            }
            let pattern = gemm_pattern(p);
            let step = p.duration / pattern.len() as f64;
            for api in pattern {
                self.event(api);
                self.wait(step);
            }
        }
    }
}

/// Input shape and stride an operation on `src` sees inside a cell whose
/// input shape is `input`.
pub fn op_geometry(kind: CellKind, src: Option<Node>, input: TensorShape) -> (TensorShape, u32) {
    match kind {
        CellKind::Normal => (input, 1),
        CellKind::Reduction => {
            let wide = TensorShape {
                channels: input.channels * 2,
                ..input
            };
            match src {
                Some(Node::InputA | Node::InputB) => (wide, 2),
                _ => (
                    TensorShape::new(
                        input.width.div_ceil(2),
                        input.height.div_ceil(2),
                        wide.channels,
                    ),
                    1,
                ),
            }
        }
    }
}

/// GEMM plans of every step of `cell`, in execution order.
pub fn cell_plans(
    cell: &Cell,
    input: TensorShape,
    profile: &MachineProfile,
) -> Result<Vec<(OperationKind, Vec<GemmPlan>)>> {
    cell.exec_order
        .iter()
        .map(|step| {
            let (op, src) = match *step {
                ExecStep::Edge(i) => (cell.edges[i].op, Some(cell.edges[i].edge.src)),
                ExecStep::Dead { dead } => (dead, None),
            };
            let (shape, stride) = op_geometry(cell.kind, src, input);
            let plans = op_to_gemms(&op, &shape, stride, profile)?
                .iter()
                .map(|c| plan(c, cell.duration_scale, profile))
                .collect();
            Ok((op, plans))
        })
        .collect()
}

/// Preprocessing convolutions of the stem, in order.
pub fn prologue_plans(arch: &Architecture, profile: &MachineProfile) -> Result<Vec<GemmPlan>> {
    let m = &arch.macro_params;
    let mut shape = TensorShape::new(m.input_width, m.input_height, m.input_channels);
    let mut out = Vec::new();
    for _ in 0..m.preprocessing {
        out.push(plan(
            &conv_gemm(3, &shape, m.initial_channels, 1)?,
            1.0,
            profile,
        ));
        shape.channels = m.initial_channels;
    }
    Ok(out)
}

pub fn classifier_plan(arch: &Architecture, profile: &MachineProfile) -> Result<GemmPlan> {
    let shapes = propagate_shapes(arch)?;
    let channels = match (arch.cells.last(), shapes.last()) {
        (Some(c), Some(s)) if c.kind == CellKind::Reduction => s.channels * 2,
        (_, Some(s)) => s.channels,
        _ => arch.macro_params.initial_channels,
    };
    let m = &arch.macro_params;
    Ok(plan(&fc_gemm(m.classes, channels, m.batch), 1.0, profile))
}

/// Simulates the inference trace of `arch`.
pub fn simulate(
    arch: &Architecture,
    profile: &MachineProfile,
    seed: u64,
    sigma: f64,
) -> Result<Trace> {
    check_sigma(sigma)?;
    profile.validate()?;
    let fingerprint = profile.fingerprint();
    let shapes = propagate_shapes(arch)?;
    let speedup = profile.speedup;
    // the timeline is built at unit speed and compressed once at the end
    let profile = &MachineProfile {
        speedup: 1.0,
        ..profile.clone()
    };
    let mut tl = Timeline::default();
    for p in prologue_plans(arch, profile)? {
        tl.wait(profile.base_gap);
        tl.gemms(&[p], profile.sub_gap);
    }
    for (cell, input) in arch.cells.iter().zip(shapes) {
        tl.wait(profile.cell_gap());
        let sub_gap = profile.sub_gap * cell.duration_scale;
        for (op, plans) in cell_plans(cell, input, profile)? {
            match op {
                OperationKind::AvgPool { .. } | OperationKind::MaxPool { .. } => {
                    let half = profile.pool_gap() / 2.0;
                    tl.wait(half);
                    tl.event(if matches!(op, OperationKind::AvgPool { .. }) {
                        Api::PoolAvg
                    } else {
                        Api::PoolMax
                    });
                    tl.wait(half);
                }
                _ => {
                    tl.wait(profile.base_gap);
                    tl.gemms(&plans, sub_gap);
                }
            }
        }
    }
    tl.wait(profile.cell_gap());
    tl.gemms(&[classifier_plan(arch, profile)?], profile.sub_gap);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = NoiseSource::new(sigma)?;
    let mut clock = 0.0;
    let g = profile.sample_granularity;
    let events = tl
        .items
        .into_iter()
        .map(|(dt, api)| {
            clock += dt * noise.factor(&mut rng) / speedup;
            TraceEvent::new(quantize(clock, g), api)
        })
        .collect();
    Ok(Trace {
        events,
        meta: TraceMeta {
            profile: fingerprint,
            seed,
            noise: sigma,
        },
    })
}
