//! Plot data: cluster timelines, GEMM duration tables and inter-operation
//! latency tables, as CSV or JSON.

use serde::Serialize;

use crate::analysis::{OpClass, PoolKind, RecoveredArchitecture, RecoveredOp};
use crate::error::{Error, Result};
use crate::machine::{op_to_gemms, plan, GemmRole, KernelEstimate, MachineProfile};
use crate::nas::{OperationKind, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Prologue,
    Cell,
    Epilogue,
}

pub fn class_label(class: OpClass) -> &'static str {
    match class {
        OpClass::SepConv => "sc",
        OpClass::DilSepConv => "ds",
        OpClass::NormalConvOrFc => "conv_fc",
        OpClass::Pool {
            pool: PoolKind::Avg,
        } => "pool_avg",
        OpClass::Pool {
            pool: PoolKind::Max,
        } => "pool_max",
        OpClass::Pool {
            pool: PoolKind::Unknown,
        } => "pool",
        OpClass::GapOnly => "gap",
        OpClass::Unknown => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineRow {
    pub cluster: usize,
    pub section: Section,
    pub window: Option<usize>,
    pub start: u64,
    pub duration: u64,
    pub class: &'static str,
    pub kernel: Option<u32>,
    pub channels: Option<u32>,
}

fn kernel_of(op: &RecoveredOp) -> Option<u32> {
    match op.kernel {
        KernelEstimate::Resolved(k) => Some(k),
        KernelEstimate::Unresolved => None,
    }
}

/// One row per recovered operation in trace order.
pub fn timeline(rec: &RecoveredArchitecture) -> Vec<TimelineRow> {
    let mut rows = Vec::new();
    let mut push = |section, window, op: &RecoveredOp| {
        rows.push(TimelineRow {
            cluster: rows.len(),
            section,
            window,
            start: op.start,
            duration: op.duration,
            class: class_label(op.class),
            kernel: kernel_of(op),
            channels: op.channels,
        });
    };
    rec.prologue
        .iter()
        .for_each(|op| push(Section::Prologue, None, op));
    for w in &rec.windows {
        w.ops
            .iter()
            .for_each(|op| push(Section::Cell, Some(w.index), op));
    }
    rec.epilogue
        .iter()
        .for_each(|op| push(Section::Epilogue, None, op));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GemmDurationRow {
    pub op: String,
    pub kernel: Option<u32>,
    pub gemm: usize,
    pub role: GemmRole,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub iter2: u64,
    pub iter3: u64,
    pub iter4: u64,
    pub events: u64,
    pub duration: f64,
}

/// Modelled GEMM calls and durations of each operation on `input`.
pub fn gemm_durations(
    ops: &[OperationKind],
    input: &TensorShape,
    profile: &MachineProfile,
) -> Result<Vec<GemmDurationRow>> {
    let mut rows = Vec::new();
    for op in ops {
        for (i, call) in op_to_gemms(op, input, 1, profile)?.iter().enumerate() {
            let p = plan(call, 1.0, profile);
            rows.push(GemmDurationRow {
                op: op.to_string(),
                kernel: op.kernel(),
                gemm: i,
                role: call.role,
                m: p.dims.m,
                n: p.dims.n,
                k: p.dims.k,
                iter2: p.iter2,
                iter3: p.iter3,
                iter4: p.iter4,
                events: p.event_count(),
                duration: p.duration,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpDurationRow {
    pub op: String,
    pub gemms: usize,
    pub duration: f64,
}

/// Per-operation totals of [`gemm_durations`].
pub fn op_durations(rows: &[GemmDurationRow]) -> Vec<OpDurationRow> {
    let mut out: Vec<OpDurationRow> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.op == r.op && r.gemm > 0 => {
                last.gemms += 1;
                last.duration += r.duration;
            }
            _ => out.push(OpDurationRow {
                op: r.op.clone(),
                gemms: 1,
                duration: r.duration,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub window: usize,
    /// Timeline cluster index the gap follows.
    pub after: usize,
    pub gap: u64,
    /// Classes of the gap-only operations between the two clusters.
    pub between: String,
    /// `gap / base_gap`.
    pub ratio: f64,
    /// Latency beyond one base gap, in base gaps.
    pub excess: f64,
}

/// Gaps between consecutive GEMM-bearing operations inside each cell window.
pub fn latencies(rec: &RecoveredArchitecture) -> Vec<LatencyRow> {
    let rows = timeline(rec);
    let mut out = Vec::new();
    let gemm_bearing = |r: &TimelineRow| matches!(r.class, "sc" | "ds" | "conv_fc" | "unknown");
    for w in &rec.windows {
        let cell: Vec<&TimelineRow> = rows.iter().filter(|r| r.window == Some(w.index)).collect();
        let mut prev: Option<&TimelineRow> = None;
        let mut between = Vec::new();
        for r in cell {
            if !gemm_bearing(r) {
                between.push(r.class);
                continue;
            }
            if let Some(p) = prev {
                let gap = r.start.saturating_sub(p.start + p.duration);
                let ratio = gap as f64 / rec.base_gap;
                out.push(LatencyRow {
                    window: w.index,
                    after: p.cluster,
                    gap,
                    between: if between.is_empty() {
                        "-".into()
                    } else {
                        between.join("+")
                    },
                    ratio,
                    excess: ratio - 1.0,
                });
            }
            between.clear();
            prev = Some(r);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Usage(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render<T: Serialize>(rows: &[T], format: Format) -> Result<String> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, AnalysisConfig};
    use crate::nas::{Cell, CellKind, ChosenEdge, Node};
    use crate::nas::{CellSupernet, MacroParams};
    use crate::search::random_architecture;
    use crate::trace::simulate;

    #[test]
    fn five_by_five_is_slower() {
        let p = MachineProfile::default();
        let shape = TensorShape::new(32, 32, 33);
        let rows =
            gemm_durations(&[OperationKind::SEP_3, OperationKind::SEP_5], &shape, &p).unwrap();
        let ops = op_durations(&rows);
        assert_eq!(ops.len(), 2);
        assert_eq!(ops[0].gemms, 2 * 34);
        assert!(ops[1].duration > ops[0].duration);
        let dw3 = rows
            .iter()
            .find(|r| r.kernel == Some(3) && r.role == GemmRole::Depthwise)
            .unwrap();
        let dw5 = rows
            .iter()
            .find(|r| r.kernel == Some(5) && r.role == GemmRole::Depthwise)
            .unwrap();
        assert_eq!((dw3.k, dw5.k), (9, 25));
    }

    fn pool_arch() -> crate::nas::Architecture {
        let mut arch =
            random_architecture(&CellSupernet::standard(), MacroParams::default(), 1).unwrap();
        let edges = vec![
            ChosenEdge::new(Node::InputA, 0, OperationKind::SEP_3),
            ChosenEdge::new(Node::InputB, 0, OperationKind::SEP_3),
            ChosenEdge::new(Node::InputA, 1, OperationKind::AVG_3),
            ChosenEdge::new(Node::Inner(0), 1, OperationKind::SEP_3),
            ChosenEdge::new(Node::InputA, 2, OperationKind::SEP_5),
            ChosenEdge::new(Node::Inner(1), 2, OperationKind::SEP_3),
            ChosenEdge::new(Node::InputB, 3, OperationKind::SEP_3),
            ChosenEdge::new(Node::Inner(2), 3, OperationKind::SEP_3),
        ];
        for c in arch.cells.iter_mut().filter(|c| c.kind == CellKind::Normal) {
            *c = Cell::new(CellKind::Normal, edges.clone());
        }
        arch
    }

    #[test]
    fn pooling_adds_half_again_a_base_gap() {
        let p = MachineProfile::default();
        let arch = pool_arch();
        let rec = analyze(
            &simulate(&arch, &p, 0, 0.0).unwrap(),
            &p,
            &AnalysisConfig::default(),
        )
        .unwrap();
        let lat = latencies(&rec);
        let pooled: Vec<_> = lat
            .iter()
            .filter(|r| r.between.starts_with("pool"))
            .collect();
        let direct: Vec<_> = lat.iter().filter(|r| r.between == "-").collect();
        assert!(!pooled.is_empty() && !direct.is_empty());
        for r in &pooled {
            assert!((r.excess - p.pool_gap_factor).abs() < 0.1, "{r:?}");
        }
        for r in &direct {
            assert!(r.excess.abs() < 0.1, "{r:?}");
        }
    }

    #[test]
    fn timeline_is_ordered_and_csv_has_header() {
        let p = MachineProfile::default();
        let arch = pool_arch();
        let rec = analyze(
            &simulate(&arch, &p, 0, 0.0).unwrap(),
            &p,
            &AnalysisConfig::default(),
        )
        .unwrap();
        let rows = timeline(&rec);
        assert!(rows.windows(2).all(|w| w[0].start <= w[1].start));
        assert!(rows.iter().enumerate().all(|(i, r)| r.cluster == i));
        let csv = render(&rows, Format::Csv).unwrap();
        assert!(csv.starts_with("cluster,section,window,start,duration,class,kernel,channels\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }
}
