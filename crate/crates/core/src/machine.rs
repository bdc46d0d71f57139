//! Leakage model of a Goto-style blocked GEMM: how operation hyper-parameters
//! become matrix dimensions, loop iteration counts and durations, and how the
//! counts are turned back into dimension ranges.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nas::{OperationKind, TensorShape};

/// Host blocking constants and timing coefficients. Times are CPU cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineProfile {
    pub block_p: u64,
    pub block_q: u64,
    pub block_r: u64,
    pub unroll: u64,
    pub sample_granularity: u64,
    /// Cycles per scalar multiply-accumulate.
    pub kernel_cost: f64,
    /// Cycles per itcopy/oncopy call.
    pub copy_cost: f64,
    /// Latency between two operations of a cell.
    pub base_gap: f64,
    /// Latency between consecutive GEMMs of one operation.
    pub sub_gap: f64,
    pub pool_gap_factor: f64,
    pub cell_gap_factor: f64,
    /// Whole-timeline speedup; about 20 for binarized weights.
    pub speedup: f64,
    /// Compute multiplier for dilated depthwise GEMMs.
    pub dilation_speedup: f64,
    /// Pruning rate r scales compute by `1 - prune_slope * r`.
    pub prune_slope: f64,
    /// Overrides the derived operation-gap threshold (cycles).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op_gap_threshold: Option<f64>,
    /// Overrides the derived cell-gap threshold (cycles).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell_gap_threshold: Option<f64>,
}

impl Default for MachineProfile {
    fn default() -> Self {
        MachineProfile {
            block_p: 320,
            block_q: 320,
            block_r: 104_512,
            unroll: 4,
            sample_granularity: 2000,
            kernel_cost: 1.0,
            copy_cost: 50.0,
            base_gap: 1.0e8,
            sub_gap: 200.0,
            pool_gap_factor: 1.5,
            cell_gap_factor: 1000.0,
            speedup: 1.0,
            dilation_speedup: 0.84,
            prune_slope: 0.5,
            op_gap_threshold: None,
            cell_gap_threshold: None,
        }
    }
}

impl MachineProfile {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.block_p,
            self.block_q,
            self.block_r,
            self.unroll,
            self.sample_granularity,
        ];
        let reals = [
            self.kernel_cost,
            self.copy_cost,
            self.base_gap,
            self.sub_gap,
            self.pool_gap_factor,
            self.cell_gap_factor,
            self.speedup,
            self.dilation_speedup,
        ];
        if ints.contains(&0) || reals.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidProfile(
                "all blocking and timing constants must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.prune_slope) {
            return Err(Error::InvalidProfile(
                "prune_slope must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: MachineProfile = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    /// Short stable hash of the profile, recorded in trace headers.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("profile serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn binarized(&self) -> Self {
        MachineProfile {
            speedup: 20.0,
            ..self.clone()
        }
    }

    /// Cell-level timing multiplier for a weight-pruning rate.
    pub fn prune_scale(&self, rate: f64) -> f64 {
        1.0 - self.prune_slope * rate.clamp(0.0, 1.0)
    }

    pub fn cell_gap(&self) -> f64 {
        self.cell_gap_factor * self.base_gap
    }

    pub fn pool_gap(&self) -> f64 {
        self.pool_gap_factor * self.base_gap
    }

    /// Gaps at or above this split operations (at unit speed).
    pub fn op_threshold(&self) -> f64 {
        self.op_gap_threshold.unwrap_or(0.05 * self.base_gap)
    }

    /// Gaps at or above this split cells (at unit speed). Geometric mean of the
    /// operation and cell latencies.
    pub fn cell_threshold(&self) -> f64 {
        self.cell_gap_threshold
            .unwrap_or(self.base_gap * self.cell_gap_factor.sqrt())
    }

    pub fn patch_quantum(&self) -> u64 {
        3 * self.unroll
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmDims {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmDims {
    pub fn new(m: u64, n: u64, k: u64) -> Self {
        GemmDims { m, n, k }
    }

    pub fn macs(&self) -> u64 {
        self.m * self.n * self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GemmRole {
    Depthwise,
    Pointwise,
    Normal,
    Fc,
}

/// One GEMM call issued by an operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmCall {
    pub dims: GemmDims,
    pub role: GemmRole,
    /// Multiplier on compute cycles (padding zeros make dilated kernels cheaper).
    pub compute_scale: f64,
}

impl GemmCall {
    fn new(dims: GemmDims, role: GemmRole) -> Self {
        GemmCall {
            dims,
            role,
            compute_scale: 1.0,
        }
    }
}

/// Loop iteration counts and duration of one GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmPlan {
    pub dims: GemmDims,
    pub iter2: u64,
    pub iter3: u64,
    pub iter4: u64,
    pub duration: f64,
}

impl GemmPlan {
    pub fn itcopy_calls(&self) -> u64 {
        self.iter2 * (1 + self.iter3)
    }

    pub fn oncopy_calls(&self) -> u64 {
        self.iter2 * self.iter4
    }

    pub fn event_count(&self) -> u64 {
        self.itcopy_calls() + self.oncopy_calls()
    }
}

/// Plans `call`; `scale` multiplies compute time (weight pruning).
pub fn plan(call: &GemmCall, scale: f64, profile: &MachineProfile) -> GemmPlan {
    let d = call.dims;
    let iter2 = d.k.div_ceil(profile.block_q);
    let iter3 =
        d.m.saturating_sub(profile.block_p)
            .div_ceil(profile.block_p);
    let iter4 = d.n.min(profile.block_r).div_ceil(profile.patch_quantum());
    let copies = (iter2 * (1 + iter3) + iter2 * iter4) as f64;
    let compute = profile.kernel_cost * d.macs() as f64 * call.compute_scale * scale;
    let duration = (compute + profile.copy_cost * copies) / profile.speedup;
    GemmPlan {
        dims: d,
        iter2,
        iter3,
        iter4,
        duration,
    }
}

pub fn plan_dims(dims: GemmDims, profile: &MachineProfile) -> GemmPlan {
    plan(&GemmCall::new(dims, GemmRole::Normal), 1.0, profile)
}

fn out_area(input: &TensorShape, stride: u32) -> u64 {
    input.width.div_ceil(stride) as u64 * input.height.div_ceil(stride) as u64
}

fn check_extent(kernel: u32, input: &TensorShape, stride: u32) -> Result<()> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidShape(format!(
            "stride {stride} not in {{1,2}}"
        )));
    }
    if input.width == 0 || input.height == 0 || input.channels == 0 {
        return Err(Error::InvalidShape("empty input tensor".into()));
    }
    if kernel > input.width || kernel > input.height {
        return Err(Error::InvalidShape(format!(
            "kernel {kernel} larger than {}x{} input",
            input.width, input.height
        )));
    }
    Ok(())
}

/// Normal convolution with size-preserving padding.
pub fn conv_gemm(
    kernel: u32,
    input: &TensorShape,
    out_channels: u32,
    stride: u32,
) -> Result<GemmCall> {
    check_extent(kernel, input, stride)?;
    let dims = GemmDims::new(
        out_area(input, stride),
        out_channels as u64,
        (kernel * kernel) as u64 * input.channels as u64,
    );
    Ok(GemmCall::new(dims, GemmRole::Normal))
}

pub fn fc_gemm(neurons: u32, inputs: u32, batch: u32) -> GemmCall {
    GemmCall::new(
        GemmDims::new(neurons as u64, batch as u64, inputs as u64),
        GemmRole::Fc,
    )
}

/// One separable step: `D` depthwise GEMMs then one pointwise GEMM.
fn separable_pass(kernel: u32, m: u64, channels: u32, compute_scale: f64) -> Vec<GemmCall> {
    let dw = GemmCall {
        dims: GemmDims::new(m, 1, (kernel * kernel) as u64),
        role: GemmRole::Depthwise,
        compute_scale,
    };
    let mut out = vec![dw; channels as usize];
    out.push(GemmCall::new(
        GemmDims::new(m, channels as u64, channels as u64),
        GemmRole::Pointwise,
    ));
    out
}

/// GEMM calls an operation issues, in order. `input.channels` is the
/// operation's working channel count; output channels equal input channels.
pub fn op_to_gemms(
    op: &OperationKind,
    input: &TensorShape,
    stride: u32,
    profile: &MachineProfile,
) -> Result<Vec<GemmCall>> {
    op.validate()?;
    match *op {
        OperationKind::Skip | OperationKind::AvgPool { .. } | OperationKind::MaxPool { .. } => {
            check_extent(1, input, stride)?;
            Ok(Vec::new())
        }
        OperationKind::SepConv { kernel } => {
            check_extent(kernel, input, stride)?;
            let mut out = separable_pass(kernel, out_area(input, stride), input.channels, 1.0);
            // the second application always runs at stride 1 on the output grid
            out.extend(separable_pass(
                kernel,
                out_area(input, stride),
                input.channels,
                1.0,
            ));
            Ok(out)
        }
        OperationKind::DilSepConv { kernel, .. } => {
            check_extent(kernel, input, stride)?;
            Ok(separable_pass(
                kernel,
                out_area(input, stride),
                input.channels,
                profile.dilation_speedup,
            ))
        }
        OperationKind::NormalConv { kernel } => {
            Ok(vec![conv_gemm(kernel, input, input.channels, stride)?])
        }
        OperationKind::FullyConnected => Ok(vec![fc_gemm(
            input.channels,
            (input.area() * input.channels as u64) as u32,
            1,
        )]),
    }
}

/// Effective receptive extent of a dilated kernel.
pub fn effective_kernel(kernel: u32, dilation: u32) -> u32 {
    kernel + dilation * (kernel - 1)
}

/// Half-open interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub lo: u64,
    pub hi: u64,
}

impl Range {
    pub fn contains(&self, v: u64) -> bool {
        v > self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimRanges {
    pub m: Range,
    pub n: Range,
    pub k: Range,
    /// A single loop-2 pass says nothing beyond `k <= Q`.
    pub k_informative: bool,
}

impl DimRanges {
    pub fn contains(&self, d: &GemmDims) -> bool {
        self.m.contains(d.m) && self.n.contains(d.n) && self.k.contains(d.k)
    }
}

pub fn invert_iterations(
    iter2: u64,
    iter3: u64,
    iter4: u64,
    profile: &MachineProfile,
) -> DimRanges {
    let (p, q, u) = (profile.block_p, profile.block_q, profile.patch_quantum());
    DimRanges {
        m: Range {
            lo: iter3 * p,
            hi: (iter3 + 1) * p,
        },
        n: Range {
            lo: iter4.saturating_sub(1) * u,
            hi: iter4.max(1) * u,
        },
        k: Range {
            lo: iter2.saturating_sub(1) * q,
            hi: iter2.max(1) * q,
        },
        k_informative: iter2 > 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "kernel")]
pub enum KernelEstimate {
    Resolved(u32),
    Unresolved,
}

/// Nearest-candidate classification. Observations whose distances to the two
/// closest candidates differ by less than `tie_band` of their separation stay
/// unresolved.
pub fn kernel_size_from_timing(
    candidates: &[(u32, f64)],
    observed: f64,
    tie_band: f64,
) -> KernelEstimate {
    let mut ranked: Vec<(u32, f64, f64)> = candidates
        .iter()
        .map(|&(k, v)| (k, v, (observed - v).abs()))
        .collect();
    ranked.sort_by(|a, b| a.2.total_cmp(&b.2));
    match ranked.as_slice() {
        [] => KernelEstimate::Unresolved,
        [only] => KernelEstimate::Resolved(only.0),
        [best, second, ..] => {
            let sep = (best.1 - second.1).abs();
            if sep == 0.0 || (second.2 - best.2) <= tie_band * sep {
                KernelEstimate::Unresolved
            } else {
                KernelEstimate::Resolved(best.0)
            }
        }
    }
}

/// Expected span of one depthwise group measured from its first event to the
/// first event of the following pointwise GEMM, divided by the pointwise GEMM's
/// own first-to-last event span. Independent of speedup and pruning scale.
pub fn depthwise_ratio(
    kernel: u32,
    dilated: bool,
    m: u64,
    channels: u32,
    profile: &MachineProfile,
) -> f64 {
    let scale = if dilated {
        profile.dilation_speedup
    } else {
        1.0
    };
    let pass = separable_pass(kernel, m, channels, scale);
    let dw = plan(&pass[0], 1.0, profile);
    let pw = plan(pass.last().expect("pointwise"), 1.0, profile);
    let dw_span = channels as f64 * (dw.duration + profile.sub_gap / profile.speedup);
    let events = pw.event_count() as f64;
    let pw_span = pw.duration * (events - 1.0) / events;
    dw_span / pw_span
}
