//! Ownership verification: find the key's stamp sequences, in order, in the
//! operation sequences recovered from consecutive cell windows.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    analyze, AnalysisConfig, OpClass, PoolKind, RecoveredArchitecture, RecoveredOp,
};
use crate::error::{Error, Result};
use crate::machine::{KernelEstimate, MachineProfile};
use crate::nas::OperationKind;
use crate::trace::Trace;
use crate::watermark::VerificationKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SkipRule {
    /// A stamp skip matches without consuming anything.
    #[default]
    Lenient,
    /// A stamp skip must match a gap-only interval.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Expected stamp length; taken from the key when absent.
    pub n_s: Option<usize>,
    /// Tolerated failure probability under non-removal attacks.
    pub delta: f64,
    pub skip_rule: SkipRule,
    pub analysis: AnalysisConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            n_s: None,
            delta: 0.01,
            skip_rule: SkipRule::Lenient,
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMatch {
    pub window: usize,
    /// Key position the window was checked against.
    pub key_index: usize,
    /// Recovered-operation index matched by each stamp operation.
    pub matched: Vec<Option<usize>>,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub verdict: u8,
    pub verified_windows: usize,
    pub expected_windows: usize,
    pub windows: Vec<WindowMatch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub not_nas: Option<String>,
}

impl VerifyReport {
    pub fn verified(&self) -> bool {
        self.verdict == 1
    }
}

fn kernel_ok(estimate: KernelEstimate, kernel: u32) -> bool {
    match estimate {
        KernelEstimate::Resolved(k) => k == kernel,
        KernelEstimate::Unresolved => true,
    }
}

/// Whether a recovered operation can be the stamp operation.
pub fn match_op(
    op: &RecoveredOp,
    stamp: &OperationKind,
    framework_events: bool,
    rule: SkipRule,
) -> bool {
    match (*stamp, op.class) {
        (OperationKind::SepConv { kernel }, OpClass::SepConv) => kernel_ok(op.kernel, kernel),
        (OperationKind::DilSepConv { kernel, .. }, OpClass::DilSepConv) => {
            kernel_ok(op.kernel, kernel)
        }
        (OperationKind::AvgPool { .. }, OpClass::Pool { pool }) => {
            !framework_events || pool == PoolKind::Avg
        }
        (OperationKind::MaxPool { .. }, OpClass::Pool { pool }) => {
            !framework_events || pool == PoolKind::Max
        }
        (
            OperationKind::NormalConv { .. } | OperationKind::FullyConnected,
            OpClass::NormalConvOrFc,
        ) => true,
        (OperationKind::Skip, OpClass::GapOnly) => true,
        (OperationKind::Skip, _) => rule == SkipRule::Lenient,
        _ => false,
    }
}

/// Greedy in-order subsequence match of `stamp` against `ops`.
pub fn match_window(
    ops: &[RecoveredOp],
    stamp: &[OperationKind],
    framework_events: bool,
    rule: SkipRule,
) -> (bool, Vec<Option<usize>>) {
    let mut pos = 0;
    let mut matched = Vec::with_capacity(stamp.len());
    for s in stamp {
        if *s == OperationKind::SKIP && rule == SkipRule::Lenient {
            matched.push(None);
            continue;
        }
        match ops[pos..]
            .iter()
            .position(|o| match_op(o, s, framework_events, rule))
        {
            Some(off) => {
                matched.push(Some(pos + off));
                pos += off + 1;
            }
            None => return (false, matched),
        }
    }
    (true, matched)
}

/// Verification over an already recovered architecture.
pub fn verify_recovered(
    vk: &VerificationKey,
    rec: &RecoveredArchitecture,
    cfg: &VerifyConfig,
) -> Result<VerifyReport> {
    if let Some(n) = cfg.n_s.filter(|&n| n != vk.n_s) {
        return Err(Error::InvalidKey(format!(
            "config expects n_s = {n}, key has {}",
            vk.n_s
        )));
    }
    let expected = vk.expanded();
    let mut idx = 0;
    let mut windows = Vec::new();
    for w in &rec.windows {
        if idx == expected.len() {
            break;
        }
        let (ok, matched) =
            match_window(&w.ops, expected[idx], rec.framework_events, cfg.skip_rule);
        windows.push(WindowMatch {
            window: w.index,
            key_index: idx,
            matched,
            verified: ok,
        });
        if ok {
            idx += 1;
        }
    }
    Ok(VerifyReport {
        verdict: u8::from(idx == expected.len()),
        verified_windows: idx,
        expected_windows: expected.len(),
        windows,
        not_nas: None,
    })
}

/// Analyzes `trace` and checks it against `vk`.
pub fn verify(
    vk: &VerificationKey,
    trace: &Trace,
    profile: &MachineProfile,
    cfg: &VerifyConfig,
) -> Result<VerifyReport> {
    match analyze(trace, profile, &cfg.analysis) {
        Ok(rec) => verify_recovered(vk, &rec, cfg),
        Err(Error::NotNasModel(reason)) => Ok(VerifyReport {
            verdict: 0,
            verified_windows: 0,
            expected_windows: vk.size(),
            windows: Vec::new(),
            not_nas: Some(reason),
        }),
        Err(e) => Err(e),
    }
}
