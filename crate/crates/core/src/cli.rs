//! Command-line front end. Every run writes a manifest describing its flags,
//! seed, profile and the hashes of the files it read and wrote.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{analyze, AnalysisConfig};
use crate::attacks::{apply_attack, AttackKind, AttackSpec, Attacked};
use crate::error::{Error, Result};
use crate::machine::MachineProfile;
use crate::nas::{Architecture, MacroParams, OperationKind, TensorShape};
use crate::report::{gemm_durations, latencies, op_durations, render, timeline, Format};
use crate::search::{mark, random_architecture, Strategy};
use crate::trace::{write_atomic, Trace};
use crate::uniqueness::{monte_carlo, Sampler};
use crate::verify::{verify, SkipRule, VerifyConfig};
use crate::watermark::{wmgen, KeyMode, MarkingKey, SearchSpace, VerificationKey};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_VERIFIED: i32 = 1;
pub const EXIT_NOT_NAS: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;

#[derive(Debug, Parser)]
#[command(
    name = "archstamp",
    version,
    about = "Watermark NAS cell architectures and verify them from GEMM cache traces"
)]
pub struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Machine profile (JSON); defaults to the built-in profile.
    #[arg(long, global = true, env = "ARCHSTAMP_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Primary output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON report path; stdout when absent.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Manifest path; defaults to `<out or report>.manifest.json`, else stderr.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a marking key and its verification key (`<out>.mk.json`, `<out>.vk.json`).
    Genkey {
        #[arg(long = "ns", default_value_t = 4)]
        n_s: usize,
        /// Sample a separate stamp for every cell instead of one per cell type.
        #[arg(long)]
        per_cell: bool,
        #[command(flatten)]
        shape: MacroArgs,
    },
    /// Search an architecture that carries the key's stamps.
    Mark {
        #[arg(long)]
        key: Option<PathBuf>,
        /// Produce an unmarked random architecture instead.
        #[arg(long, conflicts_with = "key")]
        unmarked: bool,
        /// `uniform` or `greedy:N`.
        #[arg(long, default_value = "uniform", value_parser = parse_strategy)]
        strategy: Strategy,
        #[command(flatten)]
        shape: MacroArgs,
    },
    /// Simulate the cache trace of an (optionally attacked) architecture.
    Trace {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Apply a model-modification attack; the output feeds `trace --arch`.
    Attack {
        #[arg(long)]
        arch: PathBuf,
        /// shuffle, useless-op, useless-cell, prune:R, binarize, structured:N[:oracle], noise:S
        #[arg(long = "kind", alias = "attack", value_parser = parse_attack)]
        attack: AttackKind,
        /// Marking key, required for oracle structured pruning.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Recover the architecture from a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check a trace against a verification key.
    Verify {
        #[arg(long)]
        vk: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Require a gap-only interval for every stamped skip.
        #[arg(long)]
        strict_skip: bool,
    },
    /// Estimate the stamp collision probability of a key.
    Collide {
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// `uniform`, `greedy:N` or `marked`.
        #[arg(long, default_value = "uniform", value_parser = parse_sampler)]
        sampler: Sampler,
    },
    /// Emit plot data.
    Report {
        #[arg(long, value_enum)]
        kind: ReportKind,
        /// Trace to analyze (timeline and latency tables).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "csv", value_parser = parse_format)]
        format: Format,
        /// Input shape `WxHxC` for the GEMM table.
        #[arg(long, default_value = "32x32x33", value_parser = parse_shape)]
        shape: TensorShape,
        /// Operations for the GEMM table.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "sep_conv_3x3,sep_conv_5x5,dil_conv_3x3,dil_conv_5x5"
        )]
        ops: Vec<OperationKind>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    Timeline,
    Gemm,
    Ops,
    Latency,
}

#[derive(Debug, Clone, Args)]
pub struct MacroArgs {
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 6)]
    pub cells_per_block: usize,
    #[arg(long, default_value_t = 33)]
    pub channels: u32,
}

impl MacroArgs {
    fn params(&self) -> MacroParams {
        MacroParams {
            blocks: self.blocks,
            cells_per_block: self.cells_per_block,
            initial_channels: self.channels,
            ..MacroParams::default()
        }
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    match s.split_once(':') {
        None if s == "uniform" => Ok(Strategy::UniformRandom),
        Some(("greedy", n)) => n
            .parse()
            .map(|candidates| Strategy::GreedyMock { candidates })
            .map_err(|e| format!("bad candidate count: {e}")),
        _ => Err(format!("unknown strategy {s:?}")),
    }
}

fn parse_sampler(s: &str) -> std::result::Result<Sampler, String> {
    if s == "marked" {
        Ok(Sampler::Marked)
    } else {
        parse_strategy(s).map(Sampler::Search)
    }
}

fn parse_attack(s: &str) -> std::result::Result<AttackKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_shape(s: &str) -> std::result::Result<TensorShape, String> {
    let parts: Vec<u32> = s
        .split('x')
        .map(|p| {
            p.parse::<u32>()
                .map_err(|e| format!("bad shape {s:?}: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [w, h, c] if *w > 0 && *h > 0 && *c > 0 => Ok(TensorShape::new(*w, *h, *c)),
        _ => Err(format!(
            "shape must be WxHxC with positive entries, got {s:?}"
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub profile_fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub exit_code: i32,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

struct Run {
    profile: MachineProfile,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    stdout: Vec<u8>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String> {
        self.inputs.push(path.to_path_buf());
        Ok(std::fs::read_to_string(path)?)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes `text` to `path` when given, else to stdout.
    fn emit(&mut self, path: Option<&Path>, text: &str) -> Result<()> {
        match path {
            Some(p) => self.write(p, text.as_bytes()),
            None => {
                self.stdout.extend_from_slice(text.as_bytes());
                Ok(())
            }
        }
    }
}

fn require<'a>(path: Option<&'a PathBuf>, flag: &str) -> Result<&'a Path> {
    path.map(PathBuf::as_path)
        .ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_arch(text: &str) -> Result<Attacked> {
    if let Ok(a) = serde_json::from_str::<Attacked>(text) {
        return Ok(a);
    }
    Ok(Attacked::clean(Architecture::from_json(text)?))
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dispatch(cli: &Cli, run: &mut Run) -> Result<i32> {
    let seed = cli.seed;
    let space = SearchSpace::standard();
    match &cli.command {
        Command::Genkey {
            n_s,
            per_cell,
            shape,
        } => {
            let out = require(cli.out.as_ref(), "out")?;
            let space = SearchSpace {
                layout: crate::watermark::Layout::from_macro(&shape.params()),
                ..space
            };
            let mode = if *per_cell {
                KeyMode::PerCell
            } else {
                KeyMode::PerType
            };
            let (mk, vk) = wmgen(*n_s, &space, mode, seed)?;
            run.write(
                &with_suffix(out, ".mk.json"),
                (mk.to_json()? + "\n").as_bytes(),
            )?;
            run.write(
                &with_suffix(out, ".vk.json"),
                (vk.to_json()? + "\n").as_bytes(),
            )?;
        }
        Command::Mark {
            key,
            unmarked,
            strategy,
            shape,
        } => {
            let out = require(cli.out.as_ref(), "out")?;
            let arch = if *unmarked {
                random_architecture(&space.supernet, shape.params(), seed)?
            } else {
                let path = require(key.as_ref(), "key")?;
                let mk = MarkingKey::from_json(&run.read(path)?)?;
                mark(&mk, &space.supernet, shape.params(), *strategy, seed)?
            };
            run.write(out, (arch.to_json()? + "\n").as_bytes())?;
        }
        Command::Trace { arch, noise } => {
            let out = require(cli.out.as_ref(), "out")?;
            let model = load_arch(&run.read(arch)?)?;
            let trace = model.simulate(&run.profile, seed, *noise)?;
            run.write(out, trace.to_jsonl().as_bytes())?;
        }
        Command::Attack { arch, attack, key } => {
            let out = require(cli.out.as_ref(), "out")?;
            let model = load_arch(&run.read(arch)?)?;
            let mk = match key {
                Some(p) => Some(MarkingKey::from_json(&run.read(p)?)?),
                None => None,
            };
            let spec = AttackSpec {
                kind: *attack,
                seed,
            };
            let mut attacked = apply_attack(&model.arch, &spec, &run.profile, mk.as_ref())?;
            attacked.speedup *= model.speedup;
            attacked.noise = attacked.noise.max(model.noise);
            run.write(out, json(&attacked)?.as_bytes())?;
        }
        Command::Analyze { trace } => {
            let t: Trace = run.read(trace)?.parse()?;
            match analyze(&t, &run.profile, &AnalysisConfig::default()) {
                Ok(rec) => run.emit(cli.report.as_deref(), &json(&rec)?)?,
                Err(Error::NotNasModel(reason)) => {
                    run.emit(
                        cli.report.as_deref(),
                        &json(&serde_json::json!({ "not_nas": reason }))?,
                    )?;
                    return Ok(EXIT_NOT_NAS);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Verify {
            vk,
            trace,
            strict_skip,
        } => {
            let vk = VerificationKey::from_json(&run.read(vk)?)?;
            let t: Trace = run.read(trace)?.parse()?;
            let cfg = VerifyConfig {
                skip_rule: if *strict_skip {
                    SkipRule::Strict
                } else {
                    SkipRule::Lenient
                },
                ..VerifyConfig::default()
            };
            let report = verify(&vk, &t, &run.profile, &cfg)?;
            run.emit(cli.report.as_deref(), &json(&report)?)?;
            return Ok(match (report.verdict, &report.not_nas) {
                (1, _) => EXIT_OK,
                (_, Some(_)) => EXIT_NOT_NAS,
                _ => EXIT_NOT_VERIFIED,
            });
        }
        Command::Collide {
            key,
            trials,
            sampler,
        } => {
            let mk = MarkingKey::from_json(&run.read(key)?)?;
            let stats = monte_carlo(&space, &mk, *trials, seed, *sampler)?;
            run.emit(cli.report.as_deref(), &json(&stats)?)?;
        }
        Command::Report {
            kind,
            trace,
            format,
            shape,
            ops,
        } => {
            let text = match kind {
                ReportKind::Gemm => render(&gemm_durations(ops, shape, &run.profile)?, *format)?,
                ReportKind::Ops => render(
                    &op_durations(&gemm_durations(ops, shape, &run.profile)?),
                    *format,
                )?,
                ReportKind::Timeline | ReportKind::Latency => {
                    let t: Trace = run.read(require(trace.as_ref(), "trace")?)?.parse()?;
                    let rec = analyze(&t, &run.profile, &AnalysisConfig::default())?;
                    if *kind == ReportKind::Timeline {
                        render(&timeline(&rec), *format)?
                    } else {
                        render(&latencies(&rec), *format)?
                    }
                }
            };
            let path = cli.out.as_deref().or(cli.report.as_deref());
            run.emit(path, &text)?;
        }
    }
    Ok(EXIT_OK)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Genkey { .. } => "genkey",
        Command::Mark { .. } => "mark",
        Command::Trace { .. } => "trace",
        Command::Attack { .. } => "attack",
        Command::Analyze { .. } => "analyze",
        Command::Verify { .. } => "verify",
        Command::Collide { .. } => "collide",
        Command::Report { .. } => "report",
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::NotNasModel(_) => EXIT_NOT_NAS,
        _ => EXIT_DATA,
    }
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// Regular output goes to `stdout`; diagnostics and a default manifest to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(rendered.as_bytes())
            } else {
                stdout.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let profile = match &cli.profile {
        Some(p) => MachineProfile::load(p),
        None => Ok(MachineProfile::default()),
    };
    let profile = match profile {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: profile: {e}");
            return EXIT_DATA;
        }
    };
    let mut run = Run {
        profile,
        inputs: cli.profile.iter().cloned().collect(),
        outputs: Vec::new(),
        stdout: Vec::new(),
    };
    let code = match dispatch(&cli, &mut run) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return exit_code_for(&e);
        }
    };
    let _ = stdout.write_all(&run.stdout);
    let manifest = (|| -> Result<RunManifest> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand_name(&cli.command).into(),
            args: argv
                .iter()
                .skip(1)
                .map(|a| a.to_string_lossy().into_owned())
                .collect(),
            seed: cli.seed,
            profile_fingerprint: run.profile.fingerprint(),
            inputs: hashes(&run.inputs)?,
            outputs: hashes(&run.outputs)?,
            exit_code: code,
        })
    })();
    let manifest = match manifest.and_then(|m| json(&m)) {
        Ok(m) => m,
        Err(e) => {
            let _ = writeln!(stderr, "error: manifest: {e}");
            return EXIT_DATA;
        }
    };
    let target = cli.manifest.clone().or_else(|| {
        cli.out
            .as_deref()
            .or(cli.report.as_deref())
            .map(|p| with_suffix(p, ".manifest.json"))
    });
    match target {
        Some(p) => {
            if let Err(e) = write_atomic(&p, manifest.as_bytes()) {
                let _ = writeln!(stderr, "error: manifest: {e}");
                return EXIT_DATA;
            }
        }
        None => {
            let _ = stderr.write_all(manifest.as_bytes());
        }
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_and_shape_parsing() {
        assert_eq!(parse_strategy("uniform").unwrap(), Strategy::UniformRandom);
        assert_eq!(
            parse_strategy("greedy:8").unwrap(),
            Strategy::GreedyMock { candidates: 8 }
        );
        assert!(parse_strategy("greedy").is_err());
        assert_eq!(parse_sampler("marked").unwrap(), Sampler::Marked);
        assert_eq!(parse_shape("32x16x3").unwrap(), TensorShape::new(32, 16, 3));
        assert!(parse_shape("32x0x3").is_err());
    }

    #[test]
    fn usage_errors() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(
            run(["archstamp", "genkey", "--bogus"], &mut o, &mut e),
            EXIT_USAGE
        );
        assert!(String::from_utf8_lossy(&e).contains("--bogus"));
        assert_eq!(run(["archstamp", "genkey"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["archstamp", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
