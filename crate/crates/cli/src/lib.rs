//! `dvdlens` command line.
//!
//! Each subcommand loads its inputs, calls the library and emits a report.
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dvdlens::container::{is_container, list_containers, read_container, read_trace, write_trace, VQA_FILE};
use dvdlens::detector::{self, GridResult};
use dvdlens::report::{
    self, emit_report, AnalyzeOptions, DetectReport, DetectRow, Format, GridReport, Report, SynthReport, SynthRow,
};
use dvdlens::scoring::{self, PromptImageTally};
use dvdlens::synth;
use dvdlens::Trace;
use rayon::prelude::*;

use crate::config::{RunSettings, SynthFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dvdlens",
    version,
    about = "Concept dominance analysis on cross-attention traces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Settings file (TOML key/value pairs)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output format
    #[arg(long, global = true, default_value = "json", value_parser = ["json", "csv"])]
    pub format: String,
    /// Output file (stdout when omitted); for `synth`, the output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for corpus commands
    #[arg(long, global = true, env = "DVDLENS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// VQA tallies to DvD Scores, per-prompt summaries and benchmark verdicts
    Score {
        /// Score CSV (prompt_id,image_id,c1,c2,n) or a trace container with vqa.csv
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Focus profile, deviation and change series, and peak token of one trace
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the detector on a trace or on every trace in a directory
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold/layer grid on positive and negative corpora, or selection
    /// from a precomputed rate table given as --input
    Grid {
        #[arg(long, requires = "neg", conflicts_with = "input")]
        pos: Option<PathBuf>,
        #[arg(long, requires = "pos")]
        neg: Option<PathBuf>,
        /// Rate table CSV (threshold,selector,rate_pos,rate_neg)
        #[arg(long, required_unless_present = "pos")]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Label ablation records and aggregate outcome ratios
    #[command(name = "ablate-classify")]
    AblateClassify {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate synthetic trace containers
    Synth {
        /// Overrides the seed in the parameters file
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

/// A failure in the data rather than in the invocation.
#[derive(Debug)]
struct DataError(anyhow::Error);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for DataError {}

fn data<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| DataError(e).into())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is::<DataError>() { EXIT_DATA } else { EXIT_USAGE };
            let _ = writeln!(stderr, "error: {e:#}");
            code
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Score { common, .. }
        | Command::Analyze { common, .. }
        | Command::Detect { common, .. }
        | Command::Grid { common, .. }
        | Command::AblateClassify { common, .. }
        | Command::Synth { common, .. } => common,
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    let c = common(&cmd);
    let format: Format = c.format.parse().map_err(anyhow::Error::msg)?;
    let out = c.out.clone();
    let pool = thread_pool(c.threads)?;

    if let Command::Synth { seed, common } = &cmd {
        let Some(cfg) = &common.config else {
            bail!("synth needs --config with a [trace] or [corpus] table")
        };
        let Some(dir) = &out else { bail!("synth needs --out") };
        let mut file = data(SynthFile::load(cfg))?;
        if let Some(seed) = seed {
            file = file.with_seed(*seed);
        }
        let r = data(pool.install(|| synthesize(&file, dir)))?;
        return stdout.write_all(&render(&r, format)?).map_err(Into::into);
    }

    let settings = data(RunSettings::load(c.config.as_deref()))?;
    let bytes = match cmd {
        Command::Score { input, .. } => {
            let rows = data(load_score_rows(&input))?;
            let r = report::score_report(&rows, settings.dvd_threshold, settings.min_count, settings.boundary);
            render(&data(r.map_err(Into::into))?, format)?
        }
        Command::Analyze { input, .. } => {
            let trace = data(read_trace(&input).map_err(Into::into))?;
            let opts = AnalyzeOptions {
                step: settings.step,
                bin_size: settings.bin_size,
                focus: data(settings.focus())?,
                dominant_layers: settings.dominant_layers.clone(),
                dominated_layers: settings.dominated_layers.clone(),
            };
            let r = report::analyze_report(&input.display().to_string(), &trace, &opts);
            render(&data(r.map_err(Into::into))?, format)?
        }
        Command::Detect { input, .. } => {
            let focus = data(settings.focus())?;
            let cfg = settings.detector();
            let rows = data(pool.install(|| {
                load_corpus(&input)?
                    .par_iter()
                    .map(|(path, t)| {
                        let d = detector::detect(t, &cfg, focus)
                            .with_context(|| format!("detecting on {}", path.display()))?;
                        Ok(DetectRow::new(&path.display().to_string(), t, d))
                    })
                    .collect::<Result<Vec<_>>>()
            }))?;
            render(&DetectReport::new(cfg, rows), format)?
        }
        Command::Grid { pos, neg, input, .. } => {
            let grid = match (pos, neg, input) {
                (Some(pos), Some(neg), _) => {
                    let focus = data(settings.focus())?;
                    data(pool.install(|| -> Result<GridResult> {
                        let pos = traces_only(load_corpus(&pos)?);
                        let neg = traces_only(load_corpus(&neg)?);
                        Ok(detector::grid_eval(
                            &pos,
                            &neg,
                            &settings.thresholds,
                            &settings.selectors,
                            focus,
                        )?)
                    }))?
                }
                (_, _, Some(table)) => {
                    let file = data(open(&table))?;
                    data(detector::read_rate_table(file).with_context(|| format!("reading {}", table.display())))?
                }
                _ => bail!("grid needs --pos and --neg, or --input"),
            };
            render(&GridReport::new(grid), format)?
        }
        Command::AblateClassify { input, .. } => {
            let file = data(open(&input))?;
            let records =
                data(dvdlens::ablation::read_records(file).with_context(|| format!("reading {}", input.display())))?;
            render(&data(report::ablation_report(&records).map_err(Into::into))?, format)?
        }
        Command::Synth { .. } => unreachable!("handled above"),
    };
    match out {
        Some(p) => data(fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))),
        None => Ok(stdout.write_all(&bytes)?),
    }
}

fn render<R: Report>(r: &R, format: Format) -> Result<Vec<u8>> {
    data(emit_report(r, format).map_err(Into::into))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    if threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

/// Score rows from a CSV file, or from the `vqa.csv` of a container (the
/// container name becomes the prompt id).
fn load_score_rows(input: &Path) -> Result<Vec<PromptImageTally>> {
    if is_container(input) {
        let c = read_container(input)?;
        let Some(vqa) = c.vqa else {
            bail!("{} has no {}", input.display(), VQA_FILE)
        };
        let prompt_id = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vqa
            .into_iter()
            .map(|t| PromptImageTally {
                prompt_id: prompt_id.clone(),
                image_id: t.image_id,
                c1: t.c1,
                c2: t.c2,
                n: t.n,
            })
            .collect());
    }
    scoring::read_prompt_tallies(open(input)?).with_context(|| format!("reading {}", input.display()))
}

/// Every container under `path` (or `path` itself), loaded in parallel and
/// returned in name order.
fn load_corpus(path: &Path) -> Result<Vec<(PathBuf, Trace)>> {
    let paths = list_containers(path)?;
    if paths.is_empty() {
        bail!("no trace containers found in {}", path.display());
    }
    paths
        .into_par_iter()
        .map(|p| {
            let t = read_trace(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok((p, t))
        })
        .collect()
}

fn traces_only(v: Vec<(PathBuf, Trace)>) -> Vec<Trace> {
    v.into_iter().map(|(_, t)| t).collect()
}

fn synth_row(path: &Path, label: Option<&str>, t: &Trace) -> SynthRow {
    SynthRow {
        path: path.display().to_string(),
        label: label.map(str::to_owned),
        model_id: t.manifest.model_id.clone(),
        dominant_idx: t.token_map.dominant_idx,
        dominated_idx: t.token_map.dominated_idx,
    }
}

/// Writes one trace to `out`, or a corpus to `out/pos/NNNN` and `out/neg/NNNN`.
fn synthesize(file: &SynthFile, out: &Path) -> Result<SynthReport> {
    match file {
        SynthFile::Trace(p) => {
            let t = synth::gen_trace(p)?;
            write_trace(&t, out)?;
            Ok(SynthReport {
                written: vec![synth_row(out, None, &t)],
            })
        }
        SynthFile::Corpus(spec) => {
            let corpus = synth::gen_corpus(spec)?;
            let mut written = Vec::with_capacity(corpus.pos.len() + corpus.neg.len());
            for (label, traces) in [("pos", &corpus.pos), ("neg", &corpus.neg)] {
                let width = traces.len().to_string().len().max(4);
                let rows = traces
                    .par_iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let p = out.join(label).join(format!("{i:0width$}"));
                        write_trace(t, &p)?;
                        Ok(synth_row(&p, Some(label), t))
                    })
                    .collect::<Result<Vec<_>>>()?;
                written.extend(rows);
            }
            Ok(SynthReport { written })
        }
    }
}
