//! `power-attn`: dimension tables, correctness checks, benchmarks and FLOP reports.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage or config error, 3 state
//! over the memory budget.

mod lists;
mod output;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use power_attention::bench::{run_bench, BenchConfig, Dtype, Form, MechanismKind};
use power_attention::check::{equiv, run_checks, CheckConfig};
use power_attention::flops::{wsfr, ArchSpec, FlopReport};
use power_attention::report::dim_table;
use power_attention::{Error, ExpansionKind, ExpansionSpec, Mechanism};

use lists::{parse_u32s, parse_usizes, parse_words};
use output::{emit, Format};

#[derive(Parser)]
#[command(name = "power-attn", version, about = "Power attention reference implementation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// State dimensions of the tensor, symmetric and tiled symmetric expansions.
    Dim(Shared),
    /// Equivalence, gradient, log-space, discumsum and streaming suites.
    Check {
        #[command(flatten)]
        shared: Shared,
        /// Seeded instances per test.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Times the attention, recurrent and chunked forms over t and chunk sweeps.
    Bench {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        mech: MechArgs,
        /// Forms to time: attention, recurrent, chunked.
        #[arg(long, default_value = "attention,chunked")]
        form: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Weight-to-state FLOP ratios for a model preset.
    Flops {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        mech: MechArgs,
        /// gpt2-small, gpt2-medium or gpt2-large.
        #[arg(long, default_value = "gpt2-small")]
        arch: String,
    },
    /// One comparison of the three forms, printing max abs/rel error.
    Equiv(Shared),
}

/// Flags shared by every subcommand. List flags take `2`, `2,4`, `2..6` or `1e6`.
#[derive(Args, Clone)]
struct Shared {
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    d: Option<String>,
    /// Value dimension; defaults to d.
    #[arg(long)]
    v: Option<usize>,
    #[arg(long)]
    dtile: Option<usize>,
    /// tpow, spow or tspow.
    #[arg(long, default_value = "spow")]
    kind: ExpansionKind,
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    chunk: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value = "f64")]
    dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    gating: bool,
    /// Score scale applied to Q; defaults to 1/sqrt(d).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args, Clone)]
struct MechArgs {
    /// Comma list of power, linear, exp, window.
    #[arg(long)]
    mechanism: Option<String>,
    /// Window size for the window mechanism.
    #[arg(long, default_value_t = 8192)]
    w: usize,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Io(io::Error),
    Check(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

type Outcome = Result<(), Failure>;

fn list<T>(flag: &str, value: &Option<String>, default: &str, parse: fn(&str) -> Result<Vec<T>, String>) -> Result<Vec<T>, Failure> {
    parse(value.as_deref().unwrap_or(default)).map_err(|e| Failure::Usage(format!("--{flag}: {e}")))
}

impl Shared {
    fn writer(&self) -> Result<Box<dyn Write>, Failure> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(File::create(path)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn format(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }

    /// Cartesian product of the `p`, `d`, `t` and `chunk` lists as check configs.
    fn check_configs(&self, instances: usize) -> Result<Vec<CheckConfig>, Failure> {
        let base = CheckConfig::default();
        let ps = list("p", &self.p, "2", parse_u32s)?;
        let ds = list("d", &self.d, &base.d.to_string(), parse_usizes)?;
        let ts = list("t", &self.t, &base.t.to_string(), parse_usizes)?;
        let cs = list("chunk", &self.chunk, &base.c.to_string(), parse_usizes)?;
        let mut out = Vec::new();
        for &p in &ps {
            for &d in &ds {
                for &t in &ts {
                    for &c in &cs {
                        out.push(CheckConfig {
                            kind: self.kind,
                            p,
                            d,
                            v: self.v.unwrap_or(d),
                            d_tile: self.dtile.unwrap_or(base.d_tile),
                            t,
                            c,
                            h: self.heads.unwrap_or(base.h),
                            b: self.batch.unwrap_or(base.b),
                            dtype: self.dtype,
                            seed: self.seed,
                            instances,
                            normalize: self.normalize,
                            gating: self.gating,
                            scale: self.scale,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

fn cmd_dim(s: &Shared) -> Outcome {
    let ds = list("d", &s.d, "64", parse_usizes)?;
    let ps = list("p", &s.p, "2..6", parse_u32s)?;
    let rows = dim_table(&ds, &ps, s.dtile)?;
    let opt = |x: Option<u64>| x.map(|x| x.to_string()).unwrap_or_default();
    emit(&mut s.writer()?, s.format(Format::Table), &rows, &["d", "p", "d_tile", "tpow", "spow", "tspow", "savings"], |r| {
        vec![
            r.d.to_string(),
            r.p.to_string(),
            r.d_tile.map(|x| x.to_string()).unwrap_or_default(),
            r.tpow.to_string(),
            r.spow.to_string(),
            opt(r.tspow),
            r.spow_savings.clone(),
        ]
    })?;
    Ok(())
}

fn cmd_check(s: &Shared, instances: usize) -> Outcome {
    let configs = s.check_configs(instances)?;
    for c in &configs {
        c.validate()?;
    }
    let mut records = Vec::new();
    for c in &configs {
        records.extend(run_checks(c)?);
    }
    emit(&mut s.writer()?, s.format(Format::Json), &records, &["suite", "test", "seed", "error", "tol", "pass"], |r| {
        vec![r.suite.clone(), r.test.clone(), r.seed.to_string(), format!("{:.3e}", r.error), format!("{:.0e}", r.tol), r.pass.to_string()]
    })?;
    let failed: Vec<_> = records.iter().filter(|r| !r.pass).collect();
    for r in &failed {
        eprintln!("FAIL {}/{} seed={} error={:e} tol={:e} [{}]", r.suite, r.test, r.seed, r.error, r.tol, r.params);
    }
    if failed.is_empty() {
        eprintln!("{} checks passed", records.len());
        Ok(())
    } else {
        Err(Failure::Check(failed.len()))
    }
}

fn cmd_equiv(s: &Shared) -> Outcome {
    let mut rows = Vec::new();
    for c in s.check_configs(1)? {
        rows.extend(equiv(&c)?.into_iter().map(|r| (c.p, c.d, c.t, c.c, r)));
    }
    #[derive(serde::Serialize)]
    struct Row {
        p: u32,
        d: usize,
        t: usize,
        c: usize,
        pair: String,
        max_abs: f64,
        max_rel: f64,
    }
    let rows: Vec<Row> = rows
        .into_iter()
        .map(|(p, d, t, c, r)| Row { p, d, t, c, pair: r.pair, max_abs: r.max_abs, max_rel: r.max_rel })
        .collect();
    emit(&mut s.writer()?, s.format(Format::Table), &rows, &["p", "d", "t", "c", "pair", "max_abs", "max_rel"], |r| {
        vec![
            r.p.to_string(),
            r.d.to_string(),
            r.t.to_string(),
            r.c.to_string(),
            r.pair.clone(),
            format!("{:.3e}", r.max_abs),
            format!("{:.3e}", r.max_rel),
        ]
    })?;
    Ok(())
}

fn mechanisms(m: &MechArgs, default: &str) -> Result<Vec<MechanismKind>, Failure> {
    list("mechanism", &m.mechanism, default, parse_words::<MechanismKind>)
}

fn cmd_bench(s: &Shared, m: &MechArgs, forms: &str, repeats: usize, warmup: usize, threads: usize) -> Outcome {
    let forms: Vec<Form> = parse_words(forms).map_err(|e| Failure::Usage(format!("--form: {e}")))?;
    let base = BenchConfig::default();
    let ps = list("p", &s.p, "2", parse_u32s)?;
    let ds = list("d", &s.d, &base.d.to_string(), parse_usizes)?;
    let ts = list("t", &s.t, &base.t.to_string(), parse_usizes)?;
    let cs = list("chunk", &s.chunk, &base.c.to_string(), parse_usizes)?;
    let mut configs = Vec::new();
    for mech in mechanisms(m, "power")? {
        for &p in &ps {
            for &d in &ds {
                for &form in &forms {
                    // Chunk size only matters to the chunked form.
                    let chunks = if form == Form::Chunked { cs.as_slice() } else { &cs[..1] };
                    for &t in &ts {
                        for &c in chunks {
                            configs.push(BenchConfig {
                                mechanism: mech,
                                kind: s.kind,
                                p,
                                d_tile: s.dtile.unwrap_or(base.d_tile),
                                window: (mech == MechanismKind::Window).then_some(m.w),
                                b: s.batch.unwrap_or(base.b),
                                t,
                                h: s.heads.unwrap_or(base.h),
                                d,
                                v: s.v.unwrap_or(d),
                                c,
                                dtype: s.dtype,
                                seed: s.seed,
                                repeats,
                                warmup,
                                form,
                                normalize: s.normalize,
                                gating: s.gating,
                                scale: s.scale,
                                threads,
                            });
                        }
                    }
                }
            }
        }
    }
    for c in &configs {
        c.validate()?;
    }
    let format = s.format(Format::Json);
    let mut w = s.writer()?;
    if format == Format::Json {
        // One line per configuration as soon as it finishes.
        for c in &configs {
            output::write_json(&mut w, &[run_bench(c)?])?;
            w.flush()?;
        }
        return Ok(());
    }
    let results = configs.iter().map(run_bench).collect::<Result<Vec<_>, _>>()?;
    emit(&mut w, format, &results, &["form", "t", "c", "tokens_per_sec", "wall_ns_total", "per_op_ns", "checksum"], |r| {
        let c = &r.config;
        vec![
            format!("{:?}", c.form).to_lowercase(),
            c.t.to_string(),
            if c.form == Form::Chunked { c.c.to_string() } else { "-".into() },
            format!("{:.0}", r.tokens_per_sec),
            r.wall_ns_total.to_string(),
            r.per_op_ns.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
            format!("{:.6e}", r.checksum),
        ]
    })?;
    Ok(())
}

fn cmd_flops(s: &Shared, m: &MechArgs, arch: &str) -> Outcome {
    let base = ArchSpec::preset(arch)?;
    let d = base.head_dim as usize;
    let ts = list("t", &s.t, "1024,8192,65536,1e6", lists::parse_list)?;
    let ps = list("p", &s.p, "2", parse_u32s)?;
    let chunks: Vec<Option<u64>> = match &s.chunk {
        Some(c) => lists::parse_list(c).map_err(|e| Failure::Usage(format!("--chunk: {e}")))?.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut reports: Vec<FlopReport> = Vec::new();
    for kind in mechanisms(m, "exp,window,linear,power")? {
        let mechs: Vec<Mechanism> = match kind {
            MechanismKind::Exp => vec![Mechanism::Exp],
            MechanismKind::Window => vec![Mechanism::Window(m.w)],
            MechanismKind::Linear => vec![Mechanism::Linear(ExpansionSpec::identity(d))],
            MechanismKind::Power => ps
                .iter()
                .map(|&p| ExpansionSpec::new(s.kind, p, d, s.dtile.unwrap_or(8)).map(Mechanism::Power))
                .collect::<Result<_, _>>()?,
        };
        let finite_state = matches!(kind, MechanismKind::Linear | MechanismKind::Power);
        for mech in mechs {
            for &chunk in if finite_state { chunks.as_slice() } else { &[None] } {
                for &t in &ts {
                    reports.push(wsfr(&base.clone().with_mechanism(mech).with_context(t).with_chunk(chunk))?);
                }
            }
        }
    }
    emit(
        &mut s.writer()?,
        s.format(Format::Table),
        &reports,
        &["arch", "mechanism", "t", "chunk", "weight_flops", "state_flops", "wsfr"],
        |r| {
            vec![
                r.arch.clone(),
                r.mechanism.clone(),
                r.t.to_string(),
                r.chunk.map(|c| c.to_string()).unwrap_or_default(),
                format!("{:.4e}", r.weight_flops_per_token),
                format!("{:.4e}", r.state_flops_per_token),
                r.wsfr_label(),
            ]
        },
    )?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Dim(s) => cmd_dim(s),
        Command::Check { shared, instances } => cmd_check(shared, *instances),
        Command::Bench { shared, mech, form, repeats, warmup, threads } => cmd_bench(shared, mech, form, *repeats, *warmup, *threads),
        Command::Flops { shared, mech, arch } => cmd_flops(shared, mech, arch),
        Command::Equiv(s) => cmd_equiv(s),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(n)) => {
            eprintln!("error: {n} checks failed");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e @ Error::StateTooLarge { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
