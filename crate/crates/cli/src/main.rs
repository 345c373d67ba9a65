mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use chanfuse::analysis::{self, trend_fit};
use chanfuse::data::{generate_to_file, Dataset};
use chanfuse::gating::{Decision, PolicyTrace};
use chanfuse::gradcheck::{run_suite, SuiteOptions, TOLERANCE};
use chanfuse::model::ToyNet;
use chanfuse::train::{evaluate, Trainer};
use chanfuse::Error;
use run_config::RunConfig;

/// Adaptive per-channel temporal fusion on synthetic video.
///
/// Every configuration key can also be passed as a flag, e.g.
/// `--train.lambda_eff 0.2` or `--model.gated=all`.
#[derive(Parser, Debug)]
#[command(name = "chanfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Plain `key=value` config file, applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic motion dataset (AFSV1 file plus manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Alias of data.n_samples.
        #[arg(long)]
        n: Option<usize>,
        /// Alias of data.classes.
        #[arg(long)]
        classes: Option<String>,
        /// Alias of data.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network; writes config.echo, metrics.jsonl, checkpoint.afck.
    Train {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Alias of train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Alias of model.variant.
        #[arg(long)]
        variant: Option<String>,
        /// Alias of model.gated.
        #[arg(long)]
        gated: Option<String>,
        /// Alias of policy.kind.
        #[arg(long)]
        policy: Option<String>,
        /// Alias of policy.dist (keep,reuse,skip).
        #[arg(long)]
        dist: Option<String>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or a freshly initialised network); writes report.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Alias of train.seed, which seeds baseline policies.
        #[arg(long)]
        seed: Option<u64>,
        /// Alias of model.variant (fresh networks only).
        #[arg(long)]
        variant: Option<String>,
        /// Alias of model.gated (fresh networks only).
        #[arg(long)]
        gated: Option<String>,
        /// Alias of policy.kind: learned, random, threshold, keep, reuse or skip.
        #[arg(long)]
        policy: Option<String>,
        /// Alias of policy.dist (keep,reuse,skip).
        #[arg(long)]
        dist: Option<String>,
        /// Alias of policy.keep_ratio.
        #[arg(long)]
        keep_ratio: Option<f64>,
        /// Also write every decision to traces.csv.
        #[arg(long)]
        dump_traces: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable op and a full gated block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use a convolution with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        corrupt_conv: bool,
    },
    /// Policy statistics from a traces.csv dump; writes stats.json and per_block.csv.
    Stats {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Degree of the per-block trend polynomial.
        #[arg(long, default_value_t = 3)]
        order: usize,
    },
    /// Per-layer FLOPS table and the all-keep upper bound.
    Flops {
        /// Alias of model.variant.
        #[arg(long)]
        variant: Option<String>,
        /// Alias of model.gated.
        #[arg(long)]
        gated: Option<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
}

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INPUT: u8 = 3;

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_INPUT,
            Error::Format { .. } => EXIT_INPUT,
            _ => EXIT_VERIFY,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult = Result<u8, Failure>;
type Pairs = Vec<(String, String)>;

fn config_failure(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        msg: format!("config error: {}", msg.into()),
    }
}

/// Pulls `--section.key value` and `--section.key=value` out of the
/// arguments; everything else is left for clap.
fn split_dotted(args: Vec<String>) -> Result<(Vec<String>, Pairs), Failure> {
    let mut rest = Vec::new();
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| config_failure(format!("--{flag} needs a value")))?;
                pairs.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, pairs))
}

fn push(pairs: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.to_string()));
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let outcome = split_dotted(args).and_then(|(rest, dotted)| {
        let cli = Cli::try_parse_from(rest).map_err(|e| {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            Failure { code, msg: String::new() }
        })?;
        run(cli.command, dotted)
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            if !f.msg.is_empty() {
                eprintln!("error: {}", f.msg);
            }
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command, mut dotted: Vec<(String, String)>) -> CliResult {
    match command {
        Command::GenData {
            out,
            n,
            classes,
            seed,
            common,
        } => {
            let mut pairs = Vec::new();
            push(&mut pairs, "data.n_samples", n);
            push(&mut pairs, "data.classes", classes);
            push(&mut pairs, "data.seed", seed);
            pairs.append(&mut dotted);
            let rc = RunConfig::resolve(common.config.as_deref(), &pairs)?;
            cmd_gen_data(&rc, &out)
        }
        Command::Train {
            train_data,
            val_data,
            out,
            seed,
            variant,
            gated,
            policy,
            dist,
            quiet,
            common,
        } => {
            let mut pairs = Vec::new();
            push(&mut pairs, "train.seed", seed);
            push(&mut pairs, "model.variant", variant);
            push(&mut pairs, "model.gated", gated);
            push(&mut pairs, "policy.kind", policy);
            push(&mut pairs, "policy.dist", dist);
            pairs.append(&mut dotted);
            let rc = RunConfig::resolve(common.config.as_deref(), &pairs)?;
            cmd_train(rc, &train_data, &val_data, &out, quiet)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            seed,
            variant,
            gated,
            policy,
            dist,
            keep_ratio,
            dump_traces,
            common,
        } => {
            let mut pairs = Vec::new();
            push(&mut pairs, "train.seed", seed);
            push(&mut pairs, "model.variant", variant);
            push(&mut pairs, "model.gated", gated);
            push(&mut pairs, "policy.kind", policy);
            push(&mut pairs, "policy.dist", dist);
            push(&mut pairs, "policy.keep_ratio", keep_ratio);
            pairs.append(&mut dotted);
            let rc = RunConfig::resolve(common.config.as_deref(), &pairs)?;
            cmd_eval(rc, &data, checkpoint.as_deref(), &out, dump_traces)
        }
        Command::Gradcheck { seed, corrupt_conv } => {
            reject_dotted(&dotted)?;
            cmd_gradcheck(seed, corrupt_conv)
        }
        Command::Stats { traces, out, order } => {
            reject_dotted(&dotted)?;
            cmd_stats(&traces, &out, order)
        }
        Command::Flops {
            variant,
            gated,
            json,
            common,
        } => {
            let mut pairs = Vec::new();
            push(&mut pairs, "model.variant", variant);
            push(&mut pairs, "model.gated", gated);
            pairs.append(&mut dotted);
            let rc = RunConfig::resolve(common.config.as_deref(), &pairs)?;
            cmd_flops(&rc, json)
        }
    }
}

fn reject_dotted(dotted: &[(String, String)]) -> Result<(), Failure> {
    match dotted.first() {
        Some((k, _)) => Err(config_failure(format!("this command takes no {k:?} setting"))),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serialisable json") + "\n";
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn cmd_gen_data(rc: &RunConfig, out: &Path) -> CliResult {
    rc.data.validate()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let ds = generate_to_file(&rc.data, out)?;
    println!(
        "wrote {} clips of {} classes to {}",
        ds.len(),
        ds.num_classes,
        out.display()
    );
    Ok(0)
}

/// Takes clip geometry and class count from the dataset; an explicit
/// setting that disagrees is a config error.
fn fit_model_to_data(rc: &mut RunConfig, ds: &Dataset) -> Result<(), Failure> {
    let explicit = &rc.explicit;
    let m = &mut rc.model;
    let fields: [(&str, &mut usize, usize); 5] = [
        ("model.frames", &mut m.frames, ds.frames),
        ("model.in_channels", &mut m.in_channels, ds.channels),
        ("model.height", &mut m.height, ds.height),
        ("model.width", &mut m.width, ds.width),
        ("model.num_classes", &mut m.num_classes, ds.num_classes),
    ];
    for (key, field, actual) in fields {
        if explicit.iter().any(|k| k == key) && *field != actual {
            return Err(config_failure(format!("{key}={field} but the dataset has {actual}")));
        }
        *field = actual;
    }
    Ok(())
}

fn cmd_train(mut rc: RunConfig, train_path: &Path, val_path: &Path, out: &Path, quiet: bool) -> CliResult {
    let train_set = Dataset::load(train_path)?;
    let val_set = Dataset::load(val_path)?;
    if (train_set.frames, train_set.height, train_set.width, train_set.num_classes)
        != (val_set.frames, val_set.height, val_set.width, val_set.num_classes)
    {
        return Err(config_failure("training and validation sets differ in shape or classes"));
    }
    fit_model_to_data(&mut rc, &train_set)?;
    rc.adopt_manifest(train_path)?;
    rc.model.validate()?;
    rc.train.validate()?;
    let policy = rc.policy.source()?;
    create_dir(out)?;
    rc.write_echo(out, "train")?;

    let mut net = ToyNet::new(rc.model.clone())?;
    let start = std::time::Instant::now();
    let summary = Trainer::new(rc.train.clone())
        .with_policy(policy)
        .with_out_dir(out)
        .run(&mut net, &train_set, &val_set, |r| {
            if !quiet {
                let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
                eprintln!(
                    "epoch {:>3}  {:>6.1}s  lr {:.2e}  loss {loss}  top1 {:.3}  flops {:.4e}  util {:.3}",
                    r.epoch,
                    start.elapsed().as_secs_f64(),
                    r.lr,
                    r.top1,
                    r.mean_flops,
                    r.mean_util
                );
            }
        })?;
    let best = &summary.best;
    println!(
        "best top1 {:.4} at epoch {} (mean flops {:.4e}, util {:.4}); run written to {}",
        best.top1,
        best.epoch,
        best.mean_flops,
        best.mean_util,
        out.display()
    );
    Ok(0)
}

fn cmd_eval(mut rc: RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path, dump_traces: bool) -> CliResult {
    let ds = Dataset::load(data)?;
    rc.adopt_manifest(data)?;
    let net = match checkpoint {
        Some(path) => {
            if let Some(k) = rc.explicit.iter().find(|k| k.starts_with("model.") || k.starts_with("gate.")) {
                return Err(config_failure(format!("{k} cannot override the architecture of a checkpoint")));
            }
            let net = ToyNet::load(path)?;
            rc.model = net.config.clone();
            net
        }
        None => {
            fit_model_to_data(&mut rc, &ds)?;
            rc.model.validate()?;
            ToyNet::new(rc.model.clone())?
        }
    };
    let c = &net.config;
    if (c.frames, c.in_channels, c.height, c.width, c.num_classes)
        != (ds.frames, ds.channels, ds.height, ds.width, ds.num_classes)
    {
        return Err(config_failure(format!(
            "dataset clips [{}, {}, {}, {}] with {} classes do not fit the network",
            ds.frames, ds.channels, ds.height, ds.width, ds.num_classes
        )));
    }
    let policy = rc.policy.source()?;
    if rc.train.eval_batch_size == 0 {
        return Err(config_failure("train.eval_batch_size must be positive"));
    }
    create_dir(out)?;
    rc.write_echo(out, "eval")?;
    let (report, trace) = evaluate(&net, &ds, &policy, rc.train.eval_batch_size, rc.train.seed, dump_traces)?;
    let mut value = serde_json::to_value(&report).expect("serialisable report");
    let extra = json!({
        "policy": rc.policy.kind,
        "policy_params": net.policy_params(),
        "upper_bound": net.upper_bound_flops()?,
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
    });
    value
        .as_object_mut()
        .expect("report is an object")
        .extend(extra.as_object().expect("object").clone());
    write_json(&out.join("report.json"), &value)?;
    if dump_traces {
        trace.export(out)?;
    }
    let top5 = report.top5.map_or(String::new(), |t| format!("  top5 {t:.4}"));
    println!(
        "top1 {:.4}{top5}  mean flops {:.4e}  util {:.4}  params {}  [keep {:.3}, reuse {:.3}, skip {:.3}]",
        report.top1,
        report.mean_flops,
        report.mean_util,
        report.params,
        report.fractions[0],
        report.fractions[1],
        report.fractions[2]
    );
    Ok(0)
}

fn cmd_gradcheck(seed: u64, corrupt_conv: bool) -> CliResult {
    let start = std::time::Instant::now();
    let report = run_suite(SuiteOptions { seed, corrupt_conv })?;
    print!("{}", report.render());
    let secs = start.elapsed().as_secs_f64();
    if report.passed() {
        println!("all {} checks below {TOLERANCE:e} in {secs:.1}s", report.checks.len());
        Ok(0)
    } else {
        println!("FAILED: {}", report.failures().join(", "));
        Ok(EXIT_VERIFY)
    }
}

fn cmd_stats(traces: &Path, out: &Path, order: usize) -> CliResult {
    let file = fs::File::open(traces).map_err(|e| Failure::from(Error::io(traces, e)))?;
    let trace = PolicyTrace::read_csv(std::io::BufReader::new(file))?;
    let stats = analysis::aggregate([&trace])?;
    create_dir(out)?;
    stats.export(out)?;
    let [skip, reuse, keep] = stats.overall;
    println!("overall  skip {skip:.4}  reuse {reuse:.4}  keep {keep:.4}");
    if stats.quotient_defined {
        println!("reuse/keep quotient {:.4}", stats.quotient);
    } else {
        println!("reuse/keep quotient 0 (nothing kept)");
    }
    println!("block  skip    reuse   keep    skip(i) reuse(i) keep(i)");
    for b in &stats.per_block {
        let [s, r, k] = b.fractions;
        let [si, ri, ki] = b.instance;
        println!(
            "{:>5}  {s:.4}  {r:.4}  {k:.4}  {si:.4}  {ri:.4}   {ki:.4}",
            b.block_id
        );
    }
    if stats.per_block.len() > order {
        let mut trends = serde_json::Map::new();
        for d in [Decision::Skip, Decision::Reuse, Decision::Keep] {
            let fit = trend_fit(&stats.series(d), order)?;
            println!("{} trend coefficients {:?}", d.name(), fit.coefficients);
            trends.insert(d.name().into(), serde_json::to_value(&fit).expect("serialisable fit"));
        }
        write_json(&out.join("trend.json"), &serde_json::Value::Object(trends))?;
    } else {
        println!(
            "{} gated blocks: too few for a degree-{order} trend",
            stats.per_block.len()
        );
    }
    Ok(0)
}

fn cmd_flops(rc: &RunConfig, as_json: bool) -> CliResult {
    rc.model.validate()?;
    let net = ToyNet::new(rc.model.clone())?;
    let table = net.flops_table()?;
    let frames = rc.model.frames as f64;
    let pairs: Vec<(usize, f64, f64)> = net
        .block_costs()?
        .into_iter()
        .enumerate()
        .map(|(i, (mx, my))| (i, mx, my))
        .collect();
    let gated = rc.model.gated_blocks();
    let blocks_bound: f64 = pairs.iter().map(|(_, mx, my)| frames * (mx + my)).sum();
    let total = net.upper_bound_flops()?;
    if as_json {
        let value = json!({
            "frames": rc.model.frames,
            "layers": table,
            "blocks": pairs.iter().map(|(i, mx, my)| json!({
                "block": i, "gated": gated[*i], "m_x": mx, "m_y": my
            })).collect::<Vec<_>>(),
            "blocks_upper_bound": blocks_bound,
            "fixed_flops": net.fixed_flops()?,
            "upper_bound": total,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("serialisable json"));
        return Ok(0);
    }
    println!("{:<14} {:>5} {:>5} {:>3} {:>9} {:>12}", "layer", "c_in", "c_out", "k", "out", "flops/frame");
    for l in &table {
        println!(
            "{:<14} {:>5} {:>5} {:>3} {:>9} {:>12}",
            l.name,
            l.in_channels,
            l.out_channels,
            l.kernel,
            format!("{}x{}", l.out_h, l.out_w),
            l.flops
        );
    }
    println!();
    println!("{:<6} {:>6} {:>12} {:>12}", "block", "gated", "m_x", "m_y");
    for (i, mx, my) in &pairs {
        println!("{:<6} {:>6} {:>12} {:>12}", i, gated[*i], mx, my);
    }
    println!();
    println!("all-keep bound T·Σ(m_x + m_y): {blocks_bound}");
    println!("fixed layers per clip:         {}", net.fixed_flops()?);
    println!("upper bound per clip:          {total}");
    Ok(0)
}
