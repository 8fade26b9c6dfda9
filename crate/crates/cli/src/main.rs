//! `lightfmp`: generate data, split it, and run the pretrain / prune /
//! continue phases separately or end to end.

mod artifacts;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use lightfmp_core::checkpoint::Checkpoint;
use lightfmp_core::prelude::*;
use lightfmp_core::real::DType;
use lightfmp_core::report::{heatmap_csv, MaskFile};

use artifacts::{read_mask, read_split, stored_dtype, write_continued, write_pretrained, write_pruned, write_split};

#[derive(Parser)]
#[command(name = "lightfmp", version, about = "Feature and model pruning for CTR prediction")]
struct Cli {
    /// Progress on stderr; repeat for more detail.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with known informative fields.
    GenSynthetic(GenArgs),
    /// Stratified train/val/test split plus the pretraining subset.
    Split(SplitArgs),
    /// Train backbone and field gates on the pretraining subset.
    Pretrain(PretrainArgs),
    /// Drop low-importance fields and transfer the surviving weights.
    Prune(PruneArgs),
    /// Continue training the pruned model on the remaining data.
    Continue(ContinueArgs),
    /// Evaluate a checkpoint on one partition of a split.
    Eval(EvalArgs),
    /// Every phase end to end.
    RunAll(RunAllArgs),
    /// Field-importance matrix over several masks.
    Heatmap(HeatmapArgs),
}

/// Configuration shared by the training commands.
#[derive(Args, Default)]
struct RunOpts {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set pretrain.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    weights_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Fraction of fields to prune, in [0, 1).
    #[arg(long)]
    tau: Option<f64>,
    /// Compute in 64-bit floating point.
    #[arg(long)]
    f64: bool,
}

impl RunOpts {
    /// File values first, then flags, then `--set` pairs.
    fn resolve(&self, flags: &[(&str, bool)]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.extend(["split", "weights", "noise", "shuffle"].map(|k| format!("seeds.{k}={s}")));
        }
        for (k, v) in [
            ("split", self.split_seed),
            ("weights", self.weights_seed),
            ("noise", self.noise_seed),
            ("shuffle", self.shuffle_seed),
        ] {
            if let Some(v) = v {
                o.push(format!("seeds.{k}={v}"));
            }
        }
        if let Some(t) = self.tau {
            o.push(format!("tau={t:?}"));
        }
        for (key, on) in [("f64", self.f64)].iter().chain(flags) {
            if *on {
                o.push(format!("{key}=true"));
            }
        }
        o.extend(self.set.iter().cloned());
        RunConfig::with_overrides(&text, &o)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    fields: usize,
    /// Informative field indices, e.g. `0-7` or `0,3,5-6`.
    #[arg(long, value_parser = parse_index_set)]
    informative: IndexSet,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Categories per field.
    #[arg(long, default_value_t = 10)]
    cardinality: u32,
    #[arg(long, default_value_t = 1.5)]
    weight_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Output split directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct PretrainArgs {
    /// Split directory written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Literal constraint target `mean(z) - tau`.
    #[arg(long)]
    compat_eq4: bool,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct PruneArgs {
    /// Schema the checkpoint was trained under.
    #[arg(long)]
    schema: PathBuf,
    /// Pretrained checkpoint, `m_t.ckpt`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct ContinueArgs {
    #[arg(long)]
    split: PathBuf,
    /// Pruned checkpoint, `m_p.ckpt`.
    #[arg(long)]
    input: PathBuf,
    /// `mask.json` written by `prune`.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reinitialize instead of transferring pretrained weights.
    #[arg(long)]
    from_scratch: bool,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
    Pretrain,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    split: PathBuf,
    /// Any checkpoint; full models with a gate are evaluated under the
    /// noise-free mask.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    part: Part,
}

#[derive(Args)]
struct RunAllArgs {
    /// Dataset CSV; otherwise `data.path` or `[synthetic]` from the config.
    #[arg(long, requires = "schema")]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also train the unpruned model for comparison.
    #[arg(long)]
    with_baseline: bool,
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    compat_eq4: bool,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct HeatmapArgs {
    /// `mask.json` files, one per pruning ratio.
    #[arg(required = true)]
    masks: Vec<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone)]
struct IndexSet(Vec<usize>);

fn parse_index_set(s: &str) -> std::result::Result<IndexSet, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| format!("bad index {lo:?}"))?;
        let hi: usize = hi.parse().map_err(|_| format!("bad index {hi:?}"))?;
        if lo > hi {
            return Err(format!("empty range {part:?}"));
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(IndexSet(out))
}

fn check_threads() -> Result<()> {
    match std::env::var("LFMP_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                log::debug!("LFMP_THREADS={n}; training is single-threaded");
                Ok(())
            }
            _ => Err(Error::Config(format!("LFMP_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        fields: a.fields,
        informative: a.informative.0,
        cardinalities: vec![a.cardinality; a.fields],
        weight_scale: a.weight_scale,
        noise_std: a.noise_std,
        rows: a.rows,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    data.save_csv(a.out.join("data.csv"))?;
    data.schema().save(a.out.join("schema.toml"))?;
    // a ready-to-run configuration that regenerates this dataset
    let cfg = RunConfig {
        synthetic: Some(spec),
        ..RunConfig::default()
    };
    fs::write(a.out.join("synthetic.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let cfg = a.run.resolve(&[])?;
    let schema = Arc::new(FieldSchema::load(&a.schema)?);
    let data = load_dataset(&a.data, schema)?;
    let split = stratified_split(&data, cfg.split.ratios(), cfg.split.pretrain_size, cfg.seeds.split)?;
    write_split(&a.out, &data, &split)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let cfg = a.run.resolve(&[("compat_eq4", a.compat_eq4)])?;
    let split = read_split(&a.split)?;
    if cfg.f64 {
        pretrain_as::<f64>(&split, &cfg, &a.out)
    } else {
        pretrain_as::<f32>(&split, &cfg, &a.out)
    }
}

fn pretrain_as<T: Real>(split: &artifacts::SplitData, cfg: &RunConfig, out: &Path) -> Result<()> {
    let base = base_model::<T>(&split.pretrain, cfg)?;
    let res = pretrain(&base, split.pretrain.view(), Some(split.val.view()), cfg)?;
    let z = res.gate.deterministic_mask();
    log::info!(
        "pretrained {} steps, mean noise-free gate {:.3}",
        res.log.len(),
        z.iter().map(|v| v.f64()).sum::<f64>() / z.len() as f64
    );
    write_pretrained(out, &res)
}

fn prune_cmd(a: PruneArgs) -> Result<()> {
    let cfg = a.run.resolve(&[])?;
    let schema = Arc::new(FieldSchema::load(&a.schema)?);
    match stored_dtype(&a.input)? {
        DType::F64 => prune_as::<f64>(&a, schema, &cfg),
        DType::F32 => prune_as::<f32>(&a, schema, &cfg),
    }
}

fn prune_as<T: Real>(a: &PruneArgs, schema: Arc<FieldSchema>, cfg: &RunConfig) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.input, schema)?;
    let gate = ckpt
        .gate
        .ok_or_else(|| Error::artifact(&a.input, "checkpoint has no gate section"))?;
    let (pruned, mask) = prune(&ckpt.model, &gate, cfg.tau)?;
    log::info!("kept {} of {} fields", mask.retained_count, mask.len());
    write_pruned(&a.out, &pruned, &gate, &mask)
}

fn continue_cmd(a: ContinueArgs) -> Result<()> {
    let cfg = a.run.resolve(&[("from_scratch", a.from_scratch)])?;
    let split = read_split(&a.split)?;
    match stored_dtype(&a.input)? {
        DType::F64 => continue_as::<f64>(&a, &split, &cfg),
        DType::F32 => continue_as::<f32>(&a, &split, &cfg),
    }
}

fn continue_as<T: Real>(a: &ContinueArgs, split: &artifacts::SplitData, cfg: &RunConfig) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.input, split.schema.clone())?;
    let mask = read_mask(&a.mask, &split.schema, ckpt.mask.as_ref())?;
    let res = continue_train(&ckpt.model, &mask, split.train.view(), Some(split.val.view()), cfg)?;
    write_continued(&a.out, &res, &mask)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = read_split(&a.split)?;
    let part = match a.part {
        Part::Train => "train",
        Part::Val => "val",
        Part::Test => "test",
        Part::Pretrain => "pretrain",
    };
    let res = match stored_dtype(&a.input)? {
        DType::F64 => eval_as::<f64>(&a.input, &split, part)?,
        DType::F32 => eval_as::<f32>(&a.input, &split, part)?,
    };
    println!("{}", serde_json::to_string(&res)?);
    Ok(())
}

fn eval_as<T: Real>(path: &Path, split: &artifacts::SplitData, part: &str) -> Result<EvalResult> {
    let ckpt = Checkpoint::<T>::load(path, split.schema.clone())?;
    let full = ckpt.model.fields().len() == split.schema.len();
    let z = ckpt.gate.as_ref().filter(|_| full).map(|g| g.deterministic_mask());
    evaluate(&ckpt.model, split.part(part).view(), z.as_deref())
}

fn run_all_cmd(a: RunAllArgs) -> Result<()> {
    let mut cfg = a.run.resolve(&[
        ("with_baseline", a.with_baseline),
        ("from_scratch", a.from_scratch),
        ("compat_eq4", a.compat_eq4),
    ])?;
    if a.data.is_some() {
        cfg.data.path = a.data;
        cfg.data.schema = a.schema;
        cfg.validate()?;
    }
    cfg.output = Some(a.out.clone());
    let data = match (&cfg.data.path, &cfg.synthetic) {
        (Some(path), _) => {
            let schema = cfg
                .data
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("data.schema is required with data.path".into()))?;
            load_dataset(path, Arc::new(FieldSchema::load(schema)?))?
        }
        (None, Some(spec)) => generate_synthetic(spec)?,
        (None, None) => {
            return Err(Error::Config("no data: pass --data/--schema or configure [synthetic]".into()));
        }
    };
    if cfg.f64 {
        run_all_as::<f64>(&data, &cfg, &a.out)
    } else {
        run_all_as::<f32>(&data, &cfg, &a.out)
    }
}

fn run_all_as<T: Real>(data: &Dataset, cfg: &RunConfig, out: &Path) -> Result<()> {
    let art = run_all::<T>(data, cfg)?;
    write_split(&out.join("split"), data, &art.split)?;
    write_pretrained(out, &art.pretrained)?;
    write_pruned(out, &art.pruned, &art.pretrained.gate, &art.mask)?;
    write_continued(out, &art.continued, &art.mask)?;
    art.report.save(out.join("report.json"))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let r = &art.report;
    print!(
        "kept {}/{} fields, test auc {:.4} logloss {:.4}, pretrain {:.2}s continue {:.2}s",
        r.m_prime, r.m, r.test.auc, r.test.logloss, r.timings.pretrain_s, r.timings.continued_s
    );
    if let Some(b) = &r.baseline {
        print!(", baseline auc {:.4} tt ratio {:.3}", b.test.auc, b.tt_ratio);
    }
    println!();
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<()> {
    let masks = a.masks.iter().map(MaskFile::load).collect::<Result<Vec<_>>>()?;
    let csv = heatmap_csv(&masks)?;
    match a.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Split(a) => split(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Continue(a) => continue_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::RunAll(a) => run_all_cmd(a),
        Command::Heatmap(a) => heatmap_cmd(a),
    }
}

fn one_line(s: &str) -> String {
    s.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_env("LFMP_LOG")
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
