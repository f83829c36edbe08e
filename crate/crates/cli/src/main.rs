//! `mdt` command-line front end: train, sample, eval and compare.
//!
//! Exit codes: 0 ok, 2 usage or configuration, 3 data integrity, 4 numeric
//! failure, 1 anything else.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng;

use mdt::checkpoint::{write_atomic, Checkpoint};
use mdt::config::{parse_pairs, RunConfig};
use mdt::data::{Dataset, Normalization};
use mdt::evaluation::{
    compare_convergence, generate, reference_set, score_samples, CompareOutcome, COMPARE_HEADER,
};
use mdt::numerics::{SeededRng, Stream};
use mdt::render::render_ppm;
use mdt::sampling::{ddpm_sample, GuidanceMode, ModelDenoiser};
use mdt::training::{StepMetrics, Trainer};
use mdt::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mdt", version, about = "Masked diffusion transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, or continue from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint using its embedded configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory (default: $MDT_OUT_DIR, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw samples from a checkpoint into a PPM grid.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Comma-separated class labels (cycled), or `random`.
        #[arg(long, default_value = "random")]
        labels: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<String>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample with the live weights instead of the EMA copy.
        #[arg(long)]
        no_ema: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint (or a fresh generator draw) against held-out data.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Score a fresh data draw instead of model samples; needs --config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configuration of a suite file.
    Compare {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("MDT_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn prepare_data(cfg: &RunConfig) -> Result<(Normalization, Dataset)> {
    let raw = cfg.dataset()?;
    let norm = Normalization::fit(&raw)?;
    let data = norm.apply(&raw)?;
    Ok((norm, data))
}

fn checkpoint_of(trainer: &Trainer, cfg: &RunConfig, norm: &Normalization) -> Checkpoint {
    Checkpoint {
        fingerprint: cfg.fingerprint(),
        config_text: cfg.to_text(),
        state: trainer.state(),
        norm: norm.clone(),
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<u64>,
    sets: Vec<String>,
    quiet: bool,
) -> Result<()> {
    let (mut cfg, state) = match (&config, &resume) {
        (Some(path), None) => (RunConfig::load(path)?, None),
        (None, Some(ck)) => {
            let c = Checkpoint::load(ck).map_err(|e| match e {
                Error::Io(io) => io_context(ck, io),
                e => e,
            })?;
            (RunConfig::from_text(&c.config_text)?, Some(c))
        }
        _ => return Err(Error::Config("train needs exactly one of --config or --resume".into())),
    };
    for kv in &sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;

    let out = out_root(out);
    std::fs::create_dir_all(&out).map_err(|e| io_context(&out, e))?;
    let (norm, data) = prepare_data(&cfg)?;
    let mut trainer = match state {
        Some(c) => Trainer::from_state(cfg.model.clone(), cfg.schedule()?, cfg.train.clone(), c.state)?,
        None => Trainer::new(cfg.model.clone(), cfg.schedule()?, cfg.train.clone(), data.len())?,
    };
    let fp = cfg.fingerprint();

    let metrics_path = out.join("metrics.csv");
    let fresh = trainer.step_count() == 0 || !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| io_context(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "# config {fp}\n{}", StepMetrics::CSV_HEADER)?;
    }
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let every = cfg.train.ckpt_every.max(1);
    let total = cfg.train.steps;
    while trainer.step_count() < total {
        let m = trainer.step(&data)?;
        writeln!(metrics, "{}", m.csv_row())?;
        if !quiet && (m.step % 100 == 0 || m.step == total) {
            eprintln!(
                "step {:>7}  loss {:.5} (full {:.5}, masked {:.5})  |g| {:.3}",
                m.step, m.loss_total, m.loss_full, m.loss_masked, m.grad_norm
            );
        }
        if m.step % every == 0 && m.step != total {
            checkpoint_of(&trainer, &cfg, &norm).save(&out.join(format!("ckpt-{:08}.mdt", m.step)))?;
        }
    }
    metrics.flush()?;
    let ck = checkpoint_of(&trainer, &cfg, &norm);
    ck.save(&out.join(format!("ckpt-{:08}.mdt", trainer.step_count())))?;
    ck.save(&out.join("last.mdt"))?;
    if !quiet {
        eprintln!("wrote {}", out.join("last.mdt").display());
    }
    Ok(())
}

fn load_run(ckpt: &Path) -> Result<(Checkpoint, RunConfig, Trainer)> {
    let c = Checkpoint::load(ckpt).map_err(|e| match e {
        Error::Io(io) => io_context(ckpt, io),
        e => e,
    })?;
    let cfg = RunConfig::from_text(&c.config_text)?;
    let trainer = Trainer::from_state(cfg.model.clone(), cfg.schedule()?, cfg.train.clone(), c.state.clone())?;
    Ok((c, cfg, trainer))
}

fn parse_labels(spec: &str, n: usize, classes: usize, seed: u64) -> Result<Vec<usize>> {
    if spec == "random" {
        let mut rng = SeededRng::new(seed, Stream::Data);
        return Ok((0..n).map(|_| rng.random_range(0..classes)).collect());
    }
    let given: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad label {s:?} in --labels")))
        })
        .collect::<Result<_>>()?;
    if given.is_empty() {
        return Err(Error::Config("--labels is empty".into()));
    }
    if let Some(bad) = given.iter().find(|&&l| l >= classes) {
        return Err(Error::Range(format!("label {bad} >= {classes} classes")));
    }
    Ok((0..n).map(|i| given[i % given.len()]).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    ckpt: PathBuf,
    n: usize,
    labels: String,
    steps: Option<usize>,
    guidance: Option<String>,
    w: Option<f64>,
    s: Option<f64>,
    seed: Option<u64>,
    no_ema: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let (c, mut cfg, trainer) = load_run(&ckpt)?;
    if let Some(v) = steps {
        cfg.sampling.steps = v;
    }
    if let Some(g) = guidance {
        cfg.sampling.guidance = g.parse()?;
    }
    if let Some(v) = w {
        cfg.sampling.w = v;
    }
    if let Some(v) = s {
        cfg.sampling.s = v;
    }
    if let Some(v) = seed {
        cfg.sampling.seed = v;
    }
    if no_ema {
        cfg.sampling.use_ema = false;
    }
    cfg.validate()?;
    let labels = parse_labels(&labels, n, cfg.data.classes, cfg.sampling.seed)?;
    let sampler = cfg.sampler(labels.clone());
    let params = sampler.select(trainer.params(), trainer.ema());
    let latents = ddpm_sample(
        &ModelDenoiser {
            model: trainer.model(),
            params,
        },
        &sampler,
        trainer.schedule(),
    )?;
    let chw = [cfg.data.channels, cfg.data.height, cfg.data.height];
    let ds = Dataset::new(latents, labels.clone(), cfg.data.classes, chw)?;
    let samples = c.norm.invert(&ds)?.x;
    let img = render_ppm(&samples, chw, cfg.sampling.range)?;

    let out = out_root(out);
    std::fs::create_dir_all(&out).map_err(|e| io_context(&out, e))?;
    write_atomic(&out.join("samples.ppm"), &img)?;
    let mut side = String::new();
    let guidance_line = match sampler.guidance {
        GuidanceMode::Off => "off".to_string(),
        g => format!("{g} w={} s={}", sampler.w, sampler.s),
    };
    writeln!(side, "checkpoint = {}", ckpt.display()).unwrap();
    writeln!(side, "fingerprint = {}", c.fingerprint).unwrap();
    writeln!(side, "step = {}", c.state.step).unwrap();
    writeln!(side, "seed = {}", sampler.seed).unwrap();
    writeln!(side, "steps = {}", sampler.n_steps).unwrap();
    writeln!(side, "guidance = {guidance_line}").unwrap();
    writeln!(side, "weights = {}", if sampler.use_ema { "ema" } else { "live" }).unwrap();
    let ls: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    writeln!(side, "labels = {}", ls.join(",")).unwrap();
    write_atomic(&out.join("samples.txt"), side.as_bytes())?;
    eprintln!("wrote {}", out.join("samples.ppm").display());
    Ok(())
}

fn cmd_eval(
    ckpt: Option<PathBuf>,
    config: Option<PathBuf>,
    n: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut cfg, run) = match (&ckpt, &config) {
        (Some(ck), None) => {
            let (c, cfg, trainer) = load_run(ck)?;
            (cfg, Some((c, trainer)))
        }
        (None, Some(path)) => (RunConfig::load(path)?, None),
        _ => return Err(Error::Config("eval needs exactly one of --ckpt or --config".into())),
    };
    if let Some(v) = n {
        cfg.eval.samples = v;
    }
    if let Some(v) = steps {
        cfg.sampling.steps = v;
    }
    if let Some(v) = seed {
        cfg.eval.seed = v;
    }
    cfg.validate()?;
    let reference = reference_set(&cfg)?;
    let (samples, labels, step) = match &run {
        Some((c, trainer)) => {
            let params = if cfg.sampling.use_ema { trainer.ema() } else { trainer.params() };
            let (x, l) = generate(trainer.model(), params, &cfg, &c.norm, cfg.eval.seed)?;
            (x, l, c.state.step)
        }
        None => {
            let mut fresh = cfg.clone();
            fresh.data.size = cfg.eval.samples;
            fresh.data.seed = cfg.data.seed.wrapping_add(1);
            let ds = fresh.dataset()?;
            (ds.x, ds.labels, 0)
        }
    };
    let (swd, pair, per_class) = score_samples(&samples, &labels, &reference, &cfg, cfg.eval.seed)?;
    let mut report = String::from("step,swd,pair_consistency,pair_degenerate,per_class_swd,fingerprint\n");
    let per: Vec<String> = per_class.iter().map(|v| v.to_string()).collect();
    writeln!(
        report,
        "{step},{swd},{},{},{},{}",
        pair.map_or(f64::NAN, |p| p.score),
        pair.is_some_and(|p| p.degenerate),
        per.join(";"),
        cfg.fingerprint()
    )
    .unwrap();
    print!("{report}");
    if pair.is_some_and(|p| p.degenerate) {
        eprintln!("warning: pair consistency is degenerate (flat amplitudes)");
    }
    if let Some(o) = out {
        write_atomic(&o, report.as_bytes())?;
    }
    Ok(())
}

/// Named configurations, evaluation steps and seeds.
type Suite = (Vec<(String, RunConfig)>, Vec<u64>, Vec<u64>);

/// Suite file: `suite.eval_steps`, `suite.seeds` and one `config.<name> =
/// <path>` line per configuration, paths relative to the suite file.
fn read_suite(path: &Path) -> Result<Suite> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read suite {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let list = |key: &str, v: &str| -> Result<Vec<u64>> {
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad entry {s:?}")))
            })
            .collect()
    };
    let (mut configs, mut steps, mut seeds) = (Vec::new(), vec![5000], vec![0]);
    for (k, v, line) in parse_pairs(&text)? {
        match k.as_str() {
            "suite.eval_steps" => steps = list(&k, &v)?,
            "suite.seeds" => seeds = list(&k, &v)?,
            _ => match k.strip_prefix("config.") {
                Some(name) if !name.is_empty() && !name.contains(',') => {
                    configs.push((name.to_string(), RunConfig::load(&base.join(&v))?))
                }
                _ => return Err(Error::Config(format!("suite line {line}: unknown key {k:?}"))),
            },
        }
    }
    if configs.is_empty() {
        return Err(Error::Config(format!("suite {} lists no configurations", path.display())));
    }
    Ok((configs, steps, seeds))
}

fn cmd_compare(suite: PathBuf, out: PathBuf) -> Result<()> {
    let (configs, steps, seeds) = read_suite(&suite)?;
    let mut csv = String::new();
    for (name, cfg) in &configs {
        writeln!(csv, "# config {name} {}", cfg.fingerprint()).unwrap();
    }
    csv.push_str(COMPARE_HEADER);
    csv.push('\n');
    let outcome: CompareOutcome = compare_convergence(&configs, &steps, &seeds, |r| {
        eprintln!(
            "{} seed {} step {}: swd {:.5} pair {:.4}",
            r.name, r.seed, r.step, r.swd, r.pair_consistency
        );
    });
    for r in &outcome.rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_atomic(&out, csv.as_bytes())?;
    if outcome.failures.is_empty() {
        return Ok(());
    }
    let mut report = String::from("name,seed,step,error\n");
    for f in &outcome.failures {
        writeln!(report, "{},{},{},{:?}", f.name, f.seed, f.step, f.message).unwrap();
    }
    let fail_path = out.with_extension("failures.csv");
    write_atomic(&fail_path, report.as_bytes())?;
    Err(Error::NonFinite(format!(
        "{} run(s) aborted; see {}",
        outcome.failures.len(),
        fail_path.display()
    )))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            out,
            steps,
            sets,
            quiet,
        } => cmd_train(config, resume, out, steps, sets, quiet),
        Command::Sample {
            ckpt,
            n,
            labels,
            steps,
            guidance,
            w,
            s,
            seed,
            no_ema,
            out,
        } => cmd_sample(ckpt, n, labels, steps, guidance, w, s, seed, no_ema, out),
        Command::Eval {
            ckpt,
            config,
            n,
            steps,
            seed,
            out,
        } => cmd_eval(ckpt, config, n, steps, seed, out),
        Command::Compare { suite, out } => cmd_compare(suite, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
