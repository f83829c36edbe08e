//! Convergence-trend and ablation criteria on the synthetic-pairs task.
//!
//! Every model trains with the same data, batch, learning rate and seeds.
//! Evaluations draw 1024 EMA samples with guidance off and compare them with
//! a 1024-sample held-out reference. A run is only evaluated where the
//! verdict needs it: the baseline at 5000 steps, the masked models on a
//! 500-step grid until they reach the baseline value, then at 5000.

use std::collections::BTreeMap;
use std::sync::Mutex;

use mdt::config::RunConfig;
use mdt::data::{Dataset, Normalization};
use mdt::evaluation::{generate, reference_set, score_samples};
use mdt::training::Trainer;

use crate::Verdict;

pub const SEEDS: [u64; 3] = [0, 1, 2];
const FINAL: u64 = 5000;
const GRID: u64 = 500;

const COMMON: &str = "\
data.kind = synthetic-pairs
data.h = 8
data.c = 2
data.classes = 2
data.size = 4096
model.size = toy
train.batch = 16
train.lr = 1e-4
train.ema_decay = 0.99
train.label_dropout = 0.1
sampling.steps = 50
sampling.use_ema = true
guidance.mode = off
eval.samples = 1024
eval.n_proj = 128
";

/// Named configurations: the plain-stack baseline, MDT, MDTv2 and the MDT
/// ablations.
fn config(name: &str) -> RunConfig {
    let extra = match name {
        "baseline" => "model.architecture = plain\nmodel.variant = v1\ndiffusion.min_snr_gamma = inf\n",
        "mdt" => "model.variant = v1\nmodel.n2 = 2\ndiffusion.min_snr_gamma = inf\n",
        "mdtv2" => "model.variant = v2\nmodel.n2 = 4\ntrain.optimizer = adan\nmask.ratio_lo = 0.3\nmask.ratio_hi = 0.5\ndiffusion.min_snr_gamma = 5\n",
        "mdt-no-side" => "model.variant = v1\nmodel.n2 = 2\ndiffusion.min_snr_gamma = inf\nmodel.side_interpolater = false\n",
        "mdt-masked-only" => "model.variant = v1\nmodel.n2 = 2\ndiffusion.min_snr_gamma = inf\nmask.supervision = masked\n",
        "mdt-no-relbias" => "model.variant = v1\nmodel.n2 = 2\ndiffusion.min_snr_gamma = inf\nmodel.rel_pos_bias = false\n",
        _ => unreachable!("unknown configuration {name}"),
    };
    RunConfig::from_text(&format!("{COMMON}{extra}")).expect("acceptance configuration")
}

#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub swd: f64,
    pub pair: f64,
}

/// One training run that can be advanced and scored on demand.
struct Run {
    cfg: RunConfig,
    seed: u64,
    norm: Normalization,
    data: Dataset,
    reference: Dataset,
    trainer: Trainer,
    secs: f64,
}

impl Run {
    fn new(name: &str, seed: u64) -> Self {
        let mut cfg = config(name);
        cfg.train.seed = seed;
        let raw = cfg.dataset().unwrap();
        let norm = Normalization::fit(&raw).unwrap();
        let data = norm.apply(&raw).unwrap();
        let reference = reference_set(&cfg).unwrap();
        let trainer = Trainer::new(cfg.model.clone(), cfg.schedule().unwrap(), cfg.train.clone(), data.len()).unwrap();
        Self { cfg, seed, norm, data, reference, trainer, secs: 0.0 }
    }

    fn train_to(&mut self, step: u64) {
        let t0 = std::time::Instant::now();
        while self.trainer.step_count() < step {
            self.trainer.step(&self.data).expect("training step");
        }
        self.secs += t0.elapsed().as_secs_f64();
    }

    fn score(&mut self, step: u64) -> Point {
        self.train_to(step);
        let (x, labels) = generate(self.trainer.model(), self.trainer.ema(), &self.cfg, &self.norm, self.seed).unwrap();
        let (swd, pair, _) = score_samples(&x, &labels, &self.reference, &self.cfg, self.seed).unwrap();
        Point { swd, pair: pair.map_or(f64::NAN, |p| p.score) }
    }
}

/// Result of a masked model chasing a baseline target.
#[derive(Debug, Clone, Copy)]
struct Chase {
    /// First grid step at or below the target, if any within the limit.
    reached: Option<u64>,
    /// Score at the final step, when the run was carried that far.
    last: Option<Point>,
}

/// Cached runs, shared between the two criteria.
static BASELINE: Mutex<BTreeMap<u64, Point>> = Mutex::new(BTreeMap::new());
static MDT: Mutex<BTreeMap<u64, (Chase, Point)>> = Mutex::new(BTreeMap::new());

fn log(line: String) {
    eprintln!("    {line}");
}

fn baseline(seed: u64) -> Point {
    if let Some(p) = BASELINE.lock().unwrap().get(&seed) {
        return *p;
    }
    let mut run = Run::new("baseline", seed);
    let p = run.score(FINAL);
    log(format!("baseline seed {seed}: step {FINAL} swd {:.5} pair {:.4} ({:.0}s train)", p.swd, p.pair, run.secs));
    BASELINE.lock().unwrap().insert(seed, p);
    p
}

/// Trains `name` and scores it on the grid up to `limit` until its swd is at
/// most `target`; then, if `finish`, carries it on to the final step.
fn chase(name: &str, seed: u64, target: f64, limit: u64, finish: bool) -> Chase {
    let mut run = Run::new(name, seed);
    let mut reached = None;
    let mut step = GRID;
    while step <= limit && reached.is_none() {
        let p = run.score(step);
        log(format!("{name} seed {seed}: step {step} swd {:.5} pair {:.4} (target {target:.5})", p.swd, p.pair));
        if p.swd <= target {
            reached = Some(step);
        }
        step += GRID;
    }
    let last = finish.then(|| {
        let p = run.score(FINAL);
        log(format!("{name} seed {seed}: step {FINAL} swd {:.5} pair {:.4} ({:.0}s train)", p.swd, p.pair, run.secs));
        p
    });
    Chase { reached, last }
}

fn mdt(seed: u64) -> (Chase, Point) {
    if let Some(r) = MDT.lock().unwrap().get(&seed) {
        return *r;
    }
    let target = baseline(seed).swd;
    let c = chase("mdt", seed, target, FINAL * 7 / 10, true);
    let r = (c, c.last.unwrap());
    MDT.lock().unwrap().insert(seed, r);
    r
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ratio(c: &Chase) -> f64 {
    c.reached.map_or(f64::INFINITY, |s| s as f64 / FINAL as f64)
}

fn fmt_ratios(v: &[f64]) -> String {
    v.iter()
        .map(|r| if r.is_finite() { format!("{r:.1}") } else { "none".into() })
        .collect::<Vec<_>>()
        .join("/")
}

pub fn convergence_trend() -> Verdict {
    let mut r_mdt = Vec::new();
    let mut r_v2 = Vec::new();
    let mut pair_gain = Vec::new();
    for seed in SEEDS {
        let base = baseline(seed);
        let (c, last) = mdt(seed);
        r_mdt.push(ratio(&c));
        pair_gain.push(last.pair - base.pair);
        let c2 = chase("mdtv2", seed, base.swd, FINAL / 2, false);
        r_v2.push(ratio(&c2));
    }
    let (m1, m2, g) = (median(r_mdt.clone()), median(r_v2.clone()), median(pair_gain.clone()));
    Verdict::new(
        m1 <= 0.7 && m2 <= 0.5 && g >= 0.05,
        format!(
            "steps to baseline's {FINAL}-step swd as a fraction of {FINAL}: MDT median {m1:.1} (seeds {}; need ≤ 0.7), MDTv2 median {m2:.1} (seeds {}; need ≤ 0.5); pair_consistency gain at {FINAL} median {g:+.4} (seeds {}; need ≥ 0.05)",
            fmt_ratios(&r_mdt),
            fmt_ratios(&r_v2),
            pair_gain.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join("/")
        ),
    )
}

pub fn ablation_directions() -> Verdict {
    let full: Vec<f64> = SEEDS.iter().map(|&s| mdt(s).1.swd).collect();
    let full_med = median(full.clone());
    let mut pass = true;
    let mut parts = vec![format!("full MDT median swd {full_med:.5}")];
    for name in ["mdt-no-side", "mdt-masked-only", "mdt-no-relbias"] {
        let swd: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let mut run = Run::new(name, seed);
                let p = run.score(FINAL);
                log(format!("{name} seed {seed}: step {FINAL} swd {:.5} pair {:.4} ({:.0}s train)", p.swd, p.pair, run.secs));
                p.swd
            })
            .collect();
        let m = median(swd);
        pass &= m > full_med;
        parts.push(format!("{name} {m:.5}"));
    }
    Verdict::new(pass, parts.join(", "))
}
