//! Sample-quality metrics (sliced Wasserstein distance and the pair
//! consistency of synthetic-pairs samples) and the convergence-comparison
//! harness that trains several configurations side by side.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{DataKind, RunConfig};
use crate::data::{gen_synthetic_pairs, pair_slots, Dataset, Normalization, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::Mdt;
use crate::numerics::{ParameterTree, Scalar, SeededRng, Stream, Tensor};
use crate::sampling::{ddpm_sample, ModelDenoiser};
use crate::training::Trainer;

/// Seed offset separating the held-out reference draw from the training set.
const HELD_OUT_SEED_OFFSET: u64 = 0x9e37_79b9;

/// Exact 1-D 2-Wasserstein distance between two sorted empirical samples of
/// possibly different sizes, by walking both quantile functions.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let mut acc = 0.0;
    let denom = (n * m) as f64;
    while i < n && j < m {
        // next breakpoint on the common grid of 1/(n·m)
        let (ni, nj) = (((i + 1) * m) as u128, ((j + 1) * n) as u128);
        let next = ni.min(nj);
        let d = a[i] - b[j];
        acc += (next - prev) as f64 / denom * d * d;
        prev = next;
        if ni == next {
            i += 1;
        }
        if nj == next {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Mean over `n_proj` random unit directions of the 1-D 2-Wasserstein
/// distance between the projected sets. Rows are samples.
pub fn sliced_wasserstein<T: Scalar, R: Rng + ?Sized>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::shape2("sliced_wasserstein", a.shape(), b.shape()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Contract("sliced_wasserstein needs non-empty sets".into()));
    }
    if n_proj < 64 {
        return Err(Error::Config(format!("n_proj must be at least 64, got {n_proj}")));
    }
    let d = a.cols();
    let project = |x: &Tensor<T>, dir: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = (0..x.rows())
            .map(|r| x.row(r).iter().zip(dir).map(|(&v, &u)| v.to_f64().unwrap() * u).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += w2_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(total / n_proj as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    /// Pearson correlation in `[-1, 1]`, or 0 when degenerate.
    pub score: f64,
    /// Set when either side of the pairs has (near) zero variance.
    pub degenerate: bool,
}

/// Largest value in the 3×3 footprint around `(row, col)`, clipped to the grid.
fn footprint_max<T: Scalar>(sample: &[T], spec: &SyntheticSpec, channel: usize, row: usize, col: usize) -> f64 {
    let (h, w) = (spec.height, spec.width);
    let mut best = f64::NEG_INFINITY;
    for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
        for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
            best = best.max(sample[channel * h * w + r * w + c].to_f64().unwrap());
        }
    }
    best
}

/// Pearson correlation, pooled over samples and pair slots, between the
/// amplitudes measured at the two members of every mirror pair of the
/// sample's class. Samples must be in the generator's (unnormalized) space.
pub fn pair_consistency<T: Scalar>(samples: &Tensor<T>, labels: &[usize], spec: &SyntheticSpec) -> Result<PairScore> {
    let numel = spec.channels * spec.height * spec.width;
    if samples.shape() != [labels.len(), numel] {
        return Err(Error::shape2("pair_consistency", samples.shape(), &[labels.len(), numel]));
    }
    let slots: Vec<_> = (0..spec.classes).map(|c| pair_slots(spec, c)).collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (r, &label) in labels.iter().enumerate() {
        let class_slots = slots
            .get(label)
            .ok_or_else(|| Error::Range(format!("label {label} >= {} classes", spec.classes)))?;
        for slot in class_slots {
            let [(ra, ca), (rb, cb)] = slot.centres();
            xs.push(footprint_max(samples.row(r), spec, slot.channel, ra, ca));
            ys.push(footprint_max(samples.row(r), spec, slot.channel, rb, cb));
        }
    }
    Ok(pearson(&xs, &ys))
}

fn pearson(xs: &[f64], ys: &[f64]) -> PairScore {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    // relative floor so that constant inputs with rounding noise count as flat
    let scale = xs.iter().chain(ys).map(|v| v * v).sum::<f64>().max(1e-300);
    if xs.is_empty() || sxx <= 1e-24 * scale || syy <= 1e-24 * scale {
        return PairScore {
            score: 0.0,
            degenerate: true,
        };
    }
    PairScore {
        score: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    pub swd: f64,
    /// `None` for data without pair structure.
    pub pair: Option<PairScore>,
    pub per_class_swd: Vec<f64>,
    pub seconds: f64,
    pub fingerprint: String,
}

/// Held-out reference set for a configuration, in raw data space.
pub fn reference_set(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.kind {
        DataKind::SyntheticPairs => {
            let spec = SyntheticSpec {
                size: cfg.eval.samples,
                ..cfg.synthetic_spec()
            };
            gen_synthetic_pairs(&spec, cfg.data.seed.wrapping_add(HELD_OUT_SEED_OFFSET))
        }
        DataKind::IdxImages => cfg.dataset(),
    }
}

/// Balanced labels `i mod classes`.
pub fn balanced_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Draws `eval.samples` samples with the configured sampler and returns them
/// in raw data space with their labels.
pub fn generate(
    model: &Mdt,
    params: &ParameterTree<f32>,
    cfg: &RunConfig,
    norm: &Normalization,
    seed: u64,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let labels = balanced_labels(cfg.eval.samples, cfg.data.classes);
    let mut sampler = cfg.sampler(labels.clone());
    sampler.seed = seed;
    let latents: Tensor<f32> = ddpm_sample(&ModelDenoiser { model, params }, &sampler, &cfg.schedule()?)?;
    let ds = Dataset::new(
        latents,
        labels.clone(),
        cfg.data.classes,
        [cfg.data.channels, cfg.data.height, cfg.data.height],
    )?;
    Ok((norm.invert(&ds)?.x, labels))
}

/// Metrics of generated samples against a reference set.
pub fn score_samples(
    samples: &Tensor<f32>,
    labels: &[usize],
    reference: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(f64, Option<PairScore>, Vec<f64>)> {
    let mut rng = SeededRng::new(seed, Stream::Eval);
    let swd = sliced_wasserstein(samples, &reference.x, cfg.eval.n_proj, &mut rng)?;
    let mut per_class = Vec::with_capacity(cfg.data.classes);
    for c in 0..cfg.data.classes {
        let pick = |ls: &[usize]| -> Vec<usize> { (0..ls.len()).filter(|&i| ls[i] == c).collect() };
        let (gi, ri) = (pick(labels), pick(&reference.labels));
        if gi.is_empty() || ri.is_empty() {
            per_class.push(f64::NAN);
            continue;
        }
        let g = gather(samples, &gi)?;
        let (r, _) = reference.gather(&ri)?;
        let mut rng = SeededRng::new(seed, Stream::Eval);
        per_class.push(sliced_wasserstein(&g, &r, cfg.eval.n_proj, &mut rng)?);
    }
    let pair = match cfg.data.kind {
        DataKind::SyntheticPairs => Some(pair_consistency(samples, labels, &cfg.synthetic_spec())?),
        DataKind::IdxImages => None,
    };
    Ok((swd, pair, per_class))
}

fn gather<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * x.cols());
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), x.cols()], data)
}

/// One row of the comparison matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub seed: u64,
    pub step: u64,
    pub swd: f64,
    pub pair_consistency: f64,
    pub seconds: f64,
}

pub const COMPARE_HEADER: &str = "name,seed,step,swd,pair_consistency,seconds";

impl CompareRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.name, self.seed, self.step, self.swd, self.pair_consistency, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub name: String,
    pub seed: u64,
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub failures: Vec<RunFailure>,
}

impl CompareOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Trains one configuration with `seed` and evaluates the EMA-or-live tree
/// (per `sampling.use_ema`) at each of `eval_steps`. Step 0 evaluates the
/// initial parameters. `on_report` sees each report as it is produced.
pub fn run_with_evals(
    cfg: &RunConfig,
    seed: u64,
    eval_steps: &[u64],
    mut on_report: impl FnMut(&EvalReport) -> Result<()>,
) -> Result<Vec<EvalReport>> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let raw = cfg.dataset()?;
    let norm = Normalization::fit(&raw)?;
    let data = norm.apply(&raw)?;
    let reference = reference_set(&cfg)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.schedule()?, cfg.train.clone(), data.len())?;
    let mut steps: Vec<u64> = eval_steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let fingerprint = cfg.fingerprint();
    let mut reports = Vec::with_capacity(steps.len());
    let mut train_secs = 0.0;
    for &target in &steps {
        let t0 = Instant::now();
        while trainer.step_count() < target {
            trainer.step(&data)?;
        }
        train_secs += t0.elapsed().as_secs_f64();
        let params = if cfg.sampling.use_ema { trainer.ema() } else { trainer.params() };
        let (samples, labels) = generate(trainer.model(), params, &cfg, &norm, seed)?;
        let (swd, pair, per_class_swd) = score_samples(&samples, &labels, &reference, &cfg, seed)?;
        let report = EvalReport {
            step: target,
            swd,
            pair,
            per_class_swd,
            seconds: train_secs,
            fingerprint: fingerprint.clone(),
        };
        on_report(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Trains every named configuration for every seed and evaluates at
/// `eval_steps`. A failing run is recorded and the remaining runs continue.
pub fn compare_convergence(
    configs: &[(String, RunConfig)],
    eval_steps: &[u64],
    seeds: &[u64],
    mut on_row: impl FnMut(&CompareRow),
) -> CompareOutcome {
    let mut out = CompareOutcome::default();
    for (name, cfg) in configs {
        for &seed in seeds {
            let mut last_step = 0;
            let res = run_with_evals(cfg, seed, eval_steps, |r| {
                last_step = r.step;
                let row = CompareRow {
                    name: name.clone(),
                    seed,
                    step: r.step,
                    swd: r.swd,
                    pair_consistency: r.pair.map_or(f64::NAN, |p| p.score),
                    seconds: r.seconds,
                };
                on_row(&row);
                out.rows.push(row);
                Ok(())
            });
            if let Err(e) = res {
                out.failures.push(RunFailure {
                    name: name.clone(),
                    seed,
                    step: last_step,
                    message: e.to_string(),
                });
            }
        }
    }
    out
}
