use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{gen_synthetic_pairs, Normalization, SyntheticSpec};
use crate::masking::MaskSpec;
use crate::network::{init_params, ForwardOutput, InitScheme, Mdt, ModelConfig, Variant, WiringTrace};
use crate::numerics::{Graph, ParameterTree, SeededRng, Stream, Tensor};
use crate::schedules::NoiseSchedule;

fn small_schedule() -> NoiseSchedule {
    NoiseSchedule::default_linear()
}

fn draws_for(model: &Mdt, b: usize, seed: u64, cfg: &TrainConfig) -> StepDraws<f64> {
    let mut rng = SeededRng::new(seed, Stream::Data);
    let numel = model.geometry().latent_numel();
    let x: Vec<f64> = (0..b * numel).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<usize> = (0..b).map(|i| i % model.config().classes).collect();
    let mut rngs = TrainRngs::new(seed);
    draw_step(model, &small_schedule(), cfg, Tensor::from_f64(&[b, numel], &x).unwrap(), &labels, &mut rngs).unwrap()
}

#[test]
fn oracle_prediction_gives_zero_mse() {
    let sched = small_schedule();
    let mut g = Graph::<f64>::new();
    let eps = Tensor::from_f64(&[4, 2], &[0.1, -0.4, 1.0, 2.0, 0.0, 0.3, -1.2, 0.7]).unwrap();
    let v = g.constant(eps.clone());
    let out = ForwardOutput {
        eps: v,
        var_logits: None,
        embedded: v,
        encoder_out: v,
        decoder_input: None,
        trace: WiringTrace::default(),
    };
    let targets = LossTargets {
        x0: eps.clone(),
        x_t: eps.clone(),
        eps,
    };
    let ctx = LossContext {
        sched: &sched,
        t: &[3, 900],
        min_snr_gamma: 5.0,
        vlb_lambda: 0.0,
        tokens_per_sample: 2,
    };
    let l = diffusion_loss(&mut g, &out, &targets, &ctx, None).unwrap();
    assert_eq!(g.value(l.total).data()[0], 0.0);
}

#[test]
fn min_snr_weights_per_term() {
    let sched = small_schedule();
    let t: Vec<usize> = (1..=1000).step_by(37).collect();
    let ctx = |gamma| LossContext {
        sched: &sched,
        t: &t,
        min_snr_gamma: gamma,
        vlb_lambda: 0.0,
        tokens_per_sample: 1,
    };
    let plain = mse_row_weights(&ctx(f64::INFINITY), 1, None).unwrap();
    let clamped = mse_row_weights(&ctx(5.0), 1, None).unwrap();
    for ((&ti, p), c) in t.iter().zip(&plain).zip(&clamped) {
        let snr = sched.snr(ti).unwrap();
        if snr > 5.0 {
            assert!(c < p);
        } else {
            assert_eq!(c, p);
        }
    }
}

#[test]
fn masked_only_supervision_differs_from_all_tokens() {
    let sched = small_schedule();
    let ctx = LossContext {
        sched: &sched,
        t: &[10],
        min_snr_gamma: f64::INFINITY,
        vlb_lambda: 0.0,
        tokens_per_sample: 4,
    };
    let mask = [MaskSpec::from_masked(vec![true, false, false, true], 0.5)];
    let all = mse_row_weights(&ctx, 1, None).unwrap();
    let masked = mse_row_weights(&ctx, 1, Some(&mask)).unwrap();
    assert_eq!(all, vec![0.25; 4]);
    assert_eq!(masked, vec![0.5, 0.0, 0.0, 0.5]);
}

#[test]
fn loss_matches_direct_formula() {
    let cfg_m = ModelConfig::toy(Variant::V1);
    let model = Mdt::new(cfg_m.clone()).unwrap();
    let params: ParameterTree<f64> = init_params(&cfg_m, InitScheme::Random { std: 0.1 }, 1).unwrap();
    let cfg = TrainConfig {
        min_snr_gamma: 5.0,
        ..TrainConfig::default()
    };
    let sched = small_schedule();
    let draws = draws_for(&model, 3, 2, &cfg);
    let (losses, _) = dual_pass_grads(&model, &params, &draws, &sched, &cfg).unwrap();

    // straight-line: x_t, inference prediction, weighted squared error
    let numel = model.geometry().latent_numel();
    let mut x_t = Vec::new();
    for (r, &t) in draws.t.iter().enumerate() {
        let ab = sched.alpha_bar(t).unwrap();
        for i in 0..numel {
            x_t.push(ab.sqrt() * draws.x0.row(r)[i] + (1.0 - ab).sqrt() * draws.eps.row(r)[i]);
        }
    }
    let x_t = Tensor::from_f64(&[3, numel], &x_t).unwrap();
    let tf: Vec<f64> = draws.t.iter().map(|&t| t as f64).collect();
    let (eps_hat, _) = model.predict(&params, &x_t, &tf, &draws.labels).unwrap();
    let mut expect = 0.0;
    for (r, &t) in draws.t.iter().enumerate() {
        let snr = sched.alpha_bar(t).unwrap() / (1.0 - sched.alpha_bar(t).unwrap());
        let w = snr.min(5.0) / snr;
        for i in 0..numel {
            expect += w * (eps_hat.row(r)[i] - draws.eps.row(r)[i]).powi(2);
        }
    }
    expect /= (3 * numel) as f64;
    assert!((losses.full - expect).abs() < 1e-6, "{} vs {expect}", losses.full);
}

#[test]
fn zero_ratio_doubles_full_loss() {
    let cfg_m = ModelConfig::toy(Variant::V2);
    let model = Mdt::new(cfg_m.clone()).unwrap();
    let params: ParameterTree<f64> = init_params(&cfg_m, InitScheme::Random { std: 0.1 }, 3).unwrap();
    let cfg = TrainConfig {
        mask_ratio: (0.0, 0.0),
        ..TrainConfig::default()
    };
    let draws = draws_for(&model, 2, 4, &cfg);
    let (l, _) = dual_pass_grads(&model, &params, &draws, &small_schedule(), &cfg).unwrap();
    assert_eq!(l.masked, Some(l.full));
    assert_eq!(l.total, 2.0 * l.full);
}

#[test]
fn joint_gradient_is_sum_of_pass_gradients() {
    let cfg_m = ModelConfig::toy(Variant::V1);
    let model = Mdt::new(cfg_m.clone()).unwrap();
    let params: ParameterTree<f64> = init_params(&cfg_m, InitScheme::Random { std: 0.1 }, 5).unwrap();
    let cfg = TrainConfig::default();
    let sched = small_schedule();
    let draws = draws_for(&model, 2, 6, &cfg);
    let (_, joint) = dual_pass_grads(&model, &params, &draws, &sched, &cfg).unwrap();

    let mut per_pass = Vec::new();
    for take_masked in [false, true] {
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let (_, full, masked) = dual_pass_loss(&model, &mut g, &pv, &draws, &sched, &cfg).unwrap();
        let target = if take_masked { masked.unwrap() } else { full };
        let grads = g.backward(target).unwrap();
        per_pass.push(ParameterTree::from_map(g.param_grads(&grads)));
    }
    let mut sum = per_pass[0].clone();
    sum.add_assign(&per_pass[1]).unwrap();
    for ((name, a), (_, b)) in joint.iter().zip(sum.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}");
        }
    }
}

#[test]
fn label_dropout_rate() {
    let model = Mdt::new(ModelConfig::toy(Variant::V1)).unwrap();
    let cfg = TrainConfig::default();
    let mut rngs = TrainRngs::new(9);
    let numel = model.geometry().latent_numel();
    let mut dropped = 0;
    let total = 10_000;
    for _ in 0..total / 100 {
        let d = draw_step::<f32>(&model, &small_schedule(), &cfg, Tensor::zeros(&[100, numel]), &[0; 100], &mut rngs)
            .unwrap();
        dropped += d.labels.iter().filter(|&&l| l == model.null_label()).count();
    }
    let frac = dropped as f64 / total as f64;
    assert!((frac - 0.1).abs() < 0.01, "{frac}");
}

#[test]
fn per_sample_masks_follow_ratio_range() {
    let model = Mdt::new(ModelConfig::toy(Variant::V2)).unwrap();
    let cfg = TrainConfig {
        mask_ratio: (0.3, 0.5),
        ..TrainConfig::default()
    };
    let d = draws_for(&model, 64, 1, &cfg);
    let counts: Vec<usize> = d.masks.iter().map(|m| m.masked_count()).collect();
    assert!(counts.iter().all(|&c| (5..=8).contains(&c)), "{counts:?}");
    assert!(counts.iter().any(|&c| c != counts[0]));
    assert!(d.t.iter().all(|&t| (1..=1000).contains(&t)));
}

#[test]
fn learned_variance_bound_gradients() {
    let mut cfg_m = ModelConfig::toy(Variant::V1);
    cfg_m.learn_sigma = true;
    cfg_m.depth = 3;
    cfg_m.decoder_depth = 1;
    cfg_m.dim = 16;
    cfg_m.heads = 2;
    cfg_m.freq_dim = 8;
    let model = Mdt::new(cfg_m.clone()).unwrap();
    let theta: ParameterTree<f64> = init_params(&cfg_m, InitScheme::Random { std: 0.3 }, 11).unwrap();
    let cfg = TrainConfig {
        vlb_lambda: 0.5,
        ..TrainConfig::default()
    };
    let sched = small_schedule();
    let mut draws = draws_for(&model, 3, 12, &cfg);
    draws.t = vec![1, 2, 600];
    draws.x0.data_mut()[0] = -1.0;
    draws.x0.data_mut()[1] = 1.0;
    let (with, _) = dual_pass_grads(&model, &theta, &draws, &sched, &cfg).unwrap();
    let (without, _) = dual_pass_grads(
        &model,
        &theta,
        &draws,
        &sched,
        &TrainConfig {
            vlb_lambda: 0.0,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(with.total > without.total);
    // The mean inside the bound is detached, so only coordinates feeding the
    // variance head can be compared against central differences.
    let (_, grads) = dual_pass_grads(&model, &theta, &draws, &sched, &cfg).unwrap();
    let td = model.geometry().token_dim();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, idx) in (td..2 * td)
        .map(|i| ("final.b", i))
        .chain((0..cfg_m.dim).step_by(3).map(|r| ("final.w", r * 2 * td + td + r % td)))
    {
        let mut probe = theta.clone();
        let orig = probe.require(name).unwrap().data()[idx];
        probe.get_mut(name).unwrap().data_mut()[idx] = orig + h;
        let up = dual_pass_grads(&model, &probe, &draws, &sched, &cfg).unwrap().0.total;
        probe.get_mut(name).unwrap().data_mut()[idx] = orig - h;
        let down = dual_pass_grads(&model, &probe, &draws, &sched, &cfg).unwrap().0.total;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.require(name).unwrap().data()[idx];
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
    assert!(worst < 1e-6, "{worst}");

    // the ε head receives no gradient from the bound
    let (_, plain) = dual_pass_grads(
        &model,
        &theta,
        &draws,
        &sched,
        &TrainConfig {
            vlb_lambda: 0.0,
            ..cfg.clone()
        },
    )
    .unwrap();
    let a = &grads.require("final.b").unwrap().data()[..td];
    let b = &plain.require("final.b").unwrap().data()[..td];
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-14, "{x} vs {y}");
    }
}

fn tiny_data(n: usize) -> crate::data::Dataset {
    let raw = gen_synthetic_pairs(&SyntheticSpec::new(2, 2, 8, n), 0).unwrap();
    Normalization::fit(&raw).unwrap().apply(&raw).unwrap()
}

#[test]
fn resume_is_bit_identical_and_zero_steps_is_initial() {
    let data = tiny_data(32);
    let cfg = TrainConfig {
        batch: 8,
        optimizer: OptimizerConfig::adan(1e-3),
        seed: 4,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig::toy(Variant::V2);
    let mut a = Trainer::new(mcfg.clone(), small_schedule(), cfg.clone(), data.len()).unwrap();
    let initial = a.params().clone();
    train_loop(&mut a, &data, 0, |_, _| Ok(())).unwrap();
    assert_eq!(a.params(), &initial);
    assert_eq!(a.ema(), &initial);
    for _ in 0..3 {
        a.step(&data).unwrap();
    }
    let mut b = Trainer::from_state(mcfg, small_schedule(), cfg, a.state()).unwrap();
    for _ in 0..10 {
        let ma = a.step(&data).unwrap();
        let mb = b.step(&data).unwrap();
        assert_eq!(ma.csv_row(), mb.csv_row());
    }
    assert_eq!(a.params(), b.params());
    assert_eq!(a.ema(), b.ema());
}

#[test]
fn ema_is_not_part_of_the_graph() {
    let data = tiny_data(16);
    let cfg = TrainConfig {
        batch: 4,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig::toy(Variant::V1);
    let a = Trainer::new(mcfg.clone(), small_schedule(), cfg.clone(), data.len()).unwrap();
    let mut state = a.state();
    for (_, t) in state.ema.iter_mut() {
        *t = t.map(|v| v + 1.0);
    }
    let mut b = Trainer::from_state(mcfg, small_schedule(), cfg, state).unwrap();
    let mut a = a;
    assert_eq!(a.step(&data).unwrap(), b.step(&data).unwrap());
}

#[test]
fn memorization_loss_decreases() {
    let data = tiny_data(64);
    let cfg = TrainConfig {
        batch: 64,
        optimizer: OptimizerConfig::adamw(1e-3),
        label_dropout: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(ModelConfig::toy(Variant::V1), small_schedule(), cfg, data.len()).unwrap();
    let mut losses = Vec::new();
    train_loop(&mut tr, &data, 200, |m, _| {
        losses.push(m.loss_full);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}
