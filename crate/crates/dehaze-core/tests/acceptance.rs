//! End-to-end acceptance suite. Each test prints one summary line
//! (`acceptance NN <name>: pass`) so a log scrape shows every criterion.
//!
//! The heavier checks share one trained pipeline (VQGAN -> predictor ->
//! critic on a synthetic haze dataset) through a `OnceLock`.

use dehaze_core::ckpt::params_checksum;
use dehaze_core::config::{ModelConfig, Stage, TrainConfig};
use dehaze_core::haze::{make_clean_images, make_dataset, synthesize_pair, HazeParams};
use dehaze_core::imgio;
use dehaze_core::infer::{
    evaluate_pairs, iterative_decode, nn_matching_decode, DecodeMode, DecodeOptions, SampleMode,
};
use dehaze_core::metrics::{psnr, ranking_auc};
use dehaze_core::nn::{images_to_tensor, normal_array, tensor_to_images, DehazeModel, Sft};
use dehaze_core::schedule::mask_count;
use dehaze_core::tensor::Tensor;
use dehaze_core::train::{
    loss_adv, loss_bce_flat, loss_ce, loss_l1, sample_multinomial, temperature_softmax, AdvSide,
    Pair, Trainer,
};
use dehaze_core::vq::{code_loss, quantize, straight_through, Codebook};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn report(num: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {num:02} {name}: {} ({detail})",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "acceptance {num:02} {name} failed: {detail}");
}

// ---------------------------------------------------------------- data ----

/// RESIDE-style set: `count` random 64x64 crops of `sources` procedural
/// scenes, each with its own haze draw.
fn cropped_pairs(sources: usize, count: usize, seed: u64) -> Vec<Pair> {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    make_clean_images(&src, sources, 96, seed).unwrap();
    let out = dir.path().join("pairs");
    let manifest = make_dataset(&src, count, seed, &out, 64).unwrap();
    manifest
        .iter()
        .map(|e| {
            (
                imgio::load_png(&e.clean_path).unwrap(),
                imgio::load_png(&e.hazy_path).unwrap(),
            )
        })
        .collect()
}

fn synth_pairs(count: usize, size: usize, seed: u64) -> Vec<Pair> {
    let dir = tempfile::tempdir().unwrap();
    let paths = make_clean_images(dir.path(), count, size, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    paths
        .iter()
        .map(|p| {
            let clean = imgio::load_png(p).unwrap();
            let hazy = synthesize_pair(&clean, &HazeParams::sample(&mut rng)).unwrap();
            (clean, hazy)
        })
        .collect()
}

fn named(pairs: &[Pair]) -> Vec<(String, Array3<f32>, Array3<f32>)> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (c, h))| (format!("pair_{i:04}"), c.clone(), h.clone()))
        .collect()
}

/// Encode clean -> quantize -> decode, i.e. the autoencoder round trip.
fn reconstruct(model: &DehazeModel<f32>, clean: &[Array3<f32>]) -> Vec<Array3<f32>> {
    let x = images_to_tensor::<f32>(&clean.to_vec());
    let enc = model.enc_h.forward(&x).unwrap();
    let v = enc.tokens.value();
    let (b, m, n, d) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let mut q = ArrayD::<f32>::zeros(IxDyn(&[b, m, n, d]));
    for s in 0..b {
        let grid = Array3::from_shape_fn((m, n, d), |(i, j, k)| v[[s, i, j, k]]);
        let (_, zq) = quantize(&grid, &model.codebook).unwrap();
        for i in 0..m {
            for j in 0..n {
                for k in 0..d {
                    q[[s, i, j, k]] = zq[(i, j, k)];
                }
            }
        }
    }
    let rec = model
        .decoder
        .forward(&Tensor::constant(q), &enc.skip_half, &enc.skip_full)
        .unwrap();
    tensor_to_images(&rec)
}

// ------------------------------------------------------ shared pipeline ----

/// Trained weights plus held-out pairs. The model itself is not `Send`
/// (its tensors are `Rc`-based), so tests share a checkpoint and rebuild.
struct Pipeline {
    ckpt: dehaze_core::ckpt::Checkpoint,
    held_out: Vec<(String, Array3<f32>, Array3<f32>)>,
    /// Separate eval split for the T-sweep shape check.
    held_sweep: Vec<(String, Array3<f32>, Array3<f32>)>,
}

impl Pipeline {
    fn model(&self) -> DehazeModel<f32> {
        dehaze_core::train::model_from_checkpoint(&self.ckpt).unwrap()
    }
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let train = cropped_pairs(16, 220, 404);
        // The critic generalizes poorly when it only ever scores predictions
        // on the 16 training scenes, so Stage II gets its own larger set.
        let critic_data = cropped_pairs(64, 2000, 2222);
        let held = cropped_pairs(16, 20, 606);
        let held_sweep = cropped_pairs(16, 20, 1414);

        let model = DehazeModel::<f32>::new(ModelConfig::toy(), 0).unwrap();
        let mut cfg = TrainConfig::toy(Stage::Vqgan);
        cfg.max_steps = 1200;
        let mut t = Trainer::new(model, Stage::Vqgan, cfg).unwrap();
        t.run(&train, None, usize::MAX).unwrap();

        let mut cfg = TrainConfig::toy(Stage::Predictor);
        cfg.max_steps = 1500;
        // favor observation-faithful predictions: the adversarial term makes
        // context-conditioned errors drift toward "plausible texture" codes
        // that decode further from the reference
        cfg.lambda_adv = 0.0;
        let mut t = Trainer::new(t.model, Stage::Predictor, cfg).unwrap();
        t.init_enc_l_from_enc_h();
        t.run(&train, None, usize::MAX).unwrap();

        let mut cfg = TrainConfig::toy(Stage::Critic);
        cfg.max_steps = 4000;
        let mut t = Trainer::new(t.model, Stage::Critic, cfg).unwrap();
        t.run(&critic_data, None, usize::MAX).unwrap();

        Pipeline {
            ckpt: t.to_checkpoint(),
            held_out: named(&held),
            held_sweep: named(&held_sweep),
        }
    })
}

fn eval_opts(iters: usize) -> DecodeOptions {
    DecodeOptions {
        iters,
        sample: SampleMode::Argmax,
        // keep codes the critic accepted instead of re-sampling them; with
        // argmax this makes the whole comparison deterministic and strictly
        // about the selection policy
        freeze_unmasked: true,
        ..DecodeOptions::default()
    }
}

// ------------------------------------------------------------ criteria ----

#[test]
fn c01_quantizer_matches_bruteforce_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=256);
        let d = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=5);
        let cb = Codebook::<f32>::new(k, d, &mut rng).unwrap();
        let grid = Array3::from_shape_fn((m, n, d), |_| {
            rng.gen_range(-2.0f32..2.0)
        });
        let (seq, zq) = quantize(&grid, &cb).unwrap();
        let codes = cb.codes_array();
        for i in 0..m {
            for j in 0..n {
                // exhaustive nearest neighbor in f64, lowest index on ties
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let dist: f64 = (0..d)
                        .map(|a| {
                            let diff = grid[(i, j, a)] as f64 - codes[(c, a)] as f64;
                            diff * diff
                        })
                        .sum();
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                assert_eq!(seq.0[(i, j)], best, "index mismatch at ({i},{j})");
                for a in 0..d {
                    assert_eq!(
                        zq[(i, j, a)].to_bits(),
                        codes[(best, a)].to_bits(),
                        "vector mismatch at ({i},{j},{a})"
                    );
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "quantizer-oracle",
        secs < 30.0,
        &format!("1000 instances, {checked} positions, {secs:.1}s"),
    );
}

#[test]
fn c02_schedule_exactness() {
    // T=8, N=256 trace from a real decode
    let model = DehazeModel::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let img = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
        (((y * 3 + x * 5 + c) % 17) as f32 / 17.0) * 0.6 + 0.3
    });
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, trace) = iterative_decode(&img, &model, &eval_opts(8), &mut rng).unwrap();
    let derived: Vec<usize> = (1..=8)
        .map(|t| {
            if t == 8 {
                0
            } else {
                ((std::f64::consts::PI * t as f64 / 16.0).cos() * 256.0).ceil() as usize
            }
        })
        .collect();
    let trace_ok = trace.mask_counts() == derived;

    // grid: counts nonincreasing and ending at 0 for every (T, N)
    let mut grid_ok = true;
    for t_total in 1..=10usize {
        for &n in &[16usize, 64, 256] {
            let counts: Vec<usize> = (1..=t_total)
                .map(|t| mask_count(t as f64 / t_total as f64, n).unwrap())
                .collect();
            grid_ok &= counts.windows(2).all(|w| w[1] <= w[0]);
            grid_ok &= *counts.last().unwrap() == 0;
        }
    }
    report(
        2,
        "schedule-exactness",
        trace_ok && grid_ok,
        &format!("trace {:?}, grid ok {grid_ok}", trace.mask_counts()),
    );
}

/// Central finite differences of `f` around `x0`, compared entrywise against
/// `analytic`. Returns the worst relative error.
fn fd_worst_err(
    x0: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    f: &dyn Fn(&ArrayD<f64>) -> f64,
) -> f64 {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let base = x0.as_slice().unwrap();
    for i in 0..base.len() {
        let mut plus = x0.clone();
        plus.as_slice_mut().unwrap()[i] += eps;
        let mut minus = x0.clone();
        minus.as_slice_mut().unwrap()[i] -= eps;
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        let an = analytic.as_slice().unwrap()[i];
        let diff = (fd - an).abs();
        if diff < 1e-8 {
            continue; // both effectively zero
        }
        worst = worst.max(diff / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

#[test]
fn c03_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tol = 1e-4;
    let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
    macro_rules! note {
        ($name:expr, $err:expr) => {{
            let e = $err;
            let w = worst.entry($name).or_insert(0.0);
            if e > *w {
                *w = e;
            }
        }};
    }

    for inst in 0..20 {
        // loss_l1: keep |a-b| away from the kink at 0
        let a0 = normal_array::<f64>(&[3, 4], 1.0, &mut rng);
        let b0 = a0.mapv(|v| v + 0.5 + 0.1 * (inst as f64 % 3.0));
        let a = Tensor::param(a0.clone());
        let l = loss_l1(&a, &Tensor::constant(b0.clone())).unwrap();
        l.backward();
        note!("loss_l1", fd_worst_err(&a0, &a.grad().unwrap(), &|x| {
            loss_l1(&Tensor::constant(x.clone()), &Tensor::constant(b0.clone()))
                .unwrap()
                .scalar()
        }));

        // code_loss wrt every differentiable input
        let zh0 = normal_array::<f64>(&[2, 2, 3], 1.0, &mut rng);
        let zc0 = normal_array::<f64>(&[2, 2, 3], 1.0, &mut rng);
        let pf0 = normal_array::<f64>(&[1, 2, 4, 4], 1.0, &mut rng);
        let tf0 = normal_array::<f64>(&[1, 2, 4, 4], 1.0, &mut rng);
        let beta = 0.25;
        let lam = 0.1;
        let zh = Tensor::param(zh0.clone());
        let zc = Tensor::param(zc0.clone());
        let pf = Tensor::param(pf0.clone());
        code_loss(&zh, &zc, &pf, &Tensor::constant(tf0.clone()), beta, lam)
            .unwrap()
            .backward();
        // finite-difference surrogates hold the stop-gradient copies fixed
        // at the base point, matching the defined backward
        let mean_sq = |a: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                / a.len() as f64
        };
        note!("code_loss", fd_worst_err(&zh0, &zh.grad().unwrap(), &|x| {
            mean_sq(&zc0, x)
        }));
        note!("code_loss", fd_worst_err(&zc0, &zc.grad().unwrap(), &|x| {
            beta * mean_sq(x, &zh0)
        }));
        note!("code_loss", fd_worst_err(&pf0, &pf.grad().unwrap(), &|x| {
            lam * mean_sq(x, &tf0)
        }));

        // loss_ce
        let lg0 = normal_array::<f64>(&[5, 7], 1.0, &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..7)).collect();
        let lg = Tensor::param(lg0.clone());
        loss_ce(&lg, &labels).unwrap().backward();
        note!("loss_ce", fd_worst_err(&lg0, &lg.grad().unwrap(), &|x| {
            loss_ce(&Tensor::constant(x.clone()), &labels).unwrap().scalar()
        }));

        // loss_bce on probabilities well inside (0,1)
        let p0 = ArrayD::from_shape_vec(
            IxDyn(&[8]),
            (0..8).map(|_| rng.gen_range(0.1..0.9)).collect(),
        )
        .unwrap();
        let bits: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2) as u8).collect();
        let p = Tensor::param(p0.clone());
        loss_bce_flat(&p, &bits).unwrap().backward();
        note!("loss_bce", fd_worst_err(&p0, &p.grad().unwrap(), &|x| {
            loss_bce_flat(&Tensor::constant(x.clone()), &bits)
                .unwrap()
                .scalar()
        }));

        // loss_adv, both sides, wrt both logit sets
        let dr0 = normal_array::<f64>(&[6], 1.0, &mut rng);
        let df0 = normal_array::<f64>(&[6], 1.0, &mut rng);
        for side in [AdvSide::Discriminator, AdvSide::Generator] {
            let dr = Tensor::param(dr0.clone());
            let df = Tensor::param(df0.clone());
            loss_adv(&dr, &df, side).backward();
            if side == AdvSide::Discriminator {
                note!("loss_adv", fd_worst_err(&dr0, &dr.grad().unwrap(), &|x| {
                    loss_adv(&Tensor::constant(x.clone()), &Tensor::constant(df0.clone()), side)
                        .scalar()
                }));
            }
            note!("loss_adv", fd_worst_err(&df0, &df.grad().unwrap(), &|x| {
                loss_adv(&Tensor::constant(dr0.clone()), &Tensor::constant(x.clone()), side)
                    .scalar()
            }));
        }

        // SFT modulation wrt decoder features, encoder features, and weights
        let sft = Sft::<f64>::new(2, 3);
        for (_, t) in sft.params() {
            let shape = t.value().shape().to_vec();
            t.set_value(normal_array(&shape, 0.3, &mut rng));
        }
        let fd0 = normal_array::<f64>(&[1, 3, 4, 4], 1.0, &mut rng);
        let fe0 = normal_array::<f64>(&[1, 2, 4, 4], 1.0, &mut rng);
        let fd_t = Tensor::param(fd0.clone());
        let fe_t = Tensor::param(fe0.clone());
        sft.forward(&fd_t, &fe_t).unwrap().square().mean_all().backward();
        let eval_sft = |d: &ArrayD<f64>, e: &ArrayD<f64>| {
            sft.forward(&Tensor::constant(d.clone()), &Tensor::constant(e.clone()))
                .unwrap()
                .square()
                .mean_all()
                .scalar()
        };
        note!("sft_modulate", fd_worst_err(&fd0, &fd_t.grad().unwrap(), &|x| {
            eval_sft(x, &fe0)
        }));
        note!("sft_modulate", fd_worst_err(&fe0, &fe_t.grad().unwrap(), &|x| {
            eval_sft(&fd0, x)
        }));

        // straight_through: the backward into z_h must equal the gradient of
        // the downstream loss taken at the forwarded value z_c
        let sh0 = normal_array::<f64>(&[2, 3], 1.0, &mut rng);
        let sc0 = normal_array::<f64>(&[2, 3], 1.0, &mut rng);
        let sh = Tensor::param(sh0.clone());
        let st = straight_through(&sh, &Tensor::constant(sc0.clone())).unwrap();
        for (a, b) in st.value().iter().zip(sc0.iter()) {
            assert!((a - b).abs() < 1e-12, "straight-through must forward z_c");
        }
        st.square().mean_all().backward();
        note!("straight_through", fd_worst_err(&sc0, &sh.grad().unwrap(), &|y| {
            Tensor::constant(y.clone()).square().mean_all().scalar()
        }));
    }

    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = worst
        .iter()
        .map(|(op, e)| format!("{op} {e:.1e}"))
        .collect();
    let all_ok = worst.values().all(|&e| e < tol);
    report(
        3,
        "gradient-correctness",
        all_ok && secs < 60.0,
        &format!("worst rel err per op: {}, {secs:.1}s", detail.join(", ")),
    );
}

#[test]
fn c04_frozen_parameter_contracts() {
    let pairs = synth_pairs(4, 64, 44);
    let model = DehazeModel::<f32>::new(ModelConfig::toy(), 5).unwrap();

    // predictor stage: codebook and decoder core stay frozen
    let mut t = Trainer::new(model, Stage::Predictor, TrainConfig::toy(Stage::Predictor)).unwrap();
    let frozen_before = params_checksum(
        &t.model
            .all_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("codebook.") || n.starts_with("dec."))
            .collect(),
    );
    let trained_before = params_checksum(&t.model.predictor_stage_params());
    for _ in 0..3 {
        t.step_batch(&pairs).unwrap();
    }
    let frozen_after = params_checksum(
        &t.model
            .all_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("codebook.") || n.starts_with("dec."))
            .collect(),
    );
    let pred_ok = frozen_before == frozen_after
        && trained_before != params_checksum(&t.model.predictor_stage_params());

    // critic stage: everything except the critic stays frozen
    let mut t = Trainer::new(t.model, Stage::Critic, TrainConfig::toy(Stage::Critic)).unwrap();
    let others_before = params_checksum(
        &t.model
            .all_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("critic."))
            .collect(),
    );
    let critic_before = params_checksum(&t.model.critic_stage_params());
    for _ in 0..3 {
        t.step_batch(&pairs).unwrap();
    }
    let others_after = params_checksum(
        &t.model
            .all_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("critic."))
            .collect(),
    );
    let critic_ok = others_before == others_after
        && critic_before != params_checksum(&t.model.critic_stage_params());

    report(
        4,
        "frozen-contracts",
        pred_ok && critic_ok,
        &format!("predictor stage {pred_ok}, critic stage {critic_ok}"),
    );
}

#[test]
fn c05_toy_vqgan_learns() {
    let start = Instant::now();
    let pairs = synth_pairs(16, 64, 55);
    let clean: Vec<Array3<f32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let baseline: f64 = pairs
        .iter()
        .map(|(c, h)| psnr(h, c).unwrap())
        .sum::<f64>()
        / pairs.len() as f64;

    let model = DehazeModel::<f32>::new(ModelConfig::toy(), 9).unwrap();
    let mut cfg = TrainConfig::toy(Stage::Vqgan);
    cfg.batch_size = 2; // keeps the 2,000-step run inside the time budget
    cfg.max_steps = 100;
    let mut t = Trainer::new(model, Stage::Vqgan, cfg).unwrap();
    t.run(&pairs, None, usize::MAX).unwrap();
    let mean_psnr = |m: &DehazeModel<f32>| {
        reconstruct(m, &clean)
            .iter()
            .zip(clean.iter())
            .map(|(r, c)| psnr(r, c).unwrap())
            .sum::<f64>()
            / clean.len() as f64
    };
    let at_100 = mean_psnr(&t.model);
    t.cfg.max_steps = 2000;
    t.run(&pairs, None, usize::MAX).unwrap();
    let at_end = mean_psnr(&t.model);

    let mins = start.elapsed().as_secs_f64() / 60.0;
    report(
        5,
        "toy-vqgan-learns",
        at_end > at_100 && at_end > baseline && mins <= 15.0,
        &format!(
            "psnr step100 {at_100:.2} dB, step2000 {at_end:.2} dB, hazy baseline {baseline:.2} dB, {mins:.1} min"
        ),
    );
}

#[test]
fn c06_iterative_beats_one_shot() {
    let start = Instant::now();
    let pl = pipeline();
    let model = pl.model();
    let iter8 = evaluate_pairs(&model, &pl.held_out, DecodeMode::Critic, &eval_opts(8), 6).unwrap();
    let oneshot =
        evaluate_pairs(&model, &pl.held_out, DecodeMode::Oneshot, &eval_opts(1), 6).unwrap();
    let gap = iter8.mean_code_accuracy() - oneshot.mean_code_accuracy();
    let psnr_ok = iter8.mean_psnr() >= oneshot.mean_psnr() - 0.1;
    let mins = start.elapsed().as_secs_f64() / 60.0;
    report(
        6,
        "iterative-beats-one-shot",
        gap > 0.0 && psnr_ok && mins <= 45.0,
        &format!(
            "acc T=8 {:.4} vs one-shot {:.4} (gap {gap:+.4}), psnr {:.2} vs {:.2} dB, {mins:.1} min",
            iter8.mean_code_accuracy(),
            oneshot.mean_code_accuracy(),
            iter8.mean_psnr(),
            oneshot.mean_psnr()
        ),
    );
}

#[test]
fn c07_critic_usefulness() {
    let pl = pipeline();
    let model = pl.model();
    let critic =
        evaluate_pairs(&model, &pl.held_out, DecodeMode::Critic, &eval_opts(8), 7).unwrap();
    let conf =
        evaluate_pairs(&model, &pl.held_out, DecodeMode::Confidence, &eval_opts(8), 7).unwrap();
    let order_ok = critic.mean_code_accuracy() >= conf.mean_code_accuracy();

    // ranking AUC of critic scores against ground-truth wrongness labels,
    // sampling codes the same way the critic was trained
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (_, clean, hazy) in &pl.held_out {
        let enc = model
            .enc_l
            .forward(&images_to_tensor::<f32>(&[hazy.clone()]))
            .unwrap();
        let logits = model
            .predictor
            .forward(&enc.tokens)
            .unwrap()
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let probs = temperature_softmax(&logits, 2.0).unwrap();
        let target = dehaze_core::infer::target_codes(clean, &model).unwrap();
        let (m, n) = (target.0.shape()[0], target.0.shape()[1]);
        let mut s = Array2::<usize>::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let pick = sample_multinomial(&probs, i * n + j, &mut rng);
                s[(i, j)] = pick;
                labels.push(u8::from(pick != target.0[(i, j)]));
            }
        }
        let sc = model
            .critic
            .scores(&[dehaze_core::vq::CodeSequence(s)])
            .unwrap();
        scores.extend(sc[0].iter().copied());
    }
    let auc = ranking_auc(&scores, &labels).unwrap();

    report(
        7,
        "critic-usefulness",
        order_ok && auc > 0.6,
        &format!(
            "acc critic {:.4} vs confidence {:.4}, auc {auc:.3}",
            critic.mean_code_accuracy(),
            conf.mean_code_accuracy()
        ),
    );
}

#[test]
fn c08_nn_matching_iteration_invariance() {
    let model = DehazeModel::<f32>::new(ModelConfig::toy(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut ok = true;
    for _ in 0..50 {
        let img = Array3::from_shape_fn((64, 64, 3), |_| rng.gen_range(0.0f32..1.0));
        let (_, trace) = nn_matching_decode(&img, &model, 6, false).unwrap();
        let first = &trace.steps[0].codes;
        ok &= trace.steps.iter().all(|s| &s.codes == first);
    }
    report(8, "nn-iteration-invariance", ok, "50 inputs, 6 iterations each");
}

#[test]
fn c09_t_sweep_shape() {
    let pl = pipeline();
    let start = Instant::now(); // the budget covers the sweep, not the shared training
    let model = pl.model();
    let ts = [3usize, 4, 6, 8, 10];
    let accs: Vec<f64> = ts
        .iter()
        .map(|&t| {
            evaluate_pairs(&model, &pl.held_sweep, DecodeMode::Critic, &eval_opts(t), 9)
                .unwrap()
                .mean_code_accuracy()
        })
        .collect();
    // nondecreasing from T=3 to T=8 within half a percentage point
    let trend_ok = accs.windows(2).take(3).all(|w| w[1] >= w[0] - 0.005);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    report(
        9,
        "t-sweep-shape",
        trend_ok && mins <= 20.0,
        &format!("acc at T={ts:?}: {accs:.4?}, {mins:.1} min"),
    );
}

#[test]
fn c10_determinism_and_persistence() {
    let start = Instant::now();

    // fixed-seed decode is bit-identical
    let model = DehazeModel::<f32>::new(ModelConfig::toy(), 10).unwrap();
    let img = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
        (((y + 2 * x + 3 * c) % 13) as f32 / 13.0) * 0.7 + 0.2
    });
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        iterative_decode(&img, &model, &DecodeOptions::default(), &mut rng)
            .unwrap()
            .0
    };
    let (a, b) = (run(), run());
    let decode_ok = a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits());

    // save -> load -> resume matches the unbroken run after 50 more steps
    let pairs = synth_pairs(8, 64, 1010);
    let mk = || {
        let model = DehazeModel::<f32>::new(ModelConfig::toy(), 11).unwrap();
        let mut cfg = TrainConfig::toy(Stage::Vqgan);
        cfg.max_steps = 30;
        Trainer::new(model, Stage::Vqgan, cfg).unwrap()
    };
    let mut unbroken = mk();
    unbroken.run(&pairs, None, usize::MAX).unwrap();
    unbroken.cfg.max_steps = 80;
    unbroken.run(&pairs, None, usize::MAX).unwrap();

    let mut broken = mk();
    broken.run(&pairs, None, usize::MAX).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    broken.to_checkpoint().save(&path).unwrap();
    let mut resumed =
        Trainer::from_checkpoint(&dehaze_core::ckpt::Checkpoint::load(&path).unwrap()).unwrap();
    resumed.cfg.max_steps = 80;
    resumed.run(&pairs, None, usize::MAX).unwrap();

    let resume_ok = params_checksum(&unbroken.model.all_params())
        == params_checksum(&resumed.model.all_params());

    let mins = start.elapsed().as_secs_f64() / 60.0;
    report(
        10,
        "determinism-persistence",
        decode_ok && resume_ok && mins < 5.0,
        &format!("decode bit-identical {decode_ok}, resume checksum match {resume_ok}, {mins:.1} min"),
    );
}
