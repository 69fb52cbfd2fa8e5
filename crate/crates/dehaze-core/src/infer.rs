//! Iterative predictor-critic decoding and the ablation baselines
//! (one-shot, confidence-guided, nearest-neighbor matching).

use crate::error::{DehazeError, Result};
use crate::imgio;
use crate::nn::{images_to_tensor, tensor_to_images, DehazeModel, EncodeOut};
use crate::schedule::{fuse, mask_count, select_mask_by_critic, MaskMap, SelectMode};
use crate::tensor::Tensor;
use crate::train::{argmax_rows, sample_multinomial, temperature_softmax};
use crate::vq::{lookup, quantize, CodeSequence};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Multinomial draw from softmax(logits) at temperature 1.
    Multinomial,
    Argmax,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub iters: usize,
    pub sample: SampleMode,
    /// Softmax temperature for multinomial sampling (ignored by argmax).
    pub temperature: f64,
    pub select: SelectMode,
    /// Keep codes at retained (unmasked) positions instead of re-predicting
    /// them each iteration. Off by default: the loop re-predicts everywhere.
    pub freeze_unmasked: bool,
    /// Decode an image at every iteration for trace dumps.
    pub trace_images: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            iters: 8,
            sample: SampleMode::Multinomial,
            temperature: 1.0,
            select: SelectMode::TopK,
            freeze_unmasked: false,
            trace_images: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub codes: Vec<Vec<usize>>,
    /// Mask selected for the next iteration (all zeros after the last).
    pub mask: Vec<Vec<u8>>,
    pub mask_count: usize,
    /// Nearest-neighbor distances (nn-matching mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub image: Option<Array3<f32>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn final_codes(&self) -> Result<CodeSequence> {
        let last = self
            .steps
            .last()
            .ok_or_else(|| DehazeError::contract("empty decode trace"))?;
        let m = last.codes.len();
        let n = last.codes[0].len();
        Ok(CodeSequence(Array2::from_shape_fn((m, n), |(i, j)| {
            last.codes[i][j]
        })))
    }

    pub fn mask_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.mask_count).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Dump per-iteration decoded frames as `iter_{t:02}.png`.
    pub fn save_frames(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in &self.steps {
            if let Some(img) = &s.image {
                imgio::save_png(&dir.join(format!("iter_{:02}.png", s.t)), img)?;
            }
        }
        Ok(())
    }
}

/// Padded low-quality encoding shared by every decode mode.
struct Encoded {
    tokens: Array3<f32>, // (m, n, d)
    enc: EncodeOut<f32>,
    dims: (usize, usize),
}

fn encode_input(img: &Array3<f32>, model: &DehazeModel<f32>) -> Result<Encoded> {
    let (padded, dims) = imgio::pad_reflect(img, 4 * model.cfg.window);
    let x = images_to_tensor::<f32>(&[padded]);
    let enc = model.enc_l.forward(&x)?;
    let v = enc.tokens.value();
    let (m, n, d) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    let tokens = Array3::from_shape_fn((m, n, d), |(i, j, k)| v[[0, i, j, k]]);
    Ok(Encoded { tokens, enc, dims })
}

fn decode_codes(model: &DehazeModel<f32>, seq: &CodeSequence, enc: &Encoded) -> Result<Array3<f32>> {
    let z_c = lookup(seq, &model.codebook)?;
    let (m, n, d) = (z_c.shape()[0], z_c.shape()[1], z_c.shape()[2]);
    let t = Tensor::constant(z_c.into_dyn()).reshape(&[1, m, n, d]);
    let out = model
        .decoder
        .forward(&t, &enc.enc.skip_half, &enc.enc.skip_full)?;
    let img = tensor_to_images(&out).remove(0);
    Ok(imgio::crop_to(&img.mapv(|v| v.clamp(0.0, 1.0)), enc.dims))
}

fn predict_codes(
    model: &DehazeModel<f32>,
    fused: &Array3<f32>,
    sample: SampleMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(CodeSequence, Array2<f64>)> {
    let (m, n, d) = (fused.shape()[0], fused.shape()[1], fused.shape()[2]);
    let t = Tensor::constant(fused.clone().into_dyn()).reshape(&[1, m, n, d]);
    let logits = model
        .predictor
        .forward(&t)?
        .value()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let probs = temperature_softmax(&logits, temperature)?;
    let flat: Vec<usize> = match sample {
        SampleMode::Argmax => argmax_rows(&logits),
        SampleMode::Multinomial => (0..m * n)
            .map(|r| sample_multinomial(&probs, r, rng))
            .collect(),
    };
    let seq = CodeSequence(Array2::from_shape_fn((m, n), |(i, j)| flat[i * n + j]));
    Ok((seq, probs))
}

enum Guidance {
    Critic,
    Confidence,
}

fn guided_decode(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
    guidance: Guidance,
) -> Result<(Array3<f32>, DecodeTrace)> {
    if opts.iters < 1 {
        return Err(DehazeError::contract("decode needs at least one iteration"));
    }
    let enc = encode_input(img, model)?;
    let (m, n) = (enc.tokens.shape()[0], enc.tokens.shape()[1]);
    let total = m * n;
    let t_max = opts.iters;

    let mut mask = MaskMap::ones(m, n);
    let mut z_c = Array3::<f32>::zeros(enc.tokens.raw_dim());
    let mut prev_seq: Option<CodeSequence> = None;
    let mut trace = DecodeTrace::default();

    for t in 1..=t_max {
        let fused = fuse(&enc.tokens, &z_c, &mask)?;
        let (mut seq, probs) = predict_codes(model, &fused, opts.sample, opts.temperature, rng)?;
        if opts.freeze_unmasked {
            if let Some(prev) = &prev_seq {
                for i in 0..m {
                    for j in 0..n {
                        if mask.bits[(i, j)] == 0 {
                            seq.0[(i, j)] = prev.0[(i, j)];
                        }
                    }
                }
            }
        }
        z_c = lookup(&seq, &model.codebook)?;

        let k = mask_count(t as f64 / t_max as f64, total)?;
        let next_mask = if k == 0 {
            MaskMap::zeros(m, n)
        } else {
            let scores = match guidance {
                Guidance::Critic => model.critic.scores(&[seq.clone()])?.remove(0),
                Guidance::Confidence => {
                    // mask the least-confident positions: score = 1 - max prob
                    Array2::from_shape_fn((m, n), |(i, j)| {
                        let row = i * n + j;
                        let conf = probs
                            .row(row)
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        1.0 - conf
                    })
                }
            };
            select_mask_by_critic(&scores, k, opts.select, rng)?
        };

        trace.steps.push(TraceStep {
            t,
            codes: (0..m)
                .map(|i| (0..n).map(|j| seq.0[(i, j)]).collect())
                .collect(),
            mask: (0..m)
                .map(|i| (0..n).map(|j| next_mask.bits[(i, j)]).collect())
                .collect(),
            mask_count: k,
            distances: None,
            image: if opts.trace_images {
                Some(decode_codes(model, &seq, &enc)?)
            } else {
                None
            },
        });
        mask = next_mask;
        prev_seq = Some(seq);
    }

    let final_seq = trace.final_codes()?;
    let out = decode_codes(model, &final_seq, &enc)?;
    Ok((out, trace))
}

/// Algorithm-faithful iterative decoding with critic-selected masks.
pub fn iterative_decode(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, DecodeTrace)> {
    guided_decode(img, model, opts, rng, Guidance::Critic)
}

/// Single predictor pass with argmax sampling; consumes no randomness.
pub fn one_shot_decode(img: &Array3<f32>, model: &DehazeModel<f32>) -> Result<Array3<f32>> {
    let opts = DecodeOptions {
        iters: 1,
        sample: SampleMode::Argmax,
        ..DecodeOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, _) = guided_decode(img, model, &opts, &mut rng, Guidance::Critic)?;
    Ok(out)
}

/// One-shot decode that also returns its trace (for code-level metrics).
pub fn one_shot_decode_traced(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
) -> Result<(Array3<f32>, DecodeTrace)> {
    let opts = DecodeOptions {
        iters: 1,
        sample: SampleMode::Argmax,
        ..DecodeOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    guided_decode(img, model, &opts, &mut rng, Guidance::Critic)
}

/// Ablation: same loop, but masks follow predictor confidence instead of
/// the critic.
pub fn confidence_decode(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, DecodeTrace)> {
    guided_decode(img, model, opts, rng, Guidance::Confidence)
}

/// Ablation: nearest-neighbor matching in place of the predictor. The code
/// assignment is a pure function of Z_l, so iterating cannot change it.
pub fn nn_matching_decode(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
    iters: usize,
    trace_images: bool,
) -> Result<(Array3<f32>, DecodeTrace)> {
    if iters < 1 {
        return Err(DehazeError::contract("decode needs at least one iteration"));
    }
    let enc = encode_input(img, model)?;
    let (m, n) = (enc.tokens.shape()[0], enc.tokens.shape()[1]);
    let total = m * n;
    let (seq, quantized) = quantize(&enc.tokens, &model.codebook)?;
    let d = enc.tokens.shape()[2];
    let distances = Array2::from_shape_fn((m, n), |(i, j)| {
        (0..d)
            .map(|c| {
                let diff = enc.tokens[(i, j, c)] as f64 - quantized[(i, j, c)] as f64;
                diff * diff
            })
            .sum::<f64>()
    });

    let mut trace = DecodeTrace::default();
    for t in 1..=iters {
        let k = mask_count(t as f64 / iters as f64, total)?;
        // retain the closest matches; mask the farthest
        let next_mask = if k == 0 {
            MaskMap::zeros(m, n)
        } else {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.sort_by(|&a, &b| {
                let da = distances[(a / n, a % n)];
                let db = distances[(b / n, b % n)];
                db.partial_cmp(&da).unwrap()
            });
            let mut mask = MaskMap::zeros(m, n);
            for &p in &idx[..k] {
                mask.bits[(p / n, p % n)] = 1;
            }
            mask
        };
        trace.steps.push(TraceStep {
            t,
            codes: (0..m)
                .map(|i| (0..n).map(|j| seq.0[(i, j)]).collect())
                .collect(),
            mask: (0..m)
                .map(|i| (0..n).map(|j| next_mask.bits[(i, j)]).collect())
                .collect(),
            mask_count: k,
            distances: Some(
                (0..m)
                    .map(|i| (0..n).map(|j| distances[(i, j)]).collect())
                    .collect(),
            ),
            image: if trace_images {
                Some(decode_codes(model, &seq, &enc)?)
            } else {
                None
            },
        });
    }
    let out = decode_codes(model, &seq, &enc)?;
    Ok((out, trace))
}

/// Which decoder drives a dehaze/eval run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Critic,
    Confidence,
    Nn,
    Oneshot,
}

impl std::str::FromStr for DecodeMode {
    type Err = DehazeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "critic" => Ok(DecodeMode::Critic),
            "confidence" => Ok(DecodeMode::Confidence),
            "nn" => Ok(DecodeMode::Nn),
            "oneshot" => Ok(DecodeMode::Oneshot),
            other => Err(DehazeError::Config(format!("unknown decode mode '{other}'"))),
        }
    }
}

pub fn decode_with_mode(
    img: &Array3<f32>,
    model: &DehazeModel<f32>,
    mode: DecodeMode,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, DecodeTrace)> {
    match mode {
        DecodeMode::Critic => iterative_decode(img, model, opts, rng),
        DecodeMode::Confidence => confidence_decode(img, model, opts, rng),
        DecodeMode::Nn => nn_matching_decode(img, model, opts.iters, opts.trace_images),
        DecodeMode::Oneshot => one_shot_decode_traced(img, model),
    }
}

/// Clean-image code targets: quantize E_H(clean).
pub fn target_codes(clean: &Array3<f32>, model: &DehazeModel<f32>) -> Result<CodeSequence> {
    let (padded, _) = imgio::pad_reflect(clean, 4 * model.cfg.window);
    let x = images_to_tensor::<f32>(&[padded]);
    let v = model.enc_h.forward(&x)?.tokens.value();
    let (m, n, d) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    let grid = Array3::from_shape_fn((m, n, d), |(i, j, k)| v[[0, i, j, k]]);
    Ok(quantize(&grid, &model.codebook)?.0)
}

/// Decode every (clean, hazy) pair and report PSNR / SSIM / code accuracy.
/// Per-image randomness derives from (seed, index).
pub fn evaluate_pairs(
    model: &DehazeModel<f32>,
    pairs: &[(String, Array3<f32>, Array3<f32>)],
    mode: DecodeMode,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<crate::metrics::EvalReport> {
    let mut report = crate::metrics::EvalReport::default();
    for (i, (name, clean, hazy)) in pairs.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (out, trace) = decode_with_mode(hazy, model, mode, opts, &mut rng)?;
        let s_h = target_codes(clean, model)?;
        let acc = crate::metrics::code_accuracy(&trace.final_codes()?, &s_h)?;
        report.push(
            name.clone(),
            crate::metrics::psnr(&out, clean)?,
            crate::metrics::ssim(&out, clean)?,
            acc,
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn toy_model() -> DehazeModel<f32> {
        DehazeModel::new(ModelConfig::toy(), 21).unwrap()
    }

    fn hazy_img(size: usize) -> Array3<f32> {
        Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            (((y * 5 + x * 3 + c * 7) % 19) as f32 / 19.0) * 0.5 + 0.4
        })
    }

    #[test]
    fn schedule_counts_match_derived_sequence() {
        let model = toy_model();
        let img = hazy_img(64); // 16x16 grid, N=256
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = DecodeOptions::default();
        let (_, trace) = iterative_decode(&img, &model, &opts, &mut rng).unwrap();
        let expect: Vec<usize> = (1..=8)
            .map(|t| {
                if t == 8 {
                    0 // gamma(1) = 0 exactly
                } else {
                    ((std::f64::consts::PI * t as f64 / 16.0).cos() * 256.0).ceil() as usize
                }
            })
            .collect();
        assert_eq!(expect, vec![252, 237, 213, 182, 143, 98, 50, 0]);
        assert_eq!(trace.mask_counts(), expect);
    }

    #[test]
    fn decode_is_seed_deterministic() {
        let model = toy_model();
        let img = hazy_img(32);
        let opts = DecodeOptions::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            iterative_decode(&img, &model, &opts, &mut rng).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(
            ta.final_codes().unwrap().0,
            tb.final_codes().unwrap().0
        );
    }

    #[test]
    fn one_shot_is_t1_argmax() {
        let model = toy_model();
        let img = hazy_img(32);
        let a = one_shot_decode(&img, &model).unwrap();
        let opts = DecodeOptions {
            iters: 1,
            sample: SampleMode::Argmax,
            ..DecodeOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (b, trace) = iterative_decode(&img, &model, &opts, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].mask_count, 0);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nn_matching_codes_invariant_across_iterations() {
        let model = toy_model();
        let img = hazy_img(32);
        let (_, trace) = nn_matching_decode(&img, &model, 6, false).unwrap();
        let first = &trace.steps[0].codes;
        for s in &trace.steps {
            assert_eq!(&s.codes, first);
            for row in s.distances.as_ref().unwrap() {
                assert!(row.iter().all(|&d| d >= 0.0));
            }
        }
    }

    #[test]
    fn confidence_matches_synthetic_critic() {
        // with critic scores exactly 1 - confidence, both guidances pick
        // identical masks under argmax sampling
        let model = toy_model();
        let img = hazy_img(32);
        let opts = DecodeOptions {
            iters: 4,
            sample: SampleMode::Argmax,
            ..DecodeOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, conf_trace) = confidence_decode(&img, &model, &opts, &mut rng).unwrap();
        // reproduce the confidence masks by hand from the same loop state
        let enc = encode_input(&img, &model).unwrap();
        let (m, n) = (enc.tokens.shape()[0], enc.tokens.shape()[1]);
        let mut mask = MaskMap::ones(m, n);
        let mut z_c = Array3::<f32>::zeros(enc.tokens.raw_dim());
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        for (t, step) in (1..=4).zip(conf_trace.steps.iter()) {
            let fused = fuse(&enc.tokens, &z_c, &mask).unwrap();
            let (seq, probs) = predict_codes(&model, &fused, SampleMode::Argmax, 1.0, &mut rng2).unwrap();
            z_c = lookup(&seq, &model.codebook).unwrap();
            let k = mask_count(t as f64 / 4.0, m * n).unwrap();
            let next = if k == 0 {
                MaskMap::zeros(m, n)
            } else {
                let scores = Array2::from_shape_fn((m, n), |(i, j)| {
                    1.0 - probs
                        .row(i * n + j)
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                });
                select_mask_by_critic(&scores, k, SelectMode::TopK, &mut rng2).unwrap()
            };
            let got: Vec<Vec<u8>> = (0..m)
                .map(|i| (0..n).map(|j| next.bits[(i, j)]).collect())
                .collect();
            assert_eq!(step.mask, got);
            mask = next;
        }
    }

    #[test]
    fn padded_input_restores_original_dims() {
        let model = toy_model();
        let img = hazy_img(30); // not divisible by 4
        let out = one_shot_decode(&img, &model).unwrap();
        assert_eq!(out.shape(), img.shape());
    }

    #[test]
    fn trace_json_round_trip() {
        let model = toy_model();
        let img = hazy_img(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let opts = DecodeOptions {
            iters: 3,
            ..DecodeOptions::default()
        };
        let (_, trace) = iterative_decode(&img, &model, &opts, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        trace.save_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: DecodeTrace = serde_json::from_str(&text).unwrap();
        assert_eq!(back.steps.len(), 3);
        assert_eq!(back.final_codes().unwrap().0, trace.final_codes().unwrap().0);
    }

    #[test]
    fn rejects_zero_iters() {
        let model = toy_model();
        let img = hazy_img(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = DecodeOptions {
            iters: 0,
            ..DecodeOptions::default()
        };
        assert!(iterative_decode(&img, &model, &opts, &mut rng).is_err());
    }
}
