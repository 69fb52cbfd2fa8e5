//! The three training stages: VQGAN pretraining, Stage I code predictor,
//! Stage II code critic. A `Trainer` owns all mutable state; every source
//! of randomness flows through its single rng, so runs are reproducible
//! from (config, data, seed) and resumable from a checkpoint.

mod losses;
mod optim;

pub use losses::*;
pub use optim::Adam;

use crate::ckpt::{Checkpoint, CkptMeta, RngState};
use crate::config::{Stage, TrainConfig};
use crate::error::{DehazeError, Result};
use crate::nn::{grids_to_tensor, images_to_tensor, tokens_to_grids, DehazeModel, NamedParams};
use crate::schedule::{fuse, fuse_tensor, mask_count, random_mask};
use crate::tensor::Tensor;
use crate::vq::{lookup_tensor, quantize, straight_through, CodeSequence, DeadCodeTracker};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

/// (clean, hazy) training pair.
pub type Pair = (Array3<f32>, Array3<f32>);

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub items: Vec<(&'static str, f64)>,
}

impl StepMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.items.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn csv_header(&self) -> String {
        let names: Vec<&str> = self.items.iter().map(|(n, _)| *n).collect();
        format!("step,{}", names.join(","))
    }

    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self.items.iter().map(|(_, v)| format!("{v:.6}")).collect();
        format!("{},{}", self.step, vals.join(","))
    }
}

pub struct Trainer {
    pub model: DehazeModel<f32>,
    pub stage: Stage,
    pub cfg: TrainConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    opt: Adam<f32>,
    disc_opt: Option<Adam<f32>>,
    tracker: DeadCodeTracker,
}

impl Trainer {
    pub fn new(model: DehazeModel<f32>, stage: Stage, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt_params = stage_params(&model, stage);
        let opt = Adam::new(&opt_params, cfg.learning_rate);
        let disc_opt = match stage {
            Stage::Vqgan => Some(Adam::new(&model.disc_params(), cfg.learning_rate)),
            _ => None,
        };
        let tracker = DeadCodeTracker::new(model.cfg.codebook_size, cfg.dead_code_steps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            stage,
            cfg,
            step: 0,
            rng,
            opt,
            disc_opt,
            tracker,
        })
    }

    /// When entering Stage I, start the low-quality encoder from the
    /// high-quality one's weights.
    pub fn init_enc_l_from_enc_h(&self) {
        self.model.enc_l.copy_from(&self.model.enc_h);
    }

    pub fn step_batch(&mut self, pairs: &[Pair]) -> Result<StepMetrics> {
        if pairs.is_empty() {
            return Err(DehazeError::contract("empty batch"));
        }
        for (_, p) in self.model.all_params() {
            p.zero_grad();
        }
        let metrics = match self.stage {
            Stage::Vqgan => self.vqgan_step(pairs)?,
            Stage::Predictor => self.predictor_step(pairs)?,
            Stage::Critic => self.critic_step(pairs)?,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// VQGAN pretraining on clean patches: reconstruction, VQ code loss,
    /// perceptual loss, and the adversarial pair.
    fn vqgan_step(&mut self, pairs: &[Pair]) -> Result<StepMetrics> {
        let clean: Vec<Array3<f32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        let x = images_to_tensor::<f32>(&clean);
        let enc = self.model.enc_h.forward(&x)?;
        let grids = tokens_to_grids(&enc.tokens);
        let (m, n, d) = (
            grids[0].shape()[0],
            grids[0].shape()[1],
            grids[0].shape()[2],
        );
        let mut zc_parts = Vec::with_capacity(grids.len());
        let mut matched = Vec::new();
        for g in &grids {
            let (seq, _) = quantize(g, &self.model.codebook)?;
            matched.extend(seq.flat());
            let zc = lookup_tensor(&seq, &self.model.codebook)?;
            zc_parts.push(zc.reshape(&[1, m, n, d]));
        }
        let z_c = Tensor::concat(&zc_parts, 0);
        let st = straight_through(&enc.tokens, &z_c)?;
        let rec = self
            .model
            .decoder
            .forward(&st, &enc.skip_half, &enc.skip_full)?;

        let l1 = loss_l1(&rec, &x)?;
        let feat_target = self.model.feature_net.forward(&x);
        let feat_rec = self.model.feature_net.forward(&rec);
        let per = loss_l1(&feat_rec, &feat_target)?;
        let proj = self
            .model
            .guide_proj
            .forward(&enc.tokens.transpose_axes(&[0, 3, 1, 2]));
        let l_code = crate::vq::code_loss(
            &enc.tokens,
            &z_c,
            &proj,
            &feat_target,
            self.cfg.beta_commit,
            self.cfg.lambda_g,
        )?;
        let d_fake = self.model.discriminator.forward(&rec);
        let adv_g = loss_adv(&d_fake, &d_fake, AdvSide::Generator);
        let total = l1
            .add(&l_code)
            .add(&per)
            .add(&adv_g.scale(self.cfg.lambda_adv));
        let total_v = total.scalar();
        if !total_v.is_finite() {
            return Err(DehazeError::NonFinite(format!(
                "vqgan loss at step {}",
                self.step
            )));
        }
        total.backward();
        self.opt.step()?;

        // discriminator update on a detached reconstruction
        let disc_opt = self.disc_opt.as_mut().expect("vqgan stage has a disc opt");
        disc_opt.zero_grad();
        let d_real = self.model.discriminator.forward(&x);
        let d_fake2 = self
            .model
            .discriminator
            .forward(&Tensor::constant(rec.value()));
        let adv_d = loss_adv(&d_real, &d_fake2, AdvSide::Discriminator);
        let adv_d_v = adv_d.scalar();
        adv_d.backward();
        disc_opt.step()?;

        // revive codes the encoder stopped matching
        let dead = self.tracker.observe(&matched);
        if !dead.is_empty() {
            let flat = enc.tokens.value();
            let rows = Array2::from_shape_fn((grids.len() * m * n, d), |(r, c)| {
                flat[[r / (m * n), (r / n) % m, r % n, c]]
            });
            self.tracker
                .revive(&dead, &self.model.codebook, &rows, &mut self.rng);
        }

        Ok(StepMetrics {
            step: self.step,
            items: vec![
                ("l1", l1.scalar()),
                ("code", l_code.scalar()),
                ("per", per.scalar()),
                ("adv_g", adv_g.scalar()),
                ("adv_d", adv_d_v),
                ("total", total_v),
            ],
        })
    }

    /// Stage I: train E_L, the predictor, and SFT against frozen codebook
    /// and decoder. Masked fusion follows the cosine schedule at a random
    /// ratio each step.
    fn predictor_step(&mut self, pairs: &[Pair]) -> Result<StepMetrics> {
        let clean: Vec<Array3<f32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        let hazy: Vec<Array3<f32>> = pairs.iter().map(|(_, h)| h.clone()).collect();
        let x_clean = images_to_tensor::<f32>(&clean);
        let x_hazy = images_to_tensor::<f32>(&hazy);

        let enc_l = self.model.enc_l.forward(&x_hazy)?;
        let grids_h = tokens_to_grids(&self.model.enc_h.forward(&x_clean)?.tokens);
        let (m, n, d) = (
            grids_h[0].shape()[0],
            grids_h[0].shape()[1],
            grids_h[0].shape()[2],
        );
        let total_pos = m * n;

        let mut fused_parts = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len() * total_pos);
        for (b, g_h) in grids_h.iter().enumerate() {
            let (s_h, z_c) = quantize(g_h, &self.model.codebook)?;
            labels.extend(s_h.flat());
            // r in (0,1]: full mask at r -> 1 is the t=1 boundary
            let r = 1.0 - self.rng.gen_range(0.0..1.0);
            let k = mask_count(r, total_pos)?;
            let mask = random_mask(k, m, n, &mut self.rng)?;
            let z_l_b = enc_l
                .tokens
                .slice_axis_op(0, b, b + 1)
                .reshape(&[m, n, d]);
            let z_c_b = Tensor::constant(z_c.into_dyn());
            let fused = fuse_tensor(&z_l_b, &z_c_b, &mask)?;
            fused_parts.push(fused.reshape(&[1, m, n, d]));
        }
        let fused = Tensor::concat(&fused_parts, 0);
        let logits = self.model.predictor.forward(&fused)?;
        let l_ce = loss_ce(&logits, &labels)?;

        // decode the straight-through quantized prediction for image losses
        let probs = logits.softmax_last();
        let z_soft = probs.matmul(&self.model.codebook.codes.detach());
        let logits_v = logits
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let pred_flat = argmax_rows(&logits_v);
        let codes = self.model.codebook.codes_array();
        let mut hard = ArrayD::<f32>::zeros(IxDyn(&[pairs.len() * total_pos, d]));
        let mut correct = 0usize;
        for (r, &k) in pred_flat.iter().enumerate() {
            if k == labels[r] {
                correct += 1;
            }
            hard.slice_mut(ndarray::s![r, ..]).assign(&codes.row(k));
        }
        let st = straight_through(&z_soft, &Tensor::constant(hard))?
            .reshape(&[pairs.len(), m, n, d]);
        let rec = self
            .model
            .decoder
            .forward(&st, &enc_l.skip_half, &enc_l.skip_full)?;

        let l1 = loss_l1(&rec, &x_clean)?;
        let feat_target = self.model.feature_net.forward(&x_clean);
        let per = loss_l1(&self.model.feature_net.forward(&rec), &feat_target)?;
        let d_fake = self.model.discriminator.forward(&rec);
        let adv_g = loss_adv(&d_fake, &d_fake, AdvSide::Generator);
        let total = l1
            .add(&per)
            .add(&adv_g.scale(self.cfg.lambda_adv))
            .add(&l_ce);
        let total_v = total.scalar();
        if !total_v.is_finite() {
            return Err(DehazeError::NonFinite(format!(
                "predictor loss at step {}",
                self.step
            )));
        }
        total.backward();
        self.opt.step()?;

        Ok(StepMetrics {
            step: self.step,
            items: vec![
                ("ce", l_ce.scalar()),
                ("l1", l1.scalar()),
                ("per", per.scalar()),
                ("adv_g", adv_g.scalar()),
                ("total", total_v),
                (
                    "code_acc",
                    correct as f64 / (pairs.len() * total_pos) as f64,
                ),
            ],
        })
    }

    /// Stage II: sample codes from the tempered predictor distribution,
    /// label each position by whether the sample disagrees with the clean
    /// code, and train only the critic on BCE.
    fn critic_step(&mut self, pairs: &[Pair]) -> Result<StepMetrics> {
        let clean: Vec<Array3<f32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        let hazy: Vec<Array3<f32>> = pairs.iter().map(|(_, h)| h.clone()).collect();
        let x_clean = images_to_tensor::<f32>(&clean);
        let x_hazy = images_to_tensor::<f32>(&hazy);

        let grids_l = tokens_to_grids(&self.model.enc_l.forward(&x_hazy)?.tokens);
        let grids_h = tokens_to_grids(&self.model.enc_h.forward(&x_clean)?.tokens);
        let (m, n) = (grids_h[0].shape()[0], grids_h[0].shape()[1]);
        let total_pos = m * n;

        let mut fused_grids = Vec::with_capacity(pairs.len());
        let mut target_seqs = Vec::with_capacity(pairs.len());
        for (g_l, g_h) in grids_l.iter().zip(grids_h.iter()) {
            let (s_h, z_c) = quantize(g_h, &self.model.codebook)?;
            let r = 1.0 - self.rng.gen_range(0.0..1.0);
            let k = mask_count(r, total_pos)?;
            let mask = random_mask(k, m, n, &mut self.rng)?;
            fused_grids.push(fuse(g_l, &z_c, &mask)?);
            target_seqs.push(s_h);
        }
        let fused = grids_to_tensor(&fused_grids);
        let logits = self
            .model
            .predictor
            .forward(&fused)?
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let probs = temperature_softmax(&logits, self.cfg.temperature)?;

        let mut sampled_seqs = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len() * total_pos);
        for (b, s_h) in target_seqs.iter().enumerate() {
            let mut s = Array2::<usize>::zeros((m, n));
            for i in 0..m {
                for j in 0..n {
                    let row = b * total_pos + i * n + j;
                    let pick = sample_multinomial(&probs, row, &mut self.rng);
                    s[(i, j)] = pick;
                    labels.push(u8::from(pick != s_h.0[(i, j)]));
                }
            }
            sampled_seqs.push(CodeSequence(s));
        }
        let scores = self.model.critic.forward(&sampled_seqs)?;
        // keep sigmoid outputs strictly inside (0,1) for the log terms
        let p = scores.scale(1.0 - 2e-6).add_scalar(1e-6);
        let loss = loss_bce_flat(&p, &labels)?;
        let loss_v = loss.scalar();
        if !loss_v.is_finite() {
            return Err(DehazeError::NonFinite(format!(
                "critic loss at step {}",
                self.step
            )));
        }
        loss.backward();
        self.opt.step()?;

        let wrong_frac =
            labels.iter().map(|&l| l as f64).sum::<f64>() / labels.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            items: vec![("bce", loss_v), ("wrong_frac", wrong_frac)],
        })
    }

    /// Run until `max_steps`, drawing batches from `data` with replacement.
    /// Metrics go to `log` as CSV every `log_every` steps.
    pub fn run(
        &mut self,
        data: &[Pair],
        log: Option<&mut dyn Write>,
        log_every: usize,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(DehazeError::contract("empty training set"));
        }
        let mut log = log;
        let mut wrote_header = false;
        while self.step < self.cfg.max_steps {
            let batch: Vec<Pair> = (0..self.cfg.batch_size)
                .map(|_| data[self.rng.gen_range(0..data.len())].clone())
                .collect();
            let metrics = self.step_batch(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                if !wrote_header {
                    writeln!(w, "{}", metrics.csv_header())?;
                    wrote_header = true;
                }
                if metrics.step % log_every.max(1) == 0 || metrics.step == self.cfg.max_steps {
                    writeln!(w, "{}", metrics.csv_line())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CkptMeta {
            format_version: 1,
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            stage: self.stage,
            step: self.step,
            rng: RngState::capture(&self.rng),
            adam_t: self.opt.t,
        };
        let mut ck = Checkpoint::new(meta);
        ck.insert_params(&self.model.all_params());
        insert_opt_state(&mut ck, &self.opt, "opt_g");
        if let Some(d) = &self.disc_opt {
            insert_opt_state(&mut ck, d, "opt_d");
        }
        let (last_used, tstep) = self.tracker.export();
        ck.insert_array(
            "tracker.last_used",
            &ArrayD::from_shape_vec(
                IxDyn(&[last_used.len()]),
                last_used.iter().map(|&v| v as f32).collect(),
            )
            .unwrap(),
        );
        ck.insert_array(
            "tracker.step",
            &ArrayD::from_elem(IxDyn(&[1]), tstep as f32),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let model = DehazeModel::<f32>::new(ck.meta.model.clone(), 0)?;
        ck.restore_params(&model.all_params())?;
        let mut trainer = Trainer::new(model, ck.meta.stage, ck.meta.train.clone())?;
        trainer.step = ck.meta.step;
        trainer.rng = ck.meta.rng.restore()?;
        trainer.opt.t = ck.meta.adam_t;
        restore_opt_state(ck, &mut trainer.opt, "opt_g")?;
        if let Some(d) = &mut trainer.disc_opt {
            d.t = ck.meta.adam_t;
            restore_opt_state(ck, d, "opt_d")?;
        }
        let last_used = ck.get_array("tracker.last_used")?;
        let tstep = ck.get_array("tracker.step")?[[0]] as u64;
        trainer
            .tracker
            .import(last_used.iter().map(|&v| v as u64).collect(), tstep);
        Ok(trainer)
    }
}

/// The trainable parameter group for a stage. Everything else is frozen:
/// predictor training fixes the codebook and decoder; critic training
/// fixes everything but the critic.
pub fn stage_params(model: &DehazeModel<f32>, stage: Stage) -> NamedParams<f32> {
    match stage {
        Stage::Vqgan => model.vqgan_params(),
        Stage::Predictor => model.predictor_stage_params(),
        Stage::Critic => model.critic_stage_params(),
    }
}

/// Build a model with weights from a checkpoint (inference entry point).
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<DehazeModel<f32>> {
    let model = DehazeModel::<f32>::new(ck.meta.model.clone(), 0)?;
    ck.restore_params(&model.all_params())?;
    Ok(model)
}

fn insert_opt_state(ck: &mut Checkpoint, opt: &Adam<f32>, prefix: &str) {
    for (i, name) in opt.names.iter().enumerate() {
        ck.insert_array(&format!("{prefix}.m.{name}"), &opt.m[i]);
        ck.insert_array(&format!("{prefix}.v.{name}"), &opt.v[i]);
    }
}

fn restore_opt_state(ck: &Checkpoint, opt: &mut Adam<f32>, prefix: &str) -> Result<()> {
    for (i, name) in opt.names.clone().iter().enumerate() {
        opt.m[i] = ck.get_array(&format!("{prefix}.m.{name}"))?;
        opt.v[i] = ck.get_array(&format!("{prefix}.v.{name}"))?;
    }
    Ok(())
}

/// One categorical draw from row `row` of a probability matrix.
pub fn sample_multinomial(probs: &Array2<f64>, row: usize, rng: &mut ChaCha8Rng) -> usize {
    let k = probs.shape()[1];
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for c in 0..k {
        acc += probs[(row, c)];
        if draw < acc {
            return c;
        }
    }
    k - 1
}
