//! The parametric models: encoders, SFT-modulated decoder, code predictor,
//! code critic, patch discriminator, and the frozen perceptual feature net.

use super::{normal_array, prefixed, Conv2d, LayerNorm, Linear, NamedParams, WindowBlock};
use crate::config::ModelConfig;
use crate::error::{DehazeError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vq::{Codebook, CodeSequence};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Encoder output: latent tokens plus the skip features SFT consumes.
pub struct EncodeOut<F: Scalar> {
    /// (B, m, n, d)
    pub tokens: Tensor<F>,
    /// (B, mid_channels, H/2, W/2)
    pub skip_half: Tensor<F>,
    /// (B, base_channels, H, W)
    pub skip_full: Tensor<F>,
}

/// Two-stage stride-2 conv encoder: H x W x 3 -> (H/4) x (W/4) x d.
pub struct Encoder<F: Scalar> {
    conv_in: Conv2d<F>,
    down1: Conv2d<F>,
    refine1: Conv2d<F>,
    down2: Conv2d<F>,
    before_quant: Conv2d<F>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c0, c1, d) = (cfg.base_channels, cfg.mid_channels, cfg.embed_dim);
        Encoder {
            conv_in: Conv2d::new(3, c0, 3, 1, 1, rng),
            down1: Conv2d::new(c0, c1, 3, 2, 1, rng),
            refine1: Conv2d::new(c1, c1, 3, 1, 1, rng),
            down2: Conv2d::new(c1, d, 3, 2, 1, rng),
            before_quant: Conv2d::new(d, d, 1, 1, 0, rng),
        }
    }

    /// images: (B, 3, H, W) with H, W divisible by 4.
    pub fn forward(&self, images: &Tensor<F>) -> Result<EncodeOut<F>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(DehazeError::Shape {
                expected: "(B, 3, H, W)".into(),
                got: format!("{shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(DehazeError::contract(format!(
                "encoder input dims {h}x{w} must be divisible by 4"
            )));
        }
        let f0 = self.conv_in.forward(images).leaky_relu(0.2);
        let f1 = self.down1.forward(&f0).leaky_relu(0.2);
        let f1 = self.refine1.forward(&f1).leaky_relu(0.2);
        let f2 = self.down2.forward(&f1).leaky_relu(0.2);
        let z = self.before_quant.forward(&f2);
        // (B, d, m, n) -> (B, m, n, d)
        let tokens = z.transpose_axes(&[0, 2, 3, 1]);
        Ok(EncodeOut {
            tokens,
            skip_half: f1,
            skip_full: f0,
        })
    }

    pub fn params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(self.conv_in.params("conv_in"));
        p.extend(self.down1.params("down1"));
        p.extend(self.refine1.params("refine1"));
        p.extend(self.down2.params("down2"));
        p.extend(self.before_quant.params("before_quant"));
        p
    }

    /// Overwrite this encoder's weights with another's values.
    pub fn copy_from(&self, other: &Encoder<F>) {
        for ((_, dst), (_, src)) in self.params().iter().zip(other.params().iter()) {
            dst.set_value(src.value());
        }
    }
}

/// Spatial feature transform: F_d + alpha .* F_d + beta, with (alpha, beta)
/// from a zero-initialized conv over concat(F_e, F_d). Identity at init.
pub struct Sft<F: Scalar> {
    conv: Conv2d<F>,
    channels: usize,
}

impl<F: Scalar> Sft<F> {
    pub fn new(enc_channels: usize, dec_channels: usize) -> Self {
        Sft {
            conv: Conv2d::zeroed(enc_channels + dec_channels, 2 * dec_channels, 3, 1, 1),
            channels: dec_channels,
        }
    }

    pub fn forward(&self, f_d: &Tensor<F>, f_e: &Tensor<F>) -> Result<Tensor<F>> {
        let (sd, se) = (f_d.shape(), f_e.shape());
        if sd.len() != 4 || se.len() != 4 || sd[2] != se[2] || sd[3] != se[3] || sd[0] != se[0] {
            return Err(DehazeError::Shape {
                expected: format!("spatially aligned features, F_d {sd:?}"),
                got: format!("{se:?}"),
            });
        }
        let ab = self.conv.forward(&Tensor::concat(&[f_e.clone(), f_d.clone()], 1));
        let alpha = ab.slice_axis_op(1, 0, self.channels);
        let beta = ab.slice_axis_op(1, self.channels, 2 * self.channels);
        Ok(f_d.add(&alpha.mul(f_d)).add(&beta))
    }

    pub fn params(&self) -> NamedParams<F> {
        self.conv.params("conv")
    }
}

/// Decoder with two x2 upsample stages and SFT at each; sigmoid output.
pub struct Decoder<F: Scalar> {
    after_quant: Conv2d<F>,
    up_conv1: Conv2d<F>,
    up_conv2: Conv2d<F>,
    conv_out: Conv2d<F>,
    pub sft_half: Sft<F>,
    pub sft_full: Sft<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c0, c1, d) = (cfg.base_channels, cfg.mid_channels, cfg.embed_dim);
        Decoder {
            after_quant: Conv2d::new(d, d, 3, 1, 1, rng),
            up_conv1: Conv2d::new(d, c1, 3, 1, 1, rng),
            up_conv2: Conv2d::new(c1, c0, 3, 1, 1, rng),
            conv_out: Conv2d::new(c0, 3, 3, 1, 1, rng),
            sft_half: Sft::new(c1, c1),
            sft_full: Sft::new(c0, c0),
        }
    }

    /// tokens: (B, m, n, d); skips from the paired encoder pass.
    pub fn forward(
        &self,
        tokens: &Tensor<F>,
        skip_half: &Tensor<F>,
        skip_full: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let shape = tokens.shape();
        if shape.len() != 4 {
            return Err(DehazeError::Shape {
                expected: "(B, m, n, d)".into(),
                got: format!("{shape:?}"),
            });
        }
        let z = tokens.transpose_axes(&[0, 3, 1, 2]); // (B, d, m, n)
        let f = self.after_quant.forward(&z).leaky_relu(0.2);
        let f = self.up_conv1.forward(&f.upsample_nearest2x()).leaky_relu(0.2);
        let f = self.sft_half.forward(&f, skip_half)?;
        let f = self.up_conv2.forward(&f.upsample_nearest2x()).leaky_relu(0.2);
        let f = self.sft_full.forward(&f, skip_full)?;
        Ok(self.conv_out.forward(&f).sigmoid())
    }

    /// Core decoder params, excluding SFT (trained in a later stage).
    pub fn core_params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(self.after_quant.params("after_quant"));
        p.extend(self.up_conv1.params("up_conv1"));
        p.extend(self.up_conv2.params("up_conv2"));
        p.extend(self.conv_out.params("conv_out"));
        p
    }

    pub fn sft_params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(prefixed("half", self.sft_half.params()));
        p.extend(prefixed("full", self.sft_full.params()));
        p
    }
}

/// Windowed-attention trunk shared by predictor and critic.
struct Trunk<F: Scalar> {
    pos: Tensor<F>, // (window^2, dim) within-window positional embedding
    blocks: Vec<WindowBlock<F>>,
    norm: LayerNorm<F>,
    window: usize,
}

impl<F: Scalar> Trunk<F> {
    fn new(dim: usize, heads: usize, window: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        Trunk {
            pos: Tensor::param(normal_array(&[window * window, dim], 0.02, rng)),
            blocks: (0..depth)
                .map(|i| WindowBlock::new(dim, heads, window, i % 2 == 1, rng))
                .collect(),
            norm: LayerNorm::new(dim),
            window,
        }
    }

    /// x: (B*m*n, dim) in grid order.
    fn forward(&self, x: &Tensor<F>, batch: usize, m: usize, n: usize) -> Result<Tensor<F>> {
        let ws = self.window;
        if m % ws != 0 || n % ws != 0 {
            return Err(DehazeError::contract(format!(
                "latent grid {m}x{n} not divisible by window {ws}"
            )));
        }
        let mut idx = Vec::with_capacity(batch * m * n);
        for _ in 0..batch {
            for y in 0..m {
                for x in 0..n {
                    idx.push((y % ws) * ws + (x % ws));
                }
            }
        }
        let mut h = x.add(&self.pos.gather_rows(&idx));
        for b in &self.blocks {
            h = b.forward(&h, batch, m, n);
        }
        Ok(self.norm.forward(&h))
    }

    fn params(&self) -> NamedParams<F> {
        let mut p = vec![("pos".to_string(), self.pos.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            p.extend(b.params(&format!("block{i}")));
        }
        p.extend(self.norm.params("norm"));
        p
    }
}

/// Code predictor G_theta: fused tokens -> per-position logits over K codes.
pub struct Predictor<F: Scalar> {
    embed: Linear<F>,
    trunk: Trunk<F>,
    head: Linear<F>,
}

impl<F: Scalar> Predictor<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Predictor {
            embed: Linear::new(cfg.embed_dim, cfg.trunk_dim, rng),
            trunk: Trunk::new(
                cfg.trunk_dim,
                cfg.heads,
                cfg.window,
                cfg.predictor_depth,
                rng,
            ),
            head: Linear::new(cfg.trunk_dim, cfg.codebook_size, rng),
        }
    }

    /// tokens: (B, m, n, d) -> logits (B*m*n, K).
    pub fn forward(&self, tokens: &Tensor<F>) -> Result<Tensor<F>> {
        let s = tokens.shape();
        if s.len() != 4 {
            return Err(DehazeError::Shape {
                expected: "(B, m, n, d)".into(),
                got: format!("{s:?}"),
            });
        }
        if tokens.value().iter().any(|v| !v.is_finite()) {
            return Err(DehazeError::NonFinite("predictor input".into()));
        }
        let (b, m, n, d) = (s[0], s[1], s[2], s[3]);
        let flat = tokens.reshape(&[b * m * n, d]);
        let h = self.embed.forward(&flat);
        let h = self.trunk.forward(&h, b, m, n)?;
        Ok(self.head.forward(&h))
    }

    pub fn params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(self.embed.params("embed"));
        p.extend(prefixed("trunk", self.trunk.params()));
        p.extend(self.head.params("head"));
        p
    }
}

/// Code critic G_phi: code indices -> per-position rejection score in (0,1).
pub struct Critic<F: Scalar> {
    embed_table: Tensor<F>, // (K, dim)
    trunk: Trunk<F>,
    head: Linear<F>,
    k: usize,
}

impl<F: Scalar> Critic<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Critic {
            embed_table: Tensor::param(normal_array(
                &[cfg.codebook_size, cfg.trunk_dim],
                0.02,
                rng,
            )),
            trunk: Trunk::new(cfg.trunk_dim, cfg.heads, cfg.window, cfg.critic_depth, rng),
            head: Linear::new(cfg.trunk_dim, 1, rng),
            k: cfg.codebook_size,
        }
    }

    /// One code grid per batch element -> sigmoid scores (B*m*n, 1).
    pub fn forward(&self, seqs: &[CodeSequence]) -> Result<Tensor<F>> {
        let (m, n) = (seqs[0].0.shape()[0], seqs[0].0.shape()[1]);
        let mut idx = Vec::with_capacity(seqs.len() * m * n);
        for s in seqs {
            if s.0.shape() != [m, n] {
                return Err(DehazeError::contract("critic batch grids must agree"));
            }
            for &k in s.0.iter() {
                if k >= self.k {
                    return Err(DehazeError::CodeIndex { index: k, size: self.k });
                }
                idx.push(k);
            }
        }
        let h = self.embed_table.gather_rows(&idx);
        let h = self.trunk.forward(&h, seqs.len(), m, n)?;
        Ok(self.head.forward(&h).sigmoid())
    }

    /// Scores as per-image (m, n) f64 grids, clamped to the open interval.
    pub fn scores(&self, seqs: &[CodeSequence]) -> Result<Vec<Array2<f64>>> {
        let (m, n) = (seqs[0].0.shape()[0], seqs[0].0.shape()[1]);
        let raw = self.forward(seqs)?.value();
        let flat: Vec<f64> = raw.iter().map(|v| v.as_f64().clamp(1e-7, 1.0 - 1e-7)).collect();
        Ok((0..seqs.len())
            .map(|b| Array2::from_shape_fn((m, n), |(i, j)| flat[(b * m + i) * n + j]))
            .collect())
    }

    pub fn params(&self) -> NamedParams<F> {
        let mut p = vec![("embed_table".to_string(), self.embed_table.clone())];
        p.extend(prefixed("trunk", self.trunk.params()));
        p.extend(self.head.params("head"));
        p
    }
}

/// 4-layer strided conv patch classifier; score map at 1/8 resolution.
pub struct Discriminator<F: Scalar> {
    convs: Vec<Conv2d<F>>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.base_channels;
        Discriminator {
            convs: vec![
                Conv2d::new(3, c, 3, 2, 1, rng),
                Conv2d::new(c, 2 * c, 3, 2, 1, rng),
                Conv2d::new(2 * c, 4 * c, 3, 2, 1, rng),
                Conv2d::new(4 * c, 1, 3, 1, 1, rng),
            ],
        }
    }

    /// images: (B, 3, H, W) -> logits (B, 1, H/8, W/8).
    pub fn forward(&self, images: &Tensor<F>) -> Tensor<F> {
        let mut f = images.clone();
        for (i, c) in self.convs.iter().enumerate() {
            f = c.forward(&f);
            if i + 1 < self.convs.len() {
                f = f.leaky_relu(0.2);
            }
        }
        f
    }

    pub fn params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            p.extend(c.params(&format!("conv{i}")));
        }
        p
    }
}

/// Fixed random conv feature extractor standing in for a pretrained
/// perceptual network; weights are constants, frozen after init.
pub struct FeatureNet<F: Scalar> {
    convs: Vec<Conv2d<F>>,
}

impl<F: Scalar> FeatureNet<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.feat_channels;
        let frozen = |cin, cout, stride, rng: &mut ChaCha8Rng| {
            let conv = Conv2d::new(cin, cout, 3, stride, 1, rng);
            Conv2d {
                w: Tensor::constant(conv.w.value()),
                b: Tensor::constant(conv.b.value()),
                stride,
                pad: 1,
            }
        };
        FeatureNet {
            convs: vec![
                frozen(3, c / 2, 2, rng),
                frozen(c / 2, c, 2, rng),
                frozen(c, c, 1, rng),
            ],
        }
    }

    /// images: (B, 3, H, W) -> features (B, feat_channels, H/4, W/4).
    pub fn forward(&self, images: &Tensor<F>) -> Tensor<F> {
        let mut f = images.clone();
        for (i, c) in self.convs.iter().enumerate() {
            f = c.forward(&f);
            if i + 1 < self.convs.len() {
                f = f.leaky_relu(0.2);
            }
        }
        f
    }

    pub fn params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            p.extend(c.params(&format!("conv{i}")));
        }
        p
    }
}

/// The full model bundle plus the stage-wise parameter groups.
pub struct DehazeModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub enc_h: Encoder<F>,
    pub enc_l: Encoder<F>,
    pub codebook: Codebook<F>,
    pub decoder: Decoder<F>,
    pub predictor: Predictor<F>,
    pub critic: Critic<F>,
    pub discriminator: Discriminator<F>,
    pub feature_net: FeatureNet<F>,
    /// 1x1 conv projecting Z_h into the feature net's space (L_code guide term).
    pub guide_proj: Conv2d<F>,
}

impl<F: Scalar> DehazeModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_h = Encoder::new(&cfg, &mut rng);
        let enc_l = Encoder::new(&cfg, &mut rng);
        let codebook = Codebook::new(cfg.codebook_size, cfg.embed_dim, &mut rng)?;
        let decoder = Decoder::new(&cfg, &mut rng);
        let predictor = Predictor::new(&cfg, &mut rng);
        let critic = Critic::new(&cfg, &mut rng);
        let discriminator = Discriminator::new(&cfg, &mut rng);
        let feature_net = FeatureNet::new(&cfg, &mut rng);
        let guide_proj = Conv2d::new(cfg.embed_dim, cfg.feat_channels, 1, 1, 0, &mut rng);
        Ok(DehazeModel {
            cfg,
            enc_h,
            enc_l,
            codebook,
            decoder,
            predictor,
            critic,
            discriminator,
            feature_net,
            guide_proj,
        })
    }

    pub fn all_params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(prefixed("enc_h", self.enc_h.params()));
        p.extend(prefixed("enc_l", self.enc_l.params()));
        p.push(("codebook.codes".to_string(), self.codebook.codes.clone()));
        p.extend(prefixed("dec", self.decoder.core_params()));
        p.extend(prefixed("sft", self.decoder.sft_params()));
        p.extend(prefixed("pred", self.predictor.params()));
        p.extend(prefixed("critic", self.critic.params()));
        p.extend(prefixed("disc", self.discriminator.params()));
        p.extend(prefixed("feat", self.feature_net.params()));
        p.extend(prefixed("guide", self.guide_proj.params("proj")));
        p
    }

    /// Generator-side parameters for VQGAN pretraining.
    pub fn vqgan_params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(prefixed("enc_h", self.enc_h.params()));
        p.push(("codebook.codes".to_string(), self.codebook.codes.clone()));
        p.extend(prefixed("dec", self.decoder.core_params()));
        p.extend(prefixed("guide", self.guide_proj.params("proj")));
        p
    }

    pub fn disc_params(&self) -> NamedParams<F> {
        prefixed("disc", self.discriminator.params())
    }

    /// Stage I trainables: E_L, predictor, SFT.
    pub fn predictor_stage_params(&self) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(prefixed("enc_l", self.enc_l.params()));
        p.extend(prefixed("pred", self.predictor.params()));
        p.extend(prefixed("sft", self.decoder.sft_params()));
        p
    }

    /// Stage II trainables: the critic alone.
    pub fn critic_stage_params(&self) -> NamedParams<F> {
        prefixed("critic", self.critic.params())
    }
}

// ---- image/token conversions ----

/// Stack (H, W, 3) f32 images into an NCHW constant tensor.
pub fn images_to_tensor<F: Scalar>(images: &[Array3<f32>]) -> Tensor<F> {
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
    let b = images.len();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, 3, h, w]));
    for (i, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[i, c, y, x]] = F::of_f64(img[(y, x, c)] as f64);
                }
            }
        }
    }
    Tensor::constant(out)
}

/// Split an NCHW tensor back into (H, W, 3) f32 images.
pub fn tensor_to_images<F: Scalar>(t: &Tensor<F>) -> Vec<Array3<f32>> {
    let v = t.value();
    let s = v.shape().to_vec();
    let (b, h, w) = (s[0], s[2], s[3]);
    (0..b)
        .map(|i| {
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| v[[i, c, y, x]].as_f64() as f32)
        })
        .collect()
}

/// Per-sample (m, n, d) latent grids from a (B, m, n, d) tensor value.
pub fn tokens_to_grids<F: Scalar>(t: &Tensor<F>) -> Vec<Array3<F>> {
    let v = t.value();
    let s = v.shape().to_vec();
    (0..s[0])
        .map(|b| {
            Array3::from_shape_fn((s[1], s[2], s[3]), |(i, j, k)| v[[b, i, j, k]])
        })
        .collect()
}

/// Stack per-sample (m, n, d) grids into a (B, m, n, d) constant tensor.
pub fn grids_to_tensor<F: Scalar>(grids: &[Array3<F>]) -> Tensor<F> {
    let s = grids[0].shape().to_vec();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[grids.len(), s[0], s[1], s[2]]));
    for (b, g) in grids.iter().enumerate() {
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    out[[b, i, j, k]] = g[(i, j, k)];
                }
            }
        }
    }
    Tensor::constant(out)
}
