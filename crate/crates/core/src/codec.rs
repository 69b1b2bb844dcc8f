//! Analysis, synthesis and hyper transforms of the dual-branch codec, plus the
//! slice-sequential walk shared by the encoder, the decoder and the rate
//! estimate.
//!
//! All image and latent tensors are channel-major `[C, B, H, W]`.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::config::ModelConfig;
use crate::entropy::{bits_of, gaussian_likelihood, Charm, FactorizedPrior, GaussianParams, SliceLayout};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Block, BlockKind, BlockSpec, Conv, ConvT, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial dims must be multiples of this (four encoder and two hyper stages).
pub const SPATIAL_MULTIPLE: usize = 64;

/// Block sequence of one analysis branch before the final latent conv.
/// `kernel` selects the downsampling kernel; the other blocks use 3x3.
pub fn branch_layout(n: usize, kernel: usize) -> Result<Vec<BlockSpec>> {
    use BlockKind::*;
    [
        (Downsample, kernel),
        (ResidualGroup, 3),
        (Downsample, kernel),
        (ResidualGroup, 3),
        (Attention, 3),
        (Downsample, kernel),
        (ResidualGroup, 3),
        (Downsample, kernel),
        (Attention, 3),
    ]
    .into_iter()
    .map(|(kind, k)| BlockSpec::new(kind, n, k))
    .collect()
}

/// Block sequence of the synthesis transform between its input conv and the
/// final transposed conv to RGB.
pub fn synthesis_layout(n: usize) -> Result<Vec<BlockSpec>> {
    use BlockKind::*;
    [Attention, Upsample, ResidualGroup, Upsample, Attention, ResidualGroup, Upsample, ResidualGroup]
        .into_iter()
        .map(|kind| BlockSpec::new(kind, n, 3))
        .collect()
}

/// One analysis branch: the block layout then a 3x3 conv to `M` channels
/// without activation.
#[derive(Clone, Debug)]
pub struct Branch {
    pub blocks: Vec<Block>,
    pub out: Conv,
    pub kernel: usize,
}

impl Branch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        m: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, spec) in branch_layout(n, kernel)?.into_iter().enumerate() {
            blocks.push(Block::build(spec, cin, store, &format!("{name}.{i}"), rng)?);
            cin = spec.channels;
        }
        let out = Conv::new(store, &format!("{name}.out"), n, m, 3, 1, rng)?;
        Ok(Self { blocks, out, kernel })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(b, &h)?;
        }
        self.out.forward(b, &h)
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub input: Conv,
    pub blocks: Vec<Block>,
    pub out: ConvT,
}

impl Synthesis {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Conv::new(store, &format!("{name}.in"), cin, n, 3, 1, rng)?;
        let blocks = synthesis_layout(n)?
            .into_iter()
            .enumerate()
            .map(|(i, spec)| Block::build(spec, n, store, &format!("{name}.{i}"), rng))
            .collect::<Result<_>>()?;
        let out = ConvT::new(store, &format!("{name}.out"), n, 3, rng)?;
        Ok(Self { input, blocks, out })
    }

    /// Unclamped reconstruction.
    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, y: &B::Var) -> Result<B::Var> {
        let h = self.input.forward(b, y)?;
        let mut h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        for blk in &self.blocks {
            h = blk.forward(b, &h)?;
        }
        self.out.forward(b, &h)
    }
}

/// Two stride-2 3x3 convs, leaky ReLU between, no final activation.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl HyperAnalysis {
    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, y: &B::Var) -> Result<B::Var> {
        let d = b.value(y).dims4()?;
        if d.h % 4 != 0 || d.w % 4 != 0 {
            return Err(shape_err!("hyper analysis needs latent dims divisible by 4, got {}x{}", d.h, d.w));
        }
        let h = self.conv1.forward(b, y)?;
        let h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        self.conv2.forward(b, &h)
    }
}

/// Two x2 transposed convs, leaky ReLU between, no final activation.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    pub up1: ConvT,
    pub up2: ConvT,
}

impl HyperSynthesis {
    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, z: &B::Var) -> Result<B::Var> {
        let h = self.up1.forward(b, z)?;
        let h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        self.up2.forward(b, &h)
    }
}

/// Continuous and quantized latents of one image or batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T> {
    pub y1: Tensor<T>,
    pub y2: Option<Tensor<T>>,
    pub z: Tensor<T>,
    pub y1_hat: Tensor<T>,
    pub y2_hat: Option<Tensor<T>>,
    pub z_hat: Tensor<T>,
}

/// Which latent a slice belongs to during the sequential walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceRef {
    /// 0 for `y1`, 1 for `y2`.
    pub latent: usize,
    pub index: usize,
}

/// Graph outputs of one noisy-quantization forward pass.
pub struct TrainForward<V> {
    pub x_hat: V,
    /// Total estimated bits (scalar).
    pub bits: V,
    pub bits_y: V,
    pub bits_z: V,
}

/// The complete network with its parameters.
#[derive(Clone, Debug)]
pub struct CodecNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub g_a1: Branch,
    pub g_a2: Option<Branch>,
    pub g_s: Synthesis,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub charm: Charm,
}

impl<T: Scalar> CodecNet<T> {
    /// Builds a randomly initialised network. Parameter registration order is
    /// fixed, which makes it the checkpoint order.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            n,
            m,
            hyper_channels: hc,
            ..
        } = config;
        let mut store = ParamStore::new();
        let g_a1 = Branch::new(&mut store, "g_a1", n, m, 3, rng)?;
        let g_a2 = if config.use_tb {
            Some(Branch::new(&mut store, "g_a2", n, m, 1, rng)?)
        } else {
            None
        };
        let latent = config.latent_channels();
        let g_s = Synthesis::new(&mut store, "g_s", latent, n, rng)?;
        let h_a = HyperAnalysis {
            conv1: Conv::new(&mut store, "h_a.0", latent, n, 3, 2, rng)?,
            conv2: Conv::new(&mut store, "h_a.1", n, hc, 3, 2, rng)?,
        };
        let h_s = HyperSynthesis {
            up1: ConvT::new(&mut store, "h_s.0", hc, n, rng)?,
            up2: ConvT::new(&mut store, "h_s.1", n, config.context_channels(), rng)?,
        };
        let prior = FactorizedPrior::new(&mut store, "prior", hc, rng)?;
        let layout = SliceLayout::new(m, config.groups)?;
        let charm = Charm::new(
            &mut store,
            layout,
            config.context_channels(),
            n,
            config.use_tb,
            config.use_ci,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            g_a1,
            g_a2,
            g_s,
            h_a,
            h_s,
            prior,
            charm,
        })
    }

    pub fn layout(&self) -> SliceLayout {
        self.charm.layout
    }

    /// Number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Size of the parameters stored as 32-bit floats.
    pub fn model_bytes(&self) -> usize {
        4 * self.num_parameters()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> CodecNet<U> {
        CodecNet {
            config: self.config.clone(),
            store: self.store.cast(),
            g_a1: self.g_a1.clone(),
            g_a2: self.g_a2.clone(),
            g_s: self.g_s.clone(),
            h_a: self.h_a.clone(),
            h_s: self.h_s.clone(),
            prior: self.prior.clone(),
            charm: self.charm.clone(),
        }
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        let d = x.dims4()?;
        if d.c != 3 {
            return Err(shape_err!("expected 3 colour channels, got {}", d.c));
        }
        if d.h == 0 || d.w == 0 || d.h % SPATIAL_MULTIPLE != 0 || d.w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Contract(format!(
                "image dims {}x{} must be positive multiples of {SPATIAL_MULTIPLE}; pad first",
                d.w, d.h
            )));
        }
        Ok(())
    }

    /// `(y1, y2)`; `y2` is `None` for the single-branch variant.
    pub fn encode_branches<B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<(B::Var, Option<B::Var>)> {
        Self::check_input(b.value(x))?;
        let y1 = self.g_a1.forward(b, x)?;
        let y2 = match &self.g_a2 {
            Some(br) => Some(br.forward(b, x)?),
            None => None,
        };
        Ok((y1, y2))
    }

    fn joint<B: Backend<T>>(&self, b: &mut B, y1: &B::Var, y2: Option<&B::Var>) -> Result<B::Var> {
        match (y2, self.config.use_tb) {
            (Some(y2), true) => {
                b.value(y1).same_shape(b.value(y2))?;
                b.concat(&[y1, y2])
            }
            (None, false) => Ok(y1.clone()),
            (Some(_), false) => Err(Error::Contract("single-branch model got a second latent".into())),
            (None, true) => Err(Error::Contract("two-branch model needs both latents".into())),
        }
    }

    /// Unclamped reconstruction from the quantized latents.
    pub fn synthesize<B: Backend<T>>(&self, b: &mut B, y1: &B::Var, y2: Option<&B::Var>) -> Result<B::Var> {
        let y = self.joint(b, y1, y2)?;
        self.g_s.forward(b, &y)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode_image<B: Backend<T>>(&self, b: &mut B, y1: &B::Var, y2: Option<&B::Var>) -> Result<B::Var> {
        let x = self.synthesize(b, y1, y2)?;
        b.clamp(&x, 0.0, 1.0)
    }

    pub fn hyper_encode<B: Backend<T>>(&self, b: &mut B, y1: &B::Var, y2: Option<&B::Var>) -> Result<B::Var> {
        let y = self.joint(b, y1, y2)?;
        self.h_a.forward(b, &y)
    }

    /// Context features `F_z` with `2M` channels.
    pub fn hyper_decode<B: Backend<T>>(&self, b: &mut B, z_hat: &B::Var) -> Result<B::Var> {
        if b.value(z_hat).channels() != self.config.hyper_channels {
            return Err(shape_err!(
                "hyper latent has {} channels, expected {}",
                b.value(z_hat).channels(),
                self.config.hyper_channels
            ));
        }
        self.h_s.forward(b, z_hat)
    }

    fn slices<B: Backend<T>>(&self, b: &mut B, y: &B::Var) -> Result<Vec<B::Var>> {
        self.layout().ranges().map(|r| b.slice_channels(y, r.start, r.end)).collect()
    }

    /// Entropy parameters of every slice given the complete quantized
    /// latents, as on the training path. Slice `k` only reads the inputs it is
    /// allowed to see, so this agrees with the sequential walk.
    pub fn entropy_params<B: Backend<T>>(
        &self,
        b: &mut B,
        ctx: &B::Var,
        y1_hat: &B::Var,
        y2_hat: Option<&B::Var>,
    ) -> Result<(Vec<GaussianParams<B::Var>>, Vec<GaussianParams<B::Var>>)> {
        let s1 = self.slices(b, y1_hat)?;
        let p1 = (0..s1.len())
            .map(|k| self.charm.stage1_params(b, ctx, &s1[..k], k))
            .collect::<Result<Vec<_>>>()?;
        let p2 = match y2_hat {
            Some(y2) => {
                let s2 = self.slices(b, y2)?;
                (0..s2.len())
                    .map(|k| self.charm.stage2_params(b, ctx, y1_hat, &s2[..k], k))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok((p1, p2))
    }

    fn params_bits<B: Backend<T>>(
        &self,
        b: &mut B,
        y_hat: &B::Var,
        params: &[GaussianParams<B::Var>],
    ) -> Result<B::Var> {
        let slices = self.slices(b, y_hat)?;
        let mut total: Option<B::Var> = None;
        for (s, p) in slices.iter().zip(params) {
            let lik = gaussian_likelihood(b, s, p)?;
            let bits = bits_of(b, &lik)?;
            total = Some(match total {
                Some(t) => b.add(&t, &bits)?,
                None => bits,
            });
        }
        total.ok_or_else(|| Error::Contract("no slices".into()))
    }

    /// Noisy-quantization forward pass used for training. `x` is `[3,B,H,W]`
    /// in `[0,1]`; the returned reconstruction is unclamped.
    pub fn forward_train<B: Backend<T>, R: Rng + ?Sized>(
        &self,
        b: &mut B,
        x: &B::Var,
        rng: &mut R,
    ) -> Result<TrainForward<B::Var>> {
        let (y1, y2) = self.encode_branches(b, x)?;
        let z = self.hyper_encode(b, &y1, y2.as_ref())?;
        let mut noisy = |b: &mut B, v: &B::Var| -> Result<B::Var> {
            let shape = b.value(v).shape().to_vec();
            let u = b.constant(Tensor::from_fn(&shape, |_| T::cst(rng.gen_range(-0.5..0.5))));
            b.add(v, &u)
        };
        let z_hat = noisy(b, &z)?;
        let y1_hat = noisy(b, &y1)?;
        let y2_hat = match &y2 {
            Some(v) => Some(noisy(b, v)?),
            None => None,
        };
        let ctx = self.hyper_decode(b, &z_hat)?;
        let (p1, p2) = self.entropy_params(b, &ctx, &y1_hat, y2_hat.as_ref())?;
        let mut bits_y = self.params_bits(b, &y1_hat, &p1)?;
        if let Some(y2h) = &y2_hat {
            let b2 = self.params_bits(b, y2h, &p2)?;
            bits_y = b.add(&bits_y, &b2)?;
        }
        let lz = self.prior.likelihood(b, &z_hat)?;
        let bits_z = bits_of(b, &lz)?;
        let bits = b.add(&bits_y, &bits_z)?;
        let x_hat = self.synthesize(b, &y1_hat, y2_hat.as_ref())?;
        Ok(TrainForward {
            x_hat,
            bits,
            bits_y,
            bits_z,
        })
    }

    /// Runs the slice-sequential coding order on an eager backend: every
    /// slice of `y1`, then every slice of `y2`. For each slice the callback
    /// receives the entropy parameters (`[c,1,h,w]` mean and scale) computed
    /// from previously returned slices and must return the quantized slice.
    /// Returns the complete `(y1_hat, y2_hat)`.
    pub fn walk_slices<F>(&self, ctx: &Tensor<T>, mut f: F) -> Result<(Tensor<T>, Option<Tensor<T>>)>
    where
        F: FnMut(SliceRef, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    {
        let mut e = Eager::new(&self.store);
        let ctx = e.constant(ctx.clone());
        let g = self.layout().groups();
        let mut done1 = Vec::with_capacity(g);
        for k in 0..g {
            let p = self.charm.stage1_params(&mut e, &ctx, &done1, k)?;
            let q = f(SliceRef { latent: 0, index: k }, &p.mean, &p.scale)?;
            q.same_shape(&p.mean)?;
            done1.push(e.constant(q));
        }
        let refs: Vec<_> = done1.iter().collect();
        let y1_hat = e.concat(&refs)?;
        if !self.config.use_tb {
            return Ok(((*y1_hat).clone(), None));
        }
        let mut done2 = Vec::with_capacity(g);
        for k in 0..g {
            let p = self.charm.stage2_params(&mut e, &ctx, &y1_hat, &done2, k)?;
            let q = f(SliceRef { latent: 1, index: k }, &p.mean, &p.scale)?;
            q.same_shape(&p.mean)?;
            done2.push(e.constant(q));
        }
        let refs: Vec<_> = done2.iter().collect();
        let y2_hat = e.concat(&refs)?;
        Ok(((*y1_hat).clone(), Some((*y2_hat).clone())))
    }

    /// Continuous latents and hyper latent of a `[3,1,H,W]` image, with
    /// `z_hat = round(z)`.
    pub fn analyze(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        let mut e = Eager::new(&self.store);
        let xv = e.constant(x.clone());
        let (y1, y2) = self.encode_branches(&mut e, &xv)?;
        let z = self.hyper_encode(&mut e, &y1, y2.as_ref())?;
        let z_hat = z.map(|v| v.round());
        Ok(((*y1).clone(), y2.map(|v| (*v).clone()), (*z).clone(), z_hat))
    }

    pub fn context(&self, z_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut e = Eager::new(&self.store);
        let zv = e.constant(z_hat.clone());
        Ok((*self.hyper_decode(&mut e, &zv)?).clone())
    }

    /// Code-mode quantization of an image: mean-subtracted rounding in the
    /// sequential slice order, exactly as the encoder does it.
    pub fn quantize_image(&self, x: &Tensor<T>) -> Result<LatentBundle<T>> {
        let (y1, y2, z, z_hat) = self.analyze(x)?;
        let ctx = self.context(&z_hat)?;
        let layout = self.layout();
        let (y1_hat, y2_hat) = self.walk_slices(&ctx, |s, mean, _| {
            let src = if s.latent == 0 { &y1 } else { y2.as_ref().expect("two-branch walk") };
            let r = layout.range(s.index);
            let ys = src.slice_channels(r.start, r.end)?;
            ys.zip_map(mean, |v, m| (v - m).round() + m)
        })?;
        Ok(LatentBundle {
            y1,
            y2,
            z,
            y1_hat,
            y2_hat,
            z_hat,
        })
    }

    /// Estimated code-mode bits of quantized latents:
    /// `(bits of y_hat, bits of z_hat)`.
    pub fn estimate_rate(&self, bundle: &LatentBundle<T>) -> Result<(f64, f64)> {
        let mut e = Eager::new(&self.store);
        let ctx = self.context(&bundle.z_hat)?;
        let ctx = e.constant(ctx);
        let y1 = e.constant(bundle.y1_hat.clone());
        let y2 = bundle.y2_hat.clone().map(|t| e.constant(t));
        let (p1, p2) = self.entropy_params(&mut e, &ctx, &y1, y2.as_ref())?;
        let mut bits_y = self.params_bits(&mut e, &y1, &p1)?.data()[0].f64();
        if let Some(y2) = &y2 {
            bits_y += self.params_bits(&mut e, y2, &p2)?.data()[0].f64();
        }
        let z = e.constant(bundle.z_hat.clone());
        let lz = self.prior.likelihood(&mut e, &z)?;
        let bits_z = bits_of(&mut e, &lz)?.data()[0].f64();
        Ok((bits_y, bits_z))
    }

    /// Copies every parameter of `other` whose name and shape match one of
    /// ours. Returns how many were copied.
    pub fn copy_shared_from(&mut self, other: &CodecNet<T>) -> usize {
        let mut copied = 0;
        for (_, name, value) in other.store.iter() {
            if let Some(id) = self.store.id(name) {
                if self.store.get(id).shape() == value.shape() && self.store.set(id, value.clone()).is_ok() {
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Clamped reconstruction from quantized latents.
    pub fn reconstruct(&self, y1_hat: &Tensor<T>, y2_hat: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut e = Eager::new(&self.store);
        let y1 = e.constant(y1_hat.clone());
        let y2 = y2_hat.map(|t| e.constant(t.clone()));
        Ok((*self.decode_image(&mut e, &y1, y2.as_ref())?).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(use_tb: bool, use_ci: bool) -> ModelConfig {
        ModelConfig {
            n: 4,
            m: 10,
            groups: 5,
            use_ci,
            use_tb,
            hyper_channels: 3,
            lambda: 0.01,
            metric: crate::config::Metric::Mse,
        }
    }

    fn net(cfg: ModelConfig, seed: u64) -> CodecNet<f64> {
        CodecNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[3, 1, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn branch_layout_is_pinned() {
        use BlockKind::*;
        let kinds: Vec<_> = branch_layout(8, 1).unwrap().iter().map(|s| (s.kind, s.kernel)).collect();
        assert_eq!(
            kinds,
            vec![
                (Downsample, 1),
                (ResidualGroup, 3),
                (Downsample, 1),
                (ResidualGroup, 3),
                (Attention, 3),
                (Downsample, 1),
                (ResidualGroup, 3),
                (Downsample, 1),
                (Attention, 3)
            ]
        );
        let ups = synthesis_layout(8).unwrap().iter().filter(|s| s.kind == Upsample).count();
        assert_eq!(ups, 3);
    }

    #[test]
    fn latent_and_hyper_shapes() {
        let mut cfg = tiny(true, true);
        cfg.m = 40;
        cfg.hyper_channels = 6;
        let n = net(cfg, 0);
        let mut e = Eager::new(&n.store);
        let x = e.constant(image(64, 128, 1));
        let (y1, y2) = n.encode_branches(&mut e, &x).unwrap();
        assert_eq!(y1.shape(), &[40, 1, 4, 8]);
        assert_eq!(y2.as_ref().unwrap().shape(), &[40, 1, 4, 8]);
        let z = n.hyper_encode(&mut e, &y1, y2.as_ref()).unwrap();
        assert_eq!(z.shape(), &[6, 1, 1, 2]);
        let ctx = n.hyper_decode(&mut e, &z).unwrap();
        assert_eq!(ctx.shape(), &[80, 1, 4, 8]);
        let xh = n.decode_image(&mut e, &y1, y2.as_ref()).unwrap();
        assert_eq!(xh.shape(), &[3, 1, 64, 128]);
        assert!(xh.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_unpadded_input() {
        let n = net(tiny(true, true), 0);
        let mut e = Eager::new(&n.store);
        let x = e.constant(image(64, 96, 1));
        assert!(matches!(n.encode_branches(&mut e, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn branches_have_disjoint_parameters() {
        let n = net(tiny(true, true), 0);
        let a: Vec<_> = n.store.iter().filter(|(_, name, _)| name.starts_with("g_a1.")).map(|p| p.0).collect();
        let b: Vec<_> = n.store.iter().filter(|(_, name, _)| name.starts_with("g_a2.")).map(|p| p.0).collect();
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        assert!(a.iter().all(|id| !b.contains(id)));
    }

    #[test]
    fn pixel_perturbation_moves_branches_differently() {
        let n = net(tiny(true, true), 3);
        let x = image(64, 64, 4);
        let mut x2 = x.clone();
        // Even coordinates: the 1x1 branch only samples even pixels.
        x2.data_mut()[64 * 20 + 22] += 0.3;
        let (a1, a2, _, _) = n.analyze(&x).unwrap();
        let (b1, b2, _, _) = n.analyze(&x2).unwrap();
        let d1 = b1.zip_map(&a1, |p, q| p - q).unwrap();
        let d2 = b2.unwrap().zip_map(&a2.unwrap(), |p, q| p - q).unwrap();
        assert!(d1.max_abs() > 0.0 && d2.max_abs() > 0.0);
        assert_ne!(d1, d2);
    }

    #[test]
    fn zero_latents_decode_to_finite_constant_free_image() {
        let n = net(tiny(true, true), 5);
        let y = Tensor::zeros(&[10, 1, 4, 4]);
        let x = n.reconstruct(&y, Some(&y)).unwrap();
        assert_eq!(x.shape(), &[3, 1, 64, 64]);
        assert!(x.all_finite());
    }

    #[test]
    fn hyper_latent_sees_both_branches() {
        let n = net(tiny(true, true), 6);
        let mut e = Eager::new(&n.store);
        let y = Tensor::uniform(&[10, 1, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut yp = y.clone();
        yp.data_mut()[5] += 1.0;
        let (yv, ypv) = (e.constant(y), e.constant(yp));
        let base = n.hyper_encode(&mut e, &yv, Some(&yv)).unwrap();
        let p1 = n.hyper_encode(&mut e, &ypv, Some(&yv)).unwrap();
        let p2 = n.hyper_encode(&mut e, &yv, Some(&ypv)).unwrap();
        assert_ne!(*base, *p1);
        assert_ne!(*base, *p2);
        let zero = e.constant(Tensor::zeros(&[10, 1, 4, 4]));
        let z0 = n.hyper_encode(&mut e, &zero, Some(&zero)).unwrap();
        assert!(z0.data().iter().all(|&v| v == 0.0), "zero biases give zero z");
    }

    #[test]
    fn hyper_decode_is_deterministic() {
        let n = net(tiny(true, true), 7);
        let z = Tensor::from_fn(&[3, 1, 1, 1], |i| i as f64 - 1.0);
        assert_eq!(n.context(&z).unwrap(), n.context(&z).unwrap());
    }

    #[test]
    fn sequential_walk_matches_parallel_params() {
        let n = net(tiny(true, true), 8);
        let x = image(64, 64, 9);
        let bundle = n.quantize_image(&x).unwrap();
        let ctx = n.context(&bundle.z_hat).unwrap();
        let mut e = Eager::new(&n.store);
        let c = e.constant(ctx.clone());
        let y1 = e.constant(bundle.y1_hat.clone());
        let y2 = e.constant(bundle.y2_hat.clone().unwrap());
        let (p1, p2) = n.entropy_params(&mut e, &c, &y1, Some(&y2)).unwrap();
        let mut seen = Vec::new();
        let layout = n.layout();
        n.walk_slices(&ctx, |s, mean, scale| {
            seen.push((s, mean.clone(), scale.clone()));
            let src = if s.latent == 0 { &bundle.y1_hat } else { bundle.y2_hat.as_ref().unwrap() };
            let r = layout.range(s.index);
            src.slice_channels(r.start, r.end)
        })
        .unwrap();
        assert_eq!(seen.len(), 10);
        for (s, mean, scale) in seen {
            let p = if s.latent == 0 { &p1[s.index] } else { &p2[s.index] };
            assert_eq!(*p.mean, mean);
            assert_eq!(*p.scale, scale);
        }
    }

    #[test]
    fn quantized_latents_are_integer_offsets() {
        let n = net(tiny(true, true), 10);
        let b = n.quantize_image(&image(64, 64, 11)).unwrap();
        assert!(b.z_hat.data().iter().all(|v| v.fract() == 0.0));
        assert_eq!(b.y1.shape(), b.y1_hat.shape());
        let (bits_y, bits_z) = n.estimate_rate(&b).unwrap();
        assert!(bits_y > 0.0 && bits_z > 0.0);
    }

    #[test]
    fn single_branch_variant() {
        let n = net(tiny(false, false), 12);
        assert!(n.g_a2.is_none() && n.charm.stage2.is_empty());
        let b = n.quantize_image(&image(64, 64, 13)).unwrap();
        assert!(b.y2_hat.is_none());
        let x = n.reconstruct(&b.y1_hat, None).unwrap();
        assert_eq!(x.shape(), &[3, 1, 64, 64]);
    }

    #[test]
    fn train_forward_is_differentiable_and_finite() {
        let n = net(tiny(true, true), 14);
        let mut g = Graph::new(&n.store);
        let x = g.input(image(64, 64, 15));
        let out = n.forward_train(&mut g, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.value(&out.x_hat).shape(), &[3, 1, 64, 64]);
        let bits = g.value(&out.bits).data()[0];
        assert!(bits.is_finite() && bits > 0.0);
        let grads = g.backward(out.bits).unwrap();
        assert!(grads.param_grads().count() > 0);
    }

    #[test]
    fn more_groups_means_more_parameters() {
        let mut c5 = ModelConfig::desk(0.015);
        c5.groups = 5;
        let mut c10 = c5.clone();
        c10.groups = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n5 = CodecNet::<f32>::new(c5, &mut rng).unwrap();
        let n10 = CodecNet::<f32>::new(c10, &mut rng).unwrap();
        assert!(n10.model_bytes() > n5.model_bytes());
    }
}
