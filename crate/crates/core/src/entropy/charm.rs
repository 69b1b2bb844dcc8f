//! Two-stage channel-wise autoregressive parameter networks.
//!
//! Stage 1 predicts slice `k` of `y1` from the hyper features and the already
//! coded slices `0..k` of `y1`. Stage 2 predicts slice `k` of `y2` from the
//! hyper features, all of `y1` (the conditional information, optional) and
//! slices `0..k` of `y2`.

use rand::Rng;

use super::{GaussianParams, SliceLayout, SIGMA_MAX, SIGMA_MIN};
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::nn::{Conv, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Three 3x3 convolutions, leaky ReLU between, ending in `2c` channels
/// (means then raw scales).
#[derive(Clone, Debug)]
pub struct SliceNet {
    layers: [Conv; 3],
    in_channels: usize,
    out_channels: usize,
}

impl SliceNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        slice: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Conv::new(store, &format!("{name}.0"), cin, hidden, 3, 1, rng)?,
                Conv::new(store, &format!("{name}.1"), hidden, hidden, 3, 1, rng)?,
                Conv::new(store, &format!("{name}.2"), hidden, 2 * slice, 3, 1, rng)?,
            ],
            in_channels: cin,
            out_channels: slice,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<GaussianParams<B::Var>> {
        let h = self.layers[0].forward(b, x)?;
        let h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        let h = self.layers[1].forward(b, &h)?;
        let h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        let out = self.layers[2].forward(b, &h)?;
        let c = self.out_channels;
        let mean = b.slice_channels(&out, 0, c)?;
        let raw = b.slice_channels(&out, c, 2 * c)?;
        let scale = b.softplus(&raw)?;
        let scale = b.clamp(&scale, SIGMA_MIN, SIGMA_MAX)?;
        Ok(GaussianParams { mean, scale })
    }
}

/// All slice networks of both stages.
#[derive(Clone, Debug)]
pub struct Charm {
    pub layout: SliceLayout,
    pub context_channels: usize,
    pub stage1: Vec<SliceNet>,
    /// Empty for the single-branch variant.
    pub stage2: Vec<SliceNet>,
    pub use_ci: bool,
}

impl Charm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layout: SliceLayout,
        context_channels: usize,
        hidden: usize,
        two_stage: bool,
        use_ci: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = layout.channels_per_slice();
        let stage1 = (0..layout.groups())
            .map(|k| SliceNet::new(store, &format!("charm1.{k}"), context_channels + k * c, hidden, c, rng))
            .collect::<Result<_>>()?;
        let ci = if use_ci { layout.m() } else { 0 };
        let stage2 = if two_stage {
            (0..layout.groups())
                .map(|k| {
                    SliceNet::new(store, &format!("charm2.{k}"), context_channels + ci + k * c, hidden, c, rng)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            layout,
            context_channels,
            stage1,
            stage2,
            use_ci,
        })
    }

    fn check_prefix<T: Scalar, B: Backend<T>>(&self, b: &B, prefix: &[B::Var], k: usize) -> Result<()> {
        if k >= self.layout.groups() {
            return Err(Error::Contract(format!("slice {k} of {}", self.layout.groups())));
        }
        if prefix.len() != k {
            return Err(Error::Contract(format!(
                "slice {k} needs exactly {k} decoded slices, got {}",
                prefix.len()
            )));
        }
        let c = self.layout.channels_per_slice();
        if prefix.iter().any(|p| b.value(p).channels() != c) {
            return Err(Error::Contract(format!("prefix slices must have {c} channels")));
        }
        Ok(())
    }

    /// Parameters for slice `k` of `y1` from the hyper features and slices `0..k`.
    pub fn stage1_params<T: Scalar, B: Backend<T>>(
        &self,
        b: &mut B,
        context: &B::Var,
        prefix: &[B::Var],
        k: usize,
    ) -> Result<GaussianParams<B::Var>> {
        self.check_prefix(b, prefix, k)?;
        let mut inputs: Vec<&B::Var> = vec![context];
        inputs.extend(prefix.iter());
        let x = b.concat(&inputs)?;
        self.stage1[k].forward(b, &x)
    }

    /// Parameters for slice `k` of `y2`. `y1` is ignored without conditional
    /// information.
    pub fn stage2_params<T: Scalar, B: Backend<T>>(
        &self,
        b: &mut B,
        context: &B::Var,
        y1: &B::Var,
        prefix: &[B::Var],
        k: usize,
    ) -> Result<GaussianParams<B::Var>> {
        if self.stage2.is_empty() {
            return Err(Error::Contract("single-branch model has no second stage".into()));
        }
        self.check_prefix(b, prefix, k)?;
        if b.value(y1).channels() != self.layout.m() {
            return Err(Error::Contract("stage 2 needs the complete y1".into()));
        }
        let mut inputs: Vec<&B::Var> = vec![context];
        if self.use_ci {
            inputs.push(y1);
        }
        inputs.extend(prefix.iter());
        let x = b.concat(&inputs)?;
        self.stage2[k].forward(b, &x)
    }
}
