//! Reusable network blocks: convolutions, residual blocks, residual groups,
//! simplified attention and the stride-2 resampling stages.

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Negative slope of every leaky ReLU in the codec.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Number of residual blocks in a residual group.
pub const GROUP_DEPTH: usize = 4;
/// Residual blocks in each branch of the attention module.
pub const ATTENTION_DEPTH: usize = 3;

/// Convolution with bias. Padding keeps `H/stride` for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.conv_kernel(format!("{name}.weight"), cout, cin, k, rng)?,
            bias: store.zeros(format!("{name}.bias"), cout)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let w = b.param(self.weight);
        let bias = b.param(self.bias);
        let y = b.conv2d(x, &w, self.stride, self.pad)?;
        b.add_channel(&y, &bias)
    }
}

/// Stride-2 transposed convolution (k=3, pad 1, output pad 1): exact x2.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvT {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.tconv_kernel(format!("{name}.weight"), cin, cout, 3, rng)?,
            bias: store.zeros(format!("{name}.bias"), cout)?,
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let w = b.param(self.weight);
        let bias = b.param(self.bias);
        let y = b.conv_transpose2d(x, &w, 2, 1, 1)?;
        b.add_channel(&y, &bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Residual,
    ResidualGroup,
    Attention,
    Downsample,
    Upsample,
}

/// Declarative description of one block. `channels` is the output width;
/// shape-preserving blocks require it to equal the input width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    pub kernel: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, channels: usize, kernel: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("block kernel must be 1 or 3, got {kernel}")));
        }
        Ok(Self { kind, channels, kernel })
    }
}

/// `x + conv2(leaky_relu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), c, c, kernel, 1, rng)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), c, c, kernel, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let h = self.conv1.forward(b, x)?;
        let h = b.leaky_relu(&h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(b, &h)?;
        b.add(x, &h)
    }
}

fn chain<T: Scalar, B: Backend<T>>(blocks: &[ResidualBlock], b: &mut B, x: &B::Var) -> Result<B::Var> {
    let mut h = x.clone();
    for rb in blocks {
        h = rb.forward(b, &h)?;
    }
    Ok(h)
}

/// Four residual blocks in series with an outer skip:
/// `x + RB4(RB3(RB2(RB1(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualGroup {
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualGroup {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..GROUP_DEPTH)
            .map(|i| ResidualBlock::new(store, &format!("{name}.rb{i}"), c, kernel, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let h = chain(&self.blocks, b, x)?;
        b.add(x, &h)
    }
}

/// Simplified attention: `x + trunk(x) * sigmoid(conv1x1(mask(x)))`, both
/// branches being three residual blocks.
#[derive(Clone, Debug)]
pub struct Attention {
    pub trunk: Vec<ResidualBlock>,
    pub mask: Vec<ResidualBlock>,
    pub mask_out: Conv,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = (0..ATTENTION_DEPTH)
            .map(|i| ResidualBlock::new(store, &format!("{name}.trunk{i}"), c, kernel, rng))
            .collect::<Result<_>>()?;
        let mask = (0..ATTENTION_DEPTH)
            .map(|i| ResidualBlock::new(store, &format!("{name}.mask{i}"), c, kernel, rng))
            .collect::<Result<_>>()?;
        let mask_out = Conv::new(store, &format!("{name}.mask_out"), c, c, 1, 1, rng)?;
        Ok(Self { trunk, mask, mask_out })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let t = chain(&self.trunk, b, x)?;
        let m = chain(&self.mask, b, x)?;
        let m = self.mask_out.forward(b, &m)?;
        let m = b.sigmoid(&m)?;
        let tm = b.mul(&t, &m)?;
        b.add(x, &tm)
    }
}

/// Stride-2 convolution (k=3 pad 1, or k=1 pad 0) followed by leaky ReLU.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
}

impl Downsample {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, name, cin, cout, kernel, 2, rng)?,
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let d = b.value(x).dims4()?;
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(shape_err!("downsample needs even dims, got {}x{}", d.h, d.w));
        }
        let y = self.conv.forward(b, x)?;
        b.leaky_relu(&y, LEAKY_SLOPE)
    }
}

/// Stride-2 transposed convolution followed by leaky ReLU.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: ConvT,
}

impl Upsample {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvT::new(store, name, cin, cout, rng)?,
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let y = self.conv.forward(b, x)?;
        b.leaky_relu(&y, LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Residual(ResidualBlock),
    ResidualGroup(ResidualGroup),
    Attention(Attention),
    Downsample(Downsample),
    Upsample(Upsample),
}

impl Block {
    /// Builds the block described by `spec` reading `cin` input channels.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: BlockSpec,
        cin: usize,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let c = spec.channels;
        let preserving = !matches!(spec.kind, BlockKind::Downsample | BlockKind::Upsample);
        if preserving && cin != c {
            return Err(Error::Config(format!(
                "{:?} block is shape-preserving but maps {} -> {} channels",
                spec.kind, cin, c
            )));
        }
        Ok(match spec.kind {
            BlockKind::Residual => Block::Residual(ResidualBlock::new(store, name, c, spec.kernel, rng)?),
            BlockKind::ResidualGroup => Block::ResidualGroup(ResidualGroup::new(store, name, c, spec.kernel, rng)?),
            BlockKind::Attention => Block::Attention(Attention::new(store, name, c, spec.kernel, rng)?),
            BlockKind::Downsample => Block::Downsample(Downsample::new(store, name, cin, c, spec.kernel, rng)?),
            BlockKind::Upsample => Block::Upsample(Upsample::new(store, name, cin, c, rng)?),
        })
    }

    pub fn forward<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        match self {
            Block::Residual(m) => m.forward(b, x),
            Block::ResidualGroup(m) => m.forward(b, x),
            Block::Attention(m) => m.forward(b, x),
            Block::Downsample(m) => m.forward(b, x),
            Block::Upsample(m) => m.forward(b, x),
        }
    }
}
