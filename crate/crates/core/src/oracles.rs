//! Independent reference computations and the checks that compare the
//! implementation against them.
//!
//! Every reference here is written separately from the code it checks:
//! a power series for erf, direct loops for MS-SSIM, summed `-log2 p` for
//! entropy bounds, central finite differences for gradients and input
//! perturbation for causality.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Backend, Eager, Graph, Var};
use crate::codec::CodecNet;
use crate::coder::{rc_decode, rc_encode, SymbolStream};
use crate::config::{Metric, ModelConfig};
use crate::entropy::charm::{Charm, SliceNet};
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::tables::{cdf_for_scale, QuantizedCdf, TOTAL_FREQ};
use crate::entropy::{bits_of, gaussian_likelihood, GaussianParams, SliceLayout, LIKELIHOOD_FLOOR};
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::{self, RdPoint, MSSSIM_WEIGHTS, SSIM_SIGMA, SSIM_WINDOW};
use crate::nn::{Attention, Block, BlockKind, BlockSpec, Conv, ConvT, Downsample, ResidualGroup};
use crate::optim::AdamState;
use crate::params::{ParamId, ParamStore};
use crate::pipeline;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, Trainer};

/// Reference implementations that share no code with the library paths.
pub mod reference {
    /// Maclaurin series of erf with `terms` terms.
    pub fn erf_series(x: f64, terms: usize) -> f64 {
        let mut sum = 0.0;
        let mut pow = x;
        let mut fact = 1.0;
        for n in 0..terms {
            if n > 0 {
                fact *= n as f64;
                pow *= x * x;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * pow / (fact * (2 * n + 1) as f64);
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    pub fn normal_cdf(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2, 40))
    }

    /// Discretized Gaussian mass of the unit bin around `v`.
    pub fn gaussian_bin(v: f64, mu: f64, sigma: f64) -> f64 {
        normal_cdf((v - mu + 0.5) / sigma) - normal_cdf((v - mu - 0.5) / sigma)
    }

    /// Shannon entropy in bits of a (normalized) pmf.
    pub fn entropy_bits(pmf: &[f64]) -> f64 {
        let total: f64 = pmf.iter().sum();
        pmf.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let q = p / total;
                -q * q.log2()
            })
            .sum()
    }

    /// MS-SSIM of two `[C,H,W]` images (row-major planes) by direct
    /// window sums, averaged over channels.
    pub fn ms_ssim_direct(x: &[f64], y: &[f64], c: usize, h: usize, w: usize, weights: &[f64], win: usize, sigma: f64) -> f64 {
        let half = (win as f64 - 1.0) / 2.0;
        let g1: Vec<f64> = (0..win).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = g1.iter().sum();
        let mut g2 = vec![0.0; win * win];
        for i in 0..win {
            for j in 0..win {
                g2[i * win + j] = g1[i] * g1[j] / (s * s);
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        for ch in 0..c {
            let mut a: Vec<f64> = x[ch * h * w..(ch + 1) * h * w].to_vec();
            let mut b: Vec<f64> = y[ch * h * w..(ch + 1) * h * w].to_vec();
            let (mut hh, mut ww) = (h, w);
            let mut log_acc = 0.0;
            for (scale, &wt) in weights.iter().enumerate() {
                let (oh, ow) = (hh - win + 1, ww - win + 1);
                let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
                for i in 0..oh {
                    for j in 0..ow {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for u in 0..win {
                            for v in 0..win {
                                let k = g2[u * win + v];
                                let p = a[(i + u) * ww + j + v];
                                let q = b[(i + u) * ww + j + v];
                                mx += k * p;
                                my += k * q;
                                sxx += k * p * p;
                                syy += k * q * q;
                                sxy += k * p * q;
                            }
                        }
                        let vx = sxx - mx * mx;
                        let vy = syy - my * my;
                        let cov = sxy - mx * my;
                        let cs = (2.0 * cov + c2) / (vx + vy + c2);
                        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                        cs_sum += cs;
                        ssim_sum += l * cs;
                    }
                }
                let n = (oh * ow) as f64;
                let last = scale + 1 == weights.len();
                let term = if last { ssim_sum / n } else { cs_sum / n };
                log_acc += wt * term.max(1e-10).ln();
                if !last {
                    let (nh, nw) = (hh / 2, ww / 2);
                    let pool = |src: &[f64]| {
                        let mut out = vec![0.0; nh * nw];
                        for i in 0..nh {
                            for j in 0..nw {
                                out[i * nw + j] = 0.25
                                    * (src[2 * i * ww + 2 * j]
                                        + src[2 * i * ww + 2 * j + 1]
                                        + src[(2 * i + 1) * ww + 2 * j]
                                        + src[(2 * i + 1) * ww + 2 * j + 1]);
                            }
                        }
                        out
                    };
                    a = pool(&a);
                    b = pool(&b);
                    hh = nh;
                    ww = nw;
                }
            }
            total += log_acc.exp();
        }
        total / c as f64
    }
}

/// Which checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Nn,
    Codec,
    Entropy,
    Coder,
    Grad,
    Metrics,
    Causality,
    Pipeline,
    Train,
}

impl Suite {
    pub const NAMES: [&'static str; 11] = [
        "all", "tensor", "nn", "codec", "entropy", "coder", "grad", "metrics", "causality", "pipeline", "train",
    ];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    /// An empty name selects everything.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "" | "all" => Suite::All,
            "tensor" => Suite::Tensor,
            "nn" => Suite::Nn,
            "codec" => Suite::Codec,
            "entropy" => Suite::Entropy,
            "coder" => Suite::Coder,
            "grad" => Suite::Grad,
            "metrics" => Suite::Metrics,
            "causality" => Suite::Causality,
            "pipeline" => Suite::Pipeline,
            "train" => Suite::Train,
            other => {
                return Err(Error::Config(format!(
                    "unknown oracle suite {other:?}; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

/// How `value` is compared with `reference`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `|value - reference| <= tolerance`
    Abs,
    /// `|value - reference| <= tolerance * max(|reference|, tiny)`
    Rel,
    /// `value <= reference + tolerance`
    AtMost,
    /// `value >= reference - tolerance`
    AtLeast,
    /// `value > reference`
    Above,
    /// `value < reference`
    Below,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub id: String,
    pub reference: f64,
    pub value: f64,
    pub tolerance: f64,
    pub check: Check,
    pub pass: bool,
    pub note: String,
}

impl OracleReport {
    pub fn new(id: &str, reference: f64, value: f64, tolerance: f64, check: Check, note: impl Into<String>) -> Self {
        let ok = match check {
            Check::Abs => (value - reference).abs() <= tolerance,
            Check::Rel => (value - reference).abs() <= tolerance * reference.abs().max(f64::MIN_POSITIVE),
            Check::AtMost => value <= reference + tolerance,
            Check::AtLeast => value >= reference - tolerance,
            Check::Above => value > reference,
            Check::Below => value < reference,
        };
        Self {
            id: id.to_string(),
            reference,
            value,
            tolerance,
            check,
            pass: ok && value.is_finite() && !reference.is_nan(),
            note: note.into(),
        }
    }

    /// A case that could not run.
    pub fn failed(id: &str, err: &Error) -> Self {
        Self {
            id: id.to_string(),
            reference: f64::NAN,
            value: f64::NAN,
            tolerance: 0.0,
            check: Check::Abs,
            pass: false,
            note: format!("error: {err}"),
        }
    }

    /// Also requires `cond`; the note records why when it fails.
    pub fn and(mut self, cond: bool, why: &str) -> Self {
        if !cond {
            self.pass = false;
            self.note = if self.note.is_empty() { why.to_string() } else { format!("{}; {why}", self.note) };
        }
        self
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: value {:.9e} reference {:.9e} ({:?}, tol {:e}){}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.value,
            self.reference,
            self.check,
            self.tolerance,
            if self.note.is_empty() { String::new() } else { format!(" {}", self.note) }
        )
    }
}

pub fn to_json_lines(reports: &[OracleReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "id,reference,value,tolerance,check,pass,note";

pub fn to_csv(reports: &[OracleReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let check = serde_json::to_value(r.check).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{},\"{}\"\n",
            r.id,
            r.reference,
            r.value,
            r.tolerance,
            check,
            r.pass,
            r.note.replace('"', "\"\"")
        ));
    }
    out
}

/// Knobs for the expensive training checks.
#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub train_iters: u64,
    /// Training images; procedural scenes are generated when `None`.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            train_iters: 2000,
            data_dir: None,
            seed: 0,
        }
    }
}

/// Case identifiers in run order, for completeness checking.
pub const CASES: &[(&str, Suite)] = &[
    ("tensor.conv_adjoint", Suite::Tensor),
    ("tensor.softplus_zero", Suite::Tensor),
    ("tensor.adam_first_step", Suite::Tensor),
    ("tensor.adam_two_steps", Suite::Tensor),
    ("nn.group_zero_weights", Suite::Nn),
    ("nn.group_nondegenerate", Suite::Nn),
    ("nn.attention_saturated_mask", Suite::Nn),
    ("nn.downsample_k1_receptive_field", Suite::Nn),
    ("codec.branch_perturbation", Suite::Codec),
    ("codec.hyper_sees_both_branches", Suite::Codec),
    ("codec.groups_parameter_count", Suite::Codec),
    ("entropy.likelihood_unit", Suite::Entropy),
    ("entropy.erf_series", Suite::Entropy),
    ("entropy.likelihood_floor", Suite::Entropy),
    ("entropy.smallest_scale_table", Suite::Entropy),
    ("entropy.ci_perturbation", Suite::Entropy),
    ("entropy.prior_init_mass", Suite::Entropy),
    ("entropy.prior_total_mass", Suite::Entropy),
    ("entropy.rate_vs_sigma", Suite::Entropy),
    ("coder.shannon_bound", Suite::Coder),
    ("coder.near_deterministic", Suite::Coder),
    ("coder.tamper", Suite::Coder),
    ("grad.conv", Suite::Grad),
    ("grad.conv_transpose", Suite::Grad),
    ("grad.elementwise", Suite::Grad),
    ("grad.residual_block", Suite::Grad),
    ("grad.residual_group", Suite::Grad),
    ("grad.attention", Suite::Grad),
    ("grad.downsample", Suite::Grad),
    ("grad.upsample", Suite::Grad),
    ("grad.slice_net", Suite::Grad),
    ("grad.factorized_prior", Suite::Grad),
    ("grad.gaussian_likelihood", Suite::Grad),
    ("grad.ms_ssim", Suite::Grad),
    ("grad.full_model", Suite::Grad),
    ("metrics.psnr_one_level", Suite::Metrics),
    ("metrics.ms_ssim_direct", Suite::Metrics),
    ("metrics.bd_rate_identical", Suite::Metrics),
    ("metrics.bd_rate_shift", Suite::Metrics),
    ("causality.stage1_prefix", Suite::Causality),
    ("causality.stage1_ignores_y2", Suite::Causality),
    ("causality.ci_trials", Suite::Causality),
    ("causality.no_ci_isolated", Suite::Causality),
    ("pipeline.rate_fidelity", Suite::Pipeline),
    ("pipeline.decode_psnr_consistency", Suite::Pipeline),
    ("train.loss_ratio", Suite::Train),
    ("train.trained_psnr_gain", Suite::Train),
];

type CaseFn = fn(&OracleOptions) -> Result<Vec<OracleReport>>;

/// Runs the selected suite with default options.
pub fn run_oracles(suite: Suite) -> Vec<OracleReport> {
    run_oracles_with(suite, &OracleOptions::default())
}

pub fn run_oracles_with(suite: Suite, opts: &OracleOptions) -> Vec<OracleReport> {
    let groups: &[(Suite, &[&str], CaseFn)] = &[
        (Suite::Tensor, &["tensor.conv_adjoint"], |_| one(conv_adjoint())),
        (Suite::Tensor, &["tensor.softplus_zero"], |_| one(softplus_zero())),
        (Suite::Tensor, &["tensor.adam_first_step", "tensor.adam_two_steps"], |_| adam_steps()),
        (Suite::Nn, &["nn.group_zero_weights"], |_| one(group_zero_weights())),
        (Suite::Nn, &["nn.group_nondegenerate"], |_| one(group_nondegenerate())),
        (Suite::Nn, &["nn.attention_saturated_mask"], |_| one(attention_saturated())),
        (Suite::Nn, &["nn.downsample_k1_receptive_field"], |_| one(downsample_receptive())),
        (Suite::Codec, &["codec.branch_perturbation"], |_| one(branch_perturbation())),
        (Suite::Codec, &["codec.hyper_sees_both_branches"], |_| one(hyper_sees_both())),
        (Suite::Codec, &["codec.groups_parameter_count"], |_| one(groups_parameter_count())),
        (Suite::Entropy, &["entropy.likelihood_unit", "entropy.erf_series"], |_| likelihood_unit()),
        (Suite::Entropy, &["entropy.likelihood_floor"], |_| one(likelihood_floor())),
        (Suite::Entropy, &["entropy.smallest_scale_table"], |_| one(smallest_scale_table())),
        (Suite::Entropy, &["entropy.ci_perturbation"], |_| one(ci_perturbation())),
        (Suite::Entropy, &["entropy.prior_init_mass", "entropy.prior_total_mass"], |_| prior_mass()),
        (Suite::Entropy, &["entropy.rate_vs_sigma"], |_| one(rate_vs_sigma())),
        (Suite::Coder, &["coder.shannon_bound"], |_| one(shannon_bound())),
        (Suite::Coder, &["coder.near_deterministic"], |_| one(near_deterministic())),
        (Suite::Coder, &["coder.tamper"], |_| one(tamper())),
        (Suite::Grad, &["grad.conv"], |_| one(grad_conv())),
        (Suite::Grad, &["grad.conv_transpose"], |_| one(grad_conv_transpose())),
        (Suite::Grad, &["grad.elementwise"], |_| one(grad_elementwise())),
        (Suite::Grad, &["grad.residual_block"], |_| one(grad_block(BlockKind::Residual, "grad.residual_block"))),
        (Suite::Grad, &["grad.residual_group"], |_| one(grad_block(BlockKind::ResidualGroup, "grad.residual_group"))),
        (Suite::Grad, &["grad.attention"], |_| one(grad_block(BlockKind::Attention, "grad.attention"))),
        (Suite::Grad, &["grad.downsample"], |_| one(grad_block(BlockKind::Downsample, "grad.downsample"))),
        (Suite::Grad, &["grad.upsample"], |_| one(grad_block(BlockKind::Upsample, "grad.upsample"))),
        (Suite::Grad, &["grad.slice_net"], |_| one(grad_slice_net())),
        (Suite::Grad, &["grad.factorized_prior"], |_| one(grad_prior())),
        (Suite::Grad, &["grad.gaussian_likelihood"], |_| one(grad_likelihood())),
        (Suite::Grad, &["grad.ms_ssim"], |_| one(grad_ms_ssim())),
        (Suite::Grad, &["grad.full_model"], |_| one(grad_full_model())),
        (Suite::Metrics, &["metrics.psnr_one_level"], |_| one(psnr_one_level())),
        (Suite::Metrics, &["metrics.ms_ssim_direct"], |_| one(ms_ssim_direct(10, 256))),
        (Suite::Metrics, &["metrics.bd_rate_identical", "metrics.bd_rate_shift"], |_| bd_rate_cases()),
        (Suite::Causality, &["causality.stage1_prefix"], |_| one(stage1_prefix())),
        (Suite::Causality, &["causality.stage1_ignores_y2"], |_| one(stage1_ignores_y2())),
        (Suite::Causality, &["causality.ci_trials"], |_| one(ci_trials(100))),
        (Suite::Causality, &["causality.no_ci_isolated"], |_| one(no_ci_isolated())),
        (Suite::Pipeline, &["pipeline.rate_fidelity", "pipeline.decode_psnr_consistency"], |_| pipeline_cases()),
        (Suite::Train, &["train.loss_ratio", "train.trained_psnr_gain"], train_cases),
    ];
    let mut out = Vec::new();
    for (s, ids, f) in groups {
        if !suite.includes(*s) {
            continue;
        }
        match f(opts) {
            Ok(reports) => out.extend(reports),
            Err(e) => out.extend(ids.iter().map(|id| OracleReport::failed(id, &e))),
        }
    }
    if suite == Suite::All {
        let seen: Vec<&str> = out.iter().map(|r| r.id.as_str()).collect();
        let missing: Vec<&str> = CASES.iter().map(|c| c.0).filter(|id| !seen.contains(id)).collect();
        out.push(
            OracleReport::new("suite.complete", 0.0, missing.len() as f64, 0.0, Check::Abs, "")
                .and(missing.is_empty(), &format!("missing cases: {}", missing.join(", "))),
        );
    }
    out
}

fn one(r: Result<OracleReport>) -> Result<Vec<OracleReport>> {
    r.map(|r| vec![r])
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max)
}

fn tiny_config(use_tb: bool, use_ci: bool) -> ModelConfig {
    ModelConfig {
        n: 4,
        m: 10,
        groups: 5,
        use_ci,
        use_tb,
        hyper_channels: 3,
        lambda: 0.015,
        metric: Metric::Mse,
    }
}

// ---- tensor core -------------------------------------------------------

fn conv_adjoint() -> Result<OracleReport> {
    let mut r = rng(11);
    let a = Tensor::<f64>::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut r);
    let k = Tensor::<f64>::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let ca = kernels::conv2d(&a, &k, 2, 1)?;
    let b = Tensor::<f64>::uniform(ca.shape(), -1.0, 1.0, &mut r);
    let tb = kernels::conv_transpose2d(&b, &k, 2, 1, 1)?;
    let lhs = ca.dot(&b)?;
    let rhs = a.dot(&tb)?;
    Ok(OracleReport::new("tensor.conv_adjoint", lhs, rhs, 1e-10, Check::Rel, "<conv(a),b> vs <a,convT(b)>"))
}

fn softplus_zero() -> Result<OracleReport> {
    let store = ParamStore::<f64>::new();
    let mut e = Eager::new(&store);
    let x = e.constant(Tensor::scalar(0.0));
    let y = e.softplus(&x)?;
    Ok(OracleReport::new("tensor.softplus_zero", std::f64::consts::LN_2, y.data()[0], 1e-12, Check::Abs, ""))
}

fn adam_steps() -> Result<Vec<OracleReport>> {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::new(vec![3], vec![0.3, -1.2, 2.0])?)?;
    let g = Tensor::new(vec![3], vec![0.7, -0.002, 5.0])?;
    let lr = 1e-3;
    let mut adam = AdamState::new(&store);
    let before = store.get(id).clone();
    store.zero_grad();
    store.accumulate_grad(id, &g)?;
    adam.step(&mut store, lr)?;
    let mid = store.get(id).clone();
    store.zero_grad();
    store.accumulate_grad(id, &g)?;
    adam.step(&mut store, lr)?;
    let after = store.get(id).clone();
    // Bias-corrected moments equal g and g^2 after one or two identical
    // steps, so both updates are -lr * g / (|g| + eps).
    let eps = adam.eps;
    let mut err1 = 0.0f64;
    let mut growth = f64::NEG_INFINITY;
    for i in 0..3 {
        let gi = g.data()[i];
        let expect = -lr * gi / (gi.abs() + eps);
        let u1 = mid.data()[i] - before.data()[i];
        let u2 = after.data()[i] - mid.data()[i];
        err1 = err1.max((u1 - expect).abs());
        growth = growth.max(u2.abs() - u1.abs());
    }
    Ok(vec![
        OracleReport::new("tensor.adam_first_step", 0.0, err1, 1e-12, Check::Abs, "max |update - closed form|"),
        OracleReport::new("tensor.adam_two_steps", 0.0, growth, 1e-12, Check::AtMost, "max(|u2| - |u1|)"),
    ])
}

// ---- blocks ------------------------------------------------------------

fn eager_forward<T: Scalar>(store: &ParamStore<T>, block: &Block, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut e = Eager::new(store);
    let xv = e.constant(x.clone());
    Ok((*block.forward(&mut e, &xv)?).clone())
}

fn group_zero_weights() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let g = ResidualGroup::new(&mut store, "rg", 4, 3, &mut rng(1))?;
    for id in store.ids().collect::<Vec<_>>() {
        let z = Tensor::zeros(store.get(id).shape());
        store.set(id, z)?;
    }
    let x = Tensor::<f64>::uniform(&[4, 1, 6, 6], -1.0, 1.0, &mut rng(2));
    let y = eager_forward(&store, &Block::ResidualGroup(g), &x)?;
    let diff = max_abs_diff(&y, &x.map(|v| 2.0 * v));
    Ok(OracleReport::new("nn.group_zero_weights", 0.0, diff, 0.0, Check::Abs, "output vs 2x"))
}

fn group_nondegenerate() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let g = ResidualGroup::new(&mut store, "rg", 4, 3, &mut rng(3))?;
    let x = Tensor::<f64>::uniform(&[4, 1, 6, 6], -1.0, 1.0, &mut rng(4));
    let y = eager_forward(&store, &Block::ResidualGroup(g), &x)?;
    let diff = max_abs_diff(&y, &x);
    Ok(OracleReport::new("nn.group_nondegenerate", 0.0, diff, 0.0, Check::Above, "max |group(x) - x|"))
}

fn attention_saturated() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let a = Attention::new(&mut store, "att", 4, 3, &mut rng(5))?;
    store.set(a.mask_out.bias, Tensor::full(&[4], 40.0))?;
    let x = Tensor::<f64>::uniform(&[4, 1, 6, 6], -1.0, 1.0, &mut rng(6));
    let mut e = Eager::new(&store);
    let xv = e.constant(x.clone());
    let mut t = xv.clone();
    for rb in &a.trunk {
        t = rb.forward(&mut e, &t)?;
    }
    let expect = e.add(&xv, &t)?;
    let got = a.forward(&mut e, &xv)?;
    let diff = max_abs_diff(&got, &expect);
    Ok(OracleReport::new("nn.attention_saturated_mask", 0.0, diff, 1e-9, Check::Abs, "vs x + trunk(x)"))
}

fn downsample_receptive() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let d = Downsample::new(&mut store, "down", 3, 5, 1, &mut rng(7))?;
    let block = Block::Downsample(d);
    let x = Tensor::<f64>::uniform(&[3, 1, 8, 8], 0.1, 1.0, &mut rng(8));
    let base = eager_forward(&store, &block, &x)?;
    let changed = |py: usize, px: usize| -> Result<Vec<(usize, usize)>> {
        let mut xp = x.clone();
        for c in 0..3 {
            xp.data_mut()[c * 64 + py * 8 + px] += 0.5;
        }
        let y = eager_forward(&store, &block, &xp)?;
        let mut locs = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if (0..5).any(|c| y.data()[c * 16 + i * 4 + j] != base.data()[c * 16 + i * 4 + j]) {
                    locs.push((i, j));
                }
            }
        }
        Ok(locs)
    };
    let even = changed(4, 6)?;
    let odd = changed(3, 5)?;
    let violations = even.iter().filter(|&&l| l != (2, 3)).count() + odd.len();
    Ok(OracleReport::new("nn.downsample_k1_receptive_field", 0.0, violations as f64, 0.0, Check::Abs, "")
        .and(even.contains(&(2, 3)), "pixel (4,6) did not reach output (2,3)"))
}

// ---- codec -------------------------------------------------------------

fn branch_perturbation() -> Result<OracleReport> {
    let net = CodecNet::<f64>::new(tiny_config(true, true), &mut rng(9))?;
    let x = Tensor::<f64>::uniform(&[3, 1, 64, 64], 0.0, 1.0, &mut rng(10));
    let (a1, a2, _, _) = net.analyze(&x)?;
    let mut xp = x.clone();
    xp.data_mut()[64 * 20 + 22] += 0.25;
    let (b1, b2, _, _) = net.analyze(&xp)?;
    let (a2, b2) = (a2.expect("two branches"), b2.expect("two branches"));
    let d1 = b1.zip_map(&a1, |p, q| p - q)?;
    let d2 = b2.zip_map(&a2, |p, q| p - q)?;
    let n1 = d1.max_abs();
    let n2 = d2.max_abs();
    let nd = max_abs_diff(&d1, &d2);
    Ok(OracleReport::new("codec.branch_perturbation", 0.0, n1.min(n2).min(nd), 0.0, Check::Above, "min(|dy1|, |dy2|, |dy1 - dy2|)"))
}

fn hyper_sees_both() -> Result<OracleReport> {
    let net = CodecNet::<f64>::new(tiny_config(true, true), &mut rng(12))?;
    let mut r = rng(13);
    let y1 = Tensor::<f64>::uniform(&[10, 1, 4, 4], -2.0, 2.0, &mut r);
    let y2 = Tensor::<f64>::uniform(&[10, 1, 4, 4], -2.0, 2.0, &mut r);
    let z_of = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut e = Eager::new(&net.store);
        let (av, bv) = (e.constant(a.clone()), e.constant(b.clone()));
        Ok((*net.hyper_encode(&mut e, &av, Some(&bv))?).clone())
    };
    let base = z_of(&y1, &y2)?;
    let mut p1 = y1.clone();
    p1.data_mut()[5] += 1.0;
    let mut p2 = y2.clone();
    p2.data_mut()[5] += 1.0;
    let d1 = max_abs_diff(&z_of(&p1, &y2)?, &base);
    let d2 = max_abs_diff(&z_of(&y1, &p2)?, &base);
    Ok(OracleReport::new("codec.hyper_sees_both_branches", 0.0, d1.min(d2), 0.0, Check::Above, "min z change over the two branches"))
}

fn groups_parameter_count() -> Result<OracleReport> {
    let mut c5 = ModelConfig::desk(0.015);
    c5.groups = 5;
    let mut c10 = c5.clone();
    c10.groups = 10;
    let n5 = CodecNet::<f32>::new(c5, &mut rng(14))?.num_parameters();
    let n10 = CodecNet::<f32>::new(c10, &mut rng(14))?.num_parameters();
    Ok(OracleReport::new(
        "codec.groups_parameter_count",
        n5 as f64,
        n10 as f64,
        0.0,
        Check::Above,
        "parameters with 10 groups vs 5",
    ))
}

// ---- entropy -----------------------------------------------------------

fn likelihood_at(v: f64, mu: f64, sigma: f64) -> Result<f64> {
    let store = ParamStore::<f64>::new();
    let mut e = Eager::new(&store);
    let vv = e.constant(Tensor::scalar(v));
    let p = GaussianParams {
        mean: e.constant(Tensor::scalar(mu)),
        scale: e.constant(Tensor::scalar(sigma)),
    };
    Ok(gaussian_likelihood(&mut e, &vv, &p)?.data()[0])
}

fn likelihood_unit() -> Result<Vec<OracleReport>> {
    let p = likelihood_at(0.0, 0.0, 1.0)?;
    let series = reference::erf_series(0.5 / std::f64::consts::SQRT_2, 20);
    Ok(vec![
        OracleReport::new("entropy.likelihood_unit", 0.382925, p, 5e-7, Check::Abs, "p(0; 0, 1)"),
        OracleReport::new("entropy.erf_series", series, p, 1e-9, Check::Abs, "erf(1/(2 sqrt 2)), 20 terms"),
    ])
}

fn likelihood_floor() -> Result<OracleReport> {
    let p = likelihood_at(10.0, 0.0, 0.11)?;
    let direct = reference::gaussian_bin(10.0, 0.0, 0.11);
    Ok(
        OracleReport::new("entropy.likelihood_floor", LIKELIHOOD_FLOOR, p, 0.0, Check::Abs, "")
            .and(direct < LIKELIHOOD_FLOOR, "unfloored mass is not below the floor"),
    )
}

fn smallest_scale_table() -> Result<OracleReport> {
    let t = cdf_for_scale(0)?;
    let radius = -(t.offset() as i64);
    let zero = t.index_of(0).map(|i| t.freq(i)).unwrap_or(0) as f64 / TOTAL_FREQ as f64;
    let direct = reference::gaussian_bin(0.0, 0.0, 0.11);
    Ok(OracleReport::new("entropy.smallest_scale_table", 4.0, radius as f64, 0.0, Check::AtMost, format!("mass at 0 = {zero:.6}"))
        .and((zero - direct).abs() < 1e-3 && zero > 0.99, "mass is not concentrated at 0"))
}

fn desk_charm(use_ci: bool, seed: u64) -> Result<(ParamStore<f64>, Charm)> {
    let mut store = ParamStore::<f64>::new();
    let layout = SliceLayout::new(40, 5)?;
    let charm = Charm::new(&mut store, layout, 80, 32, true, use_ci, &mut rng(seed))?;
    Ok((store, charm))
}

fn stage2_slice0(store: &ParamStore<f64>, charm: &Charm, ctx: &Tensor<f64>, y1: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut e = Eager::new(store);
    let c = e.constant(ctx.clone());
    let y = e.constant(y1.clone());
    let p = charm.stage2_params(&mut e, &c, &y, &[], 0)?;
    Ok(((*p.mean).clone(), (*p.scale).clone()))
}

fn ci_perturbation() -> Result<OracleReport> {
    let (store, charm) = desk_charm(true, 15)?;
    let mut r = rng(16);
    let ctx = Tensor::<f64>::uniform(&[80, 1, 4, 4], -1.0, 1.0, &mut r);
    let y1 = Tensor::<f64>::from_fn(&[40, 1, 4, 4], |_| r.gen_range(-3..=3) as f64);
    let base = stage2_slice0(&store, &charm, &ctx, &y1)?;
    let mut unchanged = 0;
    for ch in 0..40 {
        let mut p = y1.clone();
        p.data_mut()[ch * 16 + r.gen_range(0..16)] += 1.0;
        let got = stage2_slice0(&store, &charm, &ctx, &p)?;
        if got == base {
            unchanged += 1;
        }
    }
    Ok(OracleReport::new("entropy.ci_perturbation", 0.0, unchanged as f64, 0.0, Check::Abs, "channels of y1 whose perturbation left stage-2 slice-0 unchanged"))
}

fn prior_mass() -> Result<Vec<OracleReport>> {
    let mut store = ParamStore::<f64>::new();
    let prior = FactorizedPrior::new(&mut store, "prior", 1, &mut rng(0))?;
    let mut e = Eager::new(&store);
    let v = e.constant(Tensor::from_fn(&[1, 1, 1, 201], |i| i as f64 - 100.0));
    let p = prior.likelihood(&mut e, &v)?;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let p0 = p.data()[100];
    let total: f64 = p.data().iter().sum();
    Ok(vec![
        OracleReport::new("entropy.prior_init_mass", sig(0.5) - sig(-0.5), p0, 1e-9, Check::Abs, "p(0) at init"),
        OracleReport::new("entropy.prior_total_mass", 1.0, total, 1e-3, Check::Abs, "sum over -100..100"),
    ])
}

fn rate_vs_sigma() -> Result<OracleReport> {
    let bits = |sigma: f64| -> Result<f64> {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let v = e.constant(Tensor::full(&[4], 1.5));
        let p = GaussianParams {
            mean: e.constant(Tensor::full(&[4], 1.5)),
            scale: e.constant(Tensor::full(&[4], sigma)),
        };
        let l = gaussian_likelihood(&mut e, &v, &p)?;
        Ok(bits_of(&mut e, &l)?.data()[0])
    };
    Ok(OracleReport::new("entropy.rate_vs_sigma", bits(1.0)?, bits(0.5)?, 0.0, Check::Below, "bits at sigma 0.5 vs 1.0"))
}

// ---- coder -------------------------------------------------------------

fn shannon_bound() -> Result<OracleReport> {
    let pmf = [0.4, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03];
    let mut with_escape = pmf.to_vec();
    with_escape.push(0.0);
    let table = QuantizedCdf::from_pmf(-3, &with_escape)?;
    let n = 10_000;
    let mut r = rng(17);
    let mut s = SymbolStream::new();
    for _ in 0..n {
        let u: f64 = r.gen();
        let mut acc = 0.0;
        let k = pmf
            .iter()
            .position(|p| {
                acc += p;
                u < acc
            })
            .unwrap_or(pmf.len() - 1);
        s.push(k as i64 - 3, 0);
    }
    let bytes = rc_encode(&s, std::slice::from_ref(&table))?;
    let decoded = rc_decode(&bytes, std::slice::from_ref(&table), n, &s.cdf_index)?;
    let bound = n as f64 * reference::entropy_bits(&pmf) + 0.1 * n as f64 + 128.0;
    Ok(OracleReport::new("coder.shannon_bound", bound, 8.0 * bytes.len() as f64, 0.0, Check::AtMost, "payload bits vs nH + 0.1n + 128")
        .and(decoded == s.symbols, "round trip mismatch"))
}

fn near_deterministic() -> Result<OracleReport> {
    let k = 16u32;
    let mut cdf = vec![0, TOTAL_FREQ - (k - 1)];
    cdf.extend((1..k).map(|i| TOTAL_FREQ - (k - 1) + i));
    let t = QuantizedCdf::from_cdf(0, cdf)?;
    let s = SymbolStream {
        symbols: vec![0],
        cdf_index: vec![0],
    };
    let bytes = rc_encode(&s, std::slice::from_ref(&t))?;
    Ok(OracleReport::new("coder.near_deterministic", 16.0, bytes.len() as f64, 0.0, Check::AtMost, "payload bytes"))
}

fn tamper() -> Result<OracleReport> {
    let tables: Vec<QuantizedCdf> = (0..8).map(|i| cdf_for_scale(i * 6)).collect::<Result<_>>()?;
    let mut r = rng(18);
    let mut s = SymbolStream::new();
    for _ in 0..400 {
        let ti = r.gen_range(0..tables.len());
        let spread = 1 + ti as i64 * 3;
        let v = if r.gen_bool(0.02) { r.gen_range(-5000..5000) } else { r.gen_range(-spread..=spread) };
        s.push(v, ti);
    }
    let bytes = rc_encode(&s, &tables)?;
    let mut undetected = 0;
    for pos in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << r.gen_range(0..8);
        match rc_decode(&bad, &tables, s.len(), &s.cdf_index) {
            Ok(sym) if sym == s.symbols => undetected += 1,
            _ => {}
        }
    }
    // Bits in the final flush bytes may carry no information.
    let slack = 4.0;
    Ok(OracleReport::new("coder.tamper", slack, undetected as f64, 0.0, Check::AtMost, format!("{} single-bit flips", bytes.len())))
}

// ---- gradients ---------------------------------------------------------

/// Result of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Probes compared.
    pub probes: usize,
    /// Probes redrawn because the loss is not smooth across the step.
    pub redrawn: usize,
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients of `f` with central differences at
/// `probes` random parameter entries. Step `h = 1e-4 max(1, |theta|)`.
/// The relative error uses `max(|analytic|, |numeric|, 1e-6 max(1, |loss|))`
/// as denominator so that round-off on vanishing gradients is not counted.
///
/// A leaky ReLU or clamp kink inside `[theta - h, theta + h]` makes the
/// central difference meaningless there. For a smooth loss the central
/// differences at `h` and `h/4` agree to `O(h^2)`; probes where they differ
/// by more than the tolerance straddle a kink and are redrawn (at most
/// `probes` times in total). The test never looks at the analytic gradient.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, f: F, probes: usize, seed: u64) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let (loss, analytic): (f64, HashMap<ParamId, Tensor<f64>>) = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        let value = g.value(&l).data()[0];
        let grads = g.backward(l)?;
        (value, grads.param_grads().map(|(id, t)| (id, t.clone())).collect())
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        Ok(g.value(&l).data()[0])
    };
    let ids: Vec<ParamId> = store.ids().collect();
    if ids.is_empty() {
        return Err(Error::Contract("gradcheck needs parameters".into()));
    }
    let floor = 1e-6 * loss.abs().max(1.0);
    let mut r = rng(seed);
    let (mut worst, mut done, mut redrawn) = (0.0f64, 0, 0);
    while done < probes {
        let id = ids[r.gen_range(0..ids.len())];
        let i = r.gen_range(0..store.get(id).len());
        let theta = store.get(id).data()[i];
        let h = 1e-4 * theta.abs().max(1.0);
        let mut central = |step: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = theta + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = theta - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = theta;
            Ok((up - down) / (2.0 * step))
        };
        let numeric = central(h)?;
        let fine = central(h / 4.0)?;
        let a = analytic.get(&id).map(|t| t.data()[i]).unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs()).max(floor);
        if (numeric - fine).abs() > GRAD_TOLERANCE * numeric.abs().max(fine.abs()).max(floor) && redrawn < probes {
            redrawn += 1;
            continue;
        }
        worst = worst.max((a - numeric).abs() / denom);
        done += 1;
    }
    Ok(GradCheck {
        probes,
        redrawn,
        max_rel_err: worst,
    })
}

pub const GRAD_PROBES: usize = 24;
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_report(id: &str, gc: GradCheck) -> OracleReport {
    OracleReport::new(
        id,
        0.0,
        gc.max_rel_err,
        GRAD_TOLERANCE,
        Check::AtMost,
        format!("{} probes, {} redrawn at kinks", gc.probes, gc.redrawn),
    )
        .and(gc.probes >= 20, "fewer than 20 probes")
}

/// Weighted sum of the output, so the loss is not symmetric in its entries.
fn weighted_sum(g: &mut Graph<'_, f64>, y: &Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let wv = g.constant(w);
    let p = g.mul(y, &wv)?;
    g.sum(&p)
}

fn grad_conv() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let c1 = Conv::new(&mut store, "c1", 3, 4, 3, 2, &mut rng(20))?;
    let c2 = Conv::new(&mut store, "c2", 4, 2, 1, 1, &mut rng(21))?;
    let c3 = Conv::new(&mut store, "c3", 2, 3, 5, 1, &mut rng(22))?;
    for c in [&c1, &c2, &c3] {
        let b = Tensor::uniform(store.get(c.bias).shape(), -0.5, 0.5, &mut rng(23));
        store.set(c.bias, b)?;
    }
    let x = Tensor::<f64>::uniform(&[3, 2, 8, 8], -1.0, 1.0, &mut rng(24));
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let h = c1.forward(g, &xv)?;
            let h = c2.forward(g, &h)?;
            let h = c3.forward(g, &h)?;
            weighted_sum(g, &h, 25)
        },
        GRAD_PROBES,
        26,
    )?;
    Ok(grad_report("grad.conv", gc))
}

fn grad_conv_transpose() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let t = ConvT::new(&mut store, "t", 3, 2, &mut rng(27))?;
    let b = Tensor::uniform(&[2], -0.5, 0.5, &mut rng(28));
    store.set(t.bias, b)?;
    let x = Tensor::<f64>::uniform(&[3, 2, 4, 5], -1.0, 1.0, &mut rng(29));
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let h = t.forward(g, &xv)?;
            weighted_sum(g, &h, 30)
        },
        GRAD_PROBES,
        31,
    )?;
    Ok(grad_report("grad.conv_transpose", gc))
}

fn grad_elementwise() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::uniform(&[2, 1, 3, 3], -1.5, 1.5, &mut rng(32)))?;
    let b = store.add("b", Tensor::uniform(&[2, 1, 3, 3], 0.5, 2.0, &mut rng(33)))?;
    let cv = store.add("c", Tensor::uniform(&[2], -1.0, 1.0, &mut rng(34)))?;
    let gc = gradcheck(
        &mut store,
        |g| {
            let (a, b, c) = (g.param(a), g.param(b), g.param(cv));
            let s = g.sigmoid(&a)?;
            let t = g.tanh(&b)?;
            let sp = g.softplus(&a)?;
            let l = g.ln(&b)?;
            let ex = g.exp(&s)?;
            let lr = g.leaky_relu(&a, 0.01)?;
            let nc = g.normal_cdf(&a)?;
            let cl = g.clamp(&a, -1.0, 1.0)?;
            let d = g.div(&sp, &b)?;
            let m = g.mul(&t, &l)?;
            let ac = g.add_channel(&ex, &c)?;
            let mc = g.mul_channel(&lr, &c)?;
            let cat = g.concat(&[&ac, &mc, &nc, &cl])?;
            let sl = g.slice_channels(&cat, 1, 7)?;
            let rs = g.reshape(&sl, &[6, 9])?;
            let sm = g.sum(&rs)?;
            let mean = g.spatial_mean(&d)?;
            let msum = g.sum(&mean)?;
            let sq = g.square(&m)?;
            let qsum = g.sum(&sq)?;
            let x = g.add(&sm, &msum)?;
            let x = g.sub(&x, &qsum)?;
            let x = g.scale(&x, 0.7)?;
            g.add_scalar(&x, 3.0)
        },
        GRAD_PROBES,
        35,
    )?;
    Ok(grad_report("grad.elementwise", gc))
}

fn grad_block(kind: BlockKind, id: &str) -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let (cin, spec) = match kind {
        BlockKind::Downsample => (3, BlockSpec::new(kind, 4, 3)?),
        BlockKind::Upsample => (4, BlockSpec::new(kind, 3, 3)?),
        _ => (3, BlockSpec::new(kind, 3, 3)?),
    };
    let block = Block::build(spec, cin, &mut store, "blk", &mut rng(36))?;
    // Non-zero biases so every parameter has a gradient path worth probing.
    let ids: Vec<ParamId> = store.ids().collect();
    let mut r = rng(37);
    for id in ids {
        if store.name(id).ends_with(".bias") {
            let b = Tensor::uniform(store.get(id).shape(), -0.3, 0.3, &mut r);
            store.set(id, b)?;
        }
    }
    let x = Tensor::<f64>::uniform(&[cin, 2, 6, 6], -1.0, 1.0, &mut rng(38));
    let extra_dn = Downsample::new(&mut store, "k1", cin, 2, 1, &mut rng(39))?;
    let with_k1 = kind == BlockKind::Downsample;
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, &xv)?;
            let mut l = weighted_sum(g, &y, 40)?;
            if with_k1 {
                let y1 = extra_dn.forward(g, &xv)?;
                let l1 = weighted_sum(g, &y1, 41)?;
                l = g.add(&l, &l1)?;
            }
            Ok(l)
        },
        GRAD_PROBES,
        42,
    )?;
    Ok(grad_report(id, gc))
}

fn grad_slice_net() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let net = SliceNet::new(&mut store, "s", 6, 5, 2, &mut rng(43))?;
    let x = Tensor::<f64>::uniform(&[6, 1, 4, 4], -1.0, 1.0, &mut rng(44));
    let v = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |i| ((i * 7) % 5) as f64 - 2.0);
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let p = net.forward(g, &xv)?;
            let vv = g.constant(v.clone());
            let lik = gaussian_likelihood(g, &vv, &p)?;
            bits_of(g, &lik)
        },
        GRAD_PROBES,
        45,
    )?;
    Ok(grad_report("grad.slice_net", gc))
}

fn grad_prior() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let prior = FactorizedPrior::new(&mut store, "prior", 3, &mut rng(46))?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut r = rng(47);
    for id in ids {
        let cur = store.get(id).clone();
        let t = Tensor::from_fn(cur.shape(), |i| cur.data()[i] + r.gen_range(-0.3..0.3));
        store.set(id, t)?;
    }
    let v = Tensor::<f64>::uniform(&[3, 1, 3, 3], -3.0, 3.0, &mut rng(48));
    let gc = gradcheck(
        &mut store,
        |g| {
            let vv = g.constant(v.clone());
            let lik = prior.likelihood(g, &vv)?;
            bits_of(g, &lik)
        },
        GRAD_PROBES,
        49,
    )?;
    Ok(grad_report("grad.factorized_prior", gc))
}

fn grad_likelihood() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let v = store.add("v", Tensor::uniform(&[40], -3.0, 3.0, &mut rng(50)))?;
    let mu = store.add("mu", Tensor::uniform(&[40], -1.0, 1.0, &mut rng(51)))?;
    let sig = store.add("sigma", Tensor::uniform(&[40], 0.3, 3.0, &mut rng(52)))?;
    let gc = gradcheck(
        &mut store,
        |g| {
            let p = GaussianParams {
                mean: g.param(mu),
                scale: g.param(sig),
            };
            let vv = g.param(v);
            let lik = gaussian_likelihood(g, &vv, &p)?;
            bits_of(g, &lik)
        },
        GRAD_PROBES,
        53,
    )?;
    Ok(grad_report("grad.gaussian_likelihood", gc))
}

fn grad_ms_ssim() -> Result<OracleReport> {
    let mut store = ParamStore::<f64>::new();
    let side = metrics::MSSSIM_MIN_SIDE;
    let y = Tensor::<f64>::from_fn(&[1, 1, side, side], |i| 0.5 + 0.3 * ((i % side) as f64 * 0.1).sin());
    let mut r = rng(54);
    let x = store.add("x", Tensor::from_fn(y.shape(), |i| (y.data()[i] + r.gen_range(-0.1..0.1)).clamp(0.0, 1.0)))?;
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.param(x);
            let yv = g.constant(y.clone());
            let zero = g.constant(Tensor::scalar(0.0));
            train::rd_loss(g, &yv, &xv, &zero, 40.0, Metric::MsSsim, side * side)
        },
        GRAD_PROBES,
        55,
    )?;
    Ok(grad_report("grad.ms_ssim", gc))
}

fn grad_full_model() -> Result<OracleReport> {
    let mut net = CodecNet::<f64>::new(tiny_config(true, true), &mut rng(56))?;
    let ids: Vec<ParamId> = net.store.ids().collect();
    let mut r = rng(57);
    for id in ids {
        if net.store.name(id).ends_with(".bias") {
            let b = Tensor::uniform(net.store.get(id).shape(), -0.1, 0.1, &mut r);
            net.store.set(id, b)?;
        }
    }
    let x = Tensor::<f64>::uniform(&[3, 1, 64, 64], 0.0, 1.0, &mut rng(58));
    let CodecNet { store, .. } = &mut net;
    let mut store = std::mem::take(store);
    let net_ref = &net;
    let gc = gradcheck(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            // Same noise on every evaluation.
            let fwd = net_ref.forward_train(g, &xv, &mut rng(59))?;
            train::rd_loss(g, &xv, &fwd.x_hat, &fwd.bits, 0.015, Metric::Mse, 64 * 64)
        },
        GRAD_PROBES,
        60,
    )?;
    Ok(grad_report("grad.full_model", gc))
}

// ---- metrics -----------------------------------------------------------

fn psnr_one_level() -> Result<OracleReport> {
    let x = Tensor::<f64>::full(&[3, 8, 8], 0.4);
    let y = x.map(|v| v + 1.0 / 255.0);
    Ok(OracleReport::new("metrics.psnr_one_level", 20.0 * 255f64.log10(), metrics::psnr(&x, &y)?, 1e-9, Check::Abs, "48.13 dB"))
}

/// Worst absolute difference between the library MS-SSIM and the direct
/// reference over `pairs` random `3 x side x side` pairs.
pub fn ms_ssim_direct(pairs: usize, side: usize) -> Result<OracleReport> {
    let mut r = rng(61);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let x = Tensor::<f64>::uniform(&[3, side, side], 0.0, 1.0, &mut r);
        let amp: f64 = r.gen_range(0.05..0.5);
        let y = Tensor::from_fn(&[3, side, side], |i| (x.data()[i] + r.gen_range(-amp..amp)).clamp(0.0, 1.0));
        let lib = metrics::ms_ssim(&x, &y)?;
        let direct = reference::ms_ssim_direct(x.data(), y.data(), 3, side, side, &MSSSIM_WEIGHTS, SSIM_WINDOW, SSIM_SIGMA);
        worst = worst.max((lib - direct).abs());
    }
    Ok(OracleReport::new("metrics.ms_ssim_direct", 0.0, worst, 1e-6, Check::Abs, format!("{pairs} pairs of 3x{side}x{side}")))
}

fn bd_rate_cases() -> Result<Vec<OracleReport>> {
    let anchor: Vec<RdPoint> = [(0.12, 29.1), (0.27, 31.4), (0.52, 33.9), (0.95, 36.2), (1.5, 38.0)]
        .iter()
        .map(|&(b, q)| RdPoint::new(b, q))
        .collect::<Result<_>>()?;
    let shifted: Vec<RdPoint> = anchor.iter().map(|p| RdPoint::new(p.bpp * 1.1, p.quality)).collect::<Result<_>>()?;
    Ok(vec![
        OracleReport::new("metrics.bd_rate_identical", 0.0, metrics::bd_rate(&anchor, &anchor)?, 1e-9, Check::Abs, "percent"),
        OracleReport::new("metrics.bd_rate_shift", 10.0, metrics::bd_rate(&anchor, &shifted)?, 1e-6, Check::Abs, "percent"),
    ])
}

// ---- causality ---------------------------------------------------------

fn stage1_all(store: &ParamStore<f64>, charm: &Charm, ctx: &Tensor<f64>, y1: &Tensor<f64>) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
    let mut e = Eager::new(store);
    let c = e.constant(ctx.clone());
    let y = e.constant(y1.clone());
    let layout = charm.layout;
    let slices: Vec<_> = layout.ranges().map(|r| e.slice_channels(&y, r.start, r.end)).collect::<Result<_>>()?;
    (0..layout.groups())
        .map(|k| {
            let p = charm.stage1_params(&mut e, &c, &slices[..k], k)?;
            Ok(((*p.mean).clone(), (*p.scale).clone()))
        })
        .collect()
}

fn integer_latent(r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[40, 1, 4, 4], |_| r.gen_range(-4..=4) as f64)
}

/// Counts stage-1 parameter changes caused by perturbing slices at or after
/// the slice being predicted (must be zero), and also how many earlier-slice
/// perturbations did change it (must be positive, or the check is vacuous).
fn stage1_prefix() -> Result<OracleReport> {
    let (store, charm) = desk_charm(true, 62)?;
    let mut r = rng(63);
    let ctx = Tensor::<f64>::uniform(&[80, 1, 4, 4], -1.0, 1.0, &mut r);
    let y1 = integer_latent(&mut r);
    let base = stage1_all(&store, &charm, &ctx, &y1)?;
    let (mut violations, mut sensitive) = (0, 0);
    for j in 0..5 {
        let mut p = y1.clone();
        p.data_mut()[(j * 8 + r.gen_range(0..8)) * 16 + r.gen_range(0..16)] += 1.0;
        let got = stage1_all(&store, &charm, &ctx, &p)?;
        for k in 0..5 {
            let same = got[k] == base[k];
            if j >= k && !same {
                violations += 1;
            }
            if j < k && !same {
                sensitive += 1;
            }
        }
    }
    Ok(OracleReport::new("causality.stage1_prefix", 0.0, violations as f64, 0.0, Check::Abs, format!("{sensitive} of 10 earlier-slice perturbations changed later params"))
        .and(sensitive == 10, "earlier slices do not influence later ones"))
}

fn desk_net(use_ci: bool, seed: u64) -> Result<CodecNet<f64>> {
    let mut c = ModelConfig::desk(0.015);
    c.use_ci = use_ci;
    CodecNet::new(c, &mut rng(seed))
}

fn all_params(net: &CodecNet<f64>, ctx: &Tensor<f64>, y1: &Tensor<f64>, y2: &Tensor<f64>) -> Result<(Vec<(Tensor<f64>, Tensor<f64>)>, Vec<(Tensor<f64>, Tensor<f64>)>)> {
    let mut e = Eager::new(&net.store);
    let c = e.constant(ctx.clone());
    let a = e.constant(y1.clone());
    let b = e.constant(y2.clone());
    let (p1, p2) = net.entropy_params(&mut e, &c, &a, Some(&b))?;
    let own = |v: Vec<GaussianParams<std::rc::Rc<Tensor<f64>>>>| v.into_iter().map(|p| ((*p.mean).clone(), (*p.scale).clone())).collect();
    Ok((own(p1), own(p2)))
}

fn stage1_ignores_y2() -> Result<OracleReport> {
    let net = desk_net(true, 64)?;
    let mut r = rng(65);
    let ctx = Tensor::<f64>::uniform(&[80, 1, 4, 4], -1.0, 1.0, &mut r);
    let y1 = integer_latent(&mut r);
    let y2 = integer_latent(&mut r);
    let (base1, _) = all_params(&net, &ctx, &y1, &y2)?;
    let mut violations = 0;
    for _ in 0..20 {
        let mut p = y2.clone();
        let i = r.gen_range(0..p.len());
        p.data_mut()[i] += r.gen_range(1..4) as f64;
        let (got1, _) = all_params(&net, &ctx, &y1, &p)?;
        violations += got1.iter().zip(&base1).filter(|(a, b)| a != b).count();
    }
    Ok(OracleReport::new("causality.stage1_ignores_y2", 0.0, violations as f64, 0.0, Check::Abs, "20 perturbations of y2"))
}

fn ci_trials(trials: usize) -> Result<OracleReport> {
    let mut changed = 0;
    for t in 0..trials {
        let (store, charm) = desk_charm(true, 1000 + t as u64)?;
        let mut r = rng(5000 + t as u64);
        let ctx = Tensor::<f64>::uniform(&[80, 1, 4, 4], -1.0, 1.0, &mut r);
        let y1 = integer_latent(&mut r);
        let base = stage2_slice0(&store, &charm, &ctx, &y1)?;
        let mut p = y1.clone();
        let i = r.gen_range(0..p.len());
        p.data_mut()[i] += 1.0;
        if stage2_slice0(&store, &charm, &ctx, &p)? != base {
            changed += 1;
        }
    }
    let need = (trials as f64 * 0.99).ceil();
    Ok(OracleReport::new("causality.ci_trials", need, changed as f64, 0.0, Check::AtLeast, format!("{changed}/{trials} trials changed stage-2 slice 0")))
}

fn no_ci_isolated() -> Result<OracleReport> {
    let net = desk_net(false, 66)?;
    let mut r = rng(67);
    let ctx = Tensor::<f64>::uniform(&[80, 1, 4, 4], -1.0, 1.0, &mut r);
    let y1 = integer_latent(&mut r);
    let y2 = integer_latent(&mut r);
    let (_, base2) = all_params(&net, &ctx, &y1, &y2)?;
    let mut violations = 0;
    for _ in 0..20 {
        let mut p = y1.clone();
        let i = r.gen_range(0..p.len());
        p.data_mut()[i] += r.gen_range(1..4) as f64;
        let (_, got2) = all_params(&net, &ctx, &p, &y2)?;
        violations += got2.iter().zip(&base2).filter(|(a, b)| a != b).count();
    }
    Ok(OracleReport::new("causality.no_ci_isolated", 0.0, violations as f64, 0.0, Check::Abs, "20 perturbations of y1"))
}

// ---- pipeline ----------------------------------------------------------

/// `(payload bits, estimated bits)` for one image.
pub fn rate_gap<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<(f64, f64)> {
    let c = pipeline::compress(net, image)?;
    let (by, bz) = net.estimate_rate(&c.latents)?;
    Ok((c.payload_bits() as f64, by + bz))
}

/// Allowed deviation of the payload from the estimate.
pub fn rate_allowance(estimate: f64) -> f64 {
    0.02 * estimate + 512.0
}

fn pipeline_cases() -> Result<Vec<OracleReport>> {
    let net = CodecNet::<f32>::new(ModelConfig::desk(0.015), &mut rng(68))?;
    let img = crate::imageio::rgb_to_tensor::<f32>(&crate::synth::scene(150, 97, 69));
    let (actual, est) = rate_gap(&net, &img)?;
    let c = pipeline::compress(&net, &img)?;
    let d = pipeline::decompress(&net, &c.bytes)?;
    let (eval, _) = pipeline::roundtrip_eval(&net, &img)?;
    let p_dec = metrics::psnr(&img, &d.image)?;
    let p_eval = metrics::psnr(&img, &eval)?;
    Ok(vec![
        OracleReport::new("pipeline.rate_fidelity", est, actual, rate_allowance(est), Check::Abs, "payload bits vs estimate"),
        OracleReport::new("pipeline.decode_psnr_consistency", p_eval, p_dec, 1e-6, Check::Abs, "dB"),
    ])
}

// ---- training ----------------------------------------------------------

/// Outcome of a desk-scale smoke training run.
#[derive(Clone, Debug)]
pub struct SmokeRun {
    /// Mean loss over iterations 50..150.
    pub early_loss: f64,
    /// Mean loss over the last 100 iterations.
    pub final_loss: f64,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub log: Vec<train::LogRow>,
}

/// Trains the desk model (batch 8, 64x64 patches) for `iters` iterations on
/// `data` and measures held-out PSNR before and after.
pub fn smoke_train(cfg: TrainConfig, model: ModelConfig, data: &[Tensor<f32>], held_out: &[Tensor<f32>], init_seed: u64) -> Result<(SmokeRun, CodecNet<f32>)> {
    let net = CodecNet::<f32>::new(model, &mut rng(init_seed))?;
    let psnr_of = |net: &CodecNet<f32>| -> Result<f64> {
        let mut total = 0.0;
        for img in held_out {
            let (rec, _) = pipeline::roundtrip_eval(net, img)?;
            total += metrics::psnr(img, &rec)?;
        }
        Ok(total / held_out.len().max(1) as f64)
    };
    let psnr_before = psnr_of(&net)?;
    let mut trainer = Trainer::new(net, cfg)?;
    let log = train::train_loop(&mut trainer, data, &Default::default(), |_| {})?;
    let mean = |rows: &[train::LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    let n = log.len();
    let early = &log[49.min(n)..150.min(n)];
    let last = &log[n.saturating_sub(100)..];
    let run = SmokeRun {
        early_loss: mean(early),
        final_loss: mean(last),
        psnr_before,
        psnr_after: psnr_of(&trainer.net)?,
        log,
    };
    Ok((run, trainer.net))
}

/// Training patches and held-out images for the smoke run: `opts.data_dir`
/// if given, otherwise 120 procedural scenes.
pub fn smoke_data(opts: &OracleOptions) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let tmp;
    let dir = match &opts.data_dir {
        Some(d) => d.clone(),
        None => {
            tmp = std::env::temp_dir().join(format!("dbcc-scenes-{}-{}", std::process::id(), opts.seed));
            crate::synth::write_scenes(&tmp, 120, 96, 192, opts.seed)?;
            tmp.clone()
        }
    };
    let patches = train::make_patches(&dir, 64, 4096, opts.seed, true)?;
    if opts.data_dir.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    let held: Vec<Tensor<f32>> = (0..2)
        .map(|i| crate::imageio::rgb_to_tensor(&crate::synth::scene(128, 128, 1_000_000 + opts.seed + i)))
        .collect();
    Ok((patches, held))
}

fn train_cases(opts: &OracleOptions) -> Result<Vec<OracleReport>> {
    let (data, held) = smoke_data(opts)?;
    let mut cfg = TrainConfig::desk(0.015, opts.train_iters);
    cfg.seed = opts.seed;
    let (run, _) = smoke_train(cfg, ModelConfig::desk(0.015), &data, &held, opts.seed)?;
    Ok(vec![
        OracleReport::new("train.loss_ratio", 0.7 * run.early_loss, run.final_loss, 0.0, Check::AtMost, format!("early {:.4}, final {:.4}", run.early_loss, run.final_loss)),
        OracleReport::new("train.trained_psnr_gain", run.psnr_before, run.psnr_after, 0.0, Check::Above, "held-out PSNR before vs after"),
    ])
}
