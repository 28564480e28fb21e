//! Local distribution modules and their arrangements with a GA head.
//!
//! * LDv1 predicts a per-channel, per-position mask from the GA features,
//!   `M = sigmoid(up(down(X_g)))`, and refines `X_gald = M * X_g + X_g`.
//! * LDv2 runs dilated local attention over `concat(X_g, X_l)`: queries at
//!   each position, keys and values at the `k x k` sampled neighbours. The
//!   attention output is projected back to `c` channels, concatenated with
//!   `X_l` and fused by a 1x1 conv.
//!
//! [`gald_forward`] composes a GA head with either LD module in one of three
//! arrangements and concatenates the result with the input, giving `2c`
//! channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{traced, Tape, Var};
use crate::error::{config_err, Result};
use crate::ga::{ga_on_tape, GaConfig, GaParams};
use crate::ops::conv::{ConvGeometry, ConvParams, ConvWeights};
use crate::ops::local_attention::{BorderMode, LocalWindow};
use crate::ops::{BackwardFn, MacCounter};
use crate::params::{impl_parameters, map_vec, NoParams};
use crate::tensor::Tensor;

pub use crate::ops::local_attention::{sample_neighbors, SampledTensor};

/// How LDv1 shrinks `X_g` by the ratio `d` before predicting the mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ldv1Strategy {
    /// Stack of stride-2 3x3 depth-wise convs (learnable).
    #[default]
    DepthwiseConv,
    Bilinear,
    AvgPool,
}

impl std::str::FromStr for Ldv1Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "depthwise_conv" | "depthwise" => Ok(Ldv1Strategy::DepthwiseConv),
            "bilinear" => Ok(Ldv1Strategy::Bilinear),
            "avg_pool" | "avgpool" => Ok(Ldv1Strategy::AvgPool),
            other => Err(format!(
                "unknown LDv1 strategy `{other}` (expected depthwise_conv, bilinear or avg_pool)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ldv1Config {
    pub downsample_ratio: usize,
    pub strategy: Ldv1Strategy,
    /// Number of stride-2 layers; `2^stack_depth == downsample_ratio` for
    /// the depth-wise strategy.
    pub stack_depth: usize,
}

impl Ldv1Config {
    pub fn new(downsample_ratio: usize, strategy: Ldv1Strategy) -> Result<Self> {
        if downsample_ratio == 0 {
            return config_err("LDv1 downsample ratio must be positive");
        }
        let stack_depth = match strategy {
            Ldv1Strategy::DepthwiseConv => {
                if !downsample_ratio.is_power_of_two() {
                    return config_err(format!(
                        "depth-wise stride-2 stack cannot realise ratio {downsample_ratio}"
                    ));
                }
                downsample_ratio.trailing_zeros() as usize
            }
            _ => 0,
        };
        Ok(Ldv1Config {
            downsample_ratio,
            strategy,
            stack_depth,
        })
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let d = self.downsample_ratio;
        if d == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return config_err(format!("LDv1 ratio {d} does not divide {h}x{w}"));
        }
        if self.strategy == Ldv1Strategy::DepthwiseConv && 1usize << self.stack_depth != d {
            return config_err(format!(
                "{} stride-2 layers give ratio {}, not {d}",
                self.stack_depth,
                1usize << self.stack_depth
            ));
        }
        Ok(())
    }
}

impl Default for Ldv1Config {
    fn default() -> Self {
        Ldv1Config::new(8, Ldv1Strategy::DepthwiseConv).expect("8 is a power of two")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ldv2Config {
    pub window: LocalWindow,
    pub reduced_channels: usize,
    pub border_mode: BorderMode,
}

impl Ldv2Config {
    /// Kernel 5, dilation 3, masked softmax.
    pub fn new(reduced_channels: usize) -> Self {
        Ldv2Config {
            window: LocalWindow {
                kernel: 5,
                dilation: 3,
            },
            reduced_channels,
            border_mode: BorderMode::MaskedSoftmax,
        }
    }

    pub fn with_window(mut self, kernel: usize, dilation: usize) -> Result<Self> {
        self.window = LocalWindow::new(kernel, dilation)?;
        Ok(self)
    }

    pub fn with_border(mut self, mode: BorderMode) -> Self {
        self.border_mode = mode;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "version")]
pub enum LdConfig {
    V1(Ldv1Config),
    V2(Ldv2Config),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `concat(LD(GA(x)), x)`
    #[default]
    Gald,
    /// `concat(GA(LD(x)), x)`
    Ldga,
    /// `concat(LD(x), GA(x))`
    Parallel,
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [Arrangement::Gald, Arrangement::Ldga, Arrangement::Parallel];
}

impl std::str::FromStr for Arrangement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gald" => Ok(Arrangement::Gald),
            "ldga" => Ok(Arrangement::Ldga),
            "parallel" => Ok(Arrangement::Parallel),
            other => Err(format!(
                "unknown arrangement `{other}` (expected gald, ldga or parallel)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaldConfig {
    pub ga: GaConfig,
    pub ld: LdConfig,
    pub arrangement: Arrangement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ldv1Params<T> {
    /// Bias-free stride-2 3x3 depth-wise layers; empty for the
    /// parameter-free strategies.
    pub depthwise: Vec<ConvParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ldv2Params<T> {
    /// 1x1 `2c -> C'`, bias-free.
    pub theta: ConvParams<T>,
    pub phi: ConvParams<T>,
    pub g: ConvParams<T>,
    /// 1x1 `C' -> c`, bias-free.
    pub out: ConvParams<T>,
    /// 1x1 `2c -> c` over `concat(out, X_l)`.
    pub fuse: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LdParams<T> {
    V1(Ldv1Params<T>),
    V2(Ldv2Params<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaldParams<T> {
    pub ga: GaParams<T>,
    pub ld: LdParams<T>,
}

impl<T> Ldv1Params<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Ldv1Params<U> {
        Ldv1Params {
            depthwise: map_vec(&self.depthwise, |c| c.map(f)),
        }
    }
}

impl<T> Ldv2Params<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Ldv2Params<U> {
        Ldv2Params {
            theta: self.theta.map(f),
            phi: self.phi.map(f),
            g: self.g.map(f),
            out: self.out.map(f),
            fuse: self.fuse.map(f),
        }
    }
}

impl<T> LdParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LdParams<U> {
        match self {
            LdParams::V1(p) => LdParams::V1(p.map(f)),
            LdParams::V2(p) => LdParams::V2(p.map(f)),
        }
    }
}

impl<T> GaldParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GaldParams<U> {
        GaldParams {
            ga: self.ga.map(f),
            ld: self.ld.map(f),
        }
    }
}

impl_parameters!(Ldv1Params);
impl_parameters!(Ldv2Params);
impl_parameters!(LdParams);
impl_parameters!(GaldParams);

impl Ldv1Params<Tensor> {
    pub fn init(cfg: &Ldv1Config, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let depthwise = match cfg.strategy {
            Ldv1Strategy::DepthwiseConv => (0..cfg.stack_depth)
                .map(|_| {
                    ConvWeights::init(
                        rng,
                        c,
                        c,
                        3,
                        ConvGeometry {
                            stride: 2,
                            padding: 1,
                            groups: c,
                            ..ConvGeometry::default()
                        },
                        false,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(Ldv1Params { depthwise })
    }
}

impl Ldv2Params<Tensor> {
    pub fn init(cfg: &Ldv2Config, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cr = cfg.reduced_channels;
        if cr == 0 || cr > 2 * c {
            return config_err(format!(
                "LDv2 reduced channels {cr} must be in 1..={}",
                2 * c
            ));
        }
        let pw = |rng: &mut ChaCha8Rng, o: usize, i: usize, bias: bool| {
            ConvWeights::init(rng, o, i, 1, ConvGeometry::default(), bias)
        };
        Ok(Ldv2Params {
            theta: pw(rng, cr, 2 * c, false)?,
            phi: pw(rng, cr, 2 * c, false)?,
            g: pw(rng, cr, 2 * c, false)?,
            out: pw(rng, c, cr, false)?,
            fuse: pw(rng, c, 2 * c, true)?,
        })
    }
}

impl LdParams<Tensor> {
    pub fn init(cfg: &LdConfig, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match cfg {
            LdConfig::V1(v1) => LdParams::V1(Ldv1Params::init(v1, c, rng)?),
            LdConfig::V2(v2) => LdParams::V2(Ldv2Params::init(v2, c, rng)?),
        })
    }
}

impl GaldParams<Tensor> {
    /// GA parameters first, then LD, from one seeded stream.
    pub fn init(cfg: &GaldConfig, c: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(GaldParams {
            ga: GaParams::init_with(&cfg.ga, c, &mut rng)?,
            ld: LdParams::init(&cfg.ld, c, &mut rng)?,
        })
    }
}

/// Records the LDv1 mask on `tape`.
pub fn ldv1_mask_on_tape(
    tape: &mut Tape,
    x_g: Var,
    cfg: &Ldv1Config,
    p: &Ldv1Params<Var>,
) -> Result<Var> {
    let s = tape.shape(x_g);
    cfg.validate(s.h, s.w)?;
    let d = cfg.downsample_ratio;
    let small = match cfg.strategy {
        Ldv1Strategy::DepthwiseConv => {
            if p.depthwise.len() != cfg.stack_depth {
                return config_err(format!(
                    "{} depth-wise layers supplied, config needs {}",
                    p.depthwise.len(),
                    cfg.stack_depth
                ));
            }
            p.depthwise
                .iter()
                .try_fold(x_g, |acc, layer| tape.conv2d(acc, layer))?
        }
        Ldv1Strategy::Bilinear => tape.resize(x_g, s.h / d, s.w / d)?,
        Ldv1Strategy::AvgPool => tape.avg_pool(x_g, d)?,
    };
    let up = tape.resize(small, s.h, s.w)?;
    Ok(tape.sigmoid(up))
}

/// `M * X_g + X_g`.
pub fn ldv1_apply_on_tape(tape: &mut Tape, x_g: Var, m: Var) -> Result<Var> {
    let weighted = tape.mul(m, x_g)?;
    tape.add(weighted, x_g)
}

fn ldv2_attention_on_tape(
    tape: &mut Tape,
    x_g: Var,
    x_l: Var,
    cfg: &Ldv2Config,
    p: &Ldv2Params<Var>,
) -> Result<Var> {
    let input = tape.concat(x_g, x_l)?;
    let q = tape.conv2d(input, &p.theta)?;
    let k = tape.conv2d(input, &p.phi)?;
    let v = tape.conv2d(input, &p.g)?;
    tape.local_attention(q, k, v, cfg.window, cfg.border_mode)
}

pub fn ldv2_on_tape(
    tape: &mut Tape,
    x_g: Var,
    x_l: Var,
    cfg: &Ldv2Config,
    p: &Ldv2Params<Var>,
) -> Result<Var> {
    if tape.shape(x_g) != tape.shape(x_l) {
        return config_err(format!(
            "LDv2 needs equal GA and local shapes, got {} and {}",
            tape.shape(x_g),
            tape.shape(x_l)
        ));
    }
    let att = ldv2_attention_on_tape(tape, x_g, x_l, cfg, p)?;
    let proj = tape.conv2d(att, &p.out)?;
    let both = tape.concat(proj, x_l)?;
    tape.conv2d(both, &p.fuse)
}

/// LD module on `x_g` with local features `x_l` (LDv1 ignores `x_l`).
pub fn ld_on_tape(
    tape: &mut Tape,
    x_g: Var,
    x_l: Var,
    cfg: &LdConfig,
    p: &LdParams<Var>,
) -> Result<Var> {
    match (cfg, p) {
        (LdConfig::V1(c), LdParams::V1(p)) => {
            let m = ldv1_mask_on_tape(tape, x_g, c, p)?;
            ldv1_apply_on_tape(tape, x_g, m)
        }
        (LdConfig::V2(c), LdParams::V2(p)) => ldv2_on_tape(tape, x_g, x_l, c, p),
        _ => config_err("LD config and parameters are different versions"),
    }
}

pub fn gald_on_tape(tape: &mut Tape, x: Var, cfg: &GaldConfig, p: &GaldParams<Var>) -> Result<Var> {
    match cfg.arrangement {
        Arrangement::Gald => {
            let xg = ga_on_tape(tape, x, &cfg.ga, &p.ga)?;
            let refined = ld_on_tape(tape, xg, x, &cfg.ld, &p.ld)?;
            tape.concat(refined, x)
        }
        Arrangement::Ldga => {
            let local = ld_on_tape(tape, x, x, &cfg.ld, &p.ld)?;
            let xg = ga_on_tape(tape, local, &cfg.ga, &p.ga)?;
            tape.concat(xg, x)
        }
        Arrangement::Parallel => {
            let local = ld_on_tape(tape, x, x, &cfg.ld, &p.ld)?;
            let xg = ga_on_tape(tape, x, &cfg.ga, &p.ga)?;
            tape.concat(local, xg)
        }
    }
}

/// LDv1 mask `M` in `(0, 1)`. Backward yields `[dx_g, dparams...]`.
pub fn ldv1_mask(
    x_g: &Tensor,
    cfg: &Ldv1Config,
    params: &Ldv1Params<Tensor>,
) -> Result<(Tensor, BackwardFn)> {
    traced(
        std::slice::from_ref(x_g),
        params,
        &MacCounter::new(),
        |tape, ins, p| ldv1_mask_on_tape(tape, ins[0], cfg, p),
    )
}

/// `X_gald = M * X_g + X_g`. Backward yields `[dx_g, dm]`.
pub fn ldv1_apply(x_g: &Tensor, m: &Tensor) -> Result<(Tensor, BackwardFn)> {
    traced(
        &[x_g.clone(), m.clone()],
        &NoParams,
        &MacCounter::new(),
        |tape, ins, _| ldv1_apply_on_tape(tape, ins[0], ins[1]),
    )
}

/// Mask and apply in one step. Backward yields `[dx_g, dparams...]`.
pub fn ldv1_forward(
    x_g: &Tensor,
    cfg: &Ldv1Config,
    params: &Ldv1Params<Tensor>,
) -> Result<(Tensor, BackwardFn)> {
    traced(
        std::slice::from_ref(x_g),
        params,
        &MacCounter::new(),
        |tape, ins, p| {
            let m = ldv1_mask_on_tape(tape, ins[0], cfg, p)?;
            ldv1_apply_on_tape(tape, ins[0], m)
        },
    )
}

/// Full LDv2 block. Backward yields `[dx_g, dx_l, dparams...]`. Adds
/// `2 * C' * N * K` MACs per image to `counter`.
pub fn ldv2_forward(
    x_g: &Tensor,
    x_l: &Tensor,
    cfg: &Ldv2Config,
    params: &Ldv2Params<Tensor>,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    traced(
        &[x_g.clone(), x_l.clone()],
        params,
        counter,
        |tape, ins, p| ldv2_on_tape(tape, ins[0], ins[1], cfg, p),
    )
}

/// The local attention output `(n, C', h, w)` before the output projection
/// and fusion.
pub fn ldv2_attention(
    x_g: &Tensor,
    x_l: &Tensor,
    cfg: &Ldv2Config,
    params: &Ldv2Params<Tensor>,
) -> Result<Tensor> {
    let (y, _) = traced(
        &[x_g.clone(), x_l.clone()],
        params,
        &MacCounter::new(),
        |tape, ins, p| ldv2_attention_on_tape(tape, ins[0], ins[1], cfg, p),
    )?;
    Ok(y)
}

/// GA head plus LD module in the configured arrangement, concatenated with
/// the input: `(n, c, h, w) -> (n, 2c, h, w)`. Backward yields
/// `[dx, dparams...]`.
pub fn gald_forward(
    x: &Tensor,
    cfg: &GaldConfig,
    params: &GaldParams<Tensor>,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    traced(std::slice::from_ref(x), params, counter, |tape, ins, p| {
        gald_on_tape(tape, ins[0], cfg, p)
    })
}
