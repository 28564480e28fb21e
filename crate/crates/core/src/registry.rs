//! Named gradient-check cases for every differentiable op, head and module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::ga::{AsppParams, AttnParams, GaConfig, GaKind, GaParams, PspParams};
use crate::ld::{
    gald_forward, ldv1_apply, ldv1_forward, ldv1_mask, ldv2_forward, Arrangement, GaldConfig,
    GaldParams, LdConfig, Ldv1Config, Ldv1Params, Ldv1Strategy, Ldv2Config, Ldv2Params,
};
use crate::ops::conv::{ConvGeometry, ConvWeights};
use crate::ops::local_attention::{BorderMode, LocalWindow};
use crate::ops::{self, BackwardFn, MacCounter};
use crate::oracles::{gradcheck, GradReport, GradcheckOptions};
use crate::params::Parameters;
use crate::tensor::{Shape4, Tensor};

/// Maximum relative error accepted by [`run_gradcheck`].
pub const GRADCHECK_TOL: f64 = 1e-5;

pub const GRADCHECK_OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "depthwise_conv2d",
    "bilinear_upsample",
    "avg_pool_adaptive",
    "avg_pool2d",
    "sigmoid",
    "relu",
    "softmax_lastdim",
    "batched_matmul",
    "local_attention",
    "ga_psp",
    "ga_aspp",
    "ga_nonlocal",
    "ga_cgnl",
    "ldv1_mask",
    "ldv1_apply",
    "ldv1_forward",
    "ldv2_forward",
    "gald_forward",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdVersion {
    V1,
    V2,
}

impl std::str::FromStr for LdVersion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "v1" | "ldv1" => Ok(LdVersion::V1),
            "v2" | "ldv2" => Ok(LdVersion::V2),
            other => Err(format!("unknown LD version `{other}` (expected v1 or v2)")),
        }
    }
}

/// One gradient-check request. Fields not used by `op` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub op: String,
    pub dims: [usize; 4],
    pub seed: u64,
    pub ga: GaKind,
    pub ld: LdVersion,
    pub arrangement: Arrangement,
    pub kernel: usize,
    pub dilation: usize,
    pub downsample_ratio: usize,
    pub ldv1_strategy: Ldv1Strategy,
    pub border_mode: BorderMode,
}

impl GradcheckSpec {
    /// Batch 1, two channels, 4x4 grid, LDv2 window 3 with dilation 1,
    /// LDv1 ratio 2.
    pub fn new(op: &str, seed: u64) -> Self {
        GradcheckSpec {
            op: op.to_string(),
            dims: [1, 2, 4, 4],
            seed,
            ga: GaKind::Aspp,
            ld: LdVersion::V2,
            arrangement: Arrangement::Gald,
            kernel: 3,
            dilation: 1,
            downsample_ratio: 2,
            ldv1_strategy: Ldv1Strategy::DepthwiseConv,
            border_mode: BorderMode::MaskedSoftmax,
        }
    }

    fn shape(&self) -> Shape4 {
        let [n, c, h, w] = self.dims;
        Shape4::new(n, c, h, w)
    }

    /// GA config sized for a small test grid.
    pub fn ga_config(&self) -> GaConfig {
        let s = self.shape();
        let mut cfg = GaConfig::new(self.ga, s.c);
        let side = s.h.min(s.w) / cfg.internal_downsample.max(1);
        cfg.psp_bins = [1, 2, 3]
            .into_iter()
            .filter(|&b| b <= side.max(1))
            .collect();
        cfg.aspp_rates = [1, 2, 3].into_iter().filter(|&r| r < side).collect();
        cfg
    }

    pub fn ldv1_config(&self) -> Result<Ldv1Config> {
        Ldv1Config::new(self.downsample_ratio, self.ldv1_strategy)
    }

    pub fn ldv2_config(&self) -> Result<Ldv2Config> {
        Ok(Ldv2Config::new(self.shape().c)
            .with_window(self.kernel, self.dilation)?
            .with_border(self.border_mode))
    }

    pub fn gald_config(&self) -> Result<GaldConfig> {
        Ok(GaldConfig {
            ga: self.ga_config(),
            ld: match self.ld {
                LdVersion::V1 => LdConfig::V1(self.ldv1_config()?),
                LdVersion::V2 => LdConfig::V2(self.ldv2_config()?),
            },
            arrangement: self.arrangement,
        })
    }
}

fn check_inputs<F>(op: F, inputs: Vec<Tensor>) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<(Tensor, BackwardFn)>,
{
    gradcheck(
        op,
        &inputs,
        GradcheckOptions::default().with_tol(GRADCHECK_TOL),
    )
}

/// Checks `f(inputs, params)` over the inputs followed by every parameter
/// tensor.
fn check_with_params<P, F>(inputs: Vec<Tensor>, params: P, f: F) -> Result<GradReport>
where
    P: Parameters,
    F: Fn(&[Tensor], &P) -> Result<(Tensor, BackwardFn)>,
{
    let k = inputs.len();
    let mut all = inputs;
    all.extend(params.to_vec());
    check_inputs(
        |ts| {
            let p = params.from_slice(&ts[k..])?;
            f(&ts[..k], &p)
        },
        all,
    )
}

/// Runs the gradient check described by `spec`. Unknown op names and
/// invalid shapes return a config error.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradReport> {
    let s = spec.shape();
    if s.numel()? == 0 {
        return config_err("dims must be positive");
    }
    let seed = spec.seed;
    let x = Tensor::uniform(s, seed, -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let counter = MacCounter::new();
    match spec.op.as_str() {
        "conv2d" | "conv2d_strided" => {
            let geometry = if spec.op == "conv2d" {
                ConvGeometry {
                    padding: 1,
                    ..ConvGeometry::default()
                }
            } else {
                ConvGeometry {
                    stride: 2,
                    dilation: 2,
                    padding: 2,
                    ..ConvGeometry::default()
                }
            };
            let w = ConvWeights::init(&mut rng, 3, s.c, 3, geometry, true)?;
            check_with_params(vec![x], w, |ts, w| ops::conv2d(&ts[0], w))
        }
        "depthwise_conv2d" => {
            let geometry = ConvGeometry {
                stride: 2,
                padding: 1,
                groups: s.c,
                ..ConvGeometry::default()
            };
            let w = ConvWeights::init(&mut rng, s.c, s.c, 3, geometry, false)?;
            check_with_params(vec![x], w, |ts, w| ops::depthwise_conv2d(&ts[0], w))
        }
        "bilinear_upsample" => check_inputs(
            |ts| ops::bilinear_upsample(&ts[0], s.h + 3, 2 * s.w + 1),
            vec![x],
        ),
        "avg_pool_adaptive" => {
            let bins = 3.min(s.h.min(s.w));
            check_inputs(|ts| ops::avg_pool_adaptive(&ts[0], bins), vec![x])
        }
        "avg_pool2d" => {
            if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                return config_err("avg_pool2d gradcheck needs even spatial dims");
            }
            check_inputs(|ts| ops::avg_pool2d(&ts[0], 2), vec![x])
        }
        "sigmoid" => check_inputs(|ts| ops::sigmoid(&ts[0]), vec![x.map(|v| 3.0 * v)]),
        "relu" => {
            // Keep inputs away from the kink.
            let x = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            check_inputs(|ts| ops::relu(&ts[0]), vec![x])
        }
        "softmax_lastdim" => {
            // Rows sum to one, so the output is weighted to make the summed
            // objective depend on x.
            let r = Tensor::uniform(s, seed + 1, 0.5, 2.0);
            check_inputs(
                |ts| {
                    let (y, back) = ops::softmax_lastdim(&ts[0])?;
                    let r = r.clone();
                    let weighted = y.zip_map(&r, |a, b| a * b)?;
                    let backward = BackwardFn::new(move |g| {
                        back.apply(&g.zip_map(&r, |a, b| a * b).expect("same shape"))
                    });
                    Ok((weighted, backward))
                },
                vec![x.map(|v| 2.0 * v)],
            )
        }
        "batched_matmul" => {
            let a = x.reshape(Shape4::new(s.n * s.c, 1, s.h, s.w))?;
            let b = Tensor::uniform(Shape4::new(s.n * s.c, 1, s.w, s.h), seed + 1, -1.0, 1.0);
            check_inputs(
                |ts| ops::batched_matmul(&ts[0], &ts[1], &counter),
                vec![a, b],
            )
        }
        "local_attention" => {
            let window = LocalWindow::new(spec.kernel, spec.dilation)?;
            let k = Tensor::uniform(s, seed + 1, -1.0, 1.0);
            let v = Tensor::uniform(s, seed + 2, -1.0, 1.0);
            let mode = spec.border_mode;
            check_inputs(
                |ts| {
                    crate::autograd::traced(
                        ts,
                        &crate::params::NoParams,
                        &counter,
                        |tape, ins, _| tape.local_attention(ins[0], ins[1], ins[2], window, mode),
                    )
                },
                vec![x, k, v],
            )
        }
        "ga_psp" | "ga_aspp" | "ga_nonlocal" | "ga_cgnl" => {
            let kind = match spec.op.as_str() {
                "ga_psp" => GaKind::Psp,
                "ga_aspp" => GaKind::Aspp,
                "ga_nonlocal" => GaKind::NonLocal,
                _ => GaKind::Cgnl,
            };
            let cfg = GradcheckSpec {
                ga: kind,
                ..spec.clone()
            }
            .ga_config();
            cfg.validate(s.c, s.h, s.w)?;
            let params = GaParams::init_with(&cfg, s.c, &mut rng)?;
            match params {
                GaParams::Psp(p) => check_with_params(vec![x], p, |ts, p: &PspParams<Tensor>| {
                    crate::ga::ga_psp(&ts[0], &cfg, p)
                }),
                GaParams::Aspp(p) => check_with_params(vec![x], p, |ts, p: &AsppParams<Tensor>| {
                    crate::ga::ga_aspp(&ts[0], &cfg, p)
                }),
                GaParams::NonLocal(p) => {
                    check_with_params(vec![x], p, |ts, p: &AttnParams<Tensor>| {
                        crate::ga::ga_nonlocal(&ts[0], &cfg, p, &counter)
                    })
                }
                GaParams::Cgnl(p) => check_with_params(vec![x], p, |ts, p: &AttnParams<Tensor>| {
                    crate::ga::ga_cgnl(&ts[0], &cfg, p, &counter)
                }),
            }
        }
        "ldv1_mask" | "ldv1_forward" => {
            let cfg = spec.ldv1_config()?;
            cfg.validate(s.h, s.w)?;
            let params = Ldv1Params::init(&cfg, s.c, &mut rng)?;
            if spec.op == "ldv1_mask" {
                check_with_params(vec![x], params, |ts, p| ldv1_mask(&ts[0], &cfg, p))
            } else {
                check_with_params(vec![x], params, |ts, p| ldv1_forward(&ts[0], &cfg, p))
            }
        }
        "ldv1_apply" => {
            let m = Tensor::uniform(s, seed + 1, 0.0, 1.0);
            check_inputs(|ts| ldv1_apply(&ts[0], &ts[1]), vec![x, m])
        }
        "ldv2_forward" => {
            let cfg = spec.ldv2_config()?;
            let params = Ldv2Params::init(&cfg, s.c, &mut rng)?;
            let xl = Tensor::uniform(s, seed + 1, -1.0, 1.0);
            check_with_params(vec![x, xl], params, |ts, p| {
                ldv2_forward(&ts[0], &ts[1], &cfg, p, &counter)
            })
        }
        "gald_forward" => {
            let cfg = spec.gald_config()?;
            cfg.ga.validate(s.c, s.h, s.w)?;
            if let LdConfig::V1(v1) = cfg.ld {
                v1.validate(s.h, s.w)?;
            }
            let params = GaldParams::init(&cfg, s.c, seed.wrapping_add(1000))?;
            check_with_params(vec![x], params, |ts, p| {
                gald_forward(&ts[0], &cfg, p, &counter)
            })
        }
        other => config_err(format!(
            "no gradcheck registered for `{other}`; known ops: {}",
            GRADCHECK_OPS.join(", ")
        )),
    }
}
