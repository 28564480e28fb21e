//! Global aggregation heads: pyramid pooling, atrous pyramid pooling,
//! non-local attention and grouped compact (linearised) attention.
//!
//! Every head maps `(n, c, h, w)` to `(n, c, h, w)`. A head may run on an
//! average-pooled copy of its input (`internal_downsample`), in which case the
//! result is bilinearly resized back before any residual is added.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{traced, Tape, Var};
use crate::error::{config_err, Result};
use crate::ops::conv::{ConvGeometry, ConvParams, ConvWeights};
use crate::ops::{BackwardFn, MacCounter};
use crate::params::{impl_parameters, map_vec};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaKind {
    Psp,
    Aspp,
    NonLocal,
    Cgnl,
}

impl GaKind {
    pub const ALL: [GaKind; 4] = [GaKind::Psp, GaKind::Aspp, GaKind::NonLocal, GaKind::Cgnl];

    pub fn name(self) -> &'static str {
        match self {
            GaKind::Psp => "psp",
            GaKind::Aspp => "aspp",
            GaKind::NonLocal => "nonlocal",
            GaKind::Cgnl => "cgnl",
        }
    }
}

impl std::str::FromStr for GaKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "psp" => Ok(GaKind::Psp),
            "aspp" => Ok(GaKind::Aspp),
            "nonlocal" | "nl" | "non_local" => Ok(GaKind::NonLocal),
            "cgnl" => Ok(GaKind::Cgnl),
            other => Err(format!(
                "unknown GA head `{other}` (expected psp, aspp, nonlocal or cgnl)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub kind: GaKind,
    /// Width `C'` of the pooled branches or of the query/key/value projections.
    pub reduced_channels: usize,
    pub psp_bins: Vec<usize>,
    pub aspp_rates: Vec<usize>,
    pub cgnl_groups: usize,
    /// 1 or 2.
    pub internal_downsample: usize,
}

impl GaConfig {
    /// Defaults: bins `[1,2,3,6]`, rates `[6,12,18]`, one CGNL group, and a
    /// factor-2 internal downsample for the attention heads only.
    pub fn new(kind: GaKind, reduced_channels: usize) -> Self {
        GaConfig {
            kind,
            reduced_channels,
            psp_bins: vec![1, 2, 3, 6],
            aspp_rates: vec![6, 12, 18],
            cgnl_groups: 1,
            internal_downsample: match kind {
                GaKind::Psp | GaKind::Aspp => 1,
                GaKind::NonLocal | GaKind::Cgnl => 2,
            },
        }
    }

    pub fn with_downsample(mut self, ds: usize) -> Self {
        self.internal_downsample = ds;
        self
    }

    /// Checks the configuration against an input of `c` channels on an
    /// `h x w` grid.
    pub fn validate(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let cr = self.reduced_channels;
        if cr == 0 || cr > c {
            return config_err(format!("reduced channels {cr} must be in 1..={c}"));
        }
        let ds = self.internal_downsample;
        if ds != 1 && ds != 2 {
            return config_err(format!("internal downsample must be 1 or 2, got {ds}"));
        }
        if !h.is_multiple_of(ds) || !w.is_multiple_of(ds) {
            return config_err(format!("downsample {ds} does not divide {h}x{w}"));
        }
        let (hd, wd) = (h / ds, w / ds);
        match self.kind {
            GaKind::Psp => {
                if self.psp_bins.is_empty() {
                    return config_err("PSP needs at least one bin size");
                }
                if let Some(b) = self.psp_bins.iter().find(|&&b| b == 0 || b > hd.min(wd)) {
                    return config_err(format!("PSP bin {b} does not fit a {hd}x{wd} map"));
                }
            }
            GaKind::Aspp => {
                if let Some(r) = self.aspp_rates.iter().find(|&&r| r == 0 || r >= hd.min(wd)) {
                    return config_err(format!(
                        "ASPP rate {r} leaves every off-centre tap in the padding of a {hd}x{wd} map"
                    ));
                }
            }
            GaKind::NonLocal => {}
            GaKind::Cgnl => {
                let g = self.cgnl_groups;
                if g == 0 || !c.is_multiple_of(g) || !cr.is_multiple_of(g) {
                    return config_err(format!(
                        "CGNL groups {g} must divide both c = {c} and C' = {cr}"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PspParams<T> {
    /// One 1x1 `c -> C'` conv per bin.
    pub branches: Vec<ConvParams<T>>,
    /// 1x1 `c + bins*C' -> c`.
    pub fuse: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsppParams<T> {
    pub pointwise: ConvParams<T>,
    /// One dilated 3x3 `c -> C'` conv per rate.
    pub dilated: Vec<ConvParams<T>>,
    /// 1x1 applied to the globally pooled features.
    pub image_pool: ConvParams<T>,
    /// 1x1 `(rates + 2) * C' -> c`.
    pub fuse: ConvParams<T>,
}

/// Query, key and value projections plus the bias-free output projection
/// back to `c` channels. Shared by the non-local and CGNL heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub theta: ConvParams<T>,
    pub phi: ConvParams<T>,
    pub g: ConvParams<T>,
    pub out: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GaParams<T> {
    Psp(PspParams<T>),
    Aspp(AsppParams<T>),
    NonLocal(AttnParams<T>),
    Cgnl(AttnParams<T>),
}

impl<T> PspParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> PspParams<U> {
        PspParams {
            branches: map_vec(&self.branches, |b| b.map(f)),
            fuse: self.fuse.map(f),
        }
    }
}

impl<T> AsppParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AsppParams<U> {
        AsppParams {
            pointwise: self.pointwise.map(f),
            dilated: map_vec(&self.dilated, |b| b.map(f)),
            image_pool: self.image_pool.map(f),
            fuse: self.fuse.map(f),
        }
    }
}

impl<T> AttnParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttnParams<U> {
        AttnParams {
            theta: self.theta.map(f),
            phi: self.phi.map(f),
            g: self.g.map(f),
            out: self.out.map(f),
        }
    }
}

impl<T> GaParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GaParams<U> {
        match self {
            GaParams::Psp(p) => GaParams::Psp(p.map(f)),
            GaParams::Aspp(p) => GaParams::Aspp(p.map(f)),
            GaParams::NonLocal(p) => GaParams::NonLocal(p.map(f)),
            GaParams::Cgnl(p) => GaParams::Cgnl(p.map(f)),
        }
    }

    pub fn kind(&self) -> GaKind {
        match self {
            GaParams::Psp(_) => GaKind::Psp,
            GaParams::Aspp(_) => GaKind::Aspp,
            GaParams::NonLocal(_) => GaKind::NonLocal,
            GaParams::Cgnl(_) => GaKind::Cgnl,
        }
    }
}

impl_parameters!(PspParams);
impl_parameters!(AsppParams);
impl_parameters!(AttnParams);
impl_parameters!(GaParams);

fn pointwise(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, bias: bool) -> Result<ConvWeights> {
    ConvWeights::init(rng, c_out, c_in, 1, ConvGeometry::default(), bias)
}

impl AttnParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, c: usize, reduced: usize) -> Result<Self> {
        Ok(AttnParams {
            theta: pointwise(rng, reduced, c, false)?,
            phi: pointwise(rng, reduced, c, false)?,
            g: pointwise(rng, reduced, c, false)?,
            out: pointwise(rng, c, reduced, false)?,
        })
    }
}

impl GaParams<Tensor> {
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn init(cfg: &GaConfig, c: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(cfg, c, &mut rng)
    }

    pub fn init_with(cfg: &GaConfig, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cr = cfg.reduced_channels;
        if cr == 0 || cr > c {
            return config_err(format!("reduced channels {cr} must be in 1..={c}"));
        }
        Ok(match cfg.kind {
            GaKind::Psp => {
                let branches = cfg
                    .psp_bins
                    .iter()
                    .map(|_| pointwise(rng, cr, c, true))
                    .collect::<Result<Vec<_>>>()?;
                let fuse = pointwise(rng, c, c + cr * cfg.psp_bins.len(), true)?;
                GaParams::Psp(PspParams { branches, fuse })
            }
            GaKind::Aspp => {
                let pw = pointwise(rng, cr, c, true)?;
                let dilated = cfg
                    .aspp_rates
                    .iter()
                    .map(|&r| {
                        ConvWeights::init(
                            rng,
                            cr,
                            c,
                            3,
                            ConvGeometry {
                                dilation: r,
                                padding: r,
                                ..ConvGeometry::default()
                            },
                            true,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let image_pool = pointwise(rng, cr, c, true)?;
                let fuse = pointwise(rng, c, cr * (cfg.aspp_rates.len() + 2), true)?;
                GaParams::Aspp(AsppParams {
                    pointwise: pw,
                    dilated,
                    image_pool,
                    fuse,
                })
            }
            GaKind::NonLocal => GaParams::NonLocal(AttnParams::init(rng, c, cr)?),
            GaKind::Cgnl => GaParams::Cgnl(AttnParams::init(rng, c, cr)?),
        })
    }
}

fn psp_core(tape: &mut Tape, x: Var, cfg: &GaConfig, p: &PspParams<Var>) -> Result<Var> {
    let s = tape.shape(x);
    let mut parts = vec![x];
    for (&bins, conv) in cfg.psp_bins.iter().zip(&p.branches) {
        let pooled = tape.adaptive_pool(x, bins)?;
        let z = tape.conv2d(pooled, conv)?;
        parts.push(tape.resize(z, s.h, s.w)?);
    }
    let cat = tape.concat_many(&parts)?;
    tape.conv2d(cat, &p.fuse)
}

fn aspp_core(tape: &mut Tape, x: Var, p: &AsppParams<Var>) -> Result<Var> {
    let s = tape.shape(x);
    let mut parts = vec![tape.conv2d(x, &p.pointwise)?];
    for conv in &p.dilated {
        parts.push(tape.conv2d(x, conv)?);
    }
    let pooled = tape.adaptive_pool(x, 1)?;
    let z = tape.conv2d(pooled, &p.image_pool)?;
    parts.push(tape.resize(z, s.h, s.w)?);
    let cat = tape.concat_many(&parts)?;
    tape.conv2d(cat, &p.fuse)
}

/// `softmax(X_theta X_phi^T) X_g` on the (possibly downsampled) grid, as a
/// `(n, C', h, w)` map.
fn nonlocal_core(tape: &mut Tape, x: Var, p: &AttnParams<Var>) -> Result<Var> {
    let s = tape.shape(x);
    let q = tape.conv2d(x, &p.theta)?;
    let k = tape.conv2d(x, &p.phi)?;
    let v = tape.conv2d(x, &p.g)?;
    let (q, k, v) = (tape.to_rows(q), tape.to_rows(k), tape.to_rows(v));
    let logits = tape.matmul_nt(q, k)?;
    let affinity = tape.softmax_rows(logits);
    let out = tape.matmul(affinity, v)?;
    tape.from_rows(out, s.h, s.w)
}

/// Grouped dot-product attention. Each channel group of `t`, `p`, `v` is
/// flattened over channels and positions into a vector of length
/// `L = (C'/groups) * h * w`, and the group output is `t * (p . v) / L`.
/// Evaluating `p . v` first keeps the cost linear in the number of positions.
pub fn cgnl_core(tape: &mut Tape, t: Var, p: Var, v: Var, groups: usize) -> Result<Var> {
    let s = tape.shape(t);
    if groups == 0 || !s.c.is_multiple_of(groups) {
        return config_err(format!("{groups} groups do not divide {} channels", s.c));
    }
    let len = s.c / groups * s.h * s.w;
    let flat = Shape4::new(s.n * groups, 1, len, 1);
    let (t, p, v) = (
        tape.reshape(t, flat)?,
        tape.reshape(p, flat)?,
        tape.reshape(v, flat)?,
    );
    let stat = tape.matmul_tn(p, v)?;
    let y = tape.matmul(t, stat)?;
    let y = tape.scale(y, 1.0 / len as f64);
    tape.reshape(y, s)
}

fn attention_head(
    tape: &mut Tape,
    x: Var,
    cfg: &GaConfig,
    p: &AttnParams<Var>,
    core: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let s = tape.shape(x);
    let inner = downsample(tape, x, cfg.internal_downsample)?;
    let att = core(tape, inner)?;
    let proj = tape.conv2d(att, &p.out)?;
    let up = tape.resize(proj, s.h, s.w)?;
    tape.add(x, up)
}

fn downsample(tape: &mut Tape, x: Var, ds: usize) -> Result<Var> {
    if ds == 1 {
        Ok(x)
    } else {
        tape.avg_pool(x, ds)
    }
}

/// Records the configured head on `tape`.
pub fn ga_on_tape(tape: &mut Tape, x: Var, cfg: &GaConfig, p: &GaParams<Var>) -> Result<Var> {
    let s = tape.shape(x);
    cfg.validate(s.c, s.h, s.w)?;
    if cfg.kind != p.kind() {
        return config_err(format!(
            "config selects {} but parameters are for {}",
            cfg.kind.name(),
            p.kind().name()
        ));
    }
    match p {
        GaParams::Psp(p) => {
            let inner = downsample(tape, x, cfg.internal_downsample)?;
            let y = psp_core(tape, inner, cfg, p)?;
            tape.resize(y, s.h, s.w)
        }
        GaParams::Aspp(p) => {
            let inner = downsample(tape, x, cfg.internal_downsample)?;
            let y = aspp_core(tape, inner, p)?;
            tape.resize(y, s.h, s.w)
        }
        GaParams::NonLocal(p) => {
            attention_head(tape, x, cfg, p, |tape, inner| nonlocal_core(tape, inner, p))
        }
        GaParams::Cgnl(p) => attention_head(tape, x, cfg, p, |tape, inner| {
            let t = tape.conv2d(inner, &p.theta)?;
            let ph = tape.conv2d(inner, &p.phi)?;
            let v = tape.conv2d(inner, &p.g)?;
            cgnl_core(tape, t, ph, v, cfg.cgnl_groups)
        }),
    }
}

/// Runs any GA head. Backward yields `[dx, dparams...]`.
pub fn ga_forward(
    x: &Tensor,
    cfg: &GaConfig,
    params: &GaParams<Tensor>,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    traced(std::slice::from_ref(x), params, counter, |tape, ins, p| {
        ga_on_tape(tape, ins[0], cfg, p)
    })
}

fn expect_kind(cfg: &GaConfig, kind: GaKind) -> Result<()> {
    if cfg.kind != kind {
        return config_err(format!(
            "expected a {} config, got {}",
            kind.name(),
            cfg.kind.name()
        ));
    }
    Ok(())
}

/// Pyramid pooling: per bin, adaptive pool, 1x1 conv, upsample; concat with
/// the input; 1x1 fuse back to `c` channels.
pub fn ga_psp(
    x: &Tensor,
    cfg: &GaConfig,
    params: &PspParams<Tensor>,
) -> Result<(Tensor, BackwardFn)> {
    expect_kind(cfg, GaKind::Psp)?;
    ga_forward(x, cfg, &GaParams::Psp(params.clone()), &MacCounter::new())
}

/// Atrous pyramid: 1x1 branch, one dilated 3x3 branch per rate, and a
/// global-pool branch; concat; 1x1 fuse back to `c` channels.
pub fn ga_aspp(
    x: &Tensor,
    cfg: &GaConfig,
    params: &AsppParams<Tensor>,
) -> Result<(Tensor, BackwardFn)> {
    expect_kind(cfg, GaKind::Aspp)?;
    ga_forward(x, cfg, &GaParams::Aspp(params.clone()), &MacCounter::new())
}

/// `x + up(W_out * softmax(X_theta X_phi^T) X_g)`. Adds `2 * C' * N^2`
/// MACs per image to `counter`, `N` being the downsampled position count.
pub fn ga_nonlocal(
    x: &Tensor,
    cfg: &GaConfig,
    params: &AttnParams<Tensor>,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    expect_kind(cfg, GaKind::NonLocal)?;
    ga_forward(x, cfg, &GaParams::NonLocal(params.clone()), counter)
}

/// Grouped linearised attention with the same residual structure as
/// [`ga_nonlocal`]; cost `2 * C' * N` MACs per image.
pub fn ga_cgnl(
    x: &Tensor,
    cfg: &GaConfig,
    params: &AttnParams<Tensor>,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    expect_kind(cfg, GaKind::Cgnl)?;
    ga_forward(x, cfg, &GaParams::Cgnl(params.clone()), counter)
}

/// The non-local attention output `softmax(X_theta X_phi^T) X_g` before the
/// output projection, upsampling and residual, as `(n, C', h/ds, w/ds)`.
pub fn nonlocal_attention_map(
    x: &Tensor,
    cfg: &GaConfig,
    params: &AttnParams<Tensor>,
) -> Result<Tensor> {
    let s = x.shape();
    cfg.validate(s.c, s.h, s.w)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p = crate::params::Parameters::register(params, &mut tape);
    let inner = downsample(&mut tape, xv, cfg.internal_downsample)?;
    let out = nonlocal_core(&mut tape, inner, &p)?;
    Ok(tape.value(out).clone())
}
