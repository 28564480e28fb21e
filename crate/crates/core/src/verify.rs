//! Cross-checks of the fast kernels against the brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{flop_model, Method};
use crate::error::{config_err, Result};
use crate::ga::{ga_nonlocal, nonlocal_attention_map, AttnParams, GaConfig, GaKind};
use crate::ld::{
    ldv1_mask, ldv2_attention, ldv2_forward, Ldv1Config, Ldv1Params, Ldv1Strategy, Ldv2Config,
    Ldv2Params,
};
use crate::metrics::{boundary_fscore, miou, LabelMap, STANDARD_SLACKS};
use crate::ops::conv::{ConvGeometry, ConvWeights};
use crate::ops::local_attention::BorderMode;
use crate::ops::{self, MacCounter};
use crate::oracles::{dense_attention_oracle, naive_conv_oracle};
use crate::tensor::{concat_channels, Shape4, Tensor};

pub const CHECKS: &[&str] = &[
    "dense-equivalence",
    "conv-oracle",
    "ldv1-composition",
    "locality",
    "mac-model",
    "metrics",
];

/// Agreement required between a kernel and its oracle.
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub border_mode: BorderMode,
    /// Empty runs every check.
    pub checks: Vec<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 42,
            border_mode: BorderMode::MaskedSoftmax,
            checks: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Failed, and failure is the documented behaviour for these options.
    ExpectedFail,
    /// Passed although failure was expected.
    UnexpectedPass,
}

impl CheckStatus {
    pub fn label(self) -> &'static str {
        match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::ExpectedFail => "XFAIL",
            CheckStatus::UnexpectedPass => "XPASS",
        }
    }

    pub fn is_ok(self) -> bool {
        matches!(self, CheckStatus::Pass | CheckStatus::ExpectedFail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub border_mode: BorderMode,
    pub outcomes: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|o| o.status.is_ok())
    }
}

struct Finding {
    passed: bool,
    detail: String,
}

fn finding(passed: bool, detail: String) -> Result<Finding> {
    Ok(Finding { passed, detail })
}

fn attn_params(c: usize, reduced: usize, seed: u64) -> Result<AttnParams<Tensor>> {
    AttnParams::init(&mut ChaCha8Rng::seed_from_u64(seed), c, reduced)
}

/// Worst error of the non-local core (no downsample, no residual) against
/// the dense oracle over 20 seeded `1x4x4x4` inputs.
pub fn nonlocal_dense_error(seed: u64) -> Result<f64> {
    let cfg = GaConfig::new(GaKind::NonLocal, 4).with_downsample(1);
    let mut worst: f64 = 0.0;
    for s in seed..seed + 20 {
        let x = Tensor::uniform(Shape4::new(1, 4, 4, 4), s, -1.0, 1.0);
        let p = attn_params(4, 4, s.wrapping_add(7))?;
        let fast = nonlocal_attention_map(&x, &cfg, &p)?;
        let slow = dense_attention_oracle(&x, &p.theta.kernel, &p.phi.kernel, &p.g.kernel)?;
        worst = worst.max(fast.max_abs_diff(&slow)?);
    }
    Ok(worst)
}

/// Worst error of LDv2 attention with a window covering a 3x3 grid
/// (`k = 5, r = 1`) against the dense oracle over 20 seeds.
pub fn ldv2_full_coverage_error(seed: u64, mode: BorderMode) -> Result<f64> {
    let (c, side) = (2, 3);
    let cfg = Ldv2Config::new(3)
        .with_window(2 * side - 1, 1)?
        .with_border(mode);
    let mut worst: f64 = 0.0;
    for s in seed..seed + 20 {
        let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(11));
        let p = Ldv2Params::init(&cfg, c, &mut rng)?;
        let xg = Tensor::uniform(Shape4::new(1, c, side, side), s, -1.0, 1.0);
        let xl = Tensor::uniform(Shape4::new(1, c, side, side), s.wrapping_add(1), -1.0, 1.0);
        let fast = ldv2_attention(&xg, &xl, &cfg, &p)?;
        let both = concat_channels(&xg, &xl)?;
        let slow = dense_attention_oracle(&both, &p.theta.kernel, &p.phi.kernel, &p.g.kernel)?;
        worst = worst.max(fast.max_abs_diff(&slow)?);
    }
    Ok(worst)
}

fn check_dense(opts: &VerifyOptions) -> Result<Finding> {
    let nl = nonlocal_dense_error(opts.seed)?;
    let ld = ldv2_full_coverage_error(opts.seed, opts.border_mode)?;
    finding(
        nl <= ORACLE_TOL && ld <= ORACLE_TOL,
        format!("non-local max err {nl:.2e}, full-coverage LDv2 max err {ld:.2e} (tol {ORACLE_TOL:.0e})"),
    )
}

fn check_conv(opts: &VerifyOptions) -> Result<Finding> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 200 {
        let groups = *[1, 2].get(rng.gen_range(0..2)).unwrap_or(&1);
        let c_in = groups * rng.gen_range(1..=3);
        let c_out = groups * rng.gen_range(1..=3);
        let k = rng.gen_range(1..=5);
        let geometry = ConvGeometry {
            stride: rng.gen_range(1..=3),
            dilation: rng.gen_range(1..=3),
            padding: rng.gen_range(0..=3),
            groups,
        };
        let x = Tensor::uniform(
            Shape4::new(
                rng.gen_range(1..=2),
                c_in,
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
            ),
            rng.gen(),
            -1.0,
            1.0,
        );
        let bias = rng.gen_bool(0.5);
        let w = ConvWeights::init(&mut rng, c_out, c_in, k, geometry, bias)?;
        let Ok((fast, _)) = ops::conv2d(&x, &w) else {
            // Geometry leaves no output; the oracle must agree.
            if naive_conv_oracle(&x, &w).is_ok() {
                return finding(
                    false,
                    format!("conv2d rejected a config the oracle accepts: {geometry:?}"),
                );
            }
            continue;
        };
        worst = worst.max(fast.max_abs_diff(&naive_conv_oracle(&x, &w)?)?);
        checked += 1;
    }
    let mut dw_worst: f64 = 0.0;
    for i in 0..20 {
        let c = rng.gen_range(1..=4);
        let geometry = ConvGeometry {
            stride: rng.gen_range(1..=2),
            dilation: rng.gen_range(1..=2),
            padding: 1,
            groups: c,
        };
        let x = Tensor::uniform(Shape4::new(1, c, 7, 6), opts.seed + i, -1.0, 1.0);
        let w = ConvWeights::init(&mut rng, c, c, 3, geometry, false)?;
        let (fast, _) = ops::depthwise_conv2d(&x, &w)?;
        dw_worst = dw_worst.max(fast.max_abs_diff(&naive_conv_oracle(&x, &w)?)?);
    }
    finding(
        worst <= 1e-12 && dw_worst <= 1e-12,
        format!(
            "200 conv configs max err {worst:.2e}, 20 depth-wise configs max err {dw_worst:.2e}"
        ),
    )
}

fn check_ldv1(opts: &VerifyOptions) -> Result<Finding> {
    let cfg = Ldv1Config::new(4, Ldv1Strategy::DepthwiseConv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p = Ldv1Params::init(&cfg, 3, &mut rng)?;
    let x = Tensor::uniform(Shape4::new(1, 3, 8, 8), opts.seed, -1.0, 1.0);
    let (m, _) = ldv1_mask(&x, &cfg, &p)?;
    let (d1, _) = ops::depthwise_conv2d(&x, &p.depthwise[0])?;
    let (d2, _) = ops::depthwise_conv2d(&d1, &p.depthwise[1])?;
    let (up, _) = ops::bilinear_upsample(&d2, 8, 8)?;
    let (want, _) = ops::sigmoid(&up)?;
    let err = m.max_abs_diff(&want)?;
    let inside = m.data().iter().all(|&v| v > 0.0 && v < 1.0);
    finding(
        err <= ORACLE_TOL && inside,
        format!(
            "mask vs composed primitives max err {err:.2e}, mask strictly inside (0,1): {inside}"
        ),
    )
}

/// Largest change of the masked LDv2 attention output (`k = 3, r = 1`) at
/// positions farther than Chebyshev distance 1 from a perturbed pixel, and
/// the smallest change at positions within distance 1, on an 8x8 grid.
pub fn locality_probe(seed: u64) -> Result<(f64, f64)> {
    let c = 2;
    let cfg = Ldv2Config::new(2).with_window(3, 1)?;
    let p = Ldv2Params::init(&cfg, c, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let shape = Shape4::new(1, c, 8, 8);
    let xg = Tensor::uniform(shape, seed, -1.0, 1.0);
    let xl = Tensor::uniform(shape, seed.wrapping_add(1), -1.0, 1.0);
    let base = ldv2_attention(&xg, &xl, &cfg, &p)?;
    let (mut outside_max, mut inside_min) = (0.0f64, f64::INFINITY);
    for (py, px) in [(0usize, 0usize), (3, 4), (7, 2), (5, 7)] {
        for target in 0..2 {
            let (mut g, mut l) = (xg.clone(), xl.clone());
            let t = if target == 0 { &mut g } else { &mut l };
            for ch in 0..c {
                let i = t.index(0, ch, py, px);
                t.data_mut()[i] += 0.5;
            }
            let out = ldv2_attention(&g, &l, &cfg, &p)?;
            for y in 0..8 {
                for x in 0..8 {
                    let cheb = (y as isize - py as isize)
                        .abs()
                        .max((x as isize - px as isize).abs());
                    let diff = (0..cfg.reduced_channels)
                        .map(|ch| (out.at(0, ch, y, x) - base.at(0, ch, y, x)).abs())
                        .fold(0.0, f64::max);
                    if cheb > 1 {
                        outside_max = outside_max.max(diff);
                    } else {
                        inside_min = inside_min.min(diff);
                    }
                }
            }
        }
    }
    Ok((outside_max, inside_min))
}

fn check_locality(opts: &VerifyOptions) -> Result<Finding> {
    let (outside, inside) = locality_probe(opts.seed)?;
    finding(
        outside == 0.0 && inside > 0.0,
        format!(
            "max change beyond radius 1: {outside:.2e}; min change within radius 1: {inside:.2e}"
        ),
    )
}

/// `(counter, model)` pairs for the non-local head (no downsample) and
/// LDv2 at `h x h`, with `C' = 2`, `k = 5`.
pub fn mac_readouts(h: usize, seed: u64) -> Result<[(u64, u64); 2]> {
    let c = 2;
    let x = Tensor::uniform(Shape4::new(1, c, h, h), seed, -1.0, 1.0);
    let cfg = GaConfig::new(GaKind::NonLocal, c).with_downsample(1);
    let counter = MacCounter::new();
    ga_nonlocal(&x, &cfg, &attn_params(c, c, seed)?, &counter)?;
    let nl = (counter.get(), flop_model(Method::Nonlocal, h, h, c, 5));

    let ld_cfg = Ldv2Config::new(c).with_window(5, 3)?;
    let p = Ldv2Params::init(&ld_cfg, c, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let counter = MacCounter::new();
    ldv2_forward(&x, &x, &ld_cfg, &p, &counter)?;
    let ld = (counter.get(), flop_model(Method::Ldv2, h, h, c, 5));
    Ok([nl, ld])
}

fn check_macs(opts: &VerifyOptions) -> Result<Finding> {
    let mut detail = Vec::new();
    let mut ok = true;
    for h in [4, 8, 16, 32] {
        let [nl, ld] = mac_readouts(h, opts.seed)?;
        ok &= nl.0 == nl.1 && ld.0 == ld.1;
        detail.push(format!(
            "H={h}: nonlocal {}/{} ldv2 {}/{}",
            nl.0, nl.1, ld.0, ld.1
        ));
    }
    let ratio = flop_model(Method::Nonlocal, 64, 64, 16, 5) as f64
        / flop_model(Method::Ldv2, 64, 64, 16, 5) as f64;
    ok &= ratio == 163.84;
    detail.push(format!("H=64 k=5 ratio {ratio}"));
    finding(ok, detail.join("; "))
}

fn check_metrics(_: &VerifyOptions) -> Result<Finding> {
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1])?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1])?;
    let m = miou(&pred, &gt, 2)?.mean;
    let mut square = LabelMap::filled(16, 16, 0);
    for y in 4..10 {
        for x in 3..11 {
            square.set(y, x, 1);
        }
    }
    let mut identical = true;
    for s in STANDARD_SLACKS {
        identical &= boundary_fscore(&square, &square, 1, s)? == 1.0;
    }
    finding(
        m == 7.0 / 12.0 && identical,
        format!("hand-case mIoU {m} (want 7/12); identical maps score 1 at slacks {STANDARD_SLACKS:?}: {identical}"),
    )
}

/// Whether a check is documented to fail under `opts`.
fn expected_to_fail(name: &str, opts: &VerifyOptions) -> bool {
    name == "dense-equivalence" && opts.border_mode == BorderMode::ZeroPadKeys
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let selected: Vec<&str> = if opts.checks.is_empty() {
        CHECKS.to_vec()
    } else {
        for c in &opts.checks {
            if !CHECKS.contains(&c.as_str()) {
                return config_err(format!(
                    "unknown check `{c}`; known checks: {}",
                    CHECKS.join(", ")
                ));
            }
        }
        opts.checks.iter().map(String::as_str).collect()
    };
    let mut outcomes = Vec::new();
    for name in selected {
        let f = match name {
            "dense-equivalence" => check_dense(opts),
            "conv-oracle" => check_conv(opts),
            "ldv1-composition" => check_ldv1(opts),
            "locality" => check_locality(opts),
            "mac-model" => check_macs(opts),
            _ => check_metrics(opts),
        };
        let (passed, detail) = match f {
            Ok(f) => (f.passed, f.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let status = match (passed, expected_to_fail(name, opts)) {
            (true, false) => CheckStatus::Pass,
            (false, false) => CheckStatus::Fail,
            (false, true) => CheckStatus::ExpectedFail,
            (true, true) => CheckStatus::UnexpectedPass,
        };
        outcomes.push(CheckOutcome {
            name: name.to_string(),
            status,
            detail,
        });
    }
    Ok(VerifyReport {
        seed: opts.seed,
        border_mode: opts.border_mode,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run_verify(&VerifyOptions::default()).unwrap();
        for o in &r.outcomes {
            assert_eq!(o.status, CheckStatus::Pass, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn zero_pad_dense_equivalence_is_expected_fail() {
        let opts = VerifyOptions {
            border_mode: BorderMode::ZeroPadKeys,
            checks: vec!["dense-equivalence".into()],
            ..VerifyOptions::default()
        };
        let r = run_verify(&opts).unwrap();
        assert_eq!(r.outcomes[0].status, CheckStatus::ExpectedFail);
        assert!(r.all_ok());
    }

    #[test]
    fn unknown_check_is_config_error() {
        let opts = VerifyOptions {
            checks: vec!["bogus".into()],
            ..VerifyOptions::default()
        };
        assert!(run_verify(&opts).is_err());
    }
}
