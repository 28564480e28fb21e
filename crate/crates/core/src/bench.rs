//! Attention cost model, timing sweeps and power-law fits.
//!
//! MAC counts cover only the affinity work: the query-key logits and the
//! weighted aggregation of values. Projections are excluded.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, GaldError, Result};
use crate::ld::{GaldConfig, GaldParams};
use crate::ops::activation::softmax_rows_forward;
use crate::ops::layout::to_rows;
use crate::ops::local_attention::{
    local_attention_forward, local_attention_macs, BorderMode, LocalWindow,
};
use crate::ops::matmul::{matmul_macs, matmul_nn, matmul_nt};
use crate::parallel::with_sequential;
use crate::params::Parameters;
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nonlocal,
    /// Closed form only; there is no kernel to time.
    Crisscross,
    Ldv2,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nonlocal => "nonlocal",
            Method::Crisscross => "crisscross",
            Method::Ldv2 => "ldv2",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nonlocal" => Ok(Method::Nonlocal),
            "crisscross" => Ok(Method::Crisscross),
            "ldv2" => Ok(Method::Ldv2),
            other => Err(format!(
                "unknown method `{other}` (expected nonlocal, crisscross or ldv2)"
            )),
        }
    }
}

/// Affinity MACs for one image on an `h x w` grid with `c_reduced`
/// query/key/value channels:
///
/// * nonlocal: `2 C' N^2`
/// * crisscross: `2 C' N (h + w - 1)`
/// * ldv2: `2 C' N k^2`
pub fn flop_model(method: Method, h: usize, w: usize, c_reduced: usize, k: usize) -> u64 {
    let n = (h * w) as u64;
    let c = c_reduced as u64;
    match method {
        Method::Nonlocal => 2 * c * n * n,
        Method::Crisscross => 2 * c * n * (h + w - 1) as u64,
        Method::Ldv2 => 2 * c * n * (k * k) as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub c_reduced: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub runs: usize,
    pub warmups: usize,
    /// Sizes whose estimated working set exceeds this are rejected.
    pub memory_ceiling_bytes: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            c_reduced: 16,
            kernel: 5,
            dilation: 3,
            runs: 5,
            warmups: 2,
            memory_ceiling_bytes: 2 << 30,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: String,
    pub h: usize,
    pub w: usize,
    pub c_reduced: usize,
    pub k: usize,
    pub r: usize,
    pub mac_count: u64,
    /// Median over the timed runs.
    pub wall_ns: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl BenchRecord {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Rough peak bytes held while running `method` at `h x w`.
pub fn estimated_bytes(method: Method, h: usize, w: usize, cfg: &BenchConfig) -> u64 {
    let n = (h * w) as u64;
    let c = cfg.c_reduced as u64;
    let k2 = (cfg.kernel * cfg.kernel) as u64;
    8 * match method {
        Method::Nonlocal => 2 * n * n + 6 * c * n,
        Method::Crisscross => 0,
        Method::Ldv2 => n * k2 + 4 * c * n,
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times `f` with `warmups` untimed calls then `runs` timed calls and
/// returns the last output and the median duration.
fn time_median<T>(
    warmups: usize,
    runs: usize,
    mut f: impl FnMut() -> Result<T>,
) -> Result<(T, u64)> {
    for _ in 0..warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed().as_nanos() as u64);
        last = Some(out);
    }
    Ok((last.expect("runs >= 1"), median(times)))
}

fn dense_attention_kernel(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, u64)> {
    let (qr, kr, vr) = (to_rows(q), to_rows(k), to_rows(v));
    let (qs, ks) = (qr.shape(), kr.shape());
    let mut macs = (qs.n * qs.h * qs.w * ks.h) as u64;
    let logits = matmul_nt(&qr, &kr)?;
    let att = softmax_rows_forward(&logits);
    macs += matmul_macs(att.shape(), vr.shape());
    Ok((matmul_nn(&att, &vr)?, macs))
}

fn local_attention_kernel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: LocalWindow,
) -> Result<(Tensor, u64)> {
    let out = local_attention_forward(q, k, v, window, BorderMode::MaskedSoftmax)?;
    Ok((
        out.output,
        local_attention_macs(q.shape(), v.shape().c, window),
    ))
}

/// Times the affinity kernels of each method on seeded `(1, C', h, w)`
/// query, key and value tensors. Runs single-threaded.
pub fn run_sweep(
    methods: &[Method],
    sizes: &[(usize, usize)],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    if cfg.runs == 0 || cfg.c_reduced == 0 {
        return config_err("runs and reduced channels must be positive");
    }
    let window = LocalWindow::new(cfg.kernel, cfg.dilation)?;
    if sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
        return config_err("sizes must be positive");
    }
    if sizes.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
        return config_err("sizes must be sorted by ascending area");
    }
    for &m in methods {
        if m == Method::Crisscross {
            return config_err("crisscross has a cost model only; no kernel to time");
        }
        for &(h, w) in sizes {
            let need = estimated_bytes(m, h, w, cfg);
            if need > cfg.memory_ceiling_bytes {
                return Err(GaldError::TooLarge(format!(
                    "{} at {h}x{w} needs about {need} bytes, ceiling is {}",
                    m.name(),
                    cfg.memory_ceiling_bytes
                )));
            }
        }
    }
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    with_sequential(|| {
        let mut records = Vec::new();
        for &m in methods {
            for &(h, w) in sizes {
                let shape = Shape4::new(1, cfg.c_reduced, h, w);
                let q = Tensor::uniform(shape, cfg.seed, -1.0, 1.0);
                let k = Tensor::uniform(shape, cfg.seed.wrapping_add(1), -1.0, 1.0);
                let v = Tensor::uniform(shape, cfg.seed.wrapping_add(2), -1.0, 1.0);
                let ((_, mac_count), wall_ns) = time_median(cfg.warmups, cfg.runs, || match m {
                    Method::Nonlocal => dense_attention_kernel(&q, &k, &v),
                    _ => local_attention_kernel(&q, &k, &v, window),
                })?;
                records.push(BenchRecord {
                    method: m.name().to_string(),
                    h,
                    w,
                    c_reduced: cfg.c_reduced,
                    k: cfg.kernel,
                    r: cfg.dilation,
                    mac_count,
                    wall_ns,
                    timestamp,
                });
            }
        }
        Ok(records)
    })
}

/// `t ~ a * N^b` fitted by least squares on `(ln N, ln t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub method: String,
    pub exponent: f64,
    pub coefficient: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_exponent(records: &[BenchRecord]) -> Result<ScalingFit> {
    if records.len() < 4 {
        return config_err(format!(
            "need at least 4 records to fit, got {}",
            records.len()
        ));
    }
    let method = records[0].method.clone();
    if records.iter().any(|r| r.method != method) {
        return config_err("records mix several methods");
    }
    let mut ns: Vec<usize> = records.iter().map(BenchRecord::positions).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() != records.len() {
        return config_err("records must have distinct position counts");
    }
    if records.iter().any(|r| r.wall_ns == 0) {
        return config_err("zero wall time cannot be fitted on a log scale");
    }
    let xs: Vec<f64> = records
        .iter()
        .map(|r| (r.positions() as f64).ln())
        .collect();
    let ys: Vec<f64> = records.iter().map(|r| (r.wall_ns as f64).ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = (my - b * mx).exp();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(ScalingFit {
        method,
        exponent: b,
        coefficient: a,
        r_squared,
        points: records.len(),
    })
}

pub const CSV_HEADER: &str = "method,h,w,c_reduced,k,r,mac_count,wall_ns";

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method, r.h, r.w, r.c_reduced, r.k, r.r, r.mac_count, r.wall_ns
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seed: u64,
    pub config: BenchConfig,
    pub records: Vec<BenchRecord>,
    /// One fit per method with at least four sizes.
    pub fits: Vec<ScalingFit>,
}

pub fn summarize(records: Vec<BenchRecord>, cfg: &BenchConfig) -> SweepSummary {
    let mut methods: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    methods.dedup();
    let fits = methods
        .iter()
        .filter_map(|m| {
            let rs: Vec<BenchRecord> = records.iter().filter(|r| &r.method == m).cloned().collect();
            fit_exponent(&rs).ok()
        })
        .collect();
    SweepSummary {
        seed: cfg.seed,
        config: cfg.clone(),
        records,
        fits,
    }
}

/// Number of learnable scalars in a GALD head for `c` input channels.
pub fn param_count(cfg: &GaldConfig, c: usize) -> Result<usize> {
    Ok(GaldParams::init(cfg, c, 0)?.scalar_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, h: usize, wall_ns: u64) -> BenchRecord {
        BenchRecord {
            method: method.into(),
            h,
            w: h,
            c_reduced: 16,
            k: 5,
            r: 3,
            mac_count: 0,
            wall_ns,
            timestamp: 0,
        }
    }

    #[test]
    fn model_ratio_and_coincidence() {
        let nl = flop_model(Method::Nonlocal, 64, 64, 16, 5);
        let ld = flop_model(Method::Ldv2, 64, 64, 16, 5);
        assert_eq!(nl as f64 / ld as f64, 163.84);
        assert_eq!(flop_model(Method::Nonlocal, 4, 4, 2, 0), 1024);
        assert_eq!(
            flop_model(Method::Ldv2, 3, 3, 4, 3),
            flop_model(Method::Nonlocal, 3, 3, 4, 0)
        );
        assert_eq!(flop_model(Method::Crisscross, 4, 4, 1, 0), 2 * 16 * 7);
    }

    #[test]
    fn fits_exact_power_laws() {
        let rs: Vec<BenchRecord> = [4usize, 8, 16, 32]
            .iter()
            .map(|&h| record("x", h, ((h * h) as u64).pow(2)))
            .collect();
        let f = fit_exponent(&rs).unwrap();
        assert!((f.exponent - 2.0).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);

        let rs: Vec<BenchRecord> = [4usize, 8, 16, 32]
            .iter()
            .map(|&h| record("x", h, 7 * (h * h) as u64))
            .collect();
        let f = fit_exponent(&rs).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-9);
        assert!((f.coefficient - 7.0).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let same: Vec<BenchRecord> = (0..4).map(|_| record("x", 8, 10)).collect();
        assert!(fit_exponent(&same).is_err());
        let few: Vec<BenchRecord> = [4, 8, 16].iter().map(|&h| record("x", h, 10)).collect();
        assert!(fit_exponent(&few).is_err());
    }

    #[test]
    fn sweep_counts_match_model() {
        let cfg = BenchConfig {
            c_reduced: 4,
            runs: 1,
            warmups: 0,
            ..BenchConfig::default()
        };
        let sizes = [(4, 4), (8, 8), (16, 16)];
        let recs = run_sweep(&[Method::Nonlocal, Method::Ldv2], &sizes, &cfg).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            let m: Method = r.method.parse().unwrap();
            assert_eq!(r.mac_count, flop_model(m, r.h, r.w, 4, 5));
        }
        assert!(recs[..3]
            .windows(2)
            .all(|p| p[0].mac_count < p[1].mac_count));
        let again = run_sweep(&[Method::Nonlocal, Method::Ldv2], &sizes, &cfg).unwrap();
        let macs = |v: &[BenchRecord]| v.iter().map(|r| r.mac_count).collect::<Vec<_>>();
        assert_eq!(macs(&recs), macs(&again));
        let csv = records_to_csv(&recs);
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn sweep_rejections() {
        let cfg = BenchConfig::default();
        assert!(run_sweep(&[Method::Crisscross], &[(4, 4)], &cfg).is_err());
        assert!(run_sweep(&[Method::Ldv2], &[(8, 8), (4, 4)], &cfg).is_err());
        let tight = BenchConfig {
            memory_ceiling_bytes: 1024,
            ..cfg
        };
        assert!(matches!(
            run_sweep(&[Method::Nonlocal], &[(64, 64)], &tight),
            Err(GaldError::TooLarge(_))
        ));
    }
}
