//! Synthetic segmentation task and a small trainable network around a
//! GA or GALD head.
//!
//! Images hold one large rectangle and a few small squares on a noisy
//! background. The network is a three-layer conv backbone (the last layer
//! halves the resolution), a context head, a 1x1 classifier and a bilinear
//! upsample back to full resolution. Training is plain SGD with momentum,
//! a poly learning-rate schedule and optional hard-pixel mining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, GaldError, Result};
use crate::ga::{ga_on_tape, GaConfig, GaKind, GaParams};
use crate::ld::{
    gald_on_tape, Arrangement, GaldConfig, GaldParams, LdConfig, Ldv1Config, Ldv1Strategy,
    Ldv2Config,
};
use crate::metrics::{mean_boundary_fscore, miou, LabelMap, STANDARD_SLACKS};
use crate::ops::conv::{ConvGeometry, ConvParams, ConvWeights};
use crate::ops::{BackwardFn, MacCounter};
use crate::params::{impl_parameters, map_vec, Parameters};
use crate::tensor::{Shape4, Tensor};

pub const NUM_CLASSES: usize = 3;
/// Initial value of every backbone bias.
pub const BACKBONE_BIAS_INIT: f64 = 0.1;
pub const BACKGROUND: u32 = 0;
pub const LARGE_OBJECT: u32 = 1;
pub const SMALL_OBJECT: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `(1, 3, h, w)`.
    pub image: Tensor,
    pub labels: LabelMap,
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// True if the rectangles overlap or touch.
    fn near(&self, o: &Rect) -> bool {
        self.y <= o.y + o.h
            && o.y <= self.y + self.h
            && self.x <= o.x + o.w
            && o.x <= self.x + self.w
    }
}

const CLASS_COLOURS: [[f64; 3]; 3] = [[0.2, 0.3, 0.4], [0.7, 0.4, 0.3], [0.6, 0.7, 0.2]];

fn synth_one(seed: u64, h: usize, w: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big = {
        let bh = rng.gen_range(h / 2..=3 * h / 4);
        let bw = rng.gen_range(w / 2..=3 * w / 4);
        Rect {
            y: rng.gen_range(0..=h - bh),
            x: rng.gen_range(0..=w - bw),
            h: bh,
            w: bw,
        }
    };
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let paint = |labels: &mut LabelMap, r: &Rect, class: u32| {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                labels.set(y, x, class);
            }
        }
    };
    paint(&mut labels, &big, LARGE_OBJECT);

    let max_side = (h.min(w) / 8).max(2);
    let wanted = rng.gen_range(1..=3);
    let mut small: Vec<Rect> = Vec::new();
    let mut attempts = 0;
    while small.len() < wanted && attempts < 1000 {
        attempts += 1;
        let s = rng.gen_range(2..=max_side);
        let r = Rect {
            y: rng.gen_range(0..=h - s),
            x: rng.gen_range(0..=w - s),
            h: s,
            w: s,
        };
        if !r.near(&big) && small.iter().all(|o| !r.near(o)) {
            small.push(r);
        }
    }
    if small.is_empty() {
        // The large rectangle leaves at least a quarter of each side free,
        // so a 2x2 square always fits in a corner.
        let r = [(0, 0), (0, w - 2), (h - 2, 0), (h - 2, w - 2)]
            .into_iter()
            .map(|(y, x)| Rect { y, x, h: 2, w: 2 })
            .find(|r| !r.near(&big))
            .expect("a corner is free");
        small.push(r);
    }
    for r in &small {
        paint(&mut labels, r, SMALL_OBJECT);
    }

    let jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut image = Tensor::zeros(Shape4::new(1, 3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let class = labels.get(y, x) as usize;
                let v = CLASS_COLOURS[class][c] + jitter[c] + rng.gen_range(-0.25..0.25);
                let i = image.index(0, c, y, x);
                image.data_mut()[i] = v;
            }
        }
    }
    SynthSample { image, labels }
}

/// `count` samples, each generated from its own seed derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<SynthSample>> {
    if h < 32 || w < 32 {
        return config_err(format!(
            "synthetic images must be at least 32x32, got {h}x{w}"
        ));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let per_sample: Vec<u64> = (0..count).map(|_| seeds.gen()).collect();
    Ok(per_sample.into_iter().map(|s| synth_one(s, h, w)).collect())
}

/// Fraction of pixels labelled as small objects, averaged over samples.
pub fn small_object_fraction(samples: &[SynthSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let n = s.labels.data.iter().filter(|&&v| v == SMALL_OBJECT).count();
            n as f64 / s.labels.data.len() as f64
        })
        .sum();
    total / samples.len() as f64
}

fn log_softmax_at(logits: &Tensor, n: usize, y: usize, x: usize, out: &mut [f64]) {
    let classes = out.len();
    let mut max = f64::NEG_INFINITY;
    for (k, o) in out.iter_mut().enumerate() {
        *o = logits.at(n, k, y, x);
        max = max.max(*o);
    }
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for o in out.iter_mut().take(classes) {
        *o -= lse;
    }
}

/// Per-pixel softmax cross-entropy averaged over the `ceil(f * N)` pixels
/// with the largest loss (ties go to the lower flat index). `labels` holds
/// one map per batch element. The backward maps a `(1,1,1,1)` upstream
/// gradient to `[dlogits]`; pixels outside the selection get exactly zero.
pub fn cross_entropy_ohem(
    logits: &Tensor,
    labels: &[LabelMap],
    topk_fraction: f64,
) -> Result<(f64, BackwardFn)> {
    if !(topk_fraction > 0.0 && topk_fraction <= 1.0) {
        return config_err(format!(
            "OHEM fraction must be in (0, 1], got {topk_fraction}"
        ));
    }
    let s = logits.shape();
    if labels.len() != s.n || labels.iter().any(|l| (l.h, l.w) != (s.h, s.w)) {
        return config_err(format!(
            "need {} label maps of {}x{} for logits {}",
            s.n, s.h, s.w, s
        ));
    }
    let hw = s.h * s.w;
    let total = s.n * hw;
    let mut logp = vec![vec![0.0; s.c]; total];
    let mut losses = vec![0.0; total];
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let i = n * hw + y * s.w + x;
                let label = labels[n].get(y, x) as usize;
                if label >= s.c {
                    return config_err(format!("label {label} outside 0..{}", s.c));
                }
                log_softmax_at(logits, n, y, x, &mut logp[i]);
                losses[i] = -logp[i][label];
            }
        }
    }
    let k = ((topk_fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let selected = &order[..k];
    let loss = selected.iter().map(|&i| losses[i]).sum::<f64>() / k as f64;

    let mut grad = Tensor::zeros(s);
    for &i in selected {
        let (n, rem) = (i / hw, i % hw);
        let (y, x) = (rem / s.w, rem % s.w);
        let label = labels[n].get(y, x) as usize;
        for c in 0..s.c {
            let p = logp[i][c].exp();
            let g = (p - if c == label { 1.0 } else { 0.0 }) / k as f64;
            let j = grad.index(n, c, y, x);
            grad.data_mut()[j] = g;
        }
    }
    let backward = BackwardFn::new(move |up| vec![grad.map(|g| g * up.data()[0])]);
    Ok((loss, backward))
}

/// Which context head sits on top of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ToyHead {
    /// `concat(GA(x), x)`.
    GaOnly {
        ga: GaConfig,
    },
    Gald(GaldConfig),
}

impl ToyHead {
    pub fn name(&self) -> String {
        match self {
            ToyHead::GaOnly { ga } => ga.kind.name().to_string(),
            ToyHead::Gald(cfg) => {
                let ld = match cfg.ld {
                    LdConfig::V1(_) => "ldv1",
                    LdConfig::V2(_) => "ldv2",
                };
                format!("{}+{}", cfg.ga.kind.name(), ld)
            }
        }
    }
}

/// The three heads compared by [`directional_ablation`]: ASPP alone, ASPP
/// with LDv1 and ASPP with LDv2, all for a backbone of width `width`.
pub fn ablation_heads(width: usize) -> [ToyHead; 3] {
    let ga = GaConfig::new(GaKind::Aspp, (width / 2).max(1));
    let gald = |ld| {
        ToyHead::Gald(GaldConfig {
            ga: ga.clone(),
            ld,
            arrangement: Arrangement::Gald,
        })
    };
    [
        ToyHead::GaOnly { ga: ga.clone() },
        gald(LdConfig::V1(
            Ldv1Config::new(8, Ldv1Strategy::DepthwiseConv).expect("power of two"),
        )),
        gald(LdConfig::V2(Ldv2Config::new((width / 2).max(1)))),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub ohem_topk_fraction: f64,
    pub head: ToyHead,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Backbone channel count `c`.
    pub channels: usize,
    pub momentum: f64,
    /// Global L2 norm the gradient is rescaled to when exceeded; 0 disables.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn new(seed: u64, head: ToyHead) -> Self {
        TrainConfig {
            seed,
            epochs: 12,
            lr: 0.05,
            batch: 8,
            ohem_topk_fraction: 0.25,
            head,
            train_samples: 200,
            eval_samples: 50,
            height: 64,
            width: 64,
            channels: 8,
            momentum: 0.9,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch == 0 || self.channels == 0 {
            return config_err("batch size and channel count must be positive");
        }
        if !(self.ohem_topk_fraction > 0.0 && self.ohem_topk_fraction <= 1.0) {
            return config_err(format!(
                "OHEM fraction must be in (0, 1], got {}",
                self.ohem_topk_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return config_err(format!(
                "gradient clip must be finite and non-negative, got {}",
                self.grad_clip
            ));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return config_err("image sides must be even");
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return config_err("train and eval sets must be non-empty");
        }
        let (c, h, w) = (self.channels, self.height / 2, self.width / 2);
        match &self.head {
            ToyHead::GaOnly { ga } => ga.validate(c, h, w),
            ToyHead::Gald(cfg) => {
                cfg.ga.validate(c, h, w)?;
                if let LdConfig::V1(v1) = cfg.ld {
                    v1.validate(h, w)?;
                }
                Ok(())
            }
        }
    }

    /// Optimiser steps over the whole run.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.train_samples.div_ceil(self.batch)
    }
}

/// `lr0 * (1 - step / total)^0.9`.
pub fn poly_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(0.9)
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams<T> {
    GaOnly(GaParams<T>),
    Gald(GaldParams<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams<T> {
    pub backbone: Vec<ConvParams<T>>,
    pub head: HeadParams<T>,
    pub classifier: ConvParams<T>,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HeadParams<U> {
        match self {
            HeadParams::GaOnly(p) => HeadParams::GaOnly(p.map(f)),
            HeadParams::Gald(p) => HeadParams::Gald(p.map(f)),
        }
    }
}

impl<T> ToyParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ToyParams<U> {
        ToyParams {
            backbone: map_vec(&self.backbone, |c| c.map(f)),
            head: self.head.map(f),
            classifier: self.classifier.map(f),
        }
    }
}

impl_parameters!(HeadParams);
impl_parameters!(ToyParams);

impl ToyParams<Tensor> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_9a1d);
        let c = cfg.channels;
        let conv3 = |rng: &mut ChaCha8Rng, c_in: usize, stride: usize| {
            ConvWeights::init(
                rng,
                c,
                c_in,
                3,
                ConvGeometry {
                    stride,
                    padding: 1,
                    ..ConvGeometry::default()
                },
                true,
            )
        };
        // He-uniform kernels; positive biases keep every ReLU active at start.
        let backbone = [
            conv3(&mut rng, 3, 1)?,
            conv3(&mut rng, c, 1)?,
            conv3(&mut rng, c, 2)?,
        ]
        .into_iter()
        .map(|mut layer| {
            layer.kernel = layer.kernel.map(|v| v * 6f64.sqrt());
            layer.bias = layer.bias.map(|b| b.map(|_| BACKBONE_BIAS_INIT));
            layer
        })
        .collect();
        let head = match &cfg.head {
            ToyHead::GaOnly { ga } => HeadParams::GaOnly(GaParams::init_with(ga, c, &mut rng)?),
            ToyHead::Gald(g) => {
                let seed = rng.gen();
                HeadParams::Gald(GaldParams::init(g, c, seed)?)
            }
        };
        let classifier = ConvWeights::init(
            &mut rng,
            NUM_CLASSES,
            2 * c,
            1,
            ConvGeometry::default(),
            true,
        )?;
        Ok(ToyParams {
            backbone,
            head,
            classifier,
        })
    }
}

fn network(tape: &mut Tape, x: Var, head: &ToyHead, p: &ToyParams<Var>) -> Result<Var> {
    let s = tape.shape(x);
    let mut feat = x;
    for layer in &p.backbone {
        let y = tape.conv2d(feat, layer)?;
        feat = tape.relu(y);
    }
    let ctx = match (head, &p.head) {
        (ToyHead::GaOnly { ga }, HeadParams::GaOnly(gp)) => {
            let g = ga_on_tape(tape, feat, ga, gp)?;
            tape.concat(g, feat)?
        }
        (ToyHead::Gald(cfg), HeadParams::Gald(gp)) => gald_on_tape(tape, feat, cfg, gp)?,
        _ => return config_err("head configuration and parameters disagree"),
    };
    let logits = tape.conv2d(ctx, &p.classifier)?;
    tape.resize(logits, s.h, s.w)
}

fn stack_images(samples: &[&SynthSample]) -> Result<Tensor> {
    let s = samples[0].image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.numel()?);
    for sample in samples {
        data.extend_from_slice(sample.image.data());
    }
    Tensor::from_vec(Shape4::new(samples.len(), s.c, s.h, s.w), data)
}

/// Differentiable network forward. Backward yields `[dimages, dparams...]`.
pub fn toy_forward(
    images: &Tensor,
    head: &ToyHead,
    params: &ToyParams<Tensor>,
) -> Result<(Tensor, BackwardFn)> {
    crate::autograd::traced(
        std::slice::from_ref(images),
        params,
        &MacCounter::new(),
        |tape, ins, p| network(tape, ins[0], head, p),
    )
}

/// Forward pass only; returns `(n, classes, h, w)` logits.
pub fn predict_logits(
    images: &Tensor,
    head: &ToyHead,
    params: &ToyParams<Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone());
    let pv = params.register(&mut tape);
    let out = network(&mut tape, x, head, &pv)?;
    Ok(tape.value(out).clone())
}

fn argmax_maps(logits: &Tensor) -> Vec<LabelMap> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let mut m = LabelMap::filled(s.h, s.w, 0);
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut best = 0;
                    for c in 1..s.c {
                        if logits.at(n, c, y, x) > logits.at(n, best, y, x) {
                            best = c;
                        }
                    }
                    m.set(y, x, best as u32);
                }
            }
            m
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackScore {
    pub slack: usize,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over images of the per-image mIoU.
    pub miou: f64,
    /// Mean over images of the class-averaged boundary F-score.
    pub boundary_f: Vec<SlackScore>,
}

impl Evaluation {
    pub fn boundary_at(&self, slack: usize) -> Option<f64> {
        self.boundary_f
            .iter()
            .find(|s| s.slack == slack)
            .map(|s| s.fscore)
    }
}

pub fn evaluate(
    samples: &[SynthSample],
    head: &ToyHead,
    params: &ToyParams<Tensor>,
    batch: usize,
) -> Result<Evaluation> {
    let mut miou_sum = 0.0;
    let mut bf_sum = [0.0; STANDARD_SLACKS.len()];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let logits = predict_logits(&stack_images(&refs)?, head, params)?;
        for (pred, sample) in argmax_maps(&logits).iter().zip(chunk) {
            miou_sum += miou(pred, &sample.labels, NUM_CLASSES)?.mean;
            for (acc, &slack) in bf_sum.iter_mut().zip(&STANDARD_SLACKS) {
                *acc += mean_boundary_fscore(pred, &sample.labels, NUM_CLASSES, slack)?;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        miou: miou_sum / n,
        boundary_f: STANDARD_SLACKS
            .iter()
            .zip(bf_sum)
            .map(|(&slack, s)| SlackScore {
                slack,
                fscore: s / n,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum TrainStatus {
    Completed,
    /// The loss became non-finite at `step`; training stopped there.
    Diverged {
        step: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub head: String,
    pub status: TrainStatus,
    pub steps: usize,
    pub param_count: usize,
    /// Training loss at every optimiser step.
    pub loss_curve: Vec<f64>,
    pub final_miou: f64,
    pub boundary_f: Vec<SlackScore>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn boundary_at(&self, slack: usize) -> Option<f64> {
        self.boundary_f
            .iter()
            .find(|s| s.slack == slack)
            .map(|s| s.fscore)
    }
}

/// Trained parameters alongside the report.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: ToyParams<Tensor>,
}

/// Training and evaluation sets for `cfg`; the evaluation set uses a seed
/// disjoint from the training seed.
pub fn datasets(cfg: &TrainConfig) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let train = synth_dataset(cfg.seed, cfg.train_samples, cfg.height, cfg.width)?;
    let eval = synth_dataset(
        cfg.seed ^ 0xe7a1_0000_0000_0001,
        cfg.eval_samples,
        cfg.height,
        cfg.width,
    )?;
    Ok((train, eval))
}

/// One loss evaluation and its parameter gradients, in visit order.
fn loss_and_grads(
    batch: &[&SynthSample],
    cfg: &TrainConfig,
    params: &ToyParams<Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let images = stack_images(batch)?;
    let labels: Vec<LabelMap> = batch.iter().map(|s| s.labels.clone()).collect();
    let mut tape = Tape::with_counter(MacCounter::new());
    let x = tape.leaf(images);
    let pv = params.register(&mut tape);
    let out = network(&mut tape, x, &cfg.head, &pv)?;
    let (loss, back) = cross_entropy_ohem(tape.value(out), &labels, cfg.ohem_topk_fraction)?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let dlogits = back
        .apply(&Tensor::full(Shape4::new(1, 1, 1, 1), 1.0))
        .remove(0);
    let grads = tape.backward(out, &dlogits);
    let mut flat = Vec::new();
    let _ = pv.map(&mut |v: &Var| {
        flat.push(
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v))),
        )
    });
    Ok((loss, flat))
}

pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, eval) = datasets(cfg)?;
    let mut params = ToyParams::init(cfg)?;
    let mut velocity: Vec<Tensor> = params
        .to_vec()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let total = cfg.total_steps();
    let mut loss_curve = Vec::with_capacity(total);
    let mut status = TrainStatus::Completed;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0dd_ba11));
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.gen_range(0..=i));
        }
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&SynthSample> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = loss_and_grads(&batch, cfg, &params)?;
            loss_curve.push(loss);
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                status = TrainStatus::Diverged { step };
                break 'epochs;
            }
            let lr = poly_lr(cfg.lr, step, total);
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            let mut values = params.to_vec();
            for ((p, v), g) in values.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + scale * gv;
                    *pv -= lr * *vv;
                }
            }
            params = params.from_slice(&values)?;
            step += 1;
        }
    }
    let ev = evaluate(&eval, &cfg.head, &params, cfg.batch)?;
    let report = TrainReport {
        seed: cfg.seed,
        head: cfg.head.name(),
        status,
        steps: step,
        param_count: params.scalar_count(),
        loss_curve,
        final_miou: ev.miou,
        boundary_f: ev.boundary_f,
        config: cfg.clone(),
    };
    Ok(TrainOutcome { report, params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub head: String,
    pub per_seed_boundary_f3: Vec<f64>,
    pub mean_boundary_f3: f64,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Head names sorted by mean boundary F-score at slack 3, best first.
    pub ordering: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, head: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.head == head)
    }
}

/// Trains every head in [`ablation_heads`] on each seed with `base` as the
/// template configuration and compares boundary F-scores at slack 3.
pub fn directional_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for head in ablation_heads(base.channels) {
        let mut f3 = Vec::new();
        let mut mious = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                head: head.clone(),
                ..base.clone()
            };
            let report = train_toy(&cfg)?.report;
            if let TrainStatus::Diverged { step } = report.status {
                return Err(GaldError::NonFinite(format!(
                    "{} diverged at step {step} (seed {seed})",
                    report.head
                )));
            }
            f3.push(report.boundary_at(3).unwrap_or(0.0));
            mious.push(report.final_miou);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AblationRow {
            head: head.name(),
            mean_boundary_f3: mean(&f3),
            mean_miou: mean(&mious),
            per_seed_boundary_f3: f3,
        });
    }
    let mut ordering: Vec<&AblationRow> = rows.iter().collect();
    ordering.sort_by(|a, b| b.mean_boundary_f3.total_cmp(&a.mean_boundary_f3));
    let ordering = ordering.into_iter().map(|r| r.head.clone()).collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        ordering,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64, head: ToyHead) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            train_samples: 8,
            eval_samples: 4,
            height: 32,
            width: 32,
            channels: 4,
            batch: 4,
            ..TrainConfig::new(seed, head)
        }
    }

    #[test]
    fn dataset_is_deterministic_and_complete() {
        let a = synth_dataset(3, 10, 64, 64).unwrap();
        let b = synth_dataset(3, 10, 64, 64).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for class in 0..3 {
                assert!(s.labels.data.contains(&class));
            }
            let large = s.labels.data.iter().filter(|&&v| v == LARGE_OBJECT).count();
            assert!(large * 4 >= 64 * 64);
        }
        assert_ne!(a, synth_dataset(4, 10, 64, 64).unwrap());
        assert!(synth_dataset(1, 1, 31, 64).is_err());
    }

    #[test]
    fn small_object_fraction_regression() {
        let d = synth_dataset(0, 10, 64, 64).unwrap();
        let f = small_object_fraction(&d);
        assert!(f < 0.02);
        assert!((f - FROZEN_SMALL_FRACTION).abs() < 1e-12, "{f}");
    }

    const FROZEN_SMALL_FRACTION: f64 = 0.0144775390625;

    #[test]
    fn uniform_logits_loss_is_ln3() {
        let logits = Tensor::zeros(Shape4::new(1, 3, 2, 2));
        let labels = vec![LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap()];
        let (loss, _) = cross_entropy_ohem(&logits, &labels, 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ohem_selection_and_zero_gradients() {
        let logits = Tensor::uniform(Shape4::new(2, 3, 3, 3), 9, -2.0, 2.0);
        let labels: Vec<LabelMap> = (0..2)
            .map(|n| LabelMap::new(3, 3, (0..9).map(|i| ((i + n) % 3) as u32).collect()).unwrap())
            .collect();
        let (_, back) = cross_entropy_ohem(&logits, &labels, 0.3).unwrap();
        let g = back
            .apply(&Tensor::full(Shape4::new(1, 1, 1, 1), 1.0))
            .remove(0);
        let mut active = 0;
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let any = (0..3).any(|c| g.at(n, c, y, x) != 0.0);
                    active += any as usize;
                }
            }
        }
        assert_eq!(active, (0.3f64 * 18.0).ceil() as usize);

        let flat = Tensor::zeros(Shape4::new(1, 3, 4, 5));
        let labels = vec![LabelMap::filled(4, 5, 1)];
        let (_, back) = cross_entropy_ohem(&flat, &labels, 0.25).unwrap();
        let g = back
            .apply(&Tensor::full(Shape4::new(1, 1, 1, 1), 1.0))
            .remove(0);
        let chosen: Vec<usize> = (0..20)
            .filter(|&i| g.at(0, 0, i / 5, i % 5) != 0.0)
            .collect();
        assert_eq!(chosen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ohem_full_fraction_is_mean_cross_entropy() {
        let logits = Tensor::uniform(Shape4::new(1, 3, 2, 3), 2, -1.0, 1.0);
        let labels = vec![LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap()];
        let (loss, _) = cross_entropy_ohem(&logits, &labels, 1.0).unwrap();
        let mut want = 0.0;
        for y in 0..2 {
            for x in 0..3 {
                let z: Vec<f64> = (0..3).map(|c| logits.at(0, c, y, x)).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                want += lse - z[labels[0].get(y, x) as usize];
            }
        }
        assert!((loss - want / 6.0).abs() < 1e-14);
        assert!(cross_entropy_ohem(&logits, &labels, 0.0).is_err());
        let bad = vec![LabelMap::filled(2, 3, 3)];
        assert!(cross_entropy_ohem(&logits, &bad, 1.0).is_err());
    }

    #[test]
    fn poly_schedule_closed_form() {
        for t in 0..10 {
            let want = 0.1 * (1.0 - t as f64 / 10.0).powf(0.9);
            assert_eq!(poly_lr(0.1, t, 10), want);
        }
        assert_eq!(poly_lr(0.1, 10, 10), 0.0);
    }

    #[test]
    fn zero_epochs_equals_untrained_evaluation() {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(5, small_head(0))
        };
        let out = train_toy(&cfg).unwrap();
        assert_eq!(out.report.steps, 0);
        assert!(out.report.loss_curve.is_empty());
        let (_, eval) = datasets(&cfg).unwrap();
        let params = ToyParams::init(&cfg).unwrap();
        let ev = evaluate(&eval, &cfg.head, &params, cfg.batch).unwrap();
        assert_eq!(out.report.final_miou, ev.miou);
        assert_eq!(out.report.boundary_f, ev.boundary_f);
    }

    /// The ablation heads shrunk to fit a 16x16 feature map.
    fn small_head(i: usize) -> ToyHead {
        match ablation_heads(4)[i].clone() {
            ToyHead::Gald(mut g) => {
                if let LdConfig::V1(_) = g.ld {
                    g.ld = LdConfig::V1(Ldv1Config::new(4, Ldv1Strategy::DepthwiseConv).unwrap());
                }
                g.ga.aspp_rates = vec![2, 4];
                ToyHead::Gald(g)
            }
            ToyHead::GaOnly { mut ga } => {
                ga.aspp_rates = vec![2, 4];
                ToyHead::GaOnly { ga }
            }
        }
    }

    #[test]
    fn batched_network_gradients() {
        use crate::oracles::{gradcheck, GradcheckOptions};
        for i in 0..3 {
            let mut head = small_head(i);
            match &mut head {
                ToyHead::GaOnly { ga } => ga.aspp_rates = vec![1, 2],
                ToyHead::Gald(g) => {
                    g.ga.aspp_rates = vec![1, 2];
                    if let LdConfig::V1(_) = g.ld {
                        g.ld =
                            LdConfig::V1(Ldv1Config::new(2, Ldv1Strategy::DepthwiseConv).unwrap());
                    }
                    if let LdConfig::V2(v2) = &mut g.ld {
                        *v2 = v2.with_window(3, 1).unwrap();
                    }
                }
            }
            let cfg = TrainConfig {
                channels: 2,
                ..small_cfg(3, head)
            };
            let params = ToyParams::init(&cfg).unwrap();
            let x = Tensor::uniform(Shape4::new(2, 3, 8, 8), 4, 0.0, 1.0);
            let mut tensors = vec![x];
            tensors.extend(params.to_vec());
            let report = gradcheck(
                |ts| {
                    let p = params.from_slice(&ts[1..])?;
                    toy_forward(&ts[0], &cfg.head, &p)
                },
                &tensors,
                GradcheckOptions::default().with_tol(1e-5),
            )
            .unwrap();
            assert!(report.passed(), "head {i}: {}", report.max_rel_error());
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        for i in 0..3 {
            let cfg = small_cfg(11, small_head(i));
            let a = train_toy(&cfg).unwrap().report;
            let b = train_toy(&cfg).unwrap().report;
            assert_eq!(a, b);
            assert_eq!(a.status, TrainStatus::Completed);
            assert_eq!(a.steps, 2);
            assert!(a.loss_curve.iter().all(|l| l.is_finite()));
            serde_json::to_string(&a).unwrap();
        }
    }

    #[test]
    fn negative_grad_clip_is_rejected() {
        let cfg = TrainConfig {
            grad_clip: -1.0,
            ..small_cfg(1, small_head(0))
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = TrainConfig {
            lr: 1e200,
            epochs: 3,
            ..small_cfg(1, small_head(0))
        };
        let r = train_toy(&cfg).unwrap().report;
        assert!(
            matches!(r.status, TrainStatus::Diverged { .. }),
            "{:?}",
            r.status
        );
    }
}
