//! Training and sampling of the multi-stage diffusion chain.
//!
//! All chain arithmetic runs on normalized fields: a level-`k` grid in sum
//! units is divided by `cardinality_k · scale`, so every level has the same
//! per-cell magnitude as the finest one. Outputs are mapped back to sum units.
//!
//! Step `n` of the reverse chain reads the state at input level `m = n + 1`
//! and writes level `n`; it belongs to stage `k = stage_of(n)`.

use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TensorBundle;
use crate::error::{invalid, Error, Result};
use crate::grid::{coarsen_array, upsample_array, Aggregation, MultiScaleTraffic, Replication, ResolutionLevel, SpatioTemporalGrid};
use crate::guidance::{prior_ratio, PriorNoise};
use crate::nn::denoiser::{Denoiser, EncodedContext, NetInput, PriorSign, StageCondition};
use crate::nn::optim::{Sgd, SgdConfig};
use crate::rng::{self, streams, Stream};
use crate::schedule::{
    interior, noising_start, sigma, stage_alpha, stage_beta, stage_of, Adding, Denoising, RgpPlan, ScheduleSpec,
};
use crate::synth::UrbanContext;

/// Per-cell traffic scale shared by every level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scale: f64,
}

impl Normalizer {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(invalid(format!("normalizer scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// Mean finest-level value over the given grids.
    pub fn fit<'a>(fine: impl IntoIterator<Item = &'a SpatioTemporalGrid>) -> Result<Self> {
        let (mut sum, mut count) = (0.0, 0usize);
        for g in fine {
            sum += g.data.sum() / g.level.cardinality() as f64;
            count += g.len();
        }
        if count == 0 {
            return Err(invalid("cannot fit a normalizer on no data"));
        }
        Self::new(sum / count as f64)
    }

    pub fn normalize(&self, g: &SpatioTemporalGrid) -> Array3<f64> {
        let f = 1.0 / (g.level.cardinality() as f64 * self.scale);
        g.data.mapv(|v| v * f)
    }

    pub fn denormalize(&self, data: &Array3<f64>, level: &ResolutionLevel) -> SpatioTemporalGrid {
        let f = level.cardinality() as f64 * self.scale;
        SpatioTemporalGrid::new(level.clone(), data.mapv(|v| v * f))
    }
}

/// Exact sum-aggregated grid of every plan stage, coarsest first.
pub fn stage_ladder(plan: &RgpPlan, fine: &SpatioTemporalGrid) -> Result<Vec<SpatioTemporalGrid>> {
    if fine.level.cardinality() != 1 {
        return Err(invalid("stage ladders are built from a finest-level grid"));
    }
    plan.stages
        .iter()
        .map(|level| {
            let data = coarsen_array(&fine.data, level.temporal, level.spatial, Aggregation::Sum)?;
            Ok(SpatioTemporalGrid {
                level: level.clone(),
                data,
                t0: fine.t0,
            })
        })
        .collect()
}

/// Where the prior pathway reads its coarse field from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// The true coarser level (teacher forcing).
    #[default]
    True,
    /// A one-shot network estimate of the coarser level from a noised copy.
    Generated,
}

/// Noisy state of the forward chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: SpatioTemporalGrid,
    pub n: usize,
    pub k: usize,
}

/// `x(n) = sqrt(α)·start + sqrt(1 − α)·ε`, with `start` the stage's noising start.
pub fn hnap_forward(
    ladder: &MultiScaleTraffic,
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    n: usize,
    eps: &Array3<f64>,
) -> Result<DiffusionState> {
    let k = stage_of(plan, n)?;
    let start = noising_start(plan, spec, k, ladder)?;
    if start.data.dim() != eps.dim() {
        return Err(Error::ShapeMismatch {
            left: eps.shape().to_vec(),
            right: start.data.shape().to_vec(),
        });
    }
    let a = stage_alpha(plan, spec, k, n);
    let data = forward_mix(&start.data, eps, a);
    Ok(DiffusionState {
        x: SpatioTemporalGrid {
            level: start.level,
            data,
            t0: start.t0,
        },
        n,
        k,
    })
}

fn forward_mix(start: &Array3<f64>, eps: &Array3<f64>, alpha: f64) -> Array3<f64> {
    if alpha == 1.0 {
        return start.clone();
    }
    if alpha == 0.0 {
        return eps.clone();
    }
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let mut x = start * a;
    x.scaled_add(b, eps);
    x
}

/// Clean-field estimate implied by a noise estimate at interior level α.
pub fn estimate_start(x: &Array3<f64>, sigma_hat: &Array3<f64>, alpha: f64) -> Array3<f64> {
    let mut out = x - &(sigma_hat * (1.0 - alpha).sqrt());
    out /= alpha.sqrt();
    out
}

/// One reverse update from level `m` to level `m − 1` given `Σ`.
///
/// `alpha_m` is the interior α of the input level; `alpha_prev` is the raw α of
/// the target level. A clean target (`alpha_prev == 1`) uses the start estimate.
pub fn reverse_update(
    x: &Array3<f64>,
    sigma_hat: &Array3<f64>,
    alpha_m: f64,
    alpha_prev: f64,
    spec: &ScheduleSpec,
    noise: Option<(f64, &Array3<f64>)>,
) -> Array3<f64> {
    if alpha_prev >= 1.0 {
        return estimate_start(x, sigma_hat, alpha_m);
    }
    let a_prev = interior(spec, alpha_prev);
    let hat = (alpha_m / a_prev).min(1.0);
    let mut out = x - &(sigma_hat * ((1.0 - hat) / (1.0 - alpha_m).sqrt()));
    out /= hat.sqrt();
    if let Some((s, z)) = noise {
        if s > 0.0 {
            out.scaled_add(s, z);
        }
    }
    out
}

/// One noise-estimation request issued by the chain.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub stage: usize,
    /// Input noise level `m`.
    pub step: usize,
    /// Interior α of the input level.
    pub alpha: f64,
    pub x: &'a Array3<f64>,
    /// Normalized coarser field aligned to `x`, when the prior pathway is active.
    pub prior_field: Option<&'a Array3<f64>>,
}

/// Anything that can stand in for the noise-estimation network.
pub trait NoisePredictor {
    /// Sign of the prior noise, or `None` when the prior pathway is off.
    fn prior_sign(&self) -> Option<PriorSign>;

    fn predict(&mut self, query: &Query) -> Result<Array3<f64>>;

    /// Combine the estimate with prior noise into `Σ`.
    fn fuse(&self, eps: &Array3<f64>, prior: &PriorNoise) -> Result<Array3<f64>> {
        Ok(eps + &prior.tensor)
    }
}

/// The trained network bound to one sample's context.
pub struct NetworkPredictor<'a> {
    net: &'a Denoiser,
    conds: Vec<StageCondition>,
}

impl<'a> NetworkPredictor<'a> {
    pub fn new(net: &'a Denoiser, context: &UrbanContext, plan: &RgpPlan) -> Result<Self> {
        let enc = net.encode_uec(context, false)?;
        let conds = plan
            .stages
            .iter()
            .map(|l| net.condition(&enc, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { net, conds })
    }
}

impl NoisePredictor for NetworkPredictor<'_> {
    fn prior_sign(&self) -> Option<PriorSign> {
        self.net.config.prior_enabled().then_some(self.net.config.prior_sign)
    }

    fn predict(&mut self, q: &Query) -> Result<Array3<f64>> {
        let cond = self
            .conds
            .get(q.stage - 1)
            .ok_or_else(|| invalid(format!("no condition for stage {}", q.stage)))?;
        let input = NetInput {
            x: q.x,
            prior_field: q.prior_field,
            step: q.step,
            alpha: q.alpha,
        };
        Ok(self.net.forward(&input, cond, false)?.0)
    }

    fn fuse(&self, eps: &Array3<f64>, prior: &PriorNoise) -> Result<Array3<f64>> {
        self.net.fuse(eps, prior)
    }
}

/// Returns exactly the noise that separates the state from the known stage
/// starts, minus the prior noise, so that additive fusion yields the true noise.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    /// Normalized noising start of every stage.
    pub starts: Vec<Array3<f64>>,
    pub sign: Option<PriorSign>,
}

impl NoisePredictor for OraclePredictor {
    fn prior_sign(&self) -> Option<PriorSign> {
        self.sign
    }

    fn predict(&mut self, q: &Query) -> Result<Array3<f64>> {
        let start = self
            .starts
            .get(q.stage - 1)
            .ok_or_else(|| invalid(format!("oracle has no start for stage {}", q.stage)))?;
        let mut eps = (q.x - &(start * q.alpha.sqrt())) / (1.0 - q.alpha).sqrt();
        if let (Some(s), Some(h)) = (self.sign, q.prior_field) {
            eps.scaled_add(-s.factor() * prior_ratio(q.alpha), h);
        }
        Ok(eps)
    }
}

/// Prior noise `sign · sqrt(α/(1−α)) · H` on an already aligned field.
pub fn prior_from_field(field: &Array3<f64>, alpha: f64, sign: PriorSign, stage: usize) -> PriorNoise {
    PriorNoise {
        tensor: field * (sign.factor() * prior_ratio(alpha)),
        source_level: stage - 1,
        alpha_used: alpha,
    }
}

fn align_field(coarse: &Array3<f64>, from: &ResolutionLevel, to: &ResolutionLevel) -> Result<Array3<f64>> {
    if from.spatial % to.spatial != 0 || from.temporal % to.temporal != 0 {
        return Err(invalid(format!("level {} cannot be aligned to {}", from.label, to.label)));
    }
    Ok(upsample_array(
        coarse,
        from.temporal / to.temporal,
        from.spatial / to.spatial,
        Replication::ReplicateValue,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub n: usize,
    pub stage: usize,
    pub beta: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub state_rms: f64,
}

pub fn trace_csv(rows: &[TraceRecord]) -> String {
    let mut s = String::from("n,stage,beta,alpha,sigma,state_rms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n, r.stage, r.beta, r.alpha, r.sigma, r.state_rms
        ));
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub trace: bool,
    /// Extra steps whose states are recorded in [`SampleOutput::snapshots`].
    pub record_steps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Stage outputs in sum units, coarsest first (only the stages that ran).
    pub levels: Vec<SpatioTemporalGrid>,
    pub forward_passes: usize,
    pub trace: Vec<TraceRecord>,
    /// `(n, state)` for each requested step, in sum units of the stage level.
    pub snapshots: Vec<(usize, SpatioTemporalGrid)>,
}

impl SampleOutput {
    pub fn finest(&self) -> &SpatioTemporalGrid {
        self.levels.last().expect("at least one stage ran")
    }

    pub fn ladder(&self) -> Result<MultiScaleTraffic> {
        MultiScaleTraffic::new(self.levels.clone())
    }
}

fn rms(x: &Array3<f64>) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Shared reverse-chain driver. `seeded` gives the normalized output of the
/// stage before `first_stage`, when sampling starts mid-plan.
#[allow(clippy::too_many_arguments)]
fn run_chain(
    predictor: &mut dyn NoisePredictor,
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    fine_shape: (usize, usize, usize),
    normalizer: &Normalizer,
    rng: &mut Stream,
    first_stage: usize,
    seeded: Option<Array3<f64>>,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    plan.validate()?;
    spec.validate()?;
    let sign = predictor.prior_sign();
    let mut out = SampleOutput {
        levels: Vec::new(),
        forward_passes: 0,
        trace: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut prev: Option<Array3<f64>> = seeded;
    for k in first_stage..=plan.k() {
        let level = plan.stage_level(k);
        let shape = level.shape_for(fine_shape)?;
        let (lo, hi) = plan.interval(k);
        let prior_field = match (&prev, sign, k > 1) {
            (Some(p), Some(_), true) => Some(align_field(p, plan.stage_level(k - 1), level)?),
            _ => None,
        };
        let mut x = match (&prev, spec.denoising) {
            (Some(p), Denoising::CD) if k > 1 => align_field(p, plan.stage_level(k - 1), level)?,
            _ => rng::normal_array(rng, shape),
        };
        for n in (lo..hi).rev() {
            let m = n + 1;
            let a_m = interior(spec, stage_alpha(plan, spec, k, m));
            let query = Query {
                stage: k,
                step: m,
                alpha: a_m,
                x: &x,
                prior_field: prior_field.as_ref(),
            };
            let eps = predictor.predict(&query)?;
            out.forward_passes += 1;
            let sig_hat = match (&prior_field, sign) {
                (Some(h), Some(s)) => predictor.fuse(&eps, &prior_from_field(h, a_m, s, k))?,
                _ => eps,
            };
            let s = sigma(plan, spec, m)?;
            let z = if s > 0.0 { Some(rng::normal_array(rng, shape)) } else { None };
            let a_prev = stage_alpha(plan, spec, k, n);
            x = reverse_update(&x, &sig_hat, a_m, a_prev, spec, z.as_ref().map(|z| (s, z)));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reverse state at step {n} (stage {k})")));
            }
            if options.trace {
                out.trace.push(TraceRecord {
                    n,
                    stage: k,
                    beta: stage_beta(plan, spec, k, n),
                    alpha: a_prev,
                    sigma: s,
                    state_rms: rms(&x),
                });
            }
            if options.record_steps.contains(&n) {
                out.snapshots.push((n, normalizer.denormalize(&x, level)));
            }
        }
        out.levels.push(normalizer.denormalize(&x, level));
        prev = Some(x);
    }
    Ok(out)
}

/// Full coarse-to-fine reverse chain; returns one grid per plan stage.
pub fn rrdp_sample(
    predictor: &mut dyn NoisePredictor,
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    fine_shape: (usize, usize, usize),
    normalizer: &Normalizer,
    seed: u64,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    let mut rng = rng::stream(seed, streams::SAMPLE);
    run_chain(predictor, plan, spec, fine_shape, normalizer, &mut rng, 1, None, options)
}

/// Single-resolution chain of `n_steps` at the finest level with the
/// continuous schedule. States at `options.record_steps` are kept.
pub fn canonical_sample(
    predictor: &mut dyn NoisePredictor,
    n_steps: usize,
    fine_shape: (usize, usize, usize),
    normalizer: &Normalizer,
    seed: u64,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    let plan = RgpPlan::single(n_steps)?;
    let spec = ScheduleSpec::canonical();
    let mut rng = rng::stream(seed, streams::SAMPLE);
    run_chain(predictor, &plan, &spec, fine_shape, normalizer, &mut rng, 1, None, options)
}

/// Start the chain after the stage whose resolution matches `coarse`, using it
/// as the previous stage's output. Returns the finest grid.
#[allow(clippy::too_many_arguments)]
pub fn refine_zero_shot(
    predictor: &mut dyn NoisePredictor,
    coarse: &SpatioTemporalGrid,
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    fine_shape: (usize, usize, usize),
    normalizer: &Normalizer,
    seed: u64,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    let j = plan
        .stages
        .iter()
        .position(|l| l.same_resolution(&coarse.level))
        .map(|i| i + 1)
        .ok_or_else(|| Error::MissingLevel(format!("coarse level {} is not a plan stage", coarse.level.label)))?;
    let expect = plan.stage_level(j).shape_for(fine_shape)?;
    if coarse.shape() != expect {
        return Err(Error::ShapeMismatch {
            left: coarse.data.shape().to_vec(),
            right: vec![expect.0, expect.1, expect.2],
        });
    }
    if j == plan.k() {
        return Ok(SampleOutput {
            levels: vec![coarse.clone()],
            forward_passes: 0,
            trace: Vec::new(),
            snapshots: Vec::new(),
        });
    }
    let mut rng = rng::stream(seed, streams::SAMPLE);
    let seeded = normalizer.normalize(coarse);
    run_chain(
        predictor,
        plan,
        spec,
        fine_shape,
        normalizer,
        &mut rng,
        j + 1,
        Some(seeded),
        options,
    )
}

/// One training tile with its per-stage targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub context: UrbanContext,
    /// Normalized noising start per stage.
    pub starts: Vec<Array3<f64>>,
    /// Normalized true level per stage (the teacher-forced prior source).
    pub levels: Vec<Array3<f64>>,
}

impl TrainSample {
    pub fn new(
        context: UrbanContext,
        fine: &SpatioTemporalGrid,
        plan: &RgpPlan,
        spec: &ScheduleSpec,
        normalizer: &Normalizer,
    ) -> Result<Self> {
        let grids = stage_ladder(plan, fine)?;
        let levels: Vec<Array3<f64>> = grids.iter().map(|g| normalizer.normalize(g)).collect();
        let starts = match spec.adding {
            Adding::SA => levels.clone(),
            Adding::CA => plan
                .stages
                .iter()
                .map(|l| {
                    let mean = coarsen_array(&fine.data, l.temporal, l.spatial, Aggregation::Mean)?;
                    Ok(mean / normalizer.scale)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            context,
            starts,
            levels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: SgdConfig,
    pub prior_source: PriorSource,
    /// Cap on the per-step signal-to-noise weight; `None` weights every step equally.
    pub snr_cap: Option<f64>,
    pub seed: u64,
}

pub const DEFAULT_SNR_CAP: f64 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            optimizer: SgdConfig::default(),
            prior_source: PriorSource::True,
            snr_cap: Some(DEFAULT_SNR_CAP),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub iterations: usize,
    pub seconds_per_epoch: f64,
}

/// Draw of one training item: sample index, reverse step and noise.
#[derive(Debug, Clone)]
pub struct TrainDraw {
    pub sample: usize,
    pub n: usize,
    pub eps: Array3<f64>,
}

impl TrainDraw {
    pub fn random(samples: &[TrainSample], plan: &RgpPlan, sample: usize, rng: &mut Stream) -> Result<Self> {
        let n = rng.gen_range(0..plan.n_steps);
        let k = stage_of(plan, n)?;
        let shape = samples[sample].starts[k - 1].dim();
        Ok(Self {
            sample,
            n,
            eps: rng::normal_array(rng, shape),
        })
    }
}

fn generated_prior(
    net: &Denoiser,
    enc: &EncodedContext,
    sample: &TrainSample,
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    k: usize,
    rng: &mut Stream,
) -> Result<Array3<f64>> {
    let src = k - 1;
    let (lo, hi) = plan.interval(src);
    let m = rng.gen_range(lo + 1..=hi);
    let a = interior(spec, stage_alpha(plan, spec, src, m));
    let start = &sample.starts[src - 1];
    let eps = rng::normal_array(rng, start.dim());
    let x = forward_mix(start, &eps, a);
    let cond = net.condition(enc, plan.stage_level(src))?;
    let teacher = if src > 1 && net.config.prior_enabled() {
        Some(align_field(&sample.levels[src - 2], plan.stage_level(src - 1), plan.stage_level(src))?)
    } else {
        None
    };
    let input = NetInput {
        x: &x,
        prior_field: teacher.as_ref(),
        step: m,
        alpha: a,
    };
    let est = net.forward(&input, &cond, false)?.0;
    let sig = match &teacher {
        Some(h) => net.fuse(&est, &prior_from_field(h, a, net.config.prior_sign, src))?,
        None => est,
    };
    Ok(estimate_start(&x, &sig, a))
}

/// Loss and parameter gradients for a batch of draws.
///
/// Per item: `‖Σ − ε‖²` averaged over cells, where `Σ` fuses the estimate with
/// the prior noise of the true coarser level (or its generated stand-in).
/// Loss weight `min(snr, cap) / snr` with `snr = α / (1 − α)`.
///
/// A noise-space loss on a clean-field estimate carries a factor `snr`, which
/// reaches 1e4 at the clean end of every stage. Capping it keeps those steps from
/// dominating the gradient and the norm clip. The optimum at each step is unchanged.
pub fn snr_weight(alpha: f64, cap: Option<f64>) -> f64 {
    match cap {
        Some(c) => {
            let snr = alpha / (1.0 - alpha);
            snr.min(c) / snr
        }
        None => 1.0,
    }
}

pub fn training_step(
    net: &Denoiser,
    samples: &[TrainSample],
    draws: &[TrainDraw],
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    prior_source: PriorSource,
    snr_cap: Option<f64>,
    rng: &mut Stream,
) -> Result<(f64, crate::nn::DenoiserParams)> {
    let mut grads = net.params.zeros_like();
    let mut total = 0.0;
    let b = draws.len().max(1) as f64;
    for d in draws {
        let sample = samples
            .get(d.sample)
            .ok_or_else(|| invalid(format!("draw refers to missing sample {}", d.sample)))?;
        let k = stage_of(plan, d.n)?;
        let m = d.n + 1;
        let level = plan.stage_level(k);
        let a = interior(spec, stage_alpha(plan, spec, k, m));
        let x = forward_mix(&sample.starts[k - 1], &d.eps, a);
        let enc = net.encode_uec(&sample.context, true)?;
        let cond = net.condition(&enc, level)?;
        let prior_field = if k > 1 && net.config.prior_enabled() {
            let coarse = match prior_source {
                PriorSource::True => sample.levels[k - 2].clone(),
                PriorSource::Generated => generated_prior(net, &enc, sample, plan, spec, k, rng)?,
            };
            Some(align_field(&coarse, plan.stage_level(k - 1), level)?)
        } else {
            None
        };
        let input = NetInput {
            x: &x,
            prior_field: prior_field.as_ref(),
            step: m,
            alpha: a,
        };
        let (est, tape) = net.forward(&input, &cond, true)?;
        let tape = tape.expect("recorded");
        let prior = prior_field
            .as_ref()
            .map(|h| prior_from_field(h, a, net.config.prior_sign, k));
        let fused = match &prior {
            Some(p) => net.fuse(&est, p)?,
            None => est.clone(),
        };
        let resid = &fused - &d.eps;
        let weight = snr_weight(a, snr_cap);
        let loss = weight * resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss for sample {} at step {}",
                d.sample, d.n
            )));
        }
        total += loss / b;
        let d_fused = resid * (2.0 * weight / (fused.len() as f64 * b));
        let d_est = match &prior {
            Some(p) => net.fuse_backward(&est, p, &d_fused, &mut grads),
            None => d_fused,
        };
        let d_ctx = net.backward(&tape, &cond, &d_est, &mut grads)?;
        net.context_backward(&enc, level, &d_ctx, &mut grads)?;
    }
    Ok((total, grads))
}

/// Epoch-based training with a seeded shuffle and momentum SGD.
pub fn train(
    net: &mut Denoiser,
    samples: &[TrainSample],
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    if config.batch == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let mut rng = rng::stream(config.seed, streams::TRAIN);
    let mut opt = Sgd::new(config.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut iterations = 0;
    let t0 = Instant::now();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let draws = chunk
                .iter()
                .map(|&i| TrainDraw::random(samples, plan, i, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = training_step(net, samples, &draws, plan, spec, config.prior_source, config.snr_cap, &mut rng)?;
            opt.step(&mut net.params, &grads)?;
            sum += loss;
            count += 1;
            iterations += 1;
        }
        epoch_loss.push(sum / count as f64);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(TrainReport {
        epoch_loss,
        iterations,
        seconds_per_epoch: if config.epochs > 0 { secs / config.epochs as f64 } else { 0.0 },
    })
}

/// Small end-to-end problem for checking analytic gradients: a `2 x 4 x 4`
/// tile, two stages, one draw per stage. Blocks that start at zero are
/// randomized so that every path carries gradient.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub net: Denoiser,
    pub samples: Vec<TrainSample>,
    pub draws: Vec<TrainDraw>,
    pub plan: RgpPlan,
    pub spec: ScheduleSpec,
}

impl GradFixture {
    pub fn new(seed: u64, output: crate::nn::OutputMode, sign: PriorSign) -> Result<Self> {
        let (t, h, w) = (2, 4, 4);
        let mut r = rng::stream(seed, streams::SAMPLE);
        let context = UrbanContext {
            surface: ndarray::Array2::from_shape_fn((h, w), |_| r.gen_range(0..4)),
            aoi: ndarray::Array2::from_shape_fn((h, w), |_| r.gen_range(0..3)),
            poi: Array3::from_shape_fn((2, h, w), |_| r.gen_range(0.0..1.0)),
            population: Array3::from_shape_fn((t, h, w), |_| r.gen_range(0.0..2.0)),
            surface_classes: 4,
            aoi_classes: 3,
        };
        let fine = SpatioTemporalGrid::new(
            ResolutionLevel::finest(),
            Array3::from_shape_fn((t, h, w), |_| r.gen_range(0.2..2.0)),
        );
        let plan = crate::schedule::plan_rgp(&[2, 1], &[2, 1], 8, crate::schedule::Strategy::FineGreedy)?;
        let spec = ScheduleSpec::segmented();
        let config = crate::nn::DenoiserConfig {
            width: 5,
            fusion_dim: Some(3),
            surface_classes: 4,
            aoi_classes: 3,
            poi_dim: 2,
            tile: (h, w),
            spatial_factors: vec![2, 1],
            use_tpe: true,
            use_spe: true,
            output,
            prior_sign: sign,
        };
        let mut net = Denoiser::new(config, seed)?;
        let p = &mut net.params;
        let mut fill = |v: &mut [f64], scale: f64| v.iter_mut().for_each(|x| *x = scale * rng::normal(&mut r));
        fill(p.conv_out.w.as_slice_mut().expect("standard layout"), 0.2);
        fill(p.conv_out.b.as_slice_mut().expect("standard layout"), 0.1);
        for b in [&mut p.pe_b, &mut p.step_b, &mut p.conv_in.b, &mut p.conv_a.b, &mut p.conv_b.b] {
            fill(b.as_slice_mut().expect("standard layout"), 0.1);
        }
        for m in [&mut p.f_surface, &mut p.f_aoi, &mut p.f_poi, &mut p.f_pop] {
            fill(m.b1.as_slice_mut().expect("standard layout"), 0.1);
            fill(m.b2.as_slice_mut().expect("standard layout"), 0.1);
        }
        if let Some(f) = p.fusion.as_mut() {
            fill(f.out.as_slice_mut().expect("standard layout"), 0.3);
            fill(f.b_e.as_slice_mut().expect("standard layout"), 0.3);
            fill(f.b_p.as_slice_mut().expect("standard layout"), 0.3);
            f.b_out = 0.05;
            f.w_e = 0.9;
            f.w_p = 1.1;
        }
        let norm = Normalizer::fit([&fine])?;
        let samples = vec![TrainSample::new(context, &fine, &plan, &spec, &norm)?];
        let (lo1, hi1) = plan.interval(1);
        let (lo2, hi2) = plan.interval(2);
        let draws = [(lo1 + hi1) / 2, (lo2 + hi2) / 2]
            .into_iter()
            .map(|n| {
                let k = stage_of(&plan, n)?;
                Ok(TrainDraw {
                    sample: 0,
                    n,
                    eps: rng::normal_array(&mut r, samples[0].starts[k - 1].dim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            samples,
            draws,
            plan,
            spec,
        })
    }

    pub fn loss_and_grad(&self, params: &crate::nn::DenoiserParams) -> Result<(f64, crate::nn::DenoiserParams)> {
        let net = Denoiser {
            config: self.net.config.clone(),
            params: params.clone(),
        };
        let mut unused = rng::stream(0, streams::TRAIN);
        training_step(&net, &self.samples, &self.draws, &self.plan, &self.spec, PriorSource::True, Some(DEFAULT_SNR_CAP), &mut unused)
    }

    pub fn check(&self, step: f64, tolerance: f64) -> Result<crate::nn::GradCheckReport> {
        crate::nn::grad_check(
            &self.net.params,
            |p| Ok(self.loss_and_grad(p)?.0),
            |p| Ok(self.loss_and_grad(p)?.1),
            step,
            tolerance,
        )
    }
}

/// A network together with everything needed to sample from it again.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: Denoiser,
    pub normalizer: Normalizer,
    pub plan: RgpPlan,
    pub spec: ScheduleSpec,
}

impl TrainedModel {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = self.net.to_bundle();
        if let Some(meta) = b.meta.as_object_mut() {
            meta.insert("normalizer".into(), serde_json::json!(self.normalizer));
            meta.insert("plan".into(), serde_json::json!(self.plan));
            meta.insert("spec".into(), serde_json::json!(self.spec));
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let field = |name: &str| {
            b.meta
                .get(name)
                .cloned()
                .ok_or_else(|| invalid(format!("checkpoint is missing `{name}`")))
        };
        let parse = |e: serde_json::Error| invalid(format!("checkpoint metadata: {e}"));
        Ok(Self {
            net: Denoiser::from_bundle(b)?,
            normalizer: serde_json::from_value(field("normalizer")?).map_err(parse)?,
            plan: serde_json::from_value(field("plan")?).map_err(parse)?,
            spec: serde_json::from_value(field("spec")?).map_err(parse)?,
        })
    }

    pub fn predictor(&self, context: &UrbanContext) -> Result<NetworkPredictor<'_>> {
        NetworkPredictor::new(&self.net, context, &self.plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{plan_rgp, Intensity, Strategy};

    #[test]
    fn snr_weight_caps_clean_steps_only() {
        assert_eq!(snr_weight(0.9999, None), 1.0);
        // snr = 1 is below the cap
        assert_eq!(snr_weight(0.5, Some(5.0)), 1.0);
        let a = 0.99;
        let w = snr_weight(a, Some(5.0));
        assert!((w * a / (1.0 - a) - 5.0).abs() < 1e-9);
    }

    fn ladder_and_plan() -> (MultiScaleTraffic, RgpPlan, SpatioTemporalGrid) {
        let fine = SpatioTemporalGrid::new(
            ResolutionLevel::finest(),
            Array3::from_shape_fn((4, 4, 4), |(t, i, j)| 1.0 + ((t * 7 + i * 3 + j) % 5) as f64),
        );
        let plan = plan_rgp(&[2, 1], &[2, 1], 20, Strategy::FineGreedy).unwrap();
        let levels = stage_ladder(&plan, &fine).unwrap();
        (MultiScaleTraffic::new(levels).unwrap(), plan, fine)
    }

    #[test]
    fn fixture_gradients_agree() {
        for (output, sign) in [
            (crate::nn::OutputMode::Data, PriorSign::Eq11),
            (crate::nn::OutputMode::Noise, PriorSign::Eq9),
        ] {
            let fx = GradFixture::new(1, output, sign).unwrap();
            let report = fx.check(1e-4, 1e-3).unwrap();
            assert!(report.passed(), "{:?}", report.worst());
        }
    }

    #[test]
    fn clean_boundary_returns_level() {
        let (ladder, plan, _) = ladder_and_plan();
        let spec = ScheduleSpec::segmented();
        let st = hnap_forward(&ladder, &plan, &spec, plan.boundaries[0], &Array3::from_elem((2, 2, 2), 0.7))
            .unwrap();
        assert_eq!(st.k, 1);
        assert_eq!(st.x.data, ladder.levels[0].data);
        let st = hnap_forward(&ladder, &plan, &spec, 0, &Array3::from_elem((4, 4, 4), 0.7)).unwrap();
        assert_eq!(st.k, 2);
        assert_eq!(st.x.data, ladder.levels[1].data);
        assert!(hnap_forward(&ladder, &plan, &spec, 0, &Array3::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn zero_start_scales_noise() {
        let eps = Array3::from_elem((1, 2, 2), 2.0);
        let x = forward_mix(&Array3::zeros((1, 2, 2)), &eps, 0.5);
        assert!(x.iter().all(|&v| (v - 0.5f64.sqrt() * 2.0).abs() < 1e-15));
        assert_eq!(forward_mix(&Array3::zeros((1, 2, 2)), &eps, 0.0), eps);
    }

    #[test]
    fn oracle_sampling_hits_every_boundary() {
        let (ladder, plan, fine) = ladder_and_plan();
        let norm = Normalizer::fit([&fine]).unwrap();
        for sign in [None, Some(PriorSign::Eq11), Some(PriorSign::Eq9)] {
            let spec = ScheduleSpec::segmented();
            let mut oracle = OraclePredictor {
                starts: ladder.levels.iter().map(|g| norm.normalize(g)).collect(),
                sign,
            };
            let out = rrdp_sample(&mut oracle, &plan, &spec, fine.shape(), &norm, 3, &SampleOptions::default())
                .unwrap();
            for (got, want) in out.levels.iter().zip(&ladder.levels) {
                for (a, b) in got.data.iter().zip(want.data.iter()) {
                    assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
                }
            }
            assert_eq!(out.forward_passes, plan.n_steps);
        }
    }

    #[test]
    fn single_stage_matches_canonical() {
        let (_, _, fine) = ladder_and_plan();
        let norm = Normalizer::fit([&fine]).unwrap();
        let plan = RgpPlan::single(12).unwrap();
        let spec = ScheduleSpec::canonical();
        let mk = || OraclePredictor {
            starts: vec![norm.normalize(&fine)],
            sign: None,
        };
        let a = rrdp_sample(&mut mk(), &plan, &spec, fine.shape(), &norm, 9, &SampleOptions::default()).unwrap();
        let b = canonical_sample(&mut mk(), 12, fine.shape(), &norm, 9, &SampleOptions::default()).unwrap();
        assert_eq!(a.finest(), b.finest());
        for (x, y) in b.finest().data.iter().zip(fine.data.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn refine_runs_only_remaining_stages() {
        let (ladder, plan, fine) = ladder_and_plan();
        let norm = Normalizer::fit([&fine]).unwrap();
        let spec = ScheduleSpec::new(Intensity::SN, Adding::SA, Denoising::SD);
        let mut oracle = OraclePredictor {
            starts: ladder.levels.iter().map(|g| norm.normalize(g)).collect(),
            sign: Some(PriorSign::Eq11),
        };
        let out = refine_zero_shot(
            &mut oracle,
            &ladder.levels[0],
            &plan,
            &spec,
            fine.shape(),
            &norm,
            1,
            &SampleOptions::default(),
        )
        .unwrap();
        assert_eq!(out.levels.len(), 1);
        let (lo, hi) = plan.interval(2);
        assert_eq!(out.forward_passes, hi - lo);
        let bad = SpatioTemporalGrid::new(ResolutionLevel::new(4, 4), Array3::zeros((1, 1, 1)));
        assert!(refine_zero_shot(&mut oracle, &bad, &plan, &spec, fine.shape(), &norm, 1, &SampleOptions::default())
            .is_err());
    }
}
