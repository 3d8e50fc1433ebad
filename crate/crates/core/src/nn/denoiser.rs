//! The shared conditional noise estimator.
//!
//! ```text
//! context  c   = f1(surface) + f2(aoi) + f3(poi) + f4(population)     per finest cell
//! stage    c_k = block mean of c at the stage resolution
//! h0 = conv_in([x, prior]) + c_k + Linear([tpe(t·τ), spe_δ]) + Linear(tpe(step))
//! h  = conv_out(silu(conv_b(silu(conv_a(silu(h0))))))
//! ```
//!
//! Time is folded into the batch of the 3x3 convolutions. `conv_out` starts at
//! zero. With [`OutputMode::Data`] the raw output is read as a clean-field
//! residual and converted to noise units using the input level's α.

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis as NdAxis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TensorBundle;
use crate::error::{invalid, Error, Result};
use crate::grid::ResolutionLevel;
use crate::guidance::{fuse_noise, fuse_noise_backward, FusionParams, PriorNoise};
use crate::nn::encoding::{pool_mean, tpe, tpe_rows, unpool_mean, LatentShape, PE_DIM};
use crate::nn::layers::{
    col2im, im2col, linear, linear_backward, mlp_backward, mlp_forward, silu_array, silu_backward, MapShape,
    MlpTape,
};
use crate::rng::{self, streams};
use crate::synth::UrbanContext;

/// What the last convolution predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// The raw output is the residual noise itself.
    Noise,
    /// The raw output is the clean-field residual `x0 − prior`, converted to noise units.
    Data,
}

/// Which sign the prior noise carries in the training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSign {
    /// `ε_θ + 𝒫 ≈ ε`
    Eq11,
    /// `ε_θ − 𝒫 ≈ ε`, i.e. the network targets `ε + ε̂`.
    Eq9,
}

impl PriorSign {
    pub fn factor(self) -> f64 {
        match self {
            PriorSign::Eq11 => 1.0,
            PriorSign::Eq9 => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent width `E` shared by the context, encodings and trunk.
    pub width: usize,
    /// Fusion latent width `D`; `None` disables the prior pathway entirely.
    pub fusion_dim: Option<usize>,
    pub surface_classes: usize,
    pub aoi_classes: usize,
    pub poi_dim: usize,
    /// Finest tile extent `(H, W)`.
    pub tile: (usize, usize),
    /// Spatial factors that get their own learnable encoding table.
    pub spatial_factors: Vec<usize>,
    pub use_tpe: bool,
    pub use_spe: bool,
    pub output: OutputMode,
    pub prior_sign: PriorSign,
}

impl DenoiserConfig {
    pub fn prior_enabled(&self) -> bool {
        self.fusion_dim.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(invalid("denoiser width must be >= 1"));
        }
        if self.fusion_dim == Some(0) {
            return Err(invalid("fusion latent width D must be >= 1"));
        }
        for &f in &self.spatial_factors {
            if f == 0 || self.tile.0 % f != 0 || self.tile.1 % f != 0 {
                return Err(invalid(format!(
                    "spatial factor {f} does not divide the tile {:?}",
                    self.tile
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    fn init<R: Rng>(rng: &mut R, input: usize, width: usize) -> Self {
        Self {
            w1: randn2(rng, (input, width), (1.0 / input.max(1) as f64).sqrt()),
            b1: Array1::zeros(width),
            w2: randn2(rng, (width, width), (1.0 / width as f64).sqrt()),
            b2: Array1::zeros(width),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpTape) {
        mlp_forward(x.view(), &self.w1, &self.b1, &self.w2, &self.b2)
    }

    fn backward(&self, x: &Array2<f64>, tape: &MlpTape, dy: &Array2<f64>, g: &mut Mlp) {
        mlp_backward(
            x.view(),
            tape,
            &self.w1,
            &self.w2,
            dy,
            &mut g.w1,
            &mut g.b1,
            &mut g.w2,
            &mut g.b2,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `(9·in, out)`, tap-major rows.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Conv {
    fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            w: randn2(rng, (9 * input, output), (1.0 / (9 * input) as f64).sqrt()),
            b: Array1::zeros(output),
        }
    }

    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((9 * input, output)),
            b: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

/// Every learnable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub f_surface: Mlp,
    pub f_aoi: Mlp,
    pub f_poi: Mlp,
    pub f_pop: Mlp,
    /// `(256, E)`: rows `0..128` project the temporal code, `128..256` the spatial one.
    pub pe_w: Array2<f64>,
    pub pe_b: Array1<f64>,
    /// One `(H_δ·W_δ, 128)` table per spatial factor.
    pub spe: Vec<(usize, Array2<f64>)>,
    pub step_w: Array2<f64>,
    pub step_b: Array1<f64>,
    pub conv_in: Conv,
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub conv_out: Conv,
    pub fusion: Option<FusionParams>,
}

fn randn2<R: Rng>(rng: &mut R, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng::normal(rng) * scale)
}

fn randn1<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng::normal(rng) * scale)
}


impl DenoiserParams {
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, streams::INIT);
        let e = config.width;
        let f_surface = Mlp::init(&mut r, config.surface_classes.saturating_sub(1), e);
        let f_aoi = Mlp::init(&mut r, config.aoi_classes.saturating_sub(1), e);
        let f_poi = Mlp::init(&mut r, config.poi_dim, e);
        let f_pop = Mlp::init(&mut r, 1, e);
        let pe_w = randn2(&mut r, (2 * PE_DIM, e), (1.0 / (2 * PE_DIM) as f64).sqrt());
        let mut spe = Vec::new();
        for &f in &config.spatial_factors {
            let cells = (config.tile.0 / f) * (config.tile.1 / f);
            spe.push((f, randn2(&mut r, (cells, PE_DIM), 0.02)));
        }
        let step_w = randn2(&mut r, (PE_DIM, e), (1.0 / PE_DIM as f64).sqrt());
        let conv_in = Conv::init(&mut r, 2, e);
        let conv_a = Conv::init(&mut r, e, e);
        let conv_b = Conv::init(&mut r, e, e);
        let conv_out = Conv::zeros(e, 1);
        let fusion = match config.fusion_dim {
            Some(d) => {
                let a_e = randn1(&mut r, d, 1.0);
                let a_p = randn1(&mut r, d, 1.0);
                Some(FusionParams::bypass(d, a_e, a_p)?)
            }
            None => None,
        };
        Ok(Self {
            f_surface,
            f_aoi,
            f_poi,
            f_pop,
            pe_w,
            pe_b: Array1::zeros(e),
            spe,
            step_w,
            step_b: Array1::zeros(e),
            conv_in,
            conv_a,
            conv_b,
            conv_out,
            fusion,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            f_surface: self.f_surface.zeros_like(),
            f_aoi: self.f_aoi.zeros_like(),
            f_poi: self.f_poi.zeros_like(),
            f_pop: self.f_pop.zeros_like(),
            pe_w: Array2::zeros(self.pe_w.dim()),
            pe_b: Array1::zeros(self.pe_b.len()),
            spe: self.spe.iter().map(|(f, t)| (*f, Array2::zeros(t.dim()))).collect(),
            step_w: Array2::zeros(self.step_w.dim()),
            step_b: Array1::zeros(self.step_b.len()),
            conv_in: self.conv_in.zeros_like(),
            conv_a: self.conv_a.zeros_like(),
            conv_b: self.conv_b.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
            fusion: self.fusion.as_ref().map(FusionParams::zeros_like),
        }
    }

    /// Named flat views of every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name.to_string(), $arr.as_slice().expect("standard layout")))
            };
        }
        for (n, m) in [
            ("f_surface", &self.f_surface),
            ("f_aoi", &self.f_aoi),
            ("f_poi", &self.f_poi),
            ("f_pop", &self.f_pop),
        ] {
            push!(format!("{n}.w1"), m.w1);
            push!(format!("{n}.b1"), m.b1);
            push!(format!("{n}.w2"), m.w2);
            push!(format!("{n}.b2"), m.b2);
        }
        push!("pe.w", self.pe_w);
        push!("pe.b", self.pe_b);
        for (f, t) in &self.spe {
            push!(format!("spe.s{f}"), t);
        }
        push!("step.w", self.step_w);
        push!("step.b", self.step_b);
        for (n, c) in [
            ("conv_in", &self.conv_in),
            ("conv_a", &self.conv_a),
            ("conv_b", &self.conv_b),
            ("conv_out", &self.conv_out),
        ] {
            push!(format!("{n}.w"), c.w);
            push!(format!("{n}.b"), c.b);
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.w_e".into(), std::slice::from_ref(&f.w_e)));
            out.push(("fusion.w_p".into(), std::slice::from_ref(&f.w_p)));
            push!("fusion.a_e", f.a_e);
            push!("fusion.b_e", f.b_e);
            push!("fusion.a_p", f.a_p);
            push!("fusion.b_p", f.b_p);
            push!("fusion.out", f.out);
            out.push(("fusion.b_out".into(), std::slice::from_ref(&f.b_out)));
        }
        out
    }

    /// Mutable counterpart of [`blocks`](Self::blocks), same order.
    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name.to_string(), $arr.as_slice_mut().expect("standard layout")))
            };
        }
        for (n, m) in [
            ("f_surface", &mut self.f_surface),
            ("f_aoi", &mut self.f_aoi),
            ("f_poi", &mut self.f_poi),
            ("f_pop", &mut self.f_pop),
        ] {
            push!(format!("{n}.w1"), m.w1);
            push!(format!("{n}.b1"), m.b1);
            push!(format!("{n}.w2"), m.w2);
            push!(format!("{n}.b2"), m.b2);
        }
        push!("pe.w", self.pe_w);
        push!("pe.b", self.pe_b);
        for (f, t) in &mut self.spe {
            push!(format!("spe.s{f}"), t);
        }
        push!("step.w", self.step_w);
        push!("step.b", self.step_b);
        for (n, c) in [
            ("conv_in", &mut self.conv_in),
            ("conv_a", &mut self.conv_a),
            ("conv_b", &mut self.conv_b),
            ("conv_out", &mut self.conv_out),
        ] {
            push!(format!("{n}.w"), c.w);
            push!(format!("{n}.b"), c.b);
        }
        if let Some(f) = &mut self.fusion {
            out.push(("fusion.w_e".into(), std::slice::from_mut(&mut f.w_e)));
            out.push(("fusion.w_p".into(), std::slice::from_mut(&mut f.w_p)));
            push!("fusion.a_e", f.a_e);
            push!("fusion.b_e", f.b_e);
            push!("fusion.a_p", f.a_p);
            push!("fusion.b_p", f.b_p);
            push!("fusion.out", f.out);
            out.push(("fusion.b_out".into(), std::slice::from_mut(&mut f.b_out)));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.iter()).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Per-sample encoded context at the finest tile resolution.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    /// `(T·H·W, E)` rows.
    pub latent: Array2<f64>,
    pub shape: LatentShape,
    inputs: ContextInputs,
    tapes: Option<[MlpTape; 4]>,
}

#[derive(Debug, Clone)]
struct ContextInputs {
    surface: Array2<f64>,
    aoi: Array2<f64>,
    poi: Array2<f64>,
    pop: Array2<f64>,
}

/// Stage-resolution condition: pooled context plus the encodings of that level.
#[derive(Debug, Clone)]
pub struct StageCondition {
    pub level: ResolutionLevel,
    pub shape: LatentShape,
    /// `(T_k·H_k·W_k, E)`
    pub context: Array2<f64>,
    /// `(T_k, 128)`, temporal code of each coarse step's first finest index.
    pub tpe: Array2<f64>,
}

/// One network evaluation request.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub x: &'a Array3<f64>,
    /// Coarser-level field aligned to `x`'s resolution, in the same units as `x`.
    pub prior_field: Option<&'a Array3<f64>>,
    /// Input noise level `m` fed to the step embedding.
    pub step: usize,
    /// Interior α of the input level.
    pub alpha: f64,
}

/// Recorded forward pass for [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    shape: MapShape,
    cols_in: Array2<f64>,
    z0: Array2<f64>,
    cols_a: Array2<f64>,
    z1: Array2<f64>,
    cols_b: Array2<f64>,
    z2: Array2<f64>,
    cols_out: Array2<f64>,
    step_code: Array2<f64>,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams,
}

fn dummy(classes: &ndarray::Array2<usize>, n: usize) -> Array2<f64> {
    let width = n.saturating_sub(1);
    let mut out = Array2::zeros((classes.len(), width));
    for (r, &c) in classes.iter().enumerate() {
        if c > 0 && c <= width {
            out[[r, c - 1]] = 1.0;
        }
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    fn spe_table(&self, factor: usize) -> Result<usize> {
        self.params
            .spe
            .iter()
            .position(|(f, _)| *f == factor)
            .ok_or_else(|| Error::MissingLevel(format!("spatial encoding for factor {factor}")))
    }

    /// Map the four context fields into one `E`-wide latent per finest cell.
    pub fn encode_uec(&self, ctx: &UrbanContext, record: bool) -> Result<EncodedContext> {
        let (h, w) = ctx.spatial_shape();
        if (h, w) != self.config.tile {
            return Err(invalid(format!(
                "context tile {h}x{w} does not match the network tile {:?}",
                self.config.tile
            )));
        }
        if ctx.poi_dim() != self.config.poi_dim {
            return Err(invalid("context POI width differs from the network's"));
        }
        let t = ctx.population.dim().0;
        let inputs = ContextInputs {
            surface: dummy(&ctx.surface, self.config.surface_classes),
            aoi: dummy(&ctx.aoi, self.config.aoi_classes),
            poi: ctx
                .poi
                .view()
                .into_shape_with_order((self.config.poi_dim, h * w))
                .map_err(|e| invalid(e.to_string()))?
                .t()
                .to_owned(),
            pop: ctx
                .population
                .view()
                .into_shape_with_order((t * h * w, 1))
                .map_err(|e| invalid(e.to_string()))?
                .to_owned(),
        };
        let p = &self.params;
        let (ys, ts) = p.f_surface.forward(&inputs.surface);
        let (ya, ta) = p.f_aoi.forward(&inputs.aoi);
        let (yp, tp) = p.f_poi.forward(&inputs.poi);
        let (yq, tq) = p.f_pop.forward(&inputs.pop);
        let stat = ys + ya + yp;
        let mut latent = yq;
        for ti in 0..t {
            let mut block = latent.slice_mut(s![ti * h * w..(ti + 1) * h * w, ..]);
            block += &stat;
        }
        Ok(EncodedContext {
            latent,
            shape: LatentShape { t, h, w },
            inputs,
            tapes: record.then_some([ts, ta, tp, tq]),
        })
    }

    /// Pool the encoded context to `level` and attach the level's encodings.
    pub fn condition(&self, enc: &EncodedContext, level: &ResolutionLevel) -> Result<StageCondition> {
        let (context, shape) = pool_mean(&enc.latent, enc.shape, level.temporal, level.spatial)?;
        let tpe = if self.config.use_tpe {
            tpe_rows((0..shape.t).map(|t| (t * level.temporal) as f64))
        } else {
            Array2::zeros((shape.t, PE_DIM))
        };
        Ok(StageCondition {
            level: level.clone(),
            shape,
            context,
            tpe,
        })
    }

    /// Backward through [`condition`](Self::condition) and
    /// [`encode_uec`](Self::encode_uec) for one stage-level context gradient.
    pub fn context_backward(
        &self,
        enc: &EncodedContext,
        level: &ResolutionLevel,
        d_context: &Array2<f64>,
        grads: &mut DenoiserParams,
    ) -> Result<()> {
        let tapes = enc
            .tapes
            .as_ref()
            .ok_or_else(|| invalid("context was encoded without recording"))?;
        let d_fine = unpool_mean(d_context, enc.shape, level.temporal, level.spatial);
        let hw = enc.shape.h * enc.shape.w;
        let mut d_stat = Array2::<f64>::zeros((hw, self.config.width));
        for ti in 0..enc.shape.t {
            d_stat += &d_fine.slice(s![ti * hw..(ti + 1) * hw, ..]);
        }
        let p = &self.params;
        p.f_surface
            .backward(&enc.inputs.surface, &tapes[0], &d_stat, &mut grads.f_surface);
        p.f_aoi.backward(&enc.inputs.aoi, &tapes[1], &d_stat, &mut grads.f_aoi);
        p.f_poi.backward(&enc.inputs.poi, &tapes[2], &d_stat, &mut grads.f_poi);
        p.f_pop.backward(&enc.inputs.pop, &tapes[3], &d_fine, &mut grads.f_pop);
        Ok(())
    }

    fn check_input(&self, input: &NetInput, cond: &StageCondition) -> Result<MapShape> {
        let (t, h, w) = input.x.dim();
        if (t, h, w) != (cond.shape.t, cond.shape.h, cond.shape.w) {
            return Err(Error::ShapeMismatch {
                left: input.x.shape().to_vec(),
                right: vec![cond.shape.t, cond.shape.h, cond.shape.w],
            });
        }
        if let Some(pf) = input.prior_field {
            if pf.dim() != (t, h, w) {
                return Err(Error::ShapeMismatch {
                    left: pf.shape().to_vec(),
                    right: vec![t, h, w],
                });
            }
        }
        Ok(MapShape {
            batch: t,
            height: h,
            width: w,
        })
    }

    /// Positional term `(rows, E)` for the stage.
    fn positional(&self, cond: &StageCondition) -> Result<Array2<f64>> {
        let e = self.config.width;
        let sh = cond.shape;
        let mut pe = Array2::<f64>::zeros((sh.rows(), e));
        if !self.config.use_tpe && !self.config.use_spe {
            return Ok(pe);
        }
        let w_t = self.params.pe_w.slice(s![..PE_DIM, ..]);
        let w_s = self.params.pe_w.slice(s![PE_DIM.., ..]);
        let time = cond.tpe.dot(&w_t);
        let space = if self.config.use_spe {
            let idx = self.spe_table(cond.level.spatial)?;
            self.params.spe[idx].1.dot(&w_s)
        } else {
            Array2::zeros((sh.h * sh.w, e))
        };
        let hw = sh.h * sh.w;
        for t in 0..sh.t {
            let mut block = pe.slice_mut(s![t * hw..(t + 1) * hw, ..]);
            block += &space;
            block += &time.row(t);
            block += &self.params.pe_b;
        }
        Ok(pe)
    }

    /// Estimate the residual noise. Returns the estimate and, when asked, a tape.
    pub fn forward(&self, input: &NetInput, cond: &StageCondition, record: bool) -> Result<(Array3<f64>, Option<Tape>)> {
        let shape = self.check_input(input, cond)?;
        let rows = shape.rows();
        let mut inp = Array2::<f64>::zeros((rows, 2));
        inp.column_mut(0).assign(&Array1::from_iter(input.x.iter().cloned()));
        if let Some(pf) = input.prior_field {
            inp.column_mut(1).assign(&Array1::from_iter(pf.iter().cloned()));
        }
        let p = &self.params;
        let cols_in = im2col(&inp, shape);
        let mut z0 = linear(cols_in.view(), &p.conv_in.w, &p.conv_in.b);
        z0 += &cond.context;
        z0 += &self.positional(cond)?;
        let step_code = tpe(input.step as f64).insert_axis(NdAxis(0));
        let step = linear(step_code.view(), &p.step_w, &p.step_b);
        z0 += &step.row(0);
        let a0 = silu_array(&z0);
        let cols_a = im2col(&a0, shape);
        let z1 = linear(cols_a.view(), &p.conv_a.w, &p.conv_a.b);
        let a1 = silu_array(&z1);
        let cols_b = im2col(&a1, shape);
        let z2 = linear(cols_b.view(), &p.conv_b.w, &p.conv_b.b);
        let a2 = silu_array(&z2);
        let cols_out = im2col(&a2, shape);
        let raw = linear(cols_out.view(), &p.conv_out.w, &p.conv_out.b);
        let raw = raw
            .into_shape_with_order(input.x.dim())
            .map_err(|e| invalid(e.to_string()))?;
        let out = match self.config.output {
            OutputMode::Noise => raw,
            OutputMode::Data => {
                let a = input.alpha;
                let mut clean = raw;
                if let Some(pf) = input.prior_field {
                    let skip = 1.0 + self.config.prior_sign.factor();
                    clean.scaled_add(skip, pf);
                }
                (input.x - &(clean * a.sqrt())) / (1.0 - a).sqrt()
            }
        };
        let tape = record.then(|| Tape {
            shape,
            cols_in,
            z0,
            cols_a,
            z1,
            cols_b,
            z2,
            cols_out,
            step_code,
            alpha: input.alpha,
        });
        Ok((out, tape))
    }

    /// Backward from `d_out` (gradient w.r.t. the returned estimate).
    /// Accumulates parameter gradients and returns the stage-context gradient.
    pub fn backward(
        &self,
        tape: &Tape,
        cond: &StageCondition,
        d_out: &Array3<f64>,
        grads: &mut DenoiserParams,
    ) -> Result<Array2<f64>> {
        let p = &self.params;
        let e = self.config.width;
        let rows = tape.shape.rows();
        let scale = match self.config.output {
            OutputMode::Noise => 1.0,
            OutputMode::Data => -tape.alpha.sqrt() / (1.0 - tape.alpha).sqrt(),
        };
        let d_raw = Array2::from_shape_vec((rows, 1), d_out.iter().map(|v| v * scale).collect())
            .map_err(|err| invalid(err.to_string()))?;
        let d_a2 = linear_backward(
            tape.cols_out.view(),
            &p.conv_out.w,
            &d_raw,
            &mut grads.conv_out.w,
            &mut grads.conv_out.b,
        );
        let d_a2 = col2im(&d_a2, tape.shape, e);
        let d_z2 = silu_backward(&tape.z2, &d_a2);
        let d_a1 = linear_backward(tape.cols_b.view(), &p.conv_b.w, &d_z2, &mut grads.conv_b.w, &mut grads.conv_b.b);
        let d_a1 = col2im(&d_a1, tape.shape, e);
        let d_z1 = silu_backward(&tape.z1, &d_a1);
        let d_a0 = linear_backward(tape.cols_a.view(), &p.conv_a.w, &d_z1, &mut grads.conv_a.w, &mut grads.conv_a.b);
        let d_a0 = col2im(&d_a0, tape.shape, e);
        let d_z0 = silu_backward(&tape.z0, &d_a0);

        // conv_in: the input gradient is not needed.
        grads.conv_in.w += &tape.cols_in.t().dot(&d_z0);
        grads.conv_in.b += &d_z0.sum_axis(NdAxis(0));

        let d_step = d_z0.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
        grads.step_w += &tape.step_code.t().dot(&d_step);
        grads.step_b += &d_step.row(0);

        if self.config.use_tpe || self.config.use_spe {
            let sh = cond.shape;
            let hw = sh.h * sh.w;
            grads.pe_b += &d_z0.sum_axis(NdAxis(0));
            if self.config.use_tpe {
                let mut d_time = Array2::<f64>::zeros((sh.t, e));
                for t in 0..sh.t {
                    d_time
                        .row_mut(t)
                        .assign(&d_z0.slice(s![t * hw..(t + 1) * hw, ..]).sum_axis(NdAxis(0)));
                }
                let mut gw = grads.pe_w.slice_mut(s![..PE_DIM, ..]);
                gw += &cond.tpe.t().dot(&d_time);
            }
            if self.config.use_spe {
                let mut d_space = Array2::<f64>::zeros((hw, e));
                for t in 0..sh.t {
                    d_space += &d_z0.slice(s![t * hw..(t + 1) * hw, ..]);
                }
                let idx = self.spe_table(cond.level.spatial)?;
                let table = &p.spe[idx].1;
                let w_s = p.pe_w.slice(s![PE_DIM.., ..]);
                {
                    let mut gw = grads.pe_w.slice_mut(s![PE_DIM.., ..]);
                    gw += &table.t().dot(&d_space);
                }
                grads.spe[idx].1 += &d_space.dot(&w_s.t());
            }
        }
        Ok(d_z0)
    }

    /// Fuse an estimate with prior noise using the learned fusion, or add it
    /// directly when the prior pathway is disabled.
    pub fn fuse(&self, eps: &Array3<f64>, prior: &PriorNoise) -> Result<Array3<f64>> {
        match &self.params.fusion {
            Some(f) => fuse_noise(eps, prior, f),
            None => Ok(eps.clone()),
        }
    }

    pub fn fuse_backward(
        &self,
        eps: &Array3<f64>,
        prior: &PriorNoise,
        upstream: &Array3<f64>,
        grads: &mut DenoiserParams,
    ) -> Array3<f64> {
        match (&self.params.fusion, &mut grads.fusion) {
            (Some(f), Some(g)) => fuse_noise_backward(eps, prior, f, upstream, g),
            _ => upstream.clone(),
        }
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "config": self.config,
            "parameter_count": self.params.parameter_count(),
        });
        let mut b = TensorBundle::with_meta(meta);
        for (name, data) in self.params.blocks() {
            let arr = ArrayD::from_shape_vec(vec![data.len()], data.iter().map(|&v| v as f32).collect())
                .expect("1-D shape");
            b.insert(name, arr);
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_value(b.meta["config"].clone())
            .map_err(|e| invalid(format!("checkpoint config: {e}")))?;
        let mut params = DenoiserParams::init(&config, 0)?;
        for (name, slot) in params.blocks_mut() {
            let t = b.get(&name)?;
            if t.len() != slot.len() {
                return Err(invalid(format!(
                    "checkpoint block {name} holds {} values, expected {}",
                    t.len(),
                    slot.len()
                )));
            }
            for (dst, src) in slot.iter_mut().zip(t.iter()) {
                *dst = f64::from(*src);
            }
        }
        Ok(Self { config, params })
    }

    /// Round every parameter through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for (_, b) in self.params.blocks_mut() {
            b.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::{generate_city, tiles, CityConfig};

    pub(crate) fn fixture_config() -> DenoiserConfig {
        DenoiserConfig {
            width: 6,
            fusion_dim: Some(3),
            surface_classes: 4,
            aoi_classes: 4,
            poi_dim: 4,
            tile: (4, 4),
            spatial_factors: vec![2, 1],
            use_tpe: true,
            use_spe: true,
            output: OutputMode::Noise,
            prior_sign: PriorSign::Eq11,
        }
    }

    fn tile() -> crate::synth::Tile {
        let cfg = CityConfig {
            h_fine: 8,
            w_fine: 8,
            t_fine: 4,
            ladder: vec![ResolutionLevel::new(2, 2), ResolutionLevel::finest()],
            aoi_rects: 2,
            ..CityConfig::default()
        };
        let city = generate_city(&cfg, 5).unwrap();
        tiles(&city, 4).unwrap().remove(0)
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let net = Denoiser::new(fixture_config(), 1).unwrap();
        let t = tile();
        let enc = net.encode_uec(&t.context, false).unwrap();
        let cond = net.condition(&enc, &ResolutionLevel::finest()).unwrap();
        let x = Array3::from_shape_fn((4, 4, 4), |(a, b, c)| (a + b * c) as f64 * 0.1);
        let input = NetInput {
            x: &x,
            prior_field: None,
            step: 7,
            alpha: 0.5,
        };
        let (out, _) = net.forward(&input, &cond, false).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let (again, _) = net.forward(&input, &cond, false).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zero_context_encodes_to_zero() {
        let net = Denoiser::new(fixture_config(), 1).unwrap();
        let mut t = tile();
        t.context.surface.fill(0);
        t.context.aoi.fill(0);
        t.context.poi.fill(0.0);
        t.context.population.fill(0.0);
        let enc = net.encode_uec(&t.context, false).unwrap();
        assert!(enc.latent.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn population_only_changes_its_summand() {
        let net = Denoiser::new(fixture_config(), 1).unwrap();
        let t = tile();
        let mut t2 = t.clone();
        t2.context.population.mapv_inplace(|v| v * 1.7 + 0.2);
        let a = net.encode_uec(&t.context, false).unwrap();
        let b = net.encode_uec(&t2.context, false).unwrap();
        let pop_a = net.params.f_pop.forward(&a.inputs.pop).0;
        let pop_b = net.params.f_pop.forward(&b.inputs.pop).0;
        let diff = &b.latent - &a.latent;
        let expect = &pop_b - &pop_a;
        for (u, v) in diff.iter().zip(expect.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_per_level() {
        let mut net = Denoiser::new(fixture_config(), 1).unwrap();
        net.params.conv_out.w.fill(0.01);
        let t = tile();
        let enc = net.encode_uec(&t.context, false).unwrap();
        for level in [ResolutionLevel::new(2, 2), ResolutionLevel::new(2, 1), ResolutionLevel::finest()] {
            let cond = net.condition(&enc, &level).unwrap();
            let shape = (cond.shape.t, cond.shape.h, cond.shape.w);
            let x = Array3::ones(shape);
            let input = NetInput {
                x: &x,
                prior_field: Some(&x),
                step: 3,
                alpha: 0.3,
            };
            let (out, _) = net.forward(&input, &cond, false).unwrap();
            assert_eq!(out.dim(), shape);
        }
    }

    #[test]
    fn receptive_field_is_local() {
        let mut cfg = fixture_config();
        cfg.tile = (4, 4);
        let mut net = Denoiser::new(cfg, 2).unwrap();
        net.params.conv_out.w.fill(0.05);
        let t = tile();
        let enc = net.encode_uec(&t.context, false).unwrap();
        let cond = net.condition(&enc, &ResolutionLevel::finest()).unwrap();
        let x = Array3::zeros((4, 4, 4));
        let mut y = x.clone();
        y[[1, 0, 0]] = 1.0;
        let run = |v: &Array3<f64>| {
            net.forward(
                &NetInput {
                    x: v,
                    prior_field: None,
                    step: 1,
                    alpha: 0.5,
                },
                &cond,
                false,
            )
            .unwrap()
            .0
        };
        let d = run(&y) - run(&x);
        for ((ti, _, _), v) in d.indexed_iter() {
            if ti != 1 {
                assert_eq!(*v, 0.0, "time steps are independent");
            }
        }
        assert!(d[[1, 3, 3]].abs() > 0.0, "four 3x3 layers reach 4 cells away");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = Denoiser::new(fixture_config(), 3).unwrap();
        net.round_to_f32();
        let back = Denoiser::from_bundle(&net.to_bundle()).unwrap();
        assert_eq!(back, net);
        assert!(net.params.parameter_count() > 0);
    }
}
