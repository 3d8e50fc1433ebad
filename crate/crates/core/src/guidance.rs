//! Prior noise derived from the adjacent coarser level, the residual-noise
//! decomposition it rests on, and the learned fusion of predicted and prior noise.

use ndarray::{Array1, Array3, Zip};

use crate::error::{invalid, Result};
use crate::grid::{ensure_same_shape, upsample_array, Replication, ResolutionLevel, SpatioTemporalGrid};
use crate::nn::layers::{silu, silu_grad};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorNoise {
    pub tensor: Array3<f64>,
    /// Stage index of the coarse level the prior came from (`k − 1`); 0 when absent.
    pub source_level: usize,
    pub alpha_used: f64,
}

impl PriorNoise {
    pub fn zeros(shape: (usize, usize, usize), alpha: f64) -> Self {
        Self {
            tensor: Array3::zeros(shape),
            source_level: 0,
            alpha_used: alpha,
        }
    }
}

/// Ratio `sqrt(α) / sqrt(1 − α)` that scales a clean field into noise units.
pub fn prior_ratio(alpha: f64) -> f64 {
    alpha.sqrt() / (1.0 - alpha).sqrt()
}

/// Align `coarse` onto `target`'s resolution by block replication.
pub fn align(coarse: &SpatioTemporalGrid, target: &ResolutionLevel, mode: Replication) -> Result<Array3<f64>> {
    let c = &coarse.level;
    if c.spatial % target.spatial != 0 || c.temporal % target.temporal != 0 {
        return Err(invalid(format!(
            "prior level {} cannot be aligned to {}",
            c.label, target.label
        )));
    }
    Ok(upsample_array(
        &coarse.data,
        c.temporal / target.temporal,
        c.spatial / target.spatial,
        mode,
    ))
}

/// Prior noise for stage `k` from the coarser level `coarse_prev`.
///
/// Zero for `k = 1`; otherwise `sqrt(α)/sqrt(1−α)` times the coarse field
/// replicated onto `target_level`. `target_shape` is checked after alignment.
pub fn prior_noise(
    coarse_prev: &SpatioTemporalGrid,
    alpha: f64,
    k: usize,
    target_level: &ResolutionLevel,
    target_shape: (usize, usize, usize),
    mode: Replication,
) -> Result<PriorNoise> {
    if k <= 1 {
        return Ok(PriorNoise::zeros(target_shape, alpha));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("prior noise needs α in (0, 1), got {alpha}")));
    }
    let aligned = align(coarse_prev, target_level, mode)?;
    if aligned.dim() != target_shape {
        return Err(crate::error::Error::ShapeMismatch {
            left: aligned.shape().to_vec(),
            right: vec![target_shape.0, target_shape.1, target_shape.2],
        });
    }
    let r = prior_ratio(alpha);
    Ok(PriorNoise {
        tensor: aligned * r,
        source_level: k - 1,
        alpha_used: alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition {
    pub delta_x0: Array3<f64>,
    pub prior_component: Array3<f64>,
    pub delta_eps: Array3<f64>,
    pub hat_eps: Array3<f64>,
}

impl ResidualDecomposition {
    /// Noisy state written with the full data and the plain noise.
    pub fn state_direct(&self, alpha: f64, eps: &Array3<f64>) -> Array3<f64> {
        let x0 = &self.delta_x0 + &self.prior_component;
        x0 * alpha.sqrt() + eps * (1.0 - alpha).sqrt()
    }

    /// The same state written with the residual data and the residual noise.
    pub fn state_residual(&self, alpha: f64) -> Array3<f64> {
        &self.delta_x0 * alpha.sqrt() + &self.delta_eps * (1.0 - alpha).sqrt()
    }

    pub fn reconstructed_eps(&self) -> Array3<f64> {
        &self.delta_eps - &self.hat_eps
    }
}

pub fn residual_decompose(
    x0: &Array3<f64>,
    prior_component: &Array3<f64>,
    alpha: f64,
    eps: &Array3<f64>,
) -> Result<ResidualDecomposition> {
    ensure_same_shape(x0, prior_component)?;
    ensure_same_shape(x0, eps)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("decomposition needs α in (0, 1), got {alpha}")));
    }
    let hat_eps = prior_component * prior_ratio(alpha);
    Ok(ResidualDecomposition {
        delta_x0: x0 - prior_component,
        prior_component: prior_component.clone(),
        delta_eps: eps + &hat_eps,
        hat_eps,
    })
}

/// Per-cell fusion of predicted noise `e` and prior noise `p`:
///
/// ```text
/// out = w_e·e + w_p·p + (B·[silu(a_e·c·e + b_e); silu(a_p·c·p + b_p)] + b_out) / c
/// ```
///
/// where `c = sqrt(1 − α)` brings both inputs back to data units before the
/// latent projections, so the latent path sees `O(1)` values at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_e: f64,
    pub w_p: f64,
    pub a_e: Array1<f64>,
    pub b_e: Array1<f64>,
    pub a_p: Array1<f64>,
    pub b_p: Array1<f64>,
    /// Output projection of the `2D` concatenated latent.
    pub out: Array1<f64>,
    pub b_out: f64,
}

impl FusionParams {
    /// Identity-bypass initialisation: the output equals `e + p` exactly.
    pub fn bypass(d: usize, a_e: Array1<f64>, a_p: Array1<f64>) -> Result<Self> {
        if d == 0 || a_e.len() != d || a_p.len() != d {
            return Err(invalid(format!("fusion latent width must be >= 1 and consistent, got {d}")));
        }
        Ok(Self {
            w_e: 1.0,
            w_p: 1.0,
            a_e,
            b_e: Array1::zeros(d),
            a_p,
            b_p: Array1::zeros(d),
            out: Array1::zeros(2 * d),
            b_out: 0.0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.a_e.len()
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.latent_dim();
        Self {
            w_e: 0.0,
            w_p: 0.0,
            a_e: Array1::zeros(d),
            b_e: Array1::zeros(d),
            a_p: Array1::zeros(d),
            b_p: Array1::zeros(d),
            out: Array1::zeros(2 * d),
            b_out: 0.0,
        }
    }
}

fn latent_scale(alpha: f64) -> f64 {
    (1.0 - alpha).max(1e-8).sqrt()
}

fn cell_forward(f: &FusionParams, e: f64, p: f64, c: f64) -> f64 {
    let d = f.latent_dim();
    let mut acc = f.b_out;
    for j in 0..d {
        acc += f.out[j] * silu(f.a_e[j] * c * e + f.b_e[j]);
        acc += f.out[d + j] * silu(f.a_p[j] * c * p + f.b_p[j]);
    }
    f.w_e * e + f.w_p * p + acc / c
}

pub fn fuse_noise(eps_pred: &Array3<f64>, prior: &PriorNoise, params: &FusionParams) -> Result<Array3<f64>> {
    ensure_same_shape(eps_pred, &prior.tensor)?;
    let c = latent_scale(prior.alpha_used);
    let mut out = Array3::zeros(eps_pred.dim());
    Zip::from(&mut out)
        .and(eps_pred)
        .and(&prior.tensor)
        .for_each(|o, &e, &p| *o = cell_forward(params, e, p, c));
    Ok(out)
}

/// Backward pass of [`fuse_noise`]: accumulates parameter gradients into
/// `grads` and returns the gradient with respect to `eps_pred`.
pub fn fuse_noise_backward(
    eps_pred: &Array3<f64>,
    prior: &PriorNoise,
    params: &FusionParams,
    upstream: &Array3<f64>,
    grads: &mut FusionParams,
) -> Array3<f64> {
    let d = params.latent_dim();
    let c = latent_scale(prior.alpha_used);
    let mut d_e = Array3::zeros(eps_pred.dim());
    Zip::from(&mut d_e)
        .and(eps_pred)
        .and(&prior.tensor)
        .and(upstream)
        .for_each(|de, &e, &p, &g| {
            grads.w_e += g * e;
            grads.w_p += g * p;
            let gl = g / c;
            grads.b_out += gl;
            let mut acc = params.w_e * g;
            for j in 0..d {
                let ze = params.a_e[j] * c * e + params.b_e[j];
                let zp = params.a_p[j] * c * p + params.b_p[j];
                grads.out[j] += gl * silu(ze);
                grads.out[d + j] += gl * silu(zp);
                let ge = gl * params.out[j] * silu_grad(ze);
                let gp = gl * params.out[d + j] * silu_grad(zp);
                grads.a_e[j] += ge * c * e;
                grads.b_e[j] += ge;
                grads.a_p[j] += gp * c * p;
                grads.b_p[j] += gp;
                acc += ge * params.a_e[j] * c;
            }
            *de = acc;
        });
    d_e
}
