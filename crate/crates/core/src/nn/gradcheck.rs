//! Central finite-difference check of analytic gradients, block by block.

use serde::Serialize;

use crate::error::Result;
use crate::nn::denoiser::DenoiserParams;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect()
    }

    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error of one entry. The denominator is floored at a small
/// fraction of the block's largest gradient so that entries that are zero
/// up to rounding do not dominate.
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare `grad(params)` against central differences of `loss(params)`.
///
/// Blocks with no entries pass vacuously.
pub fn grad_check<L, G>(
    params: &DenoiserParams,
    mut loss: L,
    mut grad: G,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&DenoiserParams) -> Result<f64>,
    G: FnMut(&DenoiserParams) -> Result<DenoiserParams>,
{
    let analytic = grad(params)?;
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    let names: Vec<(String, usize)> = params.blocks().into_iter().map(|(n, b)| (n, b.len())).collect();
    for (bi, (name, size)) in names.into_iter().enumerate() {
        let a_block: Vec<f64> = analytic.blocks()[bi].1.to_vec();
        let mut numeric = vec![0.0; size];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.blocks()[bi].1[i];
            probe.blocks_mut()[bi].1[i] = orig + step;
            let up = loss(&probe)?;
            probe.blocks_mut()[bi].1[i] = orig - step;
            let down = loss(&probe)?;
            probe.blocks_mut()[bi].1[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let scale = a_block
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (scale * 1e-3).max(1e-10);
        let max_rel_error = a_block
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_error(a, n, floor))
            .fold(0.0f64, f64::max);
        blocks.push(BlockCheck {
            name,
            size,
            max_rel_error,
            passed: max_rel_error <= tolerance,
        });
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        blocks,
    })
}
