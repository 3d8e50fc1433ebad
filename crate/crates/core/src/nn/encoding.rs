//! Sinusoidal encodings and block pooling of per-cell latent maps.

use ndarray::{Array1, Array2};

use crate::error::{Axis, Error, Result};

pub const PE_DIM: usize = 128;

/// Interleaved `[sin(t/10000^(2i/128)), cos(t/10000^(2i/128))]` for `i = 0..63`.
pub fn tpe(t: f64) -> Array1<f64> {
    let mut out = Array1::zeros(PE_DIM);
    for i in 0..PE_DIM / 2 {
        let a = t / 10000f64.powf(2.0 * i as f64 / PE_DIM as f64);
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

pub fn tpe_rows(ts: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = ts.into_iter().map(tpe).collect();
    let mut out = Array2::zeros((rows.len(), PE_DIM));
    for (r, v) in rows.iter().enumerate() {
        out.row_mut(r).assign(v);
    }
    out
}

/// Shape of a latent map stored as `(t·h·w, channels)` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentShape {
    pub fn rows(&self) -> usize {
        self.t * self.h * self.w
    }
    pub fn row(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

/// Block mean over `ft x fs x fs` cells.
pub fn pool_mean(x: &Array2<f64>, shape: LatentShape, ft: usize, fs: usize) -> Result<(Array2<f64>, LatentShape)> {
    for (axis, extent, f) in [(Axis::Time, shape.t, ft), (Axis::Height, shape.h, fs), (Axis::Width, shape.w, fs)] {
        if f == 0 || extent % f != 0 {
            return Err(Error::NotDivisible { axis, extent, factor: f });
        }
    }
    let out_shape = LatentShape {
        t: shape.t / ft,
        h: shape.h / fs,
        w: shape.w / fs,
    };
    let c = x.ncols();
    let mut out = Array2::<f64>::zeros((out_shape.rows(), c));
    for t in 0..shape.t {
        for h in 0..shape.h {
            for w in 0..shape.w {
                let dst = out_shape.row(t / ft, h / fs, w / fs);
                let mut d = out.row_mut(dst);
                d += &x.row(shape.row(t, h, w));
            }
        }
    }
    out /= (ft * fs * fs) as f64;
    Ok((out, out_shape))
}

/// Adjoint of [`pool_mean`]: spread each coarse gradient evenly over its block.
pub fn unpool_mean(dy: &Array2<f64>, fine: LatentShape, ft: usize, fs: usize) -> Array2<f64> {
    let coarse = LatentShape {
        t: fine.t / ft,
        h: fine.h / fs,
        w: fine.w / fs,
    };
    let scale = 1.0 / (ft * fs * fs) as f64;
    let mut out = Array2::<f64>::zeros((fine.rows(), dy.ncols()));
    for t in 0..fine.t {
        for h in 0..fine.h {
            for w in 0..fine.w {
                let src = dy.row(coarse.row(t / ft, h / fs, w / fs));
                out.row_mut(fine.row(t, h, w)).assign(&(&src * scale));
            }
        }
    }
    out
}
