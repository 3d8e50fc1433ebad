//! Dense kernels with hand-written backward passes. Activations are stored
//! channels-last as `(rows, channels)` matrices; spatial layers view the rows
//! as `(batch, height, width)` in row-major order.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn silu_array(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(silu)
}

/// Multiply `upstream` by silu'(z) element-wise.
pub fn silu_backward(z: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    out.zip_mut_with(z, |g, &zv| *g *= silu_grad(zv));
    out
}

/// `x · w + b` over rows.
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Gradients of [`linear`]: accumulates into `dw`, `db`, returns `dx`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

/// Rows of `Linear → SiLU → Linear`.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub z: Array2<f64>,
    pub a: Array2<f64>,
}

pub fn mlp_forward(
    x: ArrayView2<f64>,
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
) -> (Array2<f64>, MlpTape) {
    let z = linear(x, w1, b1);
    let a = silu_array(&z);
    let y = linear(a.view(), w2, b2);
    (y, MlpTape { z, a })
}

#[allow(clippy::too_many_arguments)]
pub fn mlp_backward(
    x: ArrayView2<f64>,
    tape: &MlpTape,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    dy: &Array2<f64>,
    dw1: &mut Array2<f64>,
    db1: &mut Array1<f64>,
    dw2: &mut Array2<f64>,
    db2: &mut Array1<f64>,
) {
    let da = linear_backward(tape.a.view(), w2, dy, dw2, db2);
    let dz = silu_backward(&tape.z, &da);
    linear_backward(x, w1, &dz, dw1, db1);
}

/// Geometry of a batch of 2-D feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// 3x3, zero-padded patches: `(rows, 9·channels)` with tap-major columns.
pub fn im2col(x: &Array2<f64>, shape: MapShape) -> Array2<f64> {
    let c = x.ncols();
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut cols = Array2::<f64>::zeros((shape.rows(), 9 * c));
    for b in 0..shape.batch {
        for i in 0..h {
            for j in 0..w {
                let row = (b * shape.height * shape.width) as isize + i * w + j;
                let mut dst = cols.row_mut(row as usize);
                for (tap, (di, dj)) in TAPS.iter().enumerate() {
                    let (si, sj) = (i + di, j + dj);
                    if si < 0 || sj < 0 || si >= h || sj >= w {
                        continue;
                    }
                    let src = (b * shape.height * shape.width) as isize + si * w + sj;
                    dst.slice_mut(s![tap * c..(tap + 1) * c])
                        .assign(&x.row(src as usize));
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the map.
pub fn col2im(dcols: &Array2<f64>, shape: MapShape, channels: usize) -> Array2<f64> {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut dx = Array2::<f64>::zeros((shape.rows(), channels));
    for b in 0..shape.batch {
        for i in 0..h {
            for j in 0..w {
                let row = (b * shape.height * shape.width) as isize + i * w + j;
                let src = dcols.row(row as usize);
                for (tap, (di, dj)) in TAPS.iter().enumerate() {
                    let (si, sj) = (i + di, j + dj);
                    if si < 0 || sj < 0 || si >= h || sj >= w {
                        continue;
                    }
                    let dst = (b * shape.height * shape.width) as isize + si * w + sj;
                    let mut d = dx.row_mut(dst as usize);
                    d += &src.slice(s![tap * channels..(tap + 1) * channels]);
                }
            }
        }
    }
    dx
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn silu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_closed_form_gradient() {
        // loss = (w·x − y)², dL/dw = 2 (w·x − y) x
        let x = array![[1.5, -2.0]];
        let w = array![[0.3], [0.1]];
        let b = array![0.0];
        let y = 0.7;
        let out = linear(x.view(), &w, &b);
        let r = out[[0, 0]] - y;
        let mut dw = Array2::zeros((2, 1));
        let mut db = Array1::zeros(1);
        linear_backward(x.view(), &w, &array![[2.0 * r]], &mut dw, &mut db);
        assert!((dw[[0, 0]] - 2.0 * r * 1.5).abs() < 1e-15);
        assert!((dw[[1, 0]] - 2.0 * r * -2.0).abs() < 1e-15);
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let shape = MapShape { batch: 2, height: 3, width: 4 };
        let x = Array2::from_shape_fn((shape.rows(), 2), |(r, c)| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let y = Array2::from_shape_fn((shape.rows(), 18), |(r, c)| ((r * 5 + c) % 13) as f64 - 6.0);
        let lhs: f64 = (&im2col(&x, shape) * &y).sum();
        let rhs: f64 = (&x * &col2im(&y, shape, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn centre_tap_is_identity() {
        let shape = MapShape { batch: 1, height: 2, width: 2 };
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let cols = im2col(&x, shape);
        assert_eq!(cols.column(4).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cols.row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }
}
