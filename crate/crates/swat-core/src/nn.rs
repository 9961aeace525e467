//! Small neural-network building blocks with hand-written backward passes.
//!
//! Everything is `f64` and single-threaded on purpose: runs stay bit-for-bit
//! reproducible and analytic gradients can be validated against central
//! finite differences (see the gradient-check tests at the bottom).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ImageTensor;
use crate::rng::ChaCha8Rng;

/// Fully connected layer; `w` is `[out, in]`, inputs are `[batch, in]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dx: Array2<f64>,
}

impl Linear {
    /// He-initialized weights: `N(0, 2/in_dim)`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Linear { w, b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `y = x wᵀ + b` for a `[batch, in]` input.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Gradients given the input that produced the output and `dL/dy`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> LinearGrads {
        LinearGrads { dw: dy.t().dot(x), db: dy.sum_axis(Axis(0)), dx: dy.dot(&self.w) }
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward through ReLU given the *pre-activation* values.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
/// Weights are laid out `[out_c][in_c][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug, Clone)]
pub struct Conv3x3Grads {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dx: ImageTensor,
}

impl Conv3x3 {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_c * 9) as f64).sqrt();
        let w = (0..out_c * in_c * 9)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Conv3x3 { w, b: vec![0.0; out_c], in_c, out_c }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * 3 + ky) * 3 + kx
    }

    pub fn forward(&self, x: &ImageTensor) -> ImageTensor {
        assert_eq!(x.channels, self.in_c, "conv input channels");
        let (h, w) = (x.height, x.width);
        let mut out = ImageTensor::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            for y in 0..h {
                for xq in 0..w {
                    let mut acc = self.b[o];
                    for i in 0..self.in_c {
                        for ky in 0..3 {
                            let yy = y as i64 + ky as i64 - 1;
                            if yy < 0 || yy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = xq as i64 + kx as i64 - 1;
                                if xx < 0 || xx >= w as i64 {
                                    continue;
                                }
                                acc += self.w[self.widx(o, i, ky, kx)]
                                    * x.data[x.idx(i, yy as usize, xx as usize)];
                            }
                        }
                    }
                    let oi = out.idx(o, y, xq);
                    out.data[oi] = acc;
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &ImageTensor, dout: &ImageTensor) -> Conv3x3Grads {
        let (h, w) = (x.height, x.width);
        let mut dw = vec![0.0; self.w.len()];
        let mut db = vec![0.0; self.out_c];
        let mut dx = ImageTensor::zeros(self.in_c, h, w);
        for o in 0..self.out_c {
            for y in 0..h {
                for xq in 0..w {
                    let g = dout.data[dout.idx(o, y, xq)];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for i in 0..self.in_c {
                        for ky in 0..3 {
                            let yy = y as i64 + ky as i64 - 1;
                            if yy < 0 || yy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = xq as i64 + kx as i64 - 1;
                                if xx < 0 || xx >= w as i64 {
                                    continue;
                                }
                                let xi = x.idx(i, yy as usize, xx as usize);
                                dw[self.widx(o, i, ky, kx)] += g * x.data[xi];
                                dx.data[xi] += g * self.w[self.widx(o, i, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
        Conv3x3Grads { dw, db, dx }
    }
}

/// 2x2 average pooling, stride 2; odd trailing rows/columns are cropped.
pub fn avg_pool2(x: &ImageTensor) -> ImageTensor {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = ImageTensor::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for y in 0..oh {
            for xq in 0..ow {
                let s = x.data[x.idx(c, 2 * y, 2 * xq)]
                    + x.data[x.idx(c, 2 * y, 2 * xq + 1)]
                    + x.data[x.idx(c, 2 * y + 1, 2 * xq)]
                    + x.data[x.idx(c, 2 * y + 1, 2 * xq + 1)];
                let oi = out.idx(c, y, xq);
                out.data[oi] = s / 4.0;
            }
        }
    }
    out
}

/// Backward of [`avg_pool2`] for an input of shape `(channels, in_h, in_w)`.
pub fn avg_pool2_backward(in_h: usize, in_w: usize, dout: &ImageTensor) -> ImageTensor {
    let mut dx = ImageTensor::zeros(dout.channels, in_h, in_w);
    for c in 0..dout.channels {
        for y in 0..dout.height {
            for xq in 0..dout.width {
                let g = dout.data[dout.idx(c, y, xq)] / 4.0;
                for (dy, dxq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let di = dx.idx(c, 2 * y + dy, 2 * xq + dxq);
                    dx.data[di] += g;
                }
            }
        }
    }
    dx
}

/// Mean over the spatial grid, per channel.
pub fn global_avg_pool(x: &ImageTensor) -> Vec<f64> {
    let n = (x.height * x.width) as f64;
    (0..x.channels)
        .map(|c| {
            let mut s = 0.0;
            for y in 0..x.height {
                for xq in 0..x.width {
                    s += x.data[x.idx(c, y, xq)];
                }
            }
            s / n
        })
        .collect()
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(
    channels: usize,
    height: usize,
    width: usize,
    dout: &[f64],
) -> ImageTensor {
    let n = (height * width) as f64;
    let mut dx = ImageTensor::zeros(channels, height, width);
    for c in 0..channels {
        let g = dout[c] / n;
        for y in 0..height {
            for xq in 0..width {
                let di = dx.idx(c, y, xq);
                dx.data[di] = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-7;

    /// Central finite difference of `f` at coordinate `i` of `params`.
    fn numeric_grad(params: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let orig = params[i];
        params[i] = orig + EPS;
        let hi = f(params);
        params[i] = orig - EPS;
        let lo = f(params);
        params[i] = orig;
        (hi - lo) / (2.0 * EPS)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng::seeded(0, "lin-grad", 0);
        let layer = Linear::new(5, 3, &mut r);
        let x = Array2::from_shape_fn((4, 5), |_| r.random::<f64>() - 0.5);
        // Loss = sum(y * probe) with a fixed random probe.
        let probe = Array2::from_shape_fn((4, 3), |_| r.random::<f64>() - 0.5);
        let grads = layer.backward(&x, &probe);

        let mut w = layer.w.clone().into_raw_vec_and_offset().0;
        for i in 0..w.len() {
            let num = numeric_grad(&mut w, i, |wv| {
                let l = Linear {
                    w: Array2::from_shape_vec((3, 5), wv.to_vec()).unwrap(),
                    b: layer.b.clone(),
                };
                (l.forward(&x) * &probe).sum()
            });
            let ana = grads.dw.as_slice().unwrap()[i];
            assert!(rel_err(num, ana) < TOL, "dw[{}]: {} vs {}", i, num, ana);
        }
        let mut b = layer.b.to_vec();
        for i in 0..b.len() {
            let num = numeric_grad(&mut b, i, |bv| {
                let l = Linear { w: layer.w.clone(), b: Array1::from_vec(bv.to_vec()) };
                (l.forward(&x) * &probe).sum()
            });
            assert!(rel_err(num, grads.db[i]) < TOL, "db[{}]", i);
        }
        let mut xv = x.clone().into_raw_vec_and_offset().0;
        for i in 0..xv.len() {
            let num = numeric_grad(&mut xv, i, |v| {
                let xx = Array2::from_shape_vec((4, 5), v.to_vec()).unwrap();
                (layer.forward(&xx) * &probe).sum()
            });
            let ana = grads.dx.as_slice().unwrap()[i];
            assert!(rel_err(num, ana) < TOL, "dx[{}]", i);
        }
    }

    #[test]
    fn relu_masks_gradients_at_nonpositive_preactivations() {
        let pre =
            Array2::from_shape_vec((1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let dy = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dx = relu_backward(&pre, &dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(relu(&pre).as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng::seeded(1, "conv-grad", 0);
        let conv = Conv3x3::new(2, 3, &mut r);
        let x = {
            let mut t = ImageTensor::zeros(2, 5, 4);
            for v in t.data.iter_mut() {
                *v = r.random::<f64>() - 0.5;
            }
            t
        };
        let probe: Vec<f64> = (0..3 * 5 * 4).map(|_| r.random::<f64>() - 0.5).collect();
        let loss = |c: &Conv3x3, input: &ImageTensor| -> f64 {
            c.forward(input).data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let dout = ImageTensor::new(3, 5, 4, probe.clone()).unwrap();
        let grads = conv.backward(&x, &dout);

        let mut w = conv.w.clone();
        for i in 0..w.len() {
            let num = numeric_grad(&mut w, i, |wv| {
                let c = Conv3x3 { w: wv.to_vec(), ..conv.clone() };
                loss(&c, &x)
            });
            assert!(rel_err(num, grads.dw[i]) < 1e-6, "dw[{}]: {} vs {}", i, num, grads.dw[i]);
        }
        let mut b = conv.b.clone();
        for i in 0..b.len() {
            let num = numeric_grad(&mut b, i, |bv| {
                let c = Conv3x3 { b: bv.to_vec(), ..conv.clone() };
                loss(&c, &x)
            });
            assert!(rel_err(num, grads.db[i]) < 1e-6, "db[{}]", i);
        }
        let mut xv = x.data.clone();
        for i in 0..xv.len() {
            let num = numeric_grad(&mut xv, i, |v| {
                let t = ImageTensor::new(2, 5, 4, v.to_vec()).unwrap();
                loss(&conv, &t)
            });
            assert!(rel_err(num, grads.dx.data[i]) < 1e-6, "dx[{}]", i);
        }
    }

    #[test]
    fn avg_pool_halves_and_crops_odd_edges() {
        let mut x = ImageTensor::zeros(1, 5, 4);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let y = avg_pool2(&x);
        assert_eq!((y.channels, y.height, y.width), (1, 2, 2));
        // Block (0,0): values 0,1,4,5 -> mean 2.5.
        assert_eq!(y.data[0], 2.5);

        let dout = ImageTensor::new(1, 2, 2, vec![4.0, 8.0, 12.0, 16.0]).unwrap();
        let dx = avg_pool2_backward(5, 4, &dout);
        assert_eq!(dx.data[dx.idx(0, 0, 0)], 1.0);
        assert_eq!(dx.data[dx.idx(0, 1, 1)], 1.0);
        assert_eq!(dx.data[dx.idx(0, 2, 3)], 4.0);
        // Cropped row receives no gradient.
        assert_eq!(dx.data[dx.idx(0, 4, 0)], 0.0);
    }

    #[test]
    fn global_avg_pool_roundtrip() {
        let mut x = ImageTensor::zeros(2, 3, 3);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let y = global_avg_pool(&x);
        assert_eq!(y, vec![4.0, 13.0]);
        let dx = global_avg_pool_backward(2, 3, 3, &[9.0, 18.0]);
        assert!(dx.data[..9].iter().all(|&v| v == 1.0));
        assert!(dx.data[9..].iter().all(|&v| v == 2.0));
    }
}
