//! 2-D cross-correlation via im2col + GEMM.

use super::{gemm, Backward, Mat, NodeId, Real, Shape, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output is `ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: Shape, kernel: Shape, stride: usize, pad: Padding) -> Result<Self> {
        let (k, cin, cout) = (kernel.n, kernel.w, kernel.c);
        if kernel.h != k {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "kernel width", expected: k, found: kernel.h });
        }
        if x.c != cin {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "input channels", expected: cin, found: x.c });
        }
        if stride == 0 {
            return Err(crate::error::invalid("conv2d stride must be positive"));
        }
        let (out_h, out_w, pad_top, pad_left) = match pad {
            Padding::Same => {
                let oh = x.h.div_ceil(stride);
                let ow = x.w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(x.h);
                let pw = ((ow - 1) * stride + k).saturating_sub(x.w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if x.h < k || x.w < k {
                    return Err(Error::ShapeMismatch { op: "conv2d", dim: "height", expected: k, found: x.h.min(x.w) });
                }
                ((x.h - k) / stride + 1, (x.w - k) / stride + 1, 0, 0)
            }
        };
        Ok(Geometry { k, cin, cout, stride, pad_top, pad_left, in_h: x.h, in_w: x.w, out_h, out_w })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(col_row, col_offset_of_tap, input_pixel)
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = oy * self.out_w + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        f(row, (ky * self.k + kx) * self.cin, iy as usize * self.in_w + ix as usize);
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, image: &[T], col: &mut Vec<T>) {
        let patch = self.patch();
        col.clear();
        col.resize(self.out_h * self.out_w * patch, T::zero());
        let cin = self.cin;
        self.for_each_tap(|row, off, pix| {
            col[row * patch + off..row * patch + off + cin].copy_from_slice(&image[pix * cin..(pix + 1) * cin]);
        });
    }

    fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, off, pix| {
            let src = &col[row * patch + off..row * patch + off + cin];
            for (d, &s) in image[pix * cin..(pix + 1) * cin].iter_mut().zip(src) {
                *d += s;
            }
        });
    }
}

struct Conv2dOp {
    geo: Geometry,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let geo = self.geo;
        let (x, kernel) = (inputs[0], inputs[1]);
        let n = x.shape().n;
        let in_len = geo.in_h * geo.in_w * geo.cin;
        let out_pixels = geo.out_h * geo.out_w;
        let out_len = out_pixels * geo.cout;
        let patch = geo.patch();

        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); kernel.len()];
        let mut gb = vec![T::zero(); geo.cout];
        let mut col = Vec::new();
        let mut gcol = vec![T::zero(); out_pixels * patch];

        for b in 0..n {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let gout = &g[b * out_len..(b + 1) * out_len];
            for px in gout.chunks_exact(geo.cout) {
                for (acc, &v) in gb.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            let gout_m = Mat::new(gout, out_pixels, geo.cout);
            let kernel_m = Mat::new(kernel.data(), patch, geo.cout);
            let gxi = &mut gx[b * in_len..(b + 1) * in_len];
            if geo.is_pointwise() {
                gemm(Mat::new(image, out_pixels, patch).t(), gout_m, &mut gk, true);
                gemm(gout_m, kernel_m.t(), gxi, true);
            } else {
                geo.im2col(image, &mut col);
                gemm(Mat::new(&col, out_pixels, patch).t(), gout_m, &mut gk, true);
                gemm(gout_m, kernel_m.t(), &mut gcol, false);
                geo.col2im(&gcol, gxi);
            }
        }
        vec![Some(gx), Some(gk), Some(gb)]
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of an NHWC input with a `k x k x Cin x Cout` kernel
    /// (stored as `Shape { n: k, h: k, w: Cin, c: Cout }`) plus a per-channel bias.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: Padding) -> Result<NodeId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let geo = Geometry::new(xs, ks, stride, pad)?;
        let bs = self.shape(bias);
        if bs.numel() != geo.cout {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "bias length", expected: geo.cout, found: bs.numel() });
        }
        let out_shape = Shape::new(xs.n, geo.out_h, geo.out_w, geo.cout);
        let out_pixels = geo.out_h * geo.out_w;
        let in_len = geo.in_h * geo.in_w * geo.cin;
        let out_len = out_pixels * geo.cout;
        let patch = geo.patch();

        let mut out = vec![T::zero(); out_shape.numel()];
        {
            let bias_v = self.value(bias).data();
            for px in out.chunks_exact_mut(geo.cout) {
                px.copy_from_slice(bias_v);
            }
            let xv = self.value(x).data();
            let kv = Mat::new(self.value(kernel).data(), patch, geo.cout);
            let mut col = Vec::new();
            for b in 0..xs.n {
                let image = &xv[b * in_len..(b + 1) * in_len];
                let o = &mut out[b * out_len..(b + 1) * out_len];
                if geo.is_pointwise() {
                    gemm(Mat::new(image, out_pixels, patch), kv, o, true);
                } else {
                    geo.im2col(image, &mut col);
                    gemm(Mat::new(&col, out_pixels, patch), kv, o, true);
                }
            }
        }
        Ok(self.push_op(Tensor::from_vec(out_shape, out)?, vec![x, kernel, bias], Conv2dOp { geo }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct loop definition used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let xs = x.shape();
        let (ks, cout) = (k.shape().n, k.shape().c);
        let r = (ks / 2) as isize;
        Tensor::from_fn(xs.with_channels(cout), |n, y, xx, co| {
            let mut acc = b.data()[co];
            for ky in 0..ks {
                for kx in 0..ks {
                    let iy = y as isize + ky as isize - r;
                    let ix = xx as isize + kx as isize - r;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    for ci in 0..xs.c {
                        acc += x.at(n, iy as usize, ix as usize, ci) * k.at(ky, kx, ci, co);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::image(5, 6, 3), &mut rng);
        let k = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, ci, co| if ci == co { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let (xi, ki) = (tape.constant(x.clone()), tape.constant(k));
        let bi = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 3)));
        let y = tape.conv2d(xi, ki, bi, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::image(5, 5, 1), 1.0));
        let k = tape.constant(Tensor::full(Shape::new(3, 3, 1, 1), 1.0));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, k, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).at(0, 2, 2, 0), 9.0);
        assert_eq!(tape.value(y).at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(Shape::new(2, 7, 6, 4), &mut rng);
        let k = random(Shape::new(3, 3, 4, 5), &mut rng);
        let b = random(Shape::new(1, 1, 1, 5), &mut rng);
        let mut tape = Tape::new();
        let (xi, ki, bi) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xi, ki, bi, 1, Padding::Same).unwrap();
        let expect = naive_conv(&x, &k, &b);
        for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_valid_output_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::image(9, 8, 2)));
        let k = tape.constant(Tensor::zeros(Shape::new(3, 3, 2, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 4)));
        let y = tape.conv2d(x, k, b, 2, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), Shape::image(4, 3, 4));
        let z = tape.conv2d(x, k, b, 2, Padding::Same).unwrap();
        assert_eq!(tape.shape(z), Shape::image(5, 4, 4));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::image(4, 4, 2)));
        let k = tape.constant(Tensor::zeros(Shape::new(3, 3, 3, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 4)));
        let err = tape.conv2d(x, k, b, 1, Padding::Same).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn gradient_check_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (stride, pad, k) in [(1, Padding::Same, 3), (2, Padding::Same, 3), (1, Padding::Valid, 3), (1, Padding::Same, 1)] {
            let inputs = vec![
                random(Shape::new(2, 6, 5, 3), &mut rng),
                random(Shape::new(k, k, 3, 4), &mut rng),
                random(Shape::new(1, 1, 1, 4), &mut rng),
            ];
            let report = check_gradients(
                &inputs,
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
                    let sq = tape.mul(y, y)?;
                    Ok(tape.sum(sq))
                },
                &GradCheck { trials: 25, ..GradCheck::default() },
                &mut rng,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-6, "{stride} {pad:?}: {report:?}");
        }
    }
}
