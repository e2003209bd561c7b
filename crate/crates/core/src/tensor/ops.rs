//! Elementwise, channel and reduction primitives.

use super::{NodeId, Real, Shape, Tape, Tensor};
use crate::error::{Error, Result};

struct AddOp;
impl<T: Real> super::Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubOp;
impl<T: Real> super::Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
    }
}

struct MulOp;
impl<T: Real> super::Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            Some(g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            Some(g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Real> super::Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct IdentityOp(&'static str);
impl<T: Real> super::Backward<T> for IdentityOp {
    fn name(&self) -> &'static str {
        self.0
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// `frozen` holds a replayed branch pattern; otherwise the sign of the input decides.
struct ReluOp(Option<Vec<i32>>);
impl<T: Real> super::Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let out = match &self.0 {
            Some(p) => g.iter().zip(p).map(|(&g, &on)| if on == 1 { g } else { T::zero() }).collect(),
            None => g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
        };
        vec![Some(out)]
    }
}

struct ExpOp;
impl<T: Real> super::Backward<T> for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(out.data()).map(|(&g, &y)| g * y).collect())]
    }
}

struct ConcatOp {
    channels: Vec<usize>,
}
impl<T: Real> super::Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let total = out.shape().c;
        let pixels = out.len() / total;
        let mut offset = 0;
        let mut result = Vec::with_capacity(inputs.len());
        for &c in &self.channels {
            let mut gi = Vec::with_capacity(pixels * c);
            for p in 0..pixels {
                gi.extend_from_slice(&g[p * total + offset..p * total + offset + c]);
            }
            result.push(Some(gi));
            offset += c;
        }
        result
    }
}

struct SliceOp {
    start: usize,
}
impl<T: Real> super::Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let total = inputs[0].shape().c;
        let len = out.shape().c;
        let mut gi = vec![T::zero(); inputs[0].len()];
        for (p, chunk) in g.chunks_exact(len).enumerate() {
            gi[p * total + self.start..p * total + self.start + len].copy_from_slice(chunk);
        }
        vec![Some(gi)]
    }
}

struct SumOp;
impl<T: Real> super::Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; inputs[0].len()])]
    }
}

struct MseOp;
impl<T: Real> super::Backward<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let k = T::lit(2.0) * g[0] / T::lit(a.len() as f64);
        let ga: Vec<T> = a.iter().zip(b).map(|(&a, &b)| k * (a - b)).collect();
        let gb = ga.iter().map(|&v| -v).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct MulScalarOp;
impl<T: Real> super::Backward<T> for MulScalarOp {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, s) = (inputs[0].data(), inputs[1].item());
        let gs: T = g.iter().zip(x).map(|(&g, &x)| g * x).sum();
        vec![Some(g.iter().map(|&g| g * s).collect()), Some(vec![gs])]
    }
}

/// (N,H,W,C) <-> (N*C,H,W,1) relayout.
struct ChannelBatchOp {
    to_batch: bool,
}
impl<T: Real> super::Backward<T> for ChannelBatchOp {
    fn name(&self) -> &'static str {
        "channel_batch"
    }
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let gi = if self.to_batch {
            let s = inputs[0].shape();
            unsplit_channels(g, s.n, s.h * s.w, s.c)
        } else {
            let s = out.shape();
            split_channels(g, s.n, s.h * s.w, s.c)
        };
        vec![Some(gi)]
    }
}

fn split_channels<T: Real>(data: &[T], n: usize, pixels: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for p in 0..pixels {
            for ch in 0..c {
                out[(b * c + ch) * pixels + p] = data[(b * pixels + p) * c + ch];
            }
        }
    }
    out
}

fn unsplit_channels<T: Real>(data: &[T], n: usize, pixels: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for p in 0..pixels {
            for ch in 0..c {
                out[(b * pixels + p) * c + ch] = data[(b * c + ch) * pixels + p];
            }
        }
    }
    out
}

fn binary_shapes<T: Real>(tape: &Tape<T>, a: NodeId, b: NodeId, op: &'static str) -> Result<Shape> {
    let sa = tape.shape(a);
    sa.expect_eq(&tape.shape(b), op)?;
    Ok(sa)
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shapes(self, a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(Tensor::from_vec(shape, data)?, vec![a, b], AddOp))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shapes(self, a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        Ok(self.push_op(Tensor::from_vec(shape, data)?, vec![a, b], SubOp))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shapes(self, a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(Tensor::from_vec(shape, data)?, vec![a, b], MulOp))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push_op(value, vec![x], ScaleOp(c))
    }

    /// `x + c` elementwise for a constant `c`.
    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        self.push_op(value, vec![x], IdentityOp("add_const"))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let frozen = if self.requires_grad(x) && self.tracks_kinks() {
            let xs = self.value(x).data();
            let signs: Vec<i32> = xs.iter().map(|&v| (v > T::zero()) as i32).collect();
            self.note_kinks(|| signs)
        } else {
            None
        };
        let value = match &frozen {
            Some(p) => {
                let data = self.value(x).data().iter().zip(p).map(|(&v, &on)| if on == 1 { v } else { T::zero() }).collect();
                Tensor::from_vec(self.shape(x), data).expect("same shape")
            }
            None => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
        };
        self.push_op(value, vec![x], ReluOp(frozen))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.exp());
        self.push_op(value, vec![x], ExpOp)
    }

    /// Stack along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or_else(|| crate::error::invalid("concat of zero tensors"))?;
        let base = self.shape(first);
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            s.with_channels(base.c).expect_eq(&base, "concat_channels")?;
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let shape = base.with_channels(total);
        let pixels = base.n * base.h * base.w;
        let mut data = Vec::with_capacity(shape.numel());
        for p in 0..pixels {
            for (&x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(x).data()[p * c..(p + 1) * c]);
            }
        }
        Ok(self.push_op(Tensor::from_vec(shape, data)?, xs.to_vec(), ConcatOp { channels }))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_channels",
                dim: "channels",
                expected: start + len,
                found: s.c,
            });
        }
        let shape = s.with_channels(len);
        let mut data = Vec::with_capacity(shape.numel());
        for px in self.value(x).data().chunks_exact(s.c) {
            data.extend_from_slice(&px[start..start + len]);
        }
        Ok(self.push_op(Tensor::from_vec(shape, data)?, vec![x], SliceOp { start }))
    }

    /// Multiply a tensor by a scalar node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.shape(s);
        if ss.numel() != 1 {
            return Err(Error::ShapeMismatch { op: "mul_scalar", dim: "scalar elements", expected: 1, found: ss.numel() });
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.push_op(value, vec![x, s], MulScalarOp))
    }

    /// Forward value `target`, gradient of the identity: `x + sg(target - x)`.
    /// The offset goes through the stop-gradient log.
    pub fn straight_through(&mut self, x: NodeId, target: Vec<T>) -> Result<NodeId> {
        let shape = self.shape(x);
        if target.len() != shape.numel() {
            return Err(Error::ShapeMismatch { op: "straight_through", dim: "elements", expected: shape.numel(), found: target.len() });
        }
        let offset: Vec<T> = target.iter().zip(self.value(x).data()).map(|(&t, &v)| t - v).collect();
        let offset = self.stop_gradient(offset);
        // Live values are exactly `target`; replay follows the recorded offsets.
        let value = if self.is_replaying() {
            self.value(x).data().iter().zip(&offset).map(|(&v, &o)| v + o).collect()
        } else {
            target
        };
        Ok(self.push_op(Tensor::from_vec(shape, value)?, vec![x], IdentityOp("straight_through")))
    }

    /// Round to integers in the forward pass, identity gradient.
    pub fn round_st(&mut self, x: NodeId) -> Result<NodeId> {
        let target = self.value(x).data().iter().map(|&v| v.round()).collect();
        self.straight_through(x, target)
    }

    /// Clamp to `[lo, hi]` in the forward pass, identity gradient.
    pub fn clamp_st(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(crate::error::invalid(format!("clamp interval [{lo}, {hi}] is empty")));
        }
        let target = self.value(x).data().iter().map(|&v| v.max(lo).min(hi)).collect();
        self.straight_through(x, target)
    }

    /// (N,H,W,C) -> (N*C,H,W,1): every channel becomes its own image.
    pub fn channels_to_batch(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let data = split_channels(self.value(x).data(), s.n, s.h * s.w, s.c);
        let value = Tensor::from_vec(Shape::new(s.n * s.c, s.h, s.w, 1), data).expect("same size");
        self.push_op(value, vec![x], ChannelBatchOp { to_batch: true })
    }

    /// Inverse of [`Tape::channels_to_batch`] for `c` channels per image.
    pub fn batch_to_channels(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.c != 1 || c == 0 || s.n % c != 0 {
            return Err(Error::ShapeMismatch { op: "batch_to_channels", dim: "batch", expected: c, found: s.n });
        }
        let data = unsplit_channels(self.value(x).data(), s.n / c, s.h * s.w, c);
        let value = Tensor::from_vec(Shape::new(s.n / c, s.h, s.w, c), data)?;
        Ok(self.push_op(value, vec![x], ChannelBatchOp { to_batch: false }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), vec![x], SumOp)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        binary_shapes(self, a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = total / T::lit(va.len() as f64);
        Ok(self.push_op(Tensor::scalar(value), vec![a, b], MseOp))
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

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::image(1, 2, 1), vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mse_of_identical_is_zero_with_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random(Shape::image(3, 3, 2), &mut rng);
        let a = tape.leaf(v.clone());
        let b = tape.leaf(v);
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
        tape.backward(m).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(Shape::image(2, 3, 1)));
        let b = tape.leaf(Tensor::zeros(Shape::image(2, 4, 1)));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::image(2, 2, 3), 0.5));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random(Shape::image(4, 4, 2), &mut rng));
        let y = tape.constant(random(Shape::image(4, 4, 2), &mut rng));
        let r = tape.relu(x);
        let m = tape.mse(r, y).unwrap();
        tape.backward(m).unwrap();
        let first = tape.grad(x).unwrap().to_vec();
        tape.backward(m).unwrap();
        for (g2, g1) in tape.grad(x).unwrap().iter().zip(&first) {
            assert_eq!(*g2, 2.0 * g1);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::image(2, 2, 1)));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(4))));
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::image(3, 4, 3);
        let inputs = vec![random(shape, &mut rng), random(shape, &mut rng)];
        let target = random(shape.with_channels(5), &mut rng);
        let report = check_gradients(
            &inputs,
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let d = tape.sub(s, ids[1])?;
                let p = tape.mul(d, ids[1])?;
                let e = tape.exp(p);
                let q = tape.scale(e, 0.7);
                let c = tape.concat_channels(&[q, ids[0]])?;
                let sl = tape.slice_channels(c, 1, 5)?;
                let t = tape.constant(target.clone());
                tape.mse(sl, t)
            },
            &GradCheck { trials: 20, ..GradCheck::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn relu_gradient_check_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::image(4, 4, 2);
        let mut x = random(shape, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let report = check_gradients(
            &[x],
            |tape, ids| {
                let r = tape.relu(ids[0]);
                let s = tape.mul(r, r)?;
                Ok(tape.sum(s))
            },
            &GradCheck { trials: 20, ..GradCheck::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn clamp_st_values_and_identity_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::image(1, 2, 1), vec![300.0, 100.0]).unwrap());
        let y = tape.clamp_st(x, 0.0, 255.0).unwrap();
        assert_eq!(tape.value(y).data(), &[255.0, 100.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn relayout_round_trip_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(2, 3, 2, 3), &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone());
        let b = tape.channels_to_batch(xi);
        assert_eq!(tape.shape(b), Shape::new(6, 3, 2, 1));
        assert_eq!(tape.value(b).at(4, 1, 1, 0), x.at(1, 1, 1, 1));
        let back = tape.batch_to_channels(b, 3).unwrap();
        assert_eq!(tape.value(back), &x);

        let w = random(Shape::new(6, 3, 2, 1), &mut rng);
        let report = check_gradients(
            &[x, w],
            |tape, ids| {
                let b = tape.channels_to_batch(ids[0]);
                let p = tape.mul(b, ids[1])?;
                let c = tape.batch_to_channels(p, 3)?;
                let sq = tape.mul(c, c)?;
                let k = tape.scalar_constant(1.3);
                let sq = tape.mul_scalar(sq, k)?;
                Ok(tape.sum(sq))
            },
            &GradCheck { trials: 20, ..GradCheck::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn mul_scalar_gradient_reaches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![random(Shape::image(3, 3, 2), &mut rng), Tensor::scalar(0.8)];
        let report = check_gradients(
            &inputs,
            |tape, ids| {
                let y = tape.mul_scalar(ids[0], ids[1])?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            &GradCheck { trials: 20, ..GradCheck::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
