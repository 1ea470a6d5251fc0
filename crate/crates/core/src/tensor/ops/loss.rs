use crate::tensor::tape::{GradSlots, Op};
use crate::tensor::{Real, Result, Tape, TensorError, Tensor, Var};

/// Max-shifted softmax over the channel axis of one `[N,C,H,W]` tensor.
pub(crate) fn softmax_channels_raw<T: Real>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for bn in 0..n {
        let base = bn * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[base + ch * plane + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                s = s + e;
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                out[i] = out[i] / s;
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("softmax_channels")?;
        let out = softmax_channels_raw(x.data(), n, c, h * w);
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxChannels { input: input.0 }))
    }

    /// Mean per-pixel cross-entropy of `logits` against class indices laid
    /// out as `[N,H,W]`.
    pub fn cross_entropy_loss(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let [n, c, h, w] = x.dims4("cross_entropy_loss")?;
        let plane = h * w;
        if target.len() != n * plane {
            return Err(TensorError::Shape {
                op: "cross_entropy_loss",
                lhs: x.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= c) {
            return Err(TensorError::ClassIndex { index: bad, classes: c });
        }
        let probs = softmax_channels_raw(x.data(), n, c, plane);
        // log-sum-exp in f64 keeps saturated logits exact
        let xd = x.data();
        let mut total = 0.0f64;
        for bn in 0..n {
            let xs = &xd[bn * c * plane..][..c * plane];
            for p in 0..plane {
                let t = target[bn * plane + p];
                let m = (0..c).map(|ch| xs[ch * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|ch| (xs[ch * plane + p].as_f64() - m).exp()).sum::<f64>().ln();
                total += lse - xs[t * plane + p].as_f64();
            }
        }
        let value = Tensor::scalar(T::from_f64(total / (n * plane) as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                target: target.to_vec(),
                probs,
            },
        ))
    }

    /// Scalar `sum_i coeffs[i] * x[i]`.
    pub fn weighted_sum(&mut self, input: Var, coeffs: &[T]) -> Result<Var> {
        let x = self.value(input);
        if coeffs.len() != x.len() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                lhs: x.shape().to_vec(),
                rhs: vec![coeffs.len()],
            });
        }
        let s = x.data().iter().zip(coeffs).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input: input.0,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    /// Mean of one channel of `[N,C,H,W]`, optionally restricted to the
    /// pixels where `mask` (laid out `[N,H,W]`) is set.
    pub fn mean_channel(&mut self, input: Var, channel: usize, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("mean_channel")?;
        if channel >= c {
            return Err(TensorError::ClassIndex { index: channel, classes: c });
        }
        let plane = h * w;
        if let Some(m) = mask {
            if m.len() != n * plane {
                return Err(TensorError::Shape {
                    op: "mean_channel",
                    lhs: x.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut count = 0usize;
        let mut s = T::zero();
        for bn in 0..n {
            let row = &x.data()[(bn * c + channel) * plane..][..plane];
            for (p, &v) in row.iter().enumerate() {
                if mask.is_none_or(|m| m[bn * plane + p]) {
                    s = s + v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "mean_channel",
                msg: "mask selects no pixels".into(),
            });
        }
        let value = Tensor::scalar(s / T::from_f64(count as f64));
        Ok(self.push(
            value,
            Op::MeanChannel {
                input: input.0,
                channel,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
        ))
    }
}

pub(super) fn softmax_backward<T: Real>(input: usize, out: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    let y = &slots.values[out];
    let shape = y.shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let yd = y.data();
    let gx = slots.slot(input);
    for bn in 0..n {
        let base = bn * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot = dot + grad[i] * yd[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] = gx[i] + yd[i] * (grad[i] - dot);
            }
        }
    }
}

pub(super) fn cross_entropy_backward<T: Real>(
    logits: usize,
    target: &[usize],
    probs: &[T],
    grad: &[T],
    slots: &mut GradSlots<'_, T>,
) {
    if !slots.wants(logits) {
        return;
    }
    let shape = slots.values[logits].shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let scale = grad[0] / T::from_f64((n * plane) as f64);
    let gx = slots.slot(logits);
    for bn in 0..n {
        for ch in 0..c {
            let off = (bn * c + ch) * plane;
            for p in 0..plane {
                let hot = if target[bn * plane + p] == ch { T::one() } else { T::zero() };
                gx[off + p] = gx[off + p] + scale * (probs[off + p] - hot);
            }
        }
    }
}

pub(super) fn weighted_sum_backward<T: Real>(input: usize, coeffs: &[T], grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    for (d, &k) in slots.slot(input).iter_mut().zip(coeffs) {
        *d = *d + grad[0] * k;
    }
}

pub(super) fn mean_channel_backward<T: Real>(
    input: usize,
    channel: usize,
    mask: Option<&[bool]>,
    count: usize,
    grad: &[T],
    slots: &mut GradSlots<'_, T>,
) {
    if !slots.wants(input) {
        return;
    }
    let shape = slots.values[input].shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let share = grad[0] / T::from_f64(count as f64);
    let gx = slots.slot(input);
    for bn in 0..n {
        let off = (bn * c + channel) * plane;
        for p in 0..plane {
            if mask.is_none_or(|m| m[bn * plane + p]) {
                gx[off + p] = gx[off + p] + share;
            }
        }
    }
}
