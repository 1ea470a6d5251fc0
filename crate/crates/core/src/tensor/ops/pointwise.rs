use crate::tensor::tape::{GradSlots, Op};
use crate::tensor::{Real, Result, Tape, TensorError, Tensor, Var};

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape(), out).expect("same shape");
        self.push(value, Op::Relu { input: input.0 })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape(), out).expect("same shape");
        self.push(value, Op::Sigmoid { input: input.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::Shape {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    /// Element-wise product.  `b` may also be a single-channel
    /// `[N,1,H,W]` mask, broadcast across the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = if x.shape() == y.shape() {
            x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect()
        } else {
            let (n, c, plane) = mask_broadcast(x.shape(), y.shape())?;
            let (xd, yd) = (x.data(), y.data());
            let mut out = Vec::with_capacity(xd.len());
            for bn in 0..n {
                let m = &yd[bn * plane..][..plane];
                for ch in 0..c {
                    let src = &xd[(bn * c + ch) * plane..][..plane];
                    out.extend(src.iter().zip(m).map(|(&p, &q)| p * q));
                }
            }
            out
        };
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape_err = || TensorError::Shape {
            op: "concat_channels",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        };
        let [n, ca, h, w] = x.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = y.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err());
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for bn in 0..n {
            out.extend_from_slice(&x.data()[bn * ca * plane..][..ca * plane]);
            out.extend_from_slice(&y.data()[bn * cb * plane..][..cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }))
    }
}

fn mask_broadcast(full: &[usize], mask: &[usize]) -> Result<(usize, usize, usize)> {
    match (full, mask) {
        (&[n, c, h, w], &[mn, 1, mh, mw]) if (n, h, w) == (mn, mh, mw) => Ok((n, c, h * w)),
        _ => Err(TensorError::Shape {
            op: "mul",
            lhs: full.to_vec(),
            rhs: mask.to_vec(),
        }),
    }
}

pub(super) fn relu_backward<T: Real>(input: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    let x = slots.values[input].data();
    let gx = slots.slot(input);
    for ((d, &g), &v) in gx.iter_mut().zip(grad).zip(x) {
        if v > T::zero() {
            *d = *d + g;
        }
    }
}

pub(super) fn sigmoid_backward<T: Real>(input: usize, out: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    let y = slots.values[out].data();
    let gx = slots.slot(input);
    for ((d, &g), &s) in gx.iter_mut().zip(grad).zip(y) {
        *d = *d + g * s * (T::one() - s);
    }
}

pub(super) fn add_backward<T: Real>(a: usize, b: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    for idx in [a, b] {
        if slots.wants(idx) {
            for (d, &g) in slots.slot(idx).iter_mut().zip(grad) {
                *d = *d + g;
            }
        }
    }
}

pub(super) fn mul_backward<T: Real>(a: usize, b: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    let values = slots.values;
    let (x, y) = (&values[a], &values[b]);
    if x.shape() == y.shape() {
        if slots.wants(a) {
            for ((d, &g), &q) in slots.slot(a).iter_mut().zip(grad).zip(y.data()) {
                *d = *d + g * q;
            }
        }
        if slots.wants(b) {
            for ((d, &g), &p) in slots.slot(b).iter_mut().zip(grad).zip(x.data()) {
                *d = *d + g * p;
            }
        }
        return;
    }
    let (n, c, plane) = mask_broadcast(x.shape(), y.shape()).expect("validated in forward");
    if slots.wants(a) {
        let ga = slots.slot(a);
        for bn in 0..n {
            let m = &y.data()[bn * plane..][..plane];
            for ch in 0..c {
                let off = (bn * c + ch) * plane;
                for ((d, &g), &q) in ga[off..off + plane].iter_mut().zip(&grad[off..]).zip(m) {
                    *d = *d + g * q;
                }
            }
        }
    }
    if slots.wants(b) {
        let gb = slots.slot(b);
        for bn in 0..n {
            let dst = &mut gb[bn * plane..][..plane];
            for ch in 0..c {
                let off = (bn * c + ch) * plane;
                for ((d, &g), &p) in dst.iter_mut().zip(&grad[off..off + plane]).zip(&x.data()[off..]) {
                    *d = *d + g * p;
                }
            }
        }
    }
}

pub(super) fn concat_backward<T: Real>(a: usize, b: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    let values = slots.values;
    let (sa, sb) = (values[a].shape(), values[b].shape());
    let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let stride = (ca + cb) * plane;
    for (idx, offset, len) in [(a, 0, ca * plane), (b, ca * plane, cb * plane)] {
        if !slots.wants(idx) {
            continue;
        }
        let dst = slots.slot(idx);
        for bn in 0..n {
            let src = &grad[bn * stride + offset..][..len];
            for (d, &g) in dst[bn * len..][..len].iter_mut().zip(src) {
                *d = *d + g;
            }
        }
    }
}
