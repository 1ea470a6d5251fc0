use crate::tensor::tape::{GradSlots, Op};
use crate::tensor::{Real, Result, Tape, TensorError, Tensor, Var};

impl<T: Real> Tape<T> {
    /// 2x2 max pooling with stride 2.  Ties go to the first cell in
    /// row-major scan order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "maxpool2",
                msg: format!("spatial extents must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for cand in [
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::MaxPool2 {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &xd[p * h * w..][..h * w];
            for oy in 0..oh {
                let row = &src[(oy / 2) * w..][..w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2 { input: input.0 }))
    }
}

pub(super) fn maxpool2_backward<T: Real>(input: usize, argmax: &[usize], grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    let gx = slots.slot(input);
    for (&src, &g) in argmax.iter().zip(grad) {
        gx[src] = gx[src] + g;
    }
}

pub(super) fn upsample2_backward<T: Real>(input: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    if !slots.wants(input) {
        return;
    }
    let shape = slots.values[input].shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let planes = shape[0] * shape[1];
    let gx = slots.slot(input);
    for p in 0..planes {
        let src = &grad[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for oy in 0..oh {
            let drow = &mut dst[(oy / 2) * w..][..w];
            for (ox, &g) in src[oy * ow..][..ow].iter().enumerate() {
                drow[ox / 2] = drow[ox / 2] + g;
            }
        }
    }
}
