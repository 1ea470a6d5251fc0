use crate::tensor::tape::{GradSlots, Op};
use crate::tensor::{Real, Result, Tape, TensorError, Tensor, Var};

/// Output positions `o` with `0 <= o*stride + offset - padding < len`.
fn valid_range(out_len: usize, len: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    let shift = offset as isize - padding as isize;
    let s = stride as isize;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let last = len as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn geometry(x: &[usize], k: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let op = "conv2d";
    let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x, k) else {
        return Err(TensorError::Shape {
            op,
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        });
    };
    if cin != kcin {
        return Err(TensorError::Shape {
            op,
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if bias != [cout] {
        return Err(TensorError::Shape {
            op,
            lhs: k.to_vec(),
            rhs: bias.to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "stride must be at least 1".into(),
        });
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
        });
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
        stride,
        padding,
    })
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let g = geometry(x.shape(), k.shape(), b.shape(), stride, padding)?;
        let (xd, kd, bd) = (x.data(), k.data(), b.data());
        let plane = g.oh * g.ow;
        let mut out = vec![T::zero(); g.n * g.cout * plane];
        for n in 0..g.n {
            for o in 0..g.cout {
                let dst = &mut out[(n * g.cout + o) * plane..][..plane];
                dst.fill(bd[o]);
                for c in 0..g.cin {
                    let src = &xd[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
                        for kx in 0..g.kw {
                            let wv = kd[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let row = &src[iy * g.w..][..g.w];
                                let drow = &mut dst[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.padding;
                                    for (d, &s) in drow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                        *d = *d + wv * s;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        drow[ox] = drow[ox] + wv * row[ox * g.stride + kx - g.padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([g.n, g.cout, g.oh, g.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
                padding,
            },
        ))
    }
}

pub(super) fn backward<T: Real>(
    input: usize,
    kernel: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    grad: &[T],
    slots: &mut GradSlots<'_, T>,
) {
    let values = slots.values;
    let (x, k, b) = (&values[input], &values[kernel], &values[bias]);
    let g = geometry(x.shape(), k.shape(), b.shape(), stride, padding)
        .expect("geometry validated in forward");
    let plane = g.oh * g.ow;

    if slots.wants(bias) {
        let gb = slots.slot(bias);
        for n in 0..g.n {
            for o in 0..g.cout {
                let s: T = grad[(n * g.cout + o) * plane..][..plane].iter().copied().sum();
                gb[o] = gb[o] + s;
            }
        }
    }

    let want_k = slots.wants(kernel);
    let want_x = slots.wants(input);
    let (xd, kd) = (x.data(), k.data());
    if want_k {
        let gk = slots.slot(kernel);
        for n in 0..g.n {
            for o in 0..g.cout {
                let gsrc = &grad[(n * g.cout + o) * plane..][..plane];
                for c in 0..g.cin {
                    let src = &xd[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let row = &src[iy * g.w..][..g.w];
                                let grow = &gsrc[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.padding;
                                    for (&gv, &s) in grow[ox0..ox1].iter().zip(&row[ix0..]) {
                                        acc = acc + gv * s;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        acc = acc + grow[ox] * row[ox * g.stride + kx - g.padding];
                                    }
                                }
                            }
                            let idx = ((o * g.cin + c) * g.kh + ky) * g.kw + kx;
                            gk[idx] = gk[idx] + acc;
                        }
                    }
                }
            }
        }
    }
    if want_x {
        let gx = slots.slot(input);
        for n in 0..g.n {
            for o in 0..g.cout {
                let gsrc = &grad[(n * g.cout + o) * plane..][..plane];
                for c in 0..g.cin {
                    let dst = &mut gx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
                        for kx in 0..g.kw {
                            let wv = kd[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let drow = &mut dst[iy * g.w..][..g.w];
                                let grow = &gsrc[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.padding;
                                    for (d, &gv) in drow[ix0..].iter_mut().zip(&grow[ox0..ox1]) {
                                        *d = *d + wv * gv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = ox * g.stride + kx - g.padding;
                                        drow[ix] = drow[ix] + wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
