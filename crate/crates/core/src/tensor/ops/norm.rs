use crate::tensor::tape::{BatchNormMode, BatchStats, GradSlots, Op, RunningMoments};
use crate::tensor::{Real, Result, Tape, TensorError, Tensor, Var};

pub const BATCHNORM_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    /// Per-channel batch normalization over `[N,C,H,W]`.
    ///
    /// In train mode the batch moments normalize the input and are folded
    /// into `moments`; in eval mode `moments` is read only.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        moments: &mut RunningMoments<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let op = "batchnorm2d";
        let x = self.value(input);
        let [n, c, h, w] = x.dims4(op)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::Shape {
                    op,
                    lhs: x.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        if moments.channels() != c {
            return Err(TensorError::Invalid {
                op,
                msg: format!("running moments have {} channels, input has {c}", moments.channels()),
            });
        }
        let plane = h * w;
        let count = n * plane;
        if mode == BatchNormMode::Train && count < 2 {
            return Err(TensorError::Invalid {
                op,
                msg: "train mode needs at least two values per channel".into(),
            });
        }
        let xd = x.data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for bn in 0..n {
                        s += xd[(bn * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0f64;
                    for bn in 0..n {
                        q += xd[(bn * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::from_f64(m);
                    var[ch] = T::from_f64(q / count as f64);
                }
                (mean, var)
            }
            BatchNormMode::Eval => (moments.mean.clone(), moments.var.clone()),
        };
        let eps = T::from_f64(BATCHNORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for bn in 0..n {
            for ch in 0..c {
                for &v in &xd[(bn * c + ch) * plane..][..plane] {
                    let z = (v - mean[ch]) * inv_std[ch];
                    xhat.push(z);
                    out.push(gd[ch] * z + bd[ch]);
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        if mode == BatchNormMode::Train {
            moments.update(&BatchStats { mean, var, count });
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                mode,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    input: usize,
    gamma: usize,
    beta: usize,
    xhat: &[T],
    inv_std: &[T],
    mode: BatchNormMode,
    grad: &[T],
    slots: &mut GradSlots<'_, T>,
) {
    let values = slots.values;
    let shape = values[input].shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = n * plane;
    let gd = values[gamma].data();

    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for bn in 0..n {
        for ch in 0..c {
            let off = (bn * c + ch) * plane;
            for (&g, &z) in grad[off..off + plane].iter().zip(&xhat[off..]) {
                sum_g[ch] = sum_g[ch] + g;
                sum_gx[ch] = sum_gx[ch] + g * z;
            }
        }
    }
    if slots.wants(gamma) {
        for (d, &s) in slots.slot(gamma).iter_mut().zip(&sum_gx) {
            *d = *d + s;
        }
    }
    if slots.wants(beta) {
        for (d, &s) in slots.slot(beta).iter_mut().zip(&sum_g) {
            *d = *d + s;
        }
    }
    if !slots.wants(input) {
        return;
    }
    let m = T::from_f64(count as f64);
    let gx = slots.slot(input);
    for bn in 0..n {
        for ch in 0..c {
            let off = (bn * c + ch) * plane;
            let scale = gd[ch] * inv_std[ch];
            let dst = &mut gx[off..off + plane];
            match mode {
                BatchNormMode::Train => {
                    for ((d, &g), &z) in dst.iter_mut().zip(&grad[off..]).zip(&xhat[off..]) {
                        *d = *d + scale / m * (m * g - sum_g[ch] - z * sum_gx[ch]);
                    }
                }
                BatchNormMode::Eval => {
                    for (d, &g) in dst.iter_mut().zip(&grad[off..]) {
                        *d = *d + scale * g;
                    }
                }
            }
        }
    }
}
