mod conv;
mod loss;
mod norm;
mod pointwise;
mod spatial;

use super::tape::{GradSlots, Op};
use super::Real;

pub(crate) fn backward<T: Real>(op: &Op<T>, out: usize, grad: &[T], slots: &mut GradSlots<'_, T>) {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => conv::backward(*input, *kernel, *bias, *stride, *padding, grad, slots),
        Op::MaxPool2 { input, argmax } => spatial::maxpool2_backward(*input, argmax, grad, slots),
        Op::Upsample2 { input } => spatial::upsample2_backward(*input, grad, slots),
        Op::Relu { input } => pointwise::relu_backward(*input, grad, slots),
        Op::Sigmoid { input } => pointwise::sigmoid_backward(*input, out, grad, slots),
        Op::SoftmaxChannels { input } => loss::softmax_backward(*input, out, grad, slots),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => norm::backward(*input, *gamma, *beta, xhat, inv_std, *mode, grad, slots),
        Op::Add { a, b } => pointwise::add_backward(*a, *b, grad, slots),
        Op::Mul { a, b } => pointwise::mul_backward(*a, *b, grad, slots),
        Op::Concat { a, b } => pointwise::concat_backward(*a, *b, grad, slots),
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => loss::cross_entropy_backward(*logits, target, probs, grad, slots),
        Op::WeightedSum { input, coeffs } => loss::weighted_sum_backward(*input, coeffs, grad, slots),
        Op::MeanChannel {
            input,
            channel,
            mask,
            count,
        } => loss::mean_channel_backward(*input, *channel, mask.as_deref(), *count, grad, slots),
    }
}
