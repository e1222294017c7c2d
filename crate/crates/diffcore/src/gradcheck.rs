//! Central-difference verification of reverse-mode gradients (64-bit).

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central difference step.
pub const STEP: f64 = 1e-4;

/// Every differentiable operation kind the graph offers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv3d,
    ConvTranspose3d,
    Upsample,
    InstanceNorm,
    LayerNorm,
    LeakyRelu,
    Sigmoid,
    Softplus,
    Softmax,
    LogSoftmax,
    Attention,
    CausalAttention,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Concat,
    Slice,
    Reshape,
    Permute,
    Sum,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Conv3d,
        OpKind::ConvTranspose3d,
        OpKind::Upsample,
        OpKind::InstanceNorm,
        OpKind::LayerNorm,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Attention,
        OpKind::CausalAttention,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Sum,
        OpKind::Gather,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Max relative error between analytic and central-difference gradients of
/// `f` with respect to every element of every input.
///
/// A non-scalar output is reduced as `Σ out ⊙ R` with a fixed random `R`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ca11);
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let w = weights.get_or_insert_with(|| Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng)).clone();
            let r = g.constant(w);
            let prod = g.mul(out, r)?;
            g.sum(prod)?
        };
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let analytic = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| gr.input(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, analytic))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let (up, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig - STEP;
            let (down, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let an = a.data()[j];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gradient check of one operation kind on its reference shapes.
pub fn gradcheck(kind: OpKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    match kind {
        OpKind::MatMul => check_gradients(&[u(&[3, 4]), u(&[4, 2])], seed, |g, v| g.matmul(v[0], v[1])),
        OpKind::Conv3d => check_gradients(&[u(&[1, 2, 5, 5, 4]), u(&[3, 2, 3, 3, 3]), u(&[3])], seed, |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        OpKind::ConvTranspose3d => {
            check_gradients(&[u(&[1, 3, 2, 3, 2]), u(&[3, 2, 2, 2, 2]), u(&[2])], seed, |g, v| {
                g.conv_transpose3d(v[0], v[1], Some(v[2]), 2, 0)
            })
        }
        OpKind::Upsample => check_gradients(&[u(&[1, 2, 2, 3, 2])], seed, |g, v| g.upsample2(v[0])),
        OpKind::InstanceNorm => check_gradients(&[u(&[2, 3, 2, 2, 3]), u(&[3]), u(&[3])], seed, |g, v| {
            g.instance_norm(v[0], v[1], v[2])
        }),
        OpKind::LayerNorm => {
            check_gradients(&[u(&[2, 3, 5]), u(&[5]), u(&[5])], seed, |g, v| g.layer_norm(v[0], v[1], v[2]))
        }
        OpKind::LeakyRelu => {
            // keep samples away from the kink so the central difference is valid
            let x = u(&[4, 5]).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            check_gradients(&[x], seed, |g, v| g.leaky_relu(v[0], 0.01))
        }
        OpKind::Sigmoid => check_gradients(&[u(&[3, 4])], seed, |g, v| g.sigmoid(v[0])),
        OpKind::Softplus => check_gradients(&[u(&[3, 4]).map(|v| 4.0 * v)], seed, |g, v| g.softplus(v[0])),
        OpKind::Softmax => check_gradients(&[u(&[3, 4, 5])], seed, |g, v| g.softmax(v[0], 1)),
        OpKind::LogSoftmax => check_gradients(&[u(&[3, 5]).map(|v| 3.0 * v)], seed, |g, v| g.log_softmax(v[0])),
        OpKind::Attention => check_gradients(&[u(&[1, 4, 8]), u(&[1, 4, 8]), u(&[1, 4, 8])], seed, |g, v| {
            g.attention(v[0], v[1], v[2], 2, false)
        }),
        OpKind::CausalAttention => {
            check_gradients(&[u(&[2, 4, 8]), u(&[2, 4, 8]), u(&[2, 4, 4])], seed, |g, v| {
                g.attention(v[0], v[1], v[2], 2, true)
            })
        }
        OpKind::Add => check_gradients(&[u(&[3, 4]), u(&[4])], seed, |g, v| g.add(v[0], v[1])),
        OpKind::Sub => check_gradients(&[u(&[3, 4]), u(&[3, 4])], seed, |g, v| g.sub(v[0], v[1])),
        OpKind::Mul => check_gradients(&[u(&[2, 3, 4]), u(&[3, 4])], seed, |g, v| g.mul(v[0], v[1])),
        OpKind::Div => {
            let den = u(&[4]).map(|v| 1.0 + 0.5 * v);
            check_gradients(&[u(&[3, 4]), den], seed, |g, v| g.div(v[0], v[1]))
        }
        OpKind::Scale => check_gradients(&[u(&[3, 4])], seed, |g, v| {
            let s = g.scale(v[0], -1.5)?;
            g.add_scalar(s, 0.25)
        }),
        OpKind::Concat => check_gradients(&[u(&[2, 3, 2]), u(&[2, 1, 2]), u(&[2, 2, 2])], seed, |g, v| {
            g.concat(&[v[0], v[1], v[2]], 1)
        }),
        OpKind::Slice => check_gradients(&[u(&[3, 5, 2])], seed, |g, v| g.slice(v[0], 1, 1, 3)),
        OpKind::Reshape => check_gradients(&[u(&[2, 6])], seed, |g, v| g.reshape(v[0], &[3, 4])),
        OpKind::Permute => check_gradients(&[u(&[2, 3, 4])], seed, |g, v| g.permute(v[0], &[2, 0, 1])),
        OpKind::Sum => check_gradients(&[u(&[2, 3, 4])], seed, |g, v| g.sum_to(v[0], 1)),
        OpKind::Gather => check_gradients(&[u(&[5, 3])], seed, |g, v| g.gather(v[0], &[4, 0, 4, 2])),
    }
}
