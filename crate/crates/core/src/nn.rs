//! Parameterized layers over a shared [`ParamStore`].

use diffcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Dense layer on the last axis: `x·W + b`, `W: (din, dout)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::uniform(&[din, dout], -bound, bound, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        Self { w: store.add(format!("{name}.w"), Tensor::zeros(&[din, dout])), b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Affine parameters of an instance or layer norm.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn layer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (a, b) = (g.param(store, self.gamma), g.param(store, self.beta));
        Ok(g.layer_norm(x, a, b)?)
    }

    pub fn instance<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (a, b) = (g.param(store, self.gamma), g.param(store, self.beta));
        Ok(g.instance_norm(x, a, b)?)
    }
}

/// Cubic 3D convolution, optionally transposed (`w: (Cin, Cout, k, k, k)` then).
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k, k], std, rng)),
            b: bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout]))),
            stride,
            pad: k / 2,
            transposed: false,
        }
    }

    pub fn transposed<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[cin, cout, 2, 2, 2], std, rng)),
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))),
            stride: 2,
            pad: 0,
            transposed: true,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(if self.transposed { g.conv_transpose3d(x, w, b, self.stride, self.pad)? } else { g.conv3d(x, w, b, self.stride, self.pad)? })
    }
}
