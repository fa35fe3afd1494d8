//! Plain convolution and dense layers with He initialization.

use rand::Rng;
use raeg_autograd::{Binding, Float, ParamId, Scope, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Float, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_c * kernel * kernel) as f64).sqrt();
        let weight = scope.param("weight", Tensor::randn(vec![out_c, in_c, kernel, kernel], std, rng));
        let bias = scope.param("bias", Tensor::zeros(vec![out_c, 1, 1]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(bind.var(self.weight), self.stride, self.pad).add(bind.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(scope: &mut Scope<'_, T>, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let weight = scope.param("weight", Tensor::randn(vec![inputs, outputs], std, rng));
        let bias = scope.param("bias", Tensor::zeros(vec![outputs]));
        Self { weight, bias }
    }

    /// `[B, inputs] -> [B, outputs]`
    pub fn forward<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(bind.var(self.weight)).add(bind.var(self.bias))
    }
}
