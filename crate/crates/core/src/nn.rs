//! Parameter containers shared by the backbone, the variational core, and
//! the task heads.

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Role of a parameter tensor. Gradient verification samples coordinates
/// per class, and the report names classes rather than raw tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    ConvWeight,
    ConvBias,
    NormGain,
    NormShift,
    ProjWeight,
    ProjBias,
    EncoderWeight,
    EncoderBias,
    DecoderWeight,
    DecoderBias,
    GateWeight,
    GateBias,
    HeadWeight,
    HeadBias,
}

impl ParamClass {
    pub fn name(self) -> &'static str {
        match self {
            ParamClass::ConvWeight => "conv_weight",
            ParamClass::ConvBias => "conv_bias",
            ParamClass::NormGain => "norm_gain",
            ParamClass::NormShift => "norm_shift",
            ParamClass::ProjWeight => "proj_weight",
            ParamClass::ProjBias => "proj_bias",
            ParamClass::EncoderWeight => "encoder_weight",
            ParamClass::EncoderBias => "encoder_bias",
            ParamClass::DecoderWeight => "decoder_weight",
            ParamClass::DecoderBias => "decoder_bias",
            ParamClass::GateWeight => "gate_weight",
            ParamClass::GateBias => "gate_bias",
            ParamClass::HeadWeight => "head_weight",
            ParamClass::HeadBias => "head_bias",
        }
    }
}

/// Callback used to walk every parameter tensor of a model in a stable
/// order.
pub type ParamVisitor<'a, F> = dyn FnMut(&str, ParamClass, &Tensor<F>) + 'a;
pub type ParamVisitorMut<'a, F> = dyn FnMut(&str, ParamClass, &mut Tensor<F>) + 'a;

/// Fan-in-scaled uniform draw in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine map `x[B,I] -> x W + b` with `W: [I,O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> LinearParams<F> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            weight: fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BoundLinear {
        BoundLinear {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    pub fn visit(&self, prefix: &str, wc: ParamClass, bc: ParamClass, f: &mut ParamVisitor<'_, F>) {
        f(&format!("{prefix}.weight"), wc, &self.weight);
        f(&format!("{prefix}.bias"), bc, &self.bias);
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        wc: ParamClass,
        bc: ParamClass,
        f: &mut ParamVisitorMut<'_, F>,
    ) {
        f(&format!("{prefix}.weight"), wc, &mut self.weight);
        f(&format!("{prefix}.bias"), bc, &mut self.bias);
    }

    pub fn cast<G: Scalar>(&self) -> LinearParams<G> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

pub fn linear_forward<F: Scalar>(g: &mut Graph<F>, layer: BoundLinear, x: Var) -> Var {
    let y = g.matmul(x, layer.weight);
    g.add_row(y, layer.bias)
}

/// Two-layer perceptron with a configurable hidden activation.
pub fn mlp2_forward<F: Scalar>(
    g: &mut Graph<F>,
    first: BoundLinear,
    second: BoundLinear,
    x: Var,
    activation: Activation,
) -> Var {
    let h = linear_forward(g, first, x);
    let h = match activation {
        Activation::Relu => g.relu(h),
        Activation::Identity => h,
    };
    linear_forward(g, second, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};

    #[test]
    fn fan_in_bound_holds() {
        let mut rng = stream(0, Concern::Init, 0);
        let t: Tensor<f64> = fan_in_uniform(&[64, 64], 64, &mut rng);
        let bound = 1.0 / 8.0;
        assert!(t.data().iter().all(|&v| v.abs() <= bound));
        assert!(t.data().iter().any(|&v| v.abs() > bound / 10.0));
    }

    #[test]
    fn linear_zero_init_maps_to_bias() {
        let layer = LinearParams::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g);
        let x = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 3.0]));
        let y = linear_forward(&mut g, bound, x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }
}
