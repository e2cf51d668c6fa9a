//! Neural building blocks composed from tensor ops: linear layers,
//! layer normalization, the two-layer MLP and multi-head attention.

use std::rc::Rc;

use crate::rng::RngState;
use crate::tensor::{concat, Element, Init, ParamSet, Parameter, Tensor, TensorError};

/// Weight initialization std used throughout the model.
pub const INIT_STD: f64 = 0.02;

/// Forward-pass mode: `training` gates dropout, `track` gates gradient
/// recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub track: bool,
}

impl Mode {
    pub fn train() -> Self {
        Mode { training: true, track: true }
    }
    pub fn eval() -> Self {
        Mode { training: false, track: false }
    }
    /// Dropout off, gradients on: used by the finite-difference checks.
    pub fn grad_eval() -> Self {
        Mode { training: false, track: true }
    }
}

pub(crate) fn param_tensor<E: Element>(p: &Rc<Parameter<E>>, mode: Mode) -> Tensor<E> {
    if mode.track {
        p.tracked()
    } else {
        p.constant()
    }
}

/// Fully connected layer `y = x W + b` with weight shape `[in, out]`.
pub struct Linear<E: Element> {
    pub weight: Rc<Parameter<E>>,
    pub bias: Option<Rc<Parameter<E>>>,
}

impl<E: Element> Linear<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        let mut lin = Linear::without_bias(params, name, in_dim, out_dim, rng);
        lin.bias =
            Some(params.register(format!("{name}.bias"), &[out_dim], Init::Zeros, rng));
        lin
    }

    pub fn without_bias(
        params: &mut ParamSet<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        Linear {
            weight: params.register(
                format!("{name}.weight"),
                &[in_dim, out_dim],
                Init::Normal(INIT_STD),
                rng,
            ),
            bias: None,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>, TensorError> {
        let y = x.matmul(&param_tensor(&self.weight, mode))?;
        match &self.bias {
            Some(b) => y.add_bias(&param_tensor(b, mode)),
            None => Ok(y),
        }
    }

    pub fn bias_param(&self) -> &Rc<Parameter<E>> {
        self.bias.as_ref().expect("layer has no bias")
    }
}

/// LayerNorm over the last axis with learnt scale and shift.
pub struct LayerNorm<E: Element> {
    pub gamma: Rc<Parameter<E>>,
    pub beta: Rc<Parameter<E>>,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<E: Element> LayerNorm<E> {
    pub fn new(params: &mut ParamSet<E>, name: &str, dim: usize, rng: &mut RngState) -> Self {
        LayerNorm {
            gamma: params.register(format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: params.register(format!("{name}.beta"), &[dim], Init::Zeros, rng),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>, TensorError> {
        x.layer_norm(&param_tensor(&self.gamma, mode), &param_tensor(&self.beta, mode), self.eps)
    }
}

/// Two-layer MLP with gelu, the transformer feed-forward block. Dropout is
/// applied after the activation.
pub struct Mlp<E: Element> {
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
    pub dropout_p: f64,
}

impl<E: Element> Mlp<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout_p: f64,
        rng: &mut RngState,
    ) -> Self {
        Mlp {
            lin1: Linear::new(params, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(params, &format!("{name}.lin2"), hidden, dim, rng),
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Tensor<E>, TensorError> {
        let h = self.lin1.forward(x, mode)?.gelu().dropout(self.dropout_p, rng, mode.training)?;
        self.lin2.forward(&h, mode)
    }
}

/// Attention weights of one call, kept for visualization: `[heads, Lq, Lk]`
/// rows summing to one.
pub type AttnMap<E> = Tensor<E>;

/// Standard scaled dot-product multi-head attention with input, output
/// projections and per-head softmax.
pub struct MultiHeadAttention<E: Element> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub heads: usize,
    pub dim: usize,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngState,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention width {dim} not divisible by {heads}");
        MultiHeadAttention {
            wq: Linear::new(params, &format!("{name}.wq"), dim, dim, rng),
            // a key bias shifts every score in a row uniformly and cancels
            // in the softmax, so the key projection carries none
            wk: Linear::without_bias(params, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(params, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(params, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `q_in: [Lq, C]`, `k_in/v_in: [Lk, C]` -> (`[Lq, C]`, attention).
    pub fn forward(
        &self,
        q_in: &Tensor<E>,
        k_in: &Tensor<E>,
        v_in: &Tensor<E>,
        mode: Mode,
    ) -> Result<(Tensor<E>, AttnMap<E>), TensorError> {
        let lq = q_in.shape()[0];
        let lk = k_in.shape()[0];
        let q = self.wq.forward(q_in, mode)?;
        let k = self.wk.forward(k_in, mode)?;
        let v = self.wv.forward(v_in, mode)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut attn_data = Vec::with_capacity(self.heads * lq * lk);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            attn_data.extend_from_slice(attn.data());
            outputs.push(attn.matmul(&vh)?);
        }
        let merged = concat(&outputs.iter().collect::<Vec<_>>(), 1)?;
        let out = self.wo.forward(&merged, mode)?;
        let attn = Tensor::from_vec(attn_data, &[self.heads, lq, lk])?;
        Ok((out, attn))
    }
}
