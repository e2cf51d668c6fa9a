//! Position, orientation, balanced pose and multi-scene losses.
//!
//! The pose loss balances the two error terms through the learnable
//! scalars `s_x`, `s_q`:
//! `L_p = L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q`,
//! and the multi-scene loss adds the scene negative log likelihood.

use std::rc::Rc;

use thiserror::Error;

use crate::model::ForwardOutput;
use crate::nn::{param_tensor, Mode};
use crate::pose::Pose;
use crate::rng::RngState;
use crate::tensor::{Element, Init, ParamSet, Parameter, Tensor, TensorError};

/// Default balance initializations: position errors (meters) are
/// numerically much larger than quaternion chord errors, so the
/// orientation term starts up-weighted.
pub const DEFAULT_S_X: f64 = 0.0;
pub const DEFAULT_S_Q: f64 = -3.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("predicted quaternion norm {0} too small to normalize")]
    DegenerateOrientation(f64),
    #[error("scene index {index} out of range 0..{n}")]
    SceneOutOfRange { index: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Learnable loss-balancing scalars, part of the model parameter set.
pub struct LossParams<E: Element> {
    pub s_x: Rc<Parameter<E>>,
    pub s_q: Rc<Parameter<E>>,
}

impl<E: Element> LossParams<E> {
    pub fn register(params: &mut ParamSet<E>, rng: &mut RngState) -> Self {
        LossParams {
            s_x: params.register("loss.s_x", &[1], Init::Const(DEFAULT_S_X), rng),
            s_q: params.register("loss.s_q", &[1], Init::Const(DEFAULT_S_Q), rng),
        }
    }

    pub fn set(&self, s_x: f64, s_q: f64) {
        self.s_x.set_value(vec![E::from_f64(s_x)]);
        self.s_q.set_value(vec![E::from_f64(s_q)]);
    }
}

/// `|| x0 - x_hat ||_2`, differentiable in `x_hat`.
pub fn position_loss<E: Element>(
    x_hat: &Tensor<E>,
    x0: &[f64; 3],
) -> Result<Tensor<E>, LossError> {
    let target = Tensor::from_vec(x0.iter().map(|&v| E::from_f64(v)).collect(), &[3])?;
    Ok(target.sub(x_hat)?.l2_norm()?)
}

/// `|| q0 - q_hat / ||q_hat|| ||_2`, differentiable through the
/// normalization. `q0` must be unit and sign-canonical.
pub fn orientation_loss<E: Element>(
    q_hat: &Tensor<E>,
    q0: &[f64; 4],
) -> Result<Tensor<E>, LossError> {
    let norm = q_hat.l2_norm()?;
    let n = norm.item().to_f64();
    if n <= 1e-8 {
        return Err(LossError::DegenerateOrientation(n));
    }
    let unit = q_hat.scale_by(&norm.recip())?;
    let target = Tensor::from_vec(q0.iter().map(|&v| E::from_f64(v)).collect(), &[4])?;
    Ok(target.sub(&unit)?.l2_norm()?)
}

/// Learnable-weighted combination of the two pose terms; gradients flow to
/// the losses and to `s_x`, `s_q`.
pub fn pose_loss<E: Element>(
    l_x: &Tensor<E>,
    l_q: &Tensor<E>,
    params: &LossParams<E>,
    mode: Mode,
) -> Result<Tensor<E>, LossError> {
    let s_x = param_tensor(&params.s_x, mode);
    let s_q = param_tensor(&params.s_q, mode);
    let term_x = l_x.mul(&s_x.neg().exp())?.add(&s_x)?;
    let term_q = l_q.mul(&s_q.neg().exp())?.add(&s_q)?;
    Ok(term_x.add(&term_q)?)
}

/// Negative log likelihood of the true scene under the classifier:
/// `-logprobs[s0]`.
pub fn nll_scene<E: Element>(logprobs: &Tensor<E>, s0: usize) -> Result<Tensor<E>, LossError> {
    let n = logprobs.numel();
    if s0 >= n {
        return Err(LossError::SceneOutOfRange { index: s0, n });
    }
    Ok(logprobs.reshape(&[n, 1])?.gather_rows(&[s0])?.reshape(&[1])?.neg())
}

/// Balanced pose loss plus the scene NLL for one sample.
pub fn multiscene_loss<E: Element>(
    out: &ForwardOutput<E>,
    target: &Pose,
    s0: usize,
    params: &LossParams<E>,
    mode: Mode,
) -> Result<Tensor<E>, LossError> {
    let l_x = position_loss(&out.x_hat, &target.position)?;
    let l_q = orientation_loss(&out.q_hat, &target.orientation.to_array())?;
    let l_p = pose_loss(&l_x, &l_q, params, mode)?;
    let nll = nll_scene(&out.scene_logprobs, s0)?;
    Ok(l_p.add(&nll)?)
}
