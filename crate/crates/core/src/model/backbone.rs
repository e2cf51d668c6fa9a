//! Small trainable convolutional trunk standing in for a pretrained
//! backbone: a stride-2 stem followed by stride-2 gelu conv stages, tapped
//! at two strides to produce the position and orientation activation maps.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::nn::{param_tensor, Mode};
use crate::rng::RngState;
use crate::tensor::{Element, Init, ParamSet, Parameter, Tensor, TensorError};

struct ConvStage<E: Element> {
    kernel: Rc<Parameter<E>>,
    bias: Rc<Parameter<E>>,
}

/// Activation maps for the two regression tasks. The orientation map sits
/// at half the stride (twice the resolution) of the position map.
pub struct ActivationPair<E: Element> {
    pub a_x: Tensor<E>,
    pub a_q: Tensor<E>,
}

pub struct Backbone<E: Element> {
    stages: Vec<ConvStage<E>>,
    /// Stage index producing the orientation map.
    tap_q: usize,
    input_hw: usize,
}

impl<E: Element> Backbone<E> {
    pub fn new(params: &mut ParamSet<E>, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in cfg.backbone_channels.iter().enumerate() {
            // He initialization: the flat transformer init shrinks the
            // activation variance roughly tenfold per conv stage
            let std = (2.0 / (9.0 * in_ch as f64)).sqrt();
            stages.push(ConvStage {
                kernel: params.register(
                    format!("backbone.stage{i}.kernel"),
                    &[3, 3, in_ch, out_ch],
                    Init::Normal(std),
                    rng,
                ),
                bias: params.register(
                    format!("backbone.stage{i}.bias"),
                    &[out_ch],
                    Init::Zeros,
                    rng,
                ),
            });
            in_ch = out_ch;
        }
        let tap_q = cfg.map_q_stride.trailing_zeros() as usize - 1;
        Backbone { stages, tap_q, input_hw: cfg.input_hw }
    }

    /// `[hw, hw, 3]` image -> activation maps at the two configured strides.
    pub fn forward(
        &self,
        image: &Tensor<E>,
        mode: Mode,
    ) -> Result<ActivationPair<E>, TensorError> {
        let hw = self.input_hw;
        if image.shape() != [hw, hw, 3] {
            return Err(TensorError::Shape {
                op: "backbone",
                msg: format!("expected [{hw}, {hw}, 3] input, got {:?}", image.shape()),
            });
        }
        let mut current = image.clone();
        let mut a_q = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let k = param_tensor(&stage.kernel, mode);
            let b = param_tensor(&stage.bias, mode);
            current = current.conv2d(&k, Some(&b), 2, 1)?.gelu();
            if i == self.tap_q {
                a_q = Some(current.clone());
            }
        }
        Ok(ActivationPair { a_x: current, a_q: a_q.expect("tap stage precedes final stage") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.c_d = 32;
        cfg.heads = 2;
        cfg.mlp_hidden = 32;
        cfg.n_scenes = 4;
        cfg.input_hw = 64;
        cfg.backbone_channels = vec![8, 12, 16, 24];
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn reference_geometry_at_full_resolution() {
        let cfg = ModelConfig::default();
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(0);
        let bb = Backbone::new(&mut params, &cfg, &mut rng);
        let image = Tensor::zeros(&[224, 224, 3]);
        let maps = bb.forward(&image, Mode::eval()).unwrap();
        assert_eq!(maps.a_x.shape(), &[14, 14, 112]);
        assert_eq!(maps.a_q.shape(), &[28, 28, 40]);
    }

    #[test]
    fn desk_geometry_follows_stride_arithmetic() {
        let cfg = desk_config();
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(0);
        let bb = Backbone::new(&mut params, &cfg, &mut rng);
        let image = Tensor::zeros(&[64, 64, 3]);
        let maps = bb.forward(&image, Mode::eval()).unwrap();
        assert_eq!(maps.a_x.shape(), &[4, 4, 24]);
        assert_eq!(maps.a_q.shape(), &[8, 8, 16]);
        // orientation map spatial extent is exactly twice the position map's
        assert_eq!(maps.a_q.shape()[0], 2 * maps.a_x.shape()[0]);
    }

    #[test]
    fn zero_image_with_zero_bias_backbone_yields_zero_maps() {
        let cfg = desk_config();
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(0);
        let bb = Backbone::new(&mut params, &cfg, &mut rng);
        // biases are zero-initialized already; make it explicit
        for p in params.iter().filter(|p| p.name().ends_with(".bias")) {
            p.set_value(vec![0.0; p.numel()]);
        }
        let image = Tensor::zeros(&[64, 64, 3]);
        let maps = bb.forward(&image, Mode::eval()).unwrap();
        assert!(maps.a_x.data().iter().all(|&v| v == 0.0));
        assert!(maps.a_q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_reported() {
        let cfg = desk_config();
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(0);
        let bb = Backbone::new(&mut params, &cfg, &mut rng);
        let image = Tensor::zeros(&[32, 32, 3]);
        assert!(bb.forward(&image, Mode::eval()).is_err());
    }
}
