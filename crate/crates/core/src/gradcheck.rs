//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side re-evaluates the forward function at perturbed
//! parameter values and never touches the recorded graph, so it is an
//! independent oracle for `backward`. All checks run in 64-bit.

use std::rc::Rc;

use crate::rng::RngState;
use crate::tensor::{backward, Parameter, Tensor};

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the analytic gradient of `f` (a scalar function of `params`,
/// rebuilt per call from the current parameter values) against central
/// differences with step `h`.
///
/// Every parameter is probed. Large parameters are probed at their
/// `max_coords` largest-magnitude analytic-gradient coordinates: those
/// carry the actual signal, whereas coordinates whose true derivative
/// sits near the FD rounding floor only measure cancellation noise. A
/// parameter whose gradient is dropped entirely still fails loudly: its
/// probed coordinates read zero analytically against a healthy numeric
/// difference.
///
/// Returns the maximum relative error over all probed coordinates.
pub fn grad_check<F>(params: &[Rc<Parameter<f64>>], f: F, h: f64, max_coords: usize) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    grad_check_report(params, f, h, max_coords).max_rel_err
}

/// As `grad_check` but reporting where the worst disagreement sits.
pub fn grad_check_report<F>(
    params: &[Rc<Parameter<f64>>],
    f: F,
    h: f64,
    max_coords: usize,
) -> GradCheckReport
where
    F: Fn() -> Tensor<f64>,
{
    for p in params {
        p.clear_grad();
    }
    let loss = f();
    assert_eq!(loss.numel(), 1, "grad_check target must be scalar");
    backward(&loss).expect("grad_check: backward failed");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport::default();
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                grad[b].abs().partial_cmp(&grad[a].abs()).unwrap().then(a.cmp(&b))
            });
            idx.truncate(max_coords);
            idx
        };
        for &i in &coords {
            let original = p.value()[i];
            p.update_value(|v| v[i] = original + h);
            let plus = f().item();
            p.update_value(|v| v[i] = original - h);
            let minus = f().item();
            p.update_value(|v| v[i] = original);
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = p.name().to_string();
                report.worst_coord = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    for p in params {
        p.clear_grad();
    }
    report
}

/// Standard step size for the 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Gate used by the verification suite.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Default seed of the verification suite.
pub const SUITE_SEED: u64 = 20250809;

/// A named gradient check over one registered differentiable operation.
pub struct OpCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(&mut RngState) -> f64>,
}

pub(crate) fn random_param(
    name: &str,
    shape: &[usize],
    rng: &mut RngState,
) -> Rc<Parameter<f64>> {
    use crate::tensor::Init;
    Rc::new(Parameter::new(name, shape, Init::Normal(1.0), rng))
}

/// Re-draw every parameter from `N(0, std)`. Finite differences measure a
/// point derivative, so checks are run at scales where the probed signals
/// stay well above the FD rounding floor; the tiny training
/// initialization attenuates gradients through deep compositions below it.
pub fn randomize_params(params: &[Rc<Parameter<f64>>], std: f64, rng: &mut RngState) {
    for p in params {
        p.set_value((0..p.numel()).map(|_| rng.normal_scaled(0.0, std)).collect());
    }
}

/// Probe a unary op on at least three random shapes.
fn check_unary(
    shapes: &[&[usize]],
    op: impl Fn(&Tensor<f64>) -> Tensor<f64> + Copy,
    rng: &mut RngState,
) -> f64 {
    let mut worst: f64 = 0.0;
    for shape in shapes {
        let p = random_param("x", shape, rng);
        let pc = Rc::clone(&p);
        let err = grad_check(&[p], move || op(&pc.tracked()).sum_all(), FD_STEP, 64);
        worst = worst.max(err);
    }
    worst
}

fn check_binary(
    shapes: &[(&[usize], &[usize])],
    op: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64> + Copy,
    rng: &mut RngState,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (sa, sb) in shapes {
        let a = random_param("a", sa, rng);
        let b = random_param("b", sb, rng);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        let err = grad_check(
            &[a, b],
            move || op(&ac.tracked(), &bc.tracked()).sum_all(),
            FD_STEP,
            64,);
        worst = worst.max(err);
    }
    worst
}

/// Gradient checks for every primitive tensor operation. Composite model
/// and loss checks are appended by `model_checks` in the verify module.
pub fn primitive_op_checks() -> Vec<OpCheck> {
    fn c(name: &'static str, run: impl Fn(&mut RngState) -> f64 + 'static) -> OpCheck {
        OpCheck { name, run: Box::new(run) }
    }
    vec![
        c("matmul", |rng| {
            check_binary(
                &[(&[2, 3], &[3, 4]), (&[1, 5], &[5, 1]), (&[4, 4], &[4, 2])],
                |a, b| a.matmul(b).unwrap(),
                rng,
            )
        }),
        c("add", |rng| {
            check_binary(
                &[(&[3], &[3]), (&[2, 4], &[2, 4]), (&[2, 2, 2], &[2, 2, 2])],
                |a, b| a.add(b).unwrap(),
                rng,
            )
        }),
        c("sub", |rng| {
            check_binary(
                &[(&[3], &[3]), (&[2, 4], &[2, 4]), (&[5, 1], &[5, 1])],
                |a, b| a.sub(b).unwrap(),
                rng,
            )
        }),
        c("mul", |rng| {
            check_binary(
                &[(&[3], &[3]), (&[2, 4], &[2, 4]), (&[2, 3, 2], &[2, 3, 2])],
                |a, b| a.mul(b).unwrap(),
                rng,
            )
        }),
        c("scale", |rng| {
            check_unary(&[&[3], &[2, 4], &[6]], |x| x.scale(-1.75), rng)
        }),
        c("scale_by", |rng| {
            check_binary(&[(&[3], &[1]), (&[2, 4], &[1]), (&[7], &[1])], |x, s| {
                x.scale_by(s).unwrap()
            }, rng)
        }),
        c("add_bias", |rng| {
            check_binary(
                &[(&[2, 3], &[3]), (&[4, 2], &[2]), (&[1, 5], &[5])],
                |x, b| x.add_bias(b).unwrap(),
                rng,
            )
        }),
        c("transpose", |rng| {
            check_unary(&[&[2, 3], &[4, 1], &[3, 3]], |x| x.transpose().unwrap(), rng)
        }),
        c("reshape", |rng| {
            check_unary(&[&[2, 3], &[6], &[1, 4]], |x| {
                let n = x.numel();
                x.reshape(&[n]).unwrap().exp()
            }, rng)
        }),
        c("concat", |rng| {
            let mut worst: f64 = 0.0;
            for axis in [0usize, 1] {
                let a = random_param("a", &[2, 3], rng);
                let b = random_param("b", &[2, 3], rng);
                let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
                let err = grad_check(
                    &[a, b],
                    move || {
                        let t = crate::tensor::concat(&[&ac.tracked(), &bc.tracked()], axis)
                            .unwrap();
                        t.exp().sum_all()
                    },
                    FD_STEP,
                    64,
            );
                worst = worst.max(err);
            }
            worst
        }),
        c("gather_rows", |rng| {
            check_unary(&[&[4, 3], &[5, 2], &[3, 3]], |x| {
                // repeated row exercises accumulation
                x.gather_rows(&[0, 2, 0]).unwrap().exp()
            }, rng)
        }),
        c("slice_cols", |rng| {
            check_unary(&[&[3, 4], &[2, 5], &[4, 2]], |x| {
                x.slice_cols(1, 1).unwrap().exp()
            }, rng)
        }),
        c("sum", |rng| check_unary(&[&[4], &[2, 3], &[2, 2, 2]], |x| x.sum_all(), rng)),
        c("mean", |rng| {
            check_unary(&[&[4], &[2, 3], &[5]], |x| x.mean_all().exp(), rng)
        }),
        c("sum_axis", |rng| {
            let mut worst: f64 = 0.0;
            for axis in [0usize, 1] {
                worst = worst.max(check_unary(
                    &[&[2, 3], &[4, 2], &[3, 3]],
                    move |x| x.sum_axis(axis).unwrap().exp(),
                    rng,
                ));
            }
            worst
        }),
        c("exp", |rng| check_unary(&[&[3], &[2, 4], &[5]], |x| x.exp(), rng)),
        c("sqrt", |rng| {
            // keep inputs away from the root singularity
            check_unary(&[&[3], &[2, 4], &[5]], |x| x.mul(x).unwrap().scale(0.5).exp().sqrt(), rng)
        }),
        c("recip", |rng| {
            check_unary(&[&[3], &[2, 2], &[4]], |x| x.exp().recip(), rng)
        }),
        c("gelu", |rng| check_unary(&[&[4], &[2, 5], &[7]], |x| x.gelu(), rng)),
        c("softmax", |rng| {
            let mut worst: f64 = 0.0;
            for (shape, axis) in [(&[5][..], 0usize), (&[3, 4][..], 1), (&[2, 3][..], 0)] {
                worst = worst.max(check_unary(
                    &[shape],
                    move |x| {
                        // weight the entries so the row-sum-1 null space is visible
                        let w: Vec<f64> = (0..x.numel()).map(|i| (i as f64 + 1.0) * 0.3).collect();
                        let w = Tensor::from_vec(w, x.shape()).unwrap();
                        x.softmax(axis).unwrap().mul(&w).unwrap()
                    },
                    rng,
                ));
            }
            worst
        }),
        c("log_softmax", |rng| {
            let mut worst: f64 = 0.0;
            for (shape, axis) in [(&[5][..], 0usize), (&[3, 4][..], 1), (&[2, 3][..], 0)] {
                worst = worst.max(check_unary(
                    &[shape],
                    move |x| {
                        let w: Vec<f64> = (0..x.numel()).map(|i| (i as f64 + 1.0) * 0.3).collect();
                        let w = Tensor::from_vec(w, x.shape()).unwrap();
                        x.log_softmax(axis).unwrap().mul(&w).unwrap()
                    },
                    rng,
                ));
            }
            worst
        }),
        c("layer_norm", |rng| {
            let mut worst: f64 = 0.0;
            for shape in [&[2, 4][..], &[3, 5][..], &[1, 6][..]] {
                let x = random_param("x", shape, rng);
                let c_dim = shape[shape.len() - 1];
                let gamma = random_param("gamma", &[c_dim], rng);
                let beta = random_param("beta", &[c_dim], rng);
                let (xc, gc, bc) = (Rc::clone(&x), Rc::clone(&gamma), Rc::clone(&beta));
                let err = grad_check(
                    &[x, gamma, beta],
                    move || {
                        let w: Vec<f64> = (0..xc.numel())
                            .map(|i| 0.3 + 0.25 * (i % 7) as f64)
                            .collect();
                        let w = Tensor::from_vec(w, xc.shape()).unwrap();
                        xc.tracked()
                            .layer_norm(&gc.tracked(), &bc.tracked(), 1e-5)
                            .unwrap()
                            .mul(&w)
                            .unwrap()
                            .sum_all()
                    },
                    FD_STEP,
                    64,
            );
                worst = worst.max(err);
            }
            worst
        }),
        c("dropout", |rng| {
            let mut worst: f64 = 0.0;
            for shape in [&[8][..], &[4, 4][..], &[3, 5][..]] {
                let p = random_param("x", shape, rng);
                let pc = Rc::clone(&p);
                // fixed mask stream so the perturbed evaluations see the
                // same mask as the analytic pass
                let mask_rng = RngState::new(rng.next_u64());
                let err = grad_check(
                    &[p],
                    move || {
                        let mut r = mask_rng;
                        pc.tracked().dropout(0.4, &mut r, true).unwrap().exp().sum_all()
                    },
                    FD_STEP,
                    64,
            );
                worst = worst.max(err);
            }
            worst
        }),
        c("conv2d", |rng| {
            let mut worst: f64 = 0.0;
            for (hw, kw, stride, pad) in [(5usize, 3usize, 1usize, 1usize), (6, 3, 2, 1), (4, 1, 1, 0)] {
                let x = random_param("x", &[hw, hw, 2], rng);
                let k = random_param("k", &[kw, kw, 2, 3], rng);
                let b = random_param("b", &[3], rng);
                let (xc, kc, bc) = (Rc::clone(&x), Rc::clone(&k), Rc::clone(&b));
                let err = grad_check(
                    &[x, k, b],
                    move || {
                        xc.tracked()
                            .conv2d(&kc.tracked(), Some(&bc.tracked()), stride, pad)
                            .unwrap()
                            .gelu()
                            .sum_all()
                    },
                    FD_STEP,
                    48,);
                worst = worst.max(err);
            }
            worst
        }),
        c("max_pool2d", |rng| {
            let mut worst: f64 = 0.0;
            for (hw, win, stride) in [(4usize, 2usize, 2usize), (5, 3, 1), (6, 2, 2)] {
                let x = random_param("x", &[hw, hw, 2], rng);
                let xc = Rc::clone(&x);
                let err = grad_check(
                    &[x],
                    move || xc.tracked().max_pool2d(win, stride).unwrap().exp().sum_all(),
                    FD_STEP,
                    48,);
                worst = worst.max(err);
            }
            worst
        }),
        c("l2_norm", |rng| {
            check_unary(&[&[4], &[3, 5], &[2, 2]], |x| x.l2_norm().unwrap().exp(), rng)
        }),
    ]
}

/// Tiny architecture used by the end-to-end gradient check.
pub fn tiny_check_config() -> crate::config::ModelConfig {
    let mut cfg = crate::config::ModelConfig::default();
    cfg.c_d = 16;
    cfg.heads = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.mlp_hidden = 16;
    cfg.head_hidden = 24;
    cfg.dropout_p = 0.1;
    cfg.n_scenes = 3;
    cfg.input_hw = 32;
    cfg.backbone_channels = vec![4, 6, 8, 10];
    cfg.validate().expect("tiny check config is valid");
    cfg
}

/// Gradient checks of the composed blocks and losses, ending with the
/// full multi-scene loss through the tiny model.
pub fn composite_checks() -> Vec<OpCheck> {
    use crate::loss;
    use crate::nn::{Mlp, Mode, MultiHeadAttention};
    use crate::pose::Quaternion;
    use crate::tensor::ParamSet;

    fn c(name: &'static str, run: impl Fn(&mut RngState) -> f64 + 'static) -> OpCheck {
        OpCheck { name, run: Box::new(run) }
    }
    vec![
        c("multi_head_attention", |rng| {
            let mut params = ParamSet::<f64>::new();
            let mha = Rc::new(MultiHeadAttention::new(&mut params, "mha", 8, 2, rng));
            let x = random_param("x", &[4, 8], rng);
            let all: Vec<_> = params.iter().cloned().chain([Rc::clone(&x)]).collect();
            randomize_params(&all, 0.3, rng);
            let xc = Rc::clone(&x);
            grad_check(
                &all,
                move || {
                    let t = xc.tracked();
                    let (out, _) = mha.forward(&t, &t, &t, Mode::grad_eval()).unwrap();
                    out.gelu().sum_all()
                },
                FD_STEP,
                16,
            )
        }),
        c("transformer_mlp", |rng| {
            let mut params = ParamSet::<f64>::new();
            let mlp = Rc::new(Mlp::new(&mut params, "mlp", 6, 9, 0.0, rng));
            let x = random_param("x", &[3, 6], rng);
            let all: Vec<_> = params.iter().cloned().chain([Rc::clone(&x)]).collect();
            randomize_params(&all, 0.3, rng);
            let xc = Rc::clone(&x);
            grad_check(
                &all,
                move || {
                    let mut r = RngState::new(0);
                    mlp.forward(&xc.tracked(), Mode::grad_eval(), &mut r).unwrap().sum_all()
                },
                FD_STEP,
                16,
            )
        }),
        c("encoder_forward", |rng| {
            let mut params = ParamSet::<f64>::new();
            let enc = Rc::new(crate::model::Encoder::new(
                &mut params, "enc", 1, 16, 2, 16, 0.1, rng,
            ));
            let z = random_param("z", &[6, 16], rng);
            let pos = random_param("pos", &[6, 16], rng);
            let all: Vec<_> =
                params.iter().cloned().chain([Rc::clone(&z), Rc::clone(&pos)]).collect();
            randomize_params(&all, 0.3, rng);
            let (zc, pc) = (Rc::clone(&z), Rc::clone(&pos));
            grad_check(
                &all,
                move || {
                    let mut r = RngState::new(0);
                    let (out, _) = enc
                        .forward(&zc.tracked(), &pc.tracked(), Mode::grad_eval(), &mut r)
                        .unwrap();
                    out.gelu().sum_all()
                },
                FD_STEP,
                8,
            )
        }),
        c("decoder_forward", |rng| {
            let mut params = ParamSet::<f64>::new();
            let dec = Rc::new(crate::model::Decoder::new(
                &mut params, "dec", 1, 12, 2, 12, 0.1, rng,
            ));
            let queries = random_param("queries", &[3, 12], rng);
            let memory = random_param("memory", &[5, 12], rng);
            let all: Vec<_> = params
                .iter()
                .cloned()
                .chain([Rc::clone(&queries), Rc::clone(&memory)])
                .collect();
            randomize_params(&all, 0.3, rng);
            let (qc, mc) = (Rc::clone(&queries), Rc::clone(&memory));
            grad_check(
                &all,
                move || {
                    let mut r = RngState::new(0);
                    let pos = Tensor::zeros(&[5, 12]);
                    let (out, _) = dec
                        .forward(&qc.tracked(), &mc.tracked(), &pos, Mode::grad_eval(), &mut r)
                        .unwrap();
                    out.gelu().sum_all()
                },
                FD_STEP,
                8,
            )
        }),
        c("position_loss", |rng| {
            let p = random_param("x_hat", &[3], rng);
            let pc = Rc::clone(&p);
            grad_check(
                &[p],
                move || loss::position_loss(&pc.tracked(), &[0.4, -1.2, 0.8]).unwrap(),
                FD_STEP,
                8,)
        }),
        c("orientation_loss", |rng| {
            let p = random_param("q_hat", &[4], rng);
            let q0 = Quaternion::new(0.4, -0.2, 0.7, 0.5).canonical().unwrap().to_array();
            let pc = Rc::clone(&p);
            grad_check(
                &[p],
                move || loss::orientation_loss(&pc.tracked(), &q0).unwrap(),
                FD_STEP,
                8,)
        }),
        c("pose_loss", |rng| {
            let mut params = ParamSet::<f64>::new();
            let lp = Rc::new(loss::LossParams::register(&mut params, rng));
            lp.set(0.3, -1.1);
            let l_x = random_param("l_x", &[1], rng);
            let l_q = random_param("l_q", &[1], rng);
            // keep the error terms positive
            l_x.set_value(vec![rng.uniform_range(0.5, 2.0)]);
            l_q.set_value(vec![rng.uniform_range(0.1, 1.0)]);
            let all: Vec<_> =
                params.iter().cloned().chain([Rc::clone(&l_x), Rc::clone(&l_q)]).collect();
            let (lxc, lqc) = (Rc::clone(&l_x), Rc::clone(&l_q));
            grad_check(
                &all,
                move || {
                    loss::pose_loss(&lxc.tracked(), &lqc.tracked(), &lp, Mode::grad_eval())
                        .unwrap()
                },
                FD_STEP,
                8,)
        }),
        c("nll_scene", |rng| {
            let scores = random_param("scores", &[5], rng);
            let sc = Rc::clone(&scores);
            grad_check(
                &[scores],
                move || loss::nll_scene(&sc.tracked().log_softmax(0).unwrap(), 2).unwrap(),
                FD_STEP,
                8,)
        }),
        c("multiscene_loss_end_to_end", |rng| {
            let cfg = tiny_check_config();
            let model = Rc::new(
                crate::model::Model::<f64>::new(&cfg, rng.next_u64()).expect("tiny model"),
            );
            let all: Vec<_> = model.params.iter().cloned().collect();
            randomize_params(&all, 0.35, rng);
            let n = cfg.input_hw * cfg.input_hw * 3;
            let image = Tensor::from_vec(
                (0..n).map(|_| rng.normal()).collect(),
                &[cfg.input_hw, cfg.input_hw, 3],
            )
            .unwrap();
            let target = crate::pose::Pose::new(
                [0.5, -1.0, 1.5],
                Quaternion::new(0.8, 0.2, -0.4, 0.4),
            )
            .unwrap();
            let s0 = 1usize;
            grad_check(
                &all,
                move || {
                    let mut r = RngState::new(0);
                    let out = model
                        .forward(&image, Some(s0), Mode::grad_eval(), &mut r)
                        .unwrap();
                    loss::multiscene_loss(&out, &target, s0, &model.loss_params, Mode::grad_eval())
                        .unwrap()
                },
                FD_STEP,
                3,
            )
        }),
    ]
}

/// Every registered differentiable operation: primitives first, then the
/// composed blocks and the end-to-end loss.
pub fn full_suite() -> Vec<OpCheck> {
    let mut checks = primitive_op_checks();
    checks.extend(composite_checks());
    checks
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn composite_suite_passes_tolerance() {
        let mut rng = RngState::new(20250809);
        for check in composite_checks() {
            let start = std::time::Instant::now();
            let err = (check.run)(&mut rng);
            println!("{}: max rel err {err:.3e} ({:?})", check.name, start.elapsed());
            assert!(err < FD_TOLERANCE, "op {} failed: {err}", check.name);
        }
    }
}
