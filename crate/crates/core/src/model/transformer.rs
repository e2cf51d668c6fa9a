//! Transformer encoder and decoder with pre-norm layers and positional
//! terms injected into queries and keys at every attention layer.

use std::rc::Rc;

use crate::nn::{param_tensor, LayerNorm, Mlp, Mode, MultiHeadAttention, INIT_STD};
use crate::rng::RngState;
use crate::tensor::{concat, Element, Init, ParamSet, Parameter, Tensor, TensorError};

/// Separable learned 2-d positional encoding: one embedding table per
/// image axis, concatenated per spatial location.
pub struct PositionalEncoding2d<E: Element> {
    pub e_u: Rc<Parameter<E>>,
    pub e_v: Rc<Parameter<E>>,
    h: usize,
    w: usize,
}

impl<E: Element> PositionalEncoding2d<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        h: usize,
        w: usize,
        c_d: usize,
        rng: &mut RngState,
    ) -> Self {
        debug_assert!(c_d % 2 == 0);
        PositionalEncoding2d {
            e_u: params.register(
                format!("{name}.e_u"),
                &[w, c_d / 2],
                Init::Normal(INIT_STD),
                rng,
            ),
            e_v: params.register(
                format!("{name}.e_v"),
                &[h, c_d / 2],
                Init::Normal(INIT_STD),
                rng,
            ),
            h,
            w,
        }
    }

    /// Row for flattened position `(i, j)` (row-major, `i` over rows) is
    /// `concat(E_u[j], E_v[i])`.
    pub fn forward(&self, mode: Mode) -> Result<Tensor<E>, TensorError> {
        let mut idx_u = Vec::with_capacity(self.h * self.w);
        let mut idx_v = Vec::with_capacity(self.h * self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                idx_u.push(j);
                idx_v.push(i);
            }
        }
        let u = param_tensor(&self.e_u, mode).gather_rows(&idx_u)?;
        let v = param_tensor(&self.e_v, mode).gather_rows(&idx_v)?;
        concat(&[&u, &v], 1)
    }
}

/// 1x1 projection of an activation map to the transformer width plus the
/// positional encoding, producing the encoder input sequence.
pub struct SequencePrep<E: Element> {
    proj_kernel: Rc<Parameter<E>>,
    proj_bias: Rc<Parameter<E>>,
    pub pos: PositionalEncoding2d<E>,
    c_d: usize,
}

impl<E: Element> SequencePrep<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        h: usize,
        w: usize,
        c_a: usize,
        c_d: usize,
        rng: &mut RngState,
    ) -> Self {
        SequencePrep {
            proj_kernel: params.register(
                format!("{name}.proj.kernel"),
                &[1, 1, c_a, c_d],
                Init::Normal(INIT_STD),
                rng,
            ),
            proj_bias: params.register(
                format!("{name}.proj.bias"),
                &[c_d],
                Init::Zeros,
                rng,
            ),
            pos: PositionalEncoding2d::new(params, &format!("{name}.pos"), h, w, c_d, rng),
            c_d,
        }
    }

    /// `[h, w, c_a]` map -> (input sequence `[h*w, c_d]`, positional
    /// encoding `[h*w, c_d]`). The sequence already includes the encoding;
    /// the encoding is additionally re-injected at every attention layer.
    pub fn forward(
        &self,
        map: &Tensor<E>,
        mode: Mode,
    ) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
        let (h, w) = match map.shape() {
            [h, w, _] => (*h, *w),
            s => {
                return Err(TensorError::Shape {
                    op: "prepare_sequence",
                    msg: format!("expected [h,w,c] map, got {s:?}"),
                })
            }
        };
        let k = param_tensor(&self.proj_kernel, mode);
        let b = param_tensor(&self.proj_bias, mode);
        let projected = map.conv2d(&k, Some(&b), 1, 0)?;
        let flat = projected.reshape(&[h * w, self.c_d])?;
        let e_pos = self.pos.forward(mode)?;
        let z0 = flat.add(&e_pos)?;
        Ok((z0, e_pos))
    }
}

struct EncoderLayer<E: Element> {
    norm1: LayerNorm<E>,
    attn: MultiHeadAttention<E>,
    norm2: LayerNorm<E>,
    mlp: Mlp<E>,
    dropout_p: f64,
}

impl<E: Element> EncoderLayer<E> {
    fn new(
        params: &mut ParamSet<E>,
        name: &str,
        c_d: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout_p: f64,
        rng: &mut RngState,
    ) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), c_d, rng),
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), c_d, heads, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), c_d, rng),
            mlp: Mlp::new(params, &format!("{name}.mlp"), c_d, mlp_hidden, dropout_p, rng),
            dropout_p,
        }
    }

    fn forward(
        &self,
        z: &Tensor<E>,
        e_pos: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
        let t = self.norm1.forward(z, mode)?;
        let qk = t.add(e_pos)?; // positional terms on queries and keys only
        let (attn_out, attn) = self.attn.forward(&qk, &qk, &t, mode)?;
        let z = z.add(&attn_out.dropout(self.dropout_p, rng, mode.training)?)?;
        let t = self.norm2.forward(&z, mode)?;
        let mlp_out = self.mlp.forward(&t, mode, rng)?;
        let z = z.add(&mlp_out.dropout(self.dropout_p, rng, mode.training)?)?;
        Ok((z, attn))
    }
}

pub struct Encoder<E: Element> {
    layers: Vec<EncoderLayer<E>>,
    final_norm: LayerNorm<E>,
}

impl<E: Element> Encoder<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        layers: usize,
        c_d: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout_p: f64,
        rng: &mut RngState,
    ) -> Self {
        Encoder {
            layers: (0..layers)
                .map(|l| {
                    EncoderLayer::new(
                        params,
                        &format!("{name}.layer{l}"),
                        c_d,
                        heads,
                        mlp_hidden,
                        dropout_p,
                        rng,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(params, &format!("{name}.final_norm"), c_d, rng),
        }
    }

    /// Returns the encoded sequence and the self-attention of every layer
    /// (last entry is the final layer's, kept for visualization).
    pub fn forward(
        &self,
        z0: &Tensor<E>,
        e_pos: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Tensor<E>, Vec<Tensor<E>>), TensorError> {
        let mut z = z0.clone();
        let mut attns = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, attn) = layer.forward(&z, e_pos, mode, rng)?;
            z = next;
            attns.push(attn.detached());
        }
        Ok((self.final_norm.forward(&z, mode)?, attns))
    }
}

struct DecoderLayer<E: Element> {
    norm1: LayerNorm<E>,
    self_attn: MultiHeadAttention<E>,
    norm2: LayerNorm<E>,
    cross_attn: MultiHeadAttention<E>,
    norm3: LayerNorm<E>,
    mlp: Mlp<E>,
    dropout_p: f64,
}

impl<E: Element> DecoderLayer<E> {
    fn new(
        params: &mut ParamSet<E>,
        name: &str,
        c_d: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout_p: f64,
        rng: &mut RngState,
    ) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), c_d, rng),
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), c_d, heads, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), c_d, rng),
            cross_attn: MultiHeadAttention::new(
                params,
                &format!("{name}.cross_attn"),
                c_d,
                heads,
                rng,
            ),
            norm3: LayerNorm::new(params, &format!("{name}.norm3"), c_d, rng),
            mlp: Mlp::new(params, &format!("{name}.mlp"), c_d, mlp_hidden, dropout_p, rng),
            dropout_p,
        }
    }

    fn forward(
        &self,
        y: &Tensor<E>,
        queries: &Tensor<E>,
        memory: &Tensor<E>,
        mem_pos: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>), TensorError> {
        // self-attention over the scene slots; query embeddings act as
        // their own positional terms
        let t = self.norm1.forward(y, mode)?;
        let qk = t.add(queries)?;
        let (sa, self_attn) = self.self_attn.forward(&qk, &qk, &t, mode)?;
        let y = y.add(&sa.dropout(self.dropout_p, rng, mode.training)?)?;
        // cross-attention into the encoded sequence
        let t = self.norm2.forward(&y, mode)?;
        let q = t.add(queries)?;
        let k = memory.add(mem_pos)?;
        let (ca, cross_attn) = self.cross_attn.forward(&q, &k, memory, mode)?;
        let y = y.add(&ca.dropout(self.dropout_p, rng, mode.training)?)?;
        // feed-forward
        let t = self.norm3.forward(&y, mode)?;
        let mlp_out = self.mlp.forward(&t, mode, rng)?;
        let y = y.add(&mlp_out.dropout(self.dropout_p, rng, mode.training)?)?;
        Ok((y, self_attn, cross_attn))
    }
}

/// Per-layer decoder attention maps.
pub struct DecoderAttn<E: Element> {
    pub self_attn: Vec<Tensor<E>>,
    pub cross_attn: Vec<Tensor<E>>,
}

pub struct Decoder<E: Element> {
    layers: Vec<DecoderLayer<E>>,
    final_norm: LayerNorm<E>,
}

impl<E: Element> Decoder<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        layers: usize,
        c_d: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout_p: f64,
        rng: &mut RngState,
    ) -> Self {
        Decoder {
            layers: (0..layers)
                .map(|l| {
                    DecoderLayer::new(
                        params,
                        &format!("{name}.layer{l}"),
                        c_d,
                        heads,
                        mlp_hidden,
                        dropout_p,
                        rng,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(params, &format!("{name}.final_norm"), c_d, rng),
        }
    }

    /// All scene slots decode in parallel; no causal masking.
    pub fn forward(
        &self,
        queries: &Tensor<E>,
        memory: &Tensor<E>,
        mem_pos: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Tensor<E>, DecoderAttn<E>), TensorError> {
        let mut y = queries.clone();
        let mut attn = DecoderAttn { self_attn: Vec::new(), cross_attn: Vec::new() };
        for layer in &self.layers {
            let (next, sa, ca) = layer.forward(&y, queries, memory, mem_pos, mode, rng)?;
            y = next;
            attn.self_attn.push(sa.detached());
            attn.cross_attn.push(ca.detached());
        }
        Ok((self.final_norm.forward(&y, mode)?, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, random_param, FD_STEP};

    #[test]
    fn positional_encoding_matches_direct_enumeration() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(0);
        let pos = PositionalEncoding2d::new(&mut params, "pos", 2, 2, 4, &mut rng);
        let e = pos.forward(Mode::eval()).unwrap();
        assert_eq!(e.shape(), &[4, 4]);
        let u = pos.e_u.value();
        let v = pos.e_v.value();
        // direct enumeration oracle: row (i,j) = [E_u[j], E_v[i]]
        let mut expected = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                expected.extend_from_slice(&u[j * 2..(j + 1) * 2]);
                expected.extend_from_slice(&v[i * 2..(i + 1) * 2]);
            }
        }
        assert_eq!(e.data(), &expected[..]);
    }

    #[test]
    fn positions_sharing_a_column_share_first_half() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(1);
        let pos = PositionalEncoding2d::new(&mut params, "pos", 3, 2, 8, &mut rng);
        let e = pos.forward(Mode::eval()).unwrap();
        // rows 0 and 2 are (i=0,j=0) and (i=1,j=0)
        let r0 = &e.data()[0..4];
        let r2 = &e.data()[2 * 8..2 * 8 + 4];
        assert_eq!(r0, r2);
    }

    #[test]
    fn zero_embeddings_give_zero_encoding() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(2);
        let pos = PositionalEncoding2d::new(&mut params, "pos", 2, 3, 6, &mut rng);
        pos.e_u.set_value(vec![0.0; pos.e_u.numel()]);
        pos.e_v.set_value(vec![0.0; pos.e_v.numel()]);
        let e = pos.forward(Mode::eval()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_activation_map_yields_pure_positional_sequence() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(3);
        let prep = SequencePrep::new(&mut params, "prep", 2, 2, 5, 8, &mut rng);
        let map = Tensor::zeros(&[2, 2, 5]);
        let (z0, e_pos) = prep.forward(&map, Mode::eval()).unwrap();
        assert_eq!(z0.shape(), &[4, 8]);
        assert_eq!(z0.data(), e_pos.data());
    }

    #[test]
    fn identity_projection_is_pure_flattening() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(4);
        let prep = SequencePrep::new(&mut params, "prep", 2, 2, 4, 4, &mut rng);
        // identity 1x1 kernel, zero bias, zero positional tables
        let mut eye = vec![0.0f32; 16];
        for c in 0..4 {
            eye[c * 4 + c] = 1.0;
        }
        prep.proj_kernel.set_value(eye);
        prep.proj_bias.set_value(vec![0.0; 4]);
        prep.pos.e_u.set_value(vec![0.0; prep.pos.e_u.numel()]);
        prep.pos.e_v.set_value(vec![0.0; prep.pos.e_v.numel()]);
        let map =
            Tensor::from_vec((0..16).map(|i| i as f32).collect(), &[2, 2, 4]).unwrap();
        let (z0, _) = prep.forward(&map, Mode::eval()).unwrap();
        assert_eq!(z0.data(), map.data());
    }

    #[test]
    fn encoder_with_zero_weights_collapses_to_final_norm() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(5);
        let enc = Encoder::new(&mut params, "enc", 1, 6, 2, 6, 0.0, &mut rng);
        // zero every weight and bias; layer norms keep gamma 1 / beta 0
        for p in params.iter() {
            if p.name().contains("weight") || p.name().contains("bias") {
                p.set_value(vec![0.0; p.numel()]);
            }
        }
        let mut r = RngState::new(6);
        let z0 = Tensor::from_vec((0..18).map(|_| r.normal() as f32).collect(), &[3, 6]).unwrap();
        let e_pos = Tensor::zeros(&[3, 6]);
        let (out, attns) = enc.forward(&z0, &e_pos, Mode::eval(), &mut r).unwrap();
        assert_eq!(attns.len(), 1);
        let gamma = Tensor::filled(&[6], 1.0f32);
        let beta = Tensor::zeros(&[6]);
        let expected = z0.layer_norm(&gamma, &beta, crate::nn::LAYER_NORM_EPS).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_preserves_shape_for_any_depth() {
        for layers in [1, 2, 3] {
            let mut params = ParamSet::<f32>::new();
            let mut rng = RngState::new(7);
            let enc = Encoder::new(&mut params, "enc", layers, 8, 2, 8, 0.0, &mut rng);
            let z0 = Tensor::zeros(&[5, 8]);
            let e_pos = Tensor::zeros(&[5, 8]);
            let mut r = RngState::new(8);
            let (out, attns) = enc.forward(&z0, &e_pos, Mode::eval(), &mut r).unwrap();
            assert_eq!(out.shape(), &[5, 8]);
            assert_eq!(attns.len(), layers);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = RngState::new(9);
        let enc = Rc::new(Encoder::new(&mut params, "enc", 1, 16, 2, 16, 0.1, &mut rng));
        let z = random_param("z", &[6, 16], &mut rng);
        let pos = random_param("pos", &[6, 16], &mut rng);
        let all: Vec<Rc<Parameter<f64>>> =
            params.iter().cloned().chain([Rc::clone(&z), Rc::clone(&pos)]).collect();
        crate::gradcheck::randomize_params(&all, 0.3, &mut rng);
        let (e, zc, pc) = (Rc::clone(&enc), Rc::clone(&z), Rc::clone(&pos));
        let report = crate::gradcheck::grad_check_report(
            &all,
            move || {
                let mut r = RngState::new(0);
                let (out, _) =
                    e.forward(&zc.tracked(), &pc.tracked(), Mode::grad_eval(), &mut r).unwrap();
                out.gelu().sum_all()
            },
            FD_STEP,
            12,
        );
        assert!(report.max_rel_err < 1e-4, "encoder fd: {report:?}");
    }

    #[test]
    fn decoder_single_scene_shape_and_attn() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(10);
        let dec = Decoder::new(&mut params, "dec", 2, 8, 2, 8, 0.0, &mut rng);
        let queries = Tensor::from_vec((0..8).map(|i| i as f32 * 0.1).collect(), &[1, 8]).unwrap();
        let memory = Tensor::zeros(&[6, 8]);
        let mem_pos = Tensor::zeros(&[6, 8]);
        let mut r = RngState::new(11);
        let (out, attn) = dec.forward(&queries, &memory, &mem_pos, Mode::eval(), &mut r).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        // 1x1 self-attention is the trivial certain case
        for rec in &attn.self_attn {
            assert_eq!(rec.shape(), &[2, 1, 1]);
            for &a in rec.data() {
                assert!((a - 1.0).abs() < 1e-6);
            }
        }
        for rec in &attn.cross_attn {
            assert_eq!(rec.shape(), &[2, 1, 6]);
        }
    }

    #[test]
    fn zero_cross_value_weights_block_memory_influence() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = RngState::new(12);
        let dec = Decoder::new(&mut params, "dec", 2, 8, 2, 8, 0.0, &mut rng);
        for p in params.iter() {
            if p.name().contains("cross_attn.wv") {
                p.set_value(vec![0.0; p.numel()]);
            }
        }
        let queries =
            Tensor::from_vec((0..16).map(|i| i as f32 * 0.07).collect(), &[2, 8]).unwrap();
        let mem_pos = Tensor::zeros(&[4, 8]);
        let mut r = RngState::new(13);
        let mem_a = Tensor::from_vec((0..32).map(|_| r.normal() as f32).collect(), &[4, 8]).unwrap();
        let mem_b = Tensor::from_vec((0..32).map(|_| r.normal() as f32).collect(), &[4, 8]).unwrap();
        let mut r1 = RngState::new(0);
        let (out_a, _) = dec.forward(&queries, &mem_a, &mem_pos, Mode::eval(), &mut r1).unwrap();
        let mut r2 = RngState::new(0);
        let (out_b, _) = dec.forward(&queries, &mem_b, &mem_pos, Mode::eval(), &mut r2).unwrap();
        assert_eq!(out_a.data(), out_b.data());
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = RngState::new(14);
        let dec = Rc::new(Decoder::new(&mut params, "dec", 1, 12, 2, 12, 0.1, &mut rng));
        let queries = random_param("queries", &[3, 12], &mut rng);
        let memory = random_param("memory", &[5, 12], &mut rng);
        let all: Vec<Rc<Parameter<f64>>> =
            params.iter().cloned().chain([Rc::clone(&queries), Rc::clone(&memory)]).collect();
        crate::gradcheck::randomize_params(&all, 0.3, &mut rng);
        let (d, qc, mc) = (Rc::clone(&dec), Rc::clone(&queries), Rc::clone(&memory));
        let err = grad_check(
            &all,
            move || {
                let mut r = RngState::new(0);
                let mem = mc.tracked();
                let pos = Tensor::zeros(&[5, 12]);
                let (out, _) =
                    d.forward(&qc.tracked(), &mem, &pos, Mode::grad_eval(), &mut r).unwrap();
                out.gelu().sum_all()
            },
            FD_STEP,
            10,
        );
        assert!(err < 1e-4, "decoder fd err {err}");
    }
}

