//! Named parameter tensors of the encoder-decoder transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use super::{sinusoidal_pe, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: Norm<T>,
    pub ffn: FeedForward<T>,
}

/// All trainable tensors. Token and type tables are shared by encoder and
/// decoder; the output projection reuses the token table plus `out_bias`.
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: Tensor<T>,
    pub type_emb: Tensor<T>,
    pub hard_pos: Tensor<T>,
    pub soft_pos: Tensor<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: Norm<T>,
    pub out_bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(i: usize, o: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[i, o]),
            b: Tensor::zeros(&[o]),
        }
    }

    fn init<R: Rng>(i: usize, o: usize, rng: &mut R) -> Self {
        let a = (6.0 / (i + o) as f64).sqrt();
        let data = (0..i * o).map(|_| T::c(rng.gen_range(-a..a))).collect();
        Linear {
            w: Tensor::from_vec(&[i, o], data),
            b: Tensor::zeros(&[o]),
        }
    }
}

impl<T: Scalar> Norm<T> {
    fn zeros(d: usize) -> Self {
        Norm {
            g: Tensor::zeros(&[d]),
            b: Tensor::zeros(&[d]),
        }
    }

    fn init(d: usize) -> Self {
        Norm {
            g: Tensor::filled(&[d], T::one()),
            b: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> Attention<T> {
    fn zeros(d: usize) -> Self {
        Attention {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
        }
    }

    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
        }
    }
}

impl<T: Scalar> FeedForward<T> {
    fn zeros(d: usize, f: usize) -> Self {
        FeedForward {
            l1: Linear::zeros(d, f),
            l2: Linear::zeros(f, d),
        }
    }

    fn init<R: Rng>(d: usize, f: usize, rng: &mut R) -> Self {
        FeedForward {
            l1: Linear::init(d, f, rng),
            l2: Linear::init(f, d, rng),
        }
    }
}

fn normal_table<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| T::c(dist.sample(rng))).collect(),
    )
}

fn sinusoid_table<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for p in 0..rows {
        data.extend(sinusoidal_pe(p, d).into_iter().map(T::c));
    }
    Tensor::from_vec(&[rows, d], data)
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        ModelParams {
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            type_emb: Tensor::zeros(&[cfg.n_types, d]),
            hard_pos: Tensor::zeros(&[cfg.max_len, d]),
            soft_pos: Tensor::zeros(&[cfg.max_len, d]),
            encoder: (0..cfg.enc_layers)
                .map(|_| EncoderLayer {
                    norm1: Norm::zeros(d),
                    attn: Attention::zeros(d),
                    norm2: Norm::zeros(d),
                    ffn: FeedForward::zeros(d, cfg.ffn_dim),
                })
                .collect(),
            enc_norm: Norm::zeros(d),
            decoder: (0..cfg.dec_layers)
                .map(|_| DecoderLayer {
                    norm1: Norm::zeros(d),
                    self_attn: Attention::zeros(d),
                    norm2: Norm::zeros(d),
                    cross_attn: Attention::zeros(d),
                    norm3: Norm::zeros(d),
                    ffn: FeedForward::zeros(d, cfg.ffn_dim),
                })
                .collect(),
            dec_norm: Norm::zeros(d),
            out_bias: Tensor::zeros(&[cfg.vocab_size]),
        }
    }

    /// Seeded initialization: Xavier-uniform projections, unit layer norms,
    /// N(0, 1/d) token table, sinusoid-initialized position tables.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let tok_emb = normal_table(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let type_emb = normal_table(cfg.n_types, d, 0.5, &mut rng);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                norm1: Norm::init(d),
                attn: Attention::init(d, &mut rng),
                norm2: Norm::init(d),
                ffn: FeedForward::init(d, f, &mut rng),
            })
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                norm1: Norm::init(d),
                self_attn: Attention::init(d, &mut rng),
                norm2: Norm::init(d),
                cross_attn: Attention::init(d, &mut rng),
                norm3: Norm::init(d),
                ffn: FeedForward::init(d, f, &mut rng),
            })
            .collect();
        ModelParams {
            tok_emb,
            type_emb,
            hard_pos: sinusoid_table(cfg.max_len, d),
            soft_pos: sinusoid_table(cfg.max_len, d),
            encoder,
            enc_norm: Norm::init(d),
            decoder,
            dec_norm: Norm::init(d),
            out_bias: Tensor::zeros(&[cfg.vocab_size]),
        }
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("type_emb".into(), &self.type_emb),
            ("hard_pos".into(), &self.hard_pos),
            ("soft_pos".into(), &self.soft_pos),
        ];
        fn lin<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, p: &str, l: &'a Linear<T>) {
            out.push((format!("{p}.w"), &l.w));
            out.push((format!("{p}.b"), &l.b));
        }
        fn norm<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, p: &str, n: &'a Norm<T>) {
            out.push((format!("{p}.g"), &n.g));
            out.push((format!("{p}.b"), &n.b));
        }
        fn attn<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, p: &str, a: &'a Attention<T>) {
            lin(out, &format!("{p}.q"), &a.q);
            lin(out, &format!("{p}.k"), &a.k);
            lin(out, &format!("{p}.v"), &a.v);
            lin(out, &format!("{p}.o"), &a.o);
        }
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("enc.{i}");
            norm(&mut out, &format!("{p}.norm1"), &l.norm1);
            attn(&mut out, &format!("{p}.attn"), &l.attn);
            norm(&mut out, &format!("{p}.norm2"), &l.norm2);
            lin(&mut out, &format!("{p}.ffn1"), &l.ffn.l1);
            lin(&mut out, &format!("{p}.ffn2"), &l.ffn.l2);
        }
        norm(&mut out, "enc_norm", &self.enc_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("dec.{i}");
            norm(&mut out, &format!("{p}.norm1"), &l.norm1);
            attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            norm(&mut out, &format!("{p}.norm2"), &l.norm2);
            attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            norm(&mut out, &format!("{p}.norm3"), &l.norm3);
            lin(&mut out, &format!("{p}.ffn1"), &l.ffn.l1);
            lin(&mut out, &format!("{p}.ffn2"), &l.ffn.l2);
        }
        norm(&mut out, "dec_norm", &self.dec_norm);
        out.push(("out_bias".into(), &self.out_bias));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.tok_emb,
            &mut self.type_emb,
            &mut self.hard_pos,
            &mut self.soft_pos,
        ];
        fn attn<'a, T>(out: &mut Vec<&'a mut Tensor<T>>, a: &'a mut Attention<T>) {
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        for l in self.encoder.iter_mut() {
            out.extend([&mut l.norm1.g, &mut l.norm1.b]);
            attn(&mut out, &mut l.attn);
            out.extend([&mut l.norm2.g, &mut l.norm2.b]);
            out.extend([&mut l.ffn.l1.w, &mut l.ffn.l1.b, &mut l.ffn.l2.w, &mut l.ffn.l2.b]);
        }
        out.extend([&mut self.enc_norm.g, &mut self.enc_norm.b]);
        for l in self.decoder.iter_mut() {
            out.extend([&mut l.norm1.g, &mut l.norm1.b]);
            attn(&mut out, &mut l.self_attn);
            out.extend([&mut l.norm2.g, &mut l.norm2.b]);
            attn(&mut out, &mut l.cross_attn);
            out.extend([&mut l.norm3.g, &mut l.norm3.b]);
            out.extend([&mut l.ffn.l1.w, &mut l.ffn.l1.b, &mut l.ffn.l2.w, &mut l.ffn.l2.b]);
        }
        out.extend([&mut self.dec_norm.g, &mut self.dec_norm.b]);
        out.push(&mut self.out_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cfg_shape = |t: &Tensor<T>| t.cast::<U>();
        let mut out = ModelParams::<U> {
            tok_emb: cfg_shape(&self.tok_emb),
            type_emb: cfg_shape(&self.type_emb),
            hard_pos: cfg_shape(&self.hard_pos),
            soft_pos: cfg_shape(&self.soft_pos),
            encoder: Vec::new(),
            enc_norm: Norm {
                g: cfg_shape(&self.enc_norm.g),
                b: cfg_shape(&self.enc_norm.b),
            },
            decoder: Vec::new(),
            dec_norm: Norm {
                g: cfg_shape(&self.dec_norm.g),
                b: cfg_shape(&self.dec_norm.b),
            },
            out_bias: cfg_shape(&self.out_bias),
        };
        let lin = |l: &Linear<T>| Linear {
            w: l.w.cast(),
            b: l.b.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            g: n.g.cast(),
            b: n.b.cast(),
        };
        let attn = |a: &Attention<T>| Attention {
            q: lin(&a.q),
            k: lin(&a.k),
            v: lin(&a.v),
            o: lin(&a.o),
        };
        let ffn = |f: &FeedForward<T>| FeedForward {
            l1: lin(&f.l1),
            l2: lin(&f.l2),
        };
        out.encoder = self
            .encoder
            .iter()
            .map(|l| EncoderLayer {
                norm1: norm(&l.norm1),
                attn: attn(&l.attn),
                norm2: norm(&l.norm2),
                ffn: ffn(&l.ffn),
            })
            .collect();
        out.decoder = self
            .decoder
            .iter()
            .map(|l| DecoderLayer {
                norm1: norm(&l.norm1),
                self_attn: attn(&l.self_attn),
                norm2: norm(&l.norm2),
                cross_attn: attn(&l.cross_attn),
                norm3: norm(&l.norm3),
                ffn: ffn(&l.ffn),
            })
            .collect();
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * *s;
            }
        }
    }
}
