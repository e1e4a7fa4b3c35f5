//! Trainable tensors of the metric model.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff1_w: Array2<f64>,
    pub ff1_b: Array1<f64>,
    pub ff2_w: Array2<f64>,
    pub ff2_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// 4d × hidden
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden × 1
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// (K + 3) × d; rows K, K+1, K+2 are pad, bos, eos.
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

/// Borrowed tensor: name, shape and flat row-major data.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Every parameter name not under `head.` belongs to the encoder.
pub fn is_encoder(name: &str) -> bool {
    !name.starts_with("head.")
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b)
    };
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim();
        let hh = cfg.head_hidden();
        let layer = || LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            ff1_w: Array2::zeros((d, f)),
            ff1_b: Array1::zeros(f),
            ff2_w: Array2::zeros((f, d)),
            ff2_b: Array1::zeros(d),
        };
        Self {
            embedding: Array2::zeros((cfg.n_tokens(), d)),
            layers: (0..cfg.layers()).map(|_| layer()).collect(),
            head: HeadParams {
                w1: Array2::zeros((4 * d, hh)),
                b1: Array1::zeros(hh),
                w2: Array2::zeros((hh, 1)),
                b2: Array1::zeros(1),
            },
        }
    }

    /// Gaussian initialisation: unit-variance embeddings (the scale of the
    /// sinusoidal positions), weight matrices with the Glorot std, unit
    /// layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |a: &mut Array2<f64>, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            a.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        };
        fill(&mut p.embedding, 1.0);
        let glorot = |a: &Array2<f64>| (2.0 / (a.nrows() + a.ncols()) as f64).sqrt();
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.ff1_w, &mut l.ff2_w] {
                let std = glorot(w);
                fill(w, std);
            }
        }
        let std = glorot(&p.head.w1);
        fill(&mut p.head.w1, std);
        let std = glorot(&p.head.w2);
        fill(&mut p.head.w2, std);
        p
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "embedding".into(),
            shape: self.embedding.shape().to_vec(),
            data: self.embedding.as_slice().expect("standard layout"),
        }];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {$(
                    out.push(TensorRef {
                        name: format!("layers.{i}.{}", stringify!($f)),
                        shape: l.$f.shape().to_vec(),
                        data: l.$f.as_slice().expect("standard layout"),
                    });
                )*};
            }
            layer_fields!(push);
        }
        macro_rules! push_head {
            ($($f:ident),*) => {$(
                out.push(TensorRef {
                    name: format!("head.{}", stringify!($f)),
                    shape: self.head.$f.shape().to_vec(),
                    data: self.head.$f.as_slice().expect("standard layout"),
                });
            )*};
        }
        push_head!(w1, b1, w2, b2);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![TensorMut {
            name: "embedding".into(),
            data: self.embedding.as_slice_mut().expect("standard layout"),
        }];
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {$(
                    out.push(TensorMut {
                        name: format!("layers.{i}.{}", stringify!($f)),
                        data: l.$f.as_slice_mut().expect("standard layout"),
                    });
                )*};
            }
            layer_fields!(push);
        }
        let h = &mut self.head;
        for (name, data) in [
            ("head.w1", h.w1.as_slice_mut()),
            ("head.b1", h.b1.as_slice_mut()),
            ("head.w2", h.w2.as_slice_mut()),
            ("head.b2", h.b2.as_slice_mut()),
        ] {
            out.push(TensorMut {
                name: name.into(),
                data: data.expect("standard layout"),
            });
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::EncoderMode;

    #[test]
    fn names_and_shapes() {
        let mut cfg = ModelConfig::new(10, EncoderMode::Attn);
        cfg.embed_dim = 8;
        cfg.attn_layers = 1;
        cfg.attn_heads = 2;
        let p = Params::init(&cfg, 1);
        let ts = p.tensors();
        assert_eq!(ts[0].name, "embedding");
        assert_eq!(ts[0].shape, vec![13, 8]);
        assert_eq!(ts.len(), 1 + 16 + 4);
        assert_eq!(ts.last().unwrap().name, "head.b2");
        let head_w1 = ts.iter().find(|t| t.name == "head.w1").unwrap();
        assert_eq!(head_w1.shape, vec![32, 8]);
        assert!(ts.iter().any(|t| t.name == "layers.0.ff2_w" && t.shape == vec![32, 8]));
        assert_eq!(ts.iter().filter(|t| !is_encoder(&t.name)).count(), 4);
        let mut q = p.clone();
        let names: Vec<_> = q.tensors_mut().into_iter().map(|t| t.name).collect();
        assert_eq!(names, ts.iter().map(|t| t.name.clone()).collect::<Vec<_>>());
        assert_eq!(p, Params::init(&cfg, 1));
    }
}
