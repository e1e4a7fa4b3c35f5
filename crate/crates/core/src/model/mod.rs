//! Learned speech-to-speech metric.
//!
//! Hypothesis and reference unit sequences are embedded and encoded into one
//! vector each, pooled as `[h; r; h*r; |h-r|]`, and a two-layer regression
//! head with a sigmoid output predicts the text-side score.

mod config;
mod encoder;
mod gradcheck;
mod params;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::mining::PairRecord;
use crate::units::UnitSequence;

pub use config::{EncoderMode, ModelConfig};
pub use encoder::{pool, sinusoidal_positions};
pub use gradcheck::{grad_check, loss_and_gradients};
pub use params::{is_encoder, HeadParams, LayerParams, Params};
pub use train::{train, train_with, EpochRecord, LogRecord, StepRecord, TrainOutcome, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    config: ModelConfig,
    pub params: Params,
    positions: Array2<f64>,
}

impl MetricModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let seed = config.seed;
        Self::with_params(config.clone(), Params::init(&config, seed))
    }

    pub fn with_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        for (a, b) in params.tensors().iter().zip(expected.tensors()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ModelFormat(format!(
                    "parameter {} has shape {:?}, config requires {:?}",
                    b.name, a.shape, b.shape
                )));
            }
        }
        if params.tensors().len() != expected.tensors().len() {
            return Err(Error::ModelFormat("parameter count does not match config".into()));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let positions = sinusoidal_positions(config.max_len, config.embed_dim);
        Ok(Self {
            config: config.resolved(),
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_units(&self, units: &UnitSequence) -> Result<()> {
        let k = self.config.vocab_size;
        match units.units().iter().find(|&&u| u >= k) {
            Some(&unit) => Err(Error::UnitOutOfRange { unit, vocab_size: k }),
            None => Ok(()),
        }
    }

    /// Fixed-size representation of one (de-duplicated) unit sequence.
    pub fn encode(&self, units: &UnitSequence) -> Result<Array1<f64>> {
        self.check_units(units)?;
        let tokens = encoder::token_ids(units.units(), &self.config);
        Ok(encoder::encode_forward(&self.params, &self.config, &self.positions, &tokens).0)
    }

    pub fn predict_units(&self, h: &UnitSequence, r: &UnitSequence) -> Result<f64> {
        let he = self.encode(h)?;
        let re = self.encode(r)?;
        let pred = encoder::head_forward(&self.params.head, &he, &re).pred;
        // keep the open interval even where the sigmoid saturates in f64
        Ok(pred.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn predict(&self, pair: &PairRecord) -> Result<f64> {
        self.predict_units(&pair.h_units, &pair.r_units)
    }

    /// Predictions keyed by pair id; parallel over pairs.
    pub fn predict_all(&self, pairs: &[PairRecord]) -> Result<BTreeMap<String, f64>> {
        pairs
            .par_iter()
            .map(|p| Ok((p.pair_id.clone(), self.predict(p)?)))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().collect())
    }

    pub(crate) fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                (
                    t.name,
                    TensorFile {
                        shape: t.shape,
                        data: t.data.to_vec(),
                    },
                )
            })
            .collect();
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            parameters,
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        file.config.validate()?;
        let mut params = Params::zeros(&file.config);
        let mut parameters = file.parameters;
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(expected) {
            let t = parameters
                .remove(&name)
                .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name}")))?;
            if t.shape != shape || t.data.len() != slot.data.len() {
                return Err(Error::ModelFormat(format!(
                    "shape mismatch for {name}: file has {:?} ({} values), config requires {shape:?}",
                    t.shape,
                    t.data.len()
                )));
            }
            slot.data.copy_from_slice(&t.data);
        }
        if let Some(extra) = parameters.keys().next() {
            return Err(Error::ModelFormat(format!("unexpected parameter {extra}")));
        }
        Self::with_params(file.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    parameters: BTreeMap<String, TensorFile>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(mode: EncoderMode) -> ModelConfig {
        let mut c = ModelConfig::new(12, mode);
        c.embed_dim = 8;
        c.attn_heads = 2;
        c.attn_layers = 1;
        c.seed = 5;
        c
    }

    fn useq(u: &[u32]) -> UnitSequence {
        UnitSequence::new(u.to_vec(), 12).unwrap()
    }

    #[test]
    fn embed_mean_single_unit() {
        let m = MetricModel::new(tiny(EncoderMode::EmbedMean)).unwrap();
        let e = &m.params.embedding;
        let expected = (&e.row(13) + &e.row(4) + &e.row(14)) / 3.0;
        let got = m.encode(&useq(&[4])).unwrap();
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn embed_mean_order_invariant() {
        let m = MetricModel::new(tiny(EncoderMode::EmbedMean)).unwrap();
        let a = m.encode(&useq(&[1, 5, 2, 9])).unwrap();
        let b = m.encode(&useq(&[9, 2, 1, 5])).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-15));
        let p1 = m.predict_units(&useq(&[1, 5, 2, 9]), &useq(&[3, 4])).unwrap();
        let p2 = m.predict_units(&useq(&[2, 9, 5, 1]), &useq(&[4, 3])).unwrap();
        assert!((p1 - p2).abs() < 1e-15);
    }

    #[test]
    fn attn_with_silent_branches_reduces_to_embeddings_plus_positions() {
        let cfg = tiny(EncoderMode::Attn);
        let mut m = MetricModel::new(cfg.clone()).unwrap();
        for l in &mut m.params.layers {
            l.wo.fill(0.0);
            l.bo.fill(0.0);
            l.ff2_w.fill(0.0);
            l.ff2_b.fill(0.0);
        }
        let mean_cfg = ModelConfig {
            encoder_mode: EncoderMode::EmbedMean,
            ..cfg
        };
        let mut mean_params = Params::zeros(&mean_cfg);
        mean_params.embedding.assign(&m.params.embedding);
        let mean_model = MetricModel::with_params(mean_cfg, mean_params).unwrap();

        let units = useq(&[3, 7, 1]);
        let got = m.encode(&units).unwrap();
        let n = units.len() + 2;
        let pe_mean = m.positions().slice(ndarray::s![..n, ..]).mean_axis(ndarray::Axis(0)).unwrap();
        let expected = mean_model.encode(&units).unwrap() + pe_mean;
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12), "{got} vs {expected}");
    }

    #[test]
    fn zero_model_predicts_half() {
        let cfg = tiny(EncoderMode::Attn);
        let m = MetricModel::with_params(cfg.clone(), Params::zeros(&cfg)).unwrap();
        assert_eq!(m.predict_units(&useq(&[1, 2]), &useq(&[])).unwrap(), 0.5);
    }

    #[test]
    fn hand_evaluated_tiny_model() {
        // d = 2, hidden = 1, embed_mean; hand-set weights.
        let mut cfg = ModelConfig::new(2, EncoderMode::EmbedMean);
        cfg.embed_dim = 2;
        cfg.head_hidden = Some(1);
        let mut p = Params::zeros(&cfg);
        // rows: unit0, unit1, pad, bos, eos
        p.embedding = array![[3.0, 0.0], [0.0, 3.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        p.head.w1 = array![[0.1], [0.2], [0.3], [0.4], [0.5], [0.6], [0.7], [0.8]];
        p.head.b1 = array![-0.1];
        p.head.w2 = array![[2.0]];
        p.head.b2 = array![0.5];
        let m = MetricModel::with_params(cfg, p).unwrap();
        // h = (1, 0), r = (0, 1); z = (1,0, 0,1, 0,0, 1,1)
        // a = 0.1 + 0.4 + 0.7 + 0.8 - 0.1 = 1.9; y = sigmoid(2 tanh(1.9) + 0.5)
        let h = UnitSequence::new(vec![0], 2).unwrap();
        let r = UnitSequence::new(vec![1], 2).unwrap();
        let expected = 1.0 / (1.0 + (-(2.0 * 1.9f64.tanh() + 0.5)).exp());
        let got = m.predict_units(&h, &r).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 0.917_7).abs() < 1e-4);
    }

    #[test]
    fn unit_out_of_range() {
        let m = MetricModel::new(tiny(EncoderMode::EmbedMean)).unwrap();
        let big = UnitSequence::new(vec![12], 13).unwrap();
        assert!(matches!(m.encode(&big), Err(Error::UnitOutOfRange { unit: 12, .. })));
    }

    #[test]
    fn truncated_and_edited_files_fail() {
        let m = MetricModel::new(tiny(EncoderMode::Attn)).unwrap();
        let json = m.to_json().unwrap();
        let back = MetricModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert!(MetricModel::from_json(&json[..json.len() / 2]).is_err());
        let edited = json.replacen("\"vocab_size\":12", "\"vocab_size\":13", 1);
        assert_ne!(edited, json);
        match MetricModel::from_json(&edited) {
            Err(Error::ModelFormat(msg)) => assert!(msg.contains("shape mismatch"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let v2 = json.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(MetricModel::from_json(&v2), Err(Error::ModelFormat(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn units() -> impl Strategy<Value = Vec<u32>> {
            prop::collection::vec(0u32..12, 0..12)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn predictions_stay_inside_unit_interval(
                h in units(),
                r in units(),
                seed in 0u64..1000,
                attn in any::<bool>(),
                scale in 0.1f64..1e4,
            ) {
                let mut cfg = tiny(if attn { EncoderMode::Attn } else { EncoderMode::EmbedMean });
                cfg.seed = seed;
                let mut m = MetricModel::new(cfg).unwrap();
                // large head weights push the sigmoid into saturation
                m.params.head.w2.mapv_inplace(|w| w * scale);
                let p = m.predict_units(&useq(&h), &useq(&r)).unwrap();
                prop_assert!(p > 0.0 && p < 1.0, "{}", p);
            }

            #[test]
            fn embed_mean_ignores_unit_order(
                h in units(),
                r in units(),
                seed in 0u64..1000,
                rot in 0usize..12,
            ) {
                let mut cfg = tiny(EncoderMode::EmbedMean);
                cfg.seed = seed;
                let m = MetricModel::new(cfg).unwrap();
                let mut h2 = h.clone();
                h2.reverse();
                let mut r2 = r.clone();
                if !r2.is_empty() {
                    let k = rot % r2.len();
                    r2.rotate_left(k);
                }
                let a = m.predict_units(&useq(&h), &useq(&r)).unwrap();
                let b = m.predict_units(&useq(&h2), &useq(&r2)).unwrap();
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }
    }
}
