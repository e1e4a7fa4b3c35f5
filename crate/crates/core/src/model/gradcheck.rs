//! Per-example loss, analytic gradients, and a finite-difference check.

use super::encoder::{encode_backward, encode_forward, head_backward, head_forward, token_ids};
use super::params::Params;
use super::MetricModel;
use crate::error::{Error, Result};
use crate::mining::PairRecord;

const REL_FLOOR: f64 = 1e-6;

/// Squared error of one pair and its gradient with respect to every parameter.
pub fn loss_and_gradients(model: &MetricModel, pair: &PairRecord, target: f64) -> Result<(f64, Params)> {
    let mut grads = Params::zeros(model.config());
    let loss = accumulate(model, pair, target, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale * dL/dθ` into `grads`; returns the unscaled squared error.
pub(crate) fn accumulate(model: &MetricModel, pair: &PairRecord, target: f64, scale: f64, grads: &mut Params) -> Result<f64> {
    let cfg = model.config();
    for u in [&pair.h_units, &pair.r_units] {
        if let Some(&unit) = u.units().iter().find(|&&x| x >= cfg.vocab_size) {
            return Err(Error::UnitOutOfRange {
                unit,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    let p = &model.params;
    let th = token_ids(pair.h_units.units(), cfg);
    let tr = token_ids(pair.r_units.units(), cfg);
    let (h, ch) = encode_forward(p, cfg, model.positions(), &th);
    let (r, cr) = encode_forward(p, cfg, model.positions(), &tr);
    let head = head_forward(&p.head, &h, &r);
    let err = head.pred - target;
    let (dh, dr) = head_backward(scale * 2.0 * err, &head, &p.head, &h, &r, &mut grads.head);
    encode_backward(dh.view(), &ch, p, cfg, grads);
    encode_backward(dr.view(), &cr, p, cfg, grads);
    Ok(err * err)
}

fn loss_only(model: &MetricModel, pair: &PairRecord, target: f64) -> f64 {
    let cfg = model.config();
    let p = &model.params;
    let (h, _) = encode_forward(p, cfg, model.positions(), &token_ids(pair.h_units.units(), cfg));
    let (r, _) = encode_forward(p, cfg, model.positions(), &token_ids(pair.r_units.units(), cfg));
    let e = head_forward(&p.head, &h, &r).pred - target;
    e * e
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter. Pairs without a target are checked against 0.5.
pub fn grad_check(model: &MetricModel, pair: &PairRecord, eps: f64) -> Result<f64> {
    let target = pair.target.unwrap_or(0.5);
    let (_, analytic) = loss_and_gradients(model, pair, target)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let n_tensors = analytic.tensors().len();
    for ti in 0..n_tensors {
        let len = analytic.tensors()[ti].data.len();
        for j in 0..len {
            let orig = probe.params.tensors()[ti].data[j];
            probe.params.tensors_mut()[ti].data[j] = orig + eps;
            let up = loss_only(&probe, pair, target);
            probe.params.tensors_mut()[ti].data[j] = orig - eps;
            let down = loss_only(&probe, pair, target);
            probe.params.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensors()[ti].data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderMode, ModelConfig};
    use crate::units::UnitSequence;

    fn pair(h: &[u32], r: &[u32], k: u32, target: Option<f64>) -> PairRecord {
        PairRecord {
            pair_id: "p".into(),
            h_id: "h".into(),
            r_id: "r".into(),
            h_units: UnitSequence::new(h.to_vec(), k).unwrap(),
            r_units: UnitSequence::new(r.to_vec(), k).unwrap(),
            h_transcript: None,
            r_transcript: None,
            target,
        }
    }

    #[test]
    fn embed_mean_gradients() {
        let mut cfg = ModelConfig::new(6, EncoderMode::EmbedMean);
        cfg.embed_dim = 4;
        cfg.seed = 3;
        let m = MetricModel::new(cfg).unwrap();
        let err = grad_check(&m, &pair(&[0, 3, 5, 1], &[2, 4, 0], 6, Some(0.8)), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attn_gradients() {
        let mut cfg = ModelConfig::new(7, EncoderMode::Attn);
        cfg.embed_dim = 8;
        cfg.attn_heads = 2;
        cfg.attn_layers = 1;
        cfg.seed = 11;
        let m = MetricModel::new(cfg).unwrap();
        let err = grad_check(&m, &pair(&[1, 2, 6, 0, 3], &[4, 5], 7, Some(0.2)), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_model_head_bias_gradient() {
        let mut cfg = ModelConfig::new(5, EncoderMode::Attn);
        cfg.embed_dim = 4;
        cfg.attn_heads = 1;
        cfg.attn_layers = 1;
        let m = MetricModel::with_params(cfg.clone(), Params::zeros(&cfg)).unwrap();
        let (loss, g) = loss_and_gradients(&m, &pair(&[1], &[2], 5, Some(1.0)), 1.0).unwrap();
        assert_eq!(loss, 0.25);
        // dL/db2 = 2 (0.5 - 1) * 0.25
        assert_eq!(g.head.b2[0], -0.25);
        assert!(g.all_finite());
        let err = grad_check(&m, &pair(&[1, 3], &[2], 5, None), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
