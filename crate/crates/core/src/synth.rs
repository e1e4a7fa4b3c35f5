//! Reproducible synthetic (H, R) corpora.
//!
//! Each pair starts from a latent word sequence (the reference transcript).
//! The hypothesis transcript is an edited copy. Both are rendered into
//! frame-level acoustic units through a fixed injective token → phone-code
//! map with random per-unit duplication.
//!
//! The K units are grouped into phones of `allophones` units each. Every
//! utterance is spoken by one of `speakers` speakers, and each speaker
//! realises a phone as one fixed allophone, so the same words said by two
//! speakers give systematically different units. Every frame gets a
//! feature vector (the unit's centroid plus Gaussian jitter) and emits its
//! nearest true centroid, so jitter adds random unit confusions on top.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::PairRecord;
use crate::quantizer::{Codebook, Distance, FeatureSequence};
use crate::textmetrics::{text_score, Metric};
use crate::units::UnitSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sub_rate: f64,
    pub ins_rate: f64,
    pub del_rate: f64,
    /// Standard deviation of the per-dimension Gaussian added to every frame.
    pub frame_jitter: f64,
    pub dup_min: usize,
    pub dup_max: usize,
}

impl NoiseModel {
    pub const CLEAN: NoiseModel = NoiseModel {
        sub_rate: 0.0,
        ins_rate: 0.0,
        del_rate: 0.0,
        frame_jitter: 0.0,
        dup_min: 1,
        dup_max: 3,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("sub_rate", self.sub_rate),
            ("ins_rate", self.ins_rate),
            ("del_rate", self.del_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.frame_jitter >= 0.0 && self.frame_jitter.is_finite()) {
            return Err(Error::Config("frame_jitter must be finite and >= 0".into()));
        }
        if self.dup_min == 0 || self.dup_min > self.dup_max {
            return Err(Error::Config(format!(
                "need 1 <= dup_min <= dup_max, got {}..{}",
                self.dup_min, self.dup_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub noise: NoiseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub latent_vocab: usize,
    /// Number of acoustic units K.
    pub vocab_size: u32,
    /// Phones per latent token.
    pub units_per_token: usize,
    /// Units per phone; must divide `vocab_size`.
    #[serde(default = "one")]
    pub allophones: usize,
    #[serde(default = "one")]
    pub speakers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub metric: Metric,
    pub mixture: Vec<MixtureComponent>,
}

fn one() -> usize {
    1
}

impl SynthConfig {
    /// Mixture used by the desk-scale experiments: about a third exact
    /// repeats, a third lightly edited, a third almost unrelated; two
    /// allophones per phone, eight speakers, and frame jitter 0.3 over
    /// 16-dim unit-variance centroids.
    pub fn desk_scale(n_pairs: usize, vocab_size: u32) -> Self {
        let jitter = 0.3;
        let noise = |sub, ins, del| NoiseModel {
            sub_rate: sub,
            ins_rate: ins,
            del_rate: del,
            frame_jitter: jitter,
            dup_min: 1,
            dup_max: 3,
        };
        Self {
            n_pairs,
            latent_vocab: 1000,
            vocab_size,
            units_per_token: 3,
            allophones: 2,
            speakers: 8,
            min_len: 3,
            max_len: 8,
            feature_dim: 16,
            metric: Metric::Bleu,
            mixture: vec![
                MixtureComponent {
                    weight: 0.35,
                    noise: noise(0.0, 0.0, 0.0),
                },
                MixtureComponent {
                    weight: 0.3,
                    noise: noise(0.15, 0.05, 0.05),
                },
                MixtureComponent {
                    weight: 0.35,
                    noise: noise(0.9, 0.0, 0.0),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_vocab < 2 || self.vocab_size < 2 {
            return Err(Error::Config("latent_vocab and vocab_size must be >= 2".into()));
        }
        if self.units_per_token == 0 || self.feature_dim == 0 || self.speakers == 0 {
            return Err(Error::Config("units_per_token, feature_dim and speakers must be positive".into()));
        }
        if self.allophones == 0 || self.vocab_size as usize % self.allophones != 0 {
            return Err(Error::Config(format!(
                "allophones ({}) must divide vocab_size ({})",
                self.allophones, self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.mixture.is_empty() || self.mixture.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::Config("mixture needs components with positive weights".into()));
        }
        for c in &self.mixture {
            c.noise.validate()?;
        }
        // codes avoid adjacent repeats: P·(P-1)^(L-1) distinct codes exist
        let p = self.phones() as f64;
        let capacity = p * (p - 1.0).powi(self.units_per_token as i32 - 1);
        if capacity < self.latent_vocab as f64 * 2.0 {
            return Err(Error::Config(format!(
                "{} phones with {} phones per token cannot encode {} tokens",
                self.phones(),
                self.units_per_token,
                self.latent_vocab
            )));
        }
        Ok(())
    }

    pub fn phones(&self) -> usize {
        self.vocab_size as usize / self.allophones.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub pairs: Vec<PairRecord>,
    /// (H, R) frame features, parallel to `pairs`; empty unless requested.
    pub features: Vec<(FeatureSequence, FeatureSequence)>,
    /// The centroids that generated the features.
    pub codebook: Codebook,
    /// Phone code of every latent token.
    pub token_codes: Vec<Vec<u32>>,
    /// Allophone index each speaker uses for each phone.
    pub speaker_allophones: Vec<Vec<u32>>,
}

fn word(token: usize) -> String {
    format!("w{token}")
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    codes: &'a [Vec<u32>],
    centroids: &'a Codebook,
}

impl Renderer<'_> {
    /// Frame-level units plus (optionally) their features for one utterance.
    fn render(
        &self,
        tokens: &[usize],
        speaker: &[u32],
        noise: &NoiseModel,
        rng: &mut ChaCha8Rng,
        id: &str,
        keep_features: bool,
    ) -> Result<(UnitSequence, Option<FeatureSequence>)> {
        let dim = self.cfg.feature_dim;
        let jitter = Normal::new(0.0, noise.frame_jitter.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut units = Vec::new();
        let mut feats = Vec::new();
        for &t in tokens {
            for &phone in &self.codes[t] {
                let u = phone * self.cfg.allophones as u32 + speaker[phone as usize];
                let dup = rng.random_range(noise.dup_min..=noise.dup_max);
                for _ in 0..dup {
                    let c = &self.centroids.centroids[u as usize];
                    let frame: Vec<f64> = if noise.frame_jitter > 0.0 {
                        c.iter().map(|&x| x + jitter.sample(rng)).collect()
                    } else {
                        c.clone()
                    };
                    let frame32: Vec<f32> = frame.iter().map(|&x| x as f32).collect();
                    let emitted = if noise.frame_jitter > 0.0 {
                        nearest_l2(&self.centroids.centroids, &frame32)
                    } else {
                        u
                    };
                    units.push(emitted);
                    if keep_features {
                        feats.extend_from_slice(&frame32);
                    }
                }
            }
        }
        let seq = UnitSequence::new(units, self.cfg.vocab_size)?;
        let features = if keep_features {
            Some(FeatureSequence::new(id, dim, feats)?)
        } else {
            None
        };
        Ok((seq, features))
    }
}

/// Nearest centroid of the f32 frame, matching what `quantize` computes.
fn nearest_l2(centroids: &[Vec<f64>], frame: &[f32]) -> u32 {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d: f64 = c
            .iter()
            .zip(frame)
            .map(|(a, &b)| (f64::from(b) - a) * (f64::from(b) - a))
            .sum();
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best.0
}

fn edit(tokens: &[usize], noise: &NoiseModel, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    for &t in tokens {
        if rng.random_bool(noise.del_rate) {
            continue;
        }
        if rng.random_bool(noise.sub_rate) {
            let mut s = rng.random_range(0..vocab - 1);
            if s >= t {
                s += 1;
            }
            out.push(s);
        } else {
            out.push(t);
        }
        if rng.random_bool(noise.ins_rate) {
            out.push(rng.random_range(0..vocab));
        }
    }
    out
}

/// Generates `cfg.n_pairs` pairs. Pair `i` draws from its own ChaCha stream,
/// so the corpus is independent of how rayon schedules the work.
pub fn gen_corpus(cfg: &SynthConfig, seed: u64, with_features: bool) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut global = ChaCha8Rng::seed_from_u64(seed);
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let centroids: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.feature_dim).map(|_| unit_normal.sample(&mut global)).collect())
        .collect();
    let codebook = Codebook::new(centroids, Distance::L2, seed)?;

    let phones = cfg.phones() as u32;
    let mut used = HashSet::new();
    let mut codes = Vec::with_capacity(cfg.latent_vocab);
    while codes.len() < cfg.latent_vocab {
        let code: Vec<u32> = (0..cfg.units_per_token)
            .map(|_| global.random_range(0..phones))
            .collect();
        if code.windows(2).all(|w| w[0] != w[1]) && used.insert(code.clone()) {
            codes.push(code);
        }
    }
    let speaker_allophones: Vec<Vec<u32>> = (0..cfg.speakers)
        .map(|_| {
            (0..phones)
                .map(|_| global.random_range(0..cfg.allophones as u32))
                .collect()
        })
        .collect();

    let weights = WeightedIndex::new(cfg.mixture.iter().map(|c| c.weight))
        .map_err(|e| Error::Config(e.to_string()))?;
    let renderer = Renderer {
        cfg,
        codes: &codes,
        centroids: &codebook,
    };

    let generated: Vec<(PairRecord, Option<(FeatureSequence, FeatureSequence)>)> = (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let noise = cfg.mixture[weights.sample(&mut rng)].noise;
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let r_tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.latent_vocab)).collect();
            let h_tokens = edit(&r_tokens, &noise, cfg.latent_vocab, &mut rng);
            let h_speaker = &speaker_allophones[rng.random_range(0..cfg.speakers)];
            let r_speaker = &speaker_allophones[rng.random_range(0..cfg.speakers)];

            let pair_id = format!("syn{i:07}");
            let (h_id, r_id) = (format!("{pair_id}_h"), format!("{pair_id}_r"));
            let (h_units, h_feat) = renderer.render(&h_tokens, h_speaker, &noise, &mut rng, &h_id, with_features)?;
            let (r_units, r_feat) = renderer.render(&r_tokens, r_speaker, &noise, &mut rng, &r_id, with_features)?;
            let h_text = h_tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ");
            let r_text = r_tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ");
            let target = text_score(&h_text, &r_text, cfg.metric, false);
            let record = PairRecord {
                pair_id,
                h_id,
                r_id,
                h_units,
                r_units,
                h_transcript: Some(h_text),
                r_transcript: Some(r_text),
                target: Some(target),
            };
            Ok((record, h_feat.zip(r_feat)))
        })
        .collect::<Result<_>>()?;

    let mut pairs = Vec::with_capacity(generated.len());
    let mut features = Vec::new();
    for (p, f) in generated {
        pairs.push(p);
        features.extend(f);
    }
    Ok(SynthCorpus {
        pairs,
        features,
        codebook,
        token_codes: codes,
        speaker_allophones,
    })
}
