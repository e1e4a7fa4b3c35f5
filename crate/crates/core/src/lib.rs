//! Compare spoken utterances as sequences of discrete acoustic units.
//!
//! Features are quantized into units with k-means, units are compared with
//! text metrics (BLEU, ChrF) over private-use characters, and a small learned
//! model regresses the text-side score directly from unit pairs.

pub mod cli;
pub mod error;
pub mod mining;
pub mod model;
pub mod quantizer;
pub mod stats;
pub mod synth;
pub mod textmetrics;
pub mod units;

pub use error::{Error, Result};
pub use mining::{attach_targets, mine_pairs, split_pairs, MiningParams, PairRecord, SplitManifest};
pub use model::{EncoderMode, MetricModel, ModelConfig};
pub use quantizer::{kmeans_fit, quantize, Codebook, Distance, FeatureSequence, KMeansFit, KMeansParams};
pub use stats::{evaluate, histogram, pearson, spearman, EvalReport};
pub use synth::{gen_corpus, SynthConfig, SynthCorpus};
pub use textmetrics::{sentence_bleu, sentence_chrf, text_score, Metric, MetricScore};
pub use units::{chars_to_units, dedup, units_to_chars, UnitSequence, Utterance};
