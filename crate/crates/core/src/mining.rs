//! (H, R) pair corpora: the pair-file format, n-gram pair mining, target
//! attachment and train/dev/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::textmetrics::{sentence_bleu, sentence_chrf, text_score, tokenize_text, Metric};
use crate::units::{dedup, units_to_chars, UnitSequence, Utterance};

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub h_id: String,
    pub r_id: String,
    pub h_units: UnitSequence,
    pub r_units: UnitSequence,
    pub h_transcript: Option<String>,
    pub r_transcript: Option<String>,
    pub target: Option<f64>,
}

/// One line of a pair file.
#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    pair_id: String,
    h_id: String,
    r_id: String,
    h_units: Vec<u32>,
    r_units: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h_transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
}

impl PairRecord {
    fn to_row(&self) -> PairRow {
        PairRow {
            pair_id: self.pair_id.clone(),
            h_id: self.h_id.clone(),
            r_id: self.r_id.clone(),
            h_units: self.h_units.units().to_vec(),
            r_units: self.r_units.units().to_vec(),
            h_transcript: self.h_transcript.clone(),
            r_transcript: self.r_transcript.clone(),
            target: self.target,
        }
    }

    pub fn vocab_size(&self) -> u32 {
        self.h_units.vocab_size()
    }

    /// Copy with both unit sequences de-duplicated.
    pub fn dedup(&self) -> Self {
        Self {
            h_units: dedup(&self.h_units),
            r_units: dedup(&self.r_units),
            ..self.clone()
        }
    }
}

/// Naive unit metric: BLEU over unit ids, or ChrF over the unit characters.
pub fn unit_score(pair: &PairRecord, metric: Metric) -> Result<f64> {
    Ok(match metric {
        Metric::Bleu => sentence_bleu(pair.h_units.units(), pair.r_units.units(), 4).value,
        Metric::Chrf => {
            let h = units_to_chars(&pair.h_units)?;
            let r = units_to_chars(&pair.r_units)?;
            sentence_chrf(&h, &r, 6, 2.0).value
        }
    })
}

pub fn parse_pairs(text: &str, path: &Path, vocab_size: Option<u32>) -> Result<Vec<PairRecord>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row: PairRow = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(t) = row.target {
            if !(0.0..=1.0).contains(&t) {
                return Err(parse_err(format!("target {t} outside [0, 1]")));
            }
        }
        if !seen.insert(row.pair_id.clone()) {
            return Err(Error::DuplicateId(row.pair_id));
        }
        rows.push(row);
    }
    let vocab = match vocab_size {
        Some(v) => v,
        None => rows
            .iter()
            .flat_map(|r| r.h_units.iter().chain(&r.r_units).copied())
            .max()
            .map_or(1, |m| m + 1),
    };
    rows.into_iter()
        .map(|r| {
            Ok(PairRecord {
                h_units: UnitSequence::new(r.h_units, vocab)?,
                r_units: UnitSequence::new(r.r_units, vocab)?,
                pair_id: r.pair_id,
                h_id: r.h_id,
                r_id: r.r_id,
                h_transcript: r.h_transcript,
                r_transcript: r.r_transcript,
                target: r.target,
            })
        })
        .collect()
}

pub fn read_pairs(path: &Path, vocab_size: Option<u32>) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_pairs(&text, path, vocab_size)
}

pub fn format_pairs(pairs: &[PairRecord]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&p.to_row())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pairs(pairs: &[PairRecord], path: &Path) -> Result<()> {
    let text = format_pairs(pairs)?;
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningParams {
    pub ngram: usize,
    pub max_pairs_per_ngram: usize,
    pub max_total: usize,
    pub seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            ngram: 4,
            max_pairs_per_ngram: 50,
            max_total: 1_000_000,
            seed: 0,
        }
    }
}

/// Pairs utterances whose transcripts share at least one word n-gram.
///
/// Candidates come from an inverted index keyed by n-gram, so cost scales
/// with posting-list sizes rather than with all N² utterance pairs. Each
/// key contributes at most `max_pairs_per_ngram` pairs; when the union
/// exceeds `max_total` a seeded sample is kept. Output is sorted by pair id.
pub fn mine_pairs(utts: &[Utterance], params: &MiningParams) -> Result<Vec<PairRecord>> {
    if params.ngram == 0 {
        return Err(Error::Config("ngram must be at least 1".into()));
    }
    let tokens: Vec<Vec<String>> = utts
        .iter()
        .map(|u| {
            u.transcript
                .as_deref()
                .map(tokenize_text)
                .ok_or_else(|| Error::MissingTranscript(u.id.clone()))
        })
        .collect::<Result<_>>()?;

    let mut index: HashMap<&[String], Vec<usize>> = HashMap::new();
    for (i, toks) in tokens.iter().enumerate() {
        if toks.len() < params.ngram {
            continue;
        }
        let mut local = HashSet::new();
        for gram in toks.windows(params.ngram) {
            if local.insert(gram) {
                index.entry(gram).or_default().push(i);
            }
        }
    }
    let mut keys: Vec<&[String]> = index
        .iter()
        .filter(|(_, posting)| posting.len() > 1)
        .map(|(k, _)| *k)
        .collect();
    keys.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for key in keys {
        let posting = &index[key];
        let m = posting.len();
        let possible = m * (m - 1) / 2;
        let mut emit = |a: usize, b: usize, seen: &mut HashSet<(usize, usize)>| {
            let pair = (a.min(b), a.max(b));
            if seen.insert(pair) {
                candidates.push(pair);
            }
        };
        if possible <= params.max_pairs_per_ngram {
            for x in 0..m {
                for y in x + 1..m {
                    emit(posting[x], posting[y], &mut seen);
                }
            }
        } else {
            let mut local = HashSet::new();
            while local.len() < params.max_pairs_per_ngram {
                let x = rng.random_range(0..m);
                let y = rng.random_range(0..m);
                if x != y && local.insert((x.min(y), x.max(y))) {
                    emit(posting[x], posting[y], &mut seen);
                }
            }
        }
    }

    if candidates.len() > params.max_total {
        candidates.shuffle(&mut rng);
        candidates.truncate(params.max_total);
    }
    candidates.sort_unstable();

    let mut pairs: Vec<PairRecord> = candidates
        .into_iter()
        .map(|(a, b)| {
            let (h, r) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            let (h, r) = (&utts[h], &utts[r]);
            Ok(PairRecord {
                pair_id: format!("{}__{}", h.id, r.id),
                h_id: h.id.clone(),
                r_id: r.id.clone(),
                h_units: h.units.clone(),
                r_units: r.units.clone().with_vocab_size(h.units.vocab_size())?,
                h_transcript: h.transcript.clone(),
                r_transcript: r.transcript.clone(),
                target: None,
            })
        })
        .collect::<Result<_>>()?;
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(pairs)
}

/// Sets each pair's target to the text metric of its two transcripts.
pub fn attach_targets(pairs: &mut [PairRecord], metric: Metric, raw: bool) -> Result<()> {
    if let Some(p) = pairs
        .iter()
        .find(|p| p.h_transcript.is_none() || p.r_transcript.is_none())
    {
        let id = if p.h_transcript.is_none() { &p.h_id } else { &p.r_id };
        return Err(Error::MissingTranscript(id.clone()));
    }
    pairs.par_iter_mut().for_each(|p| {
        let (h, r) = (p.h_transcript.as_deref(), p.r_transcript.as_deref());
        p.target = Some(text_score(h.unwrap(), r.unwrap(), metric, raw));
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Partitions `pairs` according to the manifest, preserving input order.
    pub fn apply(&self, pairs: &[PairRecord]) -> [Vec<PairRecord>; 3] {
        let which: BTreeMap<&str, usize> = [&self.train, &self.dev, &self.test]
            .iter()
            .enumerate()
            .flat_map(|(i, ids)| ids.iter().map(move |id| (id.as_str(), i)))
            .collect();
        let mut out: [Vec<PairRecord>; 3] = Default::default();
        for p in pairs {
            if let Some(&i) = which.get(p.pair_id.as_str()) {
                out[i].push(p.clone());
            }
        }
        out
    }
}

/// Seeded shuffle into train/dev/test. Dev and test sizes are rounded;
/// train takes the remainder.
pub fn split_pairs(pairs: &[PairRecord], fractions: (f64, f64, f64), seed: u64) -> Result<SplitManifest> {
    let (tr, dv, te) = fractions;
    if [tr, dv, te].iter().any(|f| !(*f > 0.0)) || ((tr + dv + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({tr}, {dv}, {te})"
        )));
    }
    if pairs.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 pairs to split, got {}",
            pairs.len()
        )));
    }
    let mut ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_dev = ((n * dv).round() as usize).max(1);
    let n_test = ((n * te).round() as usize).max(1);
    if n_dev + n_test >= ids.len() {
        return Err(Error::Config("split leaves no training pairs".into()));
    }
    let test = ids.split_off(ids.len() - n_test);
    let dev = ids.split_off(ids.len() - n_dev);
    Ok(SplitManifest {
        train: ids,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, text: &str) -> Utterance {
        Utterance::new(id, UnitSequence::new(vec![1, 2], 10).unwrap())
            .unwrap()
            .with_transcript(text)
    }

    #[test]
    fn identical_transcripts_pair() {
        let utts = [utt("a", "the cat sat on the mat"), utt("b", "the cat sat on the mat")];
        let pairs = mine_pairs(&utts, &MiningParams::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_ne!(pairs[0].h_id, pairs[0].r_id);
    }

    #[test]
    fn edge_windows() {
        let utts = [utt("a", "a b c d e"), utt("b", "x b c d y")];
        assert!(mine_pairs(&utts, &MiningParams::default()).unwrap().is_empty());
        let utts = [utt("a", "a b c d e"), utt("b", "z a b c d")];
        assert_eq!(mine_pairs(&utts, &MiningParams::default()).unwrap().len(), 1);
    }

    #[test]
    fn missing_transcript() {
        let utts = [
            utt("a", "a b c d"),
            Utterance::new("b", UnitSequence::empty(10)).unwrap(),
        ];
        match mine_pairs(&utts, &MiningParams::default()) {
            Err(Error::MissingTranscript(id)) => assert_eq!(id, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn caps_are_respected() {
        let utts: Vec<_> = (0..30).map(|i| utt(&format!("u{i:02}"), "one two three four")).collect();
        let params = MiningParams {
            max_pairs_per_ngram: 20,
            ..MiningParams::default()
        };
        assert_eq!(mine_pairs(&utts, &params).unwrap().len(), 20);
        let params = MiningParams {
            max_pairs_per_ngram: 1000,
            max_total: 7,
            ..MiningParams::default()
        };
        assert_eq!(mine_pairs(&utts, &params).unwrap().len(), 7);
    }

    #[test]
    fn targets() {
        let mut pairs = mine_pairs(
            &[utt("a", "the cat sat on the mat"), utt("b", "The cat sat on the mat!")],
            &MiningParams::default(),
        )
        .unwrap();
        attach_targets(&mut pairs, Metric::Bleu, false).unwrap();
        assert_eq!(pairs[0].target, Some(1.0));

        let mut p = pairs[0].clone();
        p.h_transcript = Some("aaa bbb".into());
        p.r_transcript = Some("ccc ddd".into());
        let mut v = vec![p];
        attach_targets(&mut v, Metric::Chrf, false).unwrap();
        assert_eq!(v[0].target, Some(0.0));

        v[0].r_transcript = None;
        assert!(matches!(
            attach_targets(&mut v, Metric::Bleu, false),
            Err(Error::MissingTranscript(_))
        ));
    }

    fn dummy_pairs(n: usize) -> Vec<PairRecord> {
        (0..n)
            .map(|i| PairRecord {
                pair_id: format!("p{i}"),
                h_id: "h".into(),
                r_id: "r".into(),
                h_units: UnitSequence::empty(5),
                r_units: UnitSequence::empty(5),
                h_transcript: None,
                r_transcript: None,
                target: Some(0.5),
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let pairs = dummy_pairs(10);
        let m = split_pairs(&pairs, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((m.train.len(), m.dev.len(), m.test.len()), (8, 1, 1));
        assert_eq!(m, split_pairs(&pairs, (0.8, 0.1, 0.1), 3).unwrap());
        assert!(split_pairs(&pairs, (0.5, 0.5, 0.2), 3).is_err());
        assert!(split_pairs(&dummy_pairs(2), (0.8, 0.1, 0.1), 3).is_err());
        let [tr, dv, te] = m.apply(&pairs);
        assert_eq!((tr.len(), dv.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn pair_file_round_trip() {
        let mut pairs = dummy_pairs(3);
        pairs[1].h_units = UnitSequence::new(vec![4, 0, 3], 5).unwrap();
        pairs[1].h_transcript = Some("hi there".into());
        pairs[2].target = None;
        let text = format_pairs(&pairs).unwrap();
        assert!(text.starts_with(r#"{"pair_id":"p0","h_id":"h","r_id":"r","h_units":[],"r_units":[],"target":0.5}"#));
        let back = parse_pairs(&text, Path::new("x"), Some(5)).unwrap();
        assert_eq!(back, pairs);
        assert!(parse_pairs("{\"pair_id\":1}\n", Path::new("x"), None).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_the_corpus(n in 3usize..300, seed in 0u64..1000, tr in 0.5f64..0.9) {
            let pairs = dummy_pairs(n);
            let rest = (1.0 - tr) / 2.0;
            let m = split_pairs(&pairs, (tr, rest, rest), seed).unwrap();
            let mut all: Vec<&String> = m.train.iter().chain(&m.dev).chain(&m.test).collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }

        #[test]
        fn mined_pairs_are_distinct_and_share_ngram(
            texts in prop::collection::vec(prop::collection::vec(0u8..4, 0..9), 2..25),
            seed in 0u64..1000,
        ) {
            let utts: Vec<_> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let s: Vec<String> = t.iter().map(|w| format!("w{w}")).collect();
                    utt(&format!("u{i}"), &s.join(" "))
                })
                .collect();
            let params = MiningParams { ngram: 2, max_pairs_per_ngram: 5, max_total: 40, seed };
            let pairs = mine_pairs(&utts, &params).unwrap();
            let mut unordered = HashSet::new();
            for p in &pairs {
                prop_assert_ne!(&p.h_id, &p.r_id);
                let key = if p.h_id < p.r_id { (p.h_id.clone(), p.r_id.clone()) } else { (p.r_id.clone(), p.h_id.clone()) };
                prop_assert!(unordered.insert(key));
                let h = tokenize_text(p.h_transcript.as_ref().unwrap());
                let r = tokenize_text(p.r_transcript.as_ref().unwrap());
                prop_assert!(h.windows(2).any(|g| r.windows(2).any(|q| q == g)));
            }
            prop_assert!(pairs.len() <= 40);
            prop_assert_eq!(pairs, mine_pairs(&utts, &params).unwrap());
        }
    }
}
