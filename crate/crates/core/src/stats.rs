//! Correlation coefficients and score distributions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::mining::PairRecord;

/// Neumaier-compensated sum; the result does not depend on how callers
/// chunk their data as long as the element order is fixed.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_inputs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::Config("correlation needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_inputs(xs, ys)?;
    if is_constant(xs) {
        return Err(Error::ConstantInput("xs"));
    }
    if is_constant(ys) {
        return Err(Error::ConstantInput("ys"));
    }
    let n = xs.len() as f64;
    let mx = compensated_sum(xs.iter().copied()) / n;
    let my = compensated_sum(ys.iter().copied()) / n;
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let syy = compensated_sum(ys.iter().map(|y| (y - my) * (y - my)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput(if sxx == 0.0 { "xs" } else { "ys" }));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_inputs(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over [0, 1]; only the last bin includes its right edge.
pub fn histogram(scores: &[f64], n_bins: usize) -> Result<Vec<Bin>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let mut bins: Vec<Bin> = (0..n_bins)
        .map(|i| Bin {
            lo: i as f64 / n_bins as f64,
            hi: (i + 1) as f64 / n_bins as f64,
            count: 0,
        })
        .collect();
    for (index, &value) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ScoreOutOfRange { index, value });
        }
        let mut b = ((value * n_bins as f64) as usize).min(n_bins - 1);
        // guard against rounding placing a value just below an edge in the upper bin
        if b > 0 && value < bins[b].lo {
            b -= 1;
        }
        bins[b].count += 1;
    }
    Ok(bins)
}

/// L1 distance between two histograms after normalising each to unit mass.
pub fn histogram_l1(a: &[Bin], b: &[Bin]) -> f64 {
    let na = a.iter().map(|x| x.count).sum::<usize>().max(1) as f64;
    let nb = b.iter().map(|x| x.count).sum::<usize>().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.count as f64 / na - y.count as f64 / nb).abs())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair_id: String,
    pub predicted: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub predicted_histogram: Vec<Bin>,
    pub target_histogram: Vec<Bin>,
    pub per_pair: Vec<PairScore>,
}

impl EvalReport {
    pub fn histogram_l1(&self) -> f64 {
        histogram_l1(&self.predicted_histogram, &self.target_histogram)
    }

    /// `bin_lo\tbin_hi\tcount` rows for predicted then target histograms.
    pub fn histogram_tsv(&self) -> String {
        let mut out = String::from("series\tbin_lo\tbin_hi\tcount\n");
        for (name, bins) in [
            ("predicted", &self.predicted_histogram),
            ("target", &self.target_histogram),
        ] {
            for b in bins {
                out.push_str(&format!("{name}\t{:.4}\t{:.4}\t{}\n", b.lo, b.hi, b.count));
            }
        }
        out
    }
}

/// Correlates `predictions` (by pair id) against the targets carried by `pairs`.
pub fn evaluate(
    predictions: &BTreeMap<String, f64>,
    pairs: &[PairRecord],
    n_bins: usize,
) -> Result<EvalReport> {
    let mut gold = BTreeMap::new();
    let mut missing = Vec::new();
    for p in pairs {
        match (predictions.contains_key(&p.pair_id), p.target) {
            (true, Some(t)) => {
                gold.insert(p.pair_id.clone(), t);
            }
            _ => missing.push(p.pair_id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingScores(missing));
    }
    evaluate_scores(predictions, &gold, n_bins)
}

/// Correlates two score maps; every gold pair needs a prediction.
pub fn evaluate_scores(
    predictions: &BTreeMap<String, f64>,
    gold: &BTreeMap<String, f64>,
    n_bins: usize,
) -> Result<EvalReport> {
    let missing: Vec<String> = gold.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let per_pair: Vec<PairScore> = gold
        .iter()
        .map(|(id, &target)| PairScore {
            pair_id: id.clone(),
            predicted: predictions[id],
            target,
        })
        .collect();
    let pred: Vec<f64> = per_pair.iter().map(|p| p.predicted).collect();
    let gold: Vec<f64> = per_pair.iter().map(|p| p.target).collect();
    Ok(EvalReport {
        n: per_pair.len(),
        pearson: pearson(&pred, &gold)?,
        spearman: spearman(&pred, &gold)?,
        predicted_histogram: histogram(&pred, n_bins)?,
        target_histogram: histogram(&gold, n_bins)?,
        per_pair,
    })
}

/// Score file: a `pair_id\tscore` header, then one row per pair.
pub fn format_scores(scores: &BTreeMap<String, f64>) -> String {
    let mut out = String::from("pair_id\tscore\n");
    for (id, v) in scores {
        out.push_str(&format!("{id}\t{v}\n"));
    }
    out
}

pub fn parse_scores(text: &str, path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() || (i == 0 && line.starts_with("pair_id\t")) {
            continue;
        }
        let (id, v) = line.split_once('\t').ok_or_else(|| err("expected `pair_id<TAB>score`".into()))?;
        let v: f64 = v.trim().parse().map_err(|e| err(format!("bad score `{v}`: {e}")))?;
        if !v.is_finite() {
            return Err(err(format!("non-finite score {v}")));
        }
        if out.insert(id.to_string(), v).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores(&text, path)
}

pub fn write_scores(scores: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    fs::write(path, format_scores(scores)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pearson_examples() {
        assert!(close(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, 1e-15));
        assert!(close(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, 1e-15));
        // centred sums: sxy = 4, sxx = syy = 5
        assert!(close(pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(), 0.8, 1e-15));
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson(&[1., 2.], &[1.]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(pearson(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::ConstantInput("xs"))));
        assert!(matches!(pearson(&[1., 2., 3.], &[0., 0., 0.]), Err(Error::ConstantInput("ys"))));
        assert!(pearson(&[1.], &[1.]).is_err());
        assert!(spearman(&[1., 1.], &[1., 2.]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!(close(spearman(&[1., 2., 3., 4.], &[10., 20., 25., 90.]).unwrap(), 1.0, 1e-15));
        assert_eq!(average_ranks(&[1., 1., 2.]), vec![1.5, 1.5, 3.0]);
        // pearson((1,2,3),(1.5,1.5,3)): sxy = 1.5, sxx = 2, syy = 1.5 → 1.5/sqrt(3) = sqrt(3)/2
        let s = spearman(&[1., 2., 3.], &[1., 1., 2.]).unwrap();
        assert!(close(s, 3f64.sqrt() / 2.0, 1e-15), "{s}");
        assert!(close(s, 0.866, 1e-3));
        let xs = [0.3, -1.0, 2.0, 0.1, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        assert!(close(spearman(&xs, &ys).unwrap(), 1.0, 1e-15));
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[1.0, 1.0, 1.0], 20).unwrap();
        assert_eq!(h[19].count, 3);
        let h = histogram(&[0.05, 0.55], 10).unwrap();
        assert_eq!(h[0].count, 1);
        assert_eq!(h[5].count, 1);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 2);
        assert!(histogram(&[], 20).unwrap().iter().all(|b| b.count == 0));
        assert!(matches!(
            histogram(&[0.5, 1.2], 20),
            Err(Error::ScoreOutOfRange { index: 1, .. })
        ));
        let h = histogram(&[0.3], 10).unwrap();
        assert_eq!(h[3].count, 1);
    }

    fn pair(id: &str, target: Option<f64>) -> PairRecord {
        use crate::units::UnitSequence;
        PairRecord {
            pair_id: id.into(),
            h_id: "h".into(),
            r_id: "r".into(),
            h_units: UnitSequence::empty(4),
            r_units: UnitSequence::empty(4),
            h_transcript: None,
            r_transcript: None,
            target,
        }
    }

    #[test]
    fn evaluate_identity_and_flip() {
        let targets = [0.1, 0.9, 0.4, 0.7];
        let pairs: Vec<_> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| pair(&format!("p{i}"), Some(t)))
            .collect();
        let same: BTreeMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), p.target.unwrap())).collect();
        let r = evaluate(&same, &pairs, 20).unwrap();
        assert!(close(r.pearson, 1.0, 1e-15) && close(r.spearman, 1.0, 1e-15));
        assert_eq!(r.histogram_l1(), 0.0);
        let flip: BTreeMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), 1.0 - p.target.unwrap())).collect();
        let r = evaluate(&flip, &pairs, 20).unwrap();
        assert!(close(r.pearson, -1.0, 1e-15) && close(r.spearman, -1.0, 1e-15));
    }

    #[test]
    fn evaluate_missing() {
        let pairs = vec![pair("a", Some(0.5)), pair("b", None), pair("c", Some(0.1))];
        let preds: BTreeMap<_, _> = [("a".to_string(), 0.4), ("b".to_string(), 0.2)].into();
        match evaluate(&preds, &pairs, 20) {
            Err(Error::MissingScores(ids)) => assert_eq!(ids, vec!["b", "c"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluate_independent_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240611);
        let pairs: Vec<_> = (0..5000).map(|i| pair(&format!("p{i:05}"), Some(rng.random()))).collect();
        let preds: BTreeMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), rng.random::<f64>())).collect();
        let r = evaluate(&preds, &pairs, 20).unwrap();
        assert!(r.pearson.abs() < 0.05, "{}", r.pearson);
    }

    proptest! {
        #[test]
        fn affine_invariance(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            noise in prop::collection::vec(-100.0f64..100.0, 40),
            a in 0.01f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
            prop_assume!(!is_constant(&xs) && !is_constant(&ys));
            let base = pearson(&xs, &ys).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assume!(!is_constant(&scaled));
            prop_assert!(close(pearson(&scaled, &ys).unwrap(), base, 1e-12));
            let neg: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
            prop_assert!(close(pearson(&neg, &ys).unwrap(), -base, 1e-12));
            prop_assert!(close(pearson(&ys, &xs).unwrap(), base, 1e-15));
            let sp = spearman(&xs, &ys).unwrap();
            prop_assert!(close(spearman(&ys, &xs).unwrap(), sp, 1e-15));
            let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3) + 7.0).collect();
            prop_assert!(close(spearman(&cubed, &ys).unwrap(), sp, 1e-12));
        }

        #[test]
        fn histogram_counts_sum(scores in prop::collection::vec(0.0f64..=1.0, 0..200), bins in 1usize..40) {
            let h = histogram(&scores, bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), scores.len());
            prop_assert_eq!(h[0].lo, 0.0);
            prop_assert_eq!(h[bins - 1].hi, 1.0);
            for (i, &s) in scores.iter().enumerate() {
                let _ = i;
                let idx = h.iter().position(|b| s >= b.lo && (s < b.hi || (b.hi == 1.0 && s <= 1.0))).unwrap();
                prop_assert!(h[idx].count > 0);
            }
        }
    }

    #[test]
    fn score_file_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), 0.25);
        m.insert("a".to_string(), 1.0 / 3.0);
        let text = format_scores(&m);
        assert!(text.starts_with("pair_id\tscore\na\t"));
        assert_eq!(parse_scores(&text, Path::new("x")).unwrap(), m);
        assert!(parse_scores("a\tnope\n", Path::new("x")).is_err());
        assert!(matches!(parse_scores("a\t1\na\t2\n", Path::new("x")), Err(Error::DuplicateId(_))));
        let rep = evaluate_scores(&m, &m, 20).unwrap();
        assert_eq!(rep.pearson, 1.0);
        let mut short = m.clone();
        short.remove("a");
        assert!(matches!(evaluate_scores(&short, &m, 20), Err(Error::MissingScores(v)) if v == ["a"]));
    }
}
