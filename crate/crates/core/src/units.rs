//! Discrete acoustic-unit sequences.
//!
//! A [`UnitSequence`] is the pseudo-transcript of one utterance: the ordered
//! cluster ids emitted by a speech-to-unit encoder or by nearest-centroid
//! quantization. This module also owns the unit-file format
//! (`<id>\t<space separated unit ids>`) and the mapping of units onto
//! Private Use Area characters used by character-level metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// First code point of the unit alphabet.
pub const PUA_START: u32 = 0xE000;
/// Number of code points in the Basic Multilingual Plane private use area.
pub const PUA_CAPACITY: u32 = 6400;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitSequence {
    units: Vec<u32>,
    vocab_size: u32,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if let Some(&unit) = units.iter().find(|&&u| u >= vocab_size) {
            return Err(Error::UnitOutOfRange { unit, vocab_size });
        }
        Ok(Self { units, vocab_size })
    }

    pub fn empty(vocab_size: u32) -> Self {
        Self {
            units: Vec::new(),
            vocab_size: vocab_size.max(1),
        }
    }

    pub fn units(&self) -> &[u32] {
        &self.units
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Re-labels the sequence with a larger vocabulary.
    pub fn with_vocab_size(self, vocab_size: u32) -> Result<Self> {
        Self::new(self.units, vocab_size)
    }

    /// True when no two adjacent units are equal.
    pub fn is_deduplicated(&self) -> bool {
        self.units.windows(2).all(|w| w[0] != w[1])
    }

    pub fn into_units(self) -> Vec<u32> {
        self.units
    }
}

/// Collapses every maximal run of identical consecutive units to one unit.
pub fn dedup(seq: &UnitSequence) -> UnitSequence {
    let mut units = seq.units.clone();
    units.dedup();
    UnitSequence {
        units,
        vocab_size: seq.vocab_size,
    }
}

/// Renders unit `i` as the character `U+E000 + i`.
pub fn units_to_chars(seq: &UnitSequence) -> Result<String> {
    if seq.vocab_size > PUA_CAPACITY {
        return Err(Error::PuaCapacity(seq.vocab_size));
    }
    Ok(seq
        .units
        .iter()
        .map(|&u| char::from_u32(PUA_START + u).expect("PUA code points are valid scalars"))
        .collect())
}

pub fn chars_to_units(s: &str, vocab_size: u32) -> Result<UnitSequence> {
    if vocab_size > PUA_CAPACITY {
        return Err(Error::PuaCapacity(vocab_size));
    }
    let units = s
        .chars()
        .enumerate()
        .map(|(index, c)| {
            let cp = c as u32;
            if (PUA_START..PUA_START + vocab_size).contains(&cp) {
                Ok(cp - PUA_START)
            } else {
                Err(Error::CharDecode {
                    index,
                    codepoint: cp,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    UnitSequence::new(units, vocab_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub units: UnitSequence,
    pub transcript: Option<String>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, units: UnitSequence) -> Result<Self> {
        let id = id.into();
        validate_id(&id)?;
        Ok(Self {
            id,
            units,
            transcript: None,
        })
    }

    pub fn with_transcript(mut self, transcript: impl Into<String>) -> Self {
        self.transcript = Some(transcript.into());
        self
    }
}

pub(crate) fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidId(id.to_string()));
    }
    Ok(())
}

/// Parses unit-file text. When `vocab_size` is `None` it is inferred as
/// one past the largest unit in the file.
pub fn parse_units(text: &str, path: &Path, vocab_size: Option<u32>) -> Result<Vec<Utterance>> {
    let mut raw = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `<id>\\t<units>`".into()))?;
        if id.is_empty() {
            return Err(parse_err("empty utterance id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let units = rest
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| parse_err(format!("invalid unit id `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        raw.push((id.to_string(), units));
    }

    let vocab = match vocab_size {
        Some(v) => v,
        None => raw
            .iter()
            .flat_map(|(_, u)| u.iter().copied())
            .max()
            .map_or(1, |m| m + 1),
    };
    raw.into_iter()
        .map(|(id, units)| Utterance::new(id, UnitSequence::new(units, vocab)?))
        .collect()
}

pub fn read_units_file(path: &Path, vocab_size: Option<u32>) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_units(&text, path, vocab_size)
}

pub fn format_units(utts: &[Utterance]) -> Result<String> {
    let mut out = String::new();
    let mut seen = HashSet::new();
    for utt in utts {
        validate_id(&utt.id)?;
        if !seen.insert(utt.id.as_str()) {
            return Err(Error::DuplicateId(utt.id.clone()));
        }
        out.push_str(&utt.id);
        out.push('\t');
        for (j, u) in utt.units.units().iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{u}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_units_file(utts: &[Utterance], path: &Path) -> Result<()> {
    let text = format_units(utts)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a `<id>\t<text>` transcript table.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(id, t)| (id.to_string(), t.to_string()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected `<id>\\t<transcript>`".into(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(units: &[u32]) -> UnitSequence {
        UnitSequence::new(units.to_vec(), 200).unwrap()
    }

    #[test]
    fn dedup_collapses_runs() {
        assert_eq!(dedup(&seq(&[5, 5, 5, 2, 2, 7])).units(), &[5, 2, 7]);
        assert_eq!(dedup(&seq(&[])).units(), &[] as &[u32]);
        assert_eq!(dedup(&seq(&[1, 2, 1, 1, 2])).units(), &[1, 2, 1, 2]);
        assert_eq!(dedup(&seq(&[3, 3])).vocab_size(), 200);
    }

    #[test]
    fn pua_mapping() {
        assert_eq!(units_to_chars(&seq(&[0])).unwrap(), "\u{E000}");
        assert_eq!(
            units_to_chars(&seq(&[0, 1, 2])).unwrap(),
            "\u{E000}\u{E001}\u{E002}"
        );
        assert_eq!(units_to_chars(&seq(&[199])).unwrap(), "\u{E0C7}");
        assert_eq!(chars_to_units("", 10).unwrap().units(), &[] as &[u32]);

        let s = units_to_chars(&seq(&[3, 1, 4])).unwrap();
        assert_eq!(chars_to_units(&s, 200).unwrap().units(), &[3, 1, 4]);
    }

    #[test]
    fn pua_errors() {
        let big = UnitSequence::new(vec![0], 6401).unwrap();
        assert!(matches!(units_to_chars(&big), Err(Error::PuaCapacity(6401))));
        let boundary = char::from_u32(PUA_START + 10).unwrap().to_string();
        let s = format!("\u{E000}{boundary}");
        assert!(matches!(
            chars_to_units(&s, 10),
            Err(Error::CharDecode { index: 1, .. })
        ));
        assert!(chars_to_units("a", 10).is_err());
    }

    #[test]
    fn unit_out_of_range_rejected() {
        assert!(matches!(
            UnitSequence::new(vec![1, 10], 10),
            Err(Error::UnitOutOfRange {
                unit: 10,
                vocab_size: 10
            })
        ));
    }

    #[test]
    fn parse_lines() {
        let p = Path::new("units.tsv");
        let utts = parse_units("utt1\t5 5 2\nutt2\t\n", p, Some(10)).unwrap();
        assert_eq!(utts[0].id, "utt1");
        assert_eq!(utts[0].units.units(), &[5, 5, 2]);
        assert!(utts[1].units.is_empty());

        match parse_units("utt3 5 2\n", p, None) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_units("a\t1\nb\tx\n", p, None) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_units("a\t1\na\t2\n", p, None) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inferred_vocab() {
        let utts = parse_units("a\t1 7\nb\t3\n", Path::new("x"), None).unwrap();
        assert_eq!(utts[0].units.vocab_size(), 8);
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.tsv");
        let utts = vec![
            Utterance::new("x", seq(&[1, 2, 2])).unwrap(),
            Utterance::new("y", seq(&[])).unwrap(),
        ];
        write_units_file(&utts, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "x\t1 2 2\ny\t\n");
        let back = read_units_file(&path, Some(200)).unwrap();
        assert_eq!(back, utts);
    }

    proptest! {
        #[test]
        fn dedup_idempotent_and_shrinking(units in prop::collection::vec(0u32..5, 0..60)) {
            let s = seq(&units);
            let once = dedup(&s);
            prop_assert_eq!(dedup(&once).clone(), once.clone());
            prop_assert!(once.len() <= s.len());
            prop_assert_eq!(once.len() == s.len(), s.is_deduplicated());
            prop_assert!(once.is_deduplicated());
        }

        #[test]
        fn chars_round_trip(units in prop::collection::vec(0u32..6400, 0..50)) {
            let s = UnitSequence::new(units, 6400).unwrap();
            let text = units_to_chars(&s).unwrap();
            prop_assert_eq!(text.chars().count(), s.len());
            prop_assert_eq!(chars_to_units(&text, 6400).unwrap(), s);
        }

        #[test]
        fn units_text_round_trip(
            rows in prop::collection::vec(prop::collection::vec(0u32..300, 0..20), 0..15)
        ) {
            let utts: Vec<Utterance> = rows
                .into_iter()
                .enumerate()
                .map(|(i, u)| Utterance::new(format!("utt{i}"), UnitSequence::new(u, 300).unwrap()).unwrap())
                .collect();
            let text = format_units(&utts).unwrap();
            let back = parse_units(&text, Path::new("p"), Some(300)).unwrap();
            prop_assert_eq!(&back, &utts);
            prop_assert_eq!(format_units(&back).unwrap(), text);
        }
    }
}
