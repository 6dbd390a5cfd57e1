//! Plain-text corpus, triplet and STS pair files.
//!
//! * unlabeled corpus: one sentence per line, blank lines ignored
//! * triplets: `anchor \t positive \t negative`
//! * STS pairs: `sentence_a \t sentence_b \t gold`
//!
//! A leading UTF-8 byte-order mark is stripped. Malformed lines fail the
//! whole load with the offending line number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::StsPair;
use crate::vocab::Sentence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: Sentence,
    pub positive: Sentence,
    pub negative: Sentence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCorpus {
    pub sentences: Vec<Sentence>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsPairSet {
    pub name: String,
    pub pairs: Vec<StsPair>,
}

fn read_text(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match text.strip_prefix('\u{feff}') {
        Some(rest) => rest.to_string(),
        None => text,
    })
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        reason: reason.into(),
    }
}

/// Non-blank lines with their 1-based line numbers, `\r` stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn columns<'a>(path: &Path, line_no: usize, line: &'a str, what: &str) -> Result<[&'a str; 3]> {
    let cols: Vec<&str> = line.split('\t').collect();
    <[&str; 3]>::try_from(cols.as_slice()).map_err(|_| {
        parse_err(path, line_no, format!("expected 3 tab-separated {what} columns, found {}", cols.len()))
    })
}

fn sentence(path: &Path, line_no: usize, text: &str) -> Result<Sentence> {
    Sentence::new(text.trim()).map_err(|_| parse_err(path, line_no, "empty sentence field"))
}

pub fn load_unlabeled(path: impl AsRef<Path>) -> Result<UnlabeledCorpus> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let sentences = content_lines(&text)
        .map(|(_, l)| Sentence::new(l.trim()))
        .collect::<Result<Vec<_>>>()?;
    if sentences.is_empty() {
        return Err(Error::Invalid(format!("{}: corpus contains no sentences", path.display())));
    }
    Ok(UnlabeledCorpus {
        sentences,
        source: path.display().to_string(),
    })
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<TripletSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut triplets = Vec::new();
    for (n, line) in content_lines(&text) {
        let [a, p, neg] = columns(path, n, line, "triplet")?;
        triplets.push(Triplet {
            anchor: sentence(path, n, a)?,
            positive: sentence(path, n, p)?,
            negative: sentence(path, n, neg)?,
        });
    }
    Ok(TripletSet { triplets })
}

pub fn load_sts(path: impl AsRef<Path>, name: &str) -> Result<StsPairSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (n, line) in content_lines(&text) {
        let [a, b, score] = columns(path, n, line, "STS")?;
        let gold: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(path, n, format!("unparseable gold score {score:?}")))?;
        if !gold.is_finite() {
            return Err(parse_err(path, n, format!("gold score {score:?} is not finite")));
        }
        pairs.push(StsPair::new(sentence(path, n, a)?, sentence(path, n, b)?, gold)?);
    }
    Ok(StsPairSet {
        name: name.to_string(),
        pairs,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn field(s: &Sentence) -> Result<&str> {
    let t = s.as_str();
    if t.contains(['\t', '\n', '\r']) {
        return Err(Error::Invalid(format!("sentence {t:?} cannot be written as a TSV field")));
    }
    Ok(t)
}

pub fn write_unlabeled(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        if s.as_str().contains(['\n', '\r']) {
            return Err(Error::Invalid(format!("sentence {:?} spans lines", s.as_str())));
        }
        let _ = writeln!(out, "{s}");
    }
    write_text(path.as_ref(), &out)
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let mut out = String::new();
    for t in triplets {
        let _ = writeln!(out, "{}\t{}\t{}", field(&t.anchor)?, field(&t.positive)?, field(&t.negative)?);
    }
    write_text(path.as_ref(), &out)
}

pub fn write_sts(path: impl AsRef<Path>, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{}\t{}\t{}", field(&p.a)?, field(&p.b)?, p.gold);
    }
    write_text(path.as_ref(), &out)
}
