// SPDX-License-Identifier: MIT OR Apache-2.0

//! Object/part co-occurrence statistics over caption-style text.
//!
//! Text is lowercased, ASCII punctuation is deleted, tokens are split on
//! whitespace and Porter-stemmed. Lexicon terms expand to stemmed variants;
//! a multi-word variant matches a contiguous run of stems.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::par;

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Consonant flags per position; `y` is a consonant at the start or after a
/// vowel.
fn consonants(w: &[u8]) -> Vec<bool> {
    let mut flags: Vec<bool> = Vec::with_capacity(w.len());
    for (i, &c) in w.iter().enumerate() {
        let f = if is_vowel(c) {
            false
        } else if c == b'y' {
            i == 0 || !flags[i - 1]
        } else {
            true
        };
        flags.push(f);
    }
    flags
}

/// Number of vowel→consonant transitions, the `m` of `[C](VC)^m[V]`.
fn measure(w: &[u8]) -> usize {
    consonants(w).windows(2).filter(|p| !p[0] && p[1]).count()
}

fn has_vowel(w: &[u8]) -> bool {
    consonants(w).iter().any(|&c| !c)
}

fn ends_double_consonant(w: &[u8]) -> bool {
    let n = w.len();
    n >= 2 && w[n - 1] == w[n - 2] && consonants(w)[n - 1]
}

fn ends_cvc(w: &[u8]) -> bool {
    let n = w.len();
    if n < 3 {
        return false;
    }
    let f = consonants(w);
    f[n - 3] && !f[n - 2] && f[n - 1] && !matches!(w[n - 1], b'w' | b'x' | b'y')
}

type Cond = fn(&[u8]) -> bool;

fn m_gt0(s: &[u8]) -> bool {
    measure(s) > 0
}

fn m_gt1(s: &[u8]) -> bool {
    measure(s) > 1
}

/// First rule whose suffix matches decides: the replacement applies if its
/// condition holds on the remaining stem, otherwise the word is unchanged.
fn apply_rules(w: Vec<u8>, rules: &[(&str, &str, Option<Cond>)]) -> Vec<u8> {
    for &(suffix, repl, cond) in rules {
        if w.ends_with(suffix.as_bytes()) {
            let stem = &w[..w.len() - suffix.len()];
            if cond.is_none_or(|c| c(stem)) {
                let mut out = stem.to_vec();
                out.extend_from_slice(repl.as_bytes());
                return out;
            }
            return w;
        }
    }
    w
}

fn step1a(w: Vec<u8>) -> Vec<u8> {
    apply_rules(
        w,
        &[
            ("sses", "ss", None),
            ("ies", "i", None),
            ("ss", "ss", None),
            ("s", "", None),
        ],
    )
}

fn step1b(w: Vec<u8>) -> Vec<u8> {
    if w.ends_with(b"eed") {
        let stem = &w[..w.len() - 3];
        if measure(stem) > 0 {
            let mut out = stem.to_vec();
            out.extend_from_slice(b"ee");
            return out;
        }
        return w;
    }
    let mut stem = None;
    for suffix in [&b"ed"[..], b"ing"] {
        if w.ends_with(suffix) {
            let s = &w[..w.len() - suffix.len()];
            if has_vowel(s) {
                stem = Some(s.to_vec());
                break;
            }
        }
    }
    let Some(mut s) = stem else { return w };
    for (suffix, repl) in [(&b"at"[..], &b"ate"[..]), (b"bl", b"ble"), (b"iz", b"ize")] {
        if s.ends_with(suffix) {
            s.truncate(s.len() - suffix.len());
            s.extend_from_slice(repl);
            return s;
        }
    }
    if ends_double_consonant(&s) {
        if !matches!(s[s.len() - 1], b'l' | b's' | b'z') {
            s.pop();
        }
        return s;
    }
    if measure(&s) == 1 && ends_cvc(&s) {
        s.push(b'e');
    }
    s
}

fn step1c(w: Vec<u8>) -> Vec<u8> {
    apply_rules(w, &[("y", "i", Some(has_vowel))])
}

fn step2(w: Vec<u8>) -> Vec<u8> {
    let c = Some(m_gt0 as Cond);
    apply_rules(
        w,
        &[
            ("ational", "ate", c),
            ("tional", "tion", c),
            ("enci", "ence", c),
            ("anci", "ance", c),
            ("izer", "ize", c),
            ("abli", "able", c),
            ("alli", "al", c),
            ("entli", "ent", c),
            ("eli", "e", c),
            ("ousli", "ous", c),
            ("ization", "ize", c),
            ("ation", "ate", c),
            ("ator", "ate", c),
            ("alism", "al", c),
            ("iveness", "ive", c),
            ("fulness", "ful", c),
            ("ousness", "ous", c),
            ("aliti", "al", c),
            ("iviti", "ive", c),
            ("biliti", "ble", c),
        ],
    )
}

fn step3(w: Vec<u8>) -> Vec<u8> {
    let c = Some(m_gt0 as Cond);
    apply_rules(
        w,
        &[
            ("icate", "ic", c),
            ("ative", "", c),
            ("alize", "al", c),
            ("iciti", "ic", c),
            ("ical", "ic", c),
            ("ful", "", c),
            ("ness", "", c),
        ],
    )
}

fn ion_cond(s: &[u8]) -> bool {
    measure(s) > 1 && matches!(s.last(), Some(b's' | b't'))
}

fn step4(w: Vec<u8>) -> Vec<u8> {
    let c = Some(m_gt1 as Cond);
    apply_rules(
        w,
        &[
            ("al", "", c),
            ("ance", "", c),
            ("ence", "", c),
            ("er", "", c),
            ("ic", "", c),
            ("able", "", c),
            ("ible", "", c),
            ("ant", "", c),
            ("ement", "", c),
            ("ment", "", c),
            ("ent", "", c),
            ("ion", "", Some(ion_cond)),
            ("ou", "", c),
            ("ism", "", c),
            ("ate", "", c),
            ("iti", "", c),
            ("ous", "", c),
            ("ive", "", c),
            ("ize", "", c),
        ],
    )
}

fn step5a(mut w: Vec<u8>) -> Vec<u8> {
    if w.last() == Some(&b'e') {
        let stem = &w[..w.len() - 1];
        let m = measure(stem);
        if m > 1 || (m == 1 && !ends_cvc(stem)) {
            w.pop();
        }
    }
    w
}

fn step5b(mut w: Vec<u8>) -> Vec<u8> {
    if w.ends_with(b"ll") && measure(&w[..w.len() - 1]) > 1 {
        w.pop();
    }
    w
}

/// Porter (1980) suffix stripping, steps 1a through 5b. Tokens that are not
/// all lowercase ASCII letters are returned unchanged.
pub fn porter_stem(word: &str) -> String {
    if word.is_empty() || !word.bytes().all(|b| b.is_ascii_lowercase()) {
        return word.to_string();
    }
    let w = word.as_bytes().to_vec();
    let w = step5b(step5a(step4(step3(step2(step1c(step1b(step1a(w))))))));
    String::from_utf8(w).expect("ASCII in, ASCII out")
}

/// Lowercase, delete ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

/// [`tokenize`] then stem every token.
pub fn stem_text(text: &str) -> Vec<String> {
    tokenize(text).iter().map(|t| porter_stem(t)).collect()
}

/// Term → surface variants (synonyms, hyponyms, plurals).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    terms: BTreeMap<String, BTreeSet<String>>,
}

impl Lexicon {
    pub fn new(terms: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (term, variants) in terms {
            if variants.is_empty() {
                return Err(ProbeError::Table(format!("lexicon term `{term}` has no variants")));
            }
            if let Some(v) = variants
                .iter()
                .chain(std::iter::once(&term))
                .find(|v| *v != &v.to_lowercase())
            {
                return Err(ProbeError::Table(format!("lexicon entry `{v}` is not lowercase")));
            }
            out.insert(term, variants.into_iter().collect());
        }
        Ok(Self { terms: out })
    }

    /// Read a JSON object `{"leg": ["leg", "legs", "limb"], …}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| ProbeError::json(path.display().to_string(), e))?;
        Self::new(raw)
    }

    pub fn variants(&self, term: &str) -> Option<&BTreeSet<String>> {
        self.terms.get(term)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Stemmed patterns that count as a mention of one term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pub term: String,
    /// Each pattern is a sequence of stems; single words have length 1.
    pub patterns: BTreeSet<Vec<String>>,
}

impl MatchSet {
    /// Single-word stems of the set.
    pub fn stems(&self) -> BTreeSet<&str> {
        self.patterns
            .iter()
            .filter(|p| p.len() == 1)
            .map(|p| p[0].as_str())
            .collect()
    }

    /// Number of positions in `stems` where some pattern starts.
    pub fn mentions(&self, stems: &[String]) -> usize {
        (0..stems.len())
            .filter(|&i| self.patterns.iter().any(|p| stems[i..].starts_with(p)))
            .count()
    }
}

/// Union of the term and its lexicon variants, stemmed and deduplicated.
/// Terms missing from the lexicon stand for themselves.
pub fn expand_lexicon(terms: &[String], lexicon: &Lexicon) -> Vec<MatchSet> {
    terms
        .iter()
        .map(|term| {
            let mut surfaces: BTreeSet<&str> = BTreeSet::from([term.as_str()]);
            match lexicon.variants(term) {
                Some(v) => surfaces.extend(v.iter().map(String::as_str)),
                None => log::warn!("term `{term}` not in lexicon; matching it verbatim"),
            }
            let patterns = surfaces.into_iter().map(stem_text).filter(|p| !p.is_empty()).collect();
            MatchSet {
                term: term.clone(),
                patterns,
            }
        })
        .collect()
}

/// How repeated mentions inside one record are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// A record contributes at most 1 to each cell and total.
    #[default]
    PerRecord,
    /// Every part mention counts; a cell counts part mentions in records that
    /// also mention the object.
    PerMention,
}

/// Object × part co-occurrence matrix with per-part and per-object totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub objects: Vec<String>,
    pub parts: Vec<String>,
    /// `matrix[o][p]`.
    pub matrix: Vec<Vec<u64>>,
    pub part_totals: Vec<u64>,
    pub object_totals: Vec<u64>,
    pub records: u64,
}

impl CooccurrenceTable {
    fn zeros(objects: &[MatchSet], parts: &[MatchSet]) -> Self {
        Self {
            objects: objects.iter().map(|m| m.term.clone()).collect(),
            parts: parts.iter().map(|m| m.term.clone()).collect(),
            matrix: vec![vec![0; parts.len()]; objects.len()],
            part_totals: vec![0; parts.len()],
            object_totals: vec![0; objects.len()],
            records: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.part_totals
            .iter_mut()
            .zip(&other.part_totals)
            .for_each(|(x, y)| *x += y);
        self.object_totals
            .iter_mut()
            .zip(&other.object_totals)
            .for_each(|(x, y)| *x += y);
        self.records += other.records;
    }

    /// `object,<part…>` header, one row per object, then a `total` row.
    pub fn to_csv(&self) -> String {
        let header: Vec<&str> = std::iter::once("object")
            .chain(self.parts.iter().map(String::as_str))
            .collect();
        let rows: Vec<Vec<String>> = self
            .objects
            .iter()
            .zip(&self.matrix)
            .chain(std::iter::once((&"total".to_string(), &self.part_totals)))
            .map(|(o, row)| {
                std::iter::once(o.clone())
                    .chain(row.iter().map(|v| v.to_string()))
                    .collect()
            })
            .collect();
        crate::experiment::table_csv(&header, &rows)
    }
}

const SHARD: usize = 256;

/// Count object/part co-occurrences record by record.
pub fn cooccurrence_counts<S: AsRef<str> + Sync>(
    corpus: &[S],
    objects: &[MatchSet],
    parts: &[MatchSet],
    mode: CountMode,
) -> CooccurrenceTable {
    let shards: Vec<&[S]> = corpus.chunks(SHARD).collect();
    let partials = par::map(&shards, |shard| {
        let mut t = CooccurrenceTable::zeros(objects, parts);
        for record in shard.iter() {
            let stems = stem_text(record.as_ref());
            let obj: Vec<usize> = objects.iter().map(|m| m.mentions(&stems)).collect();
            let prt: Vec<usize> = parts.iter().map(|m| m.mentions(&stems)).collect();
            let weight = |n: usize| match mode {
                CountMode::PerRecord => u64::from(n > 0),
                CountMode::PerMention => n as u64,
            };
            for (o, &no) in obj.iter().enumerate() {
                t.object_totals[o] += weight(no);
                if no == 0 {
                    continue;
                }
                for (p, &np) in prt.iter().enumerate() {
                    t.matrix[o][p] += weight(np);
                }
            }
            for (p, &np) in prt.iter().enumerate() {
                t.part_totals[p] += weight(np);
            }
            t.records += 1;
        }
        t
    });
    let mut total = CooccurrenceTable::zeros(objects, parts);
    for p in &partials {
        total.add(p);
    }
    total
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusLine {
    Text(String),
    Record { text: String },
}

/// JSON lines, each either a string or an object with a `text` field.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ProbeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine =
            serde_json::from_str(&line).map_err(|e| ProbeError::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(match rec {
            CorpusLine::Text(t) | CorpusLine::Record { text: t } => t,
        });
    }
    Ok(out)
}
