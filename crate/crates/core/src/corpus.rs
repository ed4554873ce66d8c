//! Patient records, the code vocabulary and visit-delimited token sequences.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const UNK: TokenId = 5;
/// `AGE_0` .. `AGE_9` occupy `AGE_BASE..AGE_BASE + 10`.
pub const AGE_BASE: TokenId = 6;
pub const AGE_BUCKETS: u32 = 10;
pub const SEX_M: TokenId = 16;
pub const SEX_F: TokenId = 17;
pub const SEX_U: TokenId = 18;
/// Id of the most frequent diagnosis code.
pub const FIRST_CODE: TokenId = 19;

/// Number of tokens (age bucket, sex) in front of the first visit.
pub const PREFIX_LEN: usize = 2;

const SPECIAL_NAMES: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]", "[UNK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[serde(other)]
    U,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(rename = "age")]
    pub age_years: u32,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub codes: Vec<String>,
}

impl Visit {
    pub fn new<S: Into<String>>(codes: impl IntoIterator<Item = S>) -> Self {
        Visit {
            codes: codes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.iter().any(|c| c == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub visits: Vec<Visit>,
}

pub type Cohort = Vec<PatientRecord>;

impl PatientRecord {
    /// Checks the record invariants: at least two visits, every visit
    /// non-empty, no code repeated inside a visit.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            patient_id: self.patient_id.clone(),
            reason,
        };
        if self.visits.len() < 2 {
            return Err(fail(format!(
                "{} visit(s); at least 2 are required",
                self.visits.len()
            )));
        }
        for (v, visit) in self.visits.iter().enumerate() {
            if visit.codes.is_empty() {
                return Err(fail(format!("visit {v} has no codes")));
            }
            for (i, code) in visit.codes.iter().enumerate() {
                if visit.codes[..i].contains(code) {
                    return Err(fail(format!("visit {v} repeats code {code}")));
                }
            }
        }
        Ok(())
    }

    /// Whether `code` occurs anywhere in visits `0..upto`.
    pub fn seen_before(&self, upto: usize, code: &str) -> bool {
        self.visits[..upto.min(self.visits.len())]
            .iter()
            .any(|v| v.contains(code))
    }
}

/// Bidirectional map between code strings and token ids.
///
/// Layout: six specials, ten age-decade buckets, three sex tokens, then
/// codes in descending corpus frequency (ties lexicographic).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    codes: Vec<String>,
    min_count: u32,
    index: BTreeMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_count: u32,
    codes: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_codes(r.codes, r.min_count)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            min_count: v.min_count,
            codes: v.codes,
        }
    }
}

impl Vocabulary {
    /// Codes with corpus frequency `>= min_count` get ids; the rest map to
    /// `[UNK]`.
    pub fn build(cohort: &[PatientRecord], min_count: u32) -> Result<Self> {
        if cohort.is_empty() {
            return Err(Error::Empty("cohort"));
        }
        if min_count < 1 {
            return Err(Error::InvalidArgument("min_count must be >= 1".into()));
        }
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for rec in cohort {
            for visit in &rec.visits {
                for code in &visit.codes {
                    *counts.entry(code.as_str()).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, u32)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
        // BTreeMap iteration is lexicographic and the sort is stable.
        kept.sort_by_key(|&(_, n)| core::cmp::Reverse(n));
        Ok(Self::from_codes(
            kept.into_iter().map(|(c, _)| c.to_string()).collect(),
            min_count,
        ))
    }

    /// Rebuilds a vocabulary from codes listed in id order.
    pub fn from_codes(codes: Vec<String>, min_count: u32) -> Self {
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), FIRST_CODE + i as TokenId))
            .collect();
        Vocabulary {
            codes,
            min_count,
            index,
        }
    }

    /// Total number of token ids, specials included.
    pub fn len(&self) -> usize {
        FIRST_CODE as usize + self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn get(&self, code: &str) -> Option<TokenId> {
        self.index.get(code).copied()
    }

    pub fn id(&self, code: &str) -> TokenId {
        self.get(code).unwrap_or(UNK)
    }

    pub fn code(&self, id: TokenId) -> Option<&str> {
        id.checked_sub(FIRST_CODE)
            .and_then(|i| self.codes.get(i as usize))
            .map(String::as_str)
    }

    pub fn is_code(&self, id: TokenId) -> bool {
        id >= FIRST_CODE && ((id - FIRST_CODE) as usize) < self.codes.len()
    }

    /// Human-readable label for any token id.
    pub fn label(&self, id: TokenId) -> String {
        if let Some(name) = SPECIAL_NAMES.get(id as usize) {
            return (*name).to_string();
        }
        match id {
            _ if (AGE_BASE..AGE_BASE + AGE_BUCKETS).contains(&id) => format!("AGE_{}", id - AGE_BASE),
            SEX_M => "SEX_M".into(),
            SEX_F => "SEX_F".into(),
            SEX_U => "SEX_U".into(),
            _ => self
                .code(id)
                .map(ToString::to_string)
                .unwrap_or_else(|| format!("<{id}>")),
        }
    }
}

pub fn age_token(age_years: u32) -> TokenId {
    AGE_BASE + (age_years / 10).min(AGE_BUCKETS - 1)
}

pub fn sex_token(sex: Sex) -> TokenId {
    match sex {
        Sex::M => SEX_M,
        Sex::F => SEX_F,
        Sex::U => SEX_U,
    }
}

/// Flattened, visit-delimited history.
///
/// Visit 0 is the demographic prefix; each later visit contributes its code
/// tokens followed by `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<TokenId>,
    pub visit_index: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Code-carrying position: past the prefix and not a delimiter or pad.
    pub fn is_code_position(&self, pos: usize) -> bool {
        self.visit_index[pos] > 0 && !matches!(self.token_ids[pos], SEP | PAD)
    }

    pub fn n_code_tokens(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_code_position(i)).count()
    }

    /// Position ranges of each visit segment, `[SEP]` included.
    pub fn visit_segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &tok) in self.token_ids.iter().enumerate() {
            if self.visit_index[i] == 0 || tok == PAD {
                continue;
            }
            let s = *start.get_or_insert(i);
            if tok == SEP {
                out.push(s..i + 1);
                start = None;
            }
        }
        out
    }

    pub fn count(&self, token: TokenId) -> usize {
        self.token_ids.iter().filter(|&&t| t == token).count()
    }

    /// Splits on `[SEP]`, returning the code tokens of each visit.
    pub fn split_visits(&self) -> Vec<Vec<TokenId>> {
        self.visit_segments()
            .into_iter()
            .map(|r| self.token_ids[r.start..r.end - 1].to_vec())
            .collect()
    }

    /// Appends `n` pad tokens (visit index repeats the last value).
    pub fn padded(&self, n: usize) -> TokenSequence {
        let mut out = self.clone();
        let last = out.visit_index.last().copied().unwrap_or(0);
        out.token_ids.extend(core::iter::repeat_n(PAD, n));
        out.visit_index.extend(core::iter::repeat_n(last, n));
        out
    }
}

/// Tokenizes visits `0..upto_visit` of `record`.
///
/// When the result would exceed `max_seq_len`, the oldest whole visits are
/// dropped; the demographic prefix is always kept and the surviving visits
/// are renumbered from 1.
pub fn flatten_history(
    record: &PatientRecord,
    upto_visit: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<TokenSequence> {
    if upto_visit < 1 || upto_visit > record.visits.len() {
        return Err(Error::OutOfRange {
            what: "upto_visit",
            index: upto_visit,
            len: record.visits.len(),
        });
    }
    let visits = &record.visits[..upto_visit];
    let mut budget = max_seq_len.saturating_sub(PREFIX_LEN);
    let mut first = visits.len();
    while first > 0 && visits[first - 1].codes.len() < budget {
        budget -= visits[first - 1].codes.len() + 1;
        first -= 1;
    }
    if first == visits.len() {
        return Err(Error::SequenceTooLong {
            len: PREFIX_LEN + visits[first - 1].codes.len() + 1,
            max: max_seq_len,
        });
    }
    let mut seq = TokenSequence {
        token_ids: Vec::with_capacity(max_seq_len - budget),
        visit_index: Vec::with_capacity(max_seq_len - budget),
    };
    seq.token_ids.push(age_token(record.demographics.age_years));
    seq.token_ids.push(sex_token(record.demographics.sex));
    seq.visit_index.extend([0, 0]);
    for (k, visit) in visits[first..].iter().enumerate() {
        let vi = k as u32 + 1;
        for code in &visit.codes {
            seq.token_ids.push(vocab.id(code));
            seq.visit_index.push(vi);
        }
        seq.token_ids.push(SEP);
        seq.visit_index.push(vi);
    }
    Ok(seq)
}

/// Decoder target for visit `visit_idx`: its codes in lexicographic order,
/// then `[EOS]`.
pub fn target_visit(record: &PatientRecord, visit_idx: usize, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let visit = record.visits.get(visit_idx).ok_or(Error::OutOfRange {
        what: "visit_idx",
        index: visit_idx,
        len: record.visits.len(),
    })?;
    let mut codes: Vec<&String> = visit.codes.iter().collect();
    codes.sort();
    let mut out: Vec<TokenId> = codes.into_iter().map(|c| vocab.id(c)).collect();
    out.push(EOS);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecurrenceStratum {
    /// Present in more than half of the prior visits.
    H,
    /// Present in some, but at most half, of the prior visits.
    L,
    /// Never present before: a new onset.
    Zero,
}

impl RecurrenceStratum {
    pub const ALL: [RecurrenceStratum; 3] = [Self::H, Self::L, Self::Zero];

    pub fn name(self) -> &'static str {
        match self {
            Self::H => "H",
            Self::L => "L",
            Self::Zero => "0",
        }
    }
}

/// Stratum of `code` at `visit_idx` from its frequency over visits
/// `0..visit_idx`.
pub fn recurrence_stratum(record: &PatientRecord, visit_idx: usize, code: &str) -> RecurrenceStratum {
    let prior = &record.visits[..visit_idx.min(record.visits.len())];
    let hits = prior.iter().filter(|v| v.contains(code)).count();
    if hits == 0 {
        RecurrenceStratum::Zero
    } else if 2 * hits > prior.len() {
        RecurrenceStratum::H
    } else {
        RecurrenceStratum::L
    }
}

/// Keeps the `k` most recent visits.
pub fn truncate_history(record: &PatientRecord, k: usize) -> Result<PatientRecord> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "history length k={k} would leave fewer than 2 visits"
        )));
    }
    let n = record.visits.len();
    Ok(PatientRecord {
        patient_id: record.patient_id.clone(),
        demographics: record.demographics.clone(),
        visits: record.visits[n.saturating_sub(k)..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(visits: &[&[&str]]) -> PatientRecord {
        PatientRecord {
            patient_id: "p1".into(),
            demographics: Demographics {
                age_years: 64,
                sex: Sex::M,
            },
            visits: visits.iter().map(|v| Visit::new(v.iter().copied())).collect(),
        }
    }

    #[test]
    fn validation_rules() {
        assert!(rec(&[&["A"], &["B"]]).validate().is_ok());
        let err = rec(&[&["A"]]).validate().unwrap_err();
        assert!(matches!(err, Error::Validation { ref patient_id, .. } if patient_id == "p1"));
        assert!(rec(&[&["A", "A"], &["B"]]).validate().is_err());
        assert!(rec(&[&[], &["B"]]).validate().is_err());
    }

    #[test]
    fn vocab_threshold_and_order() {
        let cohort = vec![rec(&[&["A", "B"], &["A"], &["A", "C"]])];
        let v = Vocabulary::build(&cohort, 2).unwrap();
        assert_eq!(v.get("A"), Some(FIRST_CODE));
        assert_eq!(v.id("B"), UNK);
        let all = Vocabulary::build(&cohort, 1).unwrap();
        // A×3 first, then B and C tied at 1, lexicographic.
        assert_eq!(all.codes(), &["A", "B", "C"]);
        assert_eq!(all, Vocabulary::build(&cohort, 1).unwrap());
        assert!(Vocabulary::build(&[], 1).is_err());
        for code in all.codes() {
            assert_eq!(all.code(all.id(code)), Some(code.as_str()));
        }
    }

    #[test]
    fn flatten_matches_layout() {
        let r = rec(&[&["A", "B"], &["C"]]);
        let v = Vocabulary::build(&[r.clone()], 1).unwrap();
        let seq = flatten_history(&r, 2, &v, 64).unwrap();
        let expect = vec![
            AGE_BASE + 6,
            SEX_M,
            v.id("A"),
            v.id("B"),
            SEP,
            v.id("C"),
            SEP,
        ];
        assert_eq!(seq.token_ids, expect);
        assert_eq!(seq.visit_index, vec![0, 0, 1, 1, 1, 2, 2]);
        assert!(flatten_history(&r, 0, &v, 64).is_err());
        assert!(flatten_history(&r, 3, &v, 64).is_err());
    }

    #[test]
    fn flatten_drops_oldest_whole_visit() {
        let r = rec(&[&["A", "B"], &["C"], &["D"]]);
        let v = Vocabulary::build(&[r.clone()], 1).unwrap();
        // Full length is 2 + 3 + 2 + 2 = 9.
        let seq = flatten_history(&r, 3, &v, 8).unwrap();
        assert_eq!(seq.token_ids, vec![AGE_BASE + 6, SEX_M, v.id("C"), SEP, v.id("D"), SEP]);
        assert_eq!(seq.visit_index, vec![0, 0, 1, 1, 2, 2]);
        assert!(matches!(
            flatten_history(&r, 3, &v, 3),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn target_is_lexicographic() {
        let r = rec(&[&["A"], &["C25", "B99"]]);
        let v = Vocabulary::build(&[r.clone()], 1).unwrap();
        let t = target_visit(&r, 1, &v).unwrap();
        assert_eq!(t, vec![v.id("B99"), v.id("C25"), EOS]);
        assert_eq!(t, target_visit(&r, 1, &v).unwrap());
        assert_eq!(target_visit(&r, 0, &v).unwrap(), vec![v.id("A"), EOS]);
        assert!(target_visit(&r, 2, &v).is_err());
    }

    #[test]
    fn strata() {
        let r = rec(&[&["X"], &["X"], &["Y"], &["X"], &["Z"]]);
        assert_eq!(recurrence_stratum(&r, 4, "X"), RecurrenceStratum::H);
        assert_eq!(recurrence_stratum(&r, 4, "Y"), RecurrenceStratum::L);
        assert_eq!(recurrence_stratum(&r, 4, "Z"), RecurrenceStratum::Zero);
        assert_eq!(recurrence_stratum(&r, 2, "X"), RecurrenceStratum::H);
    }

    #[test]
    fn truncation() {
        let visits: Vec<Vec<String>> = (0..10).map(|i| vec![format!("C{i}")]).collect();
        let refs: Vec<Vec<&str>> = visits.iter().map(|v| v.iter().map(String::as_str).collect()).collect();
        let slices: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        let r = rec(&slices);
        let t = truncate_history(&r, 5).unwrap();
        assert_eq!(t.visits, r.visits[5..]);
        assert_eq!(t.demographics, r.demographics);
        let short = rec(&[&["A"], &["B"], &["C"]]);
        assert_eq!(truncate_history(&short, 5).unwrap(), short);
        assert!(truncate_history(&r, 1).is_err());
    }

    #[test]
    fn labels() {
        let v = Vocabulary::from_codes(vec!["M54.50".into()], 1);
        assert_eq!(v.label(SEP), "[SEP]");
        assert_eq!(v.label(AGE_BASE + 3), "AGE_3");
        assert_eq!(v.label(SEX_U), "SEX_U");
        assert_eq!(v.label(FIRST_CODE), "M54.50");
        assert_eq!(age_token(120), AGE_BASE + 9);
    }
}
