use crate::error::{Error, Result};
use std::fmt;

/// Maximum number of labelled volumes a combination can address.
pub const MAX_LABELS: usize = 16;

/// Set of volume indices stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Combination(pub u16);

impl Combination {
    pub const EMPTY: Combination = Combination(0);

    pub fn single(index: usize) -> Self {
        assert!(index < MAX_LABELS);
        Combination(1 << index)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        it.into_iter().fold(Self::EMPTY, |c, i| c.with(i))
    }

    pub fn with(self, index: usize) -> Self {
        assert!(index < MAX_LABELS);
        Combination(self.0 | (1 << index))
    }

    pub fn contains(self, index: usize) -> bool {
        index < MAX_LABELS && self.0 & (1 << index) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: Combination) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: Combination) -> Combination {
        Combination(self.0 | other.0)
    }

    pub fn intersection(self, other: Combination) -> Combination {
        Combination(self.0 & other.0)
    }

    pub fn without(self, other: Combination) -> Combination {
        Combination(self.0 & !other.0)
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..MAX_LABELS).filter(move |&i| self.0 & (1 << i) != 0)
    }

    /// All subsets of `self`, including the empty set and `self`.
    pub fn subsets(self) -> impl Iterator<Item = Combination> {
        let full = self.0;
        let mut next = Some(0u16);
        std::iter::from_fn(move || {
            let cur = next?;
            next = if cur == full { None } else { Some((cur.wrapping_sub(full)) & full) };
            Some(Combination(cur))
        })
    }
}

/// Ordered label list giving meaning to combination bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() > MAX_LABELS {
            return Err(Error::config(format!("at most {MAX_LABELS} labels supported, got {}", labels.len())));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains(|c: char| c.is_whitespace() || c == '+' || c == '*') {
                return Err(Error::config(format!("invalid label `{l}`")));
            }
            if labels[..i].contains(l) {
                return Err(Error::config(format!("duplicate label `{l}`")));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn all(&self) -> Combination {
        Combination(((1u32 << self.labels.len()) - 1) as u16)
    }

    fn single_char(&self) -> bool {
        self.labels.iter().all(|l| l.chars().count() == 1)
    }

    /// Canonical display: labels in set order, concatenated when all are single
    /// characters and `+`-joined otherwise. The empty combination prints as `-`.
    pub fn format(&self, c: Combination) -> String {
        if c.is_empty() {
            return "-".to_string();
        }
        let parts: Vec<&str> = c.indices().map(|i| self.labels[i].as_str()).collect();
        if self.single_char() {
            parts.concat()
        } else {
            parts.join("+")
        }
    }

    /// Inverse of [`LabelSet::format`]; also accepts `+`-joined input for
    /// single-character label sets and is case-insensitive when unambiguous.
    pub fn parse(&self, s: &str) -> Result<Combination> {
        let s = s.trim();
        if s == "-" || s.is_empty() {
            return Ok(Combination::EMPTY);
        }
        let tokens: Vec<String> = if s.contains('+') {
            s.split('+').map(|t| t.trim().to_string()).collect()
        } else if self.single_char() {
            s.chars().map(|c| c.to_string()).collect()
        } else {
            vec![s.to_string()]
        };
        let mut c = Combination::EMPTY;
        for t in tokens {
            let idx = self
                .index_of(&t)
                .or_else(|| {
                    let hits: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i].eq_ignore_ascii_case(&t)).collect();
                    (hits.len() == 1).then(|| hits[0])
                })
                .ok_or_else(|| Error::config(format!("unknown label `{t}` in `{s}`")))?;
            c = c.with(idx);
        }
        Ok(c)
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.indices().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_and_parse() {
        let ls = LabelSet::new(["Q", "A", "B", "C"]).unwrap();
        let c = ls.parse("QAB").unwrap();
        assert_eq!(ls.format(c), "QAB");
        assert_eq!(ls.parse("B+Q+A").unwrap(), c);
        assert_eq!(ls.parse("qab").unwrap(), c);
        assert_eq!(ls.format(Combination::EMPTY), "-");
        assert!(ls.parse("QZ").is_err());
    }

    #[test]
    fn rejects_duplicates_and_too_many() {
        assert!(LabelSet::new(["A", "A"]).is_err());
        assert!(LabelSet::new((0..17).map(|i| format!("L{i}"))).is_err());
    }

    #[test]
    fn multi_char_labels_join_with_plus() {
        let ls = LabelSet::new(["Q1", "Q2", "S"]).unwrap();
        let c = ls.parse("Q1+S").unwrap();
        assert_eq!(ls.format(c), "Q1+S");
    }

    proptest! {
        #[test]
        fn subsets_enumerate_power_set(bits in 0u16..1024) {
            let c = Combination(bits);
            let subs: Vec<_> = c.subsets().collect();
            prop_assert_eq!(subs.len(), 1usize << c.len());
            for s in &subs {
                prop_assert!(s.is_subset_of(c));
            }
            let mut sorted = subs.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), subs.len());
        }
    }
}
