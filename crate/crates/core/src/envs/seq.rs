//! Token-append sequence environment.
//!
//! Each action appends one vocabulary token to the prefix or emits the
//! end-of-sequence action, which terminates. Action `i < |vocab|` appends
//! `vocab[i]`; action `|vocab|` is end-of-sequence.

use rand::Rng;

use super::dfa::Dfa;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SeqSpec {
    /// Non-terminal tokens; end-of-sequence is implicit.
    pub vocab: Vec<char>,
    pub max_len: usize,
    pub motif: String,
    pub oracle: Dfa,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqState {
    pub prefix: String,
    pub terminated: bool,
}

impl SeqState {
    pub fn len(&self) -> usize {
        self.prefix.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutationKind {
    Substitute,
    Insert,
    Delete,
}

/// A fully specified single-token edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mutation {
    pub kind: MutationKind,
    pub pos: usize,
    /// Ignored for deletions.
    pub token: char,
}

impl SeqSpec {
    /// Vocabulary `{a, b, (, )}`, `max_len = 24`, motif `"aba"`, balanced
    /// parentheses with depth at most 4 and length in `[1, 24]`.
    pub fn default_spec() -> SeqSpec {
        SeqSpec::with_depth(4)
    }

    /// The default task with a different nesting bound.
    pub fn with_depth(max_depth: usize) -> SeqSpec {
        SeqSpec {
            vocab: vec!['a', 'b', '(', ')'],
            max_len: 24,
            motif: "aba".into(),
            oracle: Dfa::balanced_parens(max_depth, &['a', 'b'], 1, Some(24)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let distinct = {
            let mut v = self.vocab.clone();
            v.sort_unstable();
            v.dedup();
            v.len() == self.vocab.len()
        };
        if self.vocab.len() < 2 || !distinct {
            return Err(Error::InvalidArgument("vocabulary needs at least two distinct tokens".into()));
        }
        if self.motif.chars().any(|c| !self.vocab.contains(&c)) {
            return Err(Error::InvalidArgument("motif uses tokens outside the vocabulary".into()));
        }
        if self.max_len == 0 || self.max_len < self.motif.chars().count() {
            return Err(Error::InvalidArgument("max_len must cover the motif".into()));
        }
        if self.oracle.alphabet().iter().any(|c| !self.vocab.contains(c)) || self.vocab.iter().any(|c| !self.oracle.alphabet().contains(c))
        {
            return Err(Error::InvalidArgument("oracle alphabet must equal the vocabulary".into()));
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn eos(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_index(&self, c: char) -> Result<usize> {
        self.vocab.iter().position(|&v| v == c).ok_or(Error::OutOfAlphabet(c))
    }

    pub fn action_mask(&self, s: &SeqState) -> Result<Vec<bool>> {
        if s.terminated {
            return Err(Error::Terminated);
        }
        let room = s.len() < self.max_len;
        let mut mask = vec![room; self.n_actions()];
        mask[self.eos()] = true;
        Ok(mask)
    }

    /// Applies action `a` (token index or [`SeqSpec::eos`]).
    pub fn step(&self, s: &SeqState, a: usize) -> Result<SeqState> {
        if s.terminated {
            return Err(Error::Terminated);
        }
        if a == self.eos() {
            return Ok(SeqState {
                prefix: s.prefix.clone(),
                terminated: true,
            });
        }
        let c = *self.vocab.get(a).ok_or_else(|| Error::InvalidAction {
            state: s.prefix.clone(),
            action: a.to_string(),
        })?;
        if s.len() >= self.max_len {
            return Err(Error::Overflow(self.max_len));
        }
        let mut prefix = s.prefix.clone();
        prefix.push(c);
        Ok(SeqState { prefix, terminated: false })
    }

    pub fn feasible(&self, s: &str) -> Result<bool> {
        self.oracle.accepts(s)
    }

    /// `0.1 + number of (overlapping) motif occurrences`.
    pub fn reward(&self, s: &str) -> f64 {
        0.1 + count_overlapping(s, &self.motif) as f64
    }

    /// Applies a specific edit, validating position, token and length bounds.
    pub fn apply_mutation(&self, s: &str, m: Mutation) -> Result<String> {
        let mut chars: Vec<char> = s.chars().collect();
        for &c in &chars {
            self.token_index(c)?;
        }
        if m.kind != MutationKind::Delete {
            self.token_index(m.token)?;
        }
        let bad = |msg: &str| Error::InvalidArgument(format!("mutation {m:?} on {s:?}: {msg}"));
        match m.kind {
            MutationKind::Substitute => {
                if m.pos >= chars.len() {
                    return Err(bad("position out of range"));
                }
                if chars[m.pos] == m.token {
                    return Err(bad("substitution must change the token"));
                }
                chars[m.pos] = m.token;
            }
            MutationKind::Insert => {
                if m.pos > chars.len() || chars.len() >= self.max_len {
                    return Err(bad("insertion out of range"));
                }
                chars.insert(m.pos, m.token);
            }
            MutationKind::Delete => {
                if m.pos >= chars.len() || chars.len() < 2 {
                    return Err(bad("deletion would leave an empty string"));
                }
                chars.remove(m.pos);
            }
        }
        Ok(chars.into_iter().collect())
    }

    /// Draws one random edit of `s` and applies it.
    ///
    /// RNG stream: repeatedly draw an operation uniformly from
    /// {substitute, insert, delete}; an operation that would break the length
    /// bounds `[1, max_len]` is discarded and redrawn. Then substitute draws a
    /// position in `0..len` and a replacement among the other `|vocab| - 1`
    /// tokens; insert draws a position in `0..=len` and any token; delete
    /// draws a position in `0..len`.
    pub fn mutate<R: Rng + ?Sized>(&self, s: &str, rng: &mut R) -> Result<String> {
        let chars: Vec<char> = s.chars().collect();
        if chars.is_empty() {
            return Err(Error::Empty("string to mutate"));
        }
        let len = chars.len();
        let can_insert = len < self.max_len;
        let can_delete = len >= 2;
        let k = self.vocab.len();
        loop {
            let m = match rng.gen_range(0..3) {
                0 => {
                    let pos = rng.gen_range(0..len);
                    let cur = self.token_index(chars[pos])?;
                    let mut j = rng.gen_range(0..k - 1);
                    if j >= cur {
                        j += 1;
                    }
                    Mutation {
                        kind: MutationKind::Substitute,
                        pos,
                        token: self.vocab[j],
                    }
                }
                1 if can_insert => {
                    let pos = rng.gen_range(0..=len);
                    let token = self.vocab[rng.gen_range(0..k)];
                    Mutation {
                        kind: MutationKind::Insert,
                        pos,
                        token,
                    }
                }
                2 if can_delete => {
                    let pos = rng.gen_range(0..len);
                    Mutation {
                        kind: MutationKind::Delete,
                        pos,
                        token: chars[pos],
                    }
                }
                _ => continue,
            };
            return self.apply_mutation(s, m);
        }
    }
}

pub fn count_overlapping(s: &str, motif: &str) -> usize {
    let hay: Vec<char> = s.chars().collect();
    let pat: Vec<char> = motif.chars().collect();
    if pat.is_empty() || pat.len() > hay.len() {
        return 0;
    }
    hay.windows(pat.len()).filter(|w| *w == pat.as_slice()).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SeqSpec {
        SeqSpec::default_spec()
    }

    fn st(p: &str) -> SeqState {
        SeqState {
            prefix: p.into(),
            terminated: false,
        }
    }

    #[test]
    fn steps() {
        let s = spec();
        assert_eq!(s.step(&st(""), 0).unwrap(), st("a"));
        let done = s.step(&st("ab"), s.eos()).unwrap();
        assert!(done.terminated);
        assert_eq!(done.prefix, "ab");
        assert!(matches!(s.step(&st(&"a".repeat(24)), 0), Err(Error::Overflow(24))));
        assert!(matches!(s.step(&done, 0), Err(Error::Terminated)));
    }

    #[test]
    fn mask_forces_eos_at_max_len() {
        let s = spec();
        assert_eq!(s.action_mask(&st(&"b".repeat(24))).unwrap(), vec![false, false, false, false, true]);
        assert!(s.action_mask(&st("ab")).unwrap().iter().all(|&m| m));
    }

    #[test]
    fn rewards() {
        let s = spec();
        assert!((s.reward("ababa") - 2.1).abs() < 1e-12);
        assert!((s.reward("") - 0.1).abs() < 1e-12);
        assert!((s.reward("(aba)b") - 1.1).abs() < 1e-12);
    }

    #[test]
    fn forced_mutations() {
        let s = spec();
        let m = Mutation {
            kind: MutationKind::Substitute,
            pos: 0,
            token: 'a',
        };
        assert_eq!(s.apply_mutation("(ab)", m).unwrap(), "aab)");
        let d = Mutation {
            kind: MutationKind::Delete,
            pos: 0,
            token: 'a',
        };
        assert!(s.apply_mutation("a", d).is_err());
        assert!(s.mutate("", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_char_never_deleted() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let out = s.mutate("a", &mut rng).unwrap();
            assert!(!out.is_empty());
        }
    }

    #[test]
    fn seeded_mutation_is_pinned() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = s.mutate("(aba)", &mut rng).unwrap();
        assert_eq!(out, PINNED_SEED42);
    }

    const PINNED_SEED42: &str = "(abb)";

    #[test]
    fn mutation_is_one_edit() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alphabet = ['a', 'b', '(', ')'];
        for i in 0..2000 {
            let len = 1 + i % 24;
            let src: String = (0..len).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let out = s.mutate(&src, &mut rng).unwrap();
            assert_eq!(strsim::levenshtein(&src, &out), 1, "{src} -> {out}");
            assert!((1..=24).contains(&out.chars().count()));
        }
    }
}
