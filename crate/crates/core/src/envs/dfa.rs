//! Deterministic finite automaton used as the feasibility oracle for
//! sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk form of a [`Dfa`].
///
/// ```json
/// {"states": ["d0", "d1", "dead"], "alphabet": ["a", "("],
///  "start": "d0", "accepting": ["d0"],
///  "transitions": [["d0", "a", "d0"], ["d0", "(", "d1"], ...],
///  "min_len": 1, "max_len": 24}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfaDocument {
    pub states: Vec<String>,
    pub alphabet: Vec<String>,
    pub start: String,
    pub accepting: Vec<String>,
    pub transitions: Vec<(String, String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dfa {
    state_names: Vec<String>,
    alphabet: Vec<char>,
    start: usize,
    accepting: Vec<bool>,
    /// `table[state * |alphabet| + symbol]`
    table: Vec<usize>,
    min_len: usize,
    max_len: Option<usize>,
}

impl Dfa {
    /// Balanced parentheses with nesting depth at most `max_depth`; every
    /// other symbol in `letters` leaves the depth unchanged.
    pub fn balanced_parens(max_depth: usize, letters: &[char], min_len: usize, max_len: Option<usize>) -> Dfa {
        let mut alphabet: Vec<char> = letters.to_vec();
        alphabet.extend(['(', ')']);
        let dead = max_depth + 1;
        let n_states = max_depth + 2;
        let k = alphabet.len();
        let mut table = vec![dead; n_states * k];
        for depth in 0..=max_depth {
            for (j, &c) in alphabet.iter().enumerate() {
                table[depth * k + j] = match c {
                    '(' if depth < max_depth => depth + 1,
                    '(' => dead,
                    ')' if depth > 0 => depth - 1,
                    ')' => dead,
                    _ => depth,
                };
            }
        }
        let mut state_names: Vec<String> = (0..=max_depth).map(|d| format!("d{d}")).collect();
        state_names.push("dead".into());
        let mut accepting = vec![false; n_states];
        accepting[0] = true;
        Dfa {
            state_names,
            alphabet,
            start: 0,
            accepting,
            table,
            min_len,
            max_len,
        }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn max_len(&self) -> Option<usize> {
        self.max_len
    }

    fn symbol(&self, c: char) -> Result<usize> {
        self.alphabet.iter().position(|&a| a == c).ok_or(Error::OutOfAlphabet(c))
    }

    /// Runs the automaton; errors on a symbol outside the alphabet.
    pub fn accepts(&self, s: &str) -> Result<bool> {
        let mut state = self.start;
        let mut len = 0;
        for c in s.chars() {
            state = self.table[state * self.alphabet.len() + self.symbol(c)?];
            len += 1;
        }
        let in_bounds = len >= self.min_len && self.max_len.is_none_or(|m| len <= m);
        Ok(self.accepting[state] && in_bounds)
    }

    pub fn to_document(&self) -> DfaDocument {
        let k = self.alphabet.len();
        let mut transitions = Vec::with_capacity(self.table.len());
        for (s, name) in self.state_names.iter().enumerate() {
            for (j, c) in self.alphabet.iter().enumerate() {
                transitions.push((name.clone(), c.to_string(), self.state_names[self.table[s * k + j]].clone()));
            }
        }
        DfaDocument {
            states: self.state_names.clone(),
            alphabet: self.alphabet.iter().map(|c| c.to_string()).collect(),
            start: self.state_names[self.start].clone(),
            accepting: self
                .state_names
                .iter()
                .zip(&self.accepting)
                .filter(|(_, &a)| a)
                .map(|(n, _)| n.clone())
                .collect(),
            transitions,
            min_len: Some(self.min_len),
            max_len: self.max_len,
        }
    }

    /// Validates a document: single-character symbols, known state names and
    /// exactly one transition per (state, symbol).
    pub fn from_document(doc: &DfaDocument) -> Result<Dfa> {
        let bad = |m: String| Error::InvalidArgument(format!("DFA: {m}"));
        if doc.states.is_empty() {
            return Err(bad("no states".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in doc.states.iter().enumerate() {
            if index.insert(s.as_str(), i).is_some() {
                return Err(bad(format!("duplicate state {s:?}")));
            }
        }
        let mut alphabet = Vec::with_capacity(doc.alphabet.len());
        for a in &doc.alphabet {
            let mut it = a.chars();
            match (it.next(), it.next()) {
                (Some(c), None) if !alphabet.contains(&c) => alphabet.push(c),
                _ => return Err(bad(format!("bad or duplicate symbol {a:?}"))),
            }
        }
        let state = |name: &str| index.get(name).copied().ok_or_else(|| bad(format!("unknown state {name:?}")));
        let start = state(&doc.start)?;
        let mut accepting = vec![false; doc.states.len()];
        for a in &doc.accepting {
            accepting[state(a)?] = true;
        }
        let k = alphabet.len();
        let mut table = vec![usize::MAX; doc.states.len() * k];
        for (from, sym, to) in &doc.transitions {
            let f = state(from)?;
            let t = state(to)?;
            let c = sym
                .chars()
                .next()
                .filter(|_| sym.chars().count() == 1)
                .ok_or_else(|| bad(format!("bad symbol {sym:?}")))?;
            let j = alphabet
                .iter()
                .position(|&a| a == c)
                .ok_or_else(|| bad(format!("symbol {sym:?} not in alphabet")))?;
            if table[f * k + j] != usize::MAX {
                return Err(bad(format!("two transitions for ({from}, {sym})")));
            }
            table[f * k + j] = t;
        }
        if let Some(i) = table.iter().position(|&t| t == usize::MAX) {
            return Err(bad(format!("missing transition for ({}, {})", doc.states[i / k], alphabet[i % k])));
        }
        Ok(Dfa {
            state_names: doc.states.clone(),
            alphabet,
            start,
            accepting,
            table,
            min_len: doc.min_len.unwrap_or(0),
            max_len: doc.max_len,
        })
    }

    pub fn from_json(text: &str) -> Result<Dfa> {
        Dfa::from_document(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("DFA document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_dfa() -> Dfa {
        Dfa::balanced_parens(4, &['a', 'b'], 1, Some(24))
    }

    /// Stack-based reference checker.
    fn brute_force(s: &str, max_depth: usize, max_len: usize) -> bool {
        let mut depth: i64 = 0;
        for c in s.chars() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                _ => {}
            }
            if depth < 0 || depth > max_depth as i64 {
                return false;
            }
        }
        depth == 0 && !s.is_empty() && s.chars().count() <= max_len
    }

    #[test]
    fn examples() {
        let d = default_dfa();
        assert!(d.accepts("(aba)").unwrap());
        assert!(!d.accepts("((a").unwrap());
        assert!(!d.accepts("(((((a)))))").unwrap());
        assert!(d.accepts("((((a))))").unwrap());
        assert!(!d.accepts("").unwrap());
        assert!(matches!(d.accepts("abc"), Err(Error::OutOfAlphabet('c'))));
    }

    #[test]
    fn matches_stack_checker_on_all_short_strings() {
        let d = default_dfa();
        let alphabet = ['a', 'b', '(', ')'];
        let mut layer = vec![String::new()];
        for _ in 0..=8 {
            for s in &layer {
                assert_eq!(d.accepts(s).unwrap(), brute_force(s, 4, 24), "{s:?}");
            }
            layer = layer.iter().flat_map(|s| alphabet.iter().map(move |c| format!("{s}{c}"))).collect();
        }
    }

    #[test]
    fn json_round_trip() {
        let d = Dfa::balanced_parens(2, &['a', 'b'], 1, Some(24));
        let back = Dfa::from_json(&d.to_json()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn incomplete_table_rejected() {
        let mut doc = default_dfa().to_document();
        doc.transitions.pop();
        assert!(Dfa::from_document(&doc).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"states":["s"],"alphabet":["a"],"start":"s","accepting":["s"],
            "transitions":[["s","a","s"]],"extra":1}"#;
        assert!(Dfa::from_json(text).is_err());
    }
}
