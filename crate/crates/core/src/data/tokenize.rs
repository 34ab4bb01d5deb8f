//! Caption tokenizer with multi-word brand joining.

use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_JOINS: &[(&str, &str)] = &[
    ("coca cola", "cocacola"),
    ("red bull", "redbull"),
    ("mc donalds", "mcdonalds"),
    ("dr pepper", "drpepper"),
    ("burger king", "burgerking"),
    ("under armour", "underarmour"),
];

/// Lowercases, strips punctuation and joins known multi-word brand names
/// into single tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    joins: Vec<(Vec<String>, String)>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut t = Tokenizer { joins: Vec::new() };
        for (phrase, token) in DEFAULT_JOINS {
            t.add_join(phrase, token).expect("built-in join table is valid");
        }
        t
    }
}

fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

impl Tokenizer {
    /// Tokenizer without any brand joins.
    pub fn plain() -> Self {
        Tokenizer { joins: Vec::new() }
    }

    /// Adds a substitution `phrase -> token`. The phrase must normalize to at
    /// least two words and the replacement to exactly one.
    pub fn add_join(&mut self, phrase: &str, token: &str) -> Result<()> {
        let from = words(phrase);
        let to = words(token);
        if from.len() < 2 {
            return Err(Error::Config(format!(
                "join phrase `{phrase}` must contain at least two words"
            )));
        }
        if to.len() != 1 {
            return Err(Error::Config(format!(
                "join target `{token}` must be a single word"
            )));
        }
        self.joins.retain(|(p, _)| *p != from);
        self.joins.push((from, to.into_iter().next().unwrap()));
        // longest phrases first so greedy matching prefers them
        self.joins.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(())
    }

    /// Parses a substitution table: one `phrase<TAB>token` pair per line;
    /// blank lines and lines starting with `#` are ignored.
    pub fn parse_table(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t').filter(|c| !c.trim().is_empty());
            let (Some(phrase), Some(token), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::parse(origin, n + 1, "expected `phrase<TAB>token`"));
            };
            self.add_join(phrase, token)
                .map_err(|e| Error::parse(origin, n + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Default table extended with the entries of the file at `path`.
    pub fn with_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t = Tokenizer::default();
        t.parse_table(&text, &path.display().to_string())?;
        Ok(t)
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = words(text);
        // Joins may enable further joins; each pass shrinks the list, so this terminates.
        loop {
            let (next, changed) = self.join_once(&tokens);
            tokens = next;
            if !changed {
                return tokens;
            }
        }
    }

    fn join_once(&self, tokens: &[String]) -> (Vec<String>, bool) {
        let mut out = Vec::with_capacity(tokens.len());
        let mut changed = false;
        let mut i = 0;
        'outer: while i < tokens.len() {
            for (phrase, joined) in &self.joins {
                if tokens[i..].starts_with(phrase) {
                    out.push(joined.clone());
                    i += phrase.len();
                    changed = true;
                    continue 'outer;
                }
            }
            out.push(tokens[i].clone());
            i += 1;
        }
        (out, changed)
    }
}

/// Tokenizes with the built-in brand table.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brand_join_and_punctuation() {
        assert_eq!(
            tokenize("A man holds a Coca-Cola."),
            vec!["a", "man", "holds", "a", "cocacola"]
        );
        assert_eq!(tokenize("The man's can"), vec!["the", "mans", "can"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ,.!  ").is_empty());
    }

    #[test]
    fn cascading_joins_reach_fixpoint() {
        let mut t = Tokenizer::default();
        t.add_join("cocacola zero", "cokezero").unwrap();
        let once = t.tokenize("coca cola zero");
        assert_eq!(once, vec!["cokezero"]);
        assert_eq!(t.tokenize(&once.join(" ")), once);
    }

    #[test]
    fn table_parsing() {
        let mut t = Tokenizer::plain();
        t.parse_table("# brands\nnew balance\tnewbalance\n\n", "t.tsv").unwrap();
        assert_eq!(t.tokenize("New Balance shoes"), vec!["newbalance", "shoes"]);

        let err = t.parse_table("ok\tfine\nbroken line\n", "t.tsv").unwrap_err();
        assert!(err.to_string().contains("t.tsv:1"), "{err}");
        let err = t.parse_table("a b\tc\nsingle\tword\n", "t.tsv").unwrap_err();
        assert!(err.to_string().contains("t.tsv:2"), "{err}");
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[A-Za-z ,.'\\-]{0,60}") {
            let t = tokenize(&text);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }

        #[test]
        fn idempotent_with_brand_words(parts in proptest::collection::vec(
            prop_oneof![Just("coca"), Just("cola"), Just("red"), Just("bull"), Just("a"), Just("can")], 0..12)) {
            let text = parts.join(" ");
            let t = tokenize(&text);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }
    }
}
