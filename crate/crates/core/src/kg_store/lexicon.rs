use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KgError;

/// Which side of the diagnostic criteria a relation supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Positive => f.write_str("positive"),
            Polarity::Negative => f.write_str("negative"),
        }
    }
}

pub const DEFAULT_NEGATIVE_MARKERS: [&str; 4] = ["not", "no_", "contraindicat", "rules out"];

/// Marker-plus-override rules for sorting relation predicates into
/// positive and negative knowledge.
///
/// A marker matches when it occurs in the lowercased predicate at a word
/// start, i.e. at the beginning of the string or right after a character
/// that is not alphanumeric. `"not"` therefore matches `"Not treats"` and
/// `"DOES_NOT_TREAT"` but not `"Annotated with"`. Overrides are keyed by the
/// lowercased predicate and always win over markers. Anything unmatched is
/// positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityLexicon {
    negative_markers: Vec<String>,
    #[serde(default)]
    overrides: BTreeMap<String, Polarity>,
}

impl Default for PolarityLexicon {
    fn default() -> Self {
        Self::new(DEFAULT_NEGATIVE_MARKERS, BTreeMap::new())
    }
}

impl PolarityLexicon {
    pub fn new<I, S>(negative_markers: I, overrides: BTreeMap<String, Polarity>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let negative_markers = negative_markers
            .into_iter()
            .map(|m| m.as_ref().to_lowercase())
            .filter(|m| !m.is_empty())
            .collect();
        let overrides = overrides
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Self {
            negative_markers,
            overrides,
        }
    }

    /// Reads a lexicon from a TOML file with `negative_markers` and an
    /// optional `[overrides]` table.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        Self::from_toml_str(&raw).map_err(|e| KgError::Lexicon {
            path: path.display().to_string(),
            message: e,
        })
    }

    pub fn from_toml_str(raw: &str) -> Result<Self, String> {
        let parsed: PolarityLexicon = toml::from_str(raw).map_err(|e| e.to_string())?;
        Ok(Self::new(parsed.negative_markers, parsed.overrides))
    }

    pub fn negative_markers(&self) -> &[String] {
        &self.negative_markers
    }

    pub fn overrides(&self) -> &BTreeMap<String, Polarity> {
        &self.overrides
    }

    pub fn classify(&self, predicate: &str) -> Polarity {
        let lower = predicate.to_lowercase();
        if let Some(p) = self.overrides.get(&lower) {
            return *p;
        }
        if self
            .negative_markers
            .iter()
            .any(|m| matches_at_word_start(&lower, m))
        {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }

    /// Stable content hash, used as part of knowledge-bundle cache keys.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("lexicon serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Free-function form of [`PolarityLexicon::classify`].
pub fn classify_polarity(predicate: &str, lexicon: &PolarityLexicon) -> Polarity {
    lexicon.classify(predicate)
}

fn matches_at_word_start(haystack: &str, marker: &str) -> bool {
    haystack.match_indices(marker).any(|(pos, _)| {
        haystack[..pos]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhibited_predicates() {
        let lex = PolarityLexicon::default();
        assert_eq!(lex.classify("Not treats"), Polarity::Negative);
        assert_eq!(lex.classify("Relates with"), Polarity::Positive);
    }

    #[test]
    fn marker_rule_restated() {
        let lex = PolarityLexicon::new(["not"], BTreeMap::new());
        // Rule: negative iff the lowercased predicate has "not" at a word start.
        let rule = |p: &str| {
            let l = p.to_lowercase();
            l.match_indices("not")
                .any(|(i, _)| i == 0 || !l.as_bytes()[i - 1].is_ascii_alphanumeric())
        };
        for p in ["NOT_ASSOCIATES", "does not cause", "Annotated with", "Treats", "x_not"] {
            let expected = if rule(p) {
                Polarity::Negative
            } else {
                Polarity::Positive
            };
            assert_eq!(lex.classify(p), expected, "{p}");
        }
        assert_eq!(lex.classify("NOT_ASSOCIATES"), Polarity::Negative);
        assert_eq!(lex.classify("Annotated with"), Polarity::Positive);
    }

    #[test]
    fn overrides_beat_markers() {
        let mut overrides = BTreeMap::new();
        overrides.insert("Not Different From".to_string(), Polarity::Positive);
        overrides.insert("prevents".to_string(), Polarity::Negative);
        let lex = PolarityLexicon::new(DEFAULT_NEGATIVE_MARKERS, overrides);
        assert_eq!(lex.classify("not different from"), Polarity::Positive);
        assert_eq!(lex.classify("PREVENTS"), Polarity::Negative);
        assert_eq!(lex.classify("Contraindicated in"), Polarity::Negative);
        assert_eq!(lex.classify("no_effect_on"), Polarity::Negative);
        assert_eq!(lex.classify("Rules out"), Polarity::Negative);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let lex = PolarityLexicon::from_toml_str(
            "negative_markers = [\"NOT\", \"lacks\"]\n[overrides]\n\"Inhibits\" = \"negative\"\n",
        )
        .unwrap();
        assert_eq!(lex.negative_markers(), &["not".to_string(), "lacks".to_string()]);
        assert_eq!(lex.classify("inhibits"), Polarity::Negative);
        let other = PolarityLexicon::default();
        assert_ne!(lex.content_hash(), other.content_hash());
        assert_eq!(lex.content_hash(), lex.clone().content_hash());
    }

    #[test]
    fn bad_toml_is_reported() {
        assert!(PolarityLexicon::from_toml_str("negative_markers = 3").is_err());
    }
}
