use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_text, Label, StudyRecord};
use crate::error::{Error, Result};

const DEFAULT_RULES: &str = include_str!("../../data/keyword_rules.toml");

/// Three keyword lists. A record is flagged when it mentions at least one
/// term from each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordRuleSet {
    pub immunotherapy: Vec<String>,
    pub cancer: Vec<String>,
    pub treatment: Vec<String>,
}

impl KeywordRuleSet {
    pub fn new(immunotherapy: Vec<String>, cancer: Vec<String>, treatment: Vec<String>) -> Result<Self> {
        let rules = KeywordRuleSet {
            immunotherapy: lower(immunotherapy),
            cancer: lower(cancer),
            treatment: lower(treatment),
        };
        rules.validate()?;
        Ok(rules)
    }

    /// The rule set shipped in `data/keyword_rules.toml`.
    pub fn builtin() -> Self {
        KeywordRuleSet::from_toml(DEFAULT_RULES).expect("bundled rule file is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: KeywordRuleSet =
            toml::from_str(text).map_err(|e| Error::Config(format!("keyword rules: {}", e.message())))?;
        KeywordRuleSet::new(raw.immunotherapy, raw.cancer, raw.treatment)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeywordRuleSet::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in self.lists() {
            if list.is_empty() {
                return Err(Error::Config(format!("keyword list `{name}` is empty")));
            }
            if list.iter().any(|t| t.trim().is_empty()) {
                return Err(Error::Config(format!("keyword list `{name}` has a blank term")));
            }
        }
        Ok(())
    }

    fn lists(&self) -> [(&'static str, &[String]); 3] {
        [
            ("immunotherapy", &self.immunotherapy),
            ("cancer", &self.cancer),
            ("treatment", &self.treatment),
        ]
    }

    /// Whether `text` satisfies all three lists.
    pub fn matches_text(&self, text: &str) -> bool {
        let text = text.to_lowercase();
        self.lists()
            .iter()
            .all(|(_, list)| list.iter().any(|term| contains_term(&text, term)))
    }
}

fn lower(list: Vec<String>) -> Vec<String> {
    list.into_iter().map(|t| t.trim().to_lowercase()).collect()
}

/// Substring match bounded by non-alphanumeric characters or the text ends.
fn contains_term(text: &str, term: &str) -> bool {
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    text.match_indices(term).any(|(start, m)| {
        boundary(text[..start].chars().next_back()) && boundary(text[start + m.len()..].chars().next())
    })
}

pub fn keyword_match(record: &StudyRecord, rules: &KeywordRuleSet) -> Result<Label> {
    let text = assemble_text(record)?;
    Ok(if rules.matches_text(&text) {
        Label::Positive
    } else {
        Label::Negative
    })
}
