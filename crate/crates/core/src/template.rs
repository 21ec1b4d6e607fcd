//! Prompt templates with `{NAME}` placeholders and in-context exemplar sets.
//!
//! A template asset is plain text split into a `[system]` and a `[user]`
//! section. Placeholders are upper-case identifiers in braces; any other
//! brace text is left alone. Rendering fails unless every placeholder is
//! bound, so an incomplete variable map never reaches a provider.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const USER_PROMPT: &str = "USER_PROMPT";
pub const COLOR: &str = "COLOR";
pub const LANE_DESCRIPTION: &str = "LANE_DESCRIPTION";
pub const BOUNDARY_CLAUSES: &str = "BOUNDARY_CLAUSES";
pub const EXEMPLARS: &str = "EXEMPLARS";
pub const CHECKLIST: &str = "CHECKLIST";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {0}: missing [system] or [user] section")]
    MissingSection(String),
    #[error("template {template_id}: unresolved placeholders {missing:?}")]
    Unresolved { template_id: String, missing: Vec<String> },
    #[error("exemplar set {0} is empty")]
    NoExemplars(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

/// Walks `{NAME}` tokens, calling `on_token` with the name and byte range.
fn scan(text: &str, mut on_token: impl FnMut(&str, core::ops::Range<usize>)) {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i;
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_uppercase() || bytes[j] == b'_' || (j > i + 1 && bytes[j].is_ascii_digit()))
            {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                on_token(&text[i + 1..j], start..j + 1);
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
}

/// Placeholder names appearing in `text`, deduplicated and sorted.
pub fn placeholders(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    scan(text, |name, _| {
        out.insert(name.to_string());
    });
    out
}

fn substitute(text: &str, vars: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    scan(text, |name, range| {
        if let Some(value) = vars.get(name) {
            out.push_str(&text[last..range.start]);
            out.push_str(value);
            last = range.end;
        }
    });
    out.push_str(&text[last..]);
    out
}

impl PromptTemplate {
    pub fn parse(template_id: impl Into<String>, text: &str) -> Result<Self, TemplateError> {
        let template_id = template_id.into();
        let mut system: Option<String> = None;
        let mut user: Option<String> = None;
        let mut in_user = None;
        for line in text.split_inclusive('\n') {
            match line.trim_end() {
                "[system]" => {
                    system = Some(String::new());
                    in_user = Some(false);
                }
                "[user]" => {
                    user = Some(String::new());
                    in_user = Some(true);
                }
                _ => {
                    let buf = match in_user {
                        Some(true) => user.as_mut(),
                        Some(false) => system.as_mut(),
                        None => None,
                    };
                    if let Some(buf) = buf {
                        buf.push_str(line);
                    }
                }
            }
        }
        match (system, user) {
            (Some(s), Some(u)) => Ok(Self {
                template_id,
                system_text: s.trim_end().to_string(),
                user_text: u.trim_end().to_string(),
            }),
            _ => Err(TemplateError::MissingSection(template_id)),
        }
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut all = placeholders(&self.system_text);
        all.extend(placeholders(&self.user_text));
        all
    }

    /// Substitutes every placeholder or fails listing the unbound ones.
    pub fn render(&self, vars: &BTreeMap<&str, &str>) -> Result<RenderedPrompt, TemplateError> {
        let missing: Vec<String> = self
            .placeholders()
            .into_iter()
            .filter(|p| !vars.contains_key(p.as_str()))
            .collect();
        if !missing.is_empty() {
            return Err(TemplateError::Unresolved {
                template_id: self.template_id.clone(),
                missing,
            });
        }
        Ok(RenderedPrompt {
            system: substitute(&self.system_text, vars),
            user: substitute(&self.user_text, vars),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub exemplar_set_id: String,
    pub examples: Vec<String>,
}

impl ExemplarSet {
    /// Parses blocks introduced by `##Example N##` header lines.
    pub fn parse(exemplar_set_id: impl Into<String>, text: &str) -> Result<Self, TemplateError> {
        let exemplar_set_id = exemplar_set_id.into();
        let mut examples: Vec<String> = Vec::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with("##Example") && t.ends_with("##") && t.len() > 4 {
                if let Some(block) = current.take() {
                    examples.push(block.trim().to_string());
                }
                current = Some(String::new());
            } else if let Some(buf) = current.as_mut() {
                buf.push_str(line);
                buf.push('\n');
            }
        }
        if let Some(block) = current {
            examples.push(block.trim().to_string());
        }
        examples.retain(|e| !e.is_empty());
        if examples.is_empty() {
            return Err(TemplateError::NoExemplars(exemplar_set_id));
        }
        Ok(Self {
            exemplar_set_id,
            examples,
        })
    }

    pub fn render(&self) -> String {
        let blocks: Vec<String> = self
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| format!("##Example {}##\n{}", i + 1, e))
            .collect();
        blocks.join("\n\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: &str =
        "[system]\nYou paint {COLOR}.\n[user]\nMake it {COLOR} for {USER_PROMPT}. Keep {braces} and {lower}.\n";

    #[test]
    fn parse_and_render() {
        let t = PromptTemplate::parse("t", T).unwrap();
        assert_eq!(t.system_text, "You paint {COLOR}.");
        let names: Vec<_> = t.placeholders().into_iter().collect();
        assert_eq!(names, ["COLOR", "USER_PROMPT"]);
        let vars = BTreeMap::from([(COLOR, "green"), (USER_PROMPT, "a lane")]);
        let r = t.render(&vars).unwrap();
        assert_eq!(r.system, "You paint green.");
        assert_eq!(r.user, "Make it green for a lane. Keep {braces} and {lower}.");
        assert!(placeholders(&r.user).is_empty());
    }

    #[test]
    fn incomplete_map_fails() {
        let t = PromptTemplate::parse("t", T).unwrap();
        let err = t.render(&BTreeMap::from([(COLOR, "green")])).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Unresolved {
                template_id: "t".into(),
                missing: alloc::vec!["USER_PROMPT".into()],
            }
        );
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let t = PromptTemplate::parse("t", "[system]\n{A}\n[user]\n{B}").unwrap();
        let r = t.render(&BTreeMap::from([("A", "{B}"), ("B", "x")])).unwrap();
        assert_eq!(r.system, "{B}");
    }

    #[test]
    fn missing_section() {
        assert!(PromptTemplate::parse("t", "[system]\nonly").is_err());
    }

    #[test]
    fn exemplar_blocks() {
        let set = ExemplarSet::parse("e", "##Example 1##\nfirst\n\n##Example 2##\nsecond\nline\n").unwrap();
        assert_eq!(set.examples, ["first", "second\nline"]);
        assert_eq!(set.render(), "##Example 1##\nfirst\n\n##Example 2##\nsecond\nline");
        assert!(ExemplarSet::parse("e", "nothing here").is_err());
    }
}
