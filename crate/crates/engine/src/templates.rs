//! Prompt template assets and their content hashes.

use std::path::Path;

use bikelane_core::template::{ExemplarSet, PromptTemplate, TemplateError};

use crate::imaging::sha256_hex;

pub const LOCATOR: &str = include_str!("../templates/locator.txt");
pub const OPTIMIZER: &str = include_str!("../templates/optimizer.txt");
pub const HIGHLIGHT: &str = include_str!("../templates/highlight.txt");
pub const COMPLIANCE: &str = include_str!("../templates/compliance.txt");
pub const DEFAULT_EXEMPLARS: &str = include_str!("../templates/exemplars/default.txt");

#[derive(Debug, thiserror::Error)]
pub enum AssetError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The full set of prompt assets a run uses, with their source hashes.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub locator: PromptTemplate,
    pub optimizer: PromptTemplate,
    pub highlight: PromptTemplate,
    pub compliance: PromptTemplate,
    pub exemplars: ExemplarSet,
    hashes: Vec<(String, String)>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_sources(
            [LOCATOR, OPTIMIZER, HIGHLIGHT, COMPLIANCE],
            DEFAULT_EXEMPLARS,
            "default",
        )
        .expect("shipped templates parse")
    }

    /// Loads `locator.txt`, `optimizer.txt`, `highlight.txt`, `compliance.txt`
    /// and `exemplars/<set>.txt` from `dir`.
    pub fn load_dir(dir: &Path, exemplar_set: &str) -> Result<Self, AssetError> {
        let read = |rel: &str| {
            let path = dir.join(rel);
            std::fs::read_to_string(&path).map_err(|source| AssetError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let sources = [
            read("locator.txt")?,
            read("optimizer.txt")?,
            read("highlight.txt")?,
            read("compliance.txt")?,
        ];
        let exemplars = read(&format!("exemplars/{exemplar_set}.txt"))?;
        Ok(Self::from_sources(
            sources.each_ref().map(String::as_str),
            &exemplars,
            exemplar_set,
        )?)
    }

    pub fn from_sources(
        [locator, optimizer, highlight, compliance]: [&str; 4],
        exemplars: &str,
        exemplar_set: &str,
    ) -> Result<Self, TemplateError> {
        let hashes = vec![
            ("template.locator".into(), sha256_hex(locator.as_bytes())),
            ("template.optimizer".into(), sha256_hex(optimizer.as_bytes())),
            ("template.highlight".into(), sha256_hex(highlight.as_bytes())),
            ("template.compliance".into(), sha256_hex(compliance.as_bytes())),
            (format!("exemplars.{exemplar_set}"), sha256_hex(exemplars.as_bytes())),
        ];
        Ok(Self {
            locator: PromptTemplate::parse("locator", locator)?,
            optimizer: PromptTemplate::parse("optimizer", optimizer)?,
            highlight: PromptTemplate::parse("highlight", highlight)?,
            compliance: PromptTemplate::parse("compliance", compliance)?,
            exemplars: ExemplarSet::parse(exemplar_set, exemplars)?,
            hashes,
        })
    }

    /// `(name, sha256)` pairs recorded in run provenance.
    pub fn hashes(&self) -> &[(String, String)] {
        &self.hashes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bikelane_core::template;

    #[test]
    fn builtin_placeholders() {
        let t = TemplateSet::builtin();
        assert!(t.locator.placeholders().is_empty());
        assert_eq!(
            t.optimizer.placeholders().into_iter().collect::<Vec<_>>(),
            [template::BOUNDARY_CLAUSES, template::EXEMPLARS, template::USER_PROMPT]
        );
        assert_eq!(
            t.highlight.placeholders().into_iter().collect::<Vec<_>>(),
            [template::COLOR]
        );
        assert_eq!(
            t.compliance.placeholders().into_iter().collect::<Vec<_>>(),
            [template::CHECKLIST]
        );
        assert_eq!(t.exemplars.examples.len(), 3);
        assert_eq!(t.hashes().len(), 5);
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let loaded = TemplateSet::load_dir(&dir, "default").unwrap();
        assert_eq!(loaded.hashes(), TemplateSet::builtin().hashes());
        assert!(TemplateSet::load_dir(&dir, "missing").is_err());
    }
}
