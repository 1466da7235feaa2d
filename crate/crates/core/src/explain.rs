//! Sentence generation for a judged outfit.
//!
//! A judgment and its reason pick one leaf of a fixed template tree; the
//! leaf's placeholders are filled from the outfit's attribute map. The
//! output deliberately mentions only the decisive factor — an explanation
//! that recites every attribute explains nothing.
//!
//! Placeholders are written `{name}`. A `_t`/`_b` suffix resolves against
//! the `_top`/`_bottom` attribute (so `{print_t}` reads `print_top`);
//! anything else is looked up verbatim. Tables can be loaded from a text
//! file (one `key = template` line per leaf) so wording changes don't
//! require a rebuild.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::record::{Judgment, Reason};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{judgment} outfits {expectation}, got reason {reason:?}")]
    ReasonMismatch { judgment: Judgment, reason: Option<Reason>, expectation: &'static str },
    #[error("no template for {key:?}")]
    MissingTemplate { key: String },
    #[error("placeholder {{{placeholder}}} needs attribute {key:?}, which is missing")]
    MissingAttribute { placeholder: String, key: String },
    #[error("template line {line}: expected `key = template`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("template line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("duplicate template for {key:?}")]
    DuplicateKey { key: String },
    #[error("template table is missing leaves: {missing:?}")]
    IncompleteTable { missing: Vec<String> },
    #[error("template for {key:?} has an unterminated or empty placeholder")]
    BadPlaceholder { key: String },
    #[error("cannot read template file: {0}")]
    Io(#[from] std::io::Error),
}

/// The seven leaves: three reasons each for good and bad, plus normal.
type LeafKey = (Judgment, Option<Reason>);

fn leaf_name(key: LeafKey) -> String {
    match key {
        (j, Some(r)) => format!("{j}.{r}"),
        (j, None) => j.to_string(),
    }
}

fn all_leaves() -> Vec<LeafKey> {
    let mut keys = Vec::with_capacity(7);
    for j in [Judgment::Good, Judgment::Bad] {
        for r in Reason::ALL {
            keys.push((j, Some(r)));
        }
    }
    keys.push((Judgment::Normal, None));
    keys
}

/// One sentence template per (judgment, reason) leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateTable {
    templates: BTreeMap<LeafKey, String>,
}

impl TemplateTable {
    /// The built-in wording.
    pub fn builtin() -> Self {
        let entries: [(LeafKey, &str); 7] = [
            (
                (Judgment::Good, Some(Reason::Color)),
                "The {color_t} top pairs beautifully with the {color_b} bottom.",
            ),
            (
                (Judgment::Good, Some(Reason::Print)),
                "The {print_t} print top and the {print_b} bottom complement each other nicely.",
            ),
            (
                (Judgment::Good, Some(Reason::Design)),
                "The {material_t} {silhouette_t} top and the {material_b} {silhouette_b} bottom \
                 come together in a thoughtfully balanced design.",
            ),
            (
                (Judgment::Bad, Some(Reason::Color)),
                "The {color_t} top clashes with the {color_b} bottom.",
            ),
            (
                (Judgment::Bad, Some(Reason::Print)),
                "The {print_t} print top and the {print_b} bottom make the outfit too dazzling.",
            ),
            (
                (Judgment::Bad, Some(Reason::Design)),
                "The {material_t} {silhouette_t} top and the {material_b} {silhouette_b} bottom \
                 do not work together as a design.",
            ),
            (
                (Judgment::Normal, None),
                "It follows common matching conventions without a standout factor.",
            ),
        ];
        TemplateTable {
            templates: entries.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
        }
    }

    /// Parse a table from `key = template` lines. `#` starts a comment;
    /// blank lines are ignored. Keys are `normal` or `judgment.reason`
    /// (e.g. `bad.print`). The table must cover all seven leaves exactly
    /// once, and every placeholder must be well-formed.
    pub fn from_str(text: &str) -> Result<Self, ExplainError> {
        let mut templates: BTreeMap<LeafKey, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key_text, template) = trimmed
                .split_once('=')
                .ok_or_else(|| ExplainError::BadLine { line, text: trimmed.to_string() })?;
            let key_text = key_text.trim();
            let template = template.trim();
            let key = parse_leaf_key(key_text)
                .ok_or_else(|| ExplainError::UnknownKey { line, key: key_text.to_string() })?;
            check_placeholders(key_text, template)?;
            if templates.insert(key, template.to_string()).is_some() {
                return Err(ExplainError::DuplicateKey { key: key_text.to_string() });
            }
        }
        let missing: Vec<String> = all_leaves()
            .into_iter()
            .filter(|k| !templates.contains_key(k))
            .map(leaf_name)
            .collect();
        if missing.is_empty() {
            Ok(TemplateTable { templates })
        } else {
            Err(ExplainError::IncompleteTable { missing })
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ExplainError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Render the table in the file format `from_str` accepts.
    pub fn to_file_format(&self) -> String {
        let mut out = String::new();
        for (key, template) in &self.templates {
            let _ = writeln!(out, "{} = {}", leaf_name(*key), template);
        }
        out
    }

    /// Produce the explanation sentence. Good and bad require a reason;
    /// normal must not have one.
    pub fn generate(
        &self,
        judgment: Judgment,
        reason: Option<Reason>,
        attributes: &BTreeMap<String, String>,
    ) -> Result<String, ExplainError> {
        match (judgment, reason) {
            (Judgment::Normal, Some(_)) => {
                return Err(ExplainError::ReasonMismatch {
                    judgment,
                    reason,
                    expectation: "carry no reason",
                })
            }
            (Judgment::Good | Judgment::Bad, None) => {
                return Err(ExplainError::ReasonMismatch {
                    judgment,
                    reason,
                    expectation: "need a reason",
                })
            }
            _ => {}
        }
        let key = (judgment, reason);
        let template = self
            .templates
            .get(&key)
            .ok_or_else(|| ExplainError::MissingTemplate { key: leaf_name(key) })?;
        let mut sentence = format!("This outfit is {judgment}. ");
        fill_placeholders(template, attributes, &mut sentence)?;
        Ok(sentence)
    }
}

fn parse_leaf_key(text: &str) -> Option<LeafKey> {
    if let Some((j, r)) = text.split_once('.') {
        let judgment: Judgment = j.parse().ok()?;
        if judgment == Judgment::Normal {
            return None;
        }
        Some((judgment, Some(r.parse().ok()?)))
    } else {
        let judgment: Judgment = text.parse().ok()?;
        (judgment == Judgment::Normal).then_some((judgment, None))
    }
}

/// Reject templates whose braces don't pair up into non-empty names.
fn check_placeholders(key: &str, template: &str) -> Result<(), ExplainError> {
    let bad = || ExplainError::BadPlaceholder { key: key.to_string() };
    let mut rest = template;
    while let Some(start) = rest.find(['{', '}']) {
        if rest.as_bytes()[start] == b'}' {
            return Err(bad());
        }
        let after = &rest[start + 1..];
        let end = after.find(['{', '}']).ok_or_else(bad)?;
        if after.as_bytes()[end] != b'}' || end == 0 {
            return Err(bad());
        }
        rest = &after[end + 1..];
    }
    Ok(())
}

fn fill_placeholders(
    template: &str,
    attributes: &BTreeMap<String, String>,
    out: &mut String,
) -> Result<(), ExplainError> {
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or_else(|| ExplainError::BadPlaceholder {
            key: template.to_string(),
        })?;
        let name = &after[..end];
        let attr_key = match name.strip_suffix("_t") {
            Some(stem) => format!("{stem}_top"),
            None => match name.strip_suffix("_b") {
                Some(stem) => format!("{stem}_bottom"),
                None => name.to_string(),
            },
        };
        let value = attributes.get(&attr_key).ok_or_else(|| ExplainError::MissingAttribute {
            placeholder: name.to_string(),
            key: attr_key.clone(),
        })?;
        out.push_str(value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(())
}

/// Explain with the built-in templates.
pub fn generate_explanation(
    judgment: Judgment,
    reason: Option<Reason>,
    attributes: &BTreeMap<String, String>,
) -> Result<String, ExplainError> {
    TemplateTable::builtin().generate(judgment, reason, attributes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::FactorKind;
    use crate::synthdata::AttributeCatalog;
    use proptest::prelude::*;

    fn attrs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn full_attrs() -> BTreeMap<String, String> {
        attrs(&[
            ("color_top", "scarlet"),
            ("color_bottom", "navy"),
            ("print_top", "floral"),
            ("print_bottom", "floral"),
            ("material_top", "leather"),
            ("material_bottom", "velvet"),
            ("silhouette_top", "oversized"),
            ("silhouette_bottom", "oversized"),
            ("detail_top", "plain"),
            ("detail_bottom", "plain"),
        ])
    }

    #[test]
    fn dazzling_prints_sentence_is_exact() {
        let sentence =
            generate_explanation(Judgment::Bad, Some(Reason::Print), &full_attrs()).unwrap();
        assert_eq!(
            sentence,
            "This outfit is bad. The floral print top and the floral bottom make the outfit too dazzling."
        );
    }

    #[test]
    fn all_builtin_leaves_match_frozen_wording() {
        let attrs = full_attrs();
        let expect = [
            (
                Judgment::Good,
                Some(Reason::Color),
                "This outfit is good. The scarlet top pairs beautifully with the navy bottom.",
            ),
            (
                Judgment::Good,
                Some(Reason::Print),
                "This outfit is good. The floral print top and the floral bottom complement each other nicely.",
            ),
            (
                Judgment::Good,
                Some(Reason::Design),
                "This outfit is good. The leather oversized top and the velvet oversized bottom come together in a thoughtfully balanced design.",
            ),
            (
                Judgment::Bad,
                Some(Reason::Color),
                "This outfit is bad. The scarlet top clashes with the navy bottom.",
            ),
            (
                Judgment::Bad,
                Some(Reason::Print),
                "This outfit is bad. The floral print top and the floral bottom make the outfit too dazzling.",
            ),
            (
                Judgment::Bad,
                Some(Reason::Design),
                "This outfit is bad. The leather oversized top and the velvet oversized bottom do not work together as a design.",
            ),
            (
                Judgment::Normal,
                None,
                "This outfit is normal. It follows common matching conventions without a standout factor.",
            ),
        ];
        for (judgment, reason, golden) in expect {
            assert_eq!(generate_explanation(judgment, reason, &attrs).unwrap(), golden);
        }
    }

    #[test]
    fn reason_judgment_mismatches_are_rejected() {
        let attrs = full_attrs();
        assert!(matches!(
            generate_explanation(Judgment::Normal, Some(Reason::Color), &attrs),
            Err(ExplainError::ReasonMismatch { .. })
        ));
        for j in [Judgment::Good, Judgment::Bad] {
            assert!(matches!(
                generate_explanation(j, None, &attrs),
                Err(ExplainError::ReasonMismatch { .. })
            ));
        }
    }

    #[test]
    fn missing_attributes_are_reported_with_the_key() {
        let mut attrs = full_attrs();
        attrs.remove("print_bottom");
        match generate_explanation(Judgment::Bad, Some(Reason::Print), &attrs) {
            Err(ExplainError::MissingAttribute { placeholder, key }) => {
                assert_eq!(placeholder, "print_b");
                assert_eq!(key, "print_bottom");
            }
            other => panic!("expected missing attribute, got {other:?}"),
        }
    }

    #[test]
    fn table_round_trips_through_the_file_format() {
        let builtin = TemplateTable::builtin();
        let text = builtin.to_file_format();
        let reparsed = TemplateTable::from_str(&text).unwrap();
        assert_eq!(builtin, reparsed);
    }

    #[test]
    fn file_format_accepts_comments_and_rejects_malformed_tables() {
        let mut text = String::from("# wording v2\n\n");
        text.push_str(&TemplateTable::builtin().to_file_format());
        assert!(TemplateTable::from_str(&text).is_ok());

        // Missing a leaf.
        let partial = "normal = Nothing stands out.";
        assert!(matches!(
            TemplateTable::from_str(partial),
            Err(ExplainError::IncompleteTable { missing }) if missing.len() == 6
        ));

        // Unknown key.
        let unknown = "great.color = Nice.";
        assert!(matches!(
            TemplateTable::from_str(unknown),
            Err(ExplainError::UnknownKey { .. })
        ));
        // Normal cannot take a reason key.
        assert!(matches!(
            TemplateTable::from_str("normal.color = Nice."),
            Err(ExplainError::UnknownKey { .. })
        ));

        // Duplicate key.
        let mut dup = TemplateTable::builtin().to_file_format();
        dup.push_str("bad.print = Again.\n");
        assert!(matches!(
            TemplateTable::from_str(&dup),
            Err(ExplainError::DuplicateKey { .. })
        ));

        // No equals sign.
        assert!(matches!(
            TemplateTable::from_str("bad.print The outfit."),
            Err(ExplainError::BadLine { line: 1, .. })
        ));

        // Broken placeholders.
        for broken in ["bad.print = The {print_t top.", "bad.print = The {} top.", "bad.print = a } b"] {
            assert!(matches!(
                TemplateTable::from_str(broken),
                Err(ExplainError::BadPlaceholder { .. })
            ));
        }
    }

    #[test]
    fn shipped_template_file_matches_the_builtin_table() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates/default.txt");
        let table = TemplateTable::from_file(&path).unwrap();
        assert_eq!(table, TemplateTable::builtin());
    }

    #[test]
    fn custom_wording_is_honored() {
        let mut text = TemplateTable::builtin().to_file_format();
        text = text.replace(
            "bad.color = The {color_t} top clashes with the {color_b} bottom.",
            "bad.color = {color_t} against {color_b} hurts to look at.",
        );
        let table = TemplateTable::from_str(&text).unwrap();
        let sentence =
            table.generate(Judgment::Bad, Some(Reason::Color), &full_attrs()).unwrap();
        assert_eq!(sentence, "This outfit is bad. scarlet against navy hurts to look at.");
    }

    proptest! {
        /// Any judgment/reason leaf with any catalog attributes yields a
        /// complete sentence: right prefix, no unresolved braces.
        #[test]
        fn every_leaf_renders_over_the_whole_catalog(
            leaf_index in 0usize..7,
            top in proptest::array::uniform5(0usize..100),
            bottom in proptest::array::uniform5(0usize..100),
        ) {
            let catalog = AttributeCatalog::standard();
            let mut attributes = BTreeMap::new();
            for (slot, factor) in FactorKind::ALL.into_iter().enumerate() {
                let names = catalog.names(factor);
                attributes.insert(
                    format!("{factor}_top"),
                    names[top[slot] % names.len()].to_string(),
                );
                attributes.insert(
                    format!("{factor}_bottom"),
                    names[bottom[slot] % names.len()].to_string(),
                );
            }
            let (judgment, reason) = all_leaves()[leaf_index];
            let sentence = generate_explanation(judgment, reason, &attributes).unwrap();
            let prefix = format!("This outfit is {judgment}. ");
            prop_assert!(sentence.starts_with(&prefix));
            let braces_left = sentence.contains('{') || sentence.contains('}');
            prop_assert!(!braces_left);
            prop_assert!(sentence.ends_with('.'));
        }
    }
}
