//! Template document model and validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PromptError;

/// Default template shipped with the crate.
pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../../assets/default_template.json");

/// One candidate fragment for a slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirt_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<String>,
    /// Marks options that are not part of the published vocabulary.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub extended: bool,
}

impl OptionEntry {
    pub fn new(text: impl Into<String>) -> Self {
        OptionEntry {
            text: text.into(),
            severity: None,
            dirt_type: None,
            distribution: None,
            extended: false,
        }
    }

    pub fn with_severity(mut self, severity: impl Into<String>) -> Self {
        self.severity = Some(severity.into());
        self
    }

    /// Taxonomy tags carried by this option.
    pub fn attributes(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("severity", self.severity.as_deref()),
            ("dirt_type", self.dirt_type.as_deref()),
            ("distribution", self.distribution.as_deref()),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotVocabulary {
    pub name: String,
    pub options: Vec<OptionEntry>,
}

/// Label space and the severity → class mapping used to derive labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub classes: Vec<String>,
    /// Ordered from cleanest to dirtiest.
    pub severities: Vec<String>,
    pub class_map: BTreeMap<String, usize>,
    #[serde(default)]
    pub dirt_types: Vec<String>,
    #[serde(default)]
    pub distributions: Vec<String>,
}

impl Default for LabelTaxonomy {
    fn default() -> Self {
        let class_map = [("clean", 0), ("slight", 1), ("moderate", 2), ("severe", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        LabelTaxonomy {
            classes: vec!["clean".into(), "lightly dirty".into(), "heavily dirty".into()],
            severities: ["clean", "slight", "moderate", "severe"].map(String::from).to_vec(),
            class_map,
            dirt_types: ["grease", "food residue", "water stains"].map(String::from).to_vec(),
            distributions: ["local", "scattered", "full coverage"].map(String::from).to_vec(),
        }
    }
}

impl LabelTaxonomy {
    pub fn class_of(&self, severity: &str) -> Option<usize> {
        self.class_map.get(severity).copied()
    }

    fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: String| PromptError::Validation {
            slot: None,
            option: None,
            reason,
        };
        if self.classes.is_empty() {
            return Err(invalid("taxonomy declares no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.severities {
            if !seen.insert(s.as_str()) {
                return Err(invalid(format!("duplicate severity `{s}`")));
            }
            match self.class_map.get(s) {
                None => return Err(invalid(format!("class_map has no entry for severity `{s}`"))),
                Some(&c) if c >= self.classes.len() => {
                    return Err(invalid(format!(
                        "severity `{s}` maps to class {c}, but only {} classes exist",
                        self.classes.len()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.class_map.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(invalid(format!("class_map names unknown severity `{extra}`")));
        }
        let hit: BTreeSet<usize> = self.class_map.values().copied().collect();
        if let Some(miss) = (0..self.classes.len()).find(|c| !hit.contains(c)) {
            return Err(invalid(format!(
                "no severity maps to class {miss} (`{}`)",
                self.classes[miss]
            )));
        }
        Ok(())
    }
}

/// Raw document as it appears on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateDocument {
    pub version: String,
    pub render_pattern: String,
    /// Slot whose options carry severity tags. Defaults to `DIRTINESS DESCRIPTION`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<LabelTaxonomy>,
    pub slots: Vec<SlotVocabulary>,
}

pub(crate) const DEFAULT_LABEL_SLOT: &str = "DIRTINESS DESCRIPTION";

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Segment {
    Literal(String),
    Slot(usize),
}

/// A validated slot template.
#[derive(Clone, Debug)]
pub struct PromptTemplate {
    version: String,
    render_pattern: String,
    slots: Vec<SlotVocabulary>,
    label_slot: Option<usize>,
    taxonomy: LabelTaxonomy,
    pub(crate) segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parse and validate a template document from JSON text.
    pub fn from_json(source: &str) -> Result<Self, PromptError> {
        let doc: TemplateDocument = serde_json::from_str(source)?;
        Self::from_document(doc)
    }

    /// The default template: the published slot vocabulary plus extensions
    /// flagged `extended`.
    pub fn default_template() -> Self {
        Self::from_json(DEFAULT_TEMPLATE_JSON).expect("shipped template is valid")
    }

    pub fn from_document(doc: TemplateDocument) -> Result<Self, PromptError> {
        let TemplateDocument {
            version,
            render_pattern,
            label_slot,
            taxonomy,
            slots,
        } = doc;

        if version.trim().is_empty() {
            return Err(PromptError::invalid(None, None, "template version is empty"));
        }
        if slots.is_empty() {
            return Err(PromptError::invalid(None, None, "template has no slots"));
        }
        let mut names = BTreeSet::new();
        for slot in &slots {
            if slot.name.is_empty() || slot.name.contains(['{', '}']) {
                return Err(PromptError::invalid(
                    Some(&slot.name),
                    None,
                    "slot name must be non-empty and brace-free",
                ));
            }
            if !names.insert(slot.name.as_str()) {
                return Err(PromptError::invalid(Some(&slot.name), None, "duplicate slot name"));
            }
            if slot.options.is_empty() {
                return Err(PromptError::invalid(Some(&slot.name), None, "slot has no options"));
            }
            let mut texts = BTreeSet::new();
            for o in &slot.options {
                if o.text.trim().is_empty() {
                    return Err(PromptError::invalid(
                        Some(&slot.name),
                        Some(&o.text),
                        "empty option text",
                    ));
                }
                if !texts.insert(o.text.as_str()) {
                    return Err(PromptError::invalid(
                        Some(&slot.name),
                        Some(&o.text),
                        "duplicate option",
                    ));
                }
            }
        }

        let segments = parse_pattern(&render_pattern, &slots)?;

        let taxonomy = taxonomy.unwrap_or_default();
        taxonomy.validate()?;

        // An explicit label slot must exist; the implicit default is optional
        // so that small ad-hoc templates stay valid.
        let label_slot = match &label_slot {
            Some(name) => Some(
                slots
                    .iter()
                    .position(|s| &s.name == name)
                    .ok_or_else(|| PromptError::invalid(Some(name), None, "label_slot names no slot"))?,
            ),
            None => slots.iter().position(|s| s.name == DEFAULT_LABEL_SLOT),
        };

        for (i, slot) in slots.iter().enumerate() {
            for o in &slot.options {
                check_tags(&taxonomy, slot, o, Some(i) == label_slot)?;
            }
        }

        Ok(PromptTemplate {
            version,
            render_pattern,
            slots,
            label_slot,
            taxonomy,
            segments,
        })
    }

    pub fn to_document(&self) -> TemplateDocument {
        TemplateDocument {
            version: self.version.clone(),
            render_pattern: self.render_pattern.clone(),
            label_slot: self.label_slot.map(|i| self.slots[i].name.clone()),
            taxonomy: Some(self.taxonomy.clone()),
            slots: self.slots.clone(),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn render_pattern(&self) -> &str {
        &self.render_pattern
    }

    pub fn slots(&self) -> &[SlotVocabulary] {
        &self.slots
    }

    /// Number of slots.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.options.len()).collect()
    }

    /// Size of the Cartesian prompt space, `None` on overflow.
    pub fn space_size(&self) -> Option<u64> {
        self.slots
            .iter()
            .try_fold(1u64, |acc, s| acc.checked_mul(s.options.len() as u64))
    }

    pub fn taxonomy(&self) -> &LabelTaxonomy {
        &self.taxonomy
    }

    pub fn label_slot(&self) -> Option<usize> {
        self.label_slot
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }
}

fn check_tags(
    tax: &LabelTaxonomy,
    slot: &SlotVocabulary,
    o: &OptionEntry,
    is_label_slot: bool,
) -> Result<(), PromptError> {
    match &o.severity {
        None if is_label_slot => {
            return Err(PromptError::invalid(
                Some(&slot.name),
                Some(&o.text),
                "option in the label slot has no severity tag",
            ))
        }
        Some(s) if !tax.severities.contains(s) => {
            return Err(PromptError::invalid(
                Some(&slot.name),
                Some(&o.text),
                format!("unknown severity `{s}`"),
            ))
        }
        _ => {}
    }
    if let Some(t) = &o.dirt_type {
        if !tax.dirt_types.is_empty() && !tax.dirt_types.contains(t) {
            return Err(PromptError::invalid(
                Some(&slot.name),
                Some(&o.text),
                format!("unknown dirt_type `{t}`"),
            ));
        }
    }
    if let Some(d) = &o.distribution {
        if !tax.distributions.is_empty() && !tax.distributions.contains(d) {
            return Err(PromptError::invalid(
                Some(&slot.name),
                Some(&o.text),
                format!("unknown distribution `{d}`"),
            ));
        }
    }
    Ok(())
}

/// Split a render pattern into literals and slot references, requiring
/// every slot to appear exactly once.
fn parse_pattern(pattern: &str, slots: &[SlotVocabulary]) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut uses = vec![0usize; slots.len()];
    let mut rest = pattern;
    while !rest.is_empty() {
        match rest.find(['{', '}']) {
            None => {
                segments.push(Segment::Literal(rest.to_owned()));
                break;
            }
            Some(pos) if rest.as_bytes()[pos] == b'}' => {
                return Err(PromptError::invalid(None, None, "unbalanced `}` in render_pattern"));
            }
            Some(open) => {
                if open > 0 {
                    segments.push(Segment::Literal(rest[..open].to_owned()));
                }
                let after = &rest[open + 1..];
                let close = after
                    .find('}')
                    .ok_or_else(|| PromptError::invalid(None, None, "unterminated `{` in render_pattern"))?;
                let name = &after[..close];
                let idx = slots.iter().position(|s| s.name == name).ok_or_else(|| {
                    PromptError::invalid(Some(name), None, "render_pattern references an unknown slot")
                })?;
                uses[idx] += 1;
                segments.push(Segment::Slot(idx));
                rest = &after[close + 1..];
            }
        }
    }
    for (slot, n) in slots.iter().zip(&uses) {
        match n {
            1 => {}
            0 => {
                return Err(PromptError::invalid(
                    Some(&slot.name),
                    None,
                    "slot is not referenced by render_pattern",
                ))
            }
            _ => {
                return Err(PromptError::invalid(
                    Some(&slot.name),
                    None,
                    "slot is referenced more than once by render_pattern",
                ))
            }
        }
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc(v: serde_json::Value) -> Result<PromptTemplate, PromptError> {
        PromptTemplate::from_json(&v.to_string())
    }

    #[test]
    fn default_template_cardinalities() {
        let t = PromptTemplate::default_template();
        assert_eq!(t.cardinalities(), vec![6, 28, 132, 16]);
        assert_eq!(t.slot_count(), 4);
        assert_eq!(t.space_size(), Some(354_816));
    }

    #[test]
    fn default_template_keeps_published_fragments_verbatim() {
        let t = PromptTemplate::default_template();
        let published: Vec<&str> = t
            .slots()
            .iter()
            .flat_map(|s| s.options.iter())
            .filter(|o| !o.extended)
            .map(|o| o.text.as_str())
            .collect();
        for frag in [
            "bowl",
            "plate",
            "teacup",
            "a heavy and durable melaminea",
            "a whole slice of pizza fused to the surface, the cheese now a hard, moldy shell",
            "classical light",
        ] {
            assert!(published.contains(&frag), "{frag}");
        }
        assert_eq!(published.len(), 3 + 3 + 3 + 5);
    }

    #[test]
    fn single_slot_single_option() {
        let t = doc(json!({
            "version": "v", "render_pattern": "{A}",
            "slots": [{"name": "A", "options": [{"text": "x"}]}]
        }))
        .unwrap();
        assert_eq!(t.slot_count(), 1);
        assert_eq!(t.space_size(), Some(1));
    }

    #[test]
    fn unreferenced_slot_is_named() {
        let err = doc(json!({
            "version": "v", "render_pattern": "{A} only",
            "slots": [
                {"name": "A", "options": [{"text": "x"}]},
                {"name": "B", "options": [{"text": "y"}]}
            ]
        }))
        .unwrap_err();
        match err {
            PromptError::Validation { slot, .. } => assert_eq!(slot.as_deref(), Some("B")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_option_rejected() {
        let err = doc(json!({
            "version": "v", "render_pattern": "{A}",
            "slots": [{"name": "A", "options": [{"text": "x"}, {"text": "x"}]}]
        }))
        .unwrap_err();
        assert!(err.to_string().contains("duplicate option"), "{err}");
    }

    #[test]
    fn label_slot_options_need_severity() {
        let err = doc(json!({
            "version": "v", "render_pattern": "{DIRTINESS DESCRIPTION}",
            "slots": [{"name": "DIRTINESS DESCRIPTION", "options": [
                {"text": "crumbs", "severity": "slight"}, {"text": "grease"}
            ]}]
        }))
        .unwrap_err();
        match err {
            PromptError::Validation { option, .. } => assert_eq!(option.as_deref(), Some("grease")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(PromptTemplate::from_json("{"), Err(PromptError::Parse(_))));
        assert!(doc(
            json!({"version": "v", "render_pattern": "{A", "slots": [{"name": "A", "options": [{"text": "x"}]}]})
        )
        .is_err());
        assert!(doc(
            json!({"version": "v", "render_pattern": "{A}{A}", "slots": [{"name": "A", "options": [{"text": "x"}]}]})
        )
        .is_err());
        assert!(doc(
            json!({"version": "v", "render_pattern": "{Z}", "slots": [{"name": "A", "options": [{"text": "x"}]}]})
        )
        .is_err());
        assert!(doc(json!({"version": "v", "render_pattern": "", "slots": []})).is_err());
    }

    #[test]
    fn taxonomy_must_be_total_and_surjective() {
        let mut tax = LabelTaxonomy::default();
        tax.class_map.remove("moderate");
        assert!(tax.validate().is_err());

        let mut tax = LabelTaxonomy::default();
        tax.class_map.insert("slight".into(), 2);
        assert!(tax.validate().unwrap_err().to_string().contains("class 1"));

        assert!(LabelTaxonomy::default().validate().is_ok());
    }

    #[test]
    fn document_roundtrip() {
        let t = PromptTemplate::default_template();
        let json = serde_json::to_string(&t.to_document()).unwrap();
        let back = PromptTemplate::from_json(&json).unwrap();
        assert_eq!(back.slots(), t.slots());
        assert_eq!(back.render_pattern(), t.render_pattern());
    }
}
