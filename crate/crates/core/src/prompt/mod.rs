//! Structured slot grammar for prompt generation.
//!
//! A [`PromptTemplate`] is an ordered list of slots, each with a vocabulary
//! of fragments, plus a render pattern with one `{SLOT NAME}` placeholder
//! per slot. The prompt space is the Cartesian product of the vocabularies;
//! it can be enumerated lazily ([`enumerate_space`]) or sampled with an
//! independent uniform draw per slot ([`sample_uniform`]). Class labels are
//! derived from the severity tag of the option chosen in the label slot.

mod space;
mod template;

pub use space::{enumerate_space, render, render_named, sample_uniform, PromptId, PromptSpace, RenderedPrompt};
pub use template::{
    LabelTaxonomy, OptionEntry, PromptTemplate, SlotVocabulary, TemplateDocument, DEFAULT_TEMPLATE_JSON,
};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("malformed template document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid template{}{}: {reason}", fmt_ctx("slot", .slot), fmt_ctx("option", .option))]
    Validation {
        slot: Option<String>,
        option: Option<String>,
        reason: String,
    },
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("no choice given for slot `{0}`")]
    MissingChoice(String),
    #[error("option index {index} out of range for slot `{slot}` ({len} options)")]
    OptionOutOfRange { slot: String, index: usize, len: usize },
    #[error("expected {expected} slot choices, got {got}")]
    ChoiceCount { expected: usize, got: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
}

fn fmt_ctx(what: &str, v: &Option<String>) -> String {
    v.as_ref().map(|v| format!(" ({what} `{v}`)")).unwrap_or_default()
}

impl PromptError {
    pub(crate) fn invalid(slot: Option<&str>, option: Option<&str>, reason: impl Into<String>) -> Self {
        PromptError::Validation {
            slot: slot.map(str::to_owned),
            option: option.map(str::to_owned),
            reason: reason.into(),
        }
    }
}
