use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::template::Segment;
use super::{PromptError, PromptTemplate};
use crate::seed::{fold_u64, hash_parts, rng_from_seed};

/// Stable identifier of a (template version, slot choices) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub String);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PromptId {
    fn compute(template: &PromptTemplate, choices: &[usize]) -> Self {
        let idx: Vec<[u8; 8]> = choices.iter().map(|&c| (c as u64).to_le_bytes()).collect();
        let mut parts: Vec<&[u8]> = vec![b"dtgen-prompt", template.version().as_bytes()];
        for (slot, i) in template.slots().iter().zip(&idx) {
            parts.push(slot.name.as_bytes());
            parts.push(i);
        }
        PromptId(hex::encode(&hash_parts(parts)[..16]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prompt_id: PromptId,
    pub text: String,
    pub slot_choices: BTreeMap<String, usize>,
    pub derived_label: Option<usize>,
    pub attributes: BTreeMap<String, String>,
}

/// Render a prompt from one option index per slot, in slot order.
pub fn render(template: &PromptTemplate, choices: &[usize]) -> Result<RenderedPrompt, PromptError> {
    if choices.len() != template.slot_count() {
        return Err(PromptError::ChoiceCount {
            expected: template.slot_count(),
            got: choices.len(),
        });
    }
    for (slot, &c) in template.slots().iter().zip(choices) {
        if c >= slot.options.len() {
            return Err(PromptError::OptionOutOfRange {
                slot: slot.name.clone(),
                index: c,
                len: slot.options.len(),
            });
        }
    }
    Ok(render_unchecked(template, choices))
}

/// Render from a slot-name keyed map.
pub fn render_named(
    template: &PromptTemplate,
    choices: &BTreeMap<String, usize>,
) -> Result<RenderedPrompt, PromptError> {
    if let Some(unknown) = choices.keys().find(|k| template.slot_index(k).is_none()) {
        return Err(PromptError::UnknownSlot(unknown.clone()));
    }
    let ordered = template
        .slots()
        .iter()
        .map(|s| {
            choices
                .get(&s.name)
                .copied()
                .ok_or_else(|| PromptError::MissingChoice(s.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    render(template, &ordered)
}

fn render_unchecked(template: &PromptTemplate, choices: &[usize]) -> RenderedPrompt {
    let slots = template.slots();
    let mut text = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => text.push_str(s),
            Segment::Slot(i) => text.push_str(&slots[*i].options[choices[*i]].text),
        }
    }

    let mut attributes = BTreeMap::new();
    for (slot, &c) in slots.iter().zip(choices) {
        for (k, v) in slot.options[c].attributes() {
            attributes.insert(k.to_owned(), v.to_owned());
        }
    }

    let derived_label = template.label_slot().and_then(|i| {
        let opt = &slots[i].options[choices[i]];
        opt.severity.as_deref().and_then(|s| template.taxonomy().class_of(s))
    });

    RenderedPrompt {
        prompt_id: PromptId::compute(template, choices),
        text,
        slot_choices: slots.iter().zip(choices).map(|(s, &c)| (s.name.clone(), c)).collect(),
        derived_label,
        attributes,
    }
}

/// Lazy lexicographic walk over the Cartesian prompt space; the last slot
/// varies fastest.
pub struct PromptSpace<'a> {
    template: &'a PromptTemplate,
    cards: Vec<usize>,
    next: Option<Vec<usize>>,
    remaining: u64,
}

pub fn enumerate_space(template: &PromptTemplate) -> PromptSpace<'_> {
    PromptSpace {
        template,
        cards: template.cardinalities(),
        next: Some(vec![0; template.slot_count()]),
        remaining: template.space_size().unwrap_or(u64::MAX),
    }
}

impl PromptSpace<'_> {
    /// Advance the odometer and return the choices that were current.
    fn step(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut carry = true;
        for i in (0..succ.len()).rev() {
            succ[i] += 1;
            if succ[i] < self.cards[i] {
                carry = false;
                break;
            }
            succ[i] = 0;
        }
        if !carry {
            self.next = Some(succ);
        }
        self.remaining = self.remaining.saturating_sub(1);
        Some(current)
    }

    /// Advance without rendering; returns the slot choices.
    pub fn next_choices(&mut self) -> Option<Vec<usize>> {
        self.step()
    }
}

impl Iterator for PromptSpace<'_> {
    type Item = RenderedPrompt;

    fn next(&mut self) -> Option<RenderedPrompt> {
        let choices = self.step()?;
        Some(render_unchecked(self.template, &choices))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).ok();
        (n.unwrap_or(usize::MAX), n)
    }
}

/// Draw `n` prompts i.i.d., each slot uniform and independent.
///
/// The stream is a pure function of `(seed, template version)`; the first
/// `n` draws of a longer request are identical to a request for `n`.
pub fn sample_uniform(template: &PromptTemplate, n: usize, seed: u64) -> Result<Vec<RenderedPrompt>, PromptError> {
    if n == 0 {
        return Err(PromptError::EmptySample);
    }
    let keyed = fold_u64(&hash_parts([
        b"dtgen-sample".as_slice(),
        &seed.to_le_bytes(),
        template.version().as_bytes(),
    ]));
    let mut rng = rng_from_seed(keyed);
    let cards = template.cardinalities();
    let mut choices = vec![0usize; cards.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for (c, &len) in choices.iter_mut().zip(&cards) {
            *c = rng.random_range(0..len);
        }
        out.push(render_unchecked(template, &choices));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::HashSet;

    fn tpl(cards: &[usize]) -> PromptTemplate {
        let names: Vec<String> = (0..cards.len()).map(|i| format!("S{i}")).collect();
        let slots: Vec<_> = names
            .iter()
            .zip(cards)
            .map(|(n, &c)| {
                json!({"name": n, "options": (0..c).map(|j| json!({"text": format!("<{n}:{j}>")})).collect::<Vec<_>>()})
            })
            .collect();
        let pattern = names.iter().map(|n| format!("{{{n}}}")).collect::<Vec<_>>().join(" ");
        PromptTemplate::from_json(&json!({"version": "t", "render_pattern": pattern, "slots": slots}).to_string())
            .unwrap()
    }

    #[test]
    fn two_by_three_space() {
        let t = tpl(&[2, 3]);
        let all: Vec<_> = enumerate_space(&t).collect();
        assert_eq!(all.len(), 6);
        let ids: HashSet<_> = all.iter().map(|p| p.prompt_id.clone()).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(all[0].text, "<S0:0> <S1:0>");
        assert_eq!(all[1].text, "<S0:0> <S1:1>");
        assert_eq!(all[5].text, "<S0:1> <S1:2>");
    }

    #[test]
    fn single_slot_sequence() {
        let t = PromptTemplate::from_json(
            &json!({"version": "v", "render_pattern": "{A}", "slots": [{"name": "A", "options": [{"text": "a"}, {"text": "b"}]}]})
                .to_string(),
        )
        .unwrap();
        let texts: Vec<_> = enumerate_space(&t).map(|p| p.text).collect();
        assert_eq!(texts, ["a", "b"]);
    }

    #[test]
    fn render_published_example() {
        let t = PromptTemplate::default_template();
        let slots = t.slots();
        let pick = |slot: usize, text: &str| slots[slot].options.iter().position(|o| o.text == text).unwrap();
        let choices = [
            pick(0, "bowl"),
            pick(1, "a round white ceramic dinner"),
            pick(2, "a few crumbs scattered in the center"),
            pick(3, "bright kitchen light"),
        ];
        let p = render(&t, &choices).unwrap();
        assert_eq!(
            p.text,
            "a photo of bowl, a round white ceramic dinner, with a few crumbs scattered in the center, on bright kitchen light"
        );
        assert_eq!(p.derived_label, Some(1));
        assert_eq!(p.attributes["distribution"], "scattered");
        assert_eq!(render(&t, &choices).unwrap().prompt_id, p.prompt_id);
    }

    #[test]
    fn clean_severity_gives_clean_class() {
        let t = PromptTemplate::default_template();
        let clean = t.slots()[2]
            .options
            .iter()
            .position(|o| o.severity.as_deref() == Some("clean"))
            .unwrap();
        assert_eq!(render(&t, &[0, 0, clean, 0]).unwrap().derived_label, Some(0));
    }

    #[test]
    fn render_errors() {
        let t = tpl(&[2, 2]);
        assert!(matches!(render(&t, &[0]), Err(PromptError::ChoiceCount { .. })));
        assert!(matches!(
            render(&t, &[0, 2]),
            Err(PromptError::OptionOutOfRange { index: 2, .. })
        ));
        let mut named = BTreeMap::new();
        named.insert("S0".to_owned(), 1);
        assert!(matches!(render_named(&t, &named), Err(PromptError::MissingChoice(s)) if s == "S1"));
        named.insert("S9".to_owned(), 0);
        assert!(matches!(render_named(&t, &named), Err(PromptError::UnknownSlot(s)) if s == "S9"));
    }

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let t = PromptTemplate::default_template();
        let a = sample_uniform(&t, 50, 9).unwrap();
        let b = sample_uniform(&t, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_uniform(&t, 10, 9).unwrap();
        assert_eq!(&a[..10], &c[..]);
        assert_ne!(a, sample_uniform(&t, 50, 10).unwrap());
        assert!(matches!(sample_uniform(&t, 0, 9), Err(PromptError::EmptySample)));
    }

    #[test]
    fn one_option_per_slot_gives_identical_prompts() {
        let t = tpl(&[1, 1, 1]);
        let s = sample_uniform(&t, 7, 1).unwrap();
        assert!(s.iter().all(|p| *p == s[0]));
    }

    #[test]
    fn prompt_id_depends_on_version() {
        let a = tpl(&[2]);
        let doc = a.to_document();
        let b = PromptTemplate::from_document(super::super::TemplateDocument {
            version: "t2".into(),
            ..doc
        })
        .unwrap();
        assert_ne!(render(&a, &[1]).unwrap().prompt_id, render(&b, &[1]).unwrap().prompt_id);
    }
}
