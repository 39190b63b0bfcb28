//! Cross-modal quality filtering.
//!
//! Each generated image is scored by the cosine similarity between its
//! image embedding and the text embedding of its prompt. Scores are grouped
//! by prompt; a group's threshold is `μ ∓ α·σ` (population σ), and samples
//! scoring at or above the threshold are kept. Groups smaller than
//! `min_group_size` are pooled into one fallback group.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::Real;

pub use report::{FilterCounts, FilterReport, InvalidSample};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FilterError {
    #[error("embedding dimensions differ: image {image}, text {text}")]
    DimensionMismatch { image: usize, text: usize },
    #[error("{0} embedding has zero norm")]
    ZeroNorm(&'static str),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("score {0} is outside [-1, 1]")]
    ScoreOutOfRange(f64),
    #[error("no scores to filter")]
    Empty,
    #[error("need at least {need} scores, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("target retention must lie strictly between 0 and 1, got {0}")]
    BadTarget(f64),
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("sample `{sample_id}` (prompt `{prompt_id}`) resolves to no group stats")]
    UnresolvedGroup { sample_id: String, prompt_id: String },
}

/// Which side of the group mean the threshold sits on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// Keep `S >= μ − α·σ`; rejects the low tail.
    #[default]
    LowerTail,
    /// Keep `S >= μ + α·σ`; keeps only the high tail.
    UpperTail,
}

impl std::str::FromStr for ThresholdRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lower-tail" => Ok(ThresholdRule::LowerTail),
            "upper-tail" => Ok(ThresholdRule::UpperTail),
            other => Err(format!(
                "unknown rule `{other}` (expected `lower-tail` or `upper-tail`)"
            )),
        }
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ThresholdRule::LowerTail => "lower-tail",
            ThresholdRule::UpperTail => "upper-tail",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StddevMode {
    /// Divide by `n`.
    #[default]
    Population,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FilterConfig<T> {
    pub alpha: T,
    #[serde(default)]
    pub rule: ThresholdRule,
    #[serde(default = "default_min_group_size")]
    pub min_group_size: usize,
    #[serde(default)]
    pub stddev_mode: StddevMode,
    /// Optional α override per class index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alpha_by_class: BTreeMap<usize, T>,
}

fn default_min_group_size() -> usize {
    5
}

impl<T: Real> Default for FilterConfig<T> {
    fn default() -> Self {
        FilterConfig {
            alpha: T::from_f64(1.5).expect("representable"),
            rule: ThresholdRule::LowerTail,
            min_group_size: default_min_group_size(),
            stddev_mode: StddevMode::Population,
            alpha_by_class: BTreeMap::new(),
        }
    }
}

impl<T: Real> FilterConfig<T> {
    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_rule(mut self, rule: ThresholdRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_min_group_size(mut self, n: usize) -> Self {
        self.min_group_size = n;
        self
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let bad_alpha = |a: T| !a.is_finite() || a < T::zero();
        if bad_alpha(self.alpha) {
            return Err(FilterError::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some((c, a)) = self.alpha_by_class.iter().find(|(_, a)| bad_alpha(**a)) {
            return Err(FilterError::Config(format!(
                "alpha for class {c} must be finite and >= 0, got {a}"
            )));
        }
        if self.min_group_size < 2 {
            return Err(FilterError::Config(format!(
                "min_group_size must be at least 2, got {}",
                self.min_group_size
            )));
        }
        Ok(())
    }

    pub fn alpha_for(&self, label: Option<usize>) -> T {
        label
            .and_then(|c| self.alpha_by_class.get(&c).copied())
            .unwrap_or(self.alpha)
    }
}

/// Image and text embeddings of one generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair<T> {
    image: Vec<T>,
    text: Vec<T>,
}

impl<T: Real> EmbeddingPair<T> {
    pub fn new(image: Vec<T>, text: Vec<T>) -> Result<Self, FilterError> {
        if image.len() != text.len() {
            return Err(FilterError::DimensionMismatch {
                image: image.len(),
                text: text.len(),
            });
        }
        Ok(EmbeddingPair { image, text })
    }

    pub fn score(&self) -> Result<T, FilterError> {
        cosine_score(&self.image, &self.text)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`. Both vectors are normalized
/// before the dot product.
pub fn cosine_score<T: Real>(image: &[T], text: &[T]) -> Result<T, FilterError> {
    if image.len() != text.len() {
        return Err(FilterError::DimensionMismatch {
            image: image.len(),
            text: text.len(),
        });
    }
    let norm = |v: &[T], which: &'static str| -> Result<T, FilterError> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FilterError::NonFinite);
        }
        // scale by the max magnitude first so the sum of squares cannot overflow
        let m = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        if m == T::zero() {
            return Err(FilterError::ZeroNorm(which));
        }
        let s = v.iter().fold(T::zero(), |acc, &x| acc + (x / m) * (x / m));
        Ok(m * s.sqrt())
    };
    let nu = norm(image, "image")?;
    let nv = norm(text, "text")?;
    let dot = image
        .iter()
        .zip(text)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a / nu) * (b / nv));
    Ok(dot.max(-T::one()).min(T::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample<T> {
    pub sample_id: String,
    pub prompt_id: String,
    pub score: T,
    /// Class of the sample, used only to pick a per-class α.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl<T: Real> ScoredSample<T> {
    pub fn new(sample_id: impl Into<String>, prompt_id: impl Into<String>, score: T) -> Result<Self, FilterError> {
        let slack = T::from_f64(1e-9).expect("representable");
        if !score.is_finite() || score.abs() > T::one() + slack {
            return Err(FilterError::ScoreOutOfRange(score.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(ScoredSample {
            sample_id: sample_id.into(),
            prompt_id: prompt_id.into(),
            score,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKey {
    Prompt(String),
    /// Pooled groups smaller than `min_group_size`.
    Fallback,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupKey::Prompt(p) => write!(f, "prompt:{p}"),
            GroupKey::Fallback => f.write_str("fallback"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGroupStats<T> {
    pub group_key: GroupKey,
    pub n: usize,
    pub mean: T,
    pub stddev: T,
    /// Threshold under the configured rule and the default α.
    pub threshold: T,
}

pub fn threshold<T: Real>(mean: T, stddev: T, alpha: T, rule: ThresholdRule) -> T {
    match rule {
        ThresholdRule::LowerTail => mean - alpha * stddev,
        ThresholdRule::UpperTail => mean + alpha * stddev,
    }
}

/// Mean and population standard deviation. The values are sorted first so
/// the result depends only on the multiset; identical values give σ = 0
/// and μ equal to that value exactly.
fn mean_std<T: Real>(values: &mut [T]) -> (T, T) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let n = T::from_usize(values.len()).expect("count representable");
    let (lo, hi) = (values[0], values[values.len() - 1]);
    if lo == hi {
        return (lo, T::zero());
    }
    let mean = values.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = values.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    (mean, var.sqrt())
}

/// One stats record per prompt group, plus at most one fallback record.
/// Prompt groups come out sorted by prompt id; the fallback is last.
pub fn group_stats<T: Real>(
    scores: &[ScoredSample<T>],
    cfg: &FilterConfig<T>,
) -> Result<Vec<PromptGroupStats<T>>, FilterError> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(FilterError::Empty);
    }
    let mut groups: BTreeMap<&str, Vec<T>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.prompt_id.as_str()).or_default().push(s.score);
    }
    let mut out = Vec::with_capacity(groups.len() + 1);
    let mut pooled = Vec::new();
    for (pid, mut vals) in groups {
        if vals.len() < cfg.min_group_size {
            pooled.append(&mut vals);
            continue;
        }
        out.push(make_stats(GroupKey::Prompt(pid.to_owned()), &mut vals, cfg));
    }
    if !pooled.is_empty() {
        out.push(make_stats(GroupKey::Fallback, &mut pooled, cfg));
    }
    Ok(out)
}

fn make_stats<T: Real>(key: GroupKey, vals: &mut [T], cfg: &FilterConfig<T>) -> PromptGroupStats<T> {
    let (mean, stddev) = mean_std(vals);
    PromptGroupStats {
        group_key: key,
        n: vals.len(),
        mean,
        stddev,
        threshold: threshold(mean, stddev, cfg.alpha, cfg.rule),
    }
}

/// Per-sample outcome with everything needed to audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision<T> {
    pub sample_id: String,
    pub prompt_id: String,
    pub group_key: GroupKey,
    pub score: T,
    pub mean: T,
    pub stddev: T,
    pub alpha: T,
    pub threshold: T,
    pub rule: ThresholdRule,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome<T> {
    /// One decision per input score, in input order.
    pub decisions: Vec<Decision<T>>,
}

impl<T> FilterOutcome<T> {
    pub fn selected(&self) -> impl Iterator<Item = &Decision<T>> {
        self.decisions.iter().filter(|d| d.kept)
    }

    pub fn rejected(&self) -> impl Iterator<Item = &Decision<T>> {
        self.decisions.iter().filter(|d| !d.kept)
    }

    pub fn selected_count(&self) -> usize {
        self.selected().count()
    }

    pub fn retention(&self) -> f64 {
        if self.decisions.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.decisions.len() as f64
        }
    }
}

/// Keep each sample iff its score is at or above its group's threshold. A
/// sample resolves to its prompt's stats record if one exists, otherwise to
/// the fallback record.
pub fn apply_filter<T: Real>(
    scores: &[ScoredSample<T>],
    stats: &[PromptGroupStats<T>],
    cfg: &FilterConfig<T>,
) -> Result<FilterOutcome<T>, FilterError> {
    cfg.validate()?;
    let mut by_prompt = BTreeMap::new();
    let mut fallback = None;
    for st in stats {
        match &st.group_key {
            GroupKey::Prompt(p) => {
                by_prompt.insert(p.as_str(), st);
            }
            GroupKey::Fallback => fallback = Some(st),
        }
    }
    let decisions = scores
        .iter()
        .map(|s| {
            let st = by_prompt
                .get(s.prompt_id.as_str())
                .copied()
                .or(fallback)
                .ok_or_else(|| FilterError::UnresolvedGroup {
                    sample_id: s.sample_id.clone(),
                    prompt_id: s.prompt_id.clone(),
                })?;
            let alpha = cfg.alpha_for(s.label);
            let tau = threshold(st.mean, st.stddev, alpha, cfg.rule);
            Ok(Decision {
                sample_id: s.sample_id.clone(),
                prompt_id: s.prompt_id.clone(),
                group_key: st.group_key.clone(),
                score: s.score,
                mean: st.mean,
                stddev: st.stddev,
                alpha,
                threshold: tau,
                rule: cfg.rule,
                kept: s.score >= tau,
            })
        })
        .collect::<Result<Vec<_>, FilterError>>()?;
    Ok(FilterOutcome { decisions })
}

/// Smallest α whose lower-tail filter keeps at least `target_retention` of
/// the samples, with groups formed as in [`group_stats`].
///
/// Each sample has a minimal α at which it survives, `(μ − S)/σ` (zero for
/// scores at or above the mean); the answer is the order statistic of those
/// at the required keep count, nudged up if rounding in `μ − α·σ` would
/// drop a boundary sample.
pub fn calibrate_alpha<T: Real>(
    scores: &[ScoredSample<T>],
    target_retention: f64,
    cfg: &FilterConfig<T>,
) -> Result<T, FilterError> {
    if !(target_retention > 0.0 && target_retention < 1.0) {
        return Err(FilterError::BadTarget(target_retention));
    }
    if scores.is_empty() {
        return Err(FilterError::Empty);
    }
    if scores.len() < cfg.min_group_size {
        return Err(FilterError::TooFew {
            need: cfg.min_group_size,
            got: scores.len(),
        });
    }
    let cfg = FilterConfig {
        rule: ThresholdRule::LowerTail,
        alpha_by_class: BTreeMap::new(),
        ..cfg.clone()
    };
    let stats = group_stats(scores, &cfg)?;
    let probe = apply_filter(scores, &stats, &cfg.clone().with_alpha(T::zero()))?;

    let mut required: Vec<T> = probe
        .decisions
        .iter()
        .map(|d| {
            if d.score >= d.mean || d.stddev == T::zero() {
                T::zero()
            } else {
                (d.mean - d.score) / d.stddev
            }
        })
        .collect();
    required.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let n = scores.len();
    let need = ((target_retention * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let need = need.min(n);
    let mut alpha = required[need - 1];

    let kept_at = |alpha: T| -> usize {
        probe
            .decisions
            .iter()
            .filter(|d| d.score >= threshold(d.mean, d.stddev, alpha, ThresholdRule::LowerTail))
            .count()
    };
    let eps = T::epsilon();
    while kept_at(alpha) < need {
        alpha = if alpha == T::zero() {
            eps
        } else {
            alpha * (T::one() + eps + eps)
        };
    }
    Ok(alpha)
}
