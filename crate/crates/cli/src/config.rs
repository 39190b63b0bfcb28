//! `dtgen.toml`: one file per pipeline. Relative paths resolve against the
//! directory holding the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use dtgen_core::filter::{FilterConfig, ThresholdRule};
use dtgen_core::gateway::{Limits, MockConfig, RetryPolicy};
use dtgen_core::Task;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "dtgen.toml";
pub const TEMPLATE_FILE: &str = "template.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub template: PathBuf,
    pub master_seed: u64,
    pub storage: PathBuf,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n: usize,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n: 3600,
            width: 256,
            height: 256,
            steps: 28,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub alpha: f64,
    pub rule: ThresholdRule,
    pub min_group_size: usize,
    /// Per-class α, keyed by three-class label name or index.
    pub alpha_by_class: BTreeMap<String, f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = FilterConfig::<f64>::default();
        FilterSection {
            alpha: d.alpha,
            rule: d.rule,
            min_group_size: d.min_group_size,
            alpha_by_class: BTreeMap::new(),
        }
    }
}

impl FilterSection {
    pub fn to_filter_config(&self) -> anyhow::Result<FilterConfig<f64>> {
        let mut cfg = FilterConfig::default()
            .with_alpha(self.alpha)
            .with_rule(self.rule)
            .with_min_group_size(self.min_group_size);
        for (k, &a) in &self.alpha_by_class {
            let Some(class) = Task::ThreeClass.parse_label(k) else {
                bail!("filter.alpha_by_class: `{k}` is not a three-class label");
            };
            cfg.alpha_by_class.insert(class, a);
        }
        cfg.validate().context("filter config")?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub max_in_flight: usize,
    pub generate_timeout_secs: u64,
    pub embed_timeout_secs: u64,
    pub retry: RetrySection,
    pub mock: MockSection,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: "http://127.0.0.1:8700".into(),
            token: None,
            max_in_flight: 8,
            generate_timeout_secs: 120,
            embed_timeout_secs: 30,
            retry: RetrySection::default(),
            mock: MockSection::default(),
        }
    }
}

impl BackendConfig {
    pub fn limits(&self) -> Limits {
        Limits {
            max_in_flight: self.max_in_flight,
            retry: RetryPolicy {
                max_attempts: self.retry.max_attempts,
                base_delay: Duration::from_millis(self.retry.base_delay_ms),
                factor: self.retry.factor,
                ..RetryPolicy::default()
            },
            generate_timeout: Duration::from_secs(self.generate_timeout_secs),
            embed_timeout: Duration::from_secs(self.embed_timeout_secs),
            control_timeout: Duration::from_secs(self.embed_timeout_secs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrySection {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetrySection {
    fn default() -> Self {
        RetrySection {
            max_attempts: 5,
            base_delay_ms: 1000,
            factor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub embed_dim: usize,
    pub alignment_mean: f64,
    pub alignment_sd: f64,
    pub misaligned_rate: f64,
    pub misaligned_low: f64,
    pub misaligned_high: f64,
    pub latency_ms: u64,
    pub transient_failures: u32,
    pub permanent_failure_rate: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        let d = MockConfig::default();
        MockSection {
            embed_dim: d.embed_dim,
            alignment_mean: d.alignment_mean,
            alignment_sd: d.alignment_sd,
            misaligned_rate: d.misaligned_rate,
            misaligned_low: d.misaligned_range.0,
            misaligned_high: d.misaligned_range.1,
            latency_ms: 0,
            transient_failures: 0,
            permanent_failure_rate: 0.0,
        }
    }
}

impl MockSection {
    pub fn to_mock_config(&self) -> MockConfig {
        MockConfig {
            embed_dim: self.embed_dim,
            alignment_mean: self.alignment_mean,
            alignment_sd: self.alignment_sd,
            misaligned_rate: self.misaligned_rate,
            misaligned_range: (self.misaligned_low, self.misaligned_high),
            latency: Duration::from_millis(self.latency_ms),
            transient_failures: self.transient_failures,
            permanent_failure_rate: self.permanent_failure_rate,
            ..MockConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub steps: u32,
    pub lambda: f64,
    pub mu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_model: Option<String>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            steps: 1000,
            lambda: 0.0,
            mu: 0.0,
            base_model: None,
        }
    }
}

impl PipelineConfig {
    pub fn scaffold() -> Self {
        PipelineConfig {
            template: TEMPLATE_FILE.into(),
            master_seed: 1234,
            storage: "data".into(),
            generation: GenerationConfig::default(),
            filter: FilterSection::default(),
            backend: BackendConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A config together with the directory its relative paths hang off.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Loaded { cfg, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn storage(&self) -> PathBuf {
        self.resolve(&self.cfg.storage)
    }

    pub fn template_path(&self) -> PathBuf {
        self.resolve(&self.cfg.template)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaffold_roundtrips_through_toml() {
        let c = PipelineConfig::scaffold();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let c: PipelineConfig = toml::from_str("template = \"t.json\"\nmaster_seed = 1\nstorage = \"d\"\n").unwrap();
        assert_eq!(c.adapter.rank, 8);
        assert_eq!(c.backend.limits().retry.max_attempts, 5);
        assert!(
            toml::from_str::<PipelineConfig>("template = \"t\"\nmaster_seed = 1\nstorage = \"d\"\nbogus = 2\n")
                .is_err()
        );
    }

    #[test]
    fn alpha_by_class_accepts_names_and_indices() {
        let mut f = FilterSection::default();
        f.alpha_by_class.insert("heavily dirty".into(), 1.0);
        f.alpha_by_class.insert("1".into(), 1.2);
        let cfg = f.to_filter_config().unwrap();
        assert_eq!(cfg.alpha_by_class[&2], 1.0);
        assert_eq!(cfg.alpha_by_class[&1], 1.2);
        f.alpha_by_class.insert("greasy".into(), 1.0);
        assert!(f.to_filter_config().is_err());
    }
}
