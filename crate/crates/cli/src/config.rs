//! Layered configuration: defaults, then the TOML config file, then
//! `RAGWEIR_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ragweir::grounded::GenOptions;
use ragweir::intent::IntentRouterConfig;
use ragweir::model::PipelineVariant;
use ragweir::pipeline::{LeakOptions, PipelineConfig};
use ragweir::retrieval::GateConfig;

pub const ENV_PREFIX: &str = "RAGWEIR_";

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub store: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub cpe_log: Option<PathBuf>,
    pub seed: Option<u64>,
    pub logical_timestamps: Option<bool>,
    pub listen: Option<String>,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub leak: LeakSection,
    #[serde(default)]
    pub generation: GenerationSection,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub top_k: Option<usize>,
    pub tau: Option<f64>,
    pub tau_mixed: Option<f64>,
    pub max_clarify_loops: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub window_w: Option<usize>,
    pub tools_enabled: Option<bool>,
    pub norms_text: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default)]
    pub extra_phrases: Vec<String>,
    pub decode_base64: Option<bool>,
    #[serde(default)]
    pub custom: Vec<CustomRule>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CustomRule {
    pub rule_id: String,
    pub pattern: String,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    pub min_score: Option<f64>,
    #[serde(default)]
    pub extra_tourism: Vec<String>,
    #[serde(default)]
    pub extra_self: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LeakSection {
    pub deny_words: Option<Vec<String>>,
    pub shingle_k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub citation_min_len: Option<usize>,
}

/// Fully resolved application configuration.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub variant: PipelineVariant,
    pub store_path: PathBuf,
    pub corpus_path: PathBuf,
    pub cpe_log_path: PathBuf,
    pub mock_seed: u64,
    pub logical_timestamps: bool,
    pub listen_address: Option<String>,
    pub file: FileConfig,
}

/// Flag-level overrides collected by the CLI parser.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub variant: Option<String>,
    pub store: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub cpe_log: Option<PathBuf>,
    pub seed: Option<u64>,
    pub logical_timestamps: bool,
    pub listen: Option<String>,
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok().filter(|v| !v.is_empty())
}

fn env_bool(key: &str) -> Option<bool> {
    env_var(key).map(|v| matches!(v.to_lowercase().as_str(), "1" | "true" | "yes" | "on"))
}

impl AppConfig {
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<AppConfig> {
        let file: FileConfig = match config_path {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => FileConfig::default(),
        };

        let variant_name = overrides
            .variant
            .clone()
            .or_else(|| env_var("VARIANT"))
            .or_else(|| file.variant.clone())
            .unwrap_or_else(|| "v3".to_string());
        let Some(variant) = PipelineVariant::parse(&variant_name) else {
            bail!("unknown variant `{variant_name}` (expected v0..v4)");
        };

        let store_path = overrides
            .store
            .clone()
            .or_else(|| env_var("STORE").map(PathBuf::from))
            .or_else(|| file.store.clone())
            .unwrap_or_else(|| PathBuf::from("crates/core/fixtures/store.jsonl"));
        let corpus_path = overrides
            .corpus
            .clone()
            .or_else(|| env_var("CORPUS").map(PathBuf::from))
            .or_else(|| file.corpus.clone())
            .unwrap_or_else(|| PathBuf::from("crates/core/fixtures/corpus.jsonl"));
        let cpe_log_path = overrides
            .cpe_log
            .clone()
            .or_else(|| env_var("CPE_LOG").map(PathBuf::from))
            .or_else(|| file.cpe_log.clone())
            .unwrap_or_else(|| PathBuf::from("cpe_log.jsonl"));
        let mock_seed = overrides
            .seed
            .or_else(|| env_var("SEED").and_then(|v| v.parse().ok()))
            .or(file.seed)
            .unwrap_or(0);
        let logical_timestamps = overrides.logical_timestamps
            || env_bool("LOGICAL_TIMESTAMPS").unwrap_or(false)
            || file.logical_timestamps.unwrap_or(false);
        let listen_address = overrides
            .listen
            .clone()
            .or_else(|| env_var("LISTEN"))
            .or_else(|| file.listen.clone());

        Ok(AppConfig {
            variant,
            store_path,
            corpus_path,
            cpe_log_path,
            mock_seed,
            logical_timestamps,
            listen_address,
            file,
        })
    }

    /// Build the per-variant pipeline configuration from the file sections.
    pub fn pipeline_config(&self, variant: PipelineVariant) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::for_variant(variant);

        let gate = &self.file.gate;
        let mut gate_cfg = GateConfig::default();
        if let Some(v) = gate.top_k {
            gate_cfg.top_k = v;
        }
        if let Some(v) = gate.tau {
            gate_cfg.tau = v;
        }
        if let Some(v) = gate.tau_mixed {
            gate_cfg.tau_mixed = v;
        }
        if let Some(v) = gate.max_clarify_loops {
            gate_cfg.max_clarify_loops = v;
        }
        gate_cfg.validate().map_err(|e| anyhow::anyhow!(e))?;
        cfg.gate_cfg = gate_cfg;

        for phrase in &self.file.detector.extra_phrases {
            cfg.patterns.add_phrase(phrase);
        }
        if let Some(v) = self.file.detector.decode_base64 {
            cfg.patterns.decode_base64 = v;
        }
        for rule in &self.file.detector.custom {
            cfg.patterns
                .add_custom(rule.rule_id.clone(), &rule.pattern, None)
                .with_context(|| format!("compiling custom rule `{}`", rule.rule_id))?;
        }

        let mut router = IntentRouterConfig::default();
        if let Some(v) = self.file.router.min_score {
            router.min_score = v;
        }
        for phrase in &self.file.router.extra_tourism {
            router.add_tourism_phrase(phrase, 1.0);
        }
        for phrase in &self.file.router.extra_self {
            router.add_self_phrase(phrase, 1.0);
        }
        cfg.router_cfg = router;

        let mut leak = LeakOptions::default();
        if let Some(words) = &self.file.leak.deny_words {
            leak.deny_words = words.clone();
        }
        if let Some(k) = self.file.leak.shingle_k {
            leak.shingle_k = k;
        }
        cfg.leak = leak;

        let mut gen = GenOptions::default();
        if let Some(v) = self.file.generation.temperature {
            gen.temperature = v;
        }
        if let Some(v) = self.file.generation.max_tokens {
            gen.max_tokens = v;
        }
        if let Some(v) = self.file.generation.citation_min_len {
            gen.citation_min_len = v;
        }
        cfg.gen_opts = gen;

        if let Some(w) = self.file.pipeline.window_w {
            cfg.window_w = w;
        }
        if let Some(t) = self.file.pipeline.tools_enabled {
            cfg.tools_enabled = t;
        }
        if let Some(norms) = &self.file.pipeline.norms_text {
            cfg.norms_text = norms.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
