//! Run configuration: a strict JSON document with one section per subsystem.
//!
//! Unknown keys are rejected, `--set path=value` overrides are applied to the
//! raw JSON before parsing, and the `CONPE_SEED` environment variable may
//! override the global seed (echoed into every report).

use serde::{Deserialize, Serialize};

use crate::contrast::AugRanges;
use crate::error::{ConpeError, Result};
use crate::harness::{SplitCounts, UnseenMode};
use crate::prompt::SimilarityMode;
use crate::world::FactorRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = crate::encoder::EncoderConfig::default();
        EncoderSection {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            mlp_ratio: c.mlp_ratio,
            init_std: c.init_std,
            seed: 7,
        }
    }
}

impl EncoderSection {
    pub fn to_encoder_config(&self) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            init_std: self.init_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub map_size: usize,
    pub map_seeds: Vec<u64>,
    /// "object_goal" or "point_goal"
    pub task: String,
    pub episodes_per_domain: usize,
    /// domains per factor for prompt-training data
    pub domains_per_factor: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            map_size: 9,
            map_seeds: vec![1, 2],
            task: "object_goal".into(),
            episodes_per_domain: 10,
            domains_per_factor: 4,
        }
    }
}

impl EnvSection {
    pub fn task(&self) -> Result<crate::world::Task> {
        match self.task.as_str() {
            "object_goal" => Ok(crate::world::Task::ObjectGoal { color: 0 }),
            "point_goal" => Ok(crate::world::Task::PointGoal { x: 0, y: 0 }),
            other => Err(ConpeError::Config(format!("unknown task kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastSection {
    pub timestep_k: u32,
    pub aug: AugRanges,
}

impl Default for ContrastSection {
    fn default() -> Self {
        ContrastSection { timestep_k: 3, aug: AugRanges::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub batch_size_augmentation: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub similarity: SimilarityMode,
    pub prompt_len: usize,
}

impl Default for PromptsSection {
    fn default() -> Self {
        let d = crate::prompt::PromptTrainConfig::default();
        PromptsSection {
            epochs: d.epochs,
            batches_per_epoch: d.batches_per_epoch,
            batch_size: d.batch_size,
            batch_size_augmentation: d.batch_size_augmentation,
            learning_rate: d.learning_rate,
            lambda: d.lambda,
            similarity: d.similarity,
            prompt_len: d.prompt_len,
        }
    }
}

impl PromptsSection {
    pub fn to_train_config(&self, seed: u64) -> crate::prompt::PromptTrainConfig {
        crate::prompt::PromptTrainConfig {
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            batch_size: self.batch_size,
            batch_size_augmentation: self.batch_size_augmentation,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            similarity: self.similarity,
            prompt_len: self.prompt_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub temperature: f64,
    pub projection_hidden_layer: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { temperature: 1.0, projection_hidden_layer: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// "dagger" or "ppo"
    pub algorithm: String,
    pub ppo: crate::policy::PPOConfig,
    pub dagger: crate::policy::DaggerConfig,
    pub adapt: crate::policy::AdaptConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            algorithm: "dagger".into(),
            ppo: crate::policy::PPOConfig::default(),
            dagger: crate::policy::DaggerConfig::default(),
            adapt: crate::policy::AdaptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticSection {
    pub enabled: bool,
    pub noise_scale: f64,
    pub max_tries: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lang_prompt_len: usize,
}

impl Default for SemanticSection {
    fn default() -> Self {
        let t = crate::semantic::SemanticTrainConfig::default();
        SemanticSection {
            enabled: false,
            noise_scale: 0.3,
            max_tries: 100,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lang_prompt_len: t.lang_prompt_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub counts: SplitCounts,
    pub episodes_per_domain: usize,
    pub seeds: Vec<u64>,
    pub unseen_mode: UnseenMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            counts: SplitCounts::default(),
            episodes_per_domain: 3,
            seeds: vec![101, 202, 303],
            unseen_mode: UnseenMode::Tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub encoder: EncoderSection,
    pub env: EnvSection,
    pub contrast: ContrastSection,
    pub prompts: PromptsSection,
    pub ensemble: EnsembleSection,
    pub policy: PolicySection,
    pub semantic: SemanticSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "out".into(),
            encoder: EncoderSection::default(),
            env: EnvSection::default(),
            contrast: ContrastSection::default(),
            prompts: PromptsSection::default(),
            ensemble: EnsembleSection::default(),
            policy: PolicySection::default(),
            semantic: SemanticSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub pointer: String,
    pub message: String,
}

impl RunConfig {
    /// Every violated invariant, with a JSON-pointer path per finding.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |pointer: &str, message: String| {
            out.push(Diagnostic { pointer: pointer.to_string(), message });
        };
        if let Err(e) = self.encoder.to_encoder_config().validate() {
            push("/encoder", e.to_string());
        }
        if self.env.map_size < 5 {
            push("/env/map_size", format!("map size {} < 5", self.env.map_size));
        }
        if self.env.map_seeds.is_empty() {
            push("/env/map_seeds", "at least one map seed required".into());
        }
        if self.env.task().is_err() {
            push("/env/task", format!("unknown task kind {}", self.env.task));
        }
        if self.env.episodes_per_domain == 0 {
            push("/env/episodes_per_domain", "must be positive".into());
        }
        if self.env.domains_per_factor == 0 {
            push("/env/domains_per_factor", "must be positive".into());
        }
        if let Err(e) = self.contrast.aug.validate() {
            push("/contrast/aug", e.to_string());
        }
        if let Err(e) = self.prompts.to_train_config(self.seed).validate() {
            push("/prompts", e.to_string());
        }
        if self.ensemble.temperature <= 0.0 {
            push(
                "/ensemble/temperature",
                format!("temperature must be positive, got {}", self.ensemble.temperature),
            );
        }
        if self.policy.algorithm != "dagger" && self.policy.algorithm != "ppo" {
            push("/policy/algorithm", format!("unknown algorithm {}", self.policy.algorithm));
        }
        if let Err(e) = self.policy.ppo.validate() {
            push("/policy/ppo", e.to_string());
        }
        if self.policy.dagger.rounds == 0 {
            push("/policy/dagger/rounds", "must be positive".into());
        }
        if self.semantic.noise_scale < 0.0 {
            push("/semantic/noise_scale", "must be >= 0".into());
        }
        if self.eval.seeds.is_empty() {
            push("/eval/seeds", "at least one evaluation seed required".into());
        }
        if self.eval.episodes_per_domain == 0 {
            push("/eval/episodes_per_domain", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(())
        } else {
            let lines: Vec<String> =
                diags.iter().map(|d| format!("{}: {}", d.pointer, d.message)).collect();
            Err(ConpeError::Validation(lines.join("; ")))
        }
    }

    /// Canonical JSON echo (field order fixed by the struct definitions).
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex digest of the canonical JSON; names the run directory.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::policy::sha256_hex(json.as_bytes())[..12].to_string()
    }

    pub fn full_ranges(&self) -> FactorRanges {
        FactorRanges::full()
    }
}

/// Apply one `--set path=value` override to raw JSON. Paths use `/` or `.`
/// separators; values parse as JSON scalars with a string fallback.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw_value) = assignment.split_once('=').ok_or_else(|| {
        ConpeError::Usage(format!("override '{assignment}' is not path=value"))
    })?;
    let value: serde_json::Value = match serde_json::from_str(raw_value) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw_value.to_string()),
    };
    let parts: Vec<&str> = path
        .trim_start_matches('/')
        .split(['/', '.'])
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(ConpeError::Usage("empty override path".into()));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| ConpeError::Usage(format!("override path {path} crosses a non-object")))?
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| ConpeError::Usage(format!("override path {path} crosses a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load, override, seed-substitute, and parse a config file.
pub fn load_config(path: &std::path::Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConpeError::io(path.display().to_string(), e))?;
    parse_config(&text, overrides, path.display().to_string().as_str())
}

pub fn parse_config(text: &str, overrides: &[String], origin: &str) -> Result<RunConfig> {
    let mut doc: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ConpeError::Json { path: origin.to_string(), source: e })?;
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    if let Ok(seed) = std::env::var("CONPE_SEED") {
        let parsed: u64 = seed
            .parse()
            .map_err(|_| ConpeError::Usage(format!("CONPE_SEED '{seed}' is not an integer")))?;
        if let Some(obj) = doc.as_object_mut() {
            obj.insert("seed".into(), serde_json::json!(parsed));
        }
    }
    let config: RunConfig = serde_json::from_value(doc)
        .map_err(|e| ConpeError::Json { path: origin.to_string(), source: e })?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_clean() {
        let cfg = RunConfig::default();
        assert!(cfg.diagnostics().is_empty());
        cfg.validate().unwrap();
    }

    #[test]
    fn negative_temperature_pinpointed() {
        let mut cfg = RunConfig::default();
        cfg.ensemble.temperature = -1.0;
        let diags = cfg.diagnostics();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].pointer, "/ensemble/temperature");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let text = r#"{"seed": 1, "wobble": true}"#;
        let err = parse_config(text, &[], "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wobble"), "{msg}");
    }

    #[test]
    fn overrides_apply_with_both_separators() {
        let mut cfg = RunConfig::default();
        cfg.seed = 3;
        let text = serde_json::to_string(&cfg).unwrap();
        let parsed = parse_config(
            &text,
            &["encoder/seed=9".into(), "ensemble.temperature=0.5".into()],
            "test",
        )
        .unwrap();
        assert_eq!(parsed.encoder.seed, 9);
        assert_eq!(parsed.ensemble.temperature, 0.5);
        assert_eq!(parsed.seed, 3);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn minimal_json_parses_with_defaults() {
        let cfg = parse_config("{}", &[], "test").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}
