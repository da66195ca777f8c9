//! End-to-end orchestration behind the CLI subcommands.
//!
//! Every run writes under `<output_dir>/run-<config digest>/`, so re-running a
//! command with unchanged inputs overwrites byte-identical artifacts:
//!
//!   split.json                 domain split (gen)
//!   encoder.bin                frozen encoder parameters (gen)
//!   datasets/factor_<name>/    per-factor expert demonstrations (collect)
//!   datasets/source/           source-domain demonstrations (collect)
//!   pool.bin, lang.bin         trained prompt pool and language prompts
//!   ckpt_<arm>.bin             policy checkpoints (train-policy / adapt)
//!   log_<arm>.jsonl            training logs
//!   report_<arm>.json          evaluation reports (eval)
//!   ablation_<kind>.csv        ablation sweeps (ablate)
//!   dumps/                     attention / embedding CSVs
//!   summary.json               collated outputs (report)

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::contrast::{augmentation_pairs, behavior_pairs, timestep_pairs, AugRanges, PairStream};
use crate::encoder::{init_encoder, EncoderParams};
use crate::ensemble::{AttentionParams, EnsembleMethod, VariantWeights};
use crate::error::{ConpeError, Result};
use crate::harness::{
    contrast_kind_for, evaluate, make_split, DomainSplit, EvalConfig, EvalReport,
};
use crate::policy::{
    adapt_with_policy_prompt, collect_rollout, dagger_round, ppo_update, sha256_hex, AdaptConfig,
    BcBatch, Checkpoint, DaggerConfig, DaggerContext, EmbeddingSet, NoiseHook, PolicyParams,
    RolloutConfig, StatePath,
};
use crate::prompt::{build_pool, quantize_to_f32, train_prompt, PromptPool, VisualPrompt};
use crate::rng::CounterRng;
use crate::semantic::{
    init_text_encoder, load_language_prompts, save_language_prompts, text_encode_ids,
    train_language_prompts, NoiseConfig, SemanticModel, SemanticTrainConfig, TextEncoderConfig,
};
use crate::world::{
    collect_episodes, generate_map, DomainSpec, EpisodeDataset, FactorId, FactorRanges, GridMap,
    Task,
};
use crate::optim::Adam;

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(config: &RunConfig) -> Self {
        let root = Path::new(&config.output_dir).join(format!("run-{}", config.digest()));
        RunPaths { root }
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(self.root.join("datasets"))
            .map_err(|e| ConpeError::io(self.root.display().to_string(), e))?;
        std::fs::create_dir_all(self.root.join("dumps"))
            .map_err(|e| ConpeError::io(self.root.display().to_string(), e))?;
        Ok(())
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder.bin")
    }

    pub fn pool(&self) -> PathBuf {
        self.root.join("pool.bin")
    }

    pub fn lang(&self) -> PathBuf {
        self.root.join("lang.bin")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn factor_dataset(&self, factor: FactorId) -> PathBuf {
        self.root.join("datasets").join(format!("factor_{}", factor.name()))
    }

    pub fn source_dataset(&self) -> PathBuf {
        self.root.join("datasets").join("source")
    }

    pub fn checkpoint(&self, arm: &str) -> PathBuf {
        self.root.join(format!("ckpt_{arm}.bin"))
    }

    pub fn log(&self, arm: &str) -> PathBuf {
        self.root.join(format!("log_{arm}.jsonl"))
    }

    pub fn report(&self, arm: &str) -> PathBuf {
        self.root.join(format!("report_{arm}.json"))
    }

    pub fn ablation(&self, kind: &str) -> PathBuf {
        self.root.join(format!("ablation_{kind}.csv"))
    }

    pub fn dump(&self, name: &str) -> PathBuf {
        self.root.join("dumps").join(name)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| ConpeError::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(path, text).map_err(|e| ConpeError::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConpeError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| ConpeError::Json { path: path.display().to_string(), source: e })
}

/// `gen`: the domain split and the frozen encoder.
pub fn cmd_gen(config: &RunConfig) -> Result<RunPaths> {
    config.validate()?;
    let paths = RunPaths::new(config);
    paths.ensure()?;
    let split = make_split(
        config.seed,
        &config.full_ranges(),
        config.eval.counts,
        config.eval.unseen_mode,
    )?;
    write_json(&paths.split(), &split)?;
    let encoder = init_encoder(&config.encoder.to_encoder_config())?;
    encoder.save(&paths.encoder())?;
    Ok(paths)
}

pub fn load_split(paths: &RunPaths) -> Result<DomainSplit> {
    read_json(&paths.split())
}

pub fn load_encoder(paths: &RunPaths) -> Result<EncoderParams> {
    EncoderParams::load(&paths.encoder())
}

pub fn maps_for(config: &RunConfig) -> Result<Vec<GridMap>> {
    config
        .env
        .map_seeds
        .iter()
        .map(|&s| generate_map(s, config.env.map_size))
        .collect()
}

/// Representative spec inside the seen region: continuous factors at the
/// range midpoint, discrete factors at their first choice.
pub fn midpoint_spec(ranges: &FactorRanges) -> DomainSpec {
    let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
    DomainSpec {
        fov: mid(ranges.fov),
        camera_pitch: mid(ranges.camera_pitch),
        stride: ranges.stride[0],
        rotation_degree: ranges.rotation_degree[0],
        brightness: mid(ranges.brightness),
        contrast: mid(ranges.contrast),
        saturation: mid(ranges.saturation),
        hue_shift: {
            let h = mid(ranges.hue_shift);
            if h >= 360.0 {
                0.0
            } else {
                h
            }
        },
        texture_style: ranges.texture_style[0],
    }
}

/// Domains for one factor's prompt dataset: the target factor sweeps its full
/// seen range while every other factor varies mildly (a `bandwidth` fraction
/// of its seen range around the midpoint). The mild background variation is
/// what makes the learned invariance transfer to held-out domains; with all
/// other factors pinned, prompts overfit the training scenes. The pooled
/// timestep prompt sees fully varied domains.
pub fn factor_variation_domains(
    factor: FactorId,
    seen: &FactorRanges,
    n: usize,
    seed: u64,
) -> Result<Vec<DomainSpec>> {
    if factor == FactorId::Timestep {
        return crate::world::sample_domains(seed, seen, n);
    }
    const BANDWIDTH: f64 = 0.35;
    let mut rng = CounterRng::from_path(seed, &format!("collect/vary-{}", factor.name()));
    let band = |(lo, hi): (f64, f64), rng: &mut CounterRng| {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * BANDWIDTH * (hi - lo);
        rng.uniform_in(mid - half, mid + half)
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut spec = DomainSpec {
            fov: band(seen.fov, &mut rng),
            camera_pitch: band(seen.camera_pitch, &mut rng),
            stride: seen.stride[0],
            rotation_degree: seen.rotation_degree[0],
            brightness: band(seen.brightness, &mut rng),
            contrast: band(seen.contrast, &mut rng),
            saturation: band(seen.saturation, &mut rng),
            hue_shift: {
                let h = band(seen.hue_shift, &mut rng);
                if h >= 360.0 {
                    0.0
                } else {
                    h
                }
            },
            texture_style: seen.texture_style[rng.below(seen.texture_style.len())],
        };
        // evenly spaced sweep guarantees the dataset covers the factor's
        // range for any domain count
        let grid = |(lo, hi): (f64, f64)| lo + (k as f64 + 0.5) * (hi - lo) / n as f64;
        match factor {
            FactorId::Fov => spec.fov = grid(seen.fov),
            FactorId::CameraPitch => spec.camera_pitch = grid(seen.camera_pitch),
            FactorId::Stride => spec.stride = seen.stride[k % seen.stride.len()],
            FactorId::RotationDegree => {
                spec.rotation_degree = seen.rotation_degree[k % seen.rotation_degree.len()]
            }
            FactorId::Brightness => spec.brightness = grid(seen.brightness),
            FactorId::Contrast => spec.contrast = grid(seen.contrast),
            FactorId::Saturation => spec.saturation = grid(seen.saturation),
            FactorId::HueShift => {
                let h = grid(seen.hue_shift);
                spec.hue_shift = if h >= 360.0 { 0.0 } else { h };
            }
            FactorId::TextureStyle => {
                spec.texture_style = seen.texture_style[k % seen.texture_style.len()]
            }
            FactorId::Timestep => unreachable!(),
        }
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

/// Augmentation ranges clipped to the seen region's color bounds.
pub fn clipped_aug_ranges(aug: &AugRanges, seen: &FactorRanges) -> AugRanges {
    let clip = |r: (f64, f64), b: (f64, f64)| (r.0.max(b.0), r.1.min(b.1).max(r.0.max(b.0)));
    AugRanges {
        brightness: clip(aug.brightness, seen.brightness),
        contrast: clip(aug.contrast, seen.contrast),
        saturation: clip(aug.saturation, seen.saturation),
        hue_shift: clip(aug.hue_shift, seen.hue_shift),
    }
}

/// `collect`: per-factor prompt datasets plus the source-domain dataset.
pub fn cmd_collect(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(config);
    paths.ensure()?;
    let split = load_split(&paths)?;
    let maps = maps_for(config)?;
    let task = config.env.task()?;
    for factor in FactorId::ALL {
        let domains = factor_variation_domains(
            factor,
            &split.seen_ranges,
            config.env.domains_per_factor,
            config.seed ^ u64::from(factor.code()),
        )?;
        // color factors keep identical dynamics across their domains, so
        // aligned setups make same-timestep frames exact views of one world
        // state; physical factors diverge after the first action and do
        // better with independently sampled setups
        let ds = if factor.is_color() {
            crate::world::collect_aligned_episodes(
                &maps,
                &domains,
                &task,
                config.env.episodes_per_domain,
                config.seed ^ (u64::from(factor.code()) << 8),
                config.semantic.enabled,
                2 * config.contrast.timestep_k as usize,
            )?
        } else {
            collect_episodes(
                &maps,
                &domains,
                &task,
                config.env.episodes_per_domain,
                config.seed ^ (u64::from(factor.code()) << 8),
                config.semantic.enabled,
            )?
        };
        ds.save(&paths.factor_dataset(factor))?;
    }
    let source_specs: Vec<DomainSpec> =
        split.source.iter().map(|(_, s)| s.clone()).collect();
    let source = collect_episodes(
        &maps,
        &source_specs,
        &task,
        config.env.episodes_per_domain,
        config.seed ^ 0x50_0c_e5,
        config.semantic.enabled,
    )?;
    source.save(&paths.source_dataset())?;
    Ok(())
}

pub fn open_stream<'d>(
    factor: FactorId,
    dataset: &'d EpisodeDataset,
    config: &RunConfig,
    seen: &FactorRanges,
) -> Result<PairStream<'d>> {
    match contrast_kind_for(factor) {
        crate::contrast::ContrastKind::Behavior => behavior_pairs(dataset),
        crate::contrast::ContrastKind::Augmentation => augmentation_pairs(
            dataset,
            &clipped_aug_ranges(&config.contrast.aug, seen),
            config.seed ^ u64::from(factor.code()),
        ),
        crate::contrast::ContrastKind::Timestep => {
            timestep_pairs(dataset, config.contrast.timestep_k)
        }
    }
}

/// `train-prompts`: one prompt per factor (parallel across factors), the pool
/// file, and - when semantics are on - the language prompts.
pub fn cmd_train_prompts(config: &RunConfig, workers: usize) -> Result<()> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let factors: Vec<FactorId> = FactorId::ALL.to_vec();
    let errors = std::sync::Mutex::new(Vec::<ConpeError>::new());
    let results = std::sync::Mutex::new(Vec::<(usize, VisualPrompt)>::new());

    let chunk_work = |factor_idx: usize| -> Result<VisualPrompt> {
        let factor = factors[factor_idx];
        let dataset = EpisodeDataset::load(&paths.factor_dataset(factor))?;
        let stream = open_stream(factor, &dataset, config, &split.seen_ranges)?;
        let contrast = crate::contrast::ContrastConfig {
            kind: contrast_kind_for(factor),
            m: config.prompts.batch_size,
            timestep_k: config.contrast.timestep_k,
            aug: clipped_aug_ranges(&config.contrast.aug, &split.seen_ranges),
            seed: config.seed,
        };
        let train = config
            .prompts
            .to_train_config(config.seed ^ (u64::from(factor.code()) << 16));
        let mut prompt = train_prompt(factor, &stream, &contrast, &train, &encoder)?;
        quantize_to_f32(&mut prompt);
        Ok(prompt)
    };

    let workers = workers.max(1).min(factors.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= factors.len() {
                    break;
                }
                match chunk_work(idx) {
                    Ok(prompt) => results.lock().unwrap().push((idx, prompt)),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    let mut prompts = results.into_inner().unwrap();
    prompts.sort_by_key(|(i, _)| *i);
    let pool = build_pool(prompts.into_iter().map(|(_, p)| p).collect())?;
    pool.save(&paths.pool())?;

    if config.semantic.enabled {
        train_semantics(config, &paths, &encoder, &pool)?;
    }
    Ok(())
}

fn train_semantics(
    config: &RunConfig,
    paths: &RunPaths,
    encoder: &EncoderParams,
    pool: &PromptPool,
) -> Result<()> {
    let sem_block = crate::world::SemanticsBlock::standard();
    let text = init_text_encoder(
        &TextEncoderConfig {
            embed_dim: encoder.config.embed_dim,
            n_heads: encoder.config.n_heads,
            mlp_ratio: encoder.config.mlp_ratio,
            max_tokens: 8,
            seed: config.encoder.seed ^ 0x7e17,
        },
        &sem_block.vocab,
    )?;
    // per visual prompt: prompted embeddings + memberships from its dataset
    let mut frames_per_prompt = Vec::with_capacity(pool.len());
    for p in pool.prompts() {
        let dataset = EpisodeDataset::load(&paths.factor_dataset(p.factor))?;
        let mut embeddings = Vec::new();
        let mut memberships = Vec::new();
        for ep in &dataset.episodes {
            let ms = ep.memberships.clone().unwrap_or_else(|| vec![Vec::new(); ep.len()]);
            for t in 0..ep.len() {
                let obs = ep.frame_image(t)?;
                embeddings
                    .push(crate::encoder::encode_prompted(encoder, &obs, &p.tokens)?.0);
                memberships.push(ms[t].clone());
            }
        }
        frames_per_prompt.push((embeddings, memberships));
    }
    let model = train_language_prompts(
        &sem_block,
        &frames_per_prompt,
        &text,
        &SemanticTrainConfig {
            epochs: config.semantic.epochs,
            batch_size: config.semantic.batch_size,
            learning_rate: config.semantic.learning_rate,
            lang_prompt_len: config.semantic.lang_prompt_len,
            seed: config.seed ^ 0x1a6,
        },
    )?;
    save_language_prompts(&model.lang_prompts, &paths.lang())
}

/// Rebuild the semantic model (text tower is seed-derived, prompts from disk).
pub fn load_semantic_model(
    config: &RunConfig,
    paths: &RunPaths,
    encoder: &EncoderParams,
) -> Result<SemanticModel> {
    let sem_block = crate::world::SemanticsBlock::standard();
    let text = init_text_encoder(
        &TextEncoderConfig {
            embed_dim: encoder.config.embed_dim,
            n_heads: encoder.config.n_heads,
            mlp_ratio: encoder.config.mlp_ratio,
            max_tokens: 8,
            seed: config.encoder.seed ^ 0x7e17,
        },
        &sem_block.vocab,
    )?;
    let lang_prompts = load_language_prompts(&paths.lang())?;
    let desc_ids: Vec<Vec<usize>> = sem_block
        .descriptions
        .iter()
        .map(|toks| toks.iter().map(|&t| t as usize).collect())
        .collect();
    let desc_embeddings = lang_prompts
        .iter()
        .map(|lp| {
            desc_ids
                .iter()
                .map(|ids| text_encode_ids(&text, ids, Some(lp)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticModel { text, lang_prompts, desc_embeddings })
}

/// Which policy arm a checkpoint trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainArm {
    /// guided attention over the full pool
    Conpe,
    /// no-prompt control: policy on z0 alone
    Control,
    /// one of the ablation ensemble variants
    Variant(EnsembleMethod),
}

impl TrainArm {
    pub fn name(&self) -> String {
        match self {
            TrainArm::Conpe => "conpe".into(),
            TrainArm::Control => "control".into(),
            TrainArm::Variant(m) => m.label().to_ascii_lowercase(),
        }
    }

    pub fn parse(s: &str) -> Result<TrainArm> {
        match s {
            "conpe" => Ok(TrainArm::Conpe),
            "control" => Ok(TrainArm::Control),
            other => Ok(TrainArm::Variant(EnsembleMethod::parse(other)?)),
        }
    }

    pub fn state_path(&self) -> StatePath {
        match self {
            TrainArm::Conpe => StatePath::Guided,
            TrainArm::Control => StatePath::Control,
            TrainArm::Variant(m) => StatePath::Variant { method: *m },
        }
    }
}

/// Noise regularization mode for policy training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Off,
    /// plain Gaussian noise on prompted embeddings
    Plain,
    /// sign-preserving rejection-sampled noise
    Regularized,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<serde_json::Value>,
}

/// Train one policy arm with DAGGER (default) or PPO per the config.
#[allow(clippy::too_many_arguments)]
pub fn train_policy_arm(
    config: &RunConfig,
    encoder: &EncoderParams,
    pool: &PromptPool,
    split: &DomainSplit,
    arm: TrainArm,
    seed: u64,
    noise_mode: NoiseMode,
    semantic: Option<&SemanticModel>,
) -> Result<TrainOutput> {
    let maps = maps_for(config)?;
    let task = config.env.task()?;
    let d = encoder.config.embed_dim;
    let input_dim = d + Task::INPUT_DIM;
    let source_specs: Vec<DomainSpec> = split.source.iter().map(|(_, s)| s.clone()).collect();

    let mut policy = PolicyParams::init(input_dim, seed);
    let path = arm.state_path();
    let mut attention = match arm {
        TrainArm::Conpe => Some(AttentionParams::init(
            pool.len(),
            d,
            seed ^ 0xa77e,
            config.ensemble.projection_hidden_layer,
        )),
        _ => None,
    };
    if let Some(a) = attention.as_mut() {
        a.temperature = config.ensemble.temperature;
    }
    let mut weights = match arm {
        TrainArm::Variant(EnsembleMethod::EnsWeiAvg | EnsembleMethod::ComWeiAvg) => {
            Some(VariantWeights::uniform(pool.len()))
        }
        _ => None,
    };

    // embedder per arm: COM paths cache the combined-prompt embedding in zs[0]
    let com_prompt = match arm {
        TrainArm::Variant(m) if m.is_prompt_level() => {
            Some(crate::ensemble::combined_prompt(pool, weights.as_ref()))
        }
        _ => None,
    };
    let embed = |obs: &crate::encoder::ImageTensor| -> Result<EmbeddingSet> {
        match arm {
            TrainArm::Control => crate::policy::embed_observation(encoder, None, obs),
            TrainArm::Conpe => crate::policy::embed_observation(encoder, Some(pool), obs),
            TrainArm::Variant(m) => {
                if m.is_prompt_level() {
                    let z0 = crate::encoder::encode(encoder, obs)?.0;
                    let zc = crate::encoder::encode_prompted(
                        encoder,
                        obs,
                        com_prompt.as_ref().expect("combined prompt cached"),
                    )?
                    .0;
                    Ok(EmbeddingSet { z0, zs: vec![zc] })
                } else {
                    crate::policy::embed_observation(encoder, Some(pool), obs)
                }
            }
        }
    };

    let noise_config = NoiseConfig {
        scale: config.semantic.noise_scale,
        max_tries: config.semantic.max_tries,
    };
    let hook_storage;
    let noise_hook: Option<&NoiseHook<'_>> = match noise_mode {
        NoiseMode::Off => None,
        NoiseMode::Plain => {
            hook_storage = NoiseHook { config: &noise_config, desc_embeddings: None, seed };
            Some(&hook_storage)
        }
        NoiseMode::Regularized => {
            let model = semantic.ok_or_else(|| {
                ConpeError::Usage("regularized noise needs the semantic model".into())
            })?;
            hook_storage = NoiseHook {
                config: &noise_config,
                desc_embeddings: Some(&model.desc_embeddings),
                seed,
            };
            Some(&hook_storage)
        }
    };

    let mut log = Vec::new();
    let encoder_digest = sha256_hex(&encoder.to_bytes());
    let pool_digest = sha256_hex(&pool.to_bytes());

    match config.policy.algorithm.as_str() {
        "dagger" => {
            let dagger = DaggerConfig { seed, ..config.policy.dagger.clone() };
            let ctx = DaggerContext {
                encoder,
                pool: Some(pool),
                maps: &maps,
                domains: &source_specs,
                task,
                embed: Some(&embed),
            };
            let mut aggregate = BcBatch::default();
            let mut opt_policy = Adam::new(dagger.learning_rate, &policy.shapes());
            let mut opt_attention = attention.as_ref().map(|a| {
                let shapes: Vec<(usize, usize)> = a
                    .proj
                    .iter()
                    .chain(a.proj_hidden.iter().flatten())
                    .map(|m| (m.rows, m.cols))
                    .collect();
                Adam::new(dagger.learning_rate, &shapes)
            });
            let mut opt_weights = weights
                .as_ref()
                .map(|w| Adam::new(dagger.learning_rate, &[(w.0.rows, w.0.cols)]));
            for round in 0..dagger.rounds {
                let beta = 0.5f64.powi(round as i32);
                let loss = dagger_round(
                    &mut policy,
                    attention.as_mut(),
                    weights.as_mut(),
                    &ctx,
                    &mut aggregate,
                    beta,
                    &dagger,
                    &path,
                    seed ^ ((round as u64 + 1) << 24),
                    &mut opt_policy,
                    opt_attention.as_mut(),
                    opt_weights.as_mut(),
                    noise_hook,
                )?;
                log.push(serde_json::json!({
                    "phase": "dagger",
                    "round": round,
                    "beta": beta,
                    "bc_loss": loss,
                    "aggregate_size": aggregate.len(),
                }));
            }
        }
        "ppo" => {
            let ppo = config.policy.ppo.clone();
            let mut opt_policy = Adam::new(ppo.learning_rate, &policy.shapes());
            let mut opt_attention = attention.as_ref().map(|a| {
                let shapes: Vec<(usize, usize)> =
                    a.proj.iter().map(|m| (m.rows, m.cols)).collect();
                Adam::new(ppo.learning_rate, &shapes)
            });
            let mut env_steps = 0usize;
            let mut update = 0u64;
            while env_steps < ppo.total_env_steps {
                let steps = ppo.steps_per_rollout.min(ppo.total_env_steps - env_steps);
                let rollout_cfg = RolloutConfig {
                    encoder,
                    pool: (arm != TrainArm::Control).then_some(pool),
                    maps: &maps,
                    domains: &source_specs,
                    task,
                    steps,
                    seed: seed ^ (update << 32),
                };
                let mut buffer = collect_rollout(&rollout_cfg, &policy, attention.as_ref(), &path)?;
                if let Some(hook) = noise_hook {
                    let mut sets: Vec<EmbeddingSet> =
                        buffer.steps.iter().map(|s| s.set.clone()).collect();
                    crate::semantic::augment_embedding_sets(
                        &mut sets,
                        hook.desc_embeddings,
                        hook.config,
                        hook.seed ^ update,
                    )?;
                    for (s, set) in buffer.steps.iter_mut().zip(sets) {
                        s.set = set;
                    }
                }
                env_steps += buffer.len();
                let stats = ppo_update(
                    &mut policy,
                    attention.as_mut(),
                    &buffer,
                    &ppo,
                    &path,
                    &mut opt_policy,
                    opt_attention.as_mut(),
                    seed ^ update,
                )?;
                log.push(serde_json::json!({
                    "phase": "ppo",
                    "update": update,
                    "env_steps": env_steps,
                    "policy_loss": stats.policy_loss,
                    "value_loss": stats.value_loss,
                    "entropy": stats.entropy,
                }));
                update += 1;
            }
        }
        other => return Err(ConpeError::Config(format!("unknown algorithm {other}"))),
    }

    let checkpoint = Checkpoint {
        policy,
        attention,
        policy_prompt: None,
        variant_weights: weights,
        state_path: path,
        task,
        encoder_digest,
        pool_digest,
        config_echo: config.echo(),
    };
    Ok(TrainOutput { checkpoint, log })
}

fn write_log(path: &Path, entries: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| ConpeError::io(path.display().to_string(), e))
}

/// `train-policy`: train one arm and persist checkpoint + log.
pub fn cmd_train_policy(config: &RunConfig, arm: TrainArm) -> Result<Checkpoint> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let (noise_mode, semantic) = if config.semantic.enabled && config.semantic.noise_scale > 0.0 {
        let model = load_semantic_model(config, &paths, &encoder)?;
        (NoiseMode::Regularized, Some(model))
    } else {
        (NoiseMode::Off, None)
    };
    let out = train_policy_arm(
        config,
        &encoder,
        &pool,
        &split,
        arm,
        config.seed,
        noise_mode,
        semantic.as_ref(),
    )?;
    out.checkpoint.save(&paths.checkpoint(&arm.name()))?;
    write_log(&paths.log(&arm.name()), &out.log)?;
    Ok(out.checkpoint)
}

/// `adapt`: attach a policy prompt + fresh attention module to a frozen
/// pretrained checkpoint.
pub fn cmd_adapt(config: &RunConfig, base_arm: &str) -> Result<Checkpoint> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let base = Checkpoint::load(&paths.checkpoint(base_arm))?;
    if pool.token_dim() != encoder.config.embed_dim {
        return Err(ConpeError::Validation("pool/encoder dimension mismatch".into()));
    }
    let maps = maps_for(config)?;
    let source_specs: Vec<DomainSpec> = split.source.iter().map(|(_, s)| s.clone()).collect();
    let ctx = DaggerContext {
        encoder: &encoder,
        pool: Some(&pool),
        maps: &maps,
        domains: &source_specs,
        task: base.task,
        embed: None,
    };
    let adapt_cfg = AdaptConfig { seed: config.seed ^ 0xada9, ..config.policy.adapt.clone() };
    let (p_pol, attention) =
        adapt_with_policy_prompt(&base.policy, &pool, &encoder, &ctx, &adapt_cfg)?;
    let adapted = Checkpoint {
        policy: base.policy.clone(),
        attention: Some(attention),
        policy_prompt: Some(p_pol),
        variant_weights: None,
        state_path: StatePath::PolicyPrompt,
        task: base.task,
        encoder_digest: base.encoder_digest.clone(),
        pool_digest: sha256_hex(&pool.to_bytes()),
        config_echo: config.echo(),
    };
    if adapted.policy.digest() != base.policy.digest() {
        return Err(ConpeError::Validation("policy digest changed during adaptation".into()));
    }
    adapted.save(&paths.checkpoint("adapted"))?;
    Ok(adapted)
}

/// `eval`: evaluate a checkpoint over the split and write the report.
pub fn cmd_eval(config: &RunConfig, arm: &str) -> Result<EvalReport> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let ckpt = Checkpoint::load(&paths.checkpoint(arm))?;
    let eval_cfg = EvalConfig {
        episodes_per_domain: config.eval.episodes_per_domain,
        seeds: config.eval.seeds.clone(),
        map_seeds: config.env.map_seeds.clone(),
        map_size: config.env.map_size,
    };
    let report = evaluate(
        &ckpt,
        &encoder,
        Some(&pool),
        &split,
        &eval_cfg,
        &sha256_hex(&encoder.to_bytes()),
        &sha256_hex(&pool.to_bytes()),
    )?;
    let text = report.to_json();
    std::fs::write(paths.report(arm), &text)
        .map_err(|e| ConpeError::io(paths.report(arm).display().to_string(), e))?;
    Ok(report)
}

/// `dump-attn`: attention-weight matrix CSV for one episode.
pub fn cmd_dump_attention(config: &RunConfig, arm: &str, domain_index: usize, episode_seed: u64) -> Result<PathBuf> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let ckpt = Checkpoint::load(&paths.checkpoint(arm))?;
    let maps = maps_for(config)?;
    let all: Vec<&(u32, DomainSpec)> = split
        .source
        .iter()
        .chain(&split.seen_target)
        .chain(&split.unseen_target)
        .collect();
    let (_, domain) = all
        .get(domain_index)
        .ok_or_else(|| ConpeError::Usage(format!("domain index {domain_index} out of range")))?;
    let csv = crate::harness::dump_attention(&ckpt, &encoder, &pool, &maps[0], domain, episode_seed)?;
    let out = paths.dump(&format!("attention_{arm}_{domain_index}_{episode_seed}.csv"));
    std::fs::write(&out, csv).map_err(|e| ConpeError::io(out.display().to_string(), e))?;
    Ok(out)
}

/// `dump-emb`: embedding CSV (intra or inter mode).
pub fn cmd_dump_embeddings(
    config: &RunConfig,
    mode: crate::harness::EmbeddingDumpMode,
    max_items: usize,
) -> Result<PathBuf> {
    let paths = RunPaths::new(config);
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let dataset = EpisodeDataset::load(&paths.source_dataset())?;
    let csv = crate::harness::dump_embeddings(&pool, &encoder, &dataset, mode, max_items)?;
    let name = match mode {
        crate::harness::EmbeddingDumpMode::Intra => "embeddings_intra.csv",
        crate::harness::EmbeddingDumpMode::Inter => "embeddings_inter.csv",
    };
    let out = paths.dump(name);
    std::fs::write(&out, csv).map_err(|e| ConpeError::io(out.display().to_string(), e))?;
    Ok(out)
}

/// One ablation row: mean +/- std of per-split success over training seeds.
fn ablation_row(
    config: &RunConfig,
    encoder: &EncoderParams,
    pool: &PromptPool,
    split: &DomainSplit,
    arm: TrainArm,
    noise_mode: NoiseMode,
    semantic: Option<&SemanticModel>,
    seeds: &[u64],
) -> Result<[(f64, f64); 3]> {
    let eval_cfg = EvalConfig {
        episodes_per_domain: config.eval.episodes_per_domain,
        seeds: vec![config.seed ^ 0xe7a1],
        map_seeds: config.env.map_seeds.clone(),
        map_size: config.env.map_size,
    };
    let mut per_split: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for &seed in seeds {
        let out = train_policy_arm(config, encoder, pool, split, arm, seed, noise_mode, semantic)?;
        let report = evaluate(
            &out.checkpoint,
            encoder,
            Some(pool),
            split,
            &eval_cfg,
            &out.checkpoint.encoder_digest,
            &out.checkpoint.pool_digest,
        )?;
        per_split[0].push(report.source.success_mean);
        per_split[1].push(report.seen_target.success_mean);
        per_split[2].push(report.unseen_target.success_mean);
    }
    Ok(per_split.map(|xs| mean_std(&xs)))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    EnsembleMethods,
    PromptCount,
    NoiseScale,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ensemble_methods" => Ok(AblationKind::EnsembleMethods),
            "prompt_count" => Ok(AblationKind::PromptCount),
            "noise_scale" => Ok(AblationKind::NoiseScale),
            other => Err(ConpeError::Usage(format!("unknown ablation kind {other}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationKind::EnsembleMethods => "ensemble_methods",
            AblationKind::PromptCount => "prompt_count",
            AblationKind::NoiseScale => "noise_scale",
        }
    }
}

/// `ablate`: sweep one axis and emit a CSV.
pub fn cmd_ablate(config: &RunConfig, kind: AblationKind) -> Result<PathBuf> {
    let paths = RunPaths::new(config);
    let split = load_split(&paths)?;
    let encoder = load_encoder(&paths)?;
    let pool = PromptPool::load(&paths.pool())?;
    let seeds: Vec<u64> = config.eval.seeds.clone();
    let mut csv = String::new();
    match kind {
        AblationKind::EnsembleMethods => {
            csv.push_str("method,source_mean,source_std,seen_mean,seen_std,unseen_mean,unseen_std\n");
            let mut arms = vec![TrainArm::Variant(EnsembleMethod::ComUniAvg),
                TrainArm::Variant(EnsembleMethod::ComWeiAvg),
                TrainArm::Variant(EnsembleMethod::EnsUniAvg),
                TrainArm::Variant(EnsembleMethod::EnsWeiAvg)];
            arms.push(TrainArm::Conpe);
            for arm in arms {
                let row = ablation_row(
                    config, &encoder, &pool, &split, arm, NoiseMode::Off, None, &seeds,
                )?;
                let label = match arm {
                    TrainArm::Conpe => "GUIDED".to_string(),
                    TrainArm::Variant(m) => m.label().to_string(),
                    TrainArm::Control => "CONTROL".to_string(),
                };
                csv.push_str(&format!(
                    "{label},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    row[0].0, row[0].1, row[1].0, row[1].1, row[2].0, row[2].1
                ));
            }
        }
        AblationKind::PromptCount => {
            csv.push_str("n,source_mean,source_std,seen_mean,seen_std,unseen_mean,unseen_std\n");
            for n in [2usize, 5, 10] {
                let n = n.min(pool.len());
                let sub = build_pool(pool.prompts()[..n].to_vec())?;
                let row = ablation_row(
                    config, &encoder, &sub, &split, TrainArm::Conpe, NoiseMode::Off, None, &seeds,
                )?;
                csv.push_str(&format!(
                    "{n},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    row[0].0, row[0].1, row[1].0, row[1].1, row[2].0, row[2].1
                ));
            }
        }
        AblationKind::NoiseScale => {
            csv.push_str(
                "delta,plain_source,plain_seen,plain_unseen,semantic_source,semantic_seen,semantic_unseen\n",
            );
            let semantic = load_semantic_model(config, &paths, &encoder)?;
            for delta in [0.1, 0.2, 0.3, 0.4] {
                let mut cfg = config.clone();
                cfg.semantic.noise_scale = delta;
                let plain = ablation_row(
                    &cfg, &encoder, &pool, &split, TrainArm::Conpe, NoiseMode::Plain, None, &seeds,
                )?;
                let reg = ablation_row(
                    &cfg,
                    &encoder,
                    &pool,
                    &split,
                    TrainArm::Conpe,
                    NoiseMode::Regularized,
                    Some(&semantic),
                    &seeds,
                )?;
                csv.push_str(&format!(
                    "{delta},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    plain[0].0, plain[1].0, plain[2].0, reg[0].0, reg[1].0, reg[2].0
                ));
            }
        }
    }
    let out = paths.ablation(kind.label());
    std::fs::write(&out, csv).map_err(|e| ConpeError::io(out.display().to_string(), e))?;
    Ok(out)
}

/// `report`: collate every JSON/CSV artifact into one summary document.
pub fn cmd_report(config: &RunConfig) -> Result<PathBuf> {
    let paths = RunPaths::new(config);
    let mut reports = serde_json::Map::new();
    let dir = std::fs::read_dir(&paths.root)
        .map_err(|e| ConpeError::io(paths.root.display().to_string(), e))?;
    let mut main_report: Option<serde_json::Value> = None;
    for entry in dir.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("report_") && name.ends_with(".json") {
            let value: serde_json::Value = read_json(&entry.path())?;
            if name == "report_conpe.json" {
                main_report = Some(value.clone());
            }
            reports.insert(name.trim_end_matches(".json").to_string(), value);
        } else if name.starts_with("ablation_") && name.ends_with(".csv") {
            let text = std::fs::read_to_string(entry.path())
                .map_err(|e| ConpeError::io(name.clone(), e))?;
            reports.insert(
                name.trim_end_matches(".csv").to_string(),
                serde_json::Value::String(text),
            );
        }
    }
    let mut summary = serde_json::Map::new();
    summary.insert("config".into(), config.echo());
    summary.insert("config_digest".into(), serde_json::json!(config.digest()));
    summary.insert("seed".into(), serde_json::json!(config.seed));
    if let Some(main) = main_report {
        summary.insert("source".into(), main["source"].clone());
        summary.insert("seen_target".into(), main["seen_target"].clone());
        summary.insert("unseen_target".into(), main["unseen_target"].clone());
    }
    summary.insert("artifacts".into(), serde_json::Value::Object(reports));
    let out = paths.summary();
    write_json(&out, &serde_json::Value::Object(summary))?;
    Ok(out)
}
