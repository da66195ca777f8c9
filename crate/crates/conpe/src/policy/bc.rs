//! Imitation: behavior cloning, the DAGGER loop, and the policy-prompt
//! adaptation of the ensemble to a frozen pretrained policy.

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_on_tape, EncoderParams};
use crate::ensemble::{ensemble_on_tape, AttentionParams, VariantWeights};
use crate::error::{ConpeError, Result};
use crate::optim::Adam;
use crate::prompt::PromptPool;
use crate::rng::CounterRng;
use crate::tape::Tape;
use crate::tensor::Mat;
use crate::world::{
    expert_action, AgentState, DomainSpec, Env, EpisodeDataset, GridMap, Task,
};

use super::{
    act, embed_observation, policy_on_tape, state_on_tape, state_vector, ActMode, EmbeddingSet,
    PolicyParams, StatePath,
};

/// One supervised sample: cached embeddings, task conditioning, expert label.
#[derive(Debug, Clone)]
pub struct BcSample {
    pub set: EmbeddingSet,
    pub task_input: Vec<f64>,
    pub expert_action: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BcBatch {
    pub samples: Vec<BcSample>,
}

impl BcBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Embed a dataset's frames for supervised training.
    pub fn from_dataset(
        dataset: &EpisodeDataset,
        maps: &[GridMap],
        encoder: &EncoderParams,
        pool: Option<&PromptPool>,
    ) -> Result<BcBatch> {
        let mut samples = Vec::with_capacity(dataset.total_frames());
        for ep in &dataset.episodes {
            // the map used during collection is unknown here; task input for
            // ObjectGoal does not depend on the map, so any map works for the
            // one-hot. PointGoal datasets carry per-episode targets instead.
            let map = &maps[0];
            for t in 0..ep.len() {
                let obs = ep.frame_image(t)?;
                let set = embed_observation(encoder, pool, &obs)?;
                let task_input = dataset
                    .manifest
                    .task
                    .input_vector(map, &AgentState { x: 0, y: 0, heading_deg: 0 });
                samples.push(BcSample {
                    set,
                    task_input,
                    expert_action: ep.actions[t].index(),
                });
            }
        }
        Ok(BcBatch { samples })
    }
}

/// Cross-entropy between the policy distribution and the expert action;
/// gradients flow into the policy MLP and (on guided paths) the attention
/// projections. Returns the mean loss.
pub fn bc_update(
    policy: &mut PolicyParams,
    attention: Option<&mut AttentionParams>,
    weights: Option<&mut VariantWeights>,
    batch: &[&BcSample],
    path: &StatePath,
    opt_policy: Option<&mut Adam>,
    opt_attention: Option<&mut Adam>,
    opt_weights: Option<&mut Adam>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(ConpeError::Usage("bc_update on empty batch".into()));
    }
    let b = batch.len();
    let mut tape = Tape::new();
    let sets: Vec<&EmbeddingSet> = batch.iter().map(|s| &s.set).collect();
    let train_attn = matches!(path, StatePath::Guided | StatePath::PolicyPrompt)
        && attention.is_some()
        && opt_attention.is_some();
    let train_weights = weights.is_some() && opt_weights.is_some();
    let (z, path_vars, _) = state_on_tape(
        &mut tape,
        path,
        &sets,
        attention.as_deref(),
        weights.as_deref(),
        train_attn || train_weights,
    )?;
    let task_dim = batch[0].task_input.len();
    let task = tape.constant(Mat::from_vec(
        b,
        task_dim,
        batch.iter().flat_map(|s| s.task_input.iter().copied()).collect(),
    ));
    let input = tape.concat_cols(&[z, task]);
    let train_policy = opt_policy.is_some();
    let (logits, _, policy_vars) = policy_on_tape(&mut tape, policy, input, train_policy);
    let actions: Vec<usize> = batch.iter().map(|s| s.expert_action).collect();
    let lse = tape.logsumexp_rows(logits);
    let picked = tape.row_gather(logits, &actions);
    let nll = tape.sub(lse, picked);
    let total = tape.sum_all(nll);
    let loss = tape.scale(total, 1.0 / b as f64);
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(ConpeError::Numeric("non-finite BC loss".into()));
    }
    let grads = tape.backward(loss);

    if let Some(opt) = opt_policy {
        let gs: Vec<Mat> = policy_vars
            .iter()
            .zip(policy.mats())
            .map(|(v, m)| grads.get(*v, m))
            .collect();
        let mut mats = policy.mats_mut();
        opt.update(&mut mats, &gs);
    }
    if train_attn {
        if let (Some(attn), Some(opt)) = (attention, opt_attention) {
            let gs: Vec<Mat> = path_vars
                .proj
                .iter()
                .zip(attn.proj.iter().chain(attn.proj_hidden.iter().flatten()))
                .map(|(v, m)| grads.get(*v, m))
                .collect();
            let mut mats: Vec<&mut Mat> =
                attn.proj.iter_mut().chain(attn.proj_hidden.iter_mut().flatten()).collect();
            opt.update(&mut mats, &gs);
        }
    }
    if train_weights {
        if let (Some(w), Some(opt), Some(wv)) = (weights, opt_weights, path_vars.variant_weights) {
            let g = grads.get(wv, &w.0);
            opt.update(&mut [&mut w.0], &[g]);
        }
    }
    Ok(loss_value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerConfig {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub bc_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            rounds: 3,
            steps_per_round: 400,
            bc_epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

pub struct DaggerContext<'a> {
    pub encoder: &'a EncoderParams,
    pub pool: Option<&'a PromptPool>,
    pub maps: &'a [GridMap],
    pub domains: &'a [DomainSpec],
    pub task: Task,
    /// observation -> embedding set; defaults to `embed_observation` over the
    /// context's pool when absent (COM paths install a combined-prompt embedder)
    #[allow(clippy::type_complexity)]
    pub embed: Option<&'a (dyn Fn(&crate::encoder::ImageTensor) -> Result<EmbeddingSet> + Sync)>,
}

impl DaggerContext<'_> {
    fn embed_obs(&self, obs: &crate::encoder::ImageTensor) -> Result<EmbeddingSet> {
        match self.embed {
            Some(f) => f(obs),
            None => embed_observation(self.encoder, self.pool, obs),
        }
    }
}

/// Per-prompt noise augmentation applied to training batches (the semantic
/// regularization hook of the policy-learning phase).
pub struct NoiseHook<'a> {
    pub config: &'a crate::semantic::NoiseConfig,
    /// description embeddings per prompt; None = unregularized noise
    pub desc_embeddings: Option<&'a [Vec<Vec<f64>>]>,
    pub seed: u64,
}

/// One DAGGER round: roll out the beta-mixture of expert and policy, relabel
/// every visited state with the expert action, aggregate, then run BC epochs
/// over the aggregate. Returns the round's final BC loss.
#[allow(clippy::too_many_arguments)]
pub fn dagger_round(
    policy: &mut PolicyParams,
    attention: Option<&mut AttentionParams>,
    weights: Option<&mut VariantWeights>,
    ctx: &DaggerContext<'_>,
    aggregate: &mut BcBatch,
    beta: f64,
    config: &DaggerConfig,
    path: &StatePath,
    round_seed: u64,
    opt_policy: &mut Adam,
    opt_attention: Option<&mut Adam>,
    opt_weights: Option<&mut Adam>,
    noise: Option<&NoiseHook<'_>>,
) -> Result<f64> {
    let mut rng = CounterRng::from_path(round_seed, "dagger/rollout");
    let mut collected = 0usize;
    let mut episode_idx = 0usize;
    while collected < config.steps_per_round {
        let map = &ctx.maps[episode_idx % ctx.maps.len()];
        let domain = &ctx.domains[episode_idx % ctx.domains.len()];
        episode_idx += 1;
        let (start, task) =
            crate::world::sample_episode_setup(map, domain, &ctx.task, &mut rng)?;
        let mut env = Env::new(map.clone(), domain.clone(), task, start)?;
        while !env.is_done() && collected < config.steps_per_round {
            let obs = env.observe();
            let set = ctx.embed_obs(&obs)?;
            let task_input = env.task_input();
            // the mixture policy can strand the agent where the goal is no
            // longer reachable (stride-2 parity); end the episode there
            let expert = match expert_action(map, env.state(), &env.task(), domain) {
                Ok(a) => a,
                Err(ConpeError::Planner(_)) => break,
                Err(e) => return Err(e),
            };
            aggregate.samples.push(BcSample {
                set: set.clone(),
                task_input: task_input.clone(),
                expert_action: expert.index(),
            });
            collected += 1;
            // beta-mixture control
            let action = if rng.uniform() < beta {
                expert
            } else {
                let (state, _) = state_vector(path, &set, attention.as_deref(), weights.as_deref())?;
                act(policy, &state, &task_input, ActMode::Sample, &mut rng)?.0
            };
            env.step(action)?;
        }
    }

    // BC over the aggregate, with optional per-batch noise augmentation
    let mut loss = f64::NAN;
    let mut order_rng = CounterRng::from_path(round_seed, "dagger/batches");
    let mut attention = attention;
    let mut weights = weights;
    let mut opt_attention = opt_attention;
    let mut opt_weights = opt_weights;
    let mut noise_counter = 0u64;
    for _ in 0..config.bc_epochs {
        let mut order: Vec<usize> = (0..aggregate.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let augmented: Option<Vec<BcSample>> = noise.map(|hook| {
                let mut samples: Vec<BcSample> =
                    chunk.iter().map(|&i| aggregate.samples[i].clone()).collect();
                noise_counter += 1;
                let mut sets: Vec<crate::policy::EmbeddingSet> =
                    samples.iter().map(|s| s.set.clone()).collect();
                let _ = crate::semantic::augment_embedding_sets(
                    &mut sets,
                    hook.desc_embeddings,
                    hook.config,
                    hook.seed ^ round_seed.wrapping_add(noise_counter),
                );
                for (s, set) in samples.iter_mut().zip(sets) {
                    s.set = set;
                }
                samples
            });
            let batch: Vec<&BcSample> = match &augmented {
                Some(samples) => samples.iter().collect(),
                None => chunk.iter().map(|&i| &aggregate.samples[i]).collect(),
            };
            loss = bc_update(
                policy,
                attention.as_deref_mut(),
                weights.as_deref_mut(),
                &batch,
                path,
                Some(opt_policy),
                opt_attention.as_deref_mut(),
                opt_weights.as_deref_mut(),
            )?;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// fresh expert-labelled samples to collect (the 10%-budget knob)
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            samples: 120,
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-3,
            prompt_len: crate::prompt::DEFAULT_PROMPT_LEN,
            seed: 0,
        }
    }
}

/// Adapt a frozen pretrained policy by training only a policy prompt and a
/// fresh attention module on the path pi(G(z~0, z)), z~0 = T(o, p_pol).
///
/// The policy bytes are verified unchanged; the expert supplies labels on the
/// source domains within the sample budget.
pub fn adapt_with_policy_prompt(
    policy: &PolicyParams,
    pool: &PromptPool,
    encoder: &EncoderParams,
    ctx: &DaggerContext<'_>,
    config: &AdaptConfig,
) -> Result<(Mat, AttentionParams)> {
    if pool.token_dim() != encoder.config.embed_dim {
        return Err(ConpeError::Validation(format!(
            "pool dim {} != encoder dim {}",
            pool.token_dim(),
            encoder.config.embed_dim
        )));
    }
    let digest_before = policy.digest();
    let d = encoder.config.embed_dim;
    let n = pool.len();

    // fresh trainables
    let mut rng = CounterRng::from_path(config.seed, "adapt/init");
    let mut p_pol = Mat::from_vec(
        config.prompt_len,
        d,
        (0..config.prompt_len * d).map(|_| rng.gaussian_scaled(0.0, 0.02)).collect(),
    );
    let mut attention = AttentionParams::init(n, d, config.seed ^ 0x5ca1_ab1e, false);

    // collect expert-labelled frames from the source domains; embeddings under
    // the pool are cacheable, the p_pol branch is re-encoded per update.
    struct AdaptSample {
        obs: crate::encoder::ImageTensor,
        zs: Vec<Vec<f64>>,
        task_input: Vec<f64>,
        expert_action: usize,
    }
    let mut samples: Vec<AdaptSample> = Vec::with_capacity(config.samples);
    let mut roll_rng = CounterRng::from_path(config.seed, "adapt/rollout");
    let mut episode_idx = 0usize;
    while samples.len() < config.samples {
        let map = &ctx.maps[episode_idx % ctx.maps.len()];
        let domain = &ctx.domains[episode_idx % ctx.domains.len()];
        episode_idx += 1;
        let (start, task) =
            crate::world::sample_episode_setup(map, domain, &ctx.task, &mut roll_rng)?;
        let mut env = Env::new(map.clone(), domain.clone(), task, start)?;
        while !env.is_done() && samples.len() < config.samples {
            let obs = env.observe();
            let set = embed_observation(encoder, Some(pool), &obs)?;
            let expert = expert_action(map, env.state(), &env.task(), domain)?;
            samples.push(AdaptSample {
                obs,
                zs: set.zs,
                task_input: env.task_input(),
                expert_action: expert.index(),
            });
            env.step(expert)?;
        }
    }

    let mut opt = Adam::new(config.learning_rate, &{
        let mut shapes = vec![(p_pol.rows, p_pol.cols)];
        shapes.extend(attention.proj.iter().map(|m| (m.rows, m.cols)));
        shapes
    });

    let mut batch_rng = CounterRng::from_path(config.seed, "adapt/batches");
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let b = chunk.len();
            let mut tape = Tape::new();
            let p_var = tape.param(p_pol.clone());
            // z~0 rows: one prompted forward per sample, all sharing p_var
            let mut z0_rows = Vec::with_capacity(b);
            for &i in chunk {
                z0_rows.push(forward_on_tape(&mut tape, encoder, &samples[i].obs, Some(p_var))?);
            }
            let mut z0 = z0_rows[0];
            for &row in z0_rows.iter().skip(1) {
                z0 = tape.concat_rows(z0, row);
            }
            let zs_vars: Vec<_> = (0..n)
                .map(|pi| {
                    let m = Mat::from_vec(
                        b,
                        d,
                        chunk.iter().flat_map(|&i| samples[i].zs[pi].iter().copied()).collect(),
                    );
                    tape.constant(m)
                })
                .collect();
            let proj_vars: Vec<_> = attention.proj.iter().map(|m| tape.param(m.clone())).collect();
            let (z, _) = ensemble_on_tape(
                &mut tape,
                z0,
                &zs_vars,
                &proj_vars,
                None,
                attention.temperature,
            )?;
            let task_dim = samples[chunk[0]].task_input.len();
            let task = tape.constant(Mat::from_vec(
                b,
                task_dim,
                chunk.iter().flat_map(|&i| samples[i].task_input.iter().copied()).collect(),
            ));
            let input = tape.concat_cols(&[z, task]);
            // frozen policy: constants on the tape
            let (logits, _, _) = policy_on_tape(&mut tape, policy, input, false);
            let actions: Vec<usize> = chunk.iter().map(|&i| samples[i].expert_action).collect();
            let lse = tape.logsumexp_rows(logits);
            let picked = tape.row_gather(logits, &actions);
            let nll = tape.sub(lse, picked);
            let total = tape.sum_all(nll);
            let loss = tape.scale(total, 1.0 / b as f64);
            if !tape.scalar_value(loss).is_finite() {
                return Err(ConpeError::Numeric("non-finite adaptation loss".into()));
            }
            let grads = tape.backward(loss);
            let mut all_grads = vec![grads.get(p_var, &p_pol)];
            all_grads.extend(
                proj_vars.iter().zip(&attention.proj).map(|(v, m)| grads.get(*v, m)),
            );
            let mut mats: Vec<&mut Mat> = vec![&mut p_pol];
            mats.extend(attention.proj.iter_mut());
            opt.update(&mut mats, &all_grads);
        }
    }

    if policy.digest() != digest_before {
        return Err(ConpeError::Validation(
            "policy parameters changed during adaptation".into(),
        ));
    }
    Ok((p_pol, attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn synth_sample(seed: u64, action: usize, d: usize) -> BcSample {
        let mut rng = CounterRng::from_path(seed, "bc-test");
        BcSample {
            set: EmbeddingSet {
                z0: (0..d).map(|_| rng.gaussian()).collect(),
                zs: vec![],
            },
            task_input: vec![0.0, 1.0, 0.0, 0.0],
            expert_action: action,
        }
    }

    #[test]
    fn uniform_logits_give_ln4_loss() {
        // zero weights -> uniform categorical over 4 actions
        let mut policy = PolicyParams::init(10, 3);
        for m in policy.mats_mut() {
            for v in &mut m.data {
                *v = 0.0;
            }
        }
        let sample = synth_sample(1, 2, 6);
        let loss = bc_update(
            &mut policy,
            None,
            None,
            &[&sample],
            &StatePath::Control,
            None,
            None,
            None,
        )
        .unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn matched_expert_has_vanishing_gradient() {
        // drive the logits so the expert action has probability ~1, then the
        // cross-entropy gradient is ~0 and the loss stays put
        let mut policy = PolicyParams::init(10, 3);
        let samples: Vec<BcSample> = (0..4).map(|i| synth_sample(i, 1, 6)).collect();
        let refs: Vec<&BcSample> = samples.iter().collect();
        let mut opt = Adam::new(1e-3, &policy.shapes());
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = bc_update(
                &mut policy,
                None,
                None,
                &refs,
                &StatePath::Control,
                Some(&mut opt),
                None,
                None,
            )
            .unwrap();
        }
        assert!(last < 1e-3, "loss failed to converge: {last}");
        // near the optimum the loss no longer moves much per step
        let before = last;
        let after = bc_update(
            &mut policy,
            None,
            None,
            &refs,
            &StatePath::Control,
            Some(&mut opt),
            None,
            None,
        )
        .unwrap();
        assert!((after - before).abs() < 1e-3);
    }

    #[test]
    fn bc_loss_decreases_over_epochs() {
        let mut policy = PolicyParams::init(10, 7);
        let samples: Vec<BcSample> =
            (0..8).map(|i| synth_sample(i * 3, (i % 4) as usize, 6)).collect();
        let refs: Vec<&BcSample> = samples.iter().collect();
        let mut opt = Adam::new(1e-3, &policy.shapes());
        let first = bc_update(
            &mut policy,
            None,
            None,
            &refs,
            &StatePath::Control,
            Some(&mut opt),
            None,
            None,
        )
        .unwrap();
        let mut last = first;
        for _ in 0..10 {
            last = bc_update(
                &mut policy,
                None,
                None,
                &refs,
                &StatePath::Control,
                Some(&mut opt),
                None,
                None,
            )
            .unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }
}
