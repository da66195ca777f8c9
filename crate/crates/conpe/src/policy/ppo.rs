//! On-policy rollouts, generalized advantage estimation, and the clipped
//! PPO update over the joint (policy, attention) parameters.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::ensemble::AttentionParams;
use crate::error::{ConpeError, Result};
use crate::optim::Adam;
use crate::prompt::PromptPool;
use crate::rng::CounterRng;
use crate::tape::Tape;
use crate::tensor::Mat;
use crate::world::{DomainSpec, Env, GridMap, Task};

use super::{
    act, embed_observation, policy_on_tape, state_on_tape, state_vector, ActMode, EmbeddingSet,
    PolicyParams, StatePath,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PPOConfig {
    pub discount: f64,
    pub gae_parameter: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub steps_per_rollout: usize,
    pub total_env_steps: usize,
    pub update_epochs: usize,
    pub minibatch_size: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            discount: 0.99,
            gae_parameter: 0.95,
            clip: 0.1,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            steps_per_rollout: 500,
            total_env_steps: 200_000,
            update_epochs: 4,
            minibatch_size: 64,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.discount && self.discount <= 1.0) {
            return Err(ConpeError::Config("discount must be in (0, 1]".into()));
        }
        if !(0.0 < self.gae_parameter && self.gae_parameter <= 1.0) {
            return Err(ConpeError::Config("GAE parameter must be in (0, 1]".into()));
        }
        if self.clip <= 0.0 {
            return Err(ConpeError::Config("clip must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.steps_per_rollout == 0 {
            return Err(ConpeError::Config("bad PPO learning config".into()));
        }
        Ok(())
    }
}

/// One stored transition; embeddings are cached so updates never re-encode.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub set: EmbeddingSet,
    pub task_input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
    /// value bootstrap for a rollout cut mid-episode
    pub last_value: f64,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Standard recursive GAE; `last_value` bootstraps the final transition when
/// the rollout was cut before episode end. Returns (advantages, returns).
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discount: f64,
    gae_parameter: f64,
    last_value: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + discount * next_value * not_done - values[t];
        acc = delta + discount * gae_parameter * not_done * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

#[derive(Debug, Clone, Serialize)]
pub struct PpoUpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
}

pub struct RolloutConfig<'a> {
    pub encoder: &'a EncoderParams,
    pub pool: Option<&'a PromptPool>,
    pub maps: &'a [GridMap],
    pub domains: &'a [DomainSpec],
    pub task: Task,
    pub steps: usize,
    pub seed: u64,
}

/// Collect one on-policy rollout across the source domains. Episodes rotate
/// through maps and domains; embeddings are computed once per visited frame
/// (Algorithm-style (z, a, r) storage).
pub fn collect_rollout(
    cfg: &RolloutConfig<'_>,
    policy: &PolicyParams,
    attention: Option<&AttentionParams>,
    path: &StatePath,
) -> Result<RolloutBuffer> {
    let mut rng = CounterRng::from_path(cfg.seed, "ppo/rollout");
    let mut buffer = RolloutBuffer::default();
    let mut episode_idx = 0usize;
    'outer: loop {
        let map = &cfg.maps[episode_idx % cfg.maps.len()];
        let domain = &cfg.domains[episode_idx % cfg.domains.len()];
        let (start, task) =
            crate::world::sample_episode_setup(map, domain, &cfg.task, &mut rng)?;
        let mut env = Env::new(map.clone(), domain.clone(), task, start)?;
        episode_idx += 1;
        loop {
            let obs = env.observe();
            let set = embed_observation(cfg.encoder, cfg.pool, &obs)?;
            let task_input = env.task_input();
            let (state, _) = state_vector(path, &set, attention, None)?;
            let mut input = state.clone();
            input.extend_from_slice(&task_input);
            let (logits, value) = policy.forward(&input);
            if !logits.iter().all(|v| v.is_finite()) {
                return Err(ConpeError::Numeric("non-finite logits in rollout".into()));
            }
            let (action, log_prob) = act(policy, &state, &task_input, ActMode::Sample, &mut rng)?;
            let result = env.step(action)?;
            buffer.steps.push(RolloutStep {
                set,
                task_input,
                action: action.index(),
                log_prob,
                reward: result.reward,
                value,
                done: result.done,
            });
            if buffer.len() >= cfg.steps {
                if !result.done {
                    // bootstrap the cut episode from the value head
                    let obs = env.observe();
                    let set = embed_observation(cfg.encoder, cfg.pool, &obs)?;
                    let (state, _) = state_vector(path, &set, attention, None)?;
                    let mut input = state;
                    input.extend_from_slice(&env.task_input());
                    buffer.last_value = policy.forward(&input).1;
                }
                break 'outer;
            }
            if result.done {
                break;
            }
        }
    }
    Ok(buffer)
}

/// One PPO update over the buffer: clipped surrogate + value + entropy terms,
/// jointly stepping the policy MLP and the attention projections.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut PolicyParams,
    attention: Option<&mut AttentionParams>,
    buffer: &RolloutBuffer,
    config: &PPOConfig,
    path: &StatePath,
    opt_policy: &mut Adam,
    opt_attention: Option<&mut Adam>,
    seed: u64,
) -> Result<PpoUpdateStats> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(ConpeError::Usage("ppo_update on empty buffer".into()));
    }
    let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = buffer.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = buffer.steps.iter().map(|s| s.done).collect();
    let (advantages, returns) = gae_advantages(
        &rewards,
        &values,
        &dones,
        config.discount,
        config.gae_parameter,
        buffer.last_value,
    );

    let mut attention = attention;
    let mut opt_attention = opt_attention;
    let mut rng = CounterRng::from_path(seed, "ppo/minibatch");
    let mut last_stats = None;
    for _epoch in 0..config.update_epochs.max(1) {
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.minibatch_size.max(1)) {
            let stats = ppo_minibatch(
                policy,
                attention.as_deref_mut(),
                buffer,
                &advantages,
                &returns,
                chunk,
                config,
                path,
                opt_policy,
                opt_attention.as_deref_mut(),
            )?;
            last_stats = Some(stats);
        }
    }
    policy.check_finite()?;
    Ok(last_stats.expect("at least one minibatch"))
}

#[allow(clippy::too_many_arguments)]
fn ppo_minibatch(
    policy: &mut PolicyParams,
    mut attention: Option<&mut AttentionParams>,
    buffer: &RolloutBuffer,
    advantages: &[f64],
    returns: &[f64],
    idxs: &[usize],
    config: &PPOConfig,
    path: &StatePath,
    opt_policy: &mut Adam,
    opt_attention: Option<&mut Adam>,
    ) -> Result<PpoUpdateStats> {
    let b = idxs.len();
    let mut tape = Tape::new();
    let sets: Vec<&EmbeddingSet> = idxs.iter().map(|&i| &buffer.steps[i].set).collect();
    let trainable_attn = matches!(path, StatePath::Guided | StatePath::PolicyPrompt);
    let (z, path_vars, _) = state_on_tape(
        &mut tape,
        path,
        &sets,
        attention.as_deref(),
        None,
        trainable_attn,
    )?;
    let task_dim = buffer.steps[idxs[0]].task_input.len();
    let task_mat = Mat::from_vec(
        b,
        task_dim,
        idxs.iter().flat_map(|&i| buffer.steps[i].task_input.iter().copied()).collect(),
    );
    let task = tape.constant(task_mat);
    let input = tape.concat_cols(&[z, task]);
    let (logits, value, policy_vars) = policy_on_tape(&mut tape, policy, input, true);

    let actions: Vec<usize> = idxs.iter().map(|&i| buffer.steps[i].action).collect();
    let lse = tape.logsumexp_rows(logits);
    let picked = tape.row_gather(logits, &actions);
    let logp = tape.sub(picked, lse);
    let logp_old = tape.constant(Mat::from_vec(
        b,
        1,
        idxs.iter().map(|&i| buffer.steps[i].log_prob).collect(),
    ));
    let diff = tape.sub(logp, logp_old);
    let ratio = tape.exp(diff);
    let adv = tape.constant(Mat::from_vec(b, 1, idxs.iter().map(|&i| advantages[i]).collect()));
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min_elem(surr1, surr2);
    let surr_sum = tape.sum_all(surr);
    let policy_loss = tape.scale(surr_sum, -1.0 / b as f64);

    let ret = tape.constant(Mat::from_vec(b, 1, idxs.iter().map(|&i| returns[i]).collect()));
    let verr = tape.sub(value, ret);
    let vsq = tape.mul(verr, verr);
    let vsum = tape.sum_all(vsq);
    let value_loss = tape.scale(vsum, 0.5 / b as f64);

    // entropy = lse - sum_a p_a * logit_a, per row
    let probs = tape.softmax_rows(logits);
    let plogit = tape.row_dot(probs, logits);
    let ent_col = tape.sub(lse, plogit);
    let ent_sum = tape.sum_all(ent_col);
    let entropy = tape.scale(ent_sum, 1.0 / b as f64);

    let vterm = tape.scale(value_loss, config.value_coef);
    let eterm = tape.scale(entropy, -config.entropy_coef);
    let partial = tape.add(policy_loss, vterm);
    let total = tape.add(partial, eterm);

    let total_value = tape.scalar_value(total);
    if !total_value.is_finite() {
        return Err(ConpeError::Numeric("non-finite PPO loss".into()));
    }
    let grads = tape.backward(total);

    let policy_grads: Vec<Mat> = policy_vars
        .iter()
        .zip(policy.mats())
        .map(|(v, m)| grads.get(*v, m))
        .collect();
    let mut policy_mats = policy.mats_mut();
    opt_policy.update(&mut policy_mats, &policy_grads);

    if trainable_attn {
        if let (Some(attn), Some(opt)) = (attention.as_deref_mut(), opt_attention) {
            let attn_grads: Vec<Mat> = path_vars
                .proj
                .iter()
                .zip(attn.proj.iter().chain(attn.proj_hidden.iter().flatten()))
                .map(|(v, m)| grads.get(*v, m))
                .collect();
            let mut mats: Vec<&mut Mat> = attn
                .proj
                .iter_mut()
                .chain(attn.proj_hidden.iter_mut().flatten())
                .collect();
            opt.update(&mut mats, &attn_grads);
        }
    }

    Ok(PpoUpdateStats {
        policy_loss: tape.scalar_value(policy_loss),
        value_loss: tape.scalar_value(value_loss),
        entropy: tape.scalar_value(entropy),
        total_loss: total_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_case() {
        // r = [0, 0, 1], v = 0, gamma = 0.99, lambda = 0.95:
        // direct unrolled sums give [(0.9405)^2, 0.9405, 1.0]
        let (adv, ret) = gae_advantages(
            &[0.0, 0.0, 1.0],
            &[0.0, 0.0, 0.0],
            &[false, false, true],
            0.99,
            0.95,
            0.0,
        );
        let gl = 0.99 * 0.95;
        let expected = [gl * gl, gl, 1.0];
        for (a, e) in adv.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // direct summation oracle: A_t = sum_l (gamma*lambda)^l delta_{t+l}
        let deltas = [0.0, 0.0, 1.0];
        for t in 0..3 {
            let mut s = 0.0;
            for (l, d) in deltas.iter().enumerate().skip(t) {
                s += gl.powi((l - t) as i32) * d;
            }
            assert!((adv[t] - s).abs() < 1e-12);
        }
        for (r, (a, v)) in ret.iter().zip(adv.iter().zip([0.0, 0.0, 0.0])) {
            assert!((r - (a + v)).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_gamma_lambda_one_is_reward_to_go_minus_value() {
        let rewards = [0.5, -0.2, 1.0, 0.1];
        let values = [0.3, 0.7, -0.1, 0.2];
        let dones = [false, false, false, true];
        let (adv, _) = gae_advantages(&rewards, &values, &dones, 1.0, 1.0, 0.0);
        for t in 0..4 {
            let tail: f64 = rewards[t..].iter().sum();
            assert!((adv[t] - (tail - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_all_zero_is_zero() {
        let (adv, ret) =
            gae_advantages(&[0.0; 5], &[0.0; 5], &[false, false, false, false, true], 0.99, 0.95, 0.0);
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(ret.iter().all(|&r| r == 0.0));
    }

    fn dummy_step(set_seed: u64, action: usize, log_prob: f64, reward: f64) -> RolloutStep {
        let mut rng = CounterRng::from_path(set_seed, "ppo-test/set");
        RolloutStep {
            set: EmbeddingSet {
                z0: (0..6).map(|_| rng.gaussian()).collect(),
                zs: vec![],
            },
            task_input: vec![1.0, 0.0, 0.0, 0.0],
            action,
            log_prob,
            reward,
            value: 0.0,
            done: true,
        }
    }

    #[test]
    fn zero_advantage_zero_entropy_leaves_params_unchanged() {
        let mut policy = PolicyParams::init(10, 3);
        let before = policy.clone();
        // all rewards zero, values zero -> advantages zero, returns zero ->
        // value targets equal values; log_prob consistent with current policy
        let mut steps = Vec::new();
        for i in 0..4 {
            let mut s = dummy_step(i, (i % 4) as usize, 0.0, 0.0);
            let mut input = s.set.z0.clone();
            input.extend_from_slice(&s.task_input);
            let (logits, value) = policy.forward(&input);
            let probs = crate::tensor::softmax(&logits);
            s.log_prob = probs[s.action].ln();
            s.value = value;
            // zero advantage requires reward + discount*next*(1-done) = value;
            // with done=true this means reward = value
            s.reward = value;
            steps.push(s);
        }
        let buffer = RolloutBuffer { steps, last_value: 0.0 };
        let config = PPOConfig {
            entropy_coef: 0.0,
            update_epochs: 1,
            minibatch_size: 4,
            ..Default::default()
        };
        let mut opt = Adam::new(config.learning_rate, &policy.shapes());
        ppo_update(
            &mut policy,
            None,
            &buffer,
            &config,
            &StatePath::Control,
            &mut opt,
            None,
            7,
        )
        .unwrap();
        for (a, b) in policy.mats().iter().zip(before.mats()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "parameter moved: {x} vs {y}");
            }
        }
    }

    #[test]
    fn clipped_ratio_contributes_zero_policy_gradient() {
        // one sample with ratio far outside [0.9, 1.1] and positive advantage:
        // min(r*A, clip(r)*A) picks the constant clipped branch
        let policy = PolicyParams::init(10, 3);
        let mut s = dummy_step(0, 1, 0.0, 1.0);
        let mut input = s.set.z0.clone();
        input.extend_from_slice(&s.task_input);
        let (logits, _) = policy.forward(&input);
        let probs = crate::tensor::softmax(&logits);
        // log_prob_old much lower than current: ratio = p/p_old >> 1.1
        s.log_prob = probs[s.action].ln() - 1.0;
        s.value = 0.0;
        s.reward = 1.0; // advantage = 1 - 0 = 1 > 0
        let buffer = RolloutBuffer { steps: vec![s], last_value: 0.0 };

        // gradient of the surrogate alone w.r.t. logits should be zero; use
        // value_coef = 0 and entropy_coef = 0 to isolate it
        let config = PPOConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            update_epochs: 1,
            minibatch_size: 1,
            ..Default::default()
        };
        let mut p2 = policy.clone();
        let before = p2.clone();
        let mut opt = Adam::new(config.learning_rate, &p2.shapes());
        ppo_update(
            &mut p2,
            None,
            &buffer,
            &config,
            &StatePath::Control,
            &mut opt,
            None,
            7,
        )
        .unwrap();
        for (a, b) in p2.mats().iter().zip(before.mats()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bandit_advantage_increases_action_probability() {
        // bandit-like buffer: action 2 always has advantage +1
        for seed in [3u64, 5, 9] {
            let mut policy = PolicyParams::init(10, seed);
            let mut steps = Vec::new();
            for i in 0..16 {
                let mut s = dummy_step(i + 100 * seed, 2, 0.0, 1.0);
                let mut input = s.set.z0.clone();
                input.extend_from_slice(&s.task_input);
                let (logits, _) = policy.forward(&input);
                let probs = crate::tensor::softmax(&logits);
                s.log_prob = probs[2].ln();
                s.value = 0.0;
                s.reward = 1.0;
                steps.push(s);
            }
            let buffer = RolloutBuffer { steps: steps.clone(), last_value: 0.0 };
            let config = PPOConfig { update_epochs: 1, minibatch_size: 16, ..Default::default() };
            let mean_prob = |p: &PolicyParams| {
                steps
                    .iter()
                    .map(|s| {
                        let mut input = s.set.z0.clone();
                        input.extend_from_slice(&s.task_input);
                        let (logits, _) = p.forward(&input);
                        crate::tensor::softmax(&logits)[2]
                    })
                    .sum::<f64>()
                    / steps.len() as f64
            };
            let before = mean_prob(&policy);
            let mut opt = Adam::new(config.learning_rate, &policy.shapes());
            ppo_update(
                &mut policy,
                None,
                &buffer,
                &config,
                &StatePath::Control,
                &mut opt,
                None,
                seed,
            )
            .unwrap();
            let after = mean_prob(&policy);
            assert!(after > before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn rollout_collects_requested_steps() {
        use crate::encoder::{init_encoder, EncoderConfig};
        use crate::world::generate_map;
        let encoder = init_encoder(&EncoderConfig { seed: 5, n_layers: 1, ..Default::default() })
            .unwrap();
        let map = generate_map(1, 7).unwrap();
        let policy = PolicyParams::init(68, 3);
        let cfg = RolloutConfig {
            encoder: &encoder,
            pool: None,
            maps: &[map],
            domains: &[DomainSpec::canonical()],
            task: Task::ObjectGoal { color: 0 },
            steps: 30,
            seed: 11,
        };
        let buffer = collect_rollout(&cfg, &policy, None, &StatePath::Control).unwrap();
        assert_eq!(buffer.len(), 30);
        // entropy of a fresh policy is near-uniform, so log probs are ~ln(1/4)
        for s in &buffer.steps {
            assert!(s.log_prob <= 0.0);
            assert!(s.set.zs.is_empty());
        }
    }
}
