//! Policies over fused state embeddings, their training loops, and the
//! checkpoint format.
//!
//! The network is a two-hidden-layer tanh MLP over [Z ++ task input] with an
//! action-logit head and a value head sharing the trunk. Four state paths
//! feed it:
//!
//! - `Control`:      Z = z0 (the no-prompt baseline)
//! - `Guided`:       Z = G(z0, z) via the cosine-guided attention module
//! - `Variant(m)`:   one of the COM/ENS ablation compositions
//! - `PolicyPrompt`: Z = G(z~0, z) with z~0 = encoder(o, policy prompt),
//!   used when adapting the ensemble to a frozen pretrained policy
//!
//! Training never touches the encoder or the prompt pool; the set of
//! parameters an update may change is exactly {policy (when not frozen),
//! attention projections, variant weights, policy prompt}.

mod bc;
mod ppo;

pub use bc::{
    adapt_with_policy_prompt, bc_update, dagger_round, AdaptConfig, BcBatch, BcSample,
    DaggerConfig, DaggerContext, NoiseHook,
};
pub use ppo::{collect_rollout, gae_advantages, ppo_update, PPOConfig, PpoUpdateStats, RolloutBuffer, RolloutConfig, RolloutStep};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{encode, encode_prompted, EncoderParams, ImageTensor};
use crate::ensemble::{ensemble_on_tape, AttentionParams, EnsembleMethod, VariantWeights};
use crate::error::{ConpeError, Result};
use crate::prompt::PromptPool;
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::world::{Action, Task};

pub const POLICY_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatePath {
    Control,
    Guided,
    Variant { method: EnsembleMethod },
    PolicyPrompt,
}

/// MLP weights: input -> 128 -> 128 -> {action logits, value}.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub logits_w: Mat,
    pub logits_b: Mat,
    pub value_w: Mat,
    pub value_b: Mat,
}

impl PolicyParams {
    pub fn init(input_dim: usize, seed: u64) -> Self {
        let h = POLICY_HIDDEN;
        let mk = |path: &str, rows: usize, cols: usize, scale: f64| {
            let mut rng = CounterRng::from_path(seed, path);
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gaussian_scaled(0.0, scale)).collect(),
            )
        };
        // orthogonal-ish scaling keeps tanh activations in range
        PolicyParams {
            w1: mk("policy/w1", h, input_dim, (2.0 / input_dim as f64).sqrt()),
            b1: Mat::zeros(1, h),
            w2: mk("policy/w2", h, h, (2.0 / h as f64).sqrt()),
            b2: Mat::zeros(1, h),
            logits_w: mk("policy/logits", Action::ALL.len(), h, 0.01),
            logits_b: Mat::zeros(1, Action::ALL.len()),
            value_w: mk("policy/value", 1, h, 0.01),
            value_b: Mat::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn mats(&self) -> [&Mat; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.logits_w, &self.logits_b,
            &self.value_w, &self.value_b,
        ]
    }

    pub fn mats_mut(&mut self) -> [&mut Mat; 8] {
        [
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.logits_w,
            &mut self.logits_b, &mut self.value_w, &mut self.value_b,
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for m in self.mats() {
            m.check_finite("policy parameters")?;
        }
        Ok(())
    }

    /// Shapes for optimizer construction, parallel to `mats()`.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.mats().iter().map(|m| (m.rows, m.cols)).collect()
    }

    /// SHA-256 over the policy matrices alone (freezing verification).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for m in self.mats() {
            for v in &m.data {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Plain forward pass: (logits, value).
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, f64) {
        let x = Mat::row_vector(input.to_vec());
        let h1 = x.matmul_nt(&self.w1);
        let h1 = add_row_vec(&h1, &self.b1).map(f64::tanh);
        let h2 = h1.matmul_nt(&self.w2);
        let h2 = add_row_vec(&h2, &self.b2).map(f64::tanh);
        let logits = add_row_vec(&h2.matmul_nt(&self.logits_w), &self.logits_b);
        let value = add_row_vec(&h2.matmul_nt(&self.value_w), &self.value_b);
        (logits.data, value.data[0])
    }
}

fn add_row_vec(a: &Mat, row: &Mat) -> Mat {
    let mut out = a.clone();
    for i in 0..out.rows {
        for j in 0..out.cols {
            *out.at_mut(i, j) += row.data[j];
        }
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// Cached encoder outputs for one observation: the unprompted embedding and
/// one prompted embedding per pool entry. With the encoder and pool frozen,
/// these are computed once per frame and reused by every update.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub z0: Vec<f64>,
    pub zs: Vec<Vec<f64>>,
}

/// Embed an observation under the pool (zs empty when `pool` is None).
pub fn embed_observation(
    encoder: &EncoderParams,
    pool: Option<&PromptPool>,
    obs: &ImageTensor,
) -> Result<EmbeddingSet> {
    let z0 = encode(encoder, obs)?.0;
    let zs = match pool {
        Some(pool) => pool
            .prompts()
            .iter()
            .map(|p| encode_prompted(encoder, obs, &p.tokens).map(|e| e.0))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(EmbeddingSet { z0, zs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Action selection over the fused state + task input.
pub fn act(
    policy: &PolicyParams,
    state: &[f64],
    task_input: &[f64],
    mode: ActMode,
    rng: &mut CounterRng,
) -> Result<(Action, f64)> {
    let mut input = state.to_vec();
    input.extend_from_slice(task_input);
    if input.len() != policy.input_dim() {
        return Err(ConpeError::Shape(format!(
            "policy input {} != expected {}",
            input.len(),
            policy.input_dim()
        )));
    }
    let (logits, _) = policy.forward(&input);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ConpeError::Numeric("non-finite action logits".into()));
    }
    let probs = crate::tensor::softmax(&logits);
    let idx = match mode {
        ActMode::Greedy => {
            probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        }
        ActMode::Sample => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    Ok((Action::from_index(idx)?, probs[idx].ln()))
}

/// Trainable leaves referenced by a state-path tape build.
pub struct PathVars {
    pub proj: Vec<Var>,
    pub variant_weights: Option<Var>,
}

/// Build the batched fused state Z (B x d) on the tape for embedding-cached
/// paths. COM-WEI and the policy-prompt path need the encoder and are built
/// by their dedicated trainers.
pub fn state_on_tape(
    tape: &mut Tape,
    path: &StatePath,
    sets: &[&EmbeddingSet],
    attention: Option<&AttentionParams>,
    weights: Option<&VariantWeights>,
    trainable: bool,
) -> Result<(Var, PathVars, Option<Var>)> {
    let batch = sets.len();
    let d = sets[0].z0.len();
    let z0_mat = Mat::from_vec(
        batch,
        d,
        sets.iter().flat_map(|s| s.z0.iter().copied()).collect(),
    );
    let z0 = tape.constant(z0_mat);
    let n = sets[0].zs.len();
    let zs_vars: Vec<Var> = (0..n)
        .map(|i| {
            let m = Mat::from_vec(
                batch,
                d,
                sets.iter().flat_map(|s| s.zs[i].iter().copied()).collect(),
            );
            tape.constant(m)
        })
        .collect();

    match path {
        StatePath::Control => Ok((z0, PathVars { proj: vec![], variant_weights: None }, None)),
        StatePath::Guided | StatePath::PolicyPrompt => {
            let attn = attention
                .ok_or_else(|| ConpeError::Usage("guided path needs attention params".into()))?;
            if attn.n() != n {
                return Err(ConpeError::Shape(format!(
                    "attention over {} prompts but {} embeddings",
                    attn.n(),
                    n
                )));
            }
            let proj: Vec<Var> = attn
                .proj
                .iter()
                .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
                .collect();
            let hidden: Option<Vec<Var>> = attn.proj_hidden.as_ref().map(|hs| {
                hs.iter()
                    .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
                    .collect()
            });
            let (z, omega) = ensemble_on_tape(
                tape,
                z0,
                &zs_vars,
                &proj,
                hidden.as_deref(),
                attn.temperature,
            )?;
            let mut vars = proj;
            if let Some(h) = hidden {
                vars.extend(h);
            }
            Ok((z, PathVars { proj: vars, variant_weights: None }, Some(omega)))
        }
        StatePath::Variant { method } => match method {
            EnsembleMethod::EnsUniAvg => {
                let mut z = z0;
                for &zi in &zs_vars {
                    let term = tape.scale(zi, 1.0 / n as f64);
                    z = tape.add(z, term);
                }
                Ok((z, PathVars { proj: vec![], variant_weights: None }, None))
            }
            EnsembleMethod::EnsWeiAvg => {
                let w = weights
                    .ok_or_else(|| ConpeError::Usage("ENS-WEI-AVG needs weights".into()))?;
                let wv = if trainable { tape.param(w.0.clone()) } else { tape.constant(w.0.clone()) };
                let sm = tape.softmax_rows(wv);
                let mut z = z0;
                for (i, &zi) in zs_vars.iter().enumerate() {
                    let wi = tape.slice_cols(sm, i, i + 1);
                    let term = tape.mul_scalar(zi, wi);
                    z = tape.add(z, term);
                }
                Ok((z, PathVars { proj: vec![], variant_weights: Some(wv) }, None))
            }
            // COM variants use cached combined-prompt embeddings stored in
            // zs[0] by their trainer
            EnsembleMethod::ComUniAvg | EnsembleMethod::ComWeiAvg => {
                let zc = zs_vars.first().copied().ok_or_else(|| {
                    ConpeError::Usage("COM path needs the combined-prompt embedding cached".into())
                })?;
                let z = tape.add(z0, zc);
                Ok((z, PathVars { proj: vec![], variant_weights: None }, None))
            }
        },
    }
}

/// Policy MLP on the tape: returns (logits B x |A|, value B x 1) and the
/// parameter leaves (params when `trainable`, constants otherwise).
pub fn policy_on_tape(
    tape: &mut Tape,
    policy: &PolicyParams,
    input: Var,
    trainable: bool,
) -> (Var, Var, Vec<Var>) {
    let mut leaf = |m: &Mat| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
    let w1 = leaf(&policy.w1);
    let b1 = leaf(&policy.b1);
    let w2 = leaf(&policy.w2);
    let b2 = leaf(&policy.b2);
    let lw = leaf(&policy.logits_w);
    let lb = leaf(&policy.logits_b);
    let vw = leaf(&policy.value_w);
    let vb = leaf(&policy.value_b);
    let h1 = tape.matmul_nt(input, w1);
    let h1 = tape.add_row(h1, b1);
    let h1 = tape.tanh(h1);
    let h2 = tape.matmul_nt(h1, w2);
    let h2 = tape.add_row(h2, b2);
    let h2 = tape.tanh(h2);
    let logits = tape.matmul_nt(h2, lw);
    let logits = tape.add_row(logits, lb);
    let value = tape.matmul_nt(h2, vw);
    let value = tape.add_row(value, vb);
    (logits, value, vec![w1, b1, w2, b2, lw, lb, vw, vb])
}

/// Fused state for one observation outside any tape (evaluation path).
pub fn state_vector(
    path: &StatePath,
    set: &EmbeddingSet,
    attention: Option<&AttentionParams>,
    weights: Option<&VariantWeights>,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    match path {
        StatePath::Control => Ok((set.z0.clone(), None)),
        StatePath::Guided | StatePath::PolicyPrompt => {
            let attn = attention
                .ok_or_else(|| ConpeError::Usage("guided path needs attention params".into()))?;
            let state = crate::ensemble::guided_state(&set.z0, &set.zs, attn)?;
            Ok((state.z, Some(state.omega)))
        }
        StatePath::Variant { method } => match method {
            EnsembleMethod::EnsUniAvg => {
                let n = set.zs.len() as f64;
                let mut z = set.z0.clone();
                for zi in &set.zs {
                    for (a, v) in z.iter_mut().zip(zi) {
                        *a += v / n;
                    }
                }
                Ok((z, None))
            }
            EnsembleMethod::EnsWeiAvg => {
                let w = weights
                    .ok_or_else(|| ConpeError::Usage("ENS-WEI-AVG needs weights".into()))?;
                let sm = crate::tensor::softmax(&w.0.data);
                let mut z = set.z0.clone();
                for (wi, zi) in sm.iter().zip(&set.zs) {
                    for (a, v) in z.iter_mut().zip(zi) {
                        *a += wi * v;
                    }
                }
                Ok((z, Some(sm)))
            }
            EnsembleMethod::ComUniAvg | EnsembleMethod::ComWeiAvg => {
                let zc = set.zs.first().ok_or_else(|| {
                    ConpeError::Usage("COM path needs the combined-prompt embedding cached".into())
                })?;
                let z = set.z0.iter().zip(zc).map(|(a, b)| a + b).collect();
                Ok((z, None))
            }
        },
    }
}

// ---------------------------------------------------------------------------
// checkpoint: CONPE-CKPT magic, version, JSON header (shape table + digests +
// config echo), then f32 matrix data in header order.
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 12] = b"CONPE-CKPT\0\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    state_path: StatePath,
    temperature: f64,
    task: Task,
    encoder_digest: String,
    pool_digest: String,
    config_echo: serde_json::Value,
    mats: Vec<MatEntry>,
}

/// Everything needed to run a trained policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: PolicyParams,
    pub attention: Option<AttentionParams>,
    pub policy_prompt: Option<Mat>,
    pub variant_weights: Option<VariantWeights>,
    pub state_path: StatePath,
    pub task: Task,
    pub encoder_digest: String,
    pub pool_digest: String,
    pub config_echo: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Mat)> = vec![
            ("policy/w1".into(), &self.policy.w1),
            ("policy/b1".into(), &self.policy.b1),
            ("policy/w2".into(), &self.policy.w2),
            ("policy/b2".into(), &self.policy.b2),
            ("policy/logits_w".into(), &self.policy.logits_w),
            ("policy/logits_b".into(), &self.policy.logits_b),
            ("policy/value_w".into(), &self.policy.value_w),
            ("policy/value_b".into(), &self.policy.value_b),
        ];
        if let Some(attn) = &self.attention {
            for (i, m) in attn.proj.iter().enumerate() {
                named.push((format!("attention/proj{i}"), m));
            }
            if let Some(hs) = &attn.proj_hidden {
                for (i, m) in hs.iter().enumerate() {
                    named.push((format!("attention/hidden{i}"), m));
                }
            }
        }
        if let Some(p) = &self.policy_prompt {
            named.push(("policy_prompt".into(), p));
        }
        if let Some(w) = &self.variant_weights {
            named.push(("variant_weights".into(), &w.0));
        }
        let header = CkptHeader {
            version: CKPT_VERSION,
            state_path: self.state_path,
            temperature: self.attention.as_ref().map_or(1.0, |a| a.temperature),
            task: self.task,
            encoder_digest: self.encoder_digest.clone(),
            pool_digest: self.pool_digest.clone(),
            config_echo: self.config_echo.clone(),
            mats: named
                .iter()
                .map(|(name, m)| MatEntry { name: name.clone(), rows: m.rows, cols: m.cols })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, m) in &named {
            for v in &m.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(buf: &[u8], origin: &str) -> Result<Self> {
        if buf.len() < 20 || &buf[..12] != CKPT_MAGIC {
            return Err(ConpeError::format(origin, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]);
        if version != CKPT_VERSION {
            return Err(ConpeError::format(origin, "unsupported checkpoint version"));
        }
        let hlen = u32::from_le_bytes([buf[16], buf[17], buf[18], buf[19]]) as usize;
        if 20 + hlen > buf.len() {
            return Err(ConpeError::format(origin, "truncated checkpoint header"));
        }
        let header: CkptHeader = serde_json::from_slice(&buf[20..20 + hlen])
            .map_err(|e| ConpeError::Json { path: origin.to_string(), source: e })?;
        let mut off = 20 + hlen;
        let mut mats: Vec<(String, Mat)> = Vec::with_capacity(header.mats.len());
        for entry in &header.mats {
            let need = entry.rows * entry.cols * 4;
            if off + need > buf.len() {
                return Err(ConpeError::format(origin, "truncated checkpoint matrices"));
            }
            let mut data = Vec::with_capacity(entry.rows * entry.cols);
            for i in 0..entry.rows * entry.cols {
                let s = off + i * 4;
                data.push(f64::from(f32::from_le_bytes([
                    buf[s],
                    buf[s + 1],
                    buf[s + 2],
                    buf[s + 3],
                ])));
            }
            off += need;
            mats.push((entry.name.clone(), Mat::from_vec(entry.rows, entry.cols, data)));
        }
        if off != buf.len() {
            return Err(ConpeError::format(origin, "trailing checkpoint bytes"));
        }
        let take = |name: &str| -> Result<Mat> {
            mats.iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| ConpeError::format(origin, format!("missing matrix {name}")))
        };
        let policy = PolicyParams {
            w1: take("policy/w1")?,
            b1: take("policy/b1")?,
            w2: take("policy/w2")?,
            b2: take("policy/b2")?,
            logits_w: take("policy/logits_w")?,
            logits_b: take("policy/logits_b")?,
            value_w: take("policy/value_w")?,
            value_b: take("policy/value_b")?,
        };
        let proj: Vec<Mat> = (0..)
            .map_while(|i| {
                mats.iter().find(|(n, _)| n == &format!("attention/proj{i}")).map(|(_, m)| m.clone())
            })
            .collect();
        let hidden: Vec<Mat> = (0..)
            .map_while(|i| {
                mats.iter()
                    .find(|(n, _)| n == &format!("attention/hidden{i}"))
                    .map(|(_, m)| m.clone())
            })
            .collect();
        let attention = (!proj.is_empty()).then(|| AttentionParams {
            proj,
            proj_hidden: (!hidden.is_empty()).then_some(hidden),
            temperature: header.temperature,
        });
        let policy_prompt = mats.iter().find(|(n, _)| n == "policy_prompt").map(|(_, m)| m.clone());
        let variant_weights = mats
            .iter()
            .find(|(n, _)| n == "variant_weights")
            .map(|(_, m)| VariantWeights(m.clone()));
        Ok(Checkpoint {
            policy,
            attention,
            policy_prompt,
            variant_weights,
            state_path: header.state_path,
            task: header.task,
            encoder_digest: header.encoder_digest,
            pool_digest: header.pool_digest,
            config_echo: header.config_echo,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| ConpeError::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| ConpeError::io(path.display().to_string(), e))?;
        Self::from_bytes(&buf, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_act_is_argmax() {
        let policy = PolicyParams::init(8, 3);
        let mut rng = CounterRng::from_path(1, "act");
        let state = vec![0.3; 4];
        let task = vec![1.0, 0.0, 0.0, 0.0];
        let (a, logp) = act(&policy, &state, &task, ActMode::Greedy, &mut rng).unwrap();
        let mut input = state.clone();
        input.extend_from_slice(&task);
        let (logits, _) = policy.forward(&input);
        let best = logits
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(a.index(), best);
        assert!(logp <= 0.0);
    }

    #[test]
    fn sampled_act_deterministic_under_seed() {
        let policy = PolicyParams::init(8, 3);
        let state = vec![0.1, -0.2, 0.3, 0.4];
        let task = vec![0.0, 1.0, 0.0, 0.0];
        let mut r1 = CounterRng::from_path(9, "act");
        let mut r2 = CounterRng::from_path(9, "act");
        for _ in 0..20 {
            let a = act(&policy, &state, &task, ActMode::Sample, &mut r1).unwrap();
            let b = act(&policy, &state, &task, ActMode::Sample, &mut r2).unwrap();
            assert_eq!(a.0, b.0);
        }
    }

    #[test]
    fn action_probabilities_sum_to_one() {
        let policy = PolicyParams::init(6, 5);
        let (logits, _) = policy.forward(&[0.5, -0.5, 0.25, 0.0, 1.0, -1.0]);
        let probs = crate::tensor::softmax(&logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let policy = PolicyParams::init(8, 3);
        let mut rng = CounterRng::from_path(1, "act");
        assert!(matches!(
            act(&policy, &[0.0; 2], &[0.0; 2], ActMode::Greedy, &mut rng),
            Err(ConpeError::Shape(_))
        ));
    }

    #[test]
    fn policy_tape_matches_plain_forward() {
        let policy = PolicyParams::init(6, 11);
        let inputs = [
            vec![0.2, -0.4, 0.6, 0.1, 0.0, -0.9],
            vec![1.0, 0.5, -0.5, 0.25, -0.25, 0.75],
        ];
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_vec(2, 6, inputs.concat()));
        let (logits, value, _) = policy_on_tape(&mut tape, &policy, x, false);
        for (b, input) in inputs.iter().enumerate() {
            let (pl, pv) = policy.forward(input);
            for (j, l) in pl.iter().enumerate() {
                assert!((tape.value(logits).at(b, j) - l).abs() < 1e-12);
            }
            assert!((tape.value(value).at(b, 0) - pv).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_digest() {
        let policy = PolicyParams::init(68, 3);
        let attention = AttentionParams::init(3, 64, 5, false);
        let ckpt = Checkpoint {
            policy: policy.clone(),
            attention: Some(attention),
            policy_prompt: Some(Mat::zeros(2, 64)),
            variant_weights: None,
            state_path: StatePath::Guided,
            task: Task::ObjectGoal { color: 0 },
            encoder_digest: "abc".into(),
            pool_digest: "def".into(),
            config_echo: serde_json::json!({"seed": 7}),
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.policy.digest(), policy.digest());
        assert_eq!(back.state_path, StatePath::Guided);
        assert_eq!(back.encoder_digest, "abc");
        assert!(back.attention.is_some());
        assert!(back.policy_prompt.is_some());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn state_paths_compose() {
        let set = EmbeddingSet {
            z0: vec![1.0, 0.0],
            zs: vec![vec![0.5, 0.5], vec![0.0, 1.0]],
        };
        let (control, _) = state_vector(&StatePath::Control, &set, None, None).unwrap();
        assert_eq!(control, vec![1.0, 0.0]);
        let (ens, _) = state_vector(
            &StatePath::Variant { method: EnsembleMethod::EnsUniAvg },
            &set,
            None,
            None,
        )
        .unwrap();
        assert_eq!(ens, vec![1.25, 0.75]);
        let attn = AttentionParams::init(2, 2, 1, false);
        let (guided, omega) = state_vector(&StatePath::Guided, &set, Some(&attn), None).unwrap();
        assert_eq!(guided.len(), 2);
        let omega = omega.unwrap();
        assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
