//! Cosine-guided attention over prompted embeddings.
//!
//! Given the unprompted embedding z0 and prompted embeddings z_1..z_n, the
//! guidance score g_i = cos(z0, z_i) scales the projected logit
//!
//!   u_i = (<z0, W_i z_i> / sqrt(d)) * g_i,      omega = softmax(u / tau)
//!
//! and the state embedding is the residual fusion Z = z0 + sum_i omega_i z_i.
//! W_i is one linear projection per prompt (a tanh hidden layer is available
//! behind `proj_hidden` for ablation). Softmax uses max subtraction.
//!
//! The four baseline ensemble variants: COM combines at the prompt level
//! (average the prompt matrices, encode once), ENS at the embedding level;
//! UNI is a uniform average, WEI a learnable input-independent softmax weight.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_prompted, Embedding, EncoderParams, ImageTensor};
use crate::error::{ConpeError, Result};
use crate::prompt::PromptPool;
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Mat};

/// Per-prompt projections and the softmax temperature of the guidance module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// n projection matrices, each d x d
    pub proj: Vec<Mat>,
    /// optional per-prompt hidden layer (d x d, tanh) before `proj`
    pub proj_hidden: Option<Vec<Mat>>,
    pub temperature: f64,
}

impl AttentionParams {
    /// Gaussian(0, 0.02) projections; logits start near zero so the initial
    /// attention is near uniform.
    pub fn init(n: usize, d: usize, seed: u64, hidden: bool) -> Self {
        let mk = |path: String| {
            let mut rng = CounterRng::from_path(seed, &path);
            Mat::from_vec(d, d, (0..d * d).map(|_| rng.gaussian_scaled(0.0, 0.02)).collect())
        };
        AttentionParams {
            proj: (0..n).map(|i| mk(format!("attention/proj{i}"))).collect(),
            proj_hidden: hidden
                .then(|| (0..n).map(|i| mk(format!("attention/hidden{i}"))).collect()),
            temperature: 1.0,
        }
    }

    pub fn n(&self) -> usize {
        self.proj.len()
    }

    pub fn dim(&self) -> usize {
        self.proj.first().map_or(0, |m| m.rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(ConpeError::Config(format!(
                "softmax temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (i, m) in self.proj.iter().enumerate() {
            if m.rows != m.cols {
                return Err(ConpeError::Shape(format!("projection {i} is not square")));
            }
            m.check_finite(&format!("projection {i}"))?;
        }
        if let Some(h) = &self.proj_hidden {
            if h.len() != self.proj.len() {
                return Err(ConpeError::Shape("hidden layer count mismatch".into()));
            }
        }
        Ok(())
    }

    /// k_i = W_i z_i, optionally through the tanh hidden layer.
    fn project(&self, i: usize, z: &[f64]) -> Vec<f64> {
        let zi = Mat::row_vector(z.to_vec());
        let pre = match &self.proj_hidden {
            Some(hidden) => zi.matmul_nt(&hidden[i]).map(f64::tanh),
            None => zi,
        };
        pre.matmul_nt(&self.proj[i]).data
    }
}

/// Fused state with its attention diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEmbedding {
    pub z: Vec<f64>,
    /// attention weights, a simplex point of length n
    pub omega: Vec<f64>,
    /// guidance scores in [-1, 1]
    pub guidance: Vec<f64>,
}

impl StateEmbedding {
    pub fn check_invariants(&self) -> Result<()> {
        let sum: f64 = self.omega.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.omega.iter().any(|&w| w < 0.0) {
            return Err(ConpeError::Numeric(format!("omega not a simplex point (sum {sum})")));
        }
        if self.guidance.iter().any(|&g| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&g)) {
            return Err(ConpeError::Numeric("guidance outside [-1, 1]".into()));
        }
        if !self.z.iter().all(|v| v.is_finite()) {
            return Err(ConpeError::Numeric("state embedding not finite".into()));
        }
        Ok(())
    }
}

/// Cosine guidance with the documented degenerate convention (0 when either
/// norm is below 1e-12).
pub fn guidance(z0: &[f64], zi: &[f64]) -> f64 {
    cosine(z0, zi)
}

/// Attention weights over the prompted embeddings (plain forward).
pub fn attention_weights(
    z0: &[f64],
    zs: &[Vec<f64>],
    params: &AttentionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if zs.len() != params.n() {
        return Err(ConpeError::Shape(format!(
            "expected {} embeddings, got {}",
            params.n(),
            zs.len()
        )));
    }
    let d = z0.len() as f64;
    let gs: Vec<f64> = zs.iter().map(|zi| guidance(z0, zi)).collect();
    let us: Vec<f64> = zs
        .iter()
        .enumerate()
        .map(|(i, zi)| {
            let ki = params.project(i, zi);
            crate::tensor::dot(z0, &ki) / d.sqrt() * gs[i]
        })
        .collect();
    let scaled: Vec<f64> = us.iter().map(|u| u / params.temperature).collect();
    Ok((crate::tensor::softmax(&scaled), gs))
}

/// Residual fusion Z = z0 + sum_i omega_i z_i.
pub fn compose_state(z0: &[f64], zs: &[Vec<f64>], omega: &[f64], gs: &[f64]) -> StateEmbedding {
    let mut z = z0.to_vec();
    for (w, zi) in omega.iter().zip(zs) {
        for (acc, v) in z.iter_mut().zip(zi) {
            *acc += w * v;
        }
    }
    StateEmbedding { z, omega: omega.to_vec(), guidance: gs.to_vec() }
}

/// Full guided-attention forward: weights then fusion.
pub fn guided_state(
    z0: &[f64],
    zs: &[Vec<f64>],
    params: &AttentionParams,
) -> Result<StateEmbedding> {
    let (omega, gs) = attention_weights(z0, zs, params)?;
    Ok(compose_state(z0, zs, &omega, &gs))
}

/// Batched tape construction of the guided ensemble.
///
/// `z0` is B x d, `zs[i]` is B x d for each prompt, `proj` are the projection
/// nodes (params during training, constants at evaluation). Guidance is
/// computed on the tape, so when `z0` itself depends on trainable leaves (the
/// policy-prompt path) gradients flow through the g_i factor as well.
/// Returns (Z, omega) nodes of shapes B x d and B x n.
pub fn ensemble_on_tape(
    tape: &mut Tape,
    z0: Var,
    zs: &[Var],
    proj: &[Var],
    proj_hidden: Option<&[Var]>,
    temperature: f64,
) -> Result<(Var, Var)> {
    if temperature <= 0.0 {
        return Err(ConpeError::Config("softmax temperature must be positive".into()));
    }
    if zs.len() != proj.len() {
        return Err(ConpeError::Shape("projection/embedding count mismatch".into()));
    }
    let d = tape.value(z0).cols as f64;
    let z0_sq = tape.row_dot(z0, z0);
    let z0_norm = tape.sqrt(z0_sq);
    let mut u_cols = Vec::with_capacity(zs.len());
    for (i, &zi) in zs.iter().enumerate() {
        // g_i = <z0, zi> / (|z0||zi|), rowwise
        let dot_col = tape.row_dot(z0, zi);
        let zi_sq = tape.row_dot(zi, zi);
        let zi_norm = tape.sqrt(zi_sq);
        let denom = tape.mul(z0_norm, zi_norm);
        let g = tape.div(dot_col, denom);
        // k_i = zi W_i^T (optionally through tanh hidden)
        let pre = match proj_hidden {
            Some(hs) => {
                let h = tape.matmul_nt(zi, hs[i]);
                tape.tanh(h)
            }
            None => zi,
        };
        let k = tape.matmul_nt(pre, proj[i]);
        let raw = tape.row_dot(z0, k);
        let scaled = tape.scale(raw, 1.0 / d.sqrt());
        u_cols.push(tape.mul(scaled, g));
    }
    let u = tape.concat_cols(&u_cols);
    let u_scaled = tape.scale(u, 1.0 / temperature);
    let omega = tape.softmax_rows(u_scaled);
    let mut z = z0;
    for (i, &zi) in zs.iter().enumerate() {
        let w_col = tape.slice_cols(omega, i, i + 1);
        let term = tape.mul_col(zi, w_col);
        z = tape.add(z, term);
    }
    Ok((z, omega))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMethod {
    ComUniAvg,
    ComWeiAvg,
    EnsUniAvg,
    EnsWeiAvg,
}

impl EnsembleMethod {
    pub const ALL: [EnsembleMethod; 4] = [
        EnsembleMethod::ComUniAvg,
        EnsembleMethod::ComWeiAvg,
        EnsembleMethod::EnsUniAvg,
        EnsembleMethod::EnsWeiAvg,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "COM-UNI-AVG" => Ok(EnsembleMethod::ComUniAvg),
            "COM-WEI-AVG" => Ok(EnsembleMethod::ComWeiAvg),
            "ENS-UNI-AVG" => Ok(EnsembleMethod::EnsUniAvg),
            "ENS-WEI-AVG" => Ok(EnsembleMethod::EnsWeiAvg),
            other => Err(ConpeError::Usage(format!("unknown ensemble method {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EnsembleMethod::ComUniAvg => "COM-UNI-AVG",
            EnsembleMethod::ComWeiAvg => "COM-WEI-AVG",
            EnsembleMethod::EnsUniAvg => "ENS-UNI-AVG",
            EnsembleMethod::EnsWeiAvg => "ENS-WEI-AVG",
        }
    }

    /// True when the variant combines at the prompt level and therefore needs
    /// the raw observation rather than cached embeddings.
    pub fn is_prompt_level(self) -> bool {
        matches!(self, EnsembleMethod::ComUniAvg | EnsembleMethod::ComWeiAvg)
    }
}

/// Learnable scalars for the WEI variants (input-independent).
#[derive(Debug, Clone, PartialEq)]
pub struct VariantWeights(pub Mat);

impl VariantWeights {
    pub fn uniform(n: usize) -> Self {
        VariantWeights(Mat::zeros(1, n))
    }
}

/// Combined prompt for the COM variants: softmax(w)-weighted (or uniform)
/// average of the pool's prompt matrices.
pub fn combined_prompt(pool: &PromptPool, weights: Option<&VariantWeights>) -> Mat {
    let n = pool.len();
    let coeffs: Vec<f64> = match weights {
        Some(w) => crate::tensor::softmax(&w.0.data),
        None => vec![1.0 / n as f64; n],
    };
    let mut avg = Mat::zeros(pool.prompt_len(), pool.token_dim());
    for (c, p) in coeffs.iter().zip(pool.prompts()) {
        for (a, v) in avg.data.iter_mut().zip(&p.tokens.data) {
            *a += c * v;
        }
    }
    avg
}

/// Baseline ensemble variants of the ablation table (plain forward).
///
/// COM variants encode the observation once under the combined prompt; ENS
/// variants average the cached prompted embeddings.
pub fn ensemble_variant(
    method: EnsembleMethod,
    pool: &PromptPool,
    encoder: &EncoderParams,
    observation: Option<&ImageTensor>,
    z0: &Embedding,
    zs: Option<&[Vec<f64>]>,
    weights: Option<&VariantWeights>,
) -> Result<StateEmbedding> {
    let n = pool.len();
    match method {
        EnsembleMethod::ComUniAvg | EnsembleMethod::ComWeiAvg => {
            let obs = observation.ok_or_else(|| {
                ConpeError::Usage("prompt-level variants need the observation".into())
            })?;
            let w = if method == EnsembleMethod::ComWeiAvg {
                Some(weights.ok_or_else(|| {
                    ConpeError::Usage("COM-WEI-AVG needs variant weights".into())
                })?)
            } else {
                None
            };
            let avg_prompt = combined_prompt(pool, w);
            let z_avg = encode_prompted(encoder, obs, &avg_prompt)?;
            let omega = match w {
                Some(w) => crate::tensor::softmax(&w.0.data),
                None => vec![1.0 / n as f64; n],
            };
            let z: Vec<f64> = z0.as_slice().iter().zip(z_avg.as_slice()).map(|(a, b)| a + b).collect();
            let g = guidance(z0.as_slice(), z_avg.as_slice());
            Ok(StateEmbedding { z, omega, guidance: vec![g; n] })
        }
        EnsembleMethod::EnsUniAvg | EnsembleMethod::EnsWeiAvg => {
            let zs = zs.ok_or_else(|| {
                ConpeError::Usage("embedding-level variants need prompted embeddings".into())
            })?;
            if zs.len() != n {
                return Err(ConpeError::Shape("embedding count != pool size".into()));
            }
            let omega = if method == EnsembleMethod::EnsWeiAvg {
                let w = weights.ok_or_else(|| {
                    ConpeError::Usage("ENS-WEI-AVG needs variant weights".into())
                })?;
                crate::tensor::softmax(&w.0.data)
            } else {
                vec![1.0 / n as f64; n]
            };
            let gs: Vec<f64> = zs.iter().map(|zi| guidance(z0.as_slice(), zi)).collect();
            Ok(compose_state(z0.as_slice(), zs, &omega, &gs))
        }
    }
}
