//! Semantic-regularized data augmentation.
//!
//! A frozen one-block text transformer embeds object-level descriptions into
//! the same d-dimensional space as the vision tower. Per visual prompt, a
//! language prompt is trained with a binary cross-entropy over cosine
//! similarity between prompted observation embeddings and prompted
//! description embeddings (the visual prompt stays fixed).
//!
//! During policy learning, Gaussian noise is added to each prompted embedding
//! but only accepted when it preserves the observation-description
//! classification CL(z, t) = 1{cos(z, t) >= 0} for every description. The
//! printed forms of both the BCE objective and the CL predicate are available
//! behind `LanguageLossMode::LiteralPrinted` / the sigma-of-similarity CL is
//! degenerate (always 1), so the sign predicate is the operative one.

use serde::{Deserialize, Serialize};

use crate::encoder::BlockParams;
use crate::error::{ConpeError, Result};
use crate::optim::Adam;
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Mat};
use crate::world::SemanticsBlock;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { embed_dim: 64, n_heads: 4, mlp_ratio: 2.0, max_tokens: 8, seed: 0 }
    }
}

/// Frozen text tower: token table + positional embeddings + one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub config: TextEncoderConfig,
    pub vocab: Vec<String>,
    pub token_table: Mat,
    pub pos_embed: Mat,
    pub block: BlockParams,
    pub final_gain: Mat,
    pub final_bias: Mat,
}

pub fn init_text_encoder(config: &TextEncoderConfig, vocab: &[String]) -> Result<TextEncoderParams> {
    let d = config.embed_dim;
    if d == 0 || config.n_heads == 0 || d % config.n_heads != 0 {
        return Err(ConpeError::Config("bad text encoder dims".into()));
    }
    let seed = config.seed;
    let mk = |path: &str, rows: usize, cols: usize| {
        let mut rng = CounterRng::from_path(seed, path);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| (rng.gaussian_scaled(0.0, 0.02) as f32) as f64)
                .collect(),
        )
    };
    let ones = |cols: usize| Mat::row_vector(vec![1.0; cols]);
    let hid = ((d as f64) * config.mlp_ratio).round() as usize;
    Ok(TextEncoderParams {
        config: config.clone(),
        vocab: vocab.to_vec(),
        token_table: mk("text/tokens", vocab.len(), d),
        pos_embed: mk("text/pos", config.max_tokens, d),
        block: BlockParams {
            ln1_gain: ones(d),
            ln1_bias: Mat::zeros(1, d),
            wq: mk("text/attn/wq", d, d),
            bq: Mat::zeros(1, d),
            wk: mk("text/attn/wk", d, d),
            bk: Mat::zeros(1, d),
            wv: mk("text/attn/wv", d, d),
            bv: Mat::zeros(1, d),
            wo: mk("text/attn/wo", d, d),
            bo: Mat::zeros(1, d),
            ln2_gain: ones(d),
            ln2_bias: Mat::zeros(1, d),
            w1: mk("text/mlp/w1", d, hid),
            b1: Mat::zeros(1, hid),
            w2: mk("text/mlp/w2", hid, d),
            b2: Mat::zeros(1, d),
        },
        final_gain: ones(d),
        final_bias: Mat::zeros(1, d),
    })
}

impl TextEncoderParams {
    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| ConpeError::Validation(format!("unknown token '{token}'")))
    }
}

/// Language prompt (u' x d), trained per visual prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguagePrompt(pub Mat);

pub const DEFAULT_LANG_PROMPT_LEN: usize = 8;

pub fn init_language_prompt(u: usize, d: usize, seed: u64, index: usize) -> LanguagePrompt {
    let mut rng = CounterRng::from_path(seed, &format!("lang-prompt/{index}"));
    LanguagePrompt(Mat::from_vec(
        u,
        d,
        (0..u * d).map(|_| rng.gaussian_scaled(0.0, 0.02)).collect(),
    ))
}

/// Text forward pass on a tape: prompt rows prepended, mean pool over the
/// description tokens only (empty prompt reproduces the unprompted encoding).
pub fn text_forward_on_tape(
    tape: &mut Tape,
    params: &TextEncoderParams,
    token_ids: &[usize],
    prompt: Option<Var>,
) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(ConpeError::Usage("empty description".into()));
    }
    if token_ids.len() > params.config.max_tokens {
        return Err(ConpeError::Shape("description exceeds max token count".into()));
    }
    let d = params.config.embed_dim;
    let heads = params.config.n_heads;
    let dh = d / heads;
    let mut emb = Mat::zeros(token_ids.len(), d);
    for (r, &id) in token_ids.iter().enumerate() {
        if id >= params.token_table.rows {
            return Err(ConpeError::Validation(format!("token id {id} outside vocabulary")));
        }
        for c in 0..d {
            *emb.at_mut(r, c) = params.token_table.at(id, c) + params.pos_embed.at(r, c);
        }
    }
    let emb = tape.constant(emb);
    let (tokens, u) = match prompt {
        Some(p) => {
            let rows = tape.value(p).rows;
            if rows == 0 {
                (emb, 0)
            } else {
                if tape.value(p).cols != d {
                    return Err(ConpeError::Shape("language prompt width mismatch".into()));
                }
                (tape.concat_rows(p, emb), rows)
            }
        }
        None => (emb, 0),
    };

    let block = &params.block;
    let g1 = tape.constant(block.ln1_gain.clone());
    let b1 = tape.constant(block.ln1_bias.clone());
    let normed = tape.layer_norm_rows(tokens, LN_EPS);
    let normed = tape.mul_row(normed, g1);
    let normed = tape.add_row(normed, b1);
    let wq = tape.constant(block.wq.clone());
    let wk = tape.constant(block.wk.clone());
    let wv = tape.constant(block.wv.clone());
    let q = tape.matmul(normed, wq);
    let k = tape.matmul(normed, wk);
    let v = tape.matmul(normed, wv);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let wo = tape.constant(block.wo.clone());
    let proj = tape.matmul(merged, wo);
    let mut tokens = tape.add(tokens, proj);

    let g2 = tape.constant(block.ln2_gain.clone());
    let b2 = tape.constant(block.ln2_bias.clone());
    let normed = tape.layer_norm_rows(tokens, LN_EPS);
    let normed = tape.mul_row(normed, g2);
    let normed = tape.add_row(normed, b2);
    let w1 = tape.constant(block.w1.clone());
    let w2 = tape.constant(block.w2.clone());
    let hidden = tape.matmul(normed, w1);
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w2);
    tokens = tape.add(tokens, out);

    let fg = tape.constant(params.final_gain.clone());
    let fb = tape.constant(params.final_bias.clone());
    let normed = tape.layer_norm_rows(tokens, LN_EPS);
    let normed = tape.mul_row(normed, fg);
    let normed = tape.add_row(normed, fb);
    Ok(tape.mean_rows(normed, u, u + token_ids.len()))
}

/// Plain text embedding.
pub fn text_encode(
    params: &TextEncoderParams,
    tokens: &[&str],
    lang_prompt: Option<&LanguagePrompt>,
) -> Result<Vec<f64>> {
    let ids: Vec<usize> = tokens
        .iter()
        .map(|t| params.token_id(t))
        .collect::<Result<Vec<_>>>()?;
    text_encode_ids(params, &ids, lang_prompt)
}

pub fn text_encode_ids(
    params: &TextEncoderParams,
    ids: &[usize],
    lang_prompt: Option<&LanguagePrompt>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = lang_prompt.map(|lp| tape.constant(lp.0.clone()));
    let out = text_forward_on_tape(&mut tape, params, ids, p)?;
    Ok(tape.value(out).data.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageLossMode {
    /// standard BCE over sigmoid(cosine)
    Bce,
    /// the printed objective: sum over non-members of log(cosine)
    LiteralPrinted,
}

/// BCE loss and gradient with respect to the language prompt.
///
/// `obs_embeddings[k]` is the (fixed) prompted visual embedding of frame k;
/// `memberships[k]` lists the indices of descriptions true for frame k.
pub fn language_bce_loss(
    obs_embeddings: &[Vec<f64>],
    memberships: &[Vec<u32>],
    descriptions: &[Vec<usize>],
    text: &TextEncoderParams,
    lang_prompt: &LanguagePrompt,
    mode: LanguageLossMode,
) -> Result<(f64, Mat)> {
    if obs_embeddings.is_empty() {
        return Err(ConpeError::Usage("empty language batch".into()));
    }
    if descriptions.is_empty() {
        // empty description collection: zero loss, zero gradient
        return Ok((0.0, Mat::zeros(lang_prompt.0.rows, lang_prompt.0.cols)));
    }
    let mut tape = Tape::new();
    let p = tape.param(lang_prompt.0.clone());
    // one prompted text forward per description, shared across frames
    let t_embs: Vec<Var> = descriptions
        .iter()
        .map(|ids| text_forward_on_tape(&mut tape, text, ids, Some(p)))
        .collect::<Result<Vec<_>>>()?;

    let mut total: Option<Var> = None;
    for (k, z) in obs_embeddings.iter().enumerate() {
        let zv = tape.constant(Mat::row_vector(z.clone()));
        for (q, &tq) in t_embs.iter().enumerate() {
            let c = tape.cosine(zv, tq);
            let member = memberships[k].contains(&(q as u32));
            let term = match mode {
                LanguageLossMode::Bce => {
                    // y*softplus(-c) + (1-y)*softplus(c)
                    let signed = if member { tape.neg(c) } else { c };
                    let e = tape.exp(signed);
                    let e1 = tape.add_const(e, 1.0);
                    tape.ln(e1)
                }
                LanguageLossMode::LiteralPrinted => {
                    if member {
                        continue; // log f - log f cancels for members
                    }
                    tape.ln(c)
                }
            };
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => return Ok((0.0, Mat::zeros(lang_prompt.0.rows, lang_prompt.0.cols))),
    };
    let loss_value = tape.scalar_value(total);
    let grads = tape.backward(total);
    Ok((loss_value, grads.get(p, &lang_prompt.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gaussian scale delta
    pub scale: f64,
    pub max_tries: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { scale: 0.3, max_tries: 100 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(ConpeError::Config("noise scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// The operative classification predicate: CL(z, t) = 1{cos(z, t) >= 0}.
pub fn classification(z: &[f64], t: &[f64]) -> bool {
    cosine(z, t) >= 0.0
}

/// Rejection-sample epsilon ~ N(0, delta^2 I) until the classification against
/// every description embedding is preserved. Returns (epsilon, fallback);
/// fallback means the try budget ran out and epsilon is zero.
pub fn regularized_noise(
    z: &[f64],
    description_embeddings: &[Vec<f64>],
    config: &NoiseConfig,
    rng: &mut CounterRng,
) -> Result<(Vec<f64>, bool)> {
    config.validate()?;
    if config.scale == 0.0 {
        return Ok((vec![0.0; z.len()], false));
    }
    let reference: Vec<bool> =
        description_embeddings.iter().map(|t| classification(z, t)).collect();
    for _ in 0..config.max_tries.max(1) {
        let eps: Vec<f64> = (0..z.len()).map(|_| rng.gaussian_scaled(0.0, config.scale)).collect();
        let perturbed: Vec<f64> = z.iter().zip(&eps).map(|(a, b)| a + b).collect();
        let ok = description_embeddings
            .iter()
            .zip(&reference)
            .all(|(t, &r)| classification(&perturbed, t) == r);
        if ok {
            return Ok((eps, false));
        }
    }
    Ok((vec![0.0; z.len()], true))
}

/// Unregularized Gaussian noise (the ablation control arm).
pub fn plain_noise(dim: usize, scale: f64, rng: &mut CounterRng) -> Vec<f64> {
    (0..dim).map(|_| rng.gaussian_scaled(0.0, scale)).collect()
}

/// Statistics from augmenting a batch of embedding sets.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NoiseStats {
    pub draws: usize,
    pub fallbacks: usize,
}

impl NoiseStats {
    pub fn fallback_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.fallbacks as f64 / self.draws as f64
        }
    }
}

/// Add per-prompt regularized noise to every prompted embedding in the sets;
/// z0 is never touched. `desc_embeddings[i]` holds the description embeddings
/// under language prompt i. Pass `None` to use unregularized noise.
pub fn augment_embedding_sets(
    sets: &mut [crate::policy::EmbeddingSet],
    desc_embeddings: Option<&[Vec<Vec<f64>>]>,
    config: &NoiseConfig,
    seed: u64,
) -> Result<NoiseStats> {
    config.validate()?;
    let mut stats = NoiseStats::default();
    let mut rng = CounterRng::from_path(seed, "semantic/noise");
    for set in sets.iter_mut() {
        for (i, zi) in set.zs.iter_mut().enumerate() {
            stats.draws += 1;
            match desc_embeddings {
                Some(per_prompt) => {
                    let (eps, fallback) =
                        regularized_noise(zi, &per_prompt[i], config, &mut rng)?;
                    if fallback {
                        stats.fallbacks += 1;
                    }
                    for (a, e) in zi.iter_mut().zip(&eps) {
                        *a += e;
                    }
                }
                None => {
                    let eps = plain_noise(zi.len(), config.scale, &mut rng);
                    for (a, e) in zi.iter_mut().zip(&eps) {
                        *a += e;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Replace each prompted embedding in a policy batch with its noisy version;
/// z0 and the expert labels are untouched.
pub fn augmented_policy_batch(
    samples: &mut [crate::policy::BcSample],
    desc_embeddings: Option<&[Vec<Vec<f64>>]>,
    config: &NoiseConfig,
    seed: u64,
) -> Result<NoiseStats> {
    let mut sets: Vec<crate::policy::EmbeddingSet> =
        samples.iter().map(|s| s.set.clone()).collect();
    let stats = augment_embedding_sets(&mut sets, desc_embeddings, config, seed)?;
    for (s, set) in samples.iter_mut().zip(sets) {
        s.set = set;
    }
    Ok(stats)
}

/// Everything the policy trainer needs for semantic regularization: one
/// language prompt per visual prompt and the description embeddings under it.
#[derive(Debug, Clone)]
pub struct SemanticModel {
    pub text: TextEncoderParams,
    pub lang_prompts: Vec<LanguagePrompt>,
    /// [prompt i][description q] -> embedding
    pub desc_embeddings: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lang_prompt_len: usize,
    pub seed: u64,
}

impl Default for SemanticTrainConfig {
    fn default() -> Self {
        SemanticTrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 1e-2,
            lang_prompt_len: DEFAULT_LANG_PROMPT_LEN,
            seed: 0,
        }
    }
}

/// Train one language prompt per visual prompt (Algorithm-3 middle phase):
/// visual prompts fixed, BCE against per-frame description memberships.
pub fn train_language_prompts(
    semantics: &SemanticsBlock,
    // per visual prompt i: (prompted frame embeddings, frame memberships)
    frames_per_prompt: &[(Vec<Vec<f64>>, Vec<Vec<u32>>)],
    text: &TextEncoderParams,
    config: &SemanticTrainConfig,
) -> Result<SemanticModel> {
    let d = text.config.embed_dim;
    let desc_ids: Vec<Vec<usize>> = semantics
        .descriptions
        .iter()
        .map(|toks| toks.iter().map(|&t| t as usize).collect())
        .collect();
    let mut lang_prompts = Vec::with_capacity(frames_per_prompt.len());
    for (i, (frames, memberships)) in frames_per_prompt.iter().enumerate() {
        let mut lp = init_language_prompt(config.lang_prompt_len, d, config.seed, i);
        let mut opt = Adam::new(config.learning_rate, &[(lp.0.rows, lp.0.cols)]);
        let mut rng = CounterRng::from_path(config.seed, &format!("lang-train/{i}"));
        for _ in 0..config.epochs {
            let mut order: Vec<usize> = (0..frames.len()).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let obs: Vec<Vec<f64>> = chunk.iter().map(|&k| frames[k].clone()).collect();
                let mem: Vec<Vec<u32>> = chunk.iter().map(|&k| memberships[k].clone()).collect();
                let (loss, grad) =
                    language_bce_loss(&obs, &mem, &desc_ids, text, &lp, LanguageLossMode::Bce)?;
                if !loss.is_finite() {
                    return Err(ConpeError::Numeric("non-finite language loss".into()));
                }
                opt.update(&mut [&mut lp.0], &[grad]);
            }
        }
        lang_prompts.push(lp);
    }
    let desc_embeddings = lang_prompts
        .iter()
        .map(|lp| {
            desc_ids
                .iter()
                .map(|ids| text_encode_ids(text, ids, Some(lp)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticModel { text: text.clone(), lang_prompts, desc_embeddings })
}


// ---------------------------------------------------------------------------
// language prompt file: magic + version + (n, u, d) + f32 matrices
// ---------------------------------------------------------------------------

pub const LANG_MAGIC: &[u8; 12] = b"CONPE-LANG\0\0";
pub const LANG_VERSION: u32 = 1;

pub fn save_language_prompts(prompts: &[LanguagePrompt], path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LANG_MAGIC);
    buf.extend_from_slice(&LANG_VERSION.to_le_bytes());
    let (u, d) = prompts
        .first()
        .map(|p| (p.0.rows, p.0.cols))
        .unwrap_or((0, 0));
    buf.extend_from_slice(&(prompts.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(u as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for p in prompts {
        for v in &p.0.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| ConpeError::io(path.display().to_string(), e))
}

pub fn load_language_prompts(path: &std::path::Path) -> Result<Vec<LanguagePrompt>> {
    let buf = std::fs::read(path).map_err(|e| ConpeError::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    if buf.len() < 28 || &buf[..12] != LANG_MAGIC {
        return Err(ConpeError::format(&origin, "bad language prompt magic"));
    }
    let rd = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
    if rd(12) != LANG_VERSION {
        return Err(ConpeError::format(&origin, "unsupported language prompt version"));
    }
    let (n, u, d) = (rd(16) as usize, rd(20) as usize, rd(24) as usize);
    let mut off = 28;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let need = u * d * 4;
        if off + need > buf.len() {
            return Err(ConpeError::format(&origin, "truncated language prompt"));
        }
        let mut data = Vec::with_capacity(u * d);
        for i in 0..u * d {
            let s = off + i * 4;
            data.push(f64::from(f32::from_le_bytes([
                buf[s],
                buf[s + 1],
                buf[s + 2],
                buf[s + 3],
            ])));
        }
        off += need;
        out.push(LanguagePrompt(Mat::from_vec(u, d, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_setup() -> TextEncoderParams {
        let sem = SemanticsBlock::standard();
        init_text_encoder(
            &TextEncoderConfig { embed_dim: 16, n_heads: 2, seed: 3, ..Default::default() },
            &sem.vocab,
        )
        .unwrap()
    }

    #[test]
    fn text_encode_pure_and_sized() {
        let text = text_setup();
        let a = text_encode(&text, &["red", "goal"], None).unwrap();
        let b = text_encode(&text, &["red", "goal"], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_language_prompt_is_identity() {
        let text = text_setup();
        let plain = text_encode(&text, &["blue", "goal"], None).unwrap();
        let empty = LanguagePrompt(Mat::zeros(0, 16));
        let prompted = text_encode(&text, &["blue", "goal"], Some(&empty)).unwrap();
        assert_eq!(plain, prompted);
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let text = text_setup();
        assert!(matches!(
            text_encode(&text, &["purple"], None),
            Err(ConpeError::Validation(_))
        ));
    }

    #[test]
    fn empty_description_collection_gives_zero_loss() {
        let text = text_setup();
        let lp = init_language_prompt(2, 16, 1, 0);
        let (loss, grad) = language_bce_loss(
            &[vec![0.1; 16]],
            &[vec![]],
            &[],
            &text,
            &lp,
            LanguageLossMode::Bce,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_at_zero_cosine_is_ln2_per_term() {
        // a single positive pair with c = 0 contributes -log sigmoid(0) = ln 2.
        // engineer c = 0 by making the observation orthogonal in a controlled
        // way: instead verify the formula through the tape on a synthetic
        // embedding that the text encoder cannot produce; we check the math by
        // computing softplus(0) directly.
        let softplus_zero = (1.0f64 + (-0.0f64).exp()).ln();
        assert!((softplus_zero - 2.0f64.ln()).abs() < 1e-15);
        // and the tape path agrees on a zero-cosine pair: z orthogonal to t is
        // not constructible exactly here, so this is covered by the formula
        // identity plus the gradient test below.
    }

    #[test]
    fn language_training_decreases_loss() {
        let text = text_setup();
        let sem = SemanticsBlock::standard();
        let desc_ids: Vec<Vec<usize>> = sem
            .descriptions
            .iter()
            .map(|toks| toks.iter().map(|&t| t as usize).collect())
            .collect();
        // synthetic frame embeddings with structured memberships
        let mut rng = CounterRng::from_path(5, "sem-test");
        let frames: Vec<Vec<f64>> =
            (0..12).map(|_| (0..16).map(|_| rng.gaussian()).collect()).collect();
        let memberships: Vec<Vec<u32>> =
            (0..12).map(|i| vec![(i % 4) as u32, 4 + (i % 5) as u32]).collect();
        let mut lp = init_language_prompt(2, 16, 7, 0);
        let (before, _) =
            language_bce_loss(&frames, &memberships, &desc_ids, &text, &lp, LanguageLossMode::Bce)
                .unwrap();
        let mut opt = Adam::new(1e-2, &[(2, 16)]);
        for _ in 0..30 {
            let (_, grad) = language_bce_loss(
                &frames,
                &memberships,
                &desc_ids,
                &text,
                &lp,
                LanguageLossMode::Bce,
            )
            .unwrap();
            opt.update(&mut [&mut lp.0], &[grad]);
        }
        let (after, _) =
            language_bce_loss(&frames, &memberships, &desc_ids, &text, &lp, LanguageLossMode::Bce)
                .unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn language_gradient_matches_finite_differences() {
        let text = text_setup();
        let desc_ids = vec![vec![0usize, 3], vec![2usize, 7]];
        let frames = vec![vec![0.3; 16], {
            let mut v = vec![-0.2; 16];
            v[3] = 0.9;
            v
        }];
        let memberships = vec![vec![0u32], vec![1u32]];
        let lp0 = init_language_prompt(1, 16, 3, 0);
        let (_, analytic) =
            language_bce_loss(&frames, &memberships, &desc_ids, &text, &lp0, LanguageLossMode::Bce)
                .unwrap();
        let h = 1e-4;
        for i in 0..lp0.0.data.len() {
            let mut lp_p = lp0.clone();
            lp_p.0.data[i] += h;
            let mut lp_m = lp0.clone();
            lp_m.0.data[i] -= h;
            let (fp, _) = language_bce_loss(
                &frames,
                &memberships,
                &desc_ids,
                &text,
                &lp_p,
                LanguageLossMode::Bce,
            )
            .unwrap();
            let (fm, _) = language_bce_loss(
                &frames,
                &memberships,
                &desc_ids,
                &text,
                &lp_m,
                LanguageLossMode::Bce,
            )
            .unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-4 {
                assert!((a - numeric).abs() < 1e-6, "idx {i}: {a} vs {numeric}");
            } else {
                assert!((a - numeric).abs() / denom < 1e-3, "idx {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn zero_scale_noise_is_identity() {
        let mut rng = CounterRng::from_path(1, "noise");
        let cfg = NoiseConfig { scale: 0.0, max_tries: 10 };
        let (eps, fallback) =
            regularized_noise(&[0.5; 8], &[vec![1.0; 8]], &cfg, &mut rng).unwrap();
        assert!(eps.iter().all(|&e| e == 0.0));
        assert!(!fallback);
    }

    #[test]
    fn accepted_noise_preserves_classification() {
        let mut rng = CounterRng::from_path(2, "noise");
        let cfg = NoiseConfig { scale: 0.2, max_tries: 100 };
        let mut t1 = vec![0.0; 8];
        t1[0] = 1.0;
        let mut t2 = vec![0.0; 8];
        t2[1] = -1.0;
        let descs = vec![t1.clone(), t2.clone()];
        let z = vec![0.4, 0.3, -0.1, 0.2, 0.0, 0.1, -0.2, 0.5];
        for _ in 0..50 {
            let (eps, fallback) = regularized_noise(&z, &descs, &cfg, &mut rng).unwrap();
            if fallback {
                continue;
            }
            let zp: Vec<f64> = z.iter().zip(&eps).map(|(a, b)| a + b).collect();
            for t in &descs {
                assert_eq!(classification(&zp, t), classification(&z, t));
            }
        }
    }

    #[test]
    fn chi_mean_of_unconstrained_noise() {
        // with no descriptions every draw is accepted; |eps| ~ chi_d, whose
        // mean for d = 64 is within a fraction of a percent of delta*sqrt(d)
        let d = 64;
        let delta = 0.3;
        let cfg = NoiseConfig { scale: delta, max_tries: 1 };
        let mut rng = CounterRng::from_path(7, "chi");
        let z = vec![0.1; d];
        let mut total = 0.0;
        let n = 1000;
        for _ in 0..n {
            let (eps, fallback) = regularized_noise(&z, &[], &cfg, &mut rng).unwrap();
            assert!(!fallback);
            total += crate::tensor::l2_norm(&eps);
        }
        let mean = total / n as f64;
        let expected = delta * (d as f64).sqrt();
        assert!(
            (mean - expected).abs() / expected < 0.10,
            "mean {mean} vs {expected}"
        );
    }

    #[test]
    fn augment_leaves_z0_untouched() {
        use crate::policy::EmbeddingSet;
        let mut sets = vec![EmbeddingSet {
            z0: vec![1.0; 8],
            zs: vec![vec![0.5; 8], vec![-0.5; 8]],
        }];
        let before_z0 = sets[0].z0.clone();
        let before_zs = sets[0].zs.clone();
        let cfg = NoiseConfig { scale: 0.1, max_tries: 50 };
        let stats = augment_embedding_sets(&mut sets, None, &cfg, 9).unwrap();
        assert_eq!(stats.draws, 2);
        assert_eq!(sets[0].z0, before_z0);
        assert_ne!(sets[0].zs, before_zs);
    }

    #[test]
    fn zero_scale_augment_is_identity() {
        use crate::policy::EmbeddingSet;
        let mut sets = vec![EmbeddingSet { z0: vec![1.0; 4], zs: vec![vec![0.5; 4]] }];
        let before = sets.clone();
        let cfg = NoiseConfig { scale: 0.0, max_tries: 50 };
        augment_embedding_sets(&mut sets, None, &cfg, 9).unwrap();
        assert_eq!(sets, before);
    }

    #[test]
    fn language_prompts_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let prompts: Vec<LanguagePrompt> = (0..3)
            .map(|i| {
                let mut p = init_language_prompt(4, 8, i, i as usize);
                for v in &mut p.0.data {
                    *v = f64::from(*v as f32);
                }
                p
            })
            .collect();
        let path = dir.path().join("lang.bin");
        save_language_prompts(&prompts, &path).unwrap();
        let back = load_language_prompts(&path).unwrap();
        assert_eq!(prompts, back);
    }
}
