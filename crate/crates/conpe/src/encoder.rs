//! Frozen seed-deterministic vision transformer.
//!
//! A miniature pre-LN ViT standing in for a large pretrained visual tower:
//! patch projection + positional embeddings, `n_layers` blocks of multi-head
//! self-attention and a GELU MLP, final layer norm, mean pool. Prompt tokens
//! are prepended to the patch-token sequence after patch embedding and before
//! the first block (shallow injection); pooling averages patch tokens only, so
//! an empty prompt reproduces the unprompted embedding exactly.
//!
//! Parameters are a pure function of `(config, seed)`: every weight matrix is
//! drawn Gaussian(0, 0.02) from a counter RNG keyed on the seed and the
//! parameter path. Nothing here is ever updated; gradients flow *through* the
//! encoder to prompt tokens via the tape, never *into* it.

use serde::{Deserialize, Serialize};

use crate::error::{ConpeError, Result};
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// weight initialization standard deviation
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2.0,
            init_std: INIT_STD,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0
            || self.n_layers == 0 || self.n_heads == 0
        {
            return Err(ConpeError::Config("encoder dims must be >= 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ConpeError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ConpeError::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(ConpeError::Config("mlp_ratio must be positive".into()));
        }
        if self.init_std <= 0.0 {
            return Err(ConpeError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// One transformer block's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Frozen encoder parameters; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_proj: Mat,
    pub patch_bias: Mat,
    pub pos_embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Mat,
    pub final_bias: Mat,
}

/// RGB image, values in [0,1], row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// len = height * width * 3, layout [r g b r g b ...] per row
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(ConpeError::Shape(format!(
                "image buffer {} != {}x{}x3",
                pixels.len(),
                height,
                width
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(ConpeError::Shape("image values must be finite in [0,1]".into()));
        }
        Ok(ImageTensor { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageTensor { height, width, pixels: vec![value; height * width * 3] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(ConpeError::Shape("u8 frame size mismatch".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            pixels: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        })
    }
}

/// Encoder output: a d-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        crate::tensor::l2_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn gaussian_mat(rng: &mut CounterRng, rows: usize, cols: usize, std: f64) -> Mat {
    // f32 rounding makes the stored parameter set exactly reproducible from
    // its on-disk form.
    let data = (0..rows * cols)
        .map(|_| (rng.gaussian_scaled(0.0, std) as f32) as f64)
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Deterministically initialize frozen encoder parameters.
pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let d = config.embed_dim;
    let seed = config.seed;
    let std = config.init_std;
    let mk = |path: &str, rows: usize, cols: usize| {
        let mut rng = CounterRng::from_path(seed, path);
        gaussian_mat(&mut rng, rows, cols, std)
    };
    let ones = |cols: usize| Mat::row_vector(vec![1.0; cols]);
    let zeros_row = |cols: usize| Mat::zeros(1, cols);

    let blocks = (0..config.n_layers)
        .map(|l| BlockParams {
            ln1_gain: ones(d),
            ln1_bias: zeros_row(d),
            wq: mk(&format!("encoder/layer{l}/attn/wq"), d, d),
            bq: zeros_row(d),
            wk: mk(&format!("encoder/layer{l}/attn/wk"), d, d),
            bk: zeros_row(d),
            wv: mk(&format!("encoder/layer{l}/attn/wv"), d, d),
            bv: zeros_row(d),
            wo: mk(&format!("encoder/layer{l}/attn/wo"), d, d),
            bo: zeros_row(d),
            ln2_gain: ones(d),
            ln2_bias: zeros_row(d),
            w1: mk(&format!("encoder/layer{l}/mlp/w1"), d, config.mlp_hidden()),
            b1: zeros_row(config.mlp_hidden()),
            w2: mk(&format!("encoder/layer{l}/mlp/w2"), config.mlp_hidden(), d),
            b2: zeros_row(d),
        })
        .collect();

    Ok(EncoderParams {
        config: config.clone(),
        patch_proj: mk("encoder/patch/proj", config.patch_dim(), d),
        patch_bias: zeros_row(d),
        pos_embed: mk("encoder/patch/pos", config.n_patches(), d),
        blocks,
        final_gain: ones(d),
        final_bias: zeros_row(d),
    })
}

/// Split image into per-patch flattened rows (n_patches x patch_dim).
fn patchify(config: &EncoderConfig, image: &ImageTensor) -> Result<Mat> {
    if image.height != config.image_size || image.width != config.image_size {
        return Err(ConpeError::Shape(format!(
            "image {}x{} does not match configured size {}",
            image.height, image.width, config.image_size
        )));
    }
    let p = config.patch_size;
    let per_side = config.image_size / p;
    let mut out = Mat::zeros(config.n_patches(), config.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            let row = py * per_side + px;
            let mut col = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        *out.at_mut(row, col) = f64::from(image.get(py * p + dy, px * p + dx, c));
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Forward pass on a tape. `prompt` is any node holding a u x d matrix
/// (u = 0 allowed). Returns the pooled 1 x d embedding node.
///
/// Pooling covers patch tokens only, so prompt tokens influence the output
/// exclusively through attention mixing.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    image: &ImageTensor,
    prompt: Option<Var>,
) -> Result<Var> {
    let cfg = &params.config;
    if let Some(p) = prompt {
        let pm = tape.value(p);
        if pm.cols != cfg.embed_dim {
            return Err(ConpeError::Shape(format!(
                "prompt width {} != embed_dim {}",
                pm.cols, cfg.embed_dim
            )));
        }
    }
    let patches = patchify(cfg, image)?;
    let n_patch = patches.rows;
    let d = cfg.embed_dim;
    let heads = cfg.n_heads;
    let dh = d / heads;

    let patches = tape.constant(patches);
    let wp = tape.constant(params.patch_proj.clone());
    let bp = tape.constant(params.patch_bias.clone());
    let pos = tape.constant(params.pos_embed.clone());
    let emb = tape.matmul(patches, wp);
    let emb = tape.add_row(emb, bp);
    let emb = tape.add(emb, pos);

    let (mut tokens, u) = match prompt {
        Some(p) => {
            let pm = tape.value(p);
            let u = pm.rows;
            if u == 0 {
                (emb, 0)
            } else {
                (tape.concat_rows(p, emb), u)
            }
        }
        None => (emb, 0),
    };

    for block in &params.blocks {
        // attention sublayer
        let g1 = tape.constant(block.ln1_gain.clone());
        let b1 = tape.constant(block.ln1_bias.clone());
        let normed = tape.layer_norm_rows(tokens, LN_EPS);
        let normed = tape.mul_row(normed, g1);
        let normed = tape.add_row(normed, b1);

        let wq = tape.constant(block.wq.clone());
        let bq = tape.constant(block.bq.clone());
        let wk = tape.constant(block.wk.clone());
        let bk = tape.constant(block.bk.clone());
        let wv = tape.constant(block.wv.clone());
        let bv = tape.constant(block.bv.clone());
        let q = tape.matmul(normed, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(normed, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(normed, wv);
        let v = tape.add_row(v, bv);

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
        let bo = tape.constant(block.bo.clone());
        let proj = tape.matmul(merged, wo);
        let proj = tape.add_row(proj, bo);
        tokens = tape.add(tokens, proj);

        // mlp sublayer
        let g2 = tape.constant(block.ln2_gain.clone());
        let b2c = tape.constant(block.ln2_bias.clone());
        let normed = tape.layer_norm_rows(tokens, LN_EPS);
        let normed = tape.mul_row(normed, g2);
        let normed = tape.add_row(normed, b2c);
        let w1 = tape.constant(block.w1.clone());
        let b1m = tape.constant(block.b1.clone());
        let w2 = tape.constant(block.w2.clone());
        let b2m = tape.constant(block.b2.clone());
        let hidden = tape.matmul(normed, w1);
        let hidden = tape.add_row(hidden, b1m);
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, w2);
        let out = tape.add_row(out, b2m);
        tokens = tape.add(tokens, out);
    }

    let fg = tape.constant(params.final_gain.clone());
    let fb = tape.constant(params.final_bias.clone());
    let normed = tape.layer_norm_rows(tokens, LN_EPS);
    let normed = tape.mul_row(normed, fg);
    let normed = tape.add_row(normed, fb);
    // pool over patch tokens only
    Ok(tape.mean_rows(normed, u, u + n_patch))
}

/// Embed an image with the frozen encoder.
pub fn encode(params: &EncoderParams, image: &ImageTensor) -> Result<Embedding> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, image, None)?;
    let v = tape.value(out);
    let e = Embedding(v.data.clone());
    if !e.is_finite() {
        return Err(ConpeError::Numeric("encoder produced non-finite embedding".into()));
    }
    Ok(e)
}

/// Embed an image with prompt tokens prepended to the token sequence.
pub fn encode_prompted(
    params: &EncoderParams,
    image: &ImageTensor,
    prompt: &Mat,
) -> Result<Embedding> {
    let mut tape = Tape::new();
    let p = tape.constant(prompt.clone());
    let out = forward_on_tape(&mut tape, params, image, Some(p))?;
    let v = tape.value(out);
    let e = Embedding(v.data.clone());
    if !e.is_finite() {
        return Err(ConpeError::Numeric("encoder produced non-finite embedding".into()));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// serialization: single binary blob, 16-byte magic header + config echo + f32
// parameters in a fixed documented order.
// ---------------------------------------------------------------------------

pub const ENCODER_MAGIC: &[u8; 12] = b"CONPE-ENC\0\0\0";
pub const ENCODER_VERSION: u32 = 1;

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    for v in &m.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_mat(buf: &[u8], off: &mut usize, rows: usize, cols: usize, path: &str) -> Result<Mat> {
    let need = rows * cols * 4;
    if *off + need > buf.len() {
        return Err(ConpeError::format(path, "truncated parameter blob"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let s = *off + i * 4;
        let v = f32::from_le_bytes([buf[s], buf[s + 1], buf[s + 2], buf[s + 3]]);
        data.push(f64::from(v));
    }
    *off += need;
    Ok(Mat::from_vec(rows, cols, data))
}

impl EncoderParams {
    fn mats(&self) -> Vec<&Mat> {
        let mut out = vec![&self.patch_proj, &self.patch_bias, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias]);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ENCODER_MAGIC);
        buf.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
        let c = &self.config;
        buf.extend_from_slice(&(c.image_size as u32).to_le_bytes());
        buf.extend_from_slice(&(c.patch_size as u32).to_le_bytes());
        buf.extend_from_slice(&(c.embed_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(c.n_layers as u32).to_le_bytes());
        buf.extend_from_slice(&(c.n_heads as u32).to_le_bytes());
        buf.extend_from_slice(&c.mlp_ratio.to_le_bytes());
        buf.extend_from_slice(&c.init_std.to_le_bytes());
        buf.extend_from_slice(&c.seed.to_le_bytes());
        for m in self.mats() {
            push_mat(&mut buf, m);
        }
        buf
    }

    pub fn from_bytes(buf: &[u8], origin: &str) -> Result<Self> {
        if buf.len() < 60 || &buf[..12] != ENCODER_MAGIC {
            return Err(ConpeError::format(origin, "bad encoder magic"));
        }
        let version = u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]);
        if version != ENCODER_VERSION {
            return Err(ConpeError::format(origin, format!("unsupported version {version}")));
        }
        let rd_u32 = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        let config = EncoderConfig {
            image_size: rd_u32(16) as usize,
            patch_size: rd_u32(20) as usize,
            embed_dim: rd_u32(24) as usize,
            n_layers: rd_u32(28) as usize,
            n_heads: rd_u32(32) as usize,
            mlp_ratio: f64::from_le_bytes(buf[36..44].try_into().expect("8 bytes")),
            init_std: f64::from_le_bytes(buf[44..52].try_into().expect("8 bytes")),
            seed: u64::from_le_bytes(buf[52..60].try_into().expect("8 bytes")),
        };
        config.validate().map_err(|e| {
            ConpeError::format(origin, format!("config echo failed validation: {e}"))
        })?;
        let d = config.embed_dim;
        let hid = config.mlp_hidden();
        let mut off = 60;
        let patch_proj = read_mat(buf, &mut off, config.patch_dim(), d, origin)?;
        let patch_bias = read_mat(buf, &mut off, 1, d, origin)?;
        let pos_embed = read_mat(buf, &mut off, config.n_patches(), d, origin)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                ln1_gain: read_mat(buf, &mut off, 1, d, origin)?,
                ln1_bias: read_mat(buf, &mut off, 1, d, origin)?,
                wq: read_mat(buf, &mut off, d, d, origin)?,
                bq: read_mat(buf, &mut off, 1, d, origin)?,
                wk: read_mat(buf, &mut off, d, d, origin)?,
                bk: read_mat(buf, &mut off, 1, d, origin)?,
                wv: read_mat(buf, &mut off, d, d, origin)?,
                bv: read_mat(buf, &mut off, 1, d, origin)?,
                wo: read_mat(buf, &mut off, d, d, origin)?,
                bo: read_mat(buf, &mut off, 1, d, origin)?,
                ln2_gain: read_mat(buf, &mut off, 1, d, origin)?,
                ln2_bias: read_mat(buf, &mut off, 1, d, origin)?,
                w1: read_mat(buf, &mut off, d, hid, origin)?,
                b1: read_mat(buf, &mut off, 1, hid, origin)?,
                w2: read_mat(buf, &mut off, hid, d, origin)?,
                b2: read_mat(buf, &mut off, 1, d, origin)?,
            });
        }
        let final_gain = read_mat(buf, &mut off, 1, d, origin)?;
        let final_bias = read_mat(buf, &mut off, 1, d, origin)?;
        if off != buf.len() {
            return Err(ConpeError::format(origin, "trailing bytes after parameters"));
        }
        Ok(EncoderParams {
            config,
            patch_proj,
            patch_bias,
            pos_embed,
            blocks,
            final_gain,
            final_bias,
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

    /// FNV-1a digest of the serialized parameters; cheap regression anchor.
    pub fn checksum(&self) -> u64 {
        let bytes = self.to_bytes();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2.0,
            init_std: INIT_STD,
            seed: 7,
        }
    }

    fn test_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = CounterRng::from_path(seed, "test/image");
        let pixels = (0..size * size * 3).map(|_| rng.uniform() as f32).collect();
        ImageTensor { height: size, width: size, pixels }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig { seed: 7, ..Default::default() };
        let a = init_encoder(&cfg).unwrap();
        let b = init_encoder(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn invalid_patch_size_rejected() {
        let cfg = EncoderConfig { patch_size: 7, ..Default::default() };
        assert!(matches!(init_encoder(&cfg), Err(ConpeError::Config(_))));
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = EncoderConfig { embed_dim: 65, ..Default::default() };
        assert!(matches!(init_encoder(&cfg), Err(ConpeError::Config(_))));
    }

    #[test]
    fn encode_is_pure_and_sized() {
        let cfg = EncoderConfig { seed: 7, ..Default::default() };
        let params = init_encoder(&cfg).unwrap();
        let img = test_image(64, 3);
        let a = encode(&params, &img).unwrap();
        let b = encode(&params, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert!(a.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let cfg = EncoderConfig { seed: 7, ..Default::default() };
        let params = init_encoder(&cfg).unwrap();
        let img = test_image(32, 3);
        assert!(matches!(encode(&params, &img), Err(ConpeError::Shape(_))));
    }

    #[test]
    fn empty_prompt_is_identity() {
        let cfg = small_config();
        let params = init_encoder(&cfg).unwrap();
        let img = test_image(16, 5);
        let plain = encode(&params, &img).unwrap();
        let prompted = encode_prompted(&params, &img, &Mat::zeros(0, 16)).unwrap();
        assert_eq!(plain, prompted);
    }

    #[test]
    fn prompt_changes_embedding() {
        let cfg = small_config();
        let params = init_encoder(&cfg).unwrap();
        let img = ImageTensor::filled(16, 16, 0.5);
        let plain = encode(&params, &img).unwrap();
        let mut rng = CounterRng::from_path(3, "test/prompt");
        let prompt = Mat::from_vec(
            4,
            16,
            (0..64).map(|_| rng.gaussian_scaled(0.0, 1.0)).collect(),
        );
        let prompted = encode_prompted(&params, &img, &prompt).unwrap();
        let cos = crate::tensor::cosine(plain.as_slice(), prompted.as_slice());
        assert!(cos < 1.0 - 1e-6, "prompt had no effect, cos = {cos}");
    }

    #[test]
    fn wrong_prompt_width_rejected() {
        let cfg = small_config();
        let params = init_encoder(&cfg).unwrap();
        let img = test_image(16, 5);
        let prompt = Mat::zeros(2, 8);
        assert!(matches!(
            encode_prompted(&params, &img, &prompt),
            Err(ConpeError::Shape(_))
        ));
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let cfg = small_config();
        let params = init_encoder(&cfg).unwrap();
        let img = test_image(16, 9);
        let mut rng = CounterRng::from_path(11, "test/prompt-grad");
        let p0 = Mat::from_vec(
            2,
            16,
            (0..32).map(|_| rng.gaussian_scaled(0.0, 0.5)).collect(),
        );
        // scalar probe: dot of embedding with a fixed direction, tanh'd
        let probe = Mat::row_vector((0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect());

        let eval = |p: &Mat| {
            let mut tape = Tape::new();
            let pv = tape.constant(p.clone());
            let out = forward_on_tape(&mut tape, &params, &img, Some(pv)).unwrap();
            let pr = tape.constant(probe.clone());
            let d = tape.dot(out, pr);
            let t = tape.tanh(d);
            tape.scalar_value(t)
        };

        let mut tape = Tape::new();
        let pv = tape.param(p0.clone());
        let out = forward_on_tape(&mut tape, &params, &img, Some(pv)).unwrap();
        let pr = tape.constant(probe.clone());
        let d = tape.dot(out, pr);
        let t = tape.tanh(d);
        let grads = tape.backward(t);
        let analytic = grads.get(pv, &p0);

        let h = 1e-4;
        for i in 0..p0.data.len() {
            let mut pp = p0.clone();
            pp.data[i] += h;
            let mut pm = p0.clone();
            pm.data[i] -= h;
            let numeric = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-4 {
                assert!((a - numeric).abs() < 1e-6, "idx {i}: {a} vs {numeric}");
            } else {
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "idx {i}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn params_roundtrip_bytes() {
        let cfg = small_config();
        let params = init_encoder(&cfg).unwrap();
        let bytes = params.to_bytes();
        let back = EncoderParams::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(params, back);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let cfg = small_config();
        let mut bytes = init_encoder(&cfg).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(EncoderParams::from_bytes(&bytes, "mem").is_err());
    }
}
