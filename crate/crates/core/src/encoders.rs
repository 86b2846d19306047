//! Toy image and text encoders that map into a shared joint space, the
//! symmetric contrastive objective, and cosine zero-shot classification.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{select_position, Init, LayerNorm, Linear, Transformer, TransformerConfig};
use crate::optim::{Bound, GroupName, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const N_RESERVED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_text_len: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub d_joint: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_text_len: 16,
            patch_size: 8,
            vocab_size: 1024,
            d_joint: 64,
            image_height: 32,
            image_width: 32,
        }
    }
}

impl EncoderConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
            || self.image_height == 0
            || self.image_width == 0
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.vocab_size <= N_RESERVED || self.max_text_len == 0 || self.d_joint == 0 {
            return Err(Error::Config(format!("degenerate encoder config {self:?}")));
        }
        Ok(())
    }
}

// ----- text ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Starts with [`CLS_ID`], padded with [`PAD_ID`] to the maximum length.
    pub ids: Vec<usize>,
    /// Number of non-pad ids, including the leading CLS.
    pub length: usize,
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn valid_mask(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.ids.len()).map(move |i| i < self.length)
    }
}

/// Lowercases and splits text into words. Letters, digits, `-` and `_`
/// form words; everything else separates them. Words with no letter or
/// digit are dropped.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_'))
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .map(str::to_owned)
        .collect()
}

/// FNV-1a hash of the word, folded into the non-reserved id range.
pub fn token_id(word: &str, vocab_size: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    N_RESERVED + (h % (vocab_size - N_RESERVED) as u64) as usize
}

pub fn tokenize(text: &str, vocab_size: usize, max_text_len: usize) -> TokenSequence {
    assert!(vocab_size > N_RESERVED && max_text_len > 0);
    let mut ids = Vec::with_capacity(max_text_len);
    ids.push(CLS_ID);
    ids.extend(
        words(text)
            .iter()
            .map(|w| token_id(w, vocab_size))
            .take(max_text_len - 1),
    );
    let length = ids.len();
    ids.resize(max_text_len, PAD_ID);
    TokenSequence {
        ids,
        length,
        vocab_size,
    }
}

// ----- images ----------------------------------------------------------------

/// An RGB image with pixels in `[0, 1]`, stored row-major as
/// `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} pixel values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        RawImage {
            height,
            width,
            pixels,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatchGrid {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over the grid; each patch is flattened as `[p, p, 3]`.
    pub patches: Vec<Vec<f64>>,
}

pub fn patchify(img: &RawImage, patch_size: usize) -> Result<ImagePatchGrid> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            img.height, img.width
        )));
    }
    let (rows, cols) = (img.height / patch_size, img.width / patch_size);
    let mut patches = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let mut v = Vec::with_capacity(patch_size * patch_size * 3);
            for py in 0..patch_size {
                let y = gr * patch_size + py;
                let start = (y * img.width + gc * patch_size) * 3;
                v.extend_from_slice(&img.pixels[start..start + patch_size * 3]);
            }
            patches.push(v);
        }
    }
    Ok(ImagePatchGrid {
        patch_size,
        grid_rows: rows,
        grid_cols: cols,
        patches,
    })
}

pub fn unpatchify(grid: &ImagePatchGrid) -> RawImage {
    let p = grid.patch_size;
    let (h, w) = (grid.grid_rows * p, grid.grid_cols * p);
    let mut pixels = vec![0.0; h * w * 3];
    for (i, patch) in grid.patches.iter().enumerate() {
        let (gr, gc) = (i / grid.grid_cols, i % grid.grid_cols);
        for py in 0..p {
            let start = ((gr * p + py) * w + gc * p) * 3;
            pixels[start..start + p * 3].copy_from_slice(&patch[py * p * 3..(py + 1) * p * 3]);
        }
    }
    RawImage {
        height: h,
        width: w,
        pixels,
    }
}

// ----- embedding sequences ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    /// `[s, d_joint]`.
    pub embeddings: Tensor,
    pub modality: Modality,
    pub cls_index: usize,
    pub valid_len: usize,
}

impl EmbeddingSequence {
    pub fn new(embeddings: Tensor, modality: Modality, cls_index: usize, valid_len: usize) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding_sequence",
                msg: format!("expected [s, d], got {:?}", embeddings.shape()),
            });
        }
        let s = embeddings.shape()[0];
        if cls_index >= s || valid_len > s || cls_index >= valid_len {
            return Err(Error::InvalidArgument(format!(
                "cls index {cls_index} / valid length {valid_len} for sequence of {s}"
            )));
        }
        Ok(EmbeddingSequence {
            embeddings,
            modality,
            cls_index,
            valid_len,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn cls(&self) -> &[f64] {
        self.embeddings.row(self.cls_index)
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.valid_len).collect()
    }
}

// ----- encoders -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub transformer: Transformer,
    pub ln_post: LayerNorm,
    pub proj: ParamId,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            store,
            group: GroupName::ClipImage,
            rng,
        };
        let d = cfg.d_model;
        Ok(ImageEncoder {
            patch_proj: init.linear("patch_proj", cfg.patch_dim(), d),
            cls: init.normal("cls", &[1, d]),
            pos: init.normal("pos", &[1 + cfg.n_patches(), d]),
            transformer: Transformer::new(&mut init, "blocks", cfg.transformer())?,
            ln_post: init.layer_norm("ln_post", d),
            proj: init.normal("proj", &[d, cfg.d_joint]),
        })
    }

    /// Encodes a batch of equally-shaped patch grids to
    /// `[batch, 1 + n_patches, d_joint]`, CLS first.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, grids: &[&ImagePatchGrid]) -> Result<Var> {
        let first = grids.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let n = first.patches.len();
        let pos_rows = tape.shape(p.var(self.pos))[0];
        let patch_dim = tape.shape(p.var(self.patch_proj.w))[0];
        if n + 1 != pos_rows {
            return Err(Error::Shape {
                op: "encode_image",
                msg: format!("{n} patches for {} positional rows", pos_rows),
            });
        }
        let mut data = Vec::with_capacity(grids.len() * n * patch_dim);
        for g in grids {
            if g.patches.len() != n || g.patches.iter().any(|v| v.len() != patch_dim) {
                return Err(Error::Shape {
                    op: "encode_image",
                    msg: format!("patch grid does not match {n} patches of {patch_dim} values"),
                });
            }
            for v in &g.patches {
                data.extend_from_slice(v);
            }
        }
        let b = grids.len();
        let x = tape.constant(vec![b, n, patch_dim], data)?;
        let tokens = self.patch_proj.forward(tape, p, x)?;
        let d = tape.shape(tokens)[2];
        let cls = tape.gather_rows(p.var(self.cls), &vec![0; b])?;
        let cls = tape.reshape(cls, &[b, 1, d])?;
        let x = tape.concat(&[cls, tokens], 1)?;
        let x = tape.add_broadcast(x, p.var(self.pos))?;
        let x = self
            .transformer
            .forward(tape, p, x, &vec![true; b * (n + 1)], None)?;
        let x = self.ln_post.forward(tape, p, x)?;
        tape.matmul(x, p.var(self.proj))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok_emb: ParamId,
    pub pos: ParamId,
    pub transformer: Transformer,
    pub ln_post: LayerNorm,
    pub proj: ParamId,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            store,
            group: GroupName::ClipText,
            rng,
        };
        let d = cfg.d_model;
        Ok(TextEncoder {
            tok_emb: init.normal("tok_emb", &[cfg.vocab_size, d]),
            pos: init.normal("pos", &[cfg.max_text_len, d]),
            transformer: Transformer::new(&mut init, "blocks", cfg.transformer())?,
            ln_post: init.layer_norm("ln_post", d),
            proj: init.normal("proj", &[d, cfg.d_joint]),
        })
    }

    /// Encodes a batch of token sequences to `[batch, max_text_len,
    /// d_joint]` and returns the key mask (`true` at real tokens).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, seqs: &[&TokenSequence]) -> Result<(Var, Vec<bool>)> {
        let len = tape.shape(p.var(self.pos))[0];
        let vocab = tape.shape(p.var(self.tok_emb))[0];
        let b = seqs.len();
        if b == 0 {
            return Err(Error::Empty("text batch".into()));
        }
        let mut ids = Vec::with_capacity(b * len);
        let mut mask = Vec::with_capacity(b * len);
        for s in seqs {
            if s.ids.len() != len {
                return Err(Error::Shape {
                    op: "encode_text",
                    msg: format!("{} ids for max_text_len {len}", s.ids.len()),
                });
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::InvalidArgument(format!(
                    "token id {bad} out of range for vocabulary of {vocab}"
                )));
            }
            ids.extend_from_slice(&s.ids);
            mask.extend(s.valid_mask());
        }
        let emb = tape.gather_rows(p.var(self.tok_emb), &ids)?;
        let d = tape.shape(emb)[1];
        let x = tape.reshape(emb, &[b, len, d])?;
        let x = tape.add_broadcast(x, p.var(self.pos))?;
        let x = self.transformer.forward(tape, p, x, &mask, None)?;
        let x = self.ln_post.forward(tape, p, x)?;
        Ok((tape.matmul(x, p.var(self.proj))?, mask))
    }
}

/// The image and text towers, owning the `clip_image` and `clip_text`
/// groups.
#[derive(Clone, Debug)]
pub struct ClipEncoders {
    pub config: EncoderConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl ClipEncoders {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(ClipEncoders {
            config,
            image: ImageEncoder::new(store, &config, rng)?,
            text: TextEncoder::new(store, &config, rng)?,
        })
    }

    pub fn encode_image(&self, store: &ParamStore, grid: &ImagePatchGrid) -> Result<EmbeddingSequence> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let out = self.image.forward(&mut tape, &p, &[grid])?;
        let t = tape.tensor(out);
        let (s, d) = (t.shape()[1], t.shape()[2]);
        EmbeddingSequence::new(t.reshape(vec![s, d])?, Modality::Image, 0, s)
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<EmbeddingSequence> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (out, _) = self.text.forward(&mut tape, &p, &[tokens])?;
        let t = tape.tensor(out);
        let (s, d) = (t.shape()[1], t.shape()[2]);
        EmbeddingSequence::new(t.reshape(vec![s, d])?, Modality::Text, 0, tokens.length)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.config.vocab_size, self.config.max_text_len)
    }
}

// ----- contrastive objective and zero-shot ---------------------------------------------

/// Symmetric InfoNCE over cosine similarities: rows of `img` and `txt`
/// (`[b, d]`) at the same index are the positive pairs.
pub fn contrastive_loss(tape: &mut Tape, img: Var, txt: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(img).to_vec();
    if shape.len() != 2 || tape.shape(txt) != shape.as_slice() {
        return Err(Error::DimensionMismatch {
            op: "contrastive_loss",
            lhs: shape,
            rhs: tape.shape(txt).to_vec(),
        });
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs a batch of at least 2".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let ni = tape.l2_normalize_rows(img)?;
    let nt = tape.l2_normalize_rows(txt)?;
    let nt_t = tape.transpose(nt)?;
    let sim = tape.matmul(ni, nt_t)?;
    let sim = tape.scale(sim, 1.0 / temperature);
    let sim_t = tape.transpose(sim)?;
    let labels: Vec<usize> = (0..shape[0]).collect();
    let l_img = tape.cross_entropy(sim, &labels)?;
    let l_txt = tape.cross_entropy(sim_t, &labels)?;
    let total = tape.add(l_img, l_txt)?;
    Ok(tape.scale(total, 0.5))
}

/// Picks the CLS rows of a `[batch, seq, d]` encoder output.
pub fn cls_rows(tape: &mut Tape, seq: Var) -> Result<Var> {
    select_position(tape, seq, 0)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index of the prompt embedding with the highest cosine similarity to
/// the image embedding; ties go to the lowest index.
pub fn zero_shot_classify(img_cls: &[f64], prompt_cls: &[Vec<f64>]) -> Result<usize> {
    if prompt_cls.is_empty() {
        return Err(Error::Empty("prompt list".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, prompt) in prompt_cls.iter().enumerate() {
        if prompt.len() != img_cls.len() {
            return Err(Error::DimensionMismatch {
                op: "zero_shot_classify",
                lhs: vec![img_cls.len()],
                rhs: vec![prompt.len()],
            });
        }
        let sim = cosine(img_cls, prompt).ok_or(Error::ZeroNorm(i))?;
        if sim > best.1 {
            best = (i, sim);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_text_len: 6,
            patch_size: 2,
            vocab_size: 50,
            d_joint: 4,
            image_height: 4,
            image_width: 4,
        }
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RawImage {
        RawImage::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let empty = tokenize("", 1024, 16);
        assert_eq!(empty.ids[0], CLS_ID);
        assert_eq!(empty.length, 1);
        assert!(empty.ids[1..].iter().all(|&i| i == PAD_ID));

        let a = tokenize("Black T-Shirt Dress", 1024, 16);
        let b = tokenize("Black T-Shirt Dress", 1024, 16);
        assert_eq!(a, b);
        assert_eq!(a.length, 4);
        assert_eq!(words("Black T-Shirt Dress"), ["black", "t-shirt", "dress"]);
        assert_eq!(a.ids[1], token_id("black", 1024));
        assert_eq!(a.ids[2], token_id("t-shirt", 1024));
        assert_eq!(a.ids[3], token_id("dress", 1024));
        assert!(a.ids[1..4].iter().all(|&i| (N_RESERVED..1024).contains(&i)));
        assert_eq!(a.ids.len(), 16);
    }

    #[test]
    fn tokenize_truncates_and_keeps_keywords_whole() {
        let t = tokenize("a b c d e f g h", 100, 4);
        assert_eq!(t.length, 4);
        assert_eq!(t.ids.len(), 4);
        assert_eq!(words("task0_class3, word7!"), ["task0_class3", "word7"]);
    }

    #[test]
    fn fnv_reference_value() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c.
        assert_eq!(
            token_id("a", 1024),
            N_RESERVED + (0xaf63_dc4c_8601_ec8c_u64 % 1022) as usize
        );
    }

    #[test]
    fn patchify_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(2, 2, &mut rng);
        let grid = patchify(&img, 2).unwrap();
        assert_eq!(grid.patches.len(), 1);
        assert_eq!(grid.patches[0], img.pixels);

        let img = random_image(4, 4, &mut rng);
        let grid = patchify(&img, 2).unwrap();
        assert_eq!((grid.grid_rows, grid.grid_cols), (2, 2));
        for (i, patch) in grid.patches.iter().enumerate() {
            let (gr, gc) = (i / 2, i % 2);
            for py in 0..2 {
                for px in 0..2 {
                    for c in 0..3 {
                        let y = gr * 2 + py;
                        let x = gc * 2 + px;
                        assert_eq!(patch[(py * 2 + px) * 3 + c], img.pixels[(y * 4 + x) * 3 + c]);
                    }
                }
            }
        }
        assert!(patchify(&random_image(4, 6, &mut rng), 4).is_err());
    }

    #[test]
    fn image_encoder_shape_and_position_sensitivity() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = ClipEncoders::new(&mut store, cfg, &mut rng).unwrap();
        let img = random_image(4, 4, &mut rng);
        let grid = patchify(&img, 2).unwrap();
        let out = enc.encode_image(&store, &grid).unwrap();
        assert_eq!(out.embeddings.shape(), &[5, 4]);
        assert_eq!((out.cls_index, out.modality), (0, Modality::Image));

        let mut swapped = grid.clone();
        swapped.patches.swap(0, 3);
        let out2 = enc.encode_image(&store, &swapped).unwrap();
        assert_ne!(out.embeddings, out2.embeddings);
    }

    #[test]
    fn zeroed_residual_branches_give_projected_embeddings() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = ClipEncoders::new(&mut store, cfg, &mut rng).unwrap();
        for block in &enc.image.transformer.blocks {
            *store.get_mut(block.wo.w) = Tensor::zeros(&[8, 8]);
            *store.get_mut(block.ff2.w) = Tensor::zeros(&[16, 8]);
        }
        let grid = patchify(&random_image(4, 4, &mut rng), 2).unwrap();
        let out = enc.encode_image(&store, &grid).unwrap();

        // Trace the residual path by hand: embed, layer-norm, project.
        let w = store.get(enc.image.patch_proj.w);
        let cls = store.get(enc.image.cls);
        let pos = store.get(enc.image.pos);
        let proj = store.get(enc.image.proj);
        let mut rows = vec![cls.data().to_vec()];
        for patch in &grid.patches {
            rows.push((0..8).map(|j| (0..12).map(|i| patch[i] * w.data()[i * 8 + j]).sum()).collect());
        }
        for (r, row) in rows.iter_mut().enumerate() {
            for j in 0..8 {
                row[j] += pos.data()[r * 8 + j];
            }
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let normed: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
            for k in 0..4 {
                let expected: f64 = (0..8).map(|j| normed[j] * proj.data()[j * 4 + k]).sum();
                assert!((out.embeddings.data()[r * 4 + k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_padding_does_not_leak() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = ClipEncoders::new(&mut store, cfg, &mut rng).unwrap();
        let a = enc.tokenize("red shirt");
        let mut b = a.clone();
        // Garbage in the pad region, masked out by `length`.
        b.ids[4] = 17;
        b.ids[5] = 33;
        let ea = enc.encode_text(&store, &a).unwrap();
        let eb = enc.encode_text(&store, &b).unwrap();
        assert_eq!(ea.embeddings.shape(), &[6, 4]);
        assert_eq!(&ea.embeddings.data()[..3 * 4], &eb.embeddings.data()[..3 * 4]);
        assert_eq!(ea.cls(), eb.cls());

        let mut bad = a.clone();
        bad.ids[1] = 50;
        assert!(enc.encode_text(&store, &bad).is_err());
    }

    fn loss_of(img: &[f64], txt: &[f64], b: usize, d: usize, temp: f64) -> f64 {
        let mut tape = Tape::new();
        let i = tape.constant(vec![b, d], img.to_vec()).unwrap();
        let t = tape.constant(vec![b, d], txt.to_vec()).unwrap();
        let l = contrastive_loss(&mut tape, i, t, temp).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn contrastive_loss_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!(loss_of(&eye, &eye, 2, 2, 1e-3) < 1e-12);

        // Every similarity equal: all rows identical.
        let same = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!((loss_of(&same, &same, 3, 2, 0.07) - 3f64.ln()).abs() < 1e-10);

        let img = [0.3, -1.0, 2.0, 0.5, 0.1, 0.9];
        let txt = [1.0, 0.2, -0.4, 0.7, 0.6, 0.6];
        let base = loss_of(&img, &txt, 3, 2, 0.5);
        let scaled: Vec<f64> = img.iter().enumerate().map(|(i, v)| v * [2.0, 2.0, 0.1, 0.1, 7.0, 7.0][i]).collect();
        assert!((loss_of(&scaled, &txt, 3, 2, 0.5) - base).abs() < 1e-12);
        assert!(base >= 0.0);

        let mut tape = Tape::new();
        let z = tape.constant(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let o = tape.constant(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(contrastive_loss(&mut tape, z, o, 1.0), Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn zero_shot_examples() {
        let prompts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(zero_shot_classify(&[0.0, 1.0], &prompts).unwrap(), 1);
        assert_eq!(zero_shot_classify(&[0.0, 9.0], &prompts).unwrap(), 1);
        // Equal similarity to prompts 0 and 1 after dropping prompt 2.
        assert_eq!(zero_shot_classify(&[1.0, 1.0], &prompts[..2]).unwrap(), 0);
        assert!(matches!(zero_shot_classify(&[0.0, 0.0], &prompts), Err(Error::ZeroNorm(0))));
        assert!(zero_shot_classify(&[1.0, 0.0], &[]).is_err());
    }
}
