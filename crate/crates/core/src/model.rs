//! The complete fusion model: both encoders, the fusion transformer and
//! the per-task heads, with parameters split across the five freezable
//! groups.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::encoders::{ClipEncoders, EmbeddingSequence, EncoderConfig, ImagePatchGrid, Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionVariant, SequenceAttention, TaskHead, TaskSpec};
use crate::nn::AttentionTrace;
use crate::optim::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub tasks: Vec<TaskSpec>,
    pub variant: FusionVariant,
}

impl ModelConfig {
    /// Toy-scale defaults: 64-wide, 2-layer, 4-head towers and fusion
    /// transformer, 32×32 images in 8-pixel patches.
    pub fn toy(tasks: Vec<TaskSpec>) -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            fusion: FusionConfig {
                d_joint: encoder.d_joint,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                d_hidden: encoder.d_joint,
            },
            encoder,
            tasks,
            variant: FusionVariant::Full,
        }
    }

    /// 8-wide, single-layer, two-head model on 8×8 images in 4-pixel
    /// patches; small enough for finite-difference checks.
    pub fn tiny(tasks: Vec<TaskSpec>) -> Self {
        let encoder = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_text_len: 5,
            patch_size: 4,
            vocab_size: 32,
            d_joint: 8,
            image_height: 8,
            image_width: 8,
        };
        ModelConfig {
            fusion: FusionConfig {
                d_joint: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                d_hidden: 8,
            },
            encoder,
            tasks,
            variant: FusionVariant::Full,
        }
    }

    pub fn with_variant(mut self, variant: FusionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fusion.d_joint != self.encoder.d_joint {
            return Err(Error::Config(format!(
                "fusion width {} differs from joint width {}",
                self.fusion.d_joint, self.encoder.d_joint
            )));
        }
        if self.fusion.d_hidden == 0 {
            return Err(Error::Config("d_hidden must be positive".into()));
        }
        if self.variant.has_sequence_attention() {
            self.fusion.transformer().validate()?;
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let ok = !t.name.is_empty() && t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::Config(format!("invalid task name `{}`", t.name)));
            }
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
        }
        Ok(())
    }

    /// Stable `key = value` rendering used for the configuration digest.
    pub fn canonical_text(&self) -> String {
        let e = &self.encoder;
        let f = &self.fusion;
        let mut s = format!(
            "variant = {}\nd_joint = {}\nenc_d_model = {}\nenc_layers = {}\nenc_heads = {}\nenc_d_ff = {}\n\
             max_text_len = {}\npatch_size = {}\nvocab_size = {}\nimage_height = {}\nimage_width = {}\n\
             sa_layers = {}\nsa_heads = {}\nsa_d_ff = {}\nd_hidden = {}\n",
            self.variant,
            e.d_joint,
            e.d_model,
            e.n_layers,
            e.n_heads,
            e.d_ff,
            e.max_text_len,
            e.patch_size,
            e.vocab_size,
            e.image_height,
            e.image_width,
            f.n_layers,
            f.n_heads,
            f.d_ff,
            f.d_hidden
        );
        for t in &self.tasks {
            s.push_str(&format!("task = {}:{}\n", t.name, t.n_classes));
        }
        s
    }

    /// Applies one setting in the [`canonical_text`](Self::canonical_text)
    /// vocabulary. `task = name:classes` appends a task.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, value: &str) -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        let (e, f) = (&mut self.encoder, &mut self.fusion);
        match key {
            "variant" => self.variant = value.parse()?,
            "d_joint" => {
                e.d_joint = num(key, value)?;
                f.d_joint = e.d_joint;
            }
            "enc_d_model" => e.d_model = num(key, value)?,
            "enc_layers" => e.n_layers = num(key, value)?,
            "enc_heads" => e.n_heads = num(key, value)?,
            "enc_d_ff" => e.d_ff = num(key, value)?,
            "max_text_len" => e.max_text_len = num(key, value)?,
            "patch_size" => e.patch_size = num(key, value)?,
            "vocab_size" => e.vocab_size = num(key, value)?,
            "image_height" => e.image_height = num(key, value)?,
            "image_width" => e.image_width = num(key, value)?,
            "sa_layers" => f.n_layers = num(key, value)?,
            "sa_heads" => f.n_heads = num(key, value)?,
            "sa_d_ff" => f.d_ff = num(key, value)?,
            "d_hidden" => f.d_hidden = num(key, value)?,
            "task" => {
                let (name, n) = value
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("expected `name:classes`, got `{value}`")))?;
                self.tasks.push(TaskSpec {
                    name: name.trim().to_string(),
                    n_classes: num(key, n.trim())?,
                });
            }
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Inverse of [`canonical_text`](Self::canonical_text).
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy(Vec::new());
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageFeature {
    Patches(ImagePatchGrid),
    Embedded(EmbeddingSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextFeature {
    Tokens(TokenSequence),
    Embedded(EmbeddingSequence),
}

/// One example as the model consumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub image: ImageFeature,
    pub text: TextFeature,
}

/// Encoded sequences for a batch, ready for fusion.
#[derive(Debug)]
pub struct Encoded {
    /// `[b, s_img, d]`
    pub img: Var,
    /// `[b, s_txt, d]`
    pub txt: Var,
    pub img_mask: Vec<bool>,
    pub txt_mask: Vec<bool>,
    pub img_cls: Vec<usize>,
    pub txt_cls: Vec<usize>,
}

#[derive(Debug)]
pub struct Trunk {
    /// `[b, d]` global image embedding after fusion.
    pub img_global: Var,
    /// `[b, d]` global text embedding after fusion.
    pub txt_global: Var,
    pub s_img: usize,
    pub s_txt: usize,
    pub attention: Vec<AttentionTrace>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Per task, `[b, n_classes]`.
    pub logits: Vec<Var>,
    /// Per task, `[b]` image weight of the modality attention.
    pub lambdas: Vec<Var>,
    pub trunk: Trunk,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: ClipEncoders,
    pub sa: Option<SequenceAttention>,
    pub heads: Vec<TaskHead>,
}

fn stack_sequences(tape: &mut Tape, seqs: &[&EmbeddingSequence], what: &str) -> Result<(Var, Vec<bool>, Vec<usize>)> {
    let d = seqs[0].dim();
    let s = seqs.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut data = Vec::with_capacity(seqs.len() * s * d);
    let mut mask = Vec::with_capacity(seqs.len() * s);
    for e in seqs {
        if e.dim() != d {
            return Err(Error::Shape {
                op: "stack_sequences",
                msg: format!("{what} embeddings of width {} and {d} in one batch", e.dim()),
            });
        }
        data.extend_from_slice(e.embeddings.data());
        data.resize(data.len() + (s - e.len()) * d, 0.0);
        mask.extend((0..s).map(|i| i < e.valid_len));
    }
    let cls = seqs.iter().map(|e| e.cls_index).collect();
    Ok((tape.constant(vec![seqs.len(), s, d], data)?, mask, cls))
}

/// Row `positions[i]` of sequence `i` in `x: [b, s, d]`, giving `[b, d]`.
fn select_rows(tape: &mut Tape, x: Var, positions: &[usize]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
    let idx: Vec<usize> = positions.iter().enumerate().map(|(i, &p)| i * shape[1] + p).collect();
    tape.gather_rows(flat, &idx)
}

impl FusionModel {
    /// Initialises every parameter from `seed`. Models built from the same
    /// seed share all parameters that their variants have in common.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = ClipEncoders::new(&mut store, config.encoder, &mut rng)?;
        let sa = if config.variant.has_sequence_attention() {
            Some(SequenceAttention::new(&mut store, &config.fusion, &mut rng)?)
        } else {
            // Drawn into a scratch store to keep the random stream aligned.
            let mut scratch = ParamStore::new();
            if config.fusion.transformer().validate().is_ok() {
                SequenceAttention::new(&mut scratch, &config.fusion, &mut rng)?;
            }
            None
        };
        let with_attention = config.variant.has_modality_attention();
        let heads = config
            .tasks
            .iter()
            .map(|t| TaskHead::new(&mut store, t.clone(), &config.fusion, with_attention, &mut rng))
            .collect::<Result<_>>()?;
        Ok(FusionModel {
            config,
            store,
            encoders,
            sa,
            heads,
        })
    }

    pub fn variant(&self) -> FusionVariant {
        self.config.variant
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.config.tasks
    }

    /// Runs the encoders on raw inputs, or stacks precomputed sequences.
    /// Each modality must be uniformly raw or precomputed within a batch.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, inputs: &[&ModelInput]) -> Result<Encoded> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let grids: Vec<&ImagePatchGrid> = inputs
            .iter()
            .filter_map(|x| match &x.image {
                ImageFeature::Patches(g) => Some(g),
                ImageFeature::Embedded(_) => None,
            })
            .collect();
        let (img, img_mask, img_cls) = if grids.len() == b {
            let v = self.encoders.image.forward(tape, p, &grids)?;
            let s = tape.shape(v)[1];
            (v, vec![true; b * s], vec![0; b])
        } else if grids.is_empty() {
            let seqs: Vec<&EmbeddingSequence> = inputs
                .iter()
                .map(|x| match &x.image {
                    ImageFeature::Embedded(e) => e,
                    ImageFeature::Patches(_) => unreachable!(),
                })
                .collect();
            stack_sequences(tape, &seqs, "image")?
        } else {
            return Err(Error::InvalidArgument("batch mixes raw and precomputed images".into()));
        };

        let tokens: Vec<&TokenSequence> = inputs
            .iter()
            .filter_map(|x| match &x.text {
                TextFeature::Tokens(t) => Some(t),
                TextFeature::Embedded(_) => None,
            })
            .collect();
        let (txt, txt_mask, txt_cls) = if tokens.len() == b {
            let (v, mask) = self.encoders.text.forward(tape, p, &tokens)?;
            (v, mask, vec![0; b])
        } else if tokens.is_empty() {
            let seqs: Vec<&EmbeddingSequence> = inputs
                .iter()
                .map(|x| match &x.text {
                    TextFeature::Embedded(e) => e,
                    TextFeature::Tokens(_) => unreachable!(),
                })
                .collect();
            stack_sequences(tape, &seqs, "text")?
        } else {
            return Err(Error::InvalidArgument("batch mixes raw and precomputed texts".into()));
        };
        let d = self.config.encoder.d_joint;
        if tape.shape(img)[2] != d || tape.shape(txt)[2] != d {
            return Err(Error::DimensionMismatch {
                op: "encode",
                lhs: tape.shape(img).to_vec(),
                rhs: tape.shape(txt).to_vec(),
            });
        }
        Ok(Encoded {
            img,
            txt,
            img_mask,
            txt_mask,
            img_cls,
            txt_cls,
        })
    }

    /// Global image and text embeddings: after the fusion transformer, or
    /// straight from the encoders when the variant has none.
    pub fn trunk(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, trace: bool) -> Result<Trunk> {
        let (b, s_img) = (tape.shape(enc.img)[0], tape.shape(enc.img)[1]);
        let s_txt = tape.shape(enc.txt)[1];
        let mut attention = Vec::new();
        let (img_global, txt_global) = match &self.sa {
            Some(sa) => {
                let x = fuse(tape, enc.img, enc.txt, p.var(sa.type_emb))?;
                let mut mask = Vec::with_capacity(b * (s_img + s_txt));
                for i in 0..b {
                    mask.extend_from_slice(&enc.img_mask[i * s_img..(i + 1) * s_img]);
                    mask.extend_from_slice(&enc.txt_mask[i * s_txt..(i + 1) * s_txt]);
                }
                let y = sa
                    .transformer
                    .forward(tape, p, x, &mask, trace.then_some(&mut attention))?;
                let txt_pos: Vec<usize> = enc.txt_cls.iter().map(|c| s_img + c).collect();
                (select_rows(tape, y, &enc.img_cls)?, select_rows(tape, y, &txt_pos)?)
            }
            None => (
                select_rows(tape, enc.img, &enc.img_cls)?,
                select_rows(tape, enc.txt, &enc.txt_cls)?,
            ),
        };
        Ok(Trunk {
            img_global,
            txt_global,
            s_img,
            s_txt,
            attention,
        })
    }

    /// Per-task modality attention and MLP over `[b, d]` global embeddings.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, img_global: Var, txt_global: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut lambdas = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (l, lam) = h.forward(tape, p, img_global, txt_global)?;
            logits.push(l);
            lambdas.push(lam);
        }
        Ok((logits, lambdas))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[&ModelInput], trace: bool) -> Result<ForwardOutput> {
        let enc = self.encode(tape, p, inputs)?;
        let trunk = self.trunk(tape, p, &enc, trace)?;
        let (logits, lambdas) = self.heads(tape, p, trunk.img_global, trunk.txt_global)?;
        Ok(ForwardOutput { logits, lambdas, trunk })
    }

    /// Per-task logits for one precomputed image/text pair.
    pub fn forward_embedded(&self, img: &EmbeddingSequence, txt: &EmbeddingSequence) -> Result<Vec<Vec<f64>>> {
        let input = ModelInput {
            image: ImageFeature::Embedded(img.clone()),
            text: TextFeature::Embedded(txt.clone()),
        };
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, &[&input], false)?;
        Ok(out.logits.iter().map(|&l| tape.value(l).to_vec()).collect())
    }

    /// Replaces raw inputs by encoder outputs, in chunks of `batch_size`.
    pub fn encode_inputs(&self, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<ModelInput>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            let refs: Vec<&ModelInput> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let enc = self.encode(&mut tape, &p, &refs)?;
            let (img, txt) = (tape.tensor(enc.img), tape.tensor(enc.txt));
            let (si, st, d) = (img.shape()[1], txt.shape()[1], img.shape()[2]);
            for i in 0..chunk.len() {
                let slice = |t: &Tensor, s: usize| Tensor::new(vec![s, d], t.data()[i * s * d..(i + 1) * s * d].to_vec());
                let valid = |mask: &[bool], s: usize| mask[i * s..(i + 1) * s].iter().filter(|&&m| m).count();
                out.push(ModelInput {
                    image: ImageFeature::Embedded(EmbeddingSequence::new(
                        slice(&img, si)?,
                        Modality::Image,
                        enc.img_cls[i],
                        valid(&enc.img_mask, si),
                    )?),
                    text: TextFeature::Embedded(EmbeddingSequence::new(
                        slice(&txt, st)?,
                        Modality::Text,
                        enc.txt_cls[i],
                        valid(&enc.txt_mask, st),
                    )?),
                });
            }
        }
        Ok(out)
    }

    /// Global `(image, text)` embeddings per input, in chunks of
    /// `batch_size`.
    pub fn global_features(&self, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            let refs: Vec<&ModelInput> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let enc = self.encode(&mut tape, &p, &refs)?;
            let trunk = self.trunk(&mut tape, &p, &enc, false)?;
            let (i, t) = (tape.tensor(trunk.img_global), tape.tensor(trunk.txt_global));
            for r in 0..chunk.len() {
                out.push((i.row(r).to_vec(), t.row(r).to_vec()));
            }
        }
        Ok(out)
    }

    /// Softmax class probabilities, `[task][example][class]`.
    pub fn predict_proba(&self, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = vec![Vec::with_capacity(inputs.len()); self.heads.len()];
        for chunk in inputs.chunks(batch_size.max(1)) {
            let refs: Vec<&ModelInput> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let fwd = self.forward(&mut tape, &p, &refs, false)?;
            for (t, &l) in fwd.logits.iter().enumerate() {
                let probs = tape.softmax(l, 1)?;
                let c = tape.shape(probs)[1];
                out[t].extend(tape.value(probs).chunks(c).map(<[f64]>::to_vec));
            }
        }
        Ok(out)
    }
}
