//! Cross-modality fusion: concatenated image/text sequences pass through a
//! transformer (sequence-wise attention), then each task gates the two
//! global embeddings with its own keyless modality attention before an MLP
//! head.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::encoders::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::nn::{select_position, AttentionTrace, Init, Linear, Transformer, TransformerConfig};
use crate::optim::{Bound, GroupName, ParamId, ParamStore};
use crate::tape::{stable_sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Which fusion components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    /// Sequence attention and per-task modality attention.
    Full,
    /// Sequence attention; modalities averaged with a fixed weight of 0.5.
    NoMa,
    /// Encoder CLS embeddings averaged directly, no fusion transformer.
    NoMaNoSa,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [FusionVariant::Full, FusionVariant::NoMa, FusionVariant::NoMaNoSa];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Full => "full",
            FusionVariant::NoMa => "no_ma",
            FusionVariant::NoMaNoSa => "no_ma_no_sa",
        }
    }

    pub fn has_sequence_attention(self) -> bool {
        self != FusionVariant::NoMaNoSa
    }

    pub fn has_modality_attention(self) -> bool {
        self == FusionVariant::Full
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (full, no_ma, no_ma_no_sa)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub d_joint: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_hidden: usize,
}

impl FusionConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_joint,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }
}

// ----- fused sequence -------------------------------------------------------------

/// Image segment followed by text segment, with modality-type embeddings
/// added per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub embeddings: Tensor,
    pub img_range: Range<usize>,
    pub txt_range: Range<usize>,
    pub img_cls_index: usize,
    pub txt_cls_index: usize,
    pub modality_type_embeddings: Tensor,
    /// `true` at positions that may be attended to.
    pub attn_mask: Vec<bool>,
}

/// Row indices into the two-row modality-type table for a fused sequence.
fn type_rows(s_img: usize, s_txt: usize) -> Vec<usize> {
    std::iter::repeat(0)
        .take(s_img)
        .chain(std::iter::repeat(1).take(s_txt))
        .collect()
}

/// Concatenates `img: [b, s_img, d]` and `txt: [b, s_txt, d]` along the
/// sequence axis and adds row 0 / row 1 of `type_emb: [2, d]` to the image /
/// text segments.
pub fn fuse(tape: &mut Tape, img: Var, txt: Var, type_emb: Var) -> Result<Var> {
    let (si, st) = (tape.shape(img).to_vec(), tape.shape(txt).to_vec());
    if si.len() != 3 || st.len() != 3 || si[0] != st[0] || si[2] != st[2] {
        return Err(Error::DimensionMismatch {
            op: "concat_modalities",
            lhs: si,
            rhs: st,
        });
    }
    let x = tape.concat(&[img, txt], 1)?;
    let types = tape.gather_rows(type_emb, &type_rows(si[1], st[1]))?;
    tape.add_broadcast(x, types)
}

pub fn concat_modalities(
    img: &EmbeddingSequence,
    txt: &EmbeddingSequence,
    type_emb: &Tensor,
) -> Result<FusedSequence> {
    if img.dim() != txt.dim() || type_emb.shape() != [2, img.dim()] {
        return Err(Error::DimensionMismatch {
            op: "concat_modalities",
            lhs: img.embeddings.shape().to_vec(),
            rhs: txt.embeddings.shape().to_vec(),
        });
    }
    let (si, st, d) = (img.len(), txt.len(), img.dim());
    let mut tape = Tape::new();
    let a = tape.constant(vec![1, si, d], img.embeddings.data().to_vec())?;
    let b = tape.constant(vec![1, st, d], txt.embeddings.data().to_vec())?;
    let t = tape.leaf(type_emb);
    let fused = fuse(&mut tape, a, b, t)?;
    let mut attn_mask = img.valid_mask();
    attn_mask.extend(txt.valid_mask());
    Ok(FusedSequence {
        embeddings: tape.tensor(fused).reshape(vec![si + st, d])?,
        img_range: 0..si,
        txt_range: si..si + st,
        img_cls_index: img.cls_index,
        txt_cls_index: si + txt.cls_index,
        modality_type_embeddings: type_emb.clone(),
        attn_mask,
    })
}

// ----- sequence-wise attention ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct SequenceAttention {
    pub type_emb: ParamId,
    pub transformer: Transformer,
}

#[derive(Clone, Debug)]
pub struct SequenceAttentionOutput {
    pub img_cls: Vec<f64>,
    pub txt_cls: Vec<f64>,
    /// `[s, d_joint]`.
    pub updated: Tensor,
    pub attention: Vec<AttentionTrace>,
}

impl SequenceAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        let mut init = Init {
            store,
            group: GroupName::CmaSa,
            rng,
        };
        Ok(SequenceAttention {
            type_emb: init.normal("type_emb", &[2, cfg.d_joint]),
            transformer: Transformer::new(&mut init, "blocks", cfg.transformer())?,
        })
    }

    /// Runs the fusion transformer over an already-fused sequence.
    pub fn run(&self, store: &ParamStore, fused: &FusedSequence) -> Result<SequenceAttentionOutput> {
        if !fused.attn_mask.iter().any(|&m| m) {
            return Err(Error::FullyMasked(0));
        }
        let shape = fused.embeddings.shape();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(vec![1, shape[0], shape[1]], fused.embeddings.data().to_vec())?;
        let mut trace = Vec::new();
        let y = self
            .transformer
            .forward(&mut tape, &p, x, &fused.attn_mask, Some(&mut trace))?;
        let updated = tape.tensor(y).reshape(shape.to_vec())?;
        Ok(SequenceAttentionOutput {
            img_cls: updated.row(fused.img_cls_index).to_vec(),
            txt_cls: updated.row(fused.txt_cls_index).to_vec(),
            updated,
            attention: trace,
        })
    }
}

// ----- modality-wise attention ------------------------------------------------------

/// Keyless attention over the two global embeddings:
/// `λ = σ(wᵀI − wᵀT)`, `c = λ·I + (1 − λ)·T`.
///
/// `img` and `txt` are `[b, d]`; with `w = None` the weight is fixed at 0.5.
/// Returns `(λ: [b], c: [b, d])`.
pub fn modality_attention_batch(tape: &mut Tape, img: Var, txt: Var, w: Option<Var>) -> Result<(Var, Var)> {
    let shape = tape.shape(img).to_vec();
    if shape.len() != 2 || tape.shape(txt) != shape.as_slice() {
        return Err(Error::DimensionMismatch {
            op: "modality_attention",
            lhs: shape,
            rhs: tape.shape(txt).to_vec(),
        });
    }
    let b = shape[0];
    let lambda = match w {
        Some(w) => {
            let d = shape[1];
            if tape.shape(w) != [d] {
                return Err(Error::DimensionMismatch {
                    op: "modality_attention",
                    lhs: shape,
                    rhs: tape.shape(w).to_vec(),
                });
            }
            let wc = tape.reshape(w, &[d, 1])?;
            let e_img = tape.matmul(img, wc)?;
            let e_txt = tape.matmul(txt, wc)?;
            let gap = tape.sub(e_img, e_txt)?;
            let gap = tape.reshape(gap, &[b])?;
            tape.sigmoid(gap)
        }
        None => tape.constant(vec![b], vec![0.5; b])?,
    };
    // T + λ(I − T) keeps c = λ·I exact when T = 0.
    let diff = tape.sub(img, txt)?;
    let scaled = tape.mul_rows(diff, lambda)?;
    let c = tape.add(txt, scaled)?;
    Ok((lambda, c))
}

/// Single-example modality attention on plain vectors.
pub fn modality_attention(img_cls: &[f64], txt_cls: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    if img_cls.len() != txt_cls.len() || img_cls.len() != w.len() {
        return Err(Error::DimensionMismatch {
            op: "modality_attention",
            lhs: vec![img_cls.len(), txt_cls.len()],
            rhs: vec![w.len()],
        });
    }
    let e_img: f64 = w.iter().zip(img_cls).map(|(a, b)| a * b).sum();
    let e_txt: f64 = w.iter().zip(txt_cls).map(|(a, b)| a * b).sum();
    let lambda = stable_sigmoid(e_img - e_txt);
    let c = img_cls
        .iter()
        .zip(txt_cls)
        .map(|(i, t)| t + (i - t) * lambda)
        .collect();
    Ok((lambda, c))
}

// ----- task heads -----------------------------------------------------------------------

/// Task-specific modality attention vector and single-hidden-layer MLP.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub spec: TaskSpec,
    /// Absent in variants without modality attention.
    pub w: Option<ParamId>,
    pub hidden: Linear,
    pub out: Linear,
}

impl TaskHead {
    /// Always draws the attention vector so that the remaining parameters
    /// are identical across variants for one seed; it is only stored when
    /// `with_attention` is set.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        spec: TaskSpec,
        cfg: &FusionConfig,
        with_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.n_classes < 2 {
            return Err(Error::Config(format!(
                "task `{}` needs at least 2 classes, got {}",
                spec.name, spec.n_classes
            )));
        }
        let w_init = Tensor::randn(&[cfg.d_joint], crate::nn::INIT_STD, rng);
        let w = with_attention.then(|| store.add(GroupName::CmaMa, format!("{}.w", spec.name), w_init));
        let mut init = Init {
            store,
            group: GroupName::Mlp,
            rng,
        };
        let hidden = init.linear(&format!("{}.hidden", spec.name), cfg.d_joint, cfg.d_hidden);
        let out = init.linear(&format!("{}.out", spec.name), cfg.d_hidden, spec.n_classes);
        Ok(TaskHead { spec, w, hidden, out })
    }

    /// Returns `(logits: [b, n_classes], λ: [b])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, img: Var, txt: Var) -> Result<(Var, Var)> {
        let w = self.w.map(|id| p.var(id));
        let (lambda, c) = modality_attention_batch(tape, img, txt, w)?;
        let h = self.hidden.forward(tape, p, c)?;
        let h = tape.gelu(h);
        Ok((self.out.forward(tape, p, h)?, lambda))
    }
}

/// Sum over tasks of the mean cross-entropy over the examples that carry a
/// label for that task. `labels[t][i]` is example `i`'s label for task `t`.
pub fn multitask_loss(tape: &mut Tape, logits: &[Var], labels: &[Vec<Option<usize>>]) -> Result<Var> {
    if logits.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task logits for {} label columns",
            logits.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&l, task_labels) in logits.iter().zip(labels) {
        let (rows, present): (Vec<usize>, Vec<usize>) = task_labels
            .iter()
            .enumerate()
            .filter_map(|(i, y)| y.map(|y| (i, y)))
            .unzip();
        if rows.is_empty() {
            continue;
        }
        let picked = if rows.len() == tape.shape(l)[0] {
            l
        } else {
            tape.gather_rows(l, &rows)?
        };
        let ce = tape.cross_entropy(picked, &present)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("every label in the batch is absent".into()))
}

/// Picks the global rows of a fused `[b, s, d]` transformer output.
pub fn global_embeddings(tape: &mut Tape, updated: Var, img_cls: usize, txt_cls: usize) -> Result<(Var, Var)> {
    Ok((
        select_position(tape, updated, img_cls)?,
        select_position(tape, updated, txt_cls)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: usize, d: usize, modality: Modality, valid: usize, rng: &mut ChaCha8Rng) -> EmbeddingSequence {
        let t = Tensor::randn(&[rows, d], 1.0, rng);
        EmbeddingSequence::new(t, modality, 0, valid).unwrap()
    }

    #[test]
    fn concat_index_arithmetic_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = seq(5, 4, Modality::Image, 5, &mut rng);
        let txt = seq(16, 4, Modality::Text, 3, &mut rng);
        let f = concat_modalities(&img, &txt, &Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(f.embeddings.shape(), &[21, 4]);
        assert_eq!((f.img_cls_index, f.txt_cls_index), (0, 5));
        assert_eq!(f.img_range, 0..5);
        assert_eq!(f.txt_range, 5..21);
        assert_eq!(&f.embeddings.data()[..20], img.embeddings.data());
        assert_eq!(&f.embeddings.data()[20..], txt.embeddings.data());
        let masked: Vec<usize> = (0..21).filter(|&i| !f.attn_mask[i]).collect();
        assert_eq!(masked, (8..21).collect::<Vec<_>>());

        let types = Tensor::from_rows(&[vec![1.0; 4], vec![-1.0; 4]]).unwrap();
        let f = concat_modalities(&img, &txt, &types).unwrap();
        assert_eq!(f.embeddings.row(0)[0], img.embeddings.row(0)[0] + 1.0);
        assert_eq!(f.embeddings.row(5)[0], txt.embeddings.row(0)[0] - 1.0);

        let other = seq(3, 5, Modality::Text, 3, &mut rng);
        assert!(concat_modalities(&img, &other, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn modality_attention_examples() {
        let i = [1.0, 2.0, -3.0];
        let t = [0.5, -1.0, 4.0];
        let (lambda, c) = modality_attention(&i, &t, &[0.0; 3]).unwrap();
        assert_eq!(lambda, 0.5);
        for k in 0..3 {
            assert!((c[k] - (i[k] + t[k]) / 2.0).abs() < 1e-15);
        }

        // wᵀI = ln 3, wᵀT = 0.
        let w = [3f64.ln(), 0.0, 0.0];
        let (lambda, _) = modality_attention(&[1.0, 5.0, 5.0], &[0.0, 7.0, 7.0], &w).unwrap();
        assert!((lambda - 0.75).abs() < 1e-15);

        let (lambda, c) = modality_attention(&[1000.0], &[0.0], &[1.0]).unwrap();
        assert!(lambda.is_finite() && lambda <= 1.0 && lambda > 0.99);
        assert!(c[0].is_finite());
        let (lambda, _) = modality_attention(&[-1000.0], &[0.0], &[1.0]).unwrap();
        assert!(lambda >= 0.0 && lambda.is_finite());
    }

    #[test]
    fn multitask_loss_masks_absent_labels() {
        let mut tape = Tape::new();
        let l1 = tape
            .constant(vec![4, 2], vec![0.0, 1.0, 2.0, 0.0, 0.5, 0.5, -1.0, 1.0])
            .unwrap();
        let l2 = tape
            .constant(vec![4, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 1.0, 2.0, 0.0, 2.0, 0.0])
            .unwrap();
        let labels = vec![vec![Some(1), None, Some(0), None], vec![None, Some(2), Some(0), Some(1)]];
        let loss = multitask_loss(&mut tape, &[l1, l2], &labels).unwrap();

        let nll = |row: &[f64], y: usize| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[y]
        };
        let t1 = (nll(&[0.0, 1.0], 1) + nll(&[0.5, 0.5], 0)) / 2.0;
        let t2 = (nll(&[0.0, 0.0, 0.0], 2) + nll(&[3.0, 1.0, 2.0], 0) + nll(&[0.0, 2.0, 0.0], 1)) / 3.0;
        assert!((tape.value(loss)[0] - (t1 + t2)).abs() < 1e-14);

        let none = vec![vec![None; 4], vec![None; 4]];
        assert!(multitask_loss(&mut tape, &[l1, l2], &none).is_err());
    }

    #[test]
    fn multitask_loss_is_additive() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![2, 2], vec![0.3, -0.2, 1.0, 0.4]).unwrap();
        let y = vec![Some(0), Some(1)];
        let one = multitask_loss(&mut tape, &[l], &[y.clone()]).unwrap();
        let ce = tape.cross_entropy(l, &[0, 1]).unwrap();
        assert_eq!(tape.value(one), tape.value(ce));
        let two = multitask_loss(&mut tape, &[l, l], &[y.clone(), y]).unwrap();
        assert_eq!(tape.value(two)[0], 2.0 * tape.value(one)[0]);
    }

    #[test]
    fn variant_parsing() {
        for v in FusionVariant::ALL {
            assert_eq!(v.as_str().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("nope".parse::<FusionVariant>().is_err());
    }
}
