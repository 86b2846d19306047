//! Contrastive pre-training of the two encoders and zero-shot
//! classification with text prompts.

use std::collections::BTreeMap;

use crate::data::batches;
use crate::encoders::{cls_rows, contrastive_loss, tokenize, zero_shot_classify, ImagePatchGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{FusionModel, ImageFeature, ModelInput, TextFeature};
use crate::optim::{adam_step, AdamConfig, AdamState, GroupName};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 3e-4,
            temperature: 0.1,
            seed: 0,
        }
    }
}

fn raw_parts(inputs: &[ModelInput]) -> Result<(Vec<&ImagePatchGrid>, Vec<&TokenSequence>)> {
    let mut grids = Vec::with_capacity(inputs.len());
    let mut toks = Vec::with_capacity(inputs.len());
    for x in inputs {
        match (&x.image, &x.text) {
            (ImageFeature::Patches(g), TextFeature::Tokens(t)) => {
                grids.push(g);
                toks.push(t);
            }
            _ => return Err(Error::InvalidArgument("pre-training needs raw images and texts".into())),
        }
    }
    Ok((grids, toks))
}

/// Trains only the encoder groups on the symmetric contrastive loss over
/// CLS embeddings. Returns the mean loss per epoch. Batches smaller than
/// two pairs are skipped.
pub fn pretrain_contrastive(model: &mut FusionModel, inputs: &[ModelInput], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if inputs.len() < 2 {
        return Err(Error::InvalidArgument("pre-training needs at least two pairs".into()));
    }
    let (grids, toks) = raw_parts(inputs)?;
    let lrs: BTreeMap<GroupName, f64> = [(GroupName::ClipImage, cfg.lr), (GroupName::ClipText, cfg.lr)].into();
    let saved: Vec<(GroupName, f64)> = model.store.groups().iter().map(|g| (g.name, g.lr)).collect();
    model.store.apply_lrs(&lrs);
    let mut opt = AdamState::new(model.store.groups(), AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for (bi, idx) in batches(inputs.len(), cfg.batch_size, cfg.seed, epoch as u64).iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let g: Vec<&ImagePatchGrid> = idx.iter().map(|&i| grids[i]).collect();
            let t: Vec<&TokenSequence> = idx.iter().map(|&i| toks[i]).collect();
            let img = model.encoders.image.forward(&mut tape, &p, &g)?;
            let (txt, _) = model.encoders.text.forward(&mut tape, &p, &t)?;
            let img = cls_rows(&mut tape, img)?;
            let txt = cls_rows(&mut tape, txt)?;
            let loss = contrastive_loss(&mut tape, img, txt, cfg.temperature)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: bi });
            }
            tape.backward(loss)?;
            model.store.collect_grads(&tape, &p)?;
            adam_step(model.store.groups_mut(), &mut opt)?;
            model.store.clear_grads();
            sum += value * idx.len() as f64;
            n += idx.len();
        }
        losses.push(sum / n.max(1) as f64);
    }
    model.store.apply_lrs(&saved.into_iter().collect());
    Ok(losses)
}

/// Encoder CLS embeddings for images, in chunks.
pub fn image_embeddings(model: &FusionModel, grids: &[&ImagePatchGrid]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(256) {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let v = model.encoders.image.forward(&mut tape, &p, chunk)?;
        let v = cls_rows(&mut tape, v)?;
        let d = tape.shape(v)[1];
        out.extend(tape.value(v).chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Encoder CLS embeddings for texts.
pub fn text_embeddings(model: &FusionModel, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config.encoder;
    let toks: Vec<TokenSequence> = texts.iter().map(|t| tokenize(t, cfg.vocab_size, cfg.max_text_len)).collect();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in toks.chunks(256) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let (v, _) = model.encoders.text.forward(&mut tape, &p, &refs)?;
        let v = cls_rows(&mut tape, v)?;
        let d = tape.shape(v)[1];
        out.extend(tape.value(v).chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Predicted prompt index per image.
pub fn zero_shot_predict(model: &FusionModel, grids: &[&ImagePatchGrid], prompts: &[&str]) -> Result<Vec<usize>> {
    let prompt_emb = text_embeddings(model, prompts)?;
    image_embeddings(model, grids)?
        .iter()
        .map(|img| zero_shot_classify(img, &prompt_emb))
        .collect()
}
