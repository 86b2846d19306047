//! Text-token to image-patch attention maps from the fusion transformer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ExamplePair, ImageSource, TextSource};
use crate::encoders::words;
use crate::error::{Error, Result};
use crate::model::{FusionModel, ImageFeature};
use crate::pnm::encode_pgm;
use crate::records::write_atomic;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Softmax weights from the token's query to each patch, row-major.
    pub raw: Vec<f64>,
    /// `raw` scaled to `[0, 1]`.
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.grid_cols) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.grid_cols, self.grid_rows, &self.values)
    }

    /// Mean normalised heat over the listed patches and over the rest.
    pub fn inside_outside(&self, patches: &[usize]) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (i, v) in self.values.iter().enumerate() {
            if patches.contains(&i) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Sequence position of the first occurrence of `token` in the tokenised
/// text, counting the leading CLS slot.
pub fn token_position(text: &str, token: &str, max_text_len: usize) -> Result<usize> {
    let ws = words(text);
    let kept = &ws[..ws.len().min(max_text_len - 1)];
    let wanted = token.to_lowercase();
    kept.iter()
        .position(|w| *w == wanted)
        .map(|i| i + 1)
        .ok_or_else(|| Error::TokenNotFound {
            token: token.to_string(),
            available: kept.to_vec(),
        })
}

/// Attention from `token`'s query to every image patch at `layer`
/// (default: last), averaged over heads unless `head` is given.
pub fn attention_map(
    model: &FusionModel,
    pair: &ExamplePair,
    token: &str,
    layer: Option<usize>,
    head: Option<usize>,
) -> Result<AttentionMap> {
    if model.sa.is_none() {
        return Err(Error::InvalidArgument(format!(
            "variant {} has no sequence attention",
            model.variant().as_str()
        )));
    }
    let text = match &pair.text {
        TextSource::Raw(s) => s,
        TextSource::Embedded(_) => {
            return Err(Error::InvalidArgument("attention maps need raw text to locate the token".into()))
        }
    };
    if !matches!(pair.image, ImageSource::Raw(_)) {
        return Err(Error::InvalidArgument("attention maps need a raw image for the patch grid".into()));
    }
    let cfg = &model.config.encoder;
    let pos = token_position(text, token, cfg.max_text_len)?;
    let input = pair.to_model_input(cfg)?;
    let (rows, cols) = match &input.image {
        ImageFeature::Patches(g) => (g.grid_rows, g.grid_cols),
        ImageFeature::Embedded(_) => unreachable!(),
    };

    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &p, &[&input])?;
    let trunk = model.trunk(&mut tape, &p, &enc, true)?;
    let n_layers = trunk.attention.len();
    let layer = layer.unwrap_or(n_layers - 1);
    let trace = trunk.attention.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} out of range for {n_layers} layers"))
    })?;
    let shape = trace.weights.shape();
    let (n_heads, s) = (shape[1], shape[2]);
    let heads: Vec<usize> = match head {
        Some(h) if h < n_heads => vec![h],
        Some(h) => return Err(Error::InvalidArgument(format!("head {h} out of range for {n_heads} heads"))),
        None => (0..n_heads).collect(),
    };
    let query = trunk.s_img + pos;
    let w = trace.weights.data();
    let raw: Vec<f64> = (0..rows * cols)
        .map(|j| {
            let key = 1 + j;
            heads.iter().map(|&h| w[(h * s + query) * s + key]).sum::<f64>() / heads.len() as f64
        })
        .collect();
    Ok(AttentionMap {
        grid_rows: rows,
        grid_cols: cols,
        values: min_max_normalize(&raw),
        raw,
    })
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn write_attention_map(map: &AttentionMap, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    write_atomic(&csv, map.to_csv().as_bytes())?;
    write_atomic(&pgm, &map.to_pgm())?;
    Ok((csv, pgm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_conventions() {
        assert_eq!(min_max_normalize(&[0.25; 4]), vec![0.0; 4]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn token_lookup() {
        assert_eq!(token_position("a Red dress", "red", 16).unwrap(), 2);
        match token_position("a red dress", "blue", 16) {
            Err(Error::TokenNotFound { available, .. }) => assert_eq!(available, ["a", "red", "dress"]),
            other => panic!("{other:?}"),
        }
        assert!(token_position("a b c", "c", 3).is_err());
    }

    #[test]
    fn csv_shape() {
        let map = AttentionMap {
            grid_rows: 2,
            grid_cols: 3,
            raw: vec![0.0; 6],
            values: vec![0.0, 0.5, 1.0, 0.0, 0.0, 0.25],
        };
        let csv = map.to_csv();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.split(',').count() == 3));
        assert_eq!(map.inside_outside(&[2]), (1.0, 0.15));
    }
}
