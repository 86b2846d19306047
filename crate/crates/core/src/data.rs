//! Example pairs, the synthetic multi-task generator, splitting and
//! batching, and the JSONL manifest format.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{patchify, token_id, EmbeddingSequence, EncoderConfig, Modality, RawImage};
use crate::error::{Error, Result};
use crate::fusion::TaskSpec;
use crate::model::{ImageFeature, ModelInput, TextFeature};
use crate::pnm;
use crate::records;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Raw(RawImage),
    Embedded(EmbeddingSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextSource {
    Raw(String),
    Embedded(EmbeddingSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExamplePair {
    pub id: String,
    pub image: ImageSource,
    pub text: TextSource,
    /// Missing tasks are unlabelled for this example.
    pub labels: BTreeMap<String, usize>,
}

impl ExamplePair {
    pub fn to_model_input(&self, cfg: &EncoderConfig) -> Result<ModelInput> {
        let image = match &self.image {
            ImageSource::Raw(img) => {
                if img.height != cfg.image_height || img.width != cfg.image_width {
                    return Err(Error::Shape {
                        op: "to_model_input",
                        msg: format!(
                            "image `{}` is {}x{}, model expects {}x{}",
                            self.id, img.height, img.width, cfg.image_height, cfg.image_width
                        ),
                    });
                }
                ImageFeature::Patches(patchify(img, cfg.patch_size)?)
            }
            ImageSource::Embedded(e) => ImageFeature::Embedded(check_dim(e, cfg.d_joint, &self.id)?.clone()),
        };
        let text = match &self.text {
            TextSource::Raw(s) => TextFeature::Tokens(crate::encoders::tokenize(s, cfg.vocab_size, cfg.max_text_len)),
            TextSource::Embedded(e) => TextFeature::Embedded(check_dim(e, cfg.d_joint, &self.id)?.clone()),
        };
        Ok(ModelInput { image, text })
    }
}

fn check_dim<'a>(e: &'a EmbeddingSequence, d: usize, id: &str) -> Result<&'a EmbeddingSequence> {
    if e.dim() != d {
        return Err(Error::Shape {
            op: "embedding",
            msg: format!("example `{id}` has {}-wide embeddings, expected {d}", e.dim()),
        });
    }
    Ok(e)
}

/// Converts every pair for the model.
pub fn model_inputs(pairs: &[ExamplePair], cfg: &EncoderConfig) -> Result<Vec<ModelInput>> {
    pairs.iter().map(|p| p.to_model_input(cfg)).collect()
}

/// `labels[t][i]`: example `i`'s class for task `t`.
pub fn label_matrix(pairs: &[ExamplePair], tasks: &[TaskSpec]) -> Result<Vec<Vec<Option<usize>>>> {
    for p in pairs {
        for (name, &c) in &p.labels {
            let task = tasks
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::InvalidArgument(format!("example `{}` labels unknown task `{name}`", p.id)))?;
            if c >= task.n_classes {
                return Err(Error::InvalidArgument(format!(
                    "example `{}`: class {c} out of range for task `{name}` with {} classes",
                    p.id, task.n_classes
                )));
            }
        }
    }
    Ok(tasks
        .iter()
        .map(|t| pairs.iter().map(|p| p.labels.get(&t.name).copied()).collect())
        .collect())
}

// ----- synthetic generator ---------------------------------------------------------------

pub const MAX_SYNTH_TASKS: usize = 4;
const DISTRACTOR_VOCAB: usize = 200;
const COLOR_JITTER: i32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub name: String,
    pub n_classes: usize,
    /// Probability that the text carries this task's class keyword.
    pub text_relevance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub tasks: Vec<SynthTask>,
    /// Probability that a task's image region is replaced by noise.
    pub image_noise_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    pub vocab_size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl SynthConfig {
    pub fn new(n_examples: usize, tasks: Vec<SynthTask>, image_noise_rate: f64, seed: u64) -> Self {
        SynthConfig {
            n_examples,
            tasks,
            image_noise_rate,
            seed,
            image_size: 32,
            vocab_size: 1024,
            min_distractors: 4,
            max_distractors: 8,
        }
    }

    /// Named presets: `mrwpa-like` (three attributes with decreasing text
    /// relevance), `aligned` (one task, keyword always present, clean
    /// images) and `two-task`.
    pub fn preset(name: &str, n_examples: usize, seed: u64) -> Result<Self> {
        let task = |name: &str, n_classes, rho| SynthTask {
            name: name.into(),
            n_classes,
            text_relevance: rho,
        };
        let (tasks, eta) = match name {
            "mrwpa-like" => (
                vec![
                    task("colorlike", 8, 0.67),
                    task("patternlike", 6, 0.25),
                    task("stylelike", 8, 0.15),
                ],
                0.3,
            ),
            "mrwpa-like-clean-text" => (
                vec![
                    task("colorlike", 8, 1.0),
                    task("patternlike", 6, 1.0),
                    task("stylelike", 8, 1.0),
                ],
                0.3,
            ),
            "aligned" => (vec![task("object", 8, 1.0)], 0.0),
            "two-task" => (vec![task("alpha", 4, 0.5), task("beta", 3, 0.5)], 0.25),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected mrwpa-like, mrwpa-like-clean-text, aligned or two-task)"
                )))
            }
        };
        Ok(SynthConfig::new(n_examples, tasks, eta, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if self.tasks.len() > MAX_SYNTH_TASKS {
            return Err(Error::Config(format!(
                "{} tasks but the image has only {MAX_SYNTH_TASKS} regions",
                self.tasks.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.image_noise_rate) {
            return Err(Error::Config(format!("image noise rate {} outside [0, 1]", self.image_noise_rate)));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if t.n_classes < 2 {
                return Err(Error::Config(format!("task `{}` needs at least 2 classes", t.name)));
            }
            if !(0.0..=1.0).contains(&t.text_relevance) {
                return Err(Error::Config(format!(
                    "task `{}` text relevance {} outside [0, 1]",
                    t.name, t.text_relevance
                )));
            }
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
        }
        if self.image_size < 2 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!("image size {} must be even", self.image_size)));
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::Config("min_distractors exceeds max_distractors".into()));
        }
        if self.vocab_size <= crate::encoders::N_RESERVED {
            return Err(Error::Config(format!("vocabulary of {} is too small", self.vocab_size)));
        }
        let mut seen = BTreeMap::new();
        for (k, t) in self.tasks.iter().enumerate() {
            for c in 0..t.n_classes {
                let word = keyword(k, c);
                if let Some(prev) = seen.insert(token_id(&word, self.vocab_size), word.clone()) {
                    return Err(Error::Config(format!("keywords `{prev}` and `{word}` share a token id")));
                }
            }
        }
        Ok(())
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec {
                name: t.name.clone(),
                n_classes: t.n_classes,
            })
            .collect()
    }

    pub fn region(&self, task: usize) -> Region {
        Region::quadrant(task, self.image_size)
    }
}

/// An axis-aligned block of pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    /// Quadrant `k` in reading order.
    pub fn quadrant(k: usize, size: usize) -> Self {
        let half = size / 2;
        Region {
            y0: (k / 2) * half,
            x0: (k % 2) * half,
            height: half,
            width: half,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.height).contains(&y) && (self.x0..self.x0 + self.width).contains(&x)
    }

    /// Row-major indices of the patches lying entirely inside the region.
    pub fn patch_indices(&self, patch_size: usize, grid_cols: usize) -> Vec<usize> {
        let rows = (self.y0 / patch_size)..(self.y0 + self.height) / patch_size;
        let cols = (self.x0 / patch_size)..(self.x0 + self.width) / patch_size;
        rows.flat_map(|r| cols.clone().map(move |c| r * grid_cols + c)).collect()
    }
}

pub fn keyword(task: usize, class: usize) -> String {
    format!("task{task}_class{class}")
}

/// Fully saturated hue `class / n_classes`, quantised to 8 bits.
pub fn class_color(class: usize, n_classes: usize) -> [f64; 3] {
    let h = 6.0 * class as f64 / n_classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (v * 255.0).round() / 255.0)
}

/// Distractor words whose token ids avoid every keyword id.
fn distractors(cfg: &SynthConfig) -> Vec<String> {
    let reserved: BTreeSet<usize> = cfg
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.n_classes).map(move |c| token_id(&keyword(k, c), cfg.vocab_size)))
        .collect();
    (0..)
        .map(|j| format!("w{j}"))
        .filter(|w| !reserved.contains(&token_id(w, cfg.vocab_size)))
        .take(DISTRACTOR_VOCAB)
        .collect()
}

fn byte(v: u8) -> f64 {
    f64::from(v) / 255.0
}

/// Generates `cfg.n_examples` pairs. Each task owns one image quadrant,
/// painted in a jittered class colour unless it is left as noise with
/// probability `image_noise_rate`; the class keyword joins the distractor
/// text with probability `text_relevance`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ExamplePair>> {
    cfg.validate()?;
    let vocab = distractors(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let mut out = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let pixels = (0..size * size * 3).map(|_| byte(rng.gen())).collect();
        let mut img = RawImage::new(size, size, pixels)?;
        let mut labels = BTreeMap::new();
        let mut classes = Vec::with_capacity(cfg.tasks.len());
        for (k, task) in cfg.tasks.iter().enumerate() {
            let c = rng.gen_range(0..task.n_classes);
            classes.push(c);
            labels.insert(task.name.clone(), c);
            if rng.gen::<f64>() < cfg.image_noise_rate {
                continue;
            }
            let base = class_color(c, task.n_classes);
            let r = cfg.region(k);
            for y in r.y0..r.y0 + r.height {
                for x in r.x0..r.x0 + r.width {
                    let px = base.map(|v| {
                        let j = rng.gen_range(-COLOR_JITTER..=COLOR_JITTER);
                        byte((((v * 255.0).round() as i32) + j).clamp(0, 255) as u8)
                    });
                    img.set_pixel(y, x, px);
                }
            }
        }
        let n_words = rng.gen_range(cfg.min_distractors..=cfg.max_distractors);
        let mut words: Vec<String> = (0..n_words).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
        for (k, task) in cfg.tasks.iter().enumerate() {
            if rng.gen::<f64>() < task.text_relevance {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, keyword(k, classes[k]));
            }
        }
        out.push(ExamplePair {
            id: format!("ex{i:06}"),
            image: ImageSource::Raw(img),
            text: TextSource::Raw(words.join(" ")),
            labels,
        });
    }
    Ok(out)
}

/// SHA-256 over ids, labels, texts and image/embedding bytes in order.
pub fn dataset_digest(pairs: &[ExamplePair]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id.as_bytes());
        h.update([0]);
        for (k, v) in &p.labels {
            h.update(k.as_bytes());
            h.update((*v as u64).to_le_bytes());
        }
        let seq = |h: &mut Sha256, e: &EmbeddingSequence| {
            h.update(e.embeddings.to_le_bytes());
            h.update((e.valid_len as u64).to_le_bytes());
        };
        match &p.image {
            ImageSource::Raw(img) => {
                for v in &img.pixels {
                    h.update(v.to_le_bytes());
                }
            }
            ImageSource::Embedded(e) => seq(&mut h, e),
        }
        match &p.text {
            TextSource::Raw(s) => h.update(s.as_bytes()),
            TextSource::Embedded(e) => seq(&mut h, e),
        }
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ----- splitting and batching ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ExamplePair>,
    pub validation: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
    pub fractions: [f64; 3],
}

/// Part sizes for `n` items: floors first, then the leftover items go one
/// each to the parts with the largest fractional remainders (ties to the
/// earlier part).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let exact = fractions.map(|f| f * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    Ok(sizes)
}

/// Seeded shuffle, then contiguous train/validation/test cuts.
pub fn split(pairs: &[ExamplePair], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if pairs.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let sizes = split_sizes(pairs.len(), fractions)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| pairs[i].clone()).collect();
    Ok(DatasetSplit {
        train: take(0..sizes[0]),
        validation: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..pairs.len()),
        fractions,
    })
}

/// Index batches over `n` items, reshuffled per epoch with `seed ^ epoch`.
/// The final short batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

// ----- manifests -------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TASKS_FILE: &str = "tasks.json";

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_embedding_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_embedding_path: Option<String>,
    labels: BTreeMap<String, Option<usize>>,
}

/// Embedding file: records `embeddings` `[s, d]`, and optionally scalar
/// `valid_len` and `cls_index` (defaults: all rows valid, position 0).
pub fn read_embedding_file(path: &Path, modality: Modality) -> Result<EmbeddingSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs = records::read_records(&mut bytes.as_slice())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let find = |name: &str| recs.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let emb = find("embeddings")
        .ok_or_else(|| Error::Format(format!("{}: no `embeddings` record", path.display())))?
        .clone();
    if emb.rank() != 2 {
        return Err(Error::Format(format!("{}: embeddings must be [s, d]", path.display())));
    }
    let index = |name: &str, default: usize| -> Result<usize> {
        match find(name) {
            None => Ok(default),
            Some(t) if t.numel() == 1 && t.data()[0] >= 0.0 && t.data()[0].fract() == 0.0 => Ok(t.data()[0] as usize),
            Some(_) => Err(Error::Format(format!("{}: `{name}` must be a non-negative integer", path.display()))),
        }
    };
    let valid_len = index("valid_len", emb.shape()[0])?;
    let cls_index = index("cls_index", 0)?;
    EmbeddingSequence::new(emb, modality, cls_index, valid_len)
}

pub fn write_embedding_file(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    let mut buf = Vec::new();
    let valid = Tensor::scalar(seq.valid_len as f64);
    let cls = Tensor::scalar(seq.cls_index as f64);
    records::write_records(
        &mut buf,
        &[
            ("embeddings".into(), &seq.embeddings),
            ("valid_len".into(), &valid),
            ("cls_index".into(), &cls),
        ],
    )
    .map_err(|e| Error::io(path, e))?;
    records::write_atomic(path, &buf)
}

/// Parses a JSONL manifest. Relative paths resolve against the manifest's
/// directory. `d_joint`, when given, is enforced on embedding files.
pub fn load_manifest(path: &Path, d_joint: Option<usize>) -> Result<Vec<ExamplePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest { line: line_no, msg };
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !ids.insert(m.id.clone()) {
            return Err(err(format!("duplicate id `{}`", m.id)));
        }
        let resolve = |p: &str| -> PathBuf { base.join(p) };
        let embedded = |p: &str, modality| -> Result<EmbeddingSequence> {
            let seq = read_embedding_file(&resolve(p), modality).map_err(|e| err(e.to_string()))?;
            if let Some(d) = d_joint {
                if seq.dim() != d {
                    return Err(err(format!("embedding `{p}` has width {}, expected {d}", seq.dim())));
                }
            }
            Ok(seq)
        };
        let text = match (m.text, m.text_embedding_path) {
            (Some(t), None) => TextSource::Raw(t),
            (None, Some(p)) => TextSource::Embedded(embedded(&p, Modality::Text)?),
            (None, None) => return Err(err("missing both `text` and `text_embedding_path`".into())),
            (Some(_), Some(_)) => return Err(err("both `text` and `text_embedding_path` given".into())),
        };
        let image = match (m.image_path, m.image_embedding_path) {
            (Some(p), None) => ImageSource::Raw(pnm::read_ppm(&resolve(&p)).map_err(|e| err(e.to_string()))?),
            (None, Some(p)) => ImageSource::Embedded(embedded(&p, Modality::Image)?),
            (None, None) => return Err(err("missing both `image_path` and `image_embedding_path`".into())),
            (Some(_), Some(_)) => return Err(err("both `image_path` and `image_embedding_path` given".into())),
        };
        let labels: BTreeMap<String, usize> = m.labels.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
        if labels.is_empty() {
            return Err(err(format!("example `{}` has no labels", m.id)));
        }
        out.push(ExamplePair {
            id: m.id,
            image,
            text,
            labels,
        });
    }
    Ok(out)
}

/// Writes `manifest.jsonl` into `dir`, with images under `images/` and
/// embedding files under `embeddings/`.
pub fn write_manifest(dir: &Path, pairs: &[ExamplePair]) -> Result<PathBuf> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    let mut body = String::new();
    for p in pairs {
        if p.id.is_empty() || p.id.contains(['/', '\\']) || p.id.starts_with('.') {
            return Err(Error::InvalidArgument(format!("id `{}` is not usable as a file name", p.id)));
        }
        let mut line = ManifestLine {
            id: p.id.clone(),
            text: None,
            text_embedding_path: None,
            image_path: None,
            image_embedding_path: None,
            labels: p.labels.iter().map(|(k, &v)| (k.clone(), Some(v))).collect(),
        };
        match &p.image {
            ImageSource::Raw(img) => {
                mkdir(&dir.join("images"))?;
                let rel = format!("images/{}.ppm", p.id);
                records::write_atomic(&dir.join(&rel), &pnm::encode_ppm(img))?;
                line.image_path = Some(rel);
            }
            ImageSource::Embedded(e) => {
                mkdir(&dir.join("embeddings"))?;
                let rel = format!("embeddings/{}.image.rec", p.id);
                write_embedding_file(&dir.join(&rel), e)?;
                line.image_embedding_path = Some(rel);
            }
        }
        match &p.text {
            TextSource::Raw(s) => line.text = Some(s.clone()),
            TextSource::Embedded(e) => {
                mkdir(&dir.join("embeddings"))?;
                let rel = format!("embeddings/{}.text.rec", p.id);
                write_embedding_file(&dir.join(&rel), e)?;
                line.text_embedding_path = Some(rel);
            }
        }
        body.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        body.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    records::write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskEntry {
    name: String,
    n_classes: usize,
}

/// A dataset directory: `manifest.jsonl` plus `tasks.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSpec>,
    pub pairs: Vec<ExamplePair>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_manifest(dir, &self.pairs)?;
        let entries: Vec<TaskEntry> = self
            .tasks
            .iter()
            .map(|t| TaskEntry {
                name: t.name.clone(),
                n_classes: t.n_classes,
            })
            .collect();
        let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Format(e.to_string()))?;
        records::write_atomic(&dir.join(TASKS_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path, d_joint: Option<usize>) -> Result<Self> {
        let tasks_path = dir.join(TASKS_FILE);
        let text = std::fs::read_to_string(&tasks_path).map_err(|e| Error::io(&tasks_path, e))?;
        let entries: Vec<TaskEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", tasks_path.display())))?;
        let tasks: Vec<TaskSpec> = entries
            .into_iter()
            .map(|e| TaskSpec {
                name: e.name,
                n_classes: e.n_classes,
            })
            .collect();
        let pairs = load_manifest(&dir.join(MANIFEST_FILE), d_joint)?;
        label_matrix(&pairs, &tasks)?;
        Ok(Dataset { tasks, pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_floor_then_distribute() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_sizes(7, [1.0, 0.0, 0.0]).unwrap(), [7, 0, 0]);
        assert_eq!(split_sizes(11, [0.8, 0.1, 0.1]).unwrap(), [9, 1, 1]);
        assert_eq!(split_sizes(3, [0.5, 0.25, 0.25]).unwrap(), [1, 1, 1]);
        assert!(split_sizes(3, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn batches_keep_short_tail() {
        let b = batches(10, 4, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, batches(10, 4, 3, 0));
        assert_ne!(b, batches(10, 4, 3, 1));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn region_patches() {
        let r = Region::quadrant(3, 32);
        assert_eq!((r.y0, r.x0), (16, 16));
        assert_eq!(r.patch_indices(8, 4), vec![10, 11, 14, 15]);
        assert_eq!(Region::quadrant(0, 32).patch_indices(8, 4), vec![0, 1, 4, 5]);
    }

    #[test]
    fn too_many_tasks_rejected() {
        let t = |i: usize| SynthTask {
            name: format!("t{i}"),
            n_classes: 2,
            text_relevance: 0.5,
        };
        let cfg = SynthConfig::new(4, (0..5).map(t).collect(), 0.0, 0);
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn class_colors_are_distinct() {
        for n in [2, 6, 8] {
            let cols: BTreeSet<String> = (0..n).map(|c| format!("{:?}", class_color(c, n))).collect();
            assert_eq!(cols.len(), n);
        }
    }
}
