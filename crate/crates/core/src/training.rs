//! The three-stage schedule: warm-up with frozen encoders, end-to-end
//! training, and tuning of the modality attention and task heads only.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{batches, label_matrix, model_inputs, ExamplePair};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{multitask_loss, TaskSpec};
use crate::model::{FusionModel, ModelInput};
use crate::optim::{adam_step, AdamConfig, AdamState, GroupName};
use crate::records::{self, read_exact, read_records, read_u64, write_records};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WarmUp,
    EndToEnd,
    Tuning,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::WarmUp, Stage::EndToEnd, Stage::Tuning];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::WarmUp => "warm_up",
            Stage::EndToEnd => "end_to_end",
            Stage::Tuning => "tuning",
        }
    }

    /// Groups that train in this stage.
    pub fn trainable(self) -> &'static [GroupName] {
        match self {
            Stage::WarmUp => &[GroupName::CmaSa, GroupName::CmaMa, GroupName::Mlp],
            Stage::EndToEnd => &GroupName::ALL,
            Stage::Tuning => &[GroupName::CmaMa, GroupName::Mlp],
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    fn from_code(c: u64) -> Result<Self> {
        Stage::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown stage code {c}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    /// Zero freezes a group.
    pub group_lrs: BTreeMap<GroupName, f64>,
    pub batch_size: usize,
}

impl StagePlan {
    /// Rate `lr` on the stage's trainable groups, zero elsewhere.
    pub fn new(stage: Stage, epochs: usize, lr: f64, batch_size: usize) -> Self {
        let group_lrs = GroupName::ALL
            .into_iter()
            .map(|g| (g, if stage.trainable().contains(&g) { lr } else { 0.0 }))
            .collect();
        StagePlan {
            stage,
            epochs,
            group_lrs,
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("{}: epochs and batch size must be positive", self.stage)));
        }
        for g in GroupName::ALL {
            let lr = self.group_lrs.get(&g).copied().unwrap_or(0.0);
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{}: learning rate {lr} for {g}", self.stage)));
            }
            let should_train = self.stage.trainable().contains(&g);
            if should_train != (lr > 0.0) {
                return Err(Error::Config(format!(
                    "{}: group {g} must be {} (lr {lr})",
                    self.stage,
                    if should_train { "trained" } else { "frozen" }
                )));
            }
        }
        Ok(())
    }
}

// ----- configuration ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Per-group overrides of `lr`.
    pub group_lr: BTreeMap<GroupName, f64>,
    pub adam: AdamConfig,
    /// Warm-up, end-to-end and tuning epochs; zero skips a stage.
    pub epochs: [usize; 3],
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale settings.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            group_lr: BTreeMap::new(),
            adam: AdamConfig::default(),
            epochs: [10, 10, 10],
            seed: 0,
        }
    }

    /// Full-scale settings: batch 1024, rate 1e-5, weight decay 1e-4,
    /// twenty epochs per stage.
    pub fn large() -> Self {
        TrainConfig {
            batch_size: 1024,
            lr: 1e-5,
            adam: AdamConfig {
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            epochs: [20, 20, 20],
            ..TrainConfig::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown train preset `{other}` (expected toy or large)"))),
        }
    }

    pub const KEYS: [&'static str; 10] = [
        "batch_size",
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "epsilon",
        "warmup_epochs",
        "end_to_end_epochs",
        "tuning_epochs",
        "seed",
    ];

    /// Applies one `key = value` setting. Group rates use `lr.<group>`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "warmup_epochs" => self.epochs[0] = parse(key, value)?,
            "end_to_end_epochs" => self.epochs[1] = parse(key, value)?,
            "tuning_epochs" => self.epochs[2] = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => match key.strip_prefix("lr.").and_then(GroupName::parse) {
                Some(g) => {
                    self.group_lr.insert(g, parse(key, value)?);
                }
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are
    /// skipped; unknown keys are an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn plan(&self, stage: Stage) -> StagePlan {
        let idx = Stage::ALL.iter().position(|&s| s == stage).unwrap();
        let mut plan = StagePlan::new(stage, self.epochs[idx], self.lr, self.batch_size);
        for g in stage.trainable() {
            if let Some(&lr) = self.group_lr.get(g) {
                plan.group_lrs.insert(*g, lr);
            }
        }
        plan
    }
}

// ----- labelled inputs -------------------------------------------------------------------

/// Model-ready inputs with a `[task][example]` label matrix.
#[derive(Clone, Debug)]
pub struct LabeledInputs {
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl LabeledInputs {
    pub fn from_pairs(pairs: &[ExamplePair], tasks: &[TaskSpec], cfg: &EncoderConfig) -> Result<Self> {
        Ok(LabeledInputs {
            inputs: model_inputs(pairs, cfg)?,
            labels: label_matrix(pairs, tasks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch_labels(&self, idx: &[usize]) -> Vec<Vec<Option<usize>>> {
        self.labels.iter().map(|col| idx.iter().map(|&i| col[i]).collect()).collect()
    }
}

/// What a stage can precompute once because the layers producing it are
/// frozen for the whole stage.
enum Features {
    Raw(Vec<ModelInput>),
    Encoded(Vec<ModelInput>),
    Global(Vec<(Vec<f64>, Vec<f64>)>),
}

impl Features {
    fn prepare(model: &FusionModel, inputs: &[ModelInput], batch: usize) -> Result<Self> {
        let frozen = |g| model.store.group(g).frozen;
        let encoders_frozen = frozen(GroupName::ClipImage) && frozen(GroupName::ClipText);
        let trunk_frozen = encoders_frozen && (model.sa.is_none() || frozen(GroupName::CmaSa));
        Ok(if trunk_frozen {
            Features::Global(model.global_features(inputs, batch)?)
        } else if encoders_frozen {
            Features::Encoded(model.encode_inputs(inputs, batch)?)
        } else {
            Features::Raw(inputs.to_vec())
        })
    }

    /// Per-task logit tensors for the examples at `idx`.
    fn logits(&self, model: &FusionModel, tape: &mut Tape, p: &crate::optim::Bound, idx: &[usize]) -> Result<Vec<crate::Var>> {
        match self {
            Features::Raw(x) | Features::Encoded(x) => {
                let refs: Vec<&ModelInput> = idx.iter().map(|&i| &x[i]).collect();
                Ok(model.forward(tape, p, &refs, false)?.logits)
            }
            Features::Global(g) => {
                let d = g[idx[0]].0.len();
                let img: Vec<f64> = idx.iter().flat_map(|&i| g[i].0.iter().copied()).collect();
                let txt: Vec<f64> = idx.iter().flat_map(|&i| g[i].1.iter().copied()).collect();
                let img = tape.constant(vec![idx.len(), d], img)?;
                let txt = tape.constant(vec![idx.len(), d], txt)?;
                Ok(model.heads(tape, p, img, txt)?.0)
            }
        }
    }
}

/// Summed per-task mean cross-entropy and per-task accuracy of the model
/// on `data`, evaluated in chunks.
fn validate(model: &FusionModel, feats: &Features, data: &LabeledInputs, batch: usize) -> Result<(f64, Vec<f64>)> {
    let n_tasks = data.labels.len();
    let mut ce = vec![0.0; n_tasks];
    let mut correct = vec![0usize; n_tasks];
    let mut count = vec![0usize; n_tasks];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let logits = feats.logits(model, &mut tape, &p, chunk)?;
        for (t, &l) in logits.iter().enumerate() {
            let c = tape.shape(l)[1];
            for (row, z) in tape.value(l).chunks(c).enumerate() {
                let Some(y) = data.labels[t][chunk[row]] else { continue };
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce[t] += lse - z[y];
                count[t] += 1;
                if argmax(z) == y {
                    correct[t] += 1;
                }
            }
        }
    }
    let loss = (0..n_tasks).filter(|&t| count[t] > 0).map(|t| ce[t] / count[t] as f64).sum();
    let acc = (0..n_tasks)
        .map(|t| if count[t] > 0 { correct[t] as f64 / count[t] as f64 } else { f64::NAN })
        .collect();
    Ok((loss, acc))
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean_defined(v: &[f64]) -> f64 {
    let vals: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

// ----- reports ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based within the stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the starting point.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
}

// ----- checkpoints -----------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shuffling state: the next epoch's order is drawn from `seed ^ epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub stage: Stage,
    /// Epochs completed in `stage` when the snapshot was taken.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// `"group/name"` with the tensor, in store order.
    pub params: Vec<(String, Tensor)>,
    pub group_lrs: BTreeMap<GroupName, f64>,
    pub optimizer: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(model: &FusionModel, stage: Stage, epoch: usize, val: (f64, f64), optimizer: &AdamState, rng: RngState) -> Self {
        Checkpoint {
            config_digest: model.config.digest(),
            stage,
            epoch,
            val_accuracy: val.0,
            val_loss: val.1,
            params: model.store.named().map(|(n, t)| (n, strip(t))).collect(),
            group_lrs: model.store.groups().iter().map(|g| (g.name, g.lr)).collect(),
            optimizer: optimizer.clone(),
            rng,
        }
    }

    /// Copies the parameters into `model`, whose configuration must match.
    pub fn restore(&self, model: &mut FusionModel) -> Result<()> {
        if self.config_digest != model.config.digest() {
            return Err(Error::DigestMismatch);
        }
        let mut by_name: BTreeMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for g in model.store.groups_mut() {
            for p in &mut g.params {
                let key = format!("{}/{}", g.name, p.name);
                let t = by_name
                    .remove(key.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{key}`")))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "restore",
                        lhs: t.shape().to_vec(),
                        rhs: p.tensor.shape().to_vec(),
                    });
                }
                p.tensor = t.clone();
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown parameter `{extra}`")));
        }
        model.store.apply_lrs(&self.group_lrs);
        Ok(())
    }

    /// Copies only the listed groups, e.g. pre-trained encoders into a
    /// model of another variant. Shapes must agree; the digest is not
    /// checked. Returns the number of tensors copied.
    pub fn restore_groups(&self, model: &mut FusionModel, groups: &[GroupName]) -> Result<usize> {
        let by_name: BTreeMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut copied = 0;
        for g in model.store.groups_mut().iter_mut().filter(|g| groups.contains(&g.name)) {
            for p in &mut g.params {
                let key = format!("{}/{}", g.name, p.name);
                let t = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{key}`")))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "restore",
                        lhs: t.shape().to_vec(),
                        rhs: p.tensor.shape().to_vec(),
                    });
                }
                p.tensor = (*t).clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);

        let a = &self.optimizer.config;
        let meta = [
            ("stage", Tensor::scalar(self.stage.code() as f64)),
            ("epoch", Tensor::scalar(self.epoch as f64)),
            ("val_accuracy", Tensor::scalar(self.val_accuracy)),
            ("val_loss", Tensor::scalar(self.val_loss)),
            (
                "group_lrs",
                Tensor::vector(GroupName::ALL.iter().map(|g| self.group_lrs.get(g).copied().unwrap_or(0.0)).collect())
                    .expect("five groups"),
            ),
            ("adam", Tensor::vector(vec![a.beta1, a.beta2, a.epsilon, a.weight_decay]).expect("four values")),
        ];
        let meta: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.to_string(), t)).collect();
        write_records(&mut out, &meta).expect("writing to a Vec");

        let params: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_records(&mut out, &params).expect("writing to a Vec");

        let moments: Vec<(String, Tensor)> = self
            .optimizer
            .m
            .iter()
            .map(|(k, v)| (format!("m/{k}"), v))
            .chain(self.optimizer.v.iter().map(|(k, v)| (format!("v/{k}"), v)))
            .map(|(k, v)| (k, Tensor::vector(v.clone()).expect("parameters are non-empty")))
            .collect();
        let moments: Vec<(String, &Tensor)> = moments.iter().map(|(n, t)| (n.clone(), t)).collect();
        records::write_u64(&mut out, self.optimizer.step_count).expect("writing to a Vec");
        write_records(&mut out, &moments).expect("writing to a Vec");

        records::write_u64(&mut out, self.rng.seed).expect("writing to a Vec");
        records::write_u64(&mut out, self.rng.next_epoch).expect("writing to a Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut version = [0u8; 4];
        read_exact(r, &mut version, "version")?;
        let version = u32::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut config_digest = [0u8; 32];
        read_exact(r, &mut config_digest, "config digest")?;

        let meta: BTreeMap<String, Tensor> = read_records(r)?.into_iter().collect();
        let get = |k: &str, n: usize| -> Result<&[f64]> {
            match meta.get(k) {
                Some(t) if t.numel() == n => Ok(t.data()),
                _ => Err(Error::Format(format!("checkpoint metadata `{k}` missing or malformed"))),
            }
        };
        let stage = Stage::from_code(get("stage", 1)?[0] as u64)?;
        let epoch = get("epoch", 1)?[0] as usize;
        let val_accuracy = get("val_accuracy", 1)?[0];
        let val_loss = get("val_loss", 1)?[0];
        let lrs = get("group_lrs", GroupName::ALL.len())?;
        let group_lrs = GroupName::ALL.into_iter().zip(lrs.iter().copied()).collect();
        let a = get("adam", 4)?;
        let config = AdamConfig {
            beta1: a[0],
            beta2: a[1],
            epsilon: a[2],
            weight_decay: a[3],
        };

        let params = read_records(r)?;
        let step_count = read_u64(r, "optimizer step count")?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in read_records(r)? {
            let data = t.into_data();
            if let Some(k) = name.strip_prefix("m/") {
                m.insert(k.to_string(), data);
            } else if let Some(k) = name.strip_prefix("v/") {
                v.insert(k.to_string(), data);
            } else {
                return Err(Error::Format(format!("unexpected optimizer record `{name}`")));
            }
        }
        let rng = RngState {
            seed: read_u64(r, "rng seed")?,
            next_epoch: read_u64(r, "rng epoch")?,
        };
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Checkpoint {
            config_digest,
            stage,
            epoch,
            val_accuracy,
            val_loss,
            params,
            group_lrs,
            optimizer: AdamState {
                step_count,
                m,
                v,
                config,
            },
            rng,
        })
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    records::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ----- stages ----------------------------------------------------------------------------

pub struct StageOutcome {
    /// Snapshot of the best epoch; the model holds these parameters on
    /// return.
    pub best: Checkpoint,
    /// Snapshot after the final epoch, for resuming.
    pub last: Checkpoint,
    pub report: StageReport,
}

/// Optional hook called after every epoch, e.g. for run logs.
pub type EpochHook<'a> = &'a mut dyn FnMut(Stage, &EpochRecord);

/// Trains one stage. With `resume`, continues from a `last` snapshot of
/// the same stage: parameters, optimizer moments and epoch counter are
/// restored, and `plan.epochs` counts the total for the stage.
pub fn run_stage(
    model: &mut FusionModel,
    train: &LabeledInputs,
    val: &LabeledInputs,
    plan: &StagePlan,
    adam: AdamConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<StageOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let n_tasks = model.heads.len();
    if train.labels.len() != n_tasks || val.labels.len() != n_tasks {
        return Err(Error::InvalidArgument(format!(
            "labels for {} tasks, model has {n_tasks}",
            train.labels.len()
        )));
    }

    let (mut optimizer, start_epoch, mut rng) = match resume {
        Some(ck) => {
            if ck.stage != plan.stage {
                return Err(Error::InvalidArgument(format!(
                    "cannot resume {} from a {} checkpoint",
                    plan.stage, ck.stage
                )));
            }
            ck.restore(model)?;
            (ck.optimizer.clone(), ck.epoch, ck.rng)
        }
        None => (
            AdamState::new(model.store.groups(), adam),
            0,
            RngState { seed, next_epoch: 0 },
        ),
    };
    model.store.apply_lrs(&plan.group_lrs);

    let eval_batch = plan.batch_size.max(256);
    let train_feats = Features::prepare(model, &train.inputs, eval_batch)?;
    let val_feats = Features::prepare(model, &val.inputs, eval_batch)?;
    let refresh_val = matches!(val_feats, Features::Raw(_));

    let start_val = match resume {
        Some(ck) => (ck.val_accuracy, ck.val_loss),
        None => {
            let (loss, acc) = validate(model, &val_feats, val, eval_batch)?;
            (mean_defined(&acc), loss)
        }
    };
    let mut best = Checkpoint::capture(model, plan.stage, start_epoch, start_val, &optimizer, rng);
    let mut report = StageReport {
        stage: plan.stage,
        epochs: Vec::new(),
        best_epoch: start_epoch,
    };

    for epoch in start_epoch..plan.epochs {
        let order = batches(train.len(), plan.batch_size, rng.seed, rng.next_epoch);
        rng.next_epoch += 1;
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (bi, idx) in order.iter().enumerate() {
            let labels = train.batch_labels(idx);
            if labels.iter().all(|col| col.iter().all(Option::is_none)) {
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let logits = train_feats.logits(model, &mut tape, &bound, idx)?;
            let loss = multitask_loss(&mut tape, &logits, &labels)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
            tape.backward(loss)?;
            model.store.collect_grads(&tape, &bound)?;
            adam_step(model.store.groups_mut(), &mut optimizer)?;
            model.store.clear_grads();
            loss_sum += value * idx.len() as f64;
            loss_n += idx.len();
        }

        let (val_loss, val_accuracy) = if refresh_val {
            let feats = Features::Raw(val.inputs.clone());
            validate(model, &feats, val, eval_batch)?
        } else {
            validate(model, &val_feats, val, eval_batch)?
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val_loss,
            val_accuracy,
        };
        if let Some(h) = hook.as_mut() {
            h(plan.stage, &record);
        }
        let acc = mean_defined(&record.val_accuracy);
        let improves = acc > best.val_accuracy
            || (acc == best.val_accuracy && val_loss < best.val_loss)
            || best.val_accuracy.is_nan();
        if improves {
            best = Checkpoint::capture(model, plan.stage, epoch + 1, (acc, val_loss), &optimizer, rng);
            report.best_epoch = epoch + 1;
        }
        report.epochs.push(record);
    }
    let last_val = report
        .epochs
        .last()
        .map(|r| (mean_defined(&r.val_accuracy), r.val_loss))
        .unwrap_or(start_val);
    let last = Checkpoint::capture(model, plan.stage, plan.epochs.max(start_epoch), last_val, &optimizer, rng);
    best.restore(model)?;
    Ok(StageOutcome { best, last, report })
}

/// Per-stage shuffling seed; the warm-up stage uses `seed` itself.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ (stage.code().wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs warm-up, end-to-end and tuning in turn, skipping stages with zero
/// epochs. Each stage starts from the previous stage's best parameters
/// with a fresh optimizer. Returns the final best checkpoint.
pub fn run_full_schedule(
    model: &mut FusionModel,
    train: &LabeledInputs,
    val: &LabeledInputs,
    cfg: &TrainConfig,
    mut hook: Option<EpochHook<'_>>,
) -> Result<(Checkpoint, TrainReport)> {
    let mut report = TrainReport::default();
    let mut best = None;
    for stage in Stage::ALL {
        let plan = cfg.plan(stage);
        if plan.epochs == 0 {
            continue;
        }
        let out = run_stage(
            model,
            train,
            val,
            &plan,
            cfg.adam,
            stage_seed(cfg.seed, stage),
            None,
            hook.as_mut().map(|h| &mut **h as EpochHook<'_>),
        )?;
        report.stages.push(out.report);
        best = Some(out.best);
    }
    let best = best.ok_or_else(|| Error::InvalidArgument("every stage has zero epochs".into()))?;
    Ok((best, report))
}

/// Writes `report` as pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = Vec::new();
    serde_json::to_writer_pretty(&mut buf, value).map_err(|e| Error::Format(e.to_string()))?;
    buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    records::write_atomic(path, &buf)
}
