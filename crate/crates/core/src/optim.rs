//! Named parameter groups and the Adam optimizer with decoupled weight decay.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The five freezable parameter groups of the fusion model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupName {
    ClipImage,
    ClipText,
    CmaSa,
    CmaMa,
    Mlp,
}

impl GroupName {
    pub const ALL: [GroupName; 5] = [
        GroupName::ClipImage,
        GroupName::ClipText,
        GroupName::CmaSa,
        GroupName::CmaMa,
        GroupName::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::ClipImage => "clip_image",
            GroupName::ClipText => "clip_text",
            GroupName::CmaSa => "cma_sa",
            GroupName::CmaMa => "cma_ma",
            GroupName::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        GroupName::ALL.into_iter().find(|g| g.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: GroupName,
    pub params: Vec<NamedTensor>,
    pub frozen: bool,
    pub lr: f64,
}

impl ParamGroup {
    fn new(name: GroupName) -> Self {
        ParamGroup {
            name,
            params: Vec::new(),
            frozen: false,
            lr: 0.0,
        }
    }

    /// Frozen groups and groups with a zero learning rate are both
    /// excluded from optimisation.
    pub fn trainable(&self) -> bool {
        !self.frozen && self.lr > 0.0
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over parameter names and raw little-endian data.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(p.tensor.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    group: GroupName,
    index: usize,
}

/// All parameters of a model, organised into the fixed group set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            groups: GroupName::ALL.into_iter().map(ParamGroup::new).collect(),
        }
    }
}

/// Tape variables for every parameter of a store, bound for one forward
/// pass.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Vec<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.group.index()][id.index]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: GroupName, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let g = &mut self.groups[group.index()];
        assert!(
            g.params.iter().all(|p| p.name != name),
            "duplicate parameter {group}/{name}"
        );
        g.params.push(NamedTensor { name, tensor });
        ParamId {
            group,
            index: g.params.len() - 1,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.groups[id.group.index()].params[id.index].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.groups[id.group.index()].params[id.index].tensor
    }

    pub fn name(&self, id: ParamId) -> String {
        format!(
            "{}/{}",
            id.group,
            self.groups[id.group.index()].params[id.index].name
        )
    }

    pub fn group(&self, name: GroupName) -> &ParamGroup {
        &self.groups[name.index()]
    }

    pub fn group_mut(&mut self, name: GroupName) -> &mut ParamGroup {
        &mut self.groups[name.index()]
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    /// Iterates `("group/name", tensor)` in canonical order.
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.groups.iter().flat_map(|g| {
            g.params
                .iter()
                .map(move |p| (format!("{}/{}", g.name, p.name), &p.tensor))
        })
    }

    pub fn numel(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    /// Sets per-group learning rates; a zero rate freezes the group.
    pub fn apply_lrs(&mut self, lrs: &BTreeMap<GroupName, f64>) {
        for g in &mut self.groups {
            g.lr = lrs.get(&g.name).copied().unwrap_or(0.0);
            g.frozen = g.lr == 0.0;
        }
    }

    /// Records every parameter on the tape. Parameters of trainable groups
    /// become gradient-requiring leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .groups
            .iter()
            .map(|g| {
                let trainable = g.trainable();
                g.params
                    .iter()
                    .map(|p| {
                        if trainable {
                            let mut t = p.tensor.clone();
                            t.set_requires_grad(true);
                            tape.leaf(&t)
                        } else {
                            tape.leaf(&p.tensor)
                        }
                    })
                    .collect()
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .groups
            .iter()
            .map(|g| g.params.iter().map(|p| tape.leaf(&p.tensor)).collect())
            .collect();
        Bound { vars }
    }

    /// Every parameter tensor in canonical order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().map(|(_, t)| t.clone()).collect()
    }

    /// Uses existing tape variables, one per parameter in canonical order,
    /// in place of the stored values.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        let n: usize = self.groups.iter().map(|g| g.params.len()).sum();
        if vars.len() != n {
            return Err(Error::InvalidArgument(format!("{} variables for {n} parameters", vars.len())));
        }
        let mut it = vars.iter().copied();
        let vars = self
            .groups
            .iter()
            .map(|g| g.params.iter().map(|_| it.next().unwrap()).collect())
            .collect();
        Ok(Bound { vars })
    }

    /// Copies gradients from a differentiated tape into the parameters of
    /// trainable groups.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (gi, g) in self.groups.iter_mut().enumerate() {
            if !g.trainable() {
                continue;
            }
            for (pi, p) in g.params.iter_mut().enumerate() {
                match tape.grad(bound.vars[gi][pi]) {
                    Some(grad) => p.tensor.set_grad(grad.to_vec())?,
                    None => p.tensor.clear_grad(),
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.groups {
            for p in &mut g.params {
                p.tensor.clear_grad();
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, keyed by `"group/name"`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub config: AdamConfig,
}

impl AdamState {
    /// Zero moments for every parameter in `groups`.
    pub fn new(groups: &[ParamGroup], config: AdamConfig) -> Self {
        let mut m = BTreeMap::new();
        for g in groups {
            for p in &g.params {
                m.insert(format!("{}/{}", g.name, p.name), vec![0.0; p.tensor.numel()]);
            }
        }
        AdamState {
            step_count: 0,
            v: m.clone(),
            m,
            config,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay over the
/// trainable groups. Frozen or zero-rate groups are skipped entirely, so
/// their parameters and moments are untouched.
pub fn adam_step(groups: &mut [ParamGroup], state: &mut AdamState) -> Result<()> {
    // Validate first so a failure leaves every parameter unchanged.
    for g in groups.iter().filter(|g| g.trainable()) {
        for p in &g.params {
            if p.tensor.grad().is_none() {
                return Err(Error::MissingGrad(format!("{}/{}", g.name, p.name)));
            }
        }
    }
    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for g in groups.iter_mut().filter(|g| g.trainable()) {
        let lr = g.lr;
        for p in &mut g.params {
            let key = format!("{}/{}", g.name, p.name);
            let n = p.tensor.numel();
            let m = state.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = state.v.entry(key).or_insert_with(|| vec![0.0; n]);
            let grad = p.tensor.grad().expect("validated above").to_vec();
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * *x);
            }
        }
    }
    Ok(())
}
