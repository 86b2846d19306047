//! Layers shared by the encoders and the fusion transformer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{Bound, GroupName, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Allocates parameters into one group of a store with the standard
/// initialisation: `N(0, 0.02)` weights, zero biases, unit norm gains.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub group: GroupName,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.store.add(self.group, name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(self.group, name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(self.group, name, Tensor::ones(shape))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.w"), &[d_in, d_out]),
            b: self.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.ones(&format!("{name}.gain"), &[d]),
            bias: self.zeros(&format!("{name}.bias"), &[d]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_broadcast(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("degenerate transformer {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Attention weights of one layer, captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// `[batch, heads, seq, seq]`, rows are softmax-normalised.
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, prefix: &str, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                Block {
                    ln1: init.layer_norm(&format!("{p}.ln1"), d),
                    wq: init.linear(&format!("{p}.wq"), d, d),
                    wk: init.linear(&format!("{p}.wk"), d, d),
                    wv: init.linear(&format!("{p}.wv"), d, d),
                    wo: init.linear(&format!("{p}.wo"), d, d),
                    ln2: init.layer_norm(&format!("{p}.ln2"), d),
                    ff1: init.linear(&format!("{p}.ff1"), d, config.d_ff),
                    ff2: init.linear(&format!("{p}.ff2"), config.d_ff, d),
                }
            })
            .collect();
        Ok(Transformer { config, blocks })
    }

    /// Runs every block over `x: [batch, seq, d_model]`. `key_mask` holds
    /// `batch * seq` flags; `false` keys receive no attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        key_mask: &[bool],
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::Shape {
                op: "transformer",
                msg: format!(
                    "expected [batch, seq, {}], got {shape:?}",
                    self.config.d_model
                ),
            });
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.n_heads;
        let dk = self.config.d_head();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = x;
        for block in &self.blocks {
            let n1 = block.ln1.forward(tape, p, x)?;
            let heads = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
                let y = lin.forward(tape, p, n1)?;
                let y = tape.reshape(y, &[b, s, h, dk])?;
                tape.permute(y, &[0, 2, 1, 3])
            };
            let q = heads(tape, &block.wq)?;
            let k = heads(tape, &block.wk)?;
            let v = heads(tape, &block.wv)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, key_mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(AttentionTrace {
                    weights: tape.tensor(attn),
                });
            }
            let ctx = tape.batch_matmul(attn, v, false)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b, s, d])?;
            let o = block.wo.forward(tape, p, ctx)?;
            x = tape.add(x, o)?;

            let n2 = block.ln2.forward(tape, p, x)?;
            let f = block.ff1.forward(tape, p, n2)?;
            let f = tape.gelu(f);
            let f = block.ff2.forward(tape, p, f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}

/// Picks position `pos` of every sequence in `x: [batch, seq, d]`,
/// giving `[batch, d]`.
pub fn select_position(tape: &mut Tape, x: Var, pos: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || pos >= shape[1] {
        return Err(Error::Shape {
            op: "select_position",
            msg: format!("position {pos} of {shape:?}"),
        });
    }
    let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
    let idx: Vec<usize> = (0..shape[0]).map(|i| i * shape[1] + pos).collect();
    tape.gather_rows(flat, &idx)
}
