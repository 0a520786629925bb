//! Fixed-context MLP shared by the policy, the value baseline and the reward
//! model, with hand-written reverse-mode gradients.
//!
//! Input row: embeddings of the last [`CONTEXT`] tokens (oldest first)
//! followed by the prompt projection, 8·16 + 16 = 144 values. Two tanh layers
//! of width 128 feed a 26-way policy head and a scalar head.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointMeta, decode_checkpoint, encode_checkpoint,
    load_checkpoint, save_checkpoint,
};
pub use gradcheck::{GradCheckReport, gradcheck};

use ndarray::{Array2, Axis, s};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::symbolic::{N_ACTIONS, N_TOKENS, PAD_ID, PROMPT_DIM, Prompt, Token};

pub const CONTEXT: usize = 8;
pub const EMBED_DIM: usize = 16;
pub const INPUT_DIM: usize = CONTEXT * EMBED_DIM + EMBED_DIM;
pub const HIDDEN: usize = 128;

pub const TENSOR_NAMES: [&str; 11] = [
    "embed",
    "prompt_w",
    "prompt_b",
    "hidden1_w",
    "hidden1_b",
    "hidden2_w",
    "hidden2_b",
    "policy_w",
    "policy_b",
    "value_w",
    "value_b",
];

pub const TENSOR_SHAPES: [(usize, usize); 11] = [
    (N_TOKENS, EMBED_DIM),
    (PROMPT_DIM, EMBED_DIM),
    (1, EMBED_DIM),
    (INPUT_DIM, HIDDEN),
    (1, HIDDEN),
    (HIDDEN, HIDDEN),
    (1, HIDDEN),
    (HIDDEN, N_ACTIONS),
    (1, N_ACTIONS),
    (HIDDEN, 1),
    (1, 1),
];

/// All network weights, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub embed: Array2<f64>,
    pub prompt_w: Array2<f64>,
    pub prompt_b: Array2<f64>,
    pub hidden1_w: Array2<f64>,
    pub hidden1_b: Array2<f64>,
    pub hidden2_w: Array2<f64>,
    pub hidden2_b: Array2<f64>,
    pub policy_w: Array2<f64>,
    pub policy_b: Array2<f64>,
    pub value_w: Array2<f64>,
    pub value_b: Array2<f64>,
}

impl ParamSet {
    pub fn zeros() -> Self {
        let z = |i: usize| Array2::zeros(TENSOR_SHAPES[i]);
        ParamSet {
            embed: z(0),
            prompt_w: z(1),
            prompt_b: z(2),
            hidden1_w: z(3),
            hidden1_b: z(4),
            hidden2_w: z(5),
            hidden2_b: z(6),
            policy_w: z(7),
            policy_b: z(8),
            value_w: z(9),
            value_b: z(10),
        }
    }

    /// Random trunk, zero heads: the policy starts uniform and the scalar head at 0.
    pub fn init(rng: &mut Rng) -> Self {
        let mut p = ParamSet::zeros();
        let mut fill = |a: &mut Array2<f64>, scale: f64| {
            a.mapv_inplace(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng));
        };
        fill(&mut p.embed, 1.0);
        fill(&mut p.prompt_w, 1.0);
        fill(&mut p.hidden1_w, 1.0 / (INPUT_DIM as f64).sqrt());
        fill(&mut p.hidden2_w, 1.0 / (HIDDEN as f64).sqrt());
        p
    }

    /// Every tensor filled with N(0, scale²); used for tests and perturbations.
    pub fn random(rng: &mut Rng, scale: f64) -> Self {
        let mut p = ParamSet::zeros();
        p.for_each_mut(|_, a| {
            a.mapv_inplace(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
        });
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 11] {
        [
            (TENSOR_NAMES[0], &self.embed),
            (TENSOR_NAMES[1], &self.prompt_w),
            (TENSOR_NAMES[2], &self.prompt_b),
            (TENSOR_NAMES[3], &self.hidden1_w),
            (TENSOR_NAMES[4], &self.hidden1_b),
            (TENSOR_NAMES[5], &self.hidden2_w),
            (TENSOR_NAMES[6], &self.hidden2_b),
            (TENSOR_NAMES[7], &self.policy_w),
            (TENSOR_NAMES[8], &self.policy_b),
            (TENSOR_NAMES[9], &self.value_w),
            (TENSOR_NAMES[10], &self.value_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 11] {
        [
            (TENSOR_NAMES[0], &mut self.embed),
            (TENSOR_NAMES[1], &mut self.prompt_w),
            (TENSOR_NAMES[2], &mut self.prompt_b),
            (TENSOR_NAMES[3], &mut self.hidden1_w),
            (TENSOR_NAMES[4], &mut self.hidden1_b),
            (TENSOR_NAMES[5], &mut self.hidden2_w),
            (TENSOR_NAMES[6], &mut self.hidden2_b),
            (TENSOR_NAMES[7], &mut self.policy_w),
            (TENSOR_NAMES[8], &mut self.policy_b),
            (TENSOR_NAMES[9], &mut self.value_w),
            (TENSOR_NAMES[10], &mut self.value_b),
        ]
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut Array2<f64>)) {
        for (name, t) in self.tensors_mut() {
            f(name, t);
        }
    }

    pub fn n_coords(&self) -> usize {
        TENSOR_SHAPES.iter().map(|(r, c)| r * c).sum()
    }

    fn locate(flat: usize) -> (usize, usize) {
        let mut rem = flat;
        for (i, (r, c)) in TENSOR_SHAPES.iter().enumerate() {
            if rem < r * c {
                return (i, rem);
            }
            rem -= r * c;
        }
        panic!("coordinate {flat} out of range");
    }

    pub fn coord(&self, flat: usize) -> f64 {
        let (t, off) = Self::locate(flat);
        let a = self.tensors()[t].1;
        a[[off / a.ncols(), off % a.ncols()]]
    }

    pub fn coord_mut(&mut self, flat: usize) -> &mut f64 {
        let (t, off) = Self::locate(flat);
        let a = self.tensor_mut(t);
        let cols = a.ncols();
        &mut a[[off / cols, off % cols]]
    }

    fn tensor_mut(&mut self, index: usize) -> &mut Array2<f64> {
        match index {
            0 => &mut self.embed,
            1 => &mut self.prompt_w,
            2 => &mut self.prompt_b,
            3 => &mut self.hidden1_w,
            4 => &mut self.hidden1_b,
            5 => &mut self.hidden2_w,
            6 => &mut self.hidden2_b,
            7 => &mut self.policy_w,
            8 => &mut self.policy_b,
            9 => &mut self.value_w,
            10 => &mut self.value_b,
            _ => panic!("tensor index {index} out of range"),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, a| a.mapv_inplace(|x| x * factor));
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| (*a * *b).sum())
            .sum()
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, a)| a.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// Zero the scalar head, keeping the trunk.
    pub fn reset_value_head(&mut self) {
        self.value_w.fill(0.0);
        self.value_b.fill(0.0);
    }
}

/// Context of state `s_t`: the [`CONTEXT`] tokens before position `t`, PAD-filled.
pub fn context_before(tokens: &[Token], t: usize) -> [u32; CONTEXT] {
    let mut ctx = [PAD_ID; CONTEXT];
    for (k, slot) in ctx.iter_mut().enumerate() {
        let back = CONTEXT - k;
        if t >= back {
            *slot = tokens[t - back].id();
        }
    }
    ctx
}

/// Context ending at and including position `t`, PAD-filled before `window_start`.
pub fn context_through(tokens: &[Token], window_start: usize, t: usize) -> [u32; CONTEXT] {
    let mut ctx = [PAD_ID; CONTEXT];
    for (k, slot) in ctx.iter_mut().enumerate() {
        let back = CONTEXT - 1 - k;
        if t >= window_start + back {
            *slot = tokens[t - back].id();
        }
    }
    ctx
}

/// A batch of network inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    prompts: Array2<f64>,
    contexts: Vec<[u32; CONTEXT]>,
    drop_text: bool,
}

impl Inputs {
    pub fn new(prompts: Array2<f64>, contexts: Vec<[u32; CONTEXT]>) -> Result<Self> {
        if prompts.nrows() != contexts.len() || prompts.ncols() != PROMPT_DIM {
            return Err(Error::Shape {
                tensor: "inputs.prompts".into(),
                expected: (contexts.len(), PROMPT_DIM),
                got: prompts.dim(),
            });
        }
        if let Some(&bad) = contexts
            .iter()
            .flatten()
            .find(|&&id| id as usize >= N_TOKENS)
        {
            return Err(Error::TokenId(bad));
        }
        Ok(Inputs {
            prompts,
            contexts,
            drop_text: false,
        })
    }

    /// Rows from (prompt, context) pairs; ids are known to be valid.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a Prompt, [u32; CONTEXT])>) -> Self {
        let mut onehots = Vec::new();
        let mut contexts = Vec::new();
        for (p, ctx) in rows {
            onehots.extend_from_slice(&p.one_hot());
            contexts.push(ctx);
        }
        let n = contexts.len();
        Inputs {
            prompts: Array2::from_shape_vec((n, PROMPT_DIM), onehots).expect("row-major one-hots"),
            contexts,
            drop_text: false,
        }
    }

    /// Zero the prompt projection in the input row (text ablation).
    pub fn without_text(mut self) -> Self {
        self.drop_text = true;
        self
    }

    pub fn with_drop_text(mut self, drop: bool) -> Self {
        self.drop_text = drop;
        self
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub policy: bool,
    pub value: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        policy: true,
        value: true,
    };
    pub const POLICY: Heads = Heads {
        policy: true,
        value: false,
    };
    pub const VALUE: Heads = Heads {
        policy: false,
        value: true,
    };
}

#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Inputs,
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B × 26]`, empty when the policy head was skipped.
    pub logits: Array2<f64>,
    /// `[B × 1]`, empty when the scalar head was skipped.
    pub values: Array2<f64>,
    pub cache: Cache,
}

impl ParamSet {
    pub fn forward(&self, inputs: &Inputs, heads: Heads) -> Forward {
        let b = inputs.len();
        let mut x = Array2::<f64>::zeros((b, INPUT_DIM));
        for (i, ctx) in inputs.contexts.iter().enumerate() {
            for (k, &id) in ctx.iter().enumerate() {
                x.slice_mut(s![i, k * EMBED_DIM..(k + 1) * EMBED_DIM])
                    .assign(&self.embed.row(id as usize));
            }
        }
        if !inputs.drop_text {
            let proj = inputs.prompts.dot(&self.prompt_w) + &self.prompt_b;
            x.slice_mut(s![.., CONTEXT * EMBED_DIM..]).assign(&proj);
        }
        let mut h1 = x.dot(&self.hidden1_w) + &self.hidden1_b;
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&self.hidden2_w) + &self.hidden2_b;
        h2.mapv_inplace(f64::tanh);
        let logits = if heads.policy {
            h2.dot(&self.policy_w) + &self.policy_b
        } else {
            Array2::zeros((0, N_ACTIONS))
        };
        let values = if heads.value {
            h2.dot(&self.value_w) + &self.value_b
        } else {
            Array2::zeros((0, 1))
        };
        Forward {
            logits,
            values,
            cache: Cache {
                inputs: inputs.clone(),
                x,
                h1,
                h2,
            },
        }
    }

    /// Gradients of a scalar loss given its gradients with respect to the
    /// head outputs of the cached forward pass.
    pub fn backward(
        &self,
        cache: &Cache,
        dlogits: Option<&Array2<f64>>,
        dvalues: Option<&Array2<f64>>,
    ) -> Result<ParamSet> {
        let b = cache.inputs.len();
        let mut g = ParamSet::zeros();
        let mut dh2 = Array2::<f64>::zeros((b, HIDDEN));
        if let Some(dl) = dlogits {
            check_shape("dlogits", dl, (b, N_ACTIONS))?;
            g.policy_w = cache.h2.t().dot(dl);
            g.policy_b = dl.sum_axis(Axis(0)).insert_axis(Axis(0));
            dh2 += &dl.dot(&self.policy_w.t());
        }
        if let Some(dv) = dvalues {
            check_shape("dvalues", dv, (b, 1))?;
            g.value_w = cache.h2.t().dot(dv);
            g.value_b = dv.sum_axis(Axis(0)).insert_axis(Axis(0));
            dh2 += &dv.dot(&self.value_w.t());
        }
        let dz2 = dh2 * cache.h2.mapv(|h| 1.0 - h * h);
        g.hidden2_w = cache.h1.t().dot(&dz2);
        g.hidden2_b = dz2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh1 = dz2.dot(&self.hidden2_w.t());
        let dz1 = dh1 * cache.h1.mapv(|h| 1.0 - h * h);
        g.hidden1_w = cache.x.t().dot(&dz1);
        g.hidden1_b = dz1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dz1.dot(&self.hidden1_w.t());
        for (i, ctx) in cache.inputs.contexts.iter().enumerate() {
            for (k, &id) in ctx.iter().enumerate() {
                let mut row = g.embed.row_mut(id as usize);
                row += &dx.slice(s![i, k * EMBED_DIM..(k + 1) * EMBED_DIM]);
            }
        }
        if !cache.inputs.drop_text {
            let dp = dx.slice(s![.., CONTEXT * EMBED_DIM..]);
            g.prompt_w = cache.inputs.prompts.t().dot(&dp);
            g.prompt_b = dp.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        Ok(g)
    }
}

fn check_shape(name: &str, a: &Array2<f64>, expected: (usize, usize)) -> Result<()> {
    if a.dim() != expected {
        return Err(Error::Shape {
            tensor: name.into(),
            expected,
            got: a.dim(),
        });
    }
    Ok(())
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Mean next-token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let logp = log_softmax_rows(logits, 1.0);
    let n = targets.len() as f64;
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &a) in targets.iter().enumerate() {
        loss -= logp[[i, a]];
        grad[[i, a]] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}
