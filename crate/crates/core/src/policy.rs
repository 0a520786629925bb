//! The autoregressive generator: pretraining, temperature sampling and
//! teacher-forced log-probabilities.

use log::info;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    AdamConfig, AdamState, Heads, Inputs, ParamSet, context_before, cross_entropy, log_softmax_rows,
};
use crate::rng::{self, Rng};
use crate::symbolic::{CLIP_LEN, Clip, Prompt, Token};

pub const DEFAULT_TEMPERATURE: f64 = 0.99;

/// Rows for every state `s_0 … s_71` of each clip, clip-major.
pub fn state_inputs(clips: &[&Clip]) -> Inputs {
    Inputs::from_rows(
        clips
            .iter()
            .flat_map(|c| (0..CLIP_LEN).map(move |t| (&c.prompt, context_before(c.tokens(), t)))),
    )
}

fn action_targets(clips: &[&Clip]) -> Vec<usize> {
    clips
        .iter()
        .flat_map(|c| c.tokens().iter().map(|t| t.id() as usize))
        .collect()
}

/// Draw an action from `softmax(logits / temperature)`; returns the action
/// and its log-probability under that distribution.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<(usize, f64)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let row = Array2::from_shape_vec((1, logits.len()), logits.to_vec()).expect("one row");
    let logp = log_softmax_rows(&row, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, &lp) in logp.row(0).iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return Ok((a, lp));
        }
    }
    // u landed in the rounding slack above the final cumulative sum.
    let a = logp
        .row(0)
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(logits.len() - 1);
    Ok((a, logp[[0, a]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub clip: Clip,
    /// Per-step log-probabilities under the sampling distribution.
    pub logprobs: Vec<f64>,
}

/// Sample one clip per prompt, stepping all sequences in lockstep. Sequence
/// `i` draws only from `rngs[i]`, so results do not depend on batch layout.
pub fn generate_batch(
    params: &ParamSet,
    prompts: &[Prompt],
    temperature: f64,
    rngs: &mut [Rng],
) -> Result<Vec<Generated>> {
    assert_eq!(prompts.len(), rngs.len(), "one rng per prompt");
    let n = prompts.len();
    let mut tokens: Vec<Vec<Token>> = vec![Vec::with_capacity(CLIP_LEN); n];
    let mut logprobs: Vec<Vec<f64>> = vec![Vec::with_capacity(CLIP_LEN); n];
    for t in 0..CLIP_LEN {
        let inputs = Inputs::from_rows(
            prompts
                .iter()
                .zip(&tokens)
                .map(|(p, toks)| (p, context_before(toks, t))),
        );
        let fwd = params.forward(&inputs, Heads::POLICY);
        for i in 0..n {
            let row = fwd.logits.row(i);
            let (a, lp) = sample_token(
                row.as_slice().expect("contiguous"),
                temperature,
                &mut rngs[i],
            )?;
            tokens[i].push(Token::from_action(a));
            logprobs[i].push(lp);
        }
    }
    prompts
        .iter()
        .zip(tokens)
        .zip(logprobs)
        .map(|((p, toks), lps)| {
            Ok(Generated {
                clip: Clip::new(*p, toks)?,
                logprobs: lps,
            })
        })
        .collect()
}

pub fn generate(
    params: &ParamSet,
    prompt: &Prompt,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Generated> {
    let mut out = generate_batch(
        params,
        std::slice::from_ref(prompt),
        temperature,
        std::slice::from_mut(rng),
    )?;
    Ok(out.pop().expect("one clip"))
}

/// Teacher-forced per-step `log π(a_t | s_t)` at temperature 1.
pub fn logprobs_under(params: &ParamSet, clip: &Clip) -> Vec<f64> {
    let fwd = params.forward(&state_inputs(&[clip]), Heads::POLICY);
    let logp = log_softmax_rows(&fwd.logits, 1.0);
    clip.tokens()
        .iter()
        .enumerate()
        .map(|(t, tok)| logp[[t, tok.id() as usize]])
        .collect()
}

/// Mean next-token negative log-likelihood in nats per token.
pub fn eval_nll(params: &ParamSet, clips: &[Clip]) -> f64 {
    if clips.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in clips.chunks(256) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let fwd = params.forward(&state_inputs(&refs), Heads::POLICY);
        let targets = action_targets(&refs);
        let (loss, _) = cross_entropy(&fwd.logits, &targets);
        total += loss * targets.len() as f64;
        count += targets.len();
    }
    total / count as f64
}

/// Mean cross-entropy over the batch and its parameter gradient.
pub fn cross_entropy_loss(params: &ParamSet, clips: &[&Clip]) -> Result<(f64, ParamSet)> {
    let fwd = params.forward(&state_inputs(clips), Heads::POLICY);
    let (loss, dlogits) = cross_entropy(&fwd.logits, &action_targets(clips));
    let grads = params.backward(&fwd.cache, Some(&dlogits), None)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Cap on eval-split clips scored at each evaluation.
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
}

fn default_eval_every() -> usize {
    100
}

fn default_eval_clips() -> usize {
    500
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            eval_every: default_eval_every(),
            eval_clips: default_eval_clips(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllPoint {
    pub step: usize,
    pub eval_nll: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParamSet,
    pub curve: Vec<NllPoint>,
}

const DIVERGENCE_PATIENCE: usize = 500;

/// Next-token training with teacher forcing over all positions.
pub fn pretrain(train: &[Clip], eval: &[Clip], config: &PretrainConfig) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("pretraining corpus".into()));
    }
    let mut params = ParamSet::init(&mut rng::stream(config.seed, &[0x1417]));
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let eval = &eval[..eval.len().min(config.eval_clips)];
    let mut curve = vec![NllPoint {
        step: 0,
        eval_nll: eval_nll(&params, eval),
    }];
    info!("pretrain step 0 eval_nll {:.4}", curve[0].eval_nll);

    let mut initial_nll = None;
    let mut worse_streak = 0usize;
    for step in 1..=config.steps {
        let mut rng = rng::stream(config.seed, &[0xB47C, step as u64]);
        let batch: Vec<&Clip> = (0..config.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let (loss, grads) = cross_entropy_loss(&params, &batch)?;
        let initial = *initial_nll.get_or_insert(loss);
        worse_streak = if loss > initial { worse_streak + 1 } else { 0 };
        if worse_streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence(format!(
                "train NLL above its initial value {initial:.4} for {DIVERGENCE_PATIENCE} steps"
            )));
        }
        adam.step(&mut params, &grads)?;
        if step % config.eval_every == 0 || step == config.steps {
            let nll = eval_nll(&params, eval);
            info!("pretrain step {step} train_nll {loss:.4} eval_nll {nll:.4}");
            curve.push(NllPoint {
                step,
                eval_nll: nll,
            });
        }
    }
    Ok(Pretrained { params, curve })
}

/// Uniform distribution over actions, ignoring the context.
pub fn uniform_policy() -> ParamSet {
    ParamSet::zeros()
}
