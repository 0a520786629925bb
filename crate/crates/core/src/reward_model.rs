//! Bradley-Terry preference reward model.
//!
//! The RM reuses the policy trunk with its scalar head. A clip's score is the
//! mean over the scored windows of the mean per-step scalar output, where the
//! step context runs up to and including the current token and is PAD-filled
//! before the window start.

use log::info;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AdamConfig, AdamState, Heads, Inputs, ParamSet, context_through};
use crate::preferences::{PreferenceRecord, sigmoid};
use crate::rewards::{WINDOW_LEN, WINDOW_STARTS, adherence_score, quality_score};
use crate::rng;
use crate::symbolic::{CLIP_LEN, Clip};

/// Input ablation for the reward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmAblation {
    #[serde(default)]
    pub drop_text: bool,
    /// Score only the first `n` tokens.
    #[serde(default)]
    pub crop_tokens: Option<usize>,
}

impl RmAblation {
    pub const FULL: RmAblation = RmAblation {
        drop_text: false,
        crop_tokens: None,
    };

    pub fn validate(&self) -> Result<()> {
        match self.crop_tokens {
            Some(n) if n == 0 || n > CLIP_LEN => Err(Error::InvalidArgument(format!(
                "crop_tokens must lie in 1..={CLIP_LEN}, got {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// `(start, len)` of every scored window.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        match self.crop_tokens {
            Some(n) => vec![(0, n)],
            None => WINDOW_STARTS.iter().map(|&s| (s, WINDOW_LEN)).collect(),
        }
    }

    pub fn label(&self) -> String {
        match (self.drop_text, self.crop_tokens) {
            (false, None) => "full".into(),
            (true, None) => "no_text".into(),
            (false, Some(n)) => format!("crop_{n}"),
            (true, Some(n)) => format!("no_text_crop_{n}"),
        }
    }
}

/// Network rows for each clip's windows, plus the per-row pooling weight.
struct RmRows {
    inputs: Inputs,
    rows_per_clip: usize,
    weights: Vec<f64>,
}

fn rm_rows(clips: &[&Clip], ablation: &RmAblation) -> RmRows {
    let windows = ablation.windows();
    let mut weights = Vec::new();
    for &(_, len) in &windows {
        weights.extend(std::iter::repeat_n(1.0 / (windows.len() * len) as f64, len));
    }
    let inputs = Inputs::from_rows(clips.iter().flat_map(|c| {
        let windows = windows.clone();
        windows.into_iter().flat_map(move |(start, len)| {
            (start..start + len).map(move |t| (&c.prompt, context_through(c.tokens(), start, t)))
        })
    }))
    .with_drop_text(ablation.drop_text);
    RmRows {
        inputs,
        rows_per_clip: weights.len(),
        weights,
    }
}

fn pool(values: &Array2<f64>, rows: &RmRows) -> Vec<f64> {
    values
        .column(0)
        .as_slice()
        .expect("contiguous column vector")
        .chunks(rows.rows_per_clip)
        .map(|chunk| chunk.iter().zip(&rows.weights).map(|(v, w)| v * w).sum())
        .collect()
}

const SCORE_CHUNK: usize = 256;

/// Scores of many clips, in order.
pub fn rm_scores(params: &ParamSet, clips: &[&Clip], ablation: &RmAblation) -> Vec<f64> {
    clips
        .chunks(SCORE_CHUNK)
        .flat_map(|chunk| {
            let rows = rm_rows(chunk, ablation);
            let fwd = params.forward(&rows.inputs, Heads::VALUE);
            pool(&fwd.values, &rows)
        })
        .collect()
}

/// Scalar ELO-style score of one clip.
pub fn rm_score(params: &ParamSet, clip: &Clip, ablation: &RmAblation) -> f64 {
    rm_scores(params, &[clip], ablation)[0]
}

/// Preferred/rejected clip pairs of trainable records.
pub fn preference_pairs(records: &[PreferenceRecord]) -> Result<Vec<(Clip, Clip)>> {
    Ok(records
        .iter()
        .filter(|r| r.is_trainable())
        .map(|r| r.winner_loser())
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

/// Mean `−log σ(s_w − s_l)` over the pairs, with its parameter gradient.
pub fn bt_loss(
    params: &ParamSet,
    pairs: &[(&Clip, &Clip)],
    ablation: &RmAblation,
) -> Result<(f64, ParamSet)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("preference batch".into()));
    }
    let clips: Vec<&Clip> = pairs.iter().flat_map(|&(w, l)| [w, l]).collect();
    let rows = rm_rows(&clips, ablation);
    let fwd = params.forward(&rows.inputs, Heads::VALUE);
    let scores = pool(&fwd.values, &rows);
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut dscore = vec![0.0; clips.len()];
    for k in 0..pairs.len() {
        let d = scores[2 * k] - scores[2 * k + 1];
        loss += softplus(-d);
        let g = sigmoid(-d) / n;
        dscore[2 * k] = -g;
        dscore[2 * k + 1] = g;
    }
    let dvalues = Array2::from_shape_fn((rows.inputs.len(), 1), |(i, _)| {
        dscore[i / rows.rows_per_clip] * rows.weights[i % rows.rows_per_clip]
    });
    let grads = params.backward(&fwd.cache, None, Some(&dvalues))?;
    Ok((loss / n, grads))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fraction of pairs where the preferred clip scores strictly higher; ties earn 0.5.
pub fn pairwise_accuracy(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("evaluation pairs".into()));
    }
    let credit: f64 = scores
        .iter()
        .map(|&(w, l)| {
            if w > l {
                1.0
            } else if w == l {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(credit / scores.len() as f64)
}

/// Accuracy of an arbitrary clip scorer on preference pairs.
pub fn predictor_accuracy(pairs: &[(Clip, Clip)], score: impl Fn(&Clip) -> f64) -> Result<f64> {
    let scored: Vec<(f64, f64)> = pairs.iter().map(|(w, l)| (score(w), score(l))).collect();
    pairwise_accuracy(&scored)
}

pub fn rm_accuracy(
    params: &ParamSet,
    pairs: &[(Clip, Clip)],
    ablation: &RmAblation,
) -> Result<f64> {
    let clips: Vec<&Clip> = pairs.iter().flat_map(|(w, l)| [w, l]).collect();
    let s = rm_scores(params, &clips, ablation);
    let scored: Vec<(f64, f64)> = s.chunks(2).map(|c| (c[0], c[1])).collect();
    pairwise_accuracy(&scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Predictor {
    Adherence,
    Quality,
}

/// Accuracy of "the clip with the higher automatic reward wins".
pub fn baseline_predictor_accuracy(pairs: &[(Clip, Clip)], predictor: Predictor) -> Result<f64> {
    match predictor {
        Predictor::Adherence => predictor_accuracy(pairs, |c| adherence_score(c, &c.prompt)),
        Predictor::Quality => predictor_accuracy(pairs, quality_score),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub ablation: RmAblation,
    /// Learning-rate multiplier for the scalar head.
    #[serde(default = "default_head_lr_scale")]
    pub head_lr_scale: f64,
}

fn default_head_lr_scale() -> f64 {
    1.0
}

fn default_eval_every() -> usize {
    100
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            eval_every: default_eval_every(),
            ablation: RmAblation::FULL,
            head_lr_scale: default_head_lr_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmPoint {
    pub step: usize,
    /// Mean batch loss since the previous point.
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRm {
    pub params: ParamSet,
    pub curve: Vec<RmPoint>,
}

impl TrainedRm {
    pub fn final_point(&self) -> RmPoint {
        *self.curve.last().expect("curve has the step-0 point")
    }
}

const DIVERGENCE_WINDOW: usize = 200;

/// Trunk from `init`, scalar head from zero.
pub fn init_rm(init: &ParamSet) -> ParamSet {
    let mut params = init.clone();
    params.reset_value_head();
    params
}

pub fn train_rm(
    train: &[(Clip, Clip)],
    eval: &[(Clip, Clip)],
    init: &ParamSet,
    config: &RmTrainConfig,
) -> Result<TrainedRm> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("reward-model training pairs".into()));
    }
    if eval.is_empty() {
        return Err(Error::EmptyDataset("reward-model evaluation pairs".into()));
    }
    config.ablation.validate()?;
    let ablation = config.ablation;
    let mut params = init_rm(init);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let head_scale = |name: &str| {
        if name.starts_with("value_") {
            config.head_lr_scale
        } else {
            1.0
        }
    };
    let mut curve = vec![RmPoint {
        step: 0,
        train_loss: std::f64::consts::LN_2,
        eval_accuracy: rm_accuracy(&params, eval, &ablation)?,
    }];
    let threshold = std::f64::consts::LN_2 + 0.5;
    let mut recent = std::collections::VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut since_eval = Vec::new();
    for step in 1..=config.steps {
        let mut rng = rng::stream(config.seed, &[0x4B7, step as u64]);
        let batch: Vec<(&Clip, &Clip)> = (0..config.batch_size)
            .map(|_| {
                let (w, l) = &train[rng.random_range(0..train.len())];
                (w, l)
            })
            .collect();
        let (loss, grads) = bt_loss(&params, &batch, &ablation)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "reward-model loss at step {step}"
            )));
        }
        if recent.len() == DIVERGENCE_WINDOW {
            recent.pop_front();
        }
        recent.push_back(loss);
        if recent.len() == DIVERGENCE_WINDOW
            && recent.iter().sum::<f64>() / DIVERGENCE_WINDOW as f64 > threshold
        {
            return Err(Error::Divergence(format!(
                "reward-model loss above {threshold:.3} over {DIVERGENCE_WINDOW} steps"
            )));
        }
        since_eval.push(loss);
        adam.step_scaled(&mut params, &grads, head_scale)?;
        if step % config.eval_every == 0 || step == config.steps {
            let point = RmPoint {
                step,
                train_loss: since_eval.iter().sum::<f64>() / since_eval.len() as f64,
                eval_accuracy: rm_accuracy(&params, eval, &ablation)?,
            };
            since_eval.clear();
            info!(
                "rm[{}] step {step} loss {:.4} eval_acc {:.4}",
                ablation.label(),
                point.train_loss,
                point.eval_accuracy
            );
            curve.push(point);
        }
    }
    Ok(TrainedRm { params, curve })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub steps: usize,
    /// Absent for the automatic-reward predictors, which are not trained.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
}

pub const ABLATION_CROPS: [usize; 3] = [24, 12, 8];

/// Full, no-text and cropped RMs under one budget and seed, plus the
/// adherence and quality predictors.
pub fn ablation_suite(
    train: &[(Clip, Clip)],
    eval: &[(Clip, Clip)],
    init: &ParamSet,
    config: &RmTrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut variants = vec![
        RmAblation::FULL,
        RmAblation {
            drop_text: true,
            crop_tokens: None,
        },
    ];
    variants.extend(ABLATION_CROPS.iter().map(|&n| RmAblation {
        drop_text: false,
        crop_tokens: Some(n),
    }));
    let mut rows = Vec::new();
    for ablation in variants {
        let trained = train_rm(
            train,
            eval,
            init,
            &RmTrainConfig {
                ablation,
                ..*config
            },
        )?;
        let last = trained.final_point();
        rows.push(AblationRow {
            variant: ablation.label(),
            steps: last.step,
            train_loss: Some(last.train_loss),
            eval_accuracy: last.eval_accuracy,
        });
    }
    for (variant, predictor) in [
        ("adherence_predictor", Predictor::Adherence),
        ("quality_predictor", Predictor::Quality),
    ] {
        rows.push(AblationRow {
            variant: variant.into(),
            steps: 0,
            train_loss: None,
            eval_accuracy: baseline_predictor_accuracy(eval, predictor)?,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,steps,train_loss,eval_accuracy\n");
    for r in rows {
        let loss = r.train_loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.steps, loss, r.eval_accuracy
        ));
    }
    out
}

/// Maximum-likelihood Bradley-Terry scores for `n_items` from `(winner, loser)`
/// outcomes, by gradient descent from zero; scores are centred to mean zero.
pub fn fit_bradley_terry(
    n_items: usize,
    outcomes: &[(usize, usize)],
    steps: usize,
    lr: f64,
) -> Vec<f64> {
    let mut r = vec![0.0; n_items];
    let n = outcomes.len().max(1) as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; n_items];
        for &(w, l) in outcomes {
            let p = sigmoid(-(r[w] - r[l])) / n;
            g[w] -= p;
            g[l] += p;
        }
        for (ri, gi) in r.iter_mut().zip(&g) {
            *ri -= lr * gi;
        }
    }
    let mean = r.iter().sum::<f64>() / n_items.max(1) as f64;
    r.iter().map(|x| x - mean).collect()
}
