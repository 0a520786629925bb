//! KL-regularized REINFORCE with a learned value baseline.
//!
//! Per batch the policy maximizes
//! `(1/B) Σ_i [(1−α) Σ_t log π_θ(a_t|s_t)·(G_t − V_φ(s_t)) − α Σ_t KL_t]`
//! and the value network minimizes `(1/B) Σ_i Σ_t (G_t − V_φ(s_t))²`.
//! Rewards are terminal-only, so `G_t` equals the clip reward for every `t`.

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::sample_prompt;
use crate::error::{Error, Result};
use crate::net::{AdamConfig, AdamState, Heads, ParamSet, log_softmax_rows};
use crate::policy::{DEFAULT_TEMPERATURE, generate_batch, state_inputs};
use crate::reward_model::{RmAblation, rm_scores};
use crate::rewards::{RewardKind, RewardSpec, adherence_score, normalize_quality, quality_score};
use crate::rng::{self, Rng};
use crate::symbolic::{CLIP_LEN, Clip, N_ACTIONS, Prompt};

/// `G_t = Σ_{k ≥ t} r_k`.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KlMode {
    /// `Σ_a π_θ(a)·log(π_θ(a)/π_anchor(a))`.
    #[default]
    Exact,
    /// Unweighted `Σ_a log(π_θ(a)/π_anchor(a))`.
    Literal,
}

/// Per-state KL for each row of two log-probability tables.
pub fn kl_rows(logp: &Array2<f64>, logq: &Array2<f64>, mode: KlMode) -> Vec<f64> {
    logp.rows()
        .into_iter()
        .zip(logq.rows())
        .map(|(lp, lq)| match mode {
            KlMode::Exact => lp.iter().zip(lq).map(|(&a, &b)| a.exp() * (a - b)).sum(),
            KlMode::Literal => lp.iter().zip(lq).map(|(&a, &b)| a - b).sum(),
        })
        .collect()
}

/// KL between the temperature-1 action distributions of two networks at
/// every state of `clip`.
pub fn state_kl(params: &ParamSet, anchor: &ParamSet, clip: &Clip, mode: KlMode) -> Vec<f64> {
    let inputs = state_inputs(&[clip]);
    let logp = log_softmax_rows(&params.forward(&inputs, Heads::POLICY).logits, 1.0);
    let logq = log_softmax_rows(&anchor.forward(&inputs, Heads::POLICY).logits, 1.0);
    kl_rows(&logp, &logq, mode)
}

/// Value of the policy surrogate on a fixed batch, with the gradient of its
/// negation (the quantity minimized).
#[derive(Debug, Clone)]
pub struct PolicyObjective {
    pub surrogate: f64,
    /// Per-state KL, clip-major.
    pub kl: Vec<f64>,
    pub grads: ParamSet,
}

impl PolicyObjective {
    /// Summed per-state KL of each sequence.
    pub fn kl_per_sequence(&self) -> Vec<f64> {
        self.kl.chunks(CLIP_LEN).map(|c| c.iter().sum()).collect()
    }
}

/// `advantages` holds one entry per state, clip-major (`B × 72`).
pub fn policy_objective(
    policy: &ParamSet,
    anchor: &ParamSet,
    clips: &[&Clip],
    advantages: &[f64],
    alpha: f64,
    mode: KlMode,
) -> Result<PolicyObjective> {
    let n_rows = clips.len() * CLIP_LEN;
    if advantages.len() != n_rows {
        return Err(Error::Shape {
            tensor: "advantages".into(),
            expected: (n_rows, 1),
            got: (advantages.len(), 1),
        });
    }
    let inputs = state_inputs(clips);
    let fwd = policy.forward(&inputs, Heads::POLICY);
    let logp = log_softmax_rows(&fwd.logits, 1.0);
    let logq = log_softmax_rows(&anchor.forward(&inputs, Heads::POLICY).logits, 1.0);
    let kl = kl_rows(&logp, &logq, mode);
    let b = clips.len() as f64;

    let mut surrogate = 0.0;
    let mut dlogits = Array2::<f64>::zeros((n_rows, N_ACTIONS));
    let actions = clips
        .iter()
        .flat_map(|c| c.tokens().iter().map(|t| t.id() as usize));
    for (row, a) in actions.enumerate() {
        let adv = advantages[row];
        surrogate += (1.0 - alpha) * logp[[row, a]] * adv - alpha * kl[row];
        let mut d = dlogits.row_mut(row);
        for j in 0..N_ACTIONS {
            let p = logp[[row, j]].exp();
            let dlog = f64::from(u8::from(j == a)) - p;
            let dkl = match mode {
                KlMode::Exact => p * (logp[[row, j]] - logq[[row, j]] - kl[row]),
                KlMode::Literal => 1.0 - N_ACTIONS as f64 * p,
            };
            // Gradient of the negated surrogate.
            d[j] = -((1.0 - alpha) * adv * dlog - alpha * dkl) / b;
        }
    }
    let grads = policy.backward(&fwd.cache, Some(&dlogits), None)?;
    Ok(PolicyObjective {
        surrogate: surrogate / b,
        kl,
        grads,
    })
}

/// `(1/B) Σ_i Σ_t (G_it − V(s_it))²`, its gradient, and the predicted values.
pub fn value_objective(
    value: &ParamSet,
    clips: &[&Clip],
    returns: &[f64],
) -> Result<(f64, ParamSet, Vec<f64>)> {
    let n_rows = clips.len() * CLIP_LEN;
    if returns.len() != n_rows {
        return Err(Error::Shape {
            tensor: "returns".into(),
            expected: (n_rows, 1),
            got: (returns.len(), 1),
        });
    }
    let fwd = value.forward(&state_inputs(clips), Heads::VALUE);
    let v = fwd.values.column(0).to_vec();
    let b = clips.len() as f64;
    let mut loss = 0.0;
    let mut dv = Array2::<f64>::zeros((n_rows, 1));
    for i in 0..n_rows {
        let err = returns[i] - v[i];
        loss += err * err;
        dv[[i, 0]] = -2.0 * err / b;
    }
    let grads = value.backward(&fwd.cache, None, Some(&dv))?;
    Ok((loss / b, grads, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    R,
    QualityOnly,
    MulanOnly,
    U,
    Ru,
}

impl Regime {
    pub fn reward(self) -> RewardSpec {
        match self {
            Regime::R => RewardSpec::of(RewardKind::Combined),
            Regime::QualityOnly => RewardSpec::of(RewardKind::Quality),
            Regime::MulanOnly => RewardSpec::of(RewardKind::Adherence),
            Regime::U | Regime::Ru => RewardSpec::of(RewardKind::Rm),
        }
    }

    /// Default `(steps, selected step)`.
    pub fn budget(self) -> (usize, usize) {
        match self {
            Regime::R | Regime::QualityOnly | Regime::MulanOnly => (2000, 1000),
            Regime::U => (500, 200),
            Regime::Ru => (100, 100),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Regime::R => "R",
            Regime::QualityOnly => "QUALITY_ONLY",
            Regime::MulanOnly => "MULAN_ONLY",
            Regime::U => "U",
            Regime::Ru => "RU",
        }
    }

    pub fn needs_rm(self) -> bool {
        matches!(self, Regime::U | Regime::Ru)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub regime: Regime,
    pub reward: RewardSpec,
    pub alpha: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub batch: usize,
    pub steps: usize,
    /// Step whose parameters are kept as the selected checkpoint.
    pub select_step: usize,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default)]
    pub kl_mode: KlMode,
}

impl RlConfig {
    pub fn for_regime(regime: Regime, seed: u64) -> Self {
        let (steps, select_step) = regime.budget();
        RlConfig {
            regime,
            reward: regime.reward(),
            alpha: 0.05,
            lr_policy: 1e-4,
            lr_value: 1e-3,
            batch: 32,
            steps,
            select_step,
            temperature: DEFAULT_TEMPERATURE,
            seed,
            kl_mode: KlMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0,1], got {}", self.alpha));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.select_step > self.steps {
            return bad(format!(
                "select_step {} exceeds steps {}",
                self.select_step, self.steps
            ));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        Ok(())
    }
}

/// One training-step record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean over the batch of the summed per-state KL to the anchor, in nats.
    pub kl_to_anchor: f64,
    pub adherence: f64,
    /// Raw MOS-scale quality.
    pub quality: f64,
    /// Absent when no reward model was supplied.
    pub rm_score: Option<f64>,
    pub value_loss: f64,
    pub policy_surrogate: f64,
}

pub const METRICS_HEADER: &str =
    "step,mean_reward,kl_to_anchor,adherence,quality,rm_score,value_loss,policy_surrogate";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.mean_reward,
            r.kl_to_anchor,
            r.adherence,
            r.quality,
            r.rm_score.map(|v| v.to_string()).unwrap_or_default(),
            r.value_loss,
            r.policy_surrogate
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::SchemaMismatch(format!(
                "metrics header {:?} does not match {METRICS_HEADER:?}",
                other.unwrap_or("")
            )));
        }
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Parse(format!("metrics line {line}: {e}")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::SchemaMismatch(format!(
                    "metrics line {} has {} fields, expected 8",
                    i + 2,
                    f.len()
                )));
            }
            Ok(MetricsRow {
                step: f[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("metrics line {}: {e}", i + 2)))?,
                mean_reward: num(f[1], i + 2)?,
                kl_to_anchor: num(f[2], i + 2)?,
                adherence: num(f[3], i + 2)?,
                quality: num(f[4], i + 2)?,
                rm_score: if f[5].is_empty() {
                    None
                } else {
                    Some(num(f[5], i + 2)?)
                },
                value_loss: num(f[6], i + 2)?,
                policy_surrogate: num(f[7], i + 2)?,
            })
        })
        .collect()
}

/// Terminal reward of one clip plus the automatic scores it was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRewards {
    pub reward: f64,
    pub adherence: f64,
    pub quality: f64,
    pub rm_score: Option<f64>,
}

pub fn clip_rewards(
    clips: &[&Clip],
    spec: &RewardSpec,
    rm: Option<&ParamSet>,
) -> Result<Vec<ClipRewards>> {
    let rm_vals = rm.map(|p| rm_scores(p, clips, &RmAblation::FULL));
    if spec.kind == RewardKind::Rm && rm_vals.is_none() {
        return Err(Error::MissingPrerequisite(
            "RM reward requires a reward model".into(),
        ));
    }
    Ok(clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let adherence = adherence_score(c, &c.prompt);
            let quality = quality_score(c);
            let rm_score = rm_vals.as_ref().map(|v| v[i]);
            let q = if spec.normalize_quality {
                normalize_quality(quality)
            } else {
                quality
            };
            let reward = match spec.kind {
                RewardKind::Adherence => adherence,
                RewardKind::Quality => q,
                RewardKind::Rm => rm_score.expect("checked above"),
                RewardKind::Combined => spec.w_adherence * adherence + spec.w_quality * q,
            };
            ClipRewards {
                reward,
                adherence,
                quality,
                rm_score,
            }
        })
        .collect())
}

/// One sampled sequence with everything the update uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub clip: Clip,
    /// Log-probabilities under the sampling distribution.
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: f64,
    pub returns: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Mutable training state of one run.
#[derive(Debug, Clone)]
pub struct RlState {
    pub policy: ParamSet,
    pub value: ParamSet,
    policy_adam: AdamState,
    value_adam: AdamState,
    pub step: usize,
}

impl RlState {
    /// Policy and value network both start from `init`; the value head starts at zero.
    pub fn new(init: &ParamSet, config: &RlConfig) -> Self {
        let mut value = init.clone();
        value.reset_value_head();
        RlState {
            policy: init.clone(),
            value,
            policy_adam: AdamState::new(AdamConfig::with_lr(config.lr_policy)),
            value_adam: AdamState::new(AdamConfig::with_lr(config.lr_value)),
            step: 0,
        }
    }
}

/// Frozen inputs of a run.
#[derive(Debug, Clone, Copy)]
pub struct RlContext<'a> {
    pub anchor: &'a ParamSet,
    pub rm: Option<&'a ParamSet>,
    pub config: &'a RlConfig,
}

fn trajectory_prompts(seed: u64, step: usize, batch: usize) -> (Vec<Prompt>, Vec<Rng>) {
    (0..batch)
        .map(|i| {
            let mut rng = rng::stream(seed, &[0x5EED, step as u64, i as u64]);
            let p = sample_prompt(&mut rng);
            (p, rng)
        })
        .unzip()
}

/// Sample a batch, log metrics, and (when `update`) apply one Adam step to
/// each network.
pub fn rl_step(
    state: &mut RlState,
    ctx: &RlContext<'_>,
    update: bool,
) -> Result<(MetricsRow, Vec<Trajectory>)> {
    let cfg = ctx.config;
    let (prompts, mut rngs) = trajectory_prompts(cfg.seed, state.step, cfg.batch);
    let generated = generate_batch(&state.policy, &prompts, cfg.temperature, &mut rngs)?;
    let clips: Vec<&Clip> = generated.iter().map(|g| &g.clip).collect();
    let scored = clip_rewards(&clips, &cfg.reward, ctx.rm)?;

    let returns: Vec<f64> = scored
        .iter()
        .flat_map(|s| {
            let mut r = vec![0.0; CLIP_LEN];
            r[CLIP_LEN - 1] = s.reward;
            returns_to_go(&r)
        })
        .collect();
    let (value_loss, value_grads, values) = value_objective(&state.value, &clips, &returns)?;
    let advantages: Vec<f64> = returns.iter().zip(&values).map(|(g, v)| g - v).collect();
    let obj = policy_objective(
        &state.policy,
        ctx.anchor,
        &clips,
        &advantages,
        cfg.alpha,
        cfg.kl_mode,
    )?;

    if !(obj.surrogate.is_finite() && value_loss.is_finite()) {
        return Err(Error::NonFinite(format!("RL loss at step {}", state.step)));
    }
    let b = cfg.batch as f64;
    let row = MetricsRow {
        step: state.step,
        mean_reward: scored.iter().map(|s| s.reward).sum::<f64>() / b,
        kl_to_anchor: obj.kl_per_sequence().iter().sum::<f64>() / b,
        adherence: scored.iter().map(|s| s.adherence).sum::<f64>() / b,
        quality: scored.iter().map(|s| s.quality).sum::<f64>() / b,
        rm_score: ctx.rm.map(|_| {
            scored
                .iter()
                .map(|s| s.rm_score.expect("rm supplied"))
                .sum::<f64>()
                / b
        }),
        value_loss,
        policy_surrogate: obj.surrogate,
    };
    if update {
        state.policy_adam.step(&mut state.policy, &obj.grads)?;
        state.value_adam.step(&mut state.value, &value_grads)?;
        state.step += 1;
    }
    let trajectories = generated
        .into_iter()
        .zip(scored)
        .enumerate()
        .map(|(i, (g, s))| {
            let rows = i * CLIP_LEN..(i + 1) * CLIP_LEN;
            Trajectory {
                clip: g.clip,
                logprobs: g.logprobs,
                values: values[rows.clone()].to_vec(),
                reward: s.reward,
                returns: returns[rows.clone()].to_vec(),
                kl: obj.kl[rows].to_vec(),
            }
        })
        .collect();
    Ok((row, trajectories))
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct RlRun {
    pub selected: ParamSet,
    pub final_policy: ParamSet,
    /// Rows for steps `0..=steps`; the last row is measured after the final update.
    pub metrics: Vec<MetricsRow>,
    /// Set when the run stopped on a non-finite loss; the parameters are then
    /// the last good ones.
    pub aborted: Option<String>,
}

/// Train from `init` against `anchor` for `config.steps` updates.
pub fn train_rl(
    init: &ParamSet,
    anchor: &ParamSet,
    rm: Option<&ParamSet>,
    config: &RlConfig,
) -> Result<RlRun> {
    config.validate()?;
    if config.reward.kind == RewardKind::Rm && rm.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "regime {} needs a trained reward model",
            config.regime.tag()
        )));
    }
    let ctx = RlContext { anchor, rm, config };
    let mut state = RlState::new(init, config);
    let mut metrics = Vec::with_capacity(config.steps + 1);
    let mut selected = (config.select_step == 0).then(|| init.clone());
    for step in 0..=config.steps {
        let update = step < config.steps;
        let last_good = state.policy.clone();
        match rl_step(&mut state, &ctx, update) {
            Ok((row, _)) => {
                if step % 100 == 0 || step == config.steps {
                    info!(
                        "rl[{}] step {step} reward {:.4} kl {:.4} adh {:.4} q {:.4} rm {:?}",
                        config.regime.tag(),
                        row.mean_reward,
                        row.kl_to_anchor,
                        row.adherence,
                        row.quality,
                        row.rm_score
                    );
                }
                metrics.push(row);
            }
            Err(Error::NonFinite(msg)) => {
                warn!("rl[{}] aborted: {msg}", config.regime.tag());
                return Ok(RlRun {
                    selected: selected.unwrap_or_else(|| last_good.clone()),
                    final_policy: last_good,
                    metrics,
                    aborted: Some(msg),
                });
            }
            Err(e) => return Err(e),
        }
        if update && state.step == config.select_step {
            selected = Some(state.policy.clone());
        }
    }
    Ok(RlRun {
        selected: selected.expect("select_step ≤ steps"),
        final_policy: state.policy,
        metrics,
        aborted: None,
    })
}

/// Checkpoints a regime may need.
#[derive(Debug, Clone, Copy)]
pub struct RegimeInputs<'a> {
    pub base: &'a ParamSet,
    /// Selected R checkpoint; initialization and anchor for RU.
    pub r_checkpoint: Option<&'a ParamSet>,
    pub rm: Option<&'a ParamSet>,
}

pub fn train_regime(inputs: &RegimeInputs<'_>, config: &RlConfig) -> Result<RlRun> {
    let start = match config.regime {
        Regime::Ru => inputs
            .r_checkpoint
            .ok_or_else(|| Error::MissingPrerequisite("regime RU needs the R checkpoint".into()))?,
        _ => inputs.base,
    };
    if config.regime.needs_rm() && inputs.rm.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "regime {} needs a trained reward model",
            config.regime.tag()
        )));
    }
    train_rl(start, start, inputs.rm, config)
}

/// `params` plus independent N(0, σ²) noise on every coordinate.
pub fn gaussian_perturbation(params: &ParamSet, sigma: f64, rng: &mut Rng) -> ParamSet {
    let mut out = params.clone();
    out.add_scaled(&ParamSet::random(rng, sigma), 1.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck;
    use crate::policy::generate;
    use crate::rng::stream;
    use rand::Rng as _;

    #[test]
    fn returns_examples() {
        let mut r = vec![0.0; 5];
        r[4] = 0.8;
        assert_eq!(returns_to_go(&r), vec![0.8; 5]);
        assert_eq!(returns_to_go(&[0.0, 1.0, 2.0]), vec![3.0, 3.0, 2.0]);
        assert_eq!(returns_to_go(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn kl_zero_against_self() {
        let p = ParamSet::random(&mut stream(1, &[]), 0.3);
        let c = generate(&p, &Prompt::from_index(3), 1.0, &mut stream(2, &[]))
            .unwrap()
            .clip;
        for k in state_kl(&p, &p, &c, KlMode::Exact) {
            assert_eq!(k, 0.0);
        }
    }

    #[test]
    fn two_way_kl_limit() {
        let eps: f64 = 1e-6;
        let logp = Array2::from_shape_vec((1, 2), vec![(1.0 - eps).ln(), eps.ln()]).unwrap();
        let logq = Array2::from_elem((1, 2), 0.5f64.ln());
        let kl = kl_rows(&logp, &logq, KlMode::Exact)[0];
        assert!((kl - 2f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn exact_kl_is_non_negative() {
        let p = ParamSet::random(&mut stream(3, &[]), 0.5);
        let q = ParamSet::random(&mut stream(4, &[]), 0.5);
        let c = generate(&p, &Prompt::from_index(9), 1.0, &mut stream(5, &[]))
            .unwrap()
            .clip;
        assert!(
            state_kl(&p, &q, &c, KlMode::Exact)
                .iter()
                .all(|&k| k >= 0.0)
        );
    }

    fn frozen_batch(params: &ParamSet, n: usize) -> Vec<Clip> {
        (0..n)
            .map(|i| {
                generate(
                    params,
                    &Prompt::from_index(i * 31 % 324),
                    1.0,
                    &mut stream(9, &[i as u64]),
                )
                .unwrap()
                .clip
            })
            .collect()
    }

    #[test]
    fn zero_advantage_zero_alpha_gives_zero_gradient() {
        let p = ParamSet::random(&mut stream(6, &[]), 0.3);
        let clips = frozen_batch(&p, 3);
        let refs: Vec<&Clip> = clips.iter().collect();
        let obj =
            policy_objective(&p, &p, &refs, &vec![0.0; 3 * CLIP_LEN], 0.0, KlMode::Exact).unwrap();
        assert_eq!(obj.surrogate, 0.0);
        assert_eq!(obj.grads.dot(&obj.grads), 0.0);
    }

    #[test]
    fn surrogate_gradcheck() {
        let p = ParamSet::random(&mut stream(7, &[]), 0.3);
        let anchor = ParamSet::random(&mut stream(8, &[]), 0.3);
        let clips = frozen_batch(&p, 2);
        let refs: Vec<&Clip> = clips.iter().collect();
        let mut arng = stream(10, &[]);
        let adv: Vec<f64> = (0..2 * CLIP_LEN)
            .map(|_| arng.random::<f64>() - 0.5)
            .collect();
        for (alpha, mode) in [
            (0.05, KlMode::Exact),
            (1.0, KlMode::Exact),
            (0.3, KlMode::Literal),
        ] {
            let report = gradcheck(
                &p,
                |q| {
                    let o = policy_objective(q, &anchor, &refs, &adv, alpha, mode).unwrap();
                    (-o.surrogate, o.grads)
                },
                200,
                1e-4,
                &mut stream(11, &[]),
            );
            assert!(
                report.passed,
                "alpha {alpha} {mode:?}: {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn value_gradcheck() {
        let p = ParamSet::random(&mut stream(12, &[]), 0.3);
        let clips = frozen_batch(&p, 2);
        let refs: Vec<&Clip> = clips.iter().collect();
        let returns: Vec<f64> = (0..2 * CLIP_LEN)
            .map(|i| (i / CLIP_LEN) as f64 * 0.7 - 0.2)
            .collect();
        let report = gradcheck(
            &p,
            |q| {
                let (l, g, _) = value_objective(q, &refs, &returns).unwrap();
                (l, g)
            },
            200,
            1e-4,
            &mut stream(13, &[]),
        );
        assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow {
                step: 0,
                mean_reward: 1.5,
                kl_to_anchor: 0.0,
                adherence: 0.9,
                quality: 4.75,
                rm_score: None,
                value_loss: 2.0,
                policy_surrogate: -0.1,
            },
            MetricsRow {
                step: 1,
                mean_reward: 1.25,
                kl_to_anchor: 0.01,
                adherence: 0.8,
                quality: 5.0,
                rm_score: Some(-0.5),
                value_loss: 1.0,
                policy_surrogate: 0.2,
            },
        ];
        let text = metrics_csv(&rows);
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("step,foo\n").is_err());
    }

    #[test]
    fn ru_requires_r_checkpoint() {
        let base = ParamSet::zeros();
        let cfg = RlConfig::for_regime(Regime::Ru, 0);
        let err = train_regime(
            &RegimeInputs {
                base: &base,
                r_checkpoint: None,
                rm: Some(&base),
            },
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err.kind(), "missing_prerequisite");
        let err = train_regime(
            &RegimeInputs {
                base: &base,
                r_checkpoint: None,
                rm: None,
            },
            &RlConfig::for_regime(Regime::U, 0),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "missing_prerequisite");
    }

    #[test]
    fn short_run_is_deterministic_and_starts_at_zero_kl() {
        let base = ParamSet::init(&mut stream(14, &[]));
        let cfg = RlConfig {
            batch: 4,
            steps: 3,
            select_step: 2,
            ..RlConfig::for_regime(Regime::R, 5)
        };
        let a = train_rl(&base, &base, None, &cfg).unwrap();
        let b = train_rl(&base, &base, None, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_policy, b.final_policy);
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(a.metrics[0].kl_to_anchor, 0.0);
        assert_ne!(a.selected, a.final_policy);
    }
}
