//! Pairwise preference data: the record schema, the hidden-musicality oracle
//! that stands in for users, training filters and dataset construction.

use std::collections::HashMap;
use std::path::Path;

use log::info;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::BAR_LEN;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::net::ParamSet;
use crate::policy::generate_batch;
use crate::rng::{self, Rng};
use crate::symbolic::{Clip, Prompt, Token};

/// Bisection budget for [`calibrate_beta`].
pub const CALIBRATION_ITERATIONS: usize = 60;
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
pub const CALIBRATION_PAIRS: usize = 2000;
const BETA_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "SKIP")]
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Oracle,
    Ui,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub pair_id: String,
    pub prompt: Prompt,
    pub clip_a: Vec<u32>,
    pub clip_b: Vec<u32>,
    pub choice: Choice,
    pub listened_a: bool,
    pub listened_b: bool,
    pub source: Source,
    /// Milliseconds since the Unix epoch for UI records, pair index for oracle ones.
    pub timestamp: u64,
}

impl PreferenceRecord {
    pub fn clips(&self) -> Result<(Clip, Clip)> {
        Ok((
            Clip::from_ids(self.prompt, &self.clip_a)?,
            Clip::from_ids(self.prompt, &self.clip_b)?,
        ))
    }

    /// Usable for training and evaluation: a decided choice after both clips were heard.
    pub fn is_trainable(&self) -> bool {
        self.choice != Choice::Skip && self.listened_a && self.listened_b
    }

    /// `(winner, loser)`, or `None` for a skip.
    pub fn winner_loser(&self) -> Result<Option<(Clip, Clip)>> {
        let (a, b) = self.clips()?;
        Ok(match self.choice {
            Choice::A => Some((a, b)),
            Choice::B => Some((b, a)),
            Choice::Skip => None,
        })
    }
}

/// Keep only trainable records; also returns how many were dropped.
pub fn training_records(records: &[PreferenceRecord]) -> (Vec<PreferenceRecord>, usize) {
    let kept: Vec<PreferenceRecord> = records
        .iter()
        .filter(|r| r.is_trainable())
        .cloned()
        .collect();
    let dropped = records.len() - kept.len();
    (kept, dropped)
}

pub fn write_preferences(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let records: Vec<PreferenceRecord> = read_jsonl(path)?;
    for r in &records {
        r.clips()?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MusicalityWeights {
    pub contour: f64,
    pub motif: f64,
    pub rhythm: f64,
    pub in_scale: f64,
}

impl Default for MusicalityWeights {
    fn default() -> Self {
        MusicalityWeights {
            contour: 0.35,
            motif: 0.35,
            rhythm: 0.15,
            in_scale: 0.15,
        }
    }
}

impl MusicalityWeights {
    fn as_array(&self) -> [f64; 4] {
        [self.contour, self.motif, self.rhythm, self.in_scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub weights: MusicalityWeights,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "oracle beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        let w = self.weights.as_array();
        if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "musicality weights must be non-negative and sum to 1, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// The four musicality components, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MusicalityParts {
    pub contour: f64,
    pub motif: f64,
    pub rhythm: f64,
    pub in_scale: f64,
}

impl MusicalityParts {
    pub fn weighted(&self, w: &MusicalityWeights) -> f64 {
        w.contour * self.contour
            + w.motif * self.motif
            + w.rhythm * self.rhythm
            + w.in_scale * self.in_scale
    }
}

pub fn musicality_parts(clip: &Clip) -> MusicalityParts {
    let tokens = clip.tokens();
    let onsets: Vec<u8> = tokens.iter().filter_map(|t| t.pitch()).collect();

    let contour = if onsets.len() < 2 {
        0.0
    } else {
        let mean_step = onsets
            .windows(2)
            .map(|w| f64::from(w[0].abs_diff(w[1])))
            .sum::<f64>()
            / (onsets.len() - 1) as f64;
        1.0 - ((mean_step - 2.0).abs() / 6.0).min(1.0)
    };

    // Most frequent 8-step pattern with at least two onsets.
    let mut patterns: HashMap<&[Token], usize> = HashMap::new();
    for w in tokens.windows(BAR_LEN) {
        if w.iter().filter(|t| t.pitch().is_some()).count() >= 2 {
            *patterns.entry(w).or_default() += 1;
        }
    }
    let max_count = patterns.values().copied().max().unwrap_or(1);
    let motif = ((max_count as f64 - 1.0) / 2.0).min(1.0);

    let bar_onsets: Vec<usize> = tokens
        .chunks(BAR_LEN)
        .map(|bar| bar.iter().filter(|t| t.pitch().is_some()).count())
        .collect();
    let mut freq = [0usize; BAR_LEN + 1];
    for &c in &bar_onsets {
        freq[c] += 1;
    }
    let rhythm = *freq.iter().max().expect("non-empty") as f64 / bar_onsets.len() as f64;

    let scale = clip.prompt.scale();
    let in_scale = if onsets.is_empty() {
        0.0
    } else {
        onsets.iter().filter(|&&p| scale.contains_pitch(p)).count() as f64 / onsets.len() as f64
    };

    MusicalityParts {
        contour,
        motif,
        rhythm,
        in_scale,
    }
}

/// Hidden musicality score in [0, 1] under the given weights.
pub fn musicality_with(clip: &Clip, weights: &MusicalityWeights) -> f64 {
    musicality_parts(clip).weighted(weights)
}

/// Hidden musicality score in [0, 1] under the default weights.
pub fn musicality(clip: &Clip) -> f64 {
    musicality_with(clip, &MusicalityWeights::default())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability that the oracle prefers `a` over `b`.
pub fn oracle_prob_a(a: &Clip, b: &Clip, config: &OracleConfig) -> f64 {
    sigmoid(
        config.beta * (musicality_with(a, &config.weights) - musicality_with(b, &config.weights)),
    )
}

pub fn oracle_choice(a: &Clip, b: &Clip, config: &OracleConfig, rng: &mut Rng) -> Choice {
    if rng.random::<f64>() < oracle_prob_a(a, b, config) {
        Choice::A
    } else {
        Choice::B
    }
}

/// Bayes accuracy `E[σ(β·|Δm|)]` of an oracle with sharpness `beta`.
pub fn bayes_accuracy(beta: f64, deltas: &[f64]) -> f64 {
    deltas.iter().map(|d| sigmoid(beta * d.abs())).sum::<f64>() / deltas.len() as f64
}

/// Sharpness at which the oracle's Bayes accuracy on `deltas` matches `target`.
pub fn calibrate_beta(target: f64, deltas: &[f64]) -> Result<f64> {
    if !(0.5..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target Bayes accuracy must lie in [0.5, 1], got {target}"
        )));
    }
    if deltas.is_empty() {
        return Err(Error::EmptyDataset("calibration pairs".into()));
    }
    if target == 0.5 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, BETA_MAX);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..CALIBRATION_ITERATIONS {
        mid = 0.5 * (lo + hi);
        if bayes_accuracy(mid, deltas) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (bayes_accuracy(mid, deltas) - target).abs() > CALIBRATION_TOLERANCE {
        return Err(Error::UnreachableTarget {
            target,
            iterations: CALIBRATION_ITERATIONS,
        });
    }
    Ok(mid)
}

/// Two clips for one prompt drawn from the policy.
#[derive(Debug, Clone)]
pub struct ClipPair {
    pub a: Clip,
    pub b: Clip,
}

const PAIR_CHUNK: usize = 256;

/// `n` clip pairs from `params`; pair `i` uses a prompt drawn uniformly from
/// `pool` and RNG streams keyed by `(seed, tag, i)`.
pub fn sample_pairs(
    params: &ParamSet,
    pool: &[Prompt],
    n: usize,
    temperature: f64,
    seed: u64,
    tag: u64,
) -> Result<Vec<ClipPair>> {
    if pool.is_empty() {
        return Err(Error::EmptyDataset("prompt pool".into()));
    }
    let chunks: Vec<Vec<ClipPair>> = (0..n.div_ceil(PAIR_CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * PAIR_CHUNK..((c + 1) * PAIR_CHUNK).min(n);
            let mut prompts = Vec::with_capacity(2 * range.len());
            let mut rngs = Vec::with_capacity(2 * range.len());
            for i in range {
                let i = i as u64;
                let p = pool[rng::stream(seed, &[tag, i]).random_range(0..pool.len())];
                for side in 0..2 {
                    prompts.push(p);
                    rngs.push(rng::stream(seed, &[tag, i, side + 1]));
                }
            }
            let clips = generate_batch(params, &prompts, temperature, &mut rngs)?;
            Ok(clips
                .chunks(2)
                .map(|ab| ClipPair {
                    a: ab[0].clip.clone(),
                    b: ab[1].clip.clone(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Musicality differences of [`CALIBRATION_PAIRS`] policy pairs.
pub fn calibration_deltas(
    params: &ParamSet,
    pool: &[Prompt],
    weights: &MusicalityWeights,
    temperature: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(
        sample_pairs(params, pool, CALIBRATION_PAIRS, temperature, seed, 0xCA1B)?
            .iter()
            .map(|p| musicality_with(&p.a, weights) - musicality_with(&p.b, weights))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefBuildConfig {
    pub n_pairs: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub temperature: f64,
    pub seed: u64,
}

fn default_eval_fraction() -> f64 {
    0.05
}

impl Default for PrefBuildConfig {
    fn default() -> Self {
        PrefBuildConfig {
            n_pairs: 20_000,
            eval_fraction: default_eval_fraction(),
            temperature: crate::policy::DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreferenceDataset {
    pub train: Vec<PreferenceRecord>,
    pub eval: Vec<PreferenceRecord>,
    /// Records dropped by the trainability filter across both splits.
    pub filtered: usize,
}

/// Oracle-labelled pairs sampled from `params`, split train/eval and filtered.
pub fn build_preference_dataset(
    params: &ParamSet,
    pool: &[Prompt],
    config: &PrefBuildConfig,
    oracle: &OracleConfig,
) -> Result<PreferenceDataset> {
    if config.n_pairs < 100 {
        return Err(Error::InvalidArgument(format!(
            "n_pairs must be at least 100, got {}",
            config.n_pairs
        )));
    }
    if !(config.eval_fraction > 0.0 && config.eval_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eval_fraction must lie in (0,1), got {}",
            config.eval_fraction
        )));
    }
    oracle.validate()?;
    let pairs = sample_pairs(
        params,
        pool,
        config.n_pairs,
        config.temperature,
        config.seed,
        0x9A1,
    )?;
    let records: Vec<PreferenceRecord> = pairs
        .into_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = rng::stream(oracle.seed, &[0x0AC1, i as u64]);
            PreferenceRecord {
                pair_id: format!("oracle-{}-{i:06}", config.seed),
                prompt: pair.a.prompt,
                clip_a: pair.a.ids(),
                clip_b: pair.b.ids(),
                choice: oracle_choice(&pair.a, &pair.b, oracle, &mut rng),
                listened_a: true,
                listened_b: true,
                source: Source::Oracle,
                timestamp: i as u64,
            }
        })
        .collect();
    let n_eval = (config.eval_fraction * config.n_pairs as f64).round() as usize;
    let mut train = records;
    let eval = train.split_off(config.n_pairs - n_eval);
    let (train, dropped_train) = training_records(&train);
    let (eval, dropped_eval) = training_records(&eval);
    let filtered = dropped_train + dropped_eval;
    info!(
        "preference dataset: {} train, {} eval, {filtered} filtered",
        train.len(),
        eval.len()
    );
    Ok(PreferenceDataset {
        train,
        eval,
        filtered,
    })
}

/// Bayes accuracy of the oracle on the pairs of `records`.
pub fn oracle_ceiling(records: &[PreferenceRecord], oracle: &OracleConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("preference records".into()));
    }
    let mut total = 0.0;
    for r in records {
        let (a, b) = r.clips()?;
        let p = oracle_prob_a(&a, &b, oracle);
        total += p.max(1.0 - p);
    }
    Ok(total / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::corpus_item;
    use crate::symbolic::{CLIP_LEN, Density, Mode, Register};

    fn prompt() -> Prompt {
        Prompt::new(0, Mode::Major, Density::Med, Register::Mid)
    }

    /// Up-and-down by whole steps, one bar repeated throughout.
    fn ideal_clip() -> Clip {
        let bar = [
            Token::Note(0),
            Token::Rest,
            Token::Note(2),
            Token::Rest,
            Token::Note(4),
            Token::Rest,
            Token::Note(2),
            Token::Rest,
        ];
        Clip::new(prompt(), bar.into_iter().cycle().take(CLIP_LEN).collect()).unwrap()
    }

    #[test]
    fn ideal_clip_saturates_every_component() {
        let c = ideal_clip();
        let parts = musicality_parts(&c);
        assert_eq!(
            parts,
            MusicalityParts {
                contour: 1.0,
                motif: 1.0,
                rhythm: 1.0,
                in_scale: 1.0
            }
        );
        assert!((musicality(&c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_clip_has_zero_contour() {
        let mut toks = vec![Token::Rest; CLIP_LEN];
        toks[10] = Token::Note(5);
        let c = Clip::new(prompt(), toks).unwrap();
        let parts = musicality_parts(&c);
        assert_eq!(parts.contour, 0.0);
        assert_eq!(parts.motif, 0.0);
        assert!((0.0..=1.0).contains(&musicality(&c)));
    }

    #[test]
    fn corpus_motif_term_is_substantial() {
        let mean = (0..200)
            .map(|i| musicality_parts(&corpus_item(3, i)).motif)
            .sum::<f64>()
            / 200.0;
        assert!(mean >= 0.5, "mean motif term {mean}");
    }

    #[test]
    fn equal_musicality_is_a_coin_flip() {
        let c = ideal_clip();
        let cfg = OracleConfig {
            beta: 5.0,
            seed: 0,
            weights: MusicalityWeights::default(),
        };
        assert_eq!(oracle_prob_a(&c, &c, &cfg), 0.5);
    }

    #[test]
    fn sigmoid_of_ln3_is_three_quarters() {
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(-3f64.ln()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn calibration_edges() {
        let deltas: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 100.0).collect();
        assert_eq!(calibrate_beta(0.5, &deltas).unwrap(), 0.0);
        let b6 = calibrate_beta(0.6, &deltas).unwrap();
        let b8 = calibrate_beta(0.8, &deltas).unwrap();
        assert!(b8 > b6);
        assert!((bayes_accuracy(b8, &deltas) - 0.8).abs() <= CALIBRATION_TOLERANCE);
        // One zero delta caps the reachable accuracy below 1.
        assert!(matches!(
            calibrate_beta(1.0, &deltas),
            Err(Error::UnreachableTarget { iterations: 60, .. })
        ));
        assert!(calibrate_beta(1.5, &deltas).is_err());
    }

    #[test]
    fn record_round_trip_and_filter() {
        let c = ideal_clip();
        let base = PreferenceRecord {
            pair_id: "p1".into(),
            prompt: c.prompt,
            clip_a: c.ids(),
            clip_b: c.ids(),
            choice: Choice::A,
            listened_a: true,
            listened_b: false,
            source: Source::Ui,
            timestamp: 1,
        };
        let json = serde_json::to_string(&base).unwrap();
        assert!(json.contains("\"choice\":\"A\""));
        assert!(json.contains("\"source\":\"UI\""));
        let back: PreferenceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, base);

        let skip = PreferenceRecord {
            choice: Choice::Skip,
            listened_b: true,
            ..base.clone()
        };
        let ok = PreferenceRecord {
            listened_b: true,
            ..base.clone()
        };
        let (kept, dropped) = training_records(&[base, skip, ok.clone()]);
        assert_eq!(kept, vec![ok]);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn skip_serializes_uppercase() {
        assert_eq!(serde_json::to_string(&Choice::Skip).unwrap(), "\"SKIP\"");
    }
}
