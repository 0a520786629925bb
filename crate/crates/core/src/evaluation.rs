//! Simulated side-by-side evaluation, win rates, the Wilcoxon signed-rank
//! test, and curve export.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::policy::{DEFAULT_TEMPERATURE, generate_batch};
use crate::preferences::musicality;
use crate::reward_model::{RmAblation, rm_scores};
use crate::rewards::{adherence_score, normalize_quality, quality_score};
use crate::rl::MetricsRow;
use crate::rng::{self, Rng, label_key};
use crate::symbolic::{Clip, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRaterConfig {
    pub n_raters: usize,
    pub sigma: f64,
    /// Weights over (normalized quality, adherence mapped to [0,1], musicality).
    pub weights: [f64; 3],
    pub seed: u64,
}

impl Default for SimRaterConfig {
    fn default() -> Self {
        SimRaterConfig {
            n_raters: 3,
            sigma: 0.3,
            weights: [0.4, 0.3, 0.3],
            seed: 0,
        }
    }
}

impl SimRaterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_raters.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "n_raters must be odd, got {}",
                self.n_raters
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0)
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "rater weights must be non-negative and sum to 1, got {:?}",
                self.weights
            )));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// What a simulated rater perceives, in [0, 1].
pub fn composite(clip: &Clip, prompt: &Prompt, weights: &[f64; 3]) -> f64 {
    weights[0] * normalize_quality(quality_score(clip))
        + weights[1] * (adherence_score(clip, prompt) + 1.0) / 2.0
        + weights[2] * musicality(clip)
}

/// Integer rating for a composite score plus Gaussian noise.
pub fn rating_from_composite(c: f64, sigma: f64, rng: &mut Rng) -> u8 {
    let noise = if sigma > 0.0 {
        sigma * Distribution::<f64>::sample(&StandardNormal, rng)
    } else {
        0.0
    };
    (1.0 + 4.0 * c + noise).round().clamp(1.0, 5.0) as u8
}

pub fn simulate_rating(clip: &Clip, prompt: &Prompt, config: &SimRaterConfig, rng: &mut Rng) -> u8 {
    rating_from_composite(composite(clip, prompt, &config.weights), config.sigma, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub value: f64,
    /// No wins and no losses; `value` is then 0.5 by convention.
    pub ties_only: bool,
}

/// `wins / (wins + losses)`.
pub fn win_rate(wins: f64, losses: f64) -> Result<WinRate> {
    if !(wins >= 0.0 && losses >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "win/loss counts must be non-negative, got {wins}/{losses}"
        )));
    }
    if wins + losses == 0.0 {
        return Ok(WinRate {
            value: 0.5,
            ties_only: true,
        });
    }
    Ok(WinRate {
        value: wins / (wins + losses),
        ties_only: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub n_zero: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest non-zero count handled by the exact distribution.
pub const WILCOXON_EXACT_MAX: usize = 30;

/// Average ranks of `values` (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped and
/// tied magnitudes share average ranks. Up to [`WILCOXON_EXACT_MAX`] non-zero
/// differences the p-value comes from the exact null distribution of the
/// realized ranks; beyond that, from a tie- and continuity-corrected normal
/// approximation.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(Error::AllTies);
    }
    let ranks = average_ranks(&nonzero.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        // Ranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max_sum + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        (normal_p_value(w_plus, &ranks), false)
    };
    Ok(Wilcoxon {
        w_plus,
        w_minus,
        n_effective: n,
        n_zero: diffs.len() - n,
        p_value,
        exact,
    })
}

/// Normal approximation with tie and continuity corrections.
fn normal_p_value(w_plus: f64, ranks: &[f64]) -> f64 {
    let nf = ranks.len() as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tie_term: f64 = sorted
        .chunk_by(|a, b| a == b)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// A model under evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub id: &'a str,
    pub params: &'a ParamSet,
}

/// One clip per prompt, from streams keyed by `(seed, prompt index, model id)`.
pub fn model_clips(
    model: &Model<'_>,
    prompts: &[Prompt],
    seed: u64,
    sample: u64,
) -> Result<Vec<Clip>> {
    let key = label_key(model.id);
    let mut rngs: Vec<Rng> = (0..prompts.len())
        .map(|j| rng::stream(seed, &[0x5A5, key, j as u64, sample]))
        .collect();
    Ok(
        generate_batch(model.params, prompts, DEFAULT_TEMPERATURE, &mut rngs)?
            .into_iter()
            .map(|g| g.clip)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub prompt_index: usize,
    pub prompt: String,
    pub rater: usize,
    pub rating_x: u8,
    pub rating_y: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SxSResult {
    pub model_x: String,
    pub model_y: String,
    pub n_prompts: usize,
    pub n_raters: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub ties_only: bool,
    /// Absent when every paired rating difference is zero.
    pub wilcoxon_p: Option<f64>,
    pub mos_x: f64,
    pub mos_y: f64,
    #[serde(skip)]
    pub ratings: Vec<RatingRow>,
}

fn rater_rng(seed: u64, prompt: usize, rater: usize, model_id: &str) -> Rng {
    rng::stream(
        seed,
        &[0x7A7E, prompt as u64, rater as u64, label_key(model_id)],
    )
}

/// Rate one clip per prompt from each model with `config.n_raters` raters.
pub fn side_by_side(
    x: &Model<'_>,
    y: &Model<'_>,
    prompts: &[Prompt],
    config: &SimRaterConfig,
) -> Result<SxSResult> {
    config.validate()?;
    if prompts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "side-by-side needs at least 2 prompts, got {}",
            prompts.len()
        )));
    }
    let clips_x = model_clips(x, prompts, config.seed, 0)?;
    let clips_y = model_clips(y, prompts, config.seed, 0)?;
    let ratings: Vec<RatingRow> = (0..prompts.len())
        .into_par_iter()
        .flat_map_iter(|j| {
            let cx = composite(&clips_x[j], &prompts[j], &config.weights);
            let cy = composite(&clips_y[j], &prompts[j], &config.weights);
            (0..config.n_raters)
                .map(|r| RatingRow {
                    prompt_index: j,
                    prompt: prompts[j].text(),
                    rater: r,
                    rating_x: rating_from_composite(
                        cx,
                        config.sigma,
                        &mut rater_rng(config.seed, j, r, x.id),
                    ),
                    rating_y: rating_from_composite(
                        cy,
                        config.sigma,
                        &mut rater_rng(config.seed, j, r, y.id),
                    ),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(summarize(
        x.id,
        y.id,
        prompts.len(),
        config.n_raters,
        ratings,
    ))
}

fn summarize(
    x: &str,
    y: &str,
    n_prompts: usize,
    n_raters: usize,
    ratings: Vec<RatingRow>,
) -> SxSResult {
    let wins = ratings.iter().filter(|r| r.rating_x > r.rating_y).count();
    let losses = ratings.iter().filter(|r| r.rating_x < r.rating_y).count();
    let ties = ratings.len() - wins - losses;
    let wr = win_rate(wins as f64, losses as f64).expect("counts are non-negative");
    let diffs: Vec<f64> = ratings
        .iter()
        .map(|r| f64::from(r.rating_x) - f64::from(r.rating_y))
        .collect();
    let n = ratings.len() as f64;
    SxSResult {
        model_x: x.into(),
        model_y: y.into(),
        n_prompts,
        n_raters,
        wins,
        ties,
        losses,
        win_rate: wr.value,
        ties_only: wr.ties_only,
        wilcoxon_p: wilcoxon_signed_rank(&diffs).ok().map(|w| w.p_value),
        mos_x: ratings.iter().map(|r| f64::from(r.rating_x)).sum::<f64>() / n,
        mos_y: ratings.iter().map(|r| f64::from(r.rating_y)).sum::<f64>() / n,
        ratings,
    }
}

pub fn ratings_csv(result: &SxSResult) -> String {
    let mut out = String::from("prompt_index,prompt,rater,rating_x,rating_y\n");
    for r in &result.ratings {
        out.push_str(&format!(
            "{},\"{}\",{},{},{}\n",
            r.prompt_index, r.prompt, r.rater, r.rating_x, r.rating_y
        ));
    }
    out
}

/// Per-prompt automatic scores of a model, averaged over `samples` clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScores {
    pub adherence: f64,
    pub quality: f64,
    pub musicality: f64,
    pub rm_score: Option<f64>,
}

pub fn prompt_scores(
    model: &Model<'_>,
    prompts: &[Prompt],
    samples: usize,
    seed: u64,
    rm: Option<&ParamSet>,
) -> Result<Vec<PromptScores>> {
    let mut acc = vec![
        PromptScores {
            adherence: 0.0,
            quality: 0.0,
            musicality: 0.0,
            rm_score: rm.map(|_| 0.0),
        };
        prompts.len()
    ];
    for s in 0..samples {
        let clips = model_clips(model, prompts, seed, 1 + s as u64)?;
        let refs: Vec<&Clip> = clips.iter().collect();
        let rm_vals = rm.map(|p| rm_scores(p, &refs, &RmAblation::FULL));
        for (j, c) in clips.iter().enumerate() {
            let a = &mut acc[j];
            a.adherence += adherence_score(c, &prompts[j]) / samples as f64;
            a.quality += quality_score(c) / samples as f64;
            a.musicality += musicality(c) / samples as f64;
            if let (Some(v), Some(r)) = (a.rm_score.as_mut(), rm_vals.as_ref()) {
                *v += r[j] / samples as f64;
            }
        }
    }
    Ok(acc)
}

/// Curve of one model, ready for export.
#[derive(Debug, Clone)]
pub struct CurveInput<'a> {
    pub model: &'a str,
    pub rows: &'a [MetricsRow],
    pub selected_step: Option<usize>,
}

/// Merge logs of one run into step order; later duplicates of a step replace
/// earlier ones.
pub fn merge_logs(parts: &[&[MetricsRow]]) -> Vec<MetricsRow> {
    let mut by_step = BTreeMap::new();
    for part in parts {
        for r in part.iter() {
            by_step.insert(r.step, *r);
        }
    }
    by_step.into_values().collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-form curve of one model: `step,kl_to_anchor,quality,adherence,rm_score,selected`.
pub fn curve_csv(input: &CurveInput<'_>) -> String {
    let mut out = String::from("step,kl_to_anchor,quality,adherence,rm_score,selected\n");
    for r in input.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.kl_to_anchor,
            r.quality,
            r.adherence,
            opt(r.rm_score),
            u8::from(input.selected_step == Some(r.step))
        ));
    }
    out
}

/// Wide curve table: one row per step, one column group per model.
pub fn wide_curves_csv(inputs: &[CurveInput<'_>]) -> String {
    let mut header = vec!["step".to_string()];
    for i in inputs {
        for col in [
            "kl_to_anchor",
            "quality",
            "adherence",
            "rm_score",
            "selected",
        ] {
            header.push(format!("{}_{col}", i.model));
        }
    }
    let steps: std::collections::BTreeSet<usize> = inputs
        .iter()
        .flat_map(|i| i.rows.iter().map(|r| r.step))
        .collect();
    let lookup: Vec<BTreeMap<usize, &MetricsRow>> = inputs
        .iter()
        .map(|i| i.rows.iter().map(|r| (r.step, r)).collect())
        .collect();
    let mut out = header.join(",") + "\n";
    for s in steps {
        let mut cells = vec![s.to_string()];
        for (i, m) in inputs.iter().zip(&lookup) {
            match m.get(&s) {
                Some(r) => cells.extend([
                    r.kl_to_anchor.to_string(),
                    r.quality.to_string(),
                    r.adherence.to_string(),
                    opt(r.rm_score),
                    u8::from(i.selected_step == Some(s)).to_string(),
                ]),
                None => cells.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        out.push_str(&(cells.join(",") + "\n"));
    }
    out
}

/// Centred moving average with a window of `2·half + 1`, truncated at the ends.
pub fn smooth(values: &[f64], half: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Uniform draw in `[0, 1)`; used to build random difference vectors in tests.
pub fn unit(rng: &mut Rng) -> f64 {
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Two-sided p by enumerating all sign assignments of the realized ranks.
    fn brute_force_p(diffs: &[f64]) -> f64 {
        let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
        let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let w: f64 = nz
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| r)
            .sum();
        let n = nz.len();
        let (mut le, mut ge) = (0usize, 0usize);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if s <= w + 1e-9 {
                le += 1;
            }
            if s >= w - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn rating_examples() {
        let mut rng = stream(0, &[]);
        assert_eq!(rating_from_composite(1.0, 0.0, &mut rng), 5);
        assert_eq!(rating_from_composite(0.0, 0.0, &mut rng), 1);
        assert_eq!(rating_from_composite(0.5, 0.0, &mut rng), 3);
    }

    #[test]
    fn win_rate_examples() {
        assert!((win_rate(65.0, 12.9).unwrap().value - 0.834).abs() < 1e-3);
        assert_eq!(
            win_rate(0.0, 0.0).unwrap(),
            WinRate {
                value: 0.5,
                ties_only: true
            }
        );
        assert_eq!(win_rate(7.0, 0.0).unwrap().value, 1.0);
        assert!(win_rate(-1.0, 2.0).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(w.w_plus, 15.0);
        assert!((w.p_value - 0.0625).abs() < 1e-12);
        let w = wilcoxon_signed_rank(&[1.0, -1.0]).unwrap();
        assert_eq!(w.w_plus, 1.5);
        assert_eq!(w.p_value, 1.0);
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0, 0.0]),
            Err(Error::AllTies)
        ));
    }

    #[test]
    fn wilcoxon_negation_swaps_sums() {
        let d = [0.5, -1.0, 2.0, 2.0, -3.0, 0.0, 4.5];
        let a = wilcoxon_signed_rank(&d).unwrap();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let b = wilcoxon_signed_rank(&neg).unwrap();
        assert_eq!(a.w_plus, b.w_minus);
        assert_eq!(a.w_minus, b.w_plus);
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.n_zero, 1);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let mut rng = stream(42, &[]);
        for _ in 0..100 {
            let n = rng.random_range(1..=10);
            // Small integer magnitudes force ties and zeros.
            let d: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(-3i32..=3)))
                .collect();
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            let got = wilcoxon_signed_rank(&d).unwrap().p_value;
            assert!((got - brute_force_p(&d)).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn normal_approximation_is_close_to_exact_at_the_boundary() {
        let d: Vec<f64> = (1..=30)
            .map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 })
            .collect();
        let exact = wilcoxon_signed_rank(&d).unwrap();
        assert!(exact.exact);
        let ranks: Vec<f64> = (1..=30).map(f64::from).collect();
        assert!((normal_p_value(exact.w_plus, &ranks) - exact.p_value).abs() < 0.01);
        let mut longer = d.clone();
        longer.push(31.0);
        assert!(!wilcoxon_signed_rank(&longer).unwrap().exact);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn identical_model_gives_all_ties_and_swap_is_antisymmetric() {
        let p = ParamSet::init(&mut stream(1, &[]));
        let q = ParamSet::random(&mut stream(2, &[]), 0.2);
        let prompts: Vec<Prompt> = (0..6).map(|i| Prompt::from_index(i * 50)).collect();
        let cfg = SimRaterConfig::default();
        let base = Model {
            id: "base",
            params: &p,
        };
        let same = side_by_side(&base, &base, &prompts, &cfg).unwrap();
        assert_eq!(same.wins + same.losses, 0);
        assert!(same.ties_only);
        assert_eq!(same.win_rate, 0.5);
        assert_eq!(same.wilcoxon_p, None);

        let other = Model {
            id: "other",
            params: &q,
        };
        let xy = side_by_side(&base, &other, &prompts, &cfg).unwrap();
        let yx = side_by_side(&other, &base, &prompts, &cfg).unwrap();
        assert_eq!((xy.wins, xy.ties, xy.losses), (yx.losses, yx.ties, yx.wins));
        assert_eq!(xy.wins + xy.ties + xy.losses, 18);
        let recount = xy
            .ratings
            .iter()
            .map(|r| f64::from(r.rating_x))
            .sum::<f64>()
            / 18.0;
        assert_eq!(xy.mos_x, recount);
    }

    #[test]
    fn merging_split_logs_is_identity() {
        let rows: Vec<MetricsRow> = (0..5)
            .map(|s| MetricsRow {
                step: s,
                mean_reward: s as f64,
                kl_to_anchor: 0.1 * s as f64,
                adherence: 0.5,
                quality: 4.0,
                rm_score: None,
                value_loss: 0.0,
                policy_surrogate: 0.0,
            })
            .collect();
        let merged = merge_logs(&[&rows[..2], &rows[2..]]);
        assert_eq!(merged, rows);
        let one = CurveInput {
            model: "R",
            rows: &rows[..1],
            selected_step: Some(0),
        };
        assert_eq!(curve_csv(&one).lines().count(), 2);
        assert!(curve_csv(&one).ends_with(",1\n"));
        let wide = wide_curves_csv(&[one]);
        assert!(wide.starts_with("step,R_kl_to_anchor"));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0], 1), vec![1.5, 2.0, 2.5]);
        assert_eq!(smooth(&[4.0], 3), vec![4.0]);
    }
}
