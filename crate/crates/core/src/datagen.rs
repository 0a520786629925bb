//! Synthetic pretraining corpus and prompt pools.
//!
//! Clips come from a scale-respecting bounded random walk. Each clip repeats
//! its opening bar (which always holds at least two onsets) once at a random
//! later bar, which gives the hidden musicality score something non-trivial
//! to reward.

use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::rng::{self, Rng};
use crate::symbolic::{CLIP_LEN, Clip, ClipRecord, N_PITCHES, Prompt, Token, scan_violations};

pub const BAR_LEN: usize = 8;
const STEP_RADIUS: i32 = 4;
const MAX_DURATION: usize = 6;
const REGISTER_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_clips: usize,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.9
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_clips: 20_000,
            seed: 0,
            train_fraction: default_train_fraction(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.n_clips < 10 {
            return Err(Error::InvalidArgument(format!(
                "n_clips must be at least 10, got {}",
                self.n_clips
            )));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        (self.train_fraction * self.n_clips as f64).round() as usize
    }
}

pub fn sample_prompt(rng: &mut Rng) -> Prompt {
    Prompt::from_index(rng.random_range(0..Prompt::COUNT))
}

/// Per-step onset probability whose renewal density `2q/(1+q)` equals `target`
/// when notes last a geometric(1/2) number of steps or until the next onset.
fn onset_probability(target: f64) -> f64 {
    target / (2.0 - target)
}

fn draw_duration(rng: &mut Rng) -> usize {
    let mut d = 1;
    while d < MAX_DURATION && rng.random_bool(0.5) {
        d += 1;
    }
    d
}

fn pick_pitch(prompt: &Prompt, prev: Option<u8>, recent: &[u8], rng: &mut Rng) -> u8 {
    let scale = prompt.scale();
    let center = prompt.register.target() * (N_PITCHES - 1) as f64;
    let anchor = prev.map_or(center.round() as i32, i32::from);
    // Forbid a fifth identical onset in a row.
    let banned = (recent.len() >= 4
        && recent[recent.len() - 4..]
            .iter()
            .all(|&p| p == recent[recent.len() - 1]))
    .then(|| recent[recent.len() - 1]);

    let mut candidates = Vec::with_capacity(9);
    for p in (anchor - STEP_RADIUS).max(0)..=(anchor + STEP_RADIUS).min(N_PITCHES as i32 - 1) {
        let p = p as u8;
        if scale.contains_pitch(p) && Some(p) != banned {
            let z = (f64::from(p) - center) / REGISTER_SIGMA;
            candidates.push((p, (-0.5 * z * z).exp()));
        }
    }
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(p, w) in &candidates {
        if u < w {
            return p;
        }
        u -= w;
    }
    candidates
        .last()
        .expect("scale always has a neighbour within ±4")
        .0
}

fn onsets_of(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().filter_map(|t| t.pitch()).collect()
}

/// Draw a ground-truth clip for `prompt`. Always grammar-valid.
pub fn generate_clip(prompt: &Prompt, rng: &mut Rng) -> Clip {
    let q = onset_probability(prompt.density.target());
    loop {
        let motif_bar = rng.random_range(1..CLIP_LEN / BAR_LEN);
        let mut tokens: Vec<Token> = Vec::with_capacity(CLIP_LEN);
        let mut onsets: Vec<u8> = Vec::new();
        let mut remaining = 0usize;
        while tokens.len() < CLIP_LEN {
            let t = tokens.len();
            if t == motif_bar * BAR_LEN {
                let motif: Vec<Token> = tokens[..BAR_LEN].to_vec();
                onsets.extend(onsets_of(&motif));
                tokens.extend(motif);
                remaining = 0;
                continue;
            }
            if rng.random_bool(q) {
                let p = pick_pitch(prompt, onsets.last().copied(), &onsets, rng);
                onsets.push(p);
                tokens.push(Token::Note(p));
                remaining = draw_duration(rng) - 1;
            } else if remaining > 0 {
                tokens.push(Token::Hold);
                remaining -= 1;
            } else {
                tokens.push(Token::Rest);
            }
        }
        // The motif must carry at least two onsets to count as one.
        let motif_onsets = tokens[..BAR_LEN]
            .iter()
            .filter(|t| t.pitch().is_some())
            .count();
        if motif_onsets >= 2 && scan_violations(&tokens).is_empty() {
            return Clip::new(*prompt, tokens).expect("generated clip has clip length");
        }
    }
}

/// Prompt and clip for corpus item `index`, from its own RNG stream.
pub fn corpus_item(seed: u64, index: usize) -> Clip {
    let mut rng = rng::stream(seed, &[0xC0, index as u64]);
    let prompt = sample_prompt(&mut rng);
    generate_clip(&prompt, &mut rng)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub eval: Vec<Clip>,
}

pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let clips: Vec<Clip> = (0..config.n_clips)
        .into_par_iter()
        .map(|i| corpus_item(config.seed, i))
        .collect();
    let n_train = config.n_train();
    let mut train = clips;
    let eval = train.split_off(n_train);
    Ok(Corpus { train, eval })
}

pub fn write_clips(path: &Path, clips: &[Clip]) -> Result<()> {
    let records: Vec<ClipRecord> = clips.iter().map(ClipRecord::from).collect();
    write_jsonl(path, &records)
}

pub fn read_clips(path: &Path) -> Result<Vec<Clip>> {
    read_jsonl::<ClipRecord>(path)?
        .into_iter()
        .map(Clip::try_from)
        .collect()
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    write_clips(&dir.join("train.jsonl"), &corpus.train)?;
    write_clips(&dir.join("eval.jsonl"), &corpus.eval)
}

/// `n` distinct prompts in a seeded random order.
pub fn prompt_pool(n: usize, seed: u64) -> Vec<Prompt> {
    let mut all: Vec<Prompt> = Prompt::all().collect();
    all.shuffle(&mut rng::stream(seed, &[0x9001]));
    all.truncate(n.min(Prompt::COUNT));
    all
}

pub fn write_prompts(path: &Path, prompts: &[Prompt]) -> Result<()> {
    write_jsonl(path, prompts)
}

pub fn read_prompts(path: &Path) -> Result<Vec<Prompt>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{Density, Mode, Register, extract_features, validate_clip};

    #[test]
    fn sample_prompt_is_deterministic() {
        let a = sample_prompt(&mut rng::stream(0, &[]));
        let b = sample_prompt(&mut rng::stream(0, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_prompt_golden_seed_zero() {
        let p = sample_prompt(&mut rng::stream(0, &[]));
        assert_eq!(p.text(), GOLDEN_SEED0_PROMPT);
    }

    const GOLDEN_SEED0_PROMPT: &str = "a sparse high-register melody in D minor";

    #[test]
    fn mode_frequencies_are_uniform() {
        let mut rng = rng::stream(11, &[]);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[sample_prompt(&mut rng).mode as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "mode frequency {f}");
        }
    }

    #[test]
    fn generated_clips_are_valid_and_in_scale() {
        let mut rng = rng::stream(3, &[]);
        for i in 0..300 {
            let prompt = Prompt::new(
                (i % 12) as u8,
                Mode::ALL[i % 3],
                Density::ALL[(i / 3) % 3],
                Register::ALL[(i / 9) % 3],
            );
            let clip = generate_clip(&prompt, &mut rng);
            assert!(validate_clip(clip.tokens()).unwrap().is_empty());
            if prompt.root == 0 && prompt.mode == Mode::Major {
                assert_eq!(extract_features(&clip, &prompt.scale()).in_scale_ratio, 1.0);
            }
        }
    }

    #[test]
    fn c_major_clips_fully_in_scale() {
        let mut rng = rng::stream(4, &[]);
        for d in Density::ALL {
            for r in Register::ALL {
                let prompt = Prompt::new(0, Mode::Major, d, r);
                for _ in 0..20 {
                    let clip = generate_clip(&prompt, &mut rng);
                    let f = extract_features(&clip, &prompt.scale());
                    if clip.tokens().iter().any(|t| t.pitch().is_some()) {
                        assert_eq!(f.in_scale_ratio, 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn high_density_mean_in_band() {
        let mut rng = rng::stream(5, &[]);
        let prompt = Prompt::new(2, Mode::Major, Density::High, Register::Mid);
        let mean = (0..1000)
            .map(|_| extract_features(&generate_clip(&prompt, &mut rng), &prompt.scale()).density)
            .sum::<f64>()
            / 1000.0;
        assert!((0.65..=0.95).contains(&mean), "mean density {mean}");
    }

    #[test]
    fn density_tracks_target() {
        let mut rng = rng::stream(6, &[]);
        for d in Density::ALL {
            let prompt = Prompt::new(7, Mode::NaturalMinor, d, Register::Mid);
            let mean = (0..500)
                .map(|_| {
                    extract_features(&generate_clip(&prompt, &mut rng), &prompt.scale()).density
                })
                .sum::<f64>()
                / 500.0;
            assert!((mean - d.target()).abs() <= 0.15, "{d:?}: {mean}");
        }
    }

    #[test]
    fn split_sizes() {
        let c = build_corpus(&CorpusConfig {
            n_clips: 100,
            seed: 1,
            train_fraction: 0.9,
        })
        .unwrap();
        assert_eq!((c.train.len(), c.eval.len()), (90, 10));
        let c = build_corpus(&CorpusConfig {
            n_clips: 10,
            seed: 1,
            train_fraction: 0.9,
        })
        .unwrap();
        assert_eq!((c.train.len(), c.eval.len()), (9, 1));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(
            build_corpus(&CorpusConfig {
                n_clips: 9,
                seed: 1,
                train_fraction: 0.9
            })
            .is_err()
        );
        assert!(
            build_corpus(&CorpusConfig {
                n_clips: 50,
                seed: 1,
                train_fraction: 1.0
            })
            .is_err()
        );
    }

    #[test]
    fn corpus_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_clips: 50,
            seed: 9,
            train_fraction: 0.9,
        };
        write_corpus(&dir.path().join("a"), &build_corpus(&cfg).unwrap()).unwrap();
        write_corpus(&dir.path().join("b"), &build_corpus(&cfg).unwrap()).unwrap();
        for f in ["train.jsonl", "eval.jsonl"] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b);
        }
        let back = read_clips(&dir.path().join("a/train.jsonl")).unwrap();
        assert_eq!(back, build_corpus(&cfg).unwrap().train);
    }

    #[test]
    fn prompt_pool_distinct() {
        let pool = prompt_pool(101, 3);
        let set: std::collections::HashSet<_> = pool.iter().collect();
        assert_eq!(set.len(), 101);
        assert_eq!(pool, prompt_pool(101, 3));
    }
}
