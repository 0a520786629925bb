//! Pipeline configuration: one TOML file for every stage, a global seed, and
//! per-stage hashes that chain upstream hashes so a changed key invalidates
//! only the stages downstream of it.
//!
//! Default budgets are the desk-scale ones (a tenth of the original step
//! counts: 2,000 / 500 / 100 RL steps for R / U / RU, selected at
//! 1,000 / 200 / 100).

use std::path::Path;

use musicrl_core::datagen::CorpusConfig;
use musicrl_core::evaluation::SimRaterConfig;
use musicrl_core::policy::{DEFAULT_TEMPERATURE, PretrainConfig};
use musicrl_core::preferences::{MusicalityWeights, PrefBuildConfig};
use musicrl_core::reward_model::{RmAblation, RmTrainConfig};
use musicrl_core::rl::{KlMode, Regime, RlConfig};
use musicrl_core::rng::label_key;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub pretrain: PretrainSection,
    pub preferences: PreferenceSection,
    pub reward_model: RewardModelSection,
    pub rl: RlSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_clips: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceSection {
    pub n_pairs: usize,
    pub eval_fraction: f64,
    /// Oracle Bayes accuracy the preference sharpness is calibrated to.
    pub target_accuracy: f64,
    pub temperature: f64,
    pub weights: MusicalityWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub head_lr_scale: f64,
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub steps: usize,
    pub select_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub alpha: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub batch: usize,
    pub temperature: f64,
    pub kl_mode: KlMode,
    pub r: Budget,
    pub u: Budget,
    pub ru: Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_prompts: usize,
    pub n_raters: usize,
    pub sigma: f64,
    pub weights: [f64; 3],
    /// Clips per prompt for automatic-score tables.
    pub samples_per_prompt: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            n_clips: c.n_clips,
            train_fraction: c.train_fraction,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            eval_every: p.eval_every,
            eval_clips: p.eval_clips,
        }
    }
}

impl Default for PreferenceSection {
    fn default() -> Self {
        PreferenceSection {
            n_pairs: 20_000,
            eval_fraction: 0.05,
            target_accuracy: 0.70,
            temperature: DEFAULT_TEMPERATURE,
            weights: MusicalityWeights::default(),
        }
    }
}

impl Default for RewardModelSection {
    fn default() -> Self {
        let r = RmTrainConfig::default();
        RewardModelSection {
            steps: r.steps,
            batch_size: r.batch_size,
            lr: r.lr,
            head_lr_scale: r.head_lr_scale,
            eval_every: r.eval_every,
        }
    }
}

impl Default for RlSection {
    fn default() -> Self {
        let r = RlConfig::for_regime(Regime::R, 0);
        // The library defaults barely move the base policy at this scale;
        // the pipeline uses a larger step and a weaker KL pull.
        let budget = |regime: Regime| {
            let (steps, select_step) = regime.budget();
            Budget { steps, select_step }
        };
        RlSection {
            alpha: 0.01,
            lr_policy: 1e-3,
            lr_value: r.lr_value,
            batch: r.batch,
            temperature: r.temperature,
            kl_mode: r.kl_mode,
            r: budget(Regime::R),
            u: budget(Regime::U),
            ru: budget(Regime::Ru),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SimRaterConfig::default();
        EvalSection {
            n_prompts: 101,
            n_raters: s.n_raters,
            sigma: s.sigma,
            weights: s.weights,
            samples_per_prompt: 4,
        }
    }
}

/// Stage names, in pipeline order.
pub const STAGES: [&str; 9] = [
    "corpus", "pretrain", "prefs", "rm", "R", "U", "RU", "sxs", "curves",
];

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config serializes")
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {}", e.message()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> String {
        sha_hex(&[&json(self)])
    }

    /// Seed for one stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        musicrl_core::rng::stream(self.seed, &[label_key(stage)]).next_u64()
    }

    /// Hash of one stage: its own settings plus the hashes of its inputs.
    pub fn stage_hash(&self, stage: &str) -> String {
        let up = |s: &str| self.stage_hash(s);
        let seed = self.stage_seed(stage).to_le_bytes();
        match stage {
            "corpus" => sha_hex(&[b"corpus", &seed, &json(&self.corpus)]),
            "pretrain" => sha_hex(&[
                b"pretrain",
                &seed,
                &json(&self.pretrain),
                up("corpus").as_bytes(),
            ]),
            "prefs" => sha_hex(&[
                b"prefs",
                &seed,
                &json(&self.preferences),
                up("pretrain").as_bytes(),
            ]),
            "rm" => sha_hex(&[
                b"rm",
                &seed,
                &json(&self.reward_model),
                up("prefs").as_bytes(),
            ]),
            "R" => sha_hex(&[
                b"R",
                &seed,
                &json(&self.rl_config(Regime::R)),
                up("pretrain").as_bytes(),
            ]),
            "U" => sha_hex(&[
                b"U",
                &seed,
                &json(&self.rl_config(Regime::U)),
                up("pretrain").as_bytes(),
                up("rm").as_bytes(),
            ]),
            "RU" => sha_hex(&[
                b"RU",
                &seed,
                &json(&self.rl_config(Regime::Ru)),
                up("R").as_bytes(),
                up("rm").as_bytes(),
            ]),
            "sxs" => sha_hex(&[
                b"sxs",
                &seed,
                &json(&self.eval),
                up("pretrain").as_bytes(),
                up("R").as_bytes(),
                up("U").as_bytes(),
                up("RU").as_bytes(),
            ]),
            "curves" => sha_hex(&[
                b"curves",
                up("R").as_bytes(),
                up("U").as_bytes(),
                up("RU").as_bytes(),
            ]),
            other => panic!("unknown stage {other}"),
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_clips: self.corpus.n_clips,
            seed: self.stage_seed("corpus"),
            train_fraction: self.corpus.train_fraction,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            seed: self.stage_seed("pretrain"),
            eval_every: self.pretrain.eval_every,
            eval_clips: self.pretrain.eval_clips,
        }
    }

    pub fn pref_build_config(&self) -> PrefBuildConfig {
        PrefBuildConfig {
            n_pairs: self.preferences.n_pairs,
            eval_fraction: self.preferences.eval_fraction,
            temperature: self.preferences.temperature,
            seed: self.stage_seed("prefs"),
        }
    }

    pub fn rm_config(&self, ablation: RmAblation) -> RmTrainConfig {
        RmTrainConfig {
            steps: self.reward_model.steps,
            batch_size: self.reward_model.batch_size,
            lr: self.reward_model.lr,
            seed: self.stage_seed("rm"),
            eval_every: self.reward_model.eval_every,
            ablation,
            head_lr_scale: self.reward_model.head_lr_scale,
        }
    }

    pub fn rl_config(&self, regime: Regime) -> RlConfig {
        let budget = match regime {
            Regime::R => self.rl.r,
            Regime::U => self.rl.u,
            Regime::Ru => self.rl.ru,
            Regime::QualityOnly | Regime::MulanOnly => {
                let (steps, select_step) = regime.budget();
                Budget { steps, select_step }
            }
        };
        RlConfig {
            alpha: self.rl.alpha,
            lr_policy: self.rl.lr_policy,
            lr_value: self.rl.lr_value,
            batch: self.rl.batch,
            temperature: self.rl.temperature,
            kl_mode: self.rl.kl_mode,
            steps: budget.steps,
            select_step: budget.select_step,
            ..RlConfig::for_regime(regime, self.stage_seed(regime.tag()))
        }
    }

    pub fn rater_config(&self) -> SimRaterConfig {
        SimRaterConfig {
            n_raters: self.eval.n_raters,
            sigma: self.eval.sigma,
            weights: self.eval.weights,
            seed: self.stage_seed("sxs"),
        }
    }

    /// Seed of the fixed evaluation prompt pool.
    pub fn eval_pool_seed(&self) -> u64 {
        self.stage_seed("eval-pool")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(PipelineConfig::parse("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::parse("sed = 3").is_err());
        assert!(PipelineConfig::parse("[rl]\nalpah = 0.1").is_err());
    }

    #[test]
    fn changed_key_invalidates_only_downstream_stages() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.reward_model.steps += 1;
        let changed: Vec<&str> = STAGES
            .iter()
            .copied()
            .filter(|s| a.stage_hash(s) != b.stage_hash(s))
            .collect();
        assert_eq!(changed, ["rm", "U", "RU", "sxs", "curves"]);

        let mut c = a.clone();
        c.seed = 1;
        assert!(STAGES.iter().all(|s| a.stage_hash(s) != c.stage_hash(s)));
    }

    #[test]
    fn stage_seeds_differ() {
        let c = PipelineConfig::default();
        assert_ne!(c.stage_seed("corpus"), c.stage_seed("pretrain"));
        assert_eq!(c.rl_config(Regime::U).steps, 500);
        assert_eq!(c.rl_config(Regime::Ru).select_step, 100);
    }
}
