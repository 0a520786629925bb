//! Pipeline stages over a working directory. Every output file gets a
//! `.meta.json` sidecar with the producing stage and its hash; a stage is
//! fresh when all of its outputs exist and carry the expected hash.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use musicrl_core::datagen::{
    self, Corpus, build_corpus, read_clips, read_prompts, write_clips, write_prompts,
};
use musicrl_core::evaluation::{
    CurveInput, Model, PromptScores, SxSResult, curve_csv, prompt_scores, ratings_csv,
    side_by_side, wide_curves_csv,
};
use musicrl_core::io::write_atomic;
use musicrl_core::net::{CheckpointMeta, ParamSet, load_checkpoint, save_checkpoint};
use musicrl_core::policy::pretrain;
use musicrl_core::preferences::{
    OracleConfig, PreferenceRecord, build_preference_dataset, calibrate_beta, calibration_deltas,
    oracle_ceiling, read_preferences, write_preferences,
};
use musicrl_core::reward_model::{
    Predictor, RmAblation, ablation_csv, ablation_suite, baseline_predictor_accuracy,
    preference_pairs, train_rm,
};
use musicrl_core::rl::{
    MetricsRow, Regime, RegimeInputs, metrics_csv, parse_metrics_csv, train_regime,
};
use musicrl_core::symbolic::Prompt;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::PipelineConfig;

/// Model ids in side-by-side order.
pub const MODELS: [&str; 4] = ["base", "R", "U", "RU"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
}

/// Paths of every artifact under one root.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_train(&self) -> PathBuf {
        self.root.join("corpus/train.jsonl")
    }
    pub fn corpus_eval(&self) -> PathBuf {
        self.root.join("corpus/eval.jsonl")
    }
    pub fn eval_pool(&self) -> PathBuf {
        self.root.join("corpus/eval_pool.jsonl")
    }
    pub fn checkpoint(&self, id: &str) -> PathBuf {
        self.root.join(format!("checkpoints/{id}.ckpt"))
    }
    pub fn final_checkpoint(&self, id: &str) -> PathBuf {
        self.root.join(format!("checkpoints/{id}_final.ckpt"))
    }
    pub fn pretrain_curve(&self) -> PathBuf {
        self.root.join("reports/pretrain_curve.csv")
    }
    pub fn prefs_train(&self) -> PathBuf {
        self.root.join("prefs/train.jsonl")
    }
    pub fn prefs_eval(&self) -> PathBuf {
        self.root.join("prefs/eval.jsonl")
    }
    pub fn oracle(&self) -> PathBuf {
        self.root.join("prefs/oracle.json")
    }
    pub fn rm_report(&self) -> PathBuf {
        self.root.join("reports/rm.json")
    }
    pub fn rm_curve(&self) -> PathBuf {
        self.root.join("reports/rm_curve.csv")
    }
    pub fn rm_ablation(&self) -> PathBuf {
        self.root.join("reports/rm_ablation.csv")
    }
    pub fn metrics(&self, tag: &str) -> PathBuf {
        self.root.join(format!("metrics/{tag}.csv"))
    }
    pub fn rl_report(&self, tag: &str) -> PathBuf {
        self.root.join(format!("reports/rl_{tag}.json"))
    }
    pub fn sxs_report(&self, x: &str, y: &str) -> PathBuf {
        self.root.join(format!("reports/sxs/{x}_vs_{y}.json"))
    }
    pub fn sxs_ratings(&self, x: &str, y: &str) -> PathBuf {
        self.root
            .join(format!("reports/sxs/{x}_vs_{y}_ratings.csv"))
    }
    pub fn sxs_summary(&self) -> PathBuf {
        self.root.join("reports/sxs/summary.json")
    }
    pub fn auto_scores(&self) -> PathBuf {
        self.root.join("reports/auto_scores.json")
    }
    pub fn curve(&self, tag: &str) -> PathBuf {
        self.root.join(format!("reports/curves/{tag}.csv"))
    }
    pub fn wide_curves(&self) -> PathBuf {
        self.root.join("reports/curves/wide.csv")
    }

    /// Output files of a stage.
    pub fn outputs(&self, stage: &str) -> Vec<PathBuf> {
        match stage {
            "corpus" => vec![self.corpus_train(), self.corpus_eval(), self.eval_pool()],
            "pretrain" => vec![self.checkpoint("base"), self.pretrain_curve()],
            "prefs" => vec![self.prefs_train(), self.prefs_eval(), self.oracle()],
            "rm" => vec![self.checkpoint("rm"), self.rm_curve(), self.rm_report()],
            "R" | "U" | "RU" => vec![
                self.checkpoint(stage),
                self.final_checkpoint(stage),
                self.metrics(stage),
                self.rl_report(stage),
            ],
            "sxs" => {
                let mut v = vec![self.sxs_summary(), self.auto_scores()];
                for (x, y) in pairings() {
                    v.push(self.sxs_report(x, y));
                    v.push(self.sxs_ratings(x, y));
                }
                v
            }
            "curves" => vec![
                self.curve("R"),
                self.curve("U"),
                self.curve("RU"),
                self.wide_curves(),
            ],
            other => panic!("unknown stage {other}"),
        }
    }

    pub fn is_fresh(&self, stage: &str, hash: &str) -> bool {
        self.outputs(stage).iter().all(|p| {
            p.exists() && read_meta(p).is_some_and(|m| m.stage == stage && m.config_hash == hash)
        })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn read_meta(path: &Path) -> Option<ArtifactMeta> {
    let text = std::fs::read_to_string(meta_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_meta(path: &Path, stage: &str, hash: &str) -> Result<()> {
    let meta = ArtifactMeta {
        stage: stage.into(),
        config_hash: hash.into(),
    };
    write_atomic(&meta_path(path), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Write `bytes` to `path` (write-then-rename) and stamp its sidecar.
fn emit(path: &Path, bytes: &[u8], stage: &str, hash: &str) -> Result<()> {
    write_atomic(path, bytes)?;
    write_meta(path, stage, hash)
}

fn emit_json<T: Serialize>(path: &Path, value: &T, stage: &str, hash: &str) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(path, &bytes, stage, hash)
}

fn emit_checkpoint(
    path: &Path,
    params: &ParamSet,
    stage: &str,
    step: u64,
    hash: &str,
) -> Result<()> {
    save_checkpoint(path, params, &CheckpointMeta::new(stage, step, hash))?;
    write_meta(path, stage, hash)
}

/// Load a checkpoint that an earlier stage must have produced.
pub fn require_checkpoint(path: &Path, what: &str) -> Result<ParamSet> {
    if !path.exists() {
        return Err(musicrl_core::Error::MissingPrerequisite(format!(
            "{what} checkpoint {}",
            path.display()
        ))
        .into());
    }
    Ok(load_checkpoint(path)?.0)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(musicrl_core::Error::MissingPrerequisite(format!(
            "{what} at {}",
            path.display()
        ))
        .into());
    }
    Ok(())
}

/// The six unordered pairings of the four models.
pub fn pairings() -> Vec<(&'static str, &'static str)> {
    let mut v = Vec::new();
    for (i, &y) in MODELS.iter().enumerate() {
        for &x in &MODELS[i + 1..] {
            v.push((x, y));
        }
    }
    v
}

pub fn run_corpus(cfg: &PipelineConfig, wd: &Workdir) -> Result<Corpus> {
    let hash = cfg.stage_hash("corpus");
    let corpus = build_corpus(&cfg.corpus_config())?;
    write_clips(&wd.corpus_train(), &corpus.train)?;
    write_meta(&wd.corpus_train(), "corpus", &hash)?;
    write_clips(&wd.corpus_eval(), &corpus.eval)?;
    write_meta(&wd.corpus_eval(), "corpus", &hash)?;
    write_prompts(&wd.eval_pool(), &eval_pool(cfg))?;
    write_meta(&wd.eval_pool(), "corpus", &hash)?;
    info!(
        "corpus: {} train / {} eval clips",
        corpus.train.len(),
        corpus.eval.len()
    );
    Ok(corpus)
}

/// The fixed evaluation prompt pool.
pub fn eval_pool(cfg: &PipelineConfig) -> Vec<Prompt> {
    datagen::prompt_pool(cfg.eval.n_prompts, cfg.eval_pool_seed())
}

pub fn run_pretrain(cfg: &PipelineConfig, wd: &Workdir) -> Result<ParamSet> {
    require(&wd.corpus_train(), "training corpus")?;
    let hash = cfg.stage_hash("pretrain");
    let train = read_clips(&wd.corpus_train())?;
    let eval = read_clips(&wd.corpus_eval())?;
    let run = pretrain(&train, &eval, &cfg.pretrain_config())?;
    let mut csv = String::from("step,eval_nll\n");
    for p in &run.curve {
        csv.push_str(&format!("{},{}\n", p.step, p.eval_nll));
    }
    emit(&wd.pretrain_curve(), csv.as_bytes(), "pretrain", &hash)?;
    emit_checkpoint(
        &wd.checkpoint("base"),
        &run.params,
        "pretrain",
        cfg.pretrain.steps as u64,
        &hash,
    )?;
    Ok(run.params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub oracle: OracleConfig,
    pub target_accuracy: f64,
    /// Expected oracle accuracy on the eval split.
    pub eval_ceiling: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub filtered: usize,
}

pub fn run_prefs(cfg: &PipelineConfig, wd: &Workdir) -> Result<OracleReport> {
    let base = require_checkpoint(&wd.checkpoint("base"), "base")?;
    let hash = cfg.stage_hash("prefs");
    let seed = cfg.stage_seed("prefs");
    let pool: Vec<Prompt> = Prompt::all().collect();
    let p = &cfg.preferences;
    let deltas = calibration_deltas(&base, &pool, &p.weights, p.temperature, seed)?;
    let beta = calibrate_beta(p.target_accuracy, &deltas)?;
    let oracle = OracleConfig {
        beta,
        seed,
        weights: p.weights,
    };
    let ds = build_preference_dataset(&base, &pool, &cfg.pref_build_config(), &oracle)?;
    let report = OracleReport {
        oracle,
        target_accuracy: p.target_accuracy,
        eval_ceiling: oracle_ceiling(&ds.eval, &oracle)?,
        n_train: ds.train.len(),
        n_eval: ds.eval.len(),
        filtered: ds.filtered,
    };
    write_preferences(&wd.prefs_train(), &ds.train)?;
    write_meta(&wd.prefs_train(), "prefs", &hash)?;
    write_preferences(&wd.prefs_eval(), &ds.eval)?;
    write_meta(&wd.prefs_eval(), "prefs", &hash)?;
    emit_json(&wd.oracle(), &report, "prefs", &hash)?;
    info!(
        "prefs: beta {beta:.3}, eval ceiling {:.4}",
        report.eval_ceiling
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub eval_accuracy: f64,
    pub untrained_accuracy: f64,
    pub oracle_ceiling: f64,
    pub adherence_predictor: f64,
    pub quality_predictor: f64,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
}

fn load_pref_pairs(wd: &Workdir) -> Result<(Vec<PreferenceRecord>, Vec<PreferenceRecord>)> {
    require(&wd.prefs_train(), "preference data")?;
    Ok((
        read_preferences(&wd.prefs_train())?,
        read_preferences(&wd.prefs_eval())?,
    ))
}

pub fn run_rm(cfg: &PipelineConfig, wd: &Workdir) -> Result<(ParamSet, RmReport)> {
    let base = require_checkpoint(&wd.checkpoint("base"), "base")?;
    let (train_recs, eval_recs) = load_pref_pairs(wd)?;
    let hash = cfg.stage_hash("rm");
    let train = preference_pairs(&train_recs)?;
    let eval = preference_pairs(&eval_recs)?;
    let trained = train_rm(&train, &eval, &base, &cfg.rm_config(RmAblation::FULL))?;
    let oracle: OracleReport =
        serde_json::from_slice(&std::fs::read(wd.oracle()).context("reading oracle report")?)?;
    let report = RmReport {
        eval_accuracy: trained.final_point().eval_accuracy,
        untrained_accuracy: trained.curve[0].eval_accuracy,
        oracle_ceiling: oracle.eval_ceiling,
        adherence_predictor: baseline_predictor_accuracy(&eval, Predictor::Adherence)?,
        quality_predictor: baseline_predictor_accuracy(&eval, Predictor::Quality)?,
        n_train_pairs: train.len(),
        n_eval_pairs: eval.len(),
    };
    let mut csv = String::from("step,train_loss,eval_accuracy\n");
    for p in &trained.curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            p.step, p.train_loss, p.eval_accuracy
        ));
    }
    emit(&wd.rm_curve(), csv.as_bytes(), "rm", &hash)?;
    emit_json(&wd.rm_report(), &report, "rm", &hash)?;
    emit_checkpoint(
        &wd.checkpoint("rm"),
        &trained.params,
        "rm",
        cfg.reward_model.steps as u64,
        &hash,
    )?;
    Ok((trained.params, report))
}

pub fn run_rm_ablation(cfg: &PipelineConfig, wd: &Workdir) -> Result<String> {
    let base = require_checkpoint(&wd.checkpoint("base"), "base")?;
    let (train_recs, eval_recs) = load_pref_pairs(wd)?;
    let rows = ablation_suite(
        &preference_pairs(&train_recs)?,
        &preference_pairs(&eval_recs)?,
        &base,
        &cfg.rm_config(RmAblation::FULL),
    )?;
    let csv = ablation_csv(&rows);
    emit(
        &wd.rm_ablation(),
        csv.as_bytes(),
        "rm-ablate",
        &cfg.stage_hash("rm"),
    )?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub regime: Regime,
    pub steps: usize,
    pub select_step: usize,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

pub fn run_rl(cfg: &PipelineConfig, wd: &Workdir, regime: Regime) -> Result<RlReport> {
    let tag = regime.tag();
    let base = require_checkpoint(&wd.checkpoint("base"), "base")?;
    let rm = if regime.needs_rm() {
        Some(require_checkpoint(&wd.checkpoint("rm"), "reward-model")?)
    } else {
        None
    };
    let r = if regime == Regime::Ru {
        Some(require_checkpoint(&wd.checkpoint("R"), "R")?)
    } else {
        None
    };
    let rl_cfg = cfg.rl_config(regime);
    let hash = match tag {
        "R" | "U" | "RU" => cfg.stage_hash(tag),
        _ => cfg.hash(),
    };
    let run = train_regime(
        &RegimeInputs {
            base: &base,
            r_checkpoint: r.as_ref(),
            rm: rm.as_ref(),
        },
        &rl_cfg,
    )?;
    let report = RlReport {
        regime,
        steps: rl_cfg.steps,
        select_step: rl_cfg.select_step,
        aborted: run.aborted.clone(),
    };
    emit(
        &wd.metrics(tag),
        metrics_csv(&run.metrics).as_bytes(),
        tag,
        &hash,
    )?;
    emit_json(&wd.rl_report(tag), &report, tag, &hash)?;
    emit_checkpoint(
        &wd.checkpoint(tag),
        &run.selected,
        tag,
        rl_cfg.select_step as u64,
        &hash,
    )?;
    emit_checkpoint(
        &wd.final_checkpoint(tag),
        &run.final_policy,
        tag,
        rl_cfg.steps as u64,
        &hash,
    )?;
    if let Some(msg) = &run.aborted {
        tracing::warn!("{tag}: stopped early: {msg}");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub mean_adherence: f64,
    pub mean_quality: f64,
    pub mean_musicality: f64,
    pub mean_rm_score: Option<f64>,
    pub per_prompt: Vec<PromptScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SxsSummaryRow {
    pub model_x: String,
    pub model_y: String,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub wilcoxon_p: Option<f64>,
    pub mos_x: f64,
    pub mos_y: f64,
}

/// Automatic scores of named checkpoints on the evaluation pool.
pub fn model_scores(
    models: &[(String, ParamSet)],
    prompts: &[Prompt],
    samples: usize,
    seed: u64,
    rm: Option<&ParamSet>,
) -> Result<Vec<ModelScores>> {
    models
        .iter()
        .map(|(id, params)| {
            let per_prompt = prompt_scores(&Model { id, params }, prompts, samples, seed, rm)?;
            let n = per_prompt.len() as f64;
            Ok(ModelScores {
                model: id.clone(),
                mean_adherence: per_prompt.iter().map(|s| s.adherence).sum::<f64>() / n,
                mean_quality: per_prompt.iter().map(|s| s.quality).sum::<f64>() / n,
                mean_musicality: per_prompt.iter().map(|s| s.musicality).sum::<f64>() / n,
                mean_rm_score: rm
                    .map(|_| per_prompt.iter().filter_map(|s| s.rm_score).sum::<f64>() / n),
                per_prompt,
            })
        })
        .collect()
}

pub fn run_sxs(cfg: &PipelineConfig, wd: &Workdir) -> Result<Vec<SxSResult>> {
    let hash = cfg.stage_hash("sxs");
    let models: Vec<(String, ParamSet)> = MODELS
        .iter()
        .map(|id| Ok((id.to_string(), require_checkpoint(&wd.checkpoint(id), id)?)))
        .collect::<Result<_>>()?;
    let rm = require_checkpoint(&wd.checkpoint("rm"), "reward-model").ok();
    let prompts = if wd.eval_pool().exists() {
        read_prompts(&wd.eval_pool())?
    } else {
        eval_pool(cfg)
    };
    let rater = cfg.rater_config();
    let find = |id: &str| &models.iter().find(|(m, _)| m == id).expect("known model").1;
    let mut results = Vec::new();
    for (x, y) in pairings() {
        let res = side_by_side(
            &Model {
                id: x,
                params: find(x),
            },
            &Model {
                id: y,
                params: find(y),
            },
            &prompts,
            &rater,
        )?;
        info!(
            "sxs {x} vs {y}: win_rate {:.3} (W/T/L {}/{}/{})",
            res.win_rate, res.wins, res.ties, res.losses
        );
        emit_json(&wd.sxs_report(x, y), &res, "sxs", &hash)?;
        emit(
            &wd.sxs_ratings(x, y),
            ratings_csv(&res).as_bytes(),
            "sxs",
            &hash,
        )?;
        results.push(res);
    }
    let summary: Vec<SxsSummaryRow> = results
        .iter()
        .map(|r| SxsSummaryRow {
            model_x: r.model_x.clone(),
            model_y: r.model_y.clone(),
            wins: r.wins,
            ties: r.ties,
            losses: r.losses,
            win_rate: r.win_rate,
            wilcoxon_p: r.wilcoxon_p,
            mos_x: r.mos_x,
            mos_y: r.mos_y,
        })
        .collect();
    emit_json(&wd.sxs_summary(), &summary, "sxs", &hash)?;
    let scores = model_scores(
        &models,
        &prompts,
        cfg.eval.samples_per_prompt,
        rater.seed,
        rm.as_ref(),
    )?;
    emit_json(&wd.auto_scores(), &scores, "sxs", &hash)?;
    Ok(results)
}

pub fn run_curves(cfg: &PipelineConfig, wd: &Workdir) -> Result<()> {
    let hash = cfg.stage_hash("curves");
    let mut logs: Vec<(String, Vec<MetricsRow>, usize)> = Vec::new();
    for tag in ["R", "U", "RU"] {
        require(&wd.metrics(tag), &format!("{tag} metrics"))?;
        let rows = parse_metrics_csv(
            &std::fs::read_to_string(wd.metrics(tag)).context("reading metrics")?,
        )?;
        let report: RlReport = serde_json::from_slice(
            &std::fs::read(wd.rl_report(tag)).context("reading rl report")?,
        )?;
        logs.push((tag.to_string(), rows, report.select_step));
    }
    let inputs: Vec<CurveInput<'_>> = logs
        .iter()
        .map(|(tag, rows, sel)| CurveInput {
            model: tag,
            rows,
            selected_step: Some(*sel),
        })
        .collect();
    for input in &inputs {
        emit(
            &wd.curve(input.model),
            curve_csv(input).as_bytes(),
            "curves",
            &hash,
        )?;
    }
    emit(
        &wd.wide_curves(),
        wide_curves_csv(&inputs).as_bytes(),
        "curves",
        &hash,
    )?;
    Ok(())
}

/// Run one named stage unconditionally.
pub fn run_stage(cfg: &PipelineConfig, wd: &Workdir, stage: &str) -> Result<()> {
    match stage {
        "corpus" => run_corpus(cfg, wd).map(drop),
        "pretrain" => run_pretrain(cfg, wd).map(drop),
        "prefs" => run_prefs(cfg, wd).map(drop),
        "rm" => run_rm(cfg, wd).map(drop),
        "R" => run_rl(cfg, wd, Regime::R).map(drop),
        "U" => run_rl(cfg, wd, Regime::U).map(drop),
        "RU" => run_rl(cfg, wd, Regime::Ru).map(drop),
        "sxs" => run_sxs(cfg, wd).map(drop),
        "curves" => run_curves(cfg, wd),
        other => bail!("unknown stage {other}"),
    }
}

/// Run every stale stage (and every stage in `force`) in order; returns the
/// stages that ran.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    wd: &Workdir,
    force: &[String],
) -> Result<Vec<&'static str>> {
    if let Some(bad) = force
        .iter()
        .find(|f| !crate::config::STAGES.contains(&f.as_str()))
    {
        return Err(musicrl_core::Error::InvalidArgument(format!("unknown stage {bad:?}")).into());
    }
    let mut ran = Vec::new();
    for stage in crate::config::STAGES {
        if !force.iter().any(|f| f == stage) && wd.is_fresh(stage, &cfg.stage_hash(stage)) {
            info!("{stage}: up to date");
            continue;
        }
        info!("{stage}: running");
        run_stage(cfg, wd, stage)?;
        ran.push(stage);
    }
    Ok(ran)
}
