//! One function per subcommand. Each returns a serializable result that the
//! binary prints or writes, so tests can drive the same code paths.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use muscall_core::config::{resolve_config, Config, Flags};
use muscall_core::eval::{
    accuracy, evaluate_retrieval, macro_pr_auc, macro_roc_auc, one_hot, predict, score_matrix, zero_shot_classify,
    EvalReport, ZeroShotTask,
};
use muscall_core::numcore::{write_flat, Precision, Real, Tensor};
use muscall_core::trainer::{embed_pairs, fit, Checkpoint, Dataset, EpochLog, LoadMode, Pair, Split};
use serde::{Deserialize, Serialize};

use crate::manifest::{load_dataset, load_manifest, locate_manifest, split_rows, ManifestRow};
use crate::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.msck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Flag overrides applied on top of a resolved preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub no_lw: bool,
    pub no_rc: bool,
    pub no_aa: bool,
    pub no_ap: bool,
    pub ssl: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
        }
        let f: &mut Flags = &mut cfg.train.flags;
        f.loss_weighting &= !self.no_lw;
        f.random_crop &= !self.no_rc;
        f.audio_aug &= !self.no_aa;
        f.attention_pool &= !self.no_ap;
        f.ssl |= self.ssl;
    }
}

/// Preset from `--config`/`--preset` with flag overrides, validated.
pub fn resolve(config: Option<&Path>, preset: Option<&str>, overrides: &Overrides) -> CliResult<Config> {
    let mut cfg = resolve_config(config, preset)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// A located manifest with every row's split.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub manifest: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub splits: Vec<Split>,
}

impl DataSource {
    pub fn open(data: Option<&Path>, cfg: &Config) -> CliResult<Self> {
        let manifest = locate_manifest(data)?;
        let rows = load_manifest(&manifest)?;
        let splits = split_rows(&manifest, &rows, &cfg.split, cfg.train.seed)?;
        Ok(Self { manifest, rows, splits })
    }

    pub fn load(&self, wanted: &[Split]) -> CliResult<Dataset> {
        load_dataset(&self.manifest, &self.rows, &self.splits, wanted)
    }

    /// Rows of one split, in manifest order.
    pub fn rows_of(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().zip(&self.splits).filter(|(_, &s)| s == split).map(|(r, _)| r).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dry_run: bool,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub best_epoch: Option<usize>,
    pub best_val_r10: Option<f64>,
    pub skipped_steps: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Vec<EpochLog>,
    pub config: Config,
}

/// Trains and writes `checkpoint.msck`, `train_log.jsonl` and `config.json`
/// into `out`. With `dry_run`, only validates the config and data.
pub fn cmd_train(cfg: &Config, data: &DataSource, out: &Path, dry_run: bool) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let (n_train, n_valid, n_test) = (data.count(Split::Train), data.count(Split::Valid), data.count(Split::Test));
    if n_train < 2 || n_valid == 0 {
        return Err(CliError::Data(format!(
            "need at least 2 training and 1 validation pairs, found {n_train} and {n_valid}"
        )));
    }
    let mut summary = TrainSummary {
        dry_run,
        n_train,
        n_valid,
        n_test,
        best_epoch: None,
        best_val_r10: None,
        skipped_steps: 0,
        checkpoint: None,
        log: Vec::new(),
        config: cfg.clone(),
    };
    if dry_run {
        return Ok(summary);
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ds = data.load(&[Split::Train, Split::Valid])?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    macro_rules! run {
        ($t:ty) => {{
            let outcome = fit::<$t>(&ds, cfg, Some(&log_path))?;
            outcome.best.save(&ck_path)?;
            summary.best_epoch = Some(outcome.best.epoch);
            summary.best_val_r10 = Some(outcome.best.best_val_r10);
            summary.skipped_steps = outcome.skipped_steps;
            summary.log = outcome.log;
            summary.config = outcome.best.config.clone();
        }};
    }
    match cfg.train.precision {
        Precision::F32 => run!(f32),
        Precision::F64 => run!(f64),
    }
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, summary.config.to_json()?).map_err(|e| CliError::io(&cfg_path, e))?;
    summary.checkpoint = Some(ck_path);
    Ok(summary)
}

/// A checkpoint of either precision.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        match Checkpoint::<f32>::from_bytes(&bytes, LoadMode::EvalOnly) {
            Ok(c) => Ok(AnyCheckpoint::F32(c)),
            Err(muscall_core::Error::Format { expected, .. }) if expected.starts_with("precision") => {
                Ok(AnyCheckpoint::F64(Checkpoint::<f64>::from_bytes(&bytes, LoadMode::EvalOnly)?))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn config(&self) -> &Config {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }
}

/// Joint-space embeddings of `pairs`.
pub fn embed_with(ck: &AnyCheckpoint, pairs: &[Pair]) -> CliResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    fn go<T: Real>(c: &Checkpoint<T>, pairs: &[Pair]) -> CliResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        Ok(embed_pairs(&c.model, &c.preprocessor()?, pairs, c.config.train.batch_size)?)
    }
    match ck {
        AnyCheckpoint::F32(c) => go(c, pairs),
        AnyCheckpoint::F64(c) => go(c, pairs),
    }
}

/// Text-only embeddings.
pub fn embed_texts(ck: &AnyCheckpoint, texts: &[&str]) -> CliResult<Vec<Vec<f64>>> {
    fn go<T: Real>(c: &Checkpoint<T>, texts: &[&str]) -> CliResult<Vec<Vec<f64>>> {
        let prep = c.preprocessor()?;
        let toks = texts.iter().map(|t| prep.tokens(t)).collect::<Result<Vec<_>, _>>()?;
        Ok(c.model.embed_text(&toks)?)
    }
    match ck {
        AnyCheckpoint::F32(c) => go(c, texts),
        AnyCheckpoint::F64(c) => go(c, texts),
    }
}

fn pairs_of(data: &DataSource, split: Split) -> CliResult<Vec<Pair>> {
    let ds = data.load(&[split])?;
    let pairs = ds.get(split).to_vec();
    if pairs.is_empty() {
        return Err(CliError::Data(format!("split {split:?} is empty")));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: Split,
    pub n_pairs: usize,
    /// Text→audio then audio→text.
    pub reports: Vec<EvalReport>,
    pub config: Config,
}

pub fn cmd_eval(ck: &AnyCheckpoint, data: &DataSource, split: Split) -> CliResult<EvalOutput> {
    let pairs = pairs_of(data, split)?;
    let (a, t) = embed_with(ck, &pairs)?;
    let reports = evaluate_retrieval(&a, &t)?;
    Ok(EvalOutput {
        split,
        n_pairs: pairs.len(),
        reports: reports.to_vec(),
        config: ck.config().clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

/// Top `k` clips of `split` for a free-text query, best first; ties keep manifest order.
pub fn cmd_retrieve(ck: &AnyCheckpoint, data: &DataSource, split: Split, query: &str, k: usize) -> CliResult<Vec<Hit>> {
    let pairs = pairs_of(data, split)?;
    let rows = data.rows_of(split);
    let (audio, _) = embed_with(ck, &pairs)?;
    let q = embed_texts(ck, &[query])?;
    let scores = score_matrix(&q, &audio)?.remove(0);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| Hit {
            rank: r + 1,
            id: pairs[i].id.clone(),
            score: scores[i],
            caption: pairs[i].caption.clone(),
            tags: rows[i].tags.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutput {
    pub split: Split,
    pub attribute: String,
    pub labels: Vec<String>,
    pub prompt_template: Option<String>,
    pub n_clips: usize,
    pub accuracy: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub per_class_roc_auc: Vec<Option<f64>>,
    pub per_class_pr_auc: Vec<Option<f64>>,
    /// Cosine scores `[n_clips, n_labels]`.
    pub scores: Vec<Vec<f64>>,
}

/// Classifies the clips of `split` by the manifest tag `attribute`, using
/// the tag values (or `labels`) as class names.
pub fn cmd_zeroshot(
    ck: &AnyCheckpoint,
    data: &DataSource,
    split: Split,
    attribute: &str,
    labels: Option<Vec<String>>,
    prompt_template: Option<String>,
) -> CliResult<ZeroShotOutput> {
    let rows = data.rows_of(split);
    let truth: Vec<String> = rows
        .iter()
        .map(|r| {
            r.tags
                .get(attribute)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("clip {} has no {attribute:?} tag", r.id)))
        })
        .collect::<CliResult<_>>()?;
    let labels = labels.unwrap_or_else(|| {
        let mut l = truth.clone();
        l.sort();
        l.dedup();
        l
    });
    let targets: Vec<usize> = truth
        .iter()
        .map(|t| {
            labels
                .iter()
                .position(|l| l == t)
                .ok_or_else(|| CliError::Data(format!("tag value {t:?} is not among the labels {labels:?}")))
        })
        .collect::<CliResult<_>>()?;
    let task = ZeroShotTask::new(labels.clone(), prompt_template.clone(), false)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let pairs = pairs_of(data, split)?;
    let (audio, _) = embed_with(ck, &pairs)?;
    let scores = match ck {
        AnyCheckpoint::F32(c) => zero_shot_classify(&audio, &task, &c.model, &c.vocab)?,
        AnyCheckpoint::F64(c) => zero_shot_classify(&audio, &task, &c.model, &c.vocab)?,
    };
    let hot = one_hot(&targets, labels.len());
    let roc = macro_roc_auc(&scores, &hot)?;
    let pr = macro_pr_auc(&scores, &hot)?;
    log::debug!("predictions: {:?}", predict(&scores));
    Ok(ZeroShotOutput {
        split,
        attribute: attribute.to_string(),
        labels,
        prompt_template,
        n_clips: pairs.len(),
        accuracy: accuracy(&scores, &targets)?,
        roc_auc: roc.value,
        pr_auc: pr.value,
        per_class_roc_auc: roc.per_class,
        per_class_pr_auc: pr.per_class,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedOutput {
    pub split: Split,
    pub n: usize,
    pub dim: usize,
    pub audio: PathBuf,
    pub text: PathBuf,
    pub ids: PathBuf,
}

/// Writes `audio.f64`, `text.f64` (flat array records `[n, dim]`) and
/// `ids.txt` into `out`.
pub fn cmd_embed(ck: &AnyCheckpoint, data: &DataSource, split: Split, out: &Path) -> CliResult<EmbedOutput> {
    let pairs = pairs_of(data, split)?;
    let (a, t) = embed_with(ck, &pairs)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let write = |name: &str, rows: &[Vec<f64>]| -> CliResult<PathBuf> {
        let path = out.join(name);
        let mut buf = Vec::new();
        write_flat(&mut buf, &Tensor::<f64>::from_rows(rows)?)?;
        std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    };
    let audio = write("audio.f64", &a)?;
    let text = write("text.f64", &t)?;
    let ids = out.join("ids.txt");
    let mut f = std::fs::File::create(&ids).map_err(|e| CliError::io(&ids, e))?;
    for p in &pairs {
        writeln!(f, "{}", p.id).map_err(|e| CliError::io(&ids, e))?;
    }
    Ok(EmbedOutput {
        split,
        n: pairs.len(),
        dim: a.first().map_or(0, Vec::len),
        audio,
        text,
        ids,
    })
}
