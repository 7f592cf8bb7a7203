//! Supervised fine-tuning for binary disease labels, with early stopping,
//! learning-rate grids and the data-titration driver.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{titrate, Manifest, Outcome, Split, StudyRecord};
use crate::error::{Error, Result};
use crate::evaluate::{self, aggregate_to_study, bootstrap_ci, paired_auc_test, Metric, StudyPrediction};
use crate::model::{init_weights, EchoNet, InitMode, Mode, ModelConfig};
use crate::nn::{Adam, Grads, ParamStore, Tensor};
use crate::preprocess::{minmax_normalize_in_place, standardize_external, Clip, KINETICS_MEAN, KINETICS_STD};
use crate::pretrain::{num_workers, stack_clips};
use crate::rng;
use crate::sampleaug::{apply_augment, clip_from, draw_augment_params, sample_clip};
use crate::video::{Video, VideoSource};

pub const DEFAULT_RATIOS: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00];
pub const SMALL_DATA_RATIO: f64 = 0.10;

/// Initialization family, which decides the learning-rate grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    ExternalFile,
    SslCheckpoint,
}

impl InitKind {
    pub fn of(mode: &InitMode) -> Self {
        match mode {
            InitMode::Random => InitKind::Random,
            InitMode::ExternalFile(_) => InitKind::ExternalFile,
            InitMode::SslCheckpoint(_) => InitKind::SslCheckpoint,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::ExternalFile => "external_file",
            InitKind::SslCheckpoint => "ssl_checkpoint",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(InitKind::Random),
            "external_file" => Ok(InitKind::ExternalFile),
            "ssl_checkpoint" => Ok(InitKind::SslCheckpoint),
            other => Err(format!("unknown init {other:?}")),
        }
    }
}

/// Candidate learning rates for an initialization at a training ratio.
pub fn lr_grid(init: InitKind, ratio: f64) -> Vec<f64> {
    let ssl = init == InitKind::SslCheckpoint;
    match (ratio > SMALL_DATA_RATIO, ssl) {
        (true, false) => vec![1e-4],
        (true, true) => vec![0.1],
        (false, false) => vec![1e-4, 5e-5, 1e-5],
        (false, true) => vec![0.1, 0.05, 0.001],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub init: InitKind,
    pub outcome: Outcome,
    pub ratio: f64,
    pub clip_len: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    /// Overrides the grid from [`lr_grid`] when nonempty.
    pub lr_candidates: Vec<f64>,
    /// Random crop/flip/rotation on training clips.
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            init: InitKind::Random,
            outcome: Outcome::SevereAs,
            ratio: 1.0,
            clip_len: 16,
            max_epochs: 30,
            patience: 5,
            batch: 16,
            lr_candidates: Vec::new(),
            augment: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.patience == 0 || self.clip_len == 0 || self.batch == 0 {
            return Err(Error::Config("patience, clip_len and batch must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidRatio(self.ratio));
        }
        if self.lr_candidates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        if self.lr_candidates.is_empty() {
            lr_grid(self.init, self.ratio)
        } else {
            self.lr_candidates.clone()
        }
    }

    /// External weights expect 3-channel standardized input.
    pub fn standardize(&self) -> bool {
        self.init == InitKind::ExternalFile
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses; improvement means strictly lower.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopSignal {
        let improved = loss.is_finite() && self.best.is_none_or(|(_, b)| loss < b);
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
            return StopSignal::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Mean binary cross-entropy on logits and its gradient with respect to them.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - y) / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Labeled videos of `studies` as `(video index, label)`, in manifest order.
pub fn labeled_videos(manifest: &Manifest, studies: &[StudyRecord], outcome: Outcome) -> Vec<(usize, bool)> {
    let labels: HashMap<&str, bool> = studies
        .iter()
        .filter_map(|s| s.label(outcome).map(|l| (s.study_id.as_str(), l)))
        .collect();
    manifest
        .videos
        .iter()
        .enumerate()
        .filter_map(|(i, v)| labels.get(v.study_id.as_str()).map(|&l| (i, l)))
        .collect()
}

/// Error if any study id appears in more than one of `splits`.
pub fn check_disjoint(splits: &[&[StudyRecord]]) -> Result<()> {
    let mut seen = HashSet::new();
    for split in splits {
        let mine: HashSet<&str> = split.iter().map(|s| s.study_id.as_str()).collect();
        for id in mine {
            if !seen.insert(id) {
                return Err(Error::SplitLeakage(id.to_string()));
            }
        }
    }
    Ok(())
}

/// One model input clip. With `r`, a random window plus augmentation;
/// otherwise the first `clip_len` frames.
pub fn finetune_clip(
    video: &Video,
    clip_len: usize,
    r: Option<&mut rng::Rng>,
    augment: bool,
    standardize: bool,
) -> Result<Clip> {
    let mut clip = match r {
        Some(r) => {
            let c = sample_clip(video, clip_len, r);
            if augment {
                apply_augment(&c, &draw_augment_params(r))
            } else {
                c
            }
        }
        None => clip_from(video, 0, clip_len),
    };
    minmax_normalize_in_place(&mut clip);
    if standardize {
        clip = standardize_external(&clip, KINETICS_MEAN, KINETICS_STD)?;
    }
    Ok(clip)
}

/// Disease logits for the deterministic first clip of each video, eval mode.
pub fn video_logits(
    net: &EchoNet<f32>,
    source: &dyn VideoSource,
    videos: &[usize],
    clip_len: usize,
    standardize: bool,
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(batch.max(1)) {
        let clips: Vec<Clip> = chunk
            .par_iter()
            .map(|&v| finetune_clip(&*source.get(v)?, clip_len, None, false, standardize))
            .collect::<Result<_>>()?;
        let x = stack_clips(&clips.iter().collect::<Vec<_>>())?;
        let h = net.encode(&x, Mode::Eval)?.h;
        out.extend(net.disease_logit(&h)?.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Weights from the epoch with minimum validation loss.
    pub net: EchoNet<f32>,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub lr: f64,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Train `net` on the labeled videos of `train` and early-stop on `val`.
pub fn finetune_loop(
    mut net: EchoNet<f32>,
    manifest: &Manifest,
    source: &dyn VideoSource,
    train: &[StudyRecord],
    val: &[StudyRecord],
    config: &FinetuneConfig,
    lr: f64,
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult> {
    config.validate()?;
    check_disjoint(&[train, val])?;
    let train_videos = labeled_videos(manifest, train, config.outcome);
    let val_videos = labeled_videos(manifest, val, config.outcome);
    if train_videos.is_empty() {
        return Err(Error::NoEligibleStudies(format!(
            "no labeled training videos for {}",
            config.outcome
        )));
    }
    if val_videos.is_empty() {
        return Err(Error::Config(format!(
            "no labeled validation videos for {}",
            config.outcome
        )));
    }
    let mut warnings = Vec::new();
    if !train_videos.iter().any(|v| v.1) {
        warnings.push("training subset has no positive labels".to_string());
    }
    let val_labels: Vec<bool> = val_videos.iter().map(|v| v.1).collect();
    if val_labels.iter().all(|&l| l) || val_labels.iter().all(|&l| !l) {
        warnings.push("validation split has one class; AUROC undefined".to_string());
    }
    let val_idx: Vec<usize> = val_videos.iter().map(|v| v.0).collect();
    let standardize = config.standardize();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(num_workers())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut adam = Adam::new(&net.store, lr);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_store: ParamStore<f32> = net.store.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let mut order = train_videos.clone();
        order.shuffle(&mut rng::stream(
            config.seed,
            &[rng::tag("finetune-order"), epoch as u64],
        ));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let clips: Vec<Clip> = pool.install(|| {
                chunk
                    .par_iter()
                    .enumerate()
                    .map(|(j, &(v, _))| {
                        let mut r = rng::stream(
                            config.seed,
                            &[rng::tag("finetune-item"), epoch as u64, (b * config.batch + j) as u64],
                        );
                        finetune_clip(
                            &*source.get(v)?,
                            config.clip_len,
                            Some(&mut r),
                            config.augment,
                            standardize,
                        )
                    })
                    .collect::<Result<_>>()
            })?;
            let labels: Vec<bool> = chunk.iter().map(|v| v.1).collect();
            let x = stack_clips(&clips.iter().collect::<Vec<_>>())?;
            let out = net.encode(&x, Mode::Train)?;
            let logits = net.disease_logit(&out.h)?;
            let lv: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
            let (loss, dl) = bce_with_logits(&lv, &labels)?;
            let mut grads = Grads::zeros_like(&net.store);
            let dlogit = Tensor::from_vec(&[chunk.len(), 1], dl.iter().map(|&g| g as f32).collect())?;
            let dh = net.disease_head.backward(&net.store, &out.h, &dlogit, &mut grads)?;
            net.encoder.backward(&net.store, &out, &dh, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    videos: chunk
                        .iter()
                        .map(|&(v, _)| manifest.videos[v].video_id.clone())
                        .collect(),
                });
            }
            adam.step(&mut net.store, &grads);
            net.encoder.update_running(&mut net.store, &out);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_logits =
            pool.install(|| video_logits(&net, source, &val_idx, config.clip_len, standardize, config.batch))?;
        let (val_loss, _) = bce_with_logits(&val_logits, &val_labels)?;
        let entry = FinetuneEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("<finetune log>", e))?;
        }
        history.push(entry);
        match stopper.observe(epoch + 1, val_loss) {
            StopSignal::Improved => best_store = net.store.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let Some((best_epoch, best_val_loss)) = stopper.best() else {
        return Err(Error::NonFiniteLoss {
            epoch: history.len(),
            batch: 0,
            videos: vec!["<validation>".into()],
        });
    };
    net.store = best_store;
    Ok(FitResult {
        net,
        history,
        best_epoch,
        best_val_loss,
        lr,
        stopped_early,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Fine-tune once per learning rate and keep the run with minimum validation
/// loss. Every run starts from the same initialization.
pub fn fit_with_grid(
    model: &ModelConfig,
    init: &InitMode,
    manifest: &Manifest,
    source: &dyn VideoSource,
    train: &[StudyRecord],
    val: &[StudyRecord],
    config: &FinetuneConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(FitResult, Vec<GridPoint>)> {
    let mut best: Option<FitResult> = None;
    let mut grid = Vec::new();
    for lr in config.learning_rates() {
        let (net, _) = init_weights(model.clone(), init, config.seed)?;
        let fit = finetune_loop(
            net,
            manifest,
            source,
            train,
            val,
            config,
            lr,
            log.as_mut().map(|w| &mut **w as &mut dyn Write),
        )?;
        grid.push(GridPoint {
            lr,
            best_epoch: fit.best_epoch,
            best_val_loss: fit.best_val_loss,
            epochs_run: fit.history.len(),
        });
        if best.as_ref().is_none_or(|b| fit.best_val_loss < b.best_val_loss) {
            best = Some(fit);
        }
    }
    let best = best.ok_or_else(|| Error::Config("empty learning-rate grid".into()))?;
    Ok((best, grid))
}

/// Study-level predictions on `studies`, skipping those without a label.
pub fn predict_studies(
    net: &EchoNet<f32>,
    manifest: &Manifest,
    source: &dyn VideoSource,
    studies: &[StudyRecord],
    config: &FinetuneConfig,
) -> Result<Vec<StudyPrediction>> {
    let videos = labeled_videos(manifest, studies, config.outcome);
    let idx: Vec<usize> = videos.iter().map(|v| v.0).collect();
    let logits = video_logits(net, source, &idx, config.clip_len, config.standardize(), config.batch)?;
    let mut probs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (&v, l) in idx.iter().zip(logits) {
        probs
            .entry(manifest.videos[v].study_id.clone())
            .or_default()
            .push(sigmoid(l));
    }
    let labels: HashMap<String, bool> = studies
        .iter()
        .filter_map(|s| s.label(config.outcome).map(|l| (s.study_id.clone(), l)))
        .collect();
    aggregate_to_study(&probs, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub outcome: String,
    pub init: String,
    pub ratio: f64,
    pub n_studies: usize,
    pub lr_selected: f64,
    pub test_set: String,
    pub auroc: f64,
    pub auroc_lo: f64,
    pub auroc_hi: f64,
    pub aupr: f64,
    pub aupr_lo: f64,
    pub aupr_hi: f64,
    /// One-sided p for AUROC above the baseline's; NaN without a baseline.
    pub p_vs_baseline: f64,
}

pub const RESULT_COLUMNS: [&str; 13] = [
    "outcome",
    "init",
    "ratio",
    "n_studies",
    "lr_selected",
    "test_set",
    "auroc",
    "auroc_lo",
    "auroc_hi",
    "aupr",
    "aupr_lo",
    "aupr_hi",
    "p_vs_baseline",
];

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    crate::model::write_atomic(path, &bytes)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RESULT_COLUMNS.iter().copied()) {
        return Err(Error::Config(format!("{}: unexpected results header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        rows.push(rec.map_err(|e| Error::Config(format!("{} row {}: {e}", path.display(), i + 2)))?);
    }
    Ok(rows)
}

/// Test-set predictions keyed by `(ratio, test_set)`; ratio is formatted `{:.4}`.
pub type PredictionTable = BTreeMap<(String, String), Vec<StudyPrediction>>;

pub fn ratio_key(ratio: f64) -> String {
    format!("{ratio:.4}")
}

#[derive(Clone, Debug)]
pub struct TitrationSpec<'a> {
    pub init: &'a InitMode,
    /// Name written to the `init` column.
    pub init_label: String,
    pub ratios: Vec<f64>,
    pub model: ModelConfig,
    /// Template; `ratio` and `init` are filled per run.
    pub finetune: FinetuneConfig,
    pub bootstrap_b: usize,
    pub baseline: Option<&'a PredictionTable>,
}

#[derive(Clone, Debug)]
pub struct RatioFit {
    pub ratio: f64,
    pub n_studies: usize,
    pub fit: FitResult,
    pub grid: Vec<GridPoint>,
}

#[derive(Clone, Debug)]
pub struct TitrationOutcome {
    pub rows: Vec<ResultRow>,
    pub predictions: PredictionTable,
    pub fits: Vec<RatioFit>,
    pub warnings: Vec<String>,
}

fn metric_or_nan(
    metric: Metric,
    preds: &[StudyPrediction],
    b: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> [f64; 3] {
    match bootstrap_ci(metric, preds, b, evaluate::DEFAULT_LEVEL, seed) {
        Ok(r) => [r.point, r.ci[0], r.ci[1]],
        Err(e) => {
            warnings.push(format!("{metric}: {e}"));
            [f64::NAN; 3]
        }
    }
}

/// For each ratio: titrate the training split, fine-tune over the lr grid,
/// then score the internal and (if labeled) external test sets.
pub fn run_titration(
    manifest: &Manifest,
    source: &dyn VideoSource,
    spec: &TitrationSpec<'_>,
    mut log: Option<&mut dyn Write>,
) -> Result<TitrationOutcome> {
    let outcome = spec.finetune.outcome;
    let labeled = |split: Split| -> Vec<StudyRecord> {
        manifest
            .studies_in(split)
            .into_iter()
            .filter(|s| s.label(outcome).is_some())
            .collect()
    };
    let train_all = labeled(Split::Train);
    let val = labeled(Split::Val);
    let tests: Vec<(&str, Vec<StudyRecord>)> = [("internal", Split::InternalTest), ("external", Split::ExternalTest)]
        .into_iter()
        .map(|(name, split)| (name, labeled(split)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    let mut rows = Vec::new();
    let mut predictions = PredictionTable::new();
    let mut fits = Vec::new();
    let mut warnings = Vec::new();
    for &ratio in &spec.ratios {
        let train = titrate(&train_all, ratio, spec.finetune.seed)?;
        let mut splits: Vec<&[StudyRecord]> = vec![&train, &val];
        splits.extend(tests.iter().map(|t| t.1.as_slice()));
        check_disjoint(&splits)?;
        let config = FinetuneConfig {
            ratio,
            init: InitKind::of(spec.init),
            ..spec.finetune.clone()
        };
        let (fit, grid) = fit_with_grid(
            &spec.model,
            spec.init,
            manifest,
            source,
            &train,
            &val,
            &config,
            log.as_mut().map(|w| &mut **w as &mut dyn Write),
        )?;
        warnings.extend(fit.warnings.iter().map(|w| format!("ratio {ratio}: {w}")));
        for (name, studies) in &tests {
            let preds = predict_studies(&fit.net, manifest, source, studies, &config)?;
            let seed = rng::tag(&format!("ci:{}:{name}", ratio_key(ratio))) ^ config.seed;
            let [auroc, auroc_lo, auroc_hi] =
                metric_or_nan(Metric::Auroc, &preds, spec.bootstrap_b, seed, &mut warnings);
            let [aupr, aupr_lo, aupr_hi] = metric_or_nan(Metric::Aupr, &preds, spec.bootstrap_b, seed, &mut warnings);
            let key = (ratio_key(ratio), name.to_string());
            let p_vs_baseline = match spec.baseline.and_then(|b| b.get(&key)) {
                Some(base) => paired_p(&preds, base, spec.bootstrap_b, seed).unwrap_or_else(|e| {
                    warnings.push(format!("paired test at ratio {ratio}, {name}: {e}"));
                    f64::NAN
                }),
                None => f64::NAN,
            };
            rows.push(ResultRow {
                outcome: outcome.as_str().into(),
                init: spec.init_label.clone(),
                ratio,
                n_studies: train.len(),
                lr_selected: fit.lr,
                test_set: name.to_string(),
                auroc,
                auroc_lo,
                auroc_hi,
                aupr,
                aupr_lo,
                aupr_hi,
                p_vs_baseline,
            });
            predictions.insert(key, preds);
        }
        fits.push(RatioFit {
            ratio,
            n_studies: train.len(),
            fit,
            grid,
        });
    }
    Ok(TitrationOutcome {
        rows,
        predictions,
        fits,
        warnings,
    })
}

/// Paired one-sided test of `a` over `b`, matching studies by id.
pub fn paired_p(a: &[StudyPrediction], b: &[StudyPrediction], replicates: usize, seed: u64) -> Result<f64> {
    let by_id: HashMap<&str, &StudyPrediction> = b.iter().map(|p| (p.study_id.as_str(), p)).collect();
    let mut sa = Vec::with_capacity(a.len());
    let mut sb = Vec::with_capacity(a.len());
    let mut labels = Vec::with_capacity(a.len());
    for p in a {
        let q = by_id
            .get(p.study_id.as_str())
            .ok_or_else(|| Error::Config(format!("baseline lacks study {}", p.study_id)))?;
        sa.push(p.study_prob);
        sb.push(q.study_prob);
        labels.push(p.label);
    }
    Ok(paired_auc_test(&sa, &sb, &labels, replicates, seed, false)?.p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(lr_grid(InitKind::SslCheckpoint, 0.05), vec![0.1, 0.05, 0.001]);
        assert_eq!(lr_grid(InitKind::Random, 0.50), vec![1e-4]);
        assert_eq!(lr_grid(InitKind::ExternalFile, 0.10), vec![1e-4, 5e-5, 1e-5]);
        assert_eq!(lr_grid(InitKind::SslCheckpoint, 1.0), vec![0.1]);
        assert_eq!(lr_grid(InitKind::Random, 0.01), vec![1e-4, 5e-5, 1e-5]);
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(5);
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99];
        let signals: Vec<StopSignal> = losses.iter().enumerate().map(|(i, &l)| s.observe(i + 1, l)).collect();
        assert_eq!(signals[1], StopSignal::Improved);
        assert_eq!(signals[5], StopSignal::Continue);
        assert_eq!(signals[6], StopSignal::Stop);
        assert_eq!(s.best(), Some((2, 0.9)));
        // equal is not an improvement
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), StopSignal::Continue);
        assert_eq!(s.observe(3, 0.5), StopSignal::Stop);
        // non-finite never becomes the best
        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(1, f64::NAN), StopSignal::Continue);
        assert_eq!(s.observe(2, 0.7), StopSignal::Improved);
        assert_eq!(s.best(), Some((2, 0.7)));
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = [-3.0, -0.2, 0.0, 1.5, 40.0, -40.0];
        let labels = [false, true, true, false, true, false];
        let (loss, grad) = bce_with_logits(&logits, &labels).unwrap();
        let direct: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x as f64).exp());
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 6.0;
        assert!((loss - direct).abs() < 1e-12, "{loss} vs {direct}");
        for (i, &g) in grad.iter().enumerate() {
            let h = 1e-6;
            let mut up = logits;
            up[i] += h;
            let mut dn = logits;
            dn[i] -= h;
            let fd = (bce_with_logits(&up, &labels).unwrap().0 - bce_with_logits(&dn, &labels).unwrap().0) / (2.0 * h);
            assert!((g - fd).abs() < 1e-8, "{i}: {g} vs {fd}");
        }
    }

    #[test]
    fn leakage_detected() {
        let a = vec![StudyRecord::new("s1"), StudyRecord::new("s2")];
        let b = vec![StudyRecord::new("s3")];
        let c = vec![StudyRecord::new("s2")];
        assert!(check_disjoint(&[&a, &b]).is_ok());
        assert!(matches!(check_disjoint(&[&a, &b, &c]), Err(Error::SplitLeakage(id)) if id == "s2"));
    }

    #[test]
    fn config_invariants() {
        let mut c = FinetuneConfig::default();
        assert!(c.validate().is_ok());
        c.patience = 30;
        assert!(c.validate().is_err());
        let c = FinetuneConfig {
            lr_candidates: vec![0.3],
            ..Default::default()
        };
        assert_eq!(c.learning_rates(), vec![0.3]);
    }

    #[test]
    fn results_csv_round_trip() {
        let row = ResultRow {
            outcome: "severe_as".into(),
            init: "echoclr".into(),
            ratio: 0.05,
            n_studies: 18,
            lr_selected: 0.1,
            test_set: "internal".into(),
            auroc: 0.8,
            auroc_lo: 0.7,
            auroc_hi: 0.9,
            aupr: 0.5,
            aupr_lo: 0.4,
            aupr_hi: 0.6,
            p_vs_baseline: f64::NAN,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results_csv(&[row.clone()], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&RESULT_COLUMNS.join(",")));
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back[0].auroc, 0.8);
        assert!(back[0].p_vs_baseline.is_nan());
    }
}
