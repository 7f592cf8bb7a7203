use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use echoclr::datamodel::{load_manifest, titrate, Manifest, Outcome, Split, StudyRecord};
use echoclr::evaluate::{aggregate_to_study, bootstrap_ci, paired_auc_test, roc_auc, Metric, StudyPrediction};
use echoclr::finetune::{
    fit_with_grid, predict_studies, ratio_key, read_results_csv, run_titration, write_results_csv, FinetuneConfig,
    InitKind, PredictionTable, TitrationSpec, DEFAULT_RATIOS,
};
use echoclr::model::{write_atomic, Checkpoint, EchoNet, InitMode, ModelConfig};
use echoclr::pretrain::{pretrain_loop, reorder_accuracy, PretrainConfig, PretrainMode, PretrainSinks};
use echoclr::synthgen::{generate_dataset, SynthConfig};
use echoclr::video::{read_video, write_video, DiskVideos, VideoFormat};
use echoclr::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Kind, Opt, Settings, RESOLVED_CONFIG};
use crate::plot::{self, PlotMetric};
use crate::CliError;

pub fn about(command: &str) -> &'static str {
    match command {
        "synth-gen" => "Generate a synthetic dataset (videos, manifest, latents)",
        "preprocess" => "Mask the periphery of every video and resize it",
        "pretrain" => "Self-supervised pretraining (simclr, mi_simclr or echoclr)",
        "finetune" => "Fine-tune a disease classifier at one training ratio",
        "titrate" => "Fine-tune across training ratios and score the test sets",
        "evaluate" => "Bootstrap AUROC/AUPR intervals and paired comparison",
        "explain" => "Grad-CAM overlays for selected videos",
        "plot" => "Titration figures (SVG and PNG) from a results CSV",
        _ => "",
    }
}

fn model_opts() -> Vec<Opt> {
    vec![
        Opt::new("encoder", Kind::Text, "Encoder variant: tiny or full").default("tiny"),
        Opt::new("rep-dim", Kind::Int, "Representation size of the tiny encoder").default(32),
    ]
}

fn finetune_opts() -> Vec<Opt> {
    let d = FinetuneConfig::default();
    vec![
        Opt::new("manifest", Kind::Path, "Manifest CSV").required(),
        Opt::new("outcome", Kind::Text, "lvh or severe_as").required(),
        Opt::new(
            "init",
            Kind::Text,
            "random, external, ssl (or echoclr, mi_simclr, simclr)",
        )
        .default("random"),
        Opt::new("checkpoint", Kind::Path, "Weights for external or ssl initialization"),
        Opt::new(
            "lr",
            Kind::FloatList,
            "Learning rates to try; empty uses the standard grid",
        )
        .default(""),
        Opt::new("max-epochs", Kind::Int, "Epoch cap").default(d.max_epochs),
        Opt::new("patience", Kind::Int, "Early-stopping patience").default(d.patience),
        Opt::new("batch", Kind::Int, "Batch size").default(d.batch),
        Opt::new("clip-len", Kind::Int, "Frames per clip").default(d.clip_len),
        Opt::new("augment", Kind::Bool, "Augment training clips").default(d.augment),
    ]
}

pub fn options(command: &str) -> Vec<Opt> {
    match command {
        "synth-gen" => {
            let d = SynthConfig::default();
            vec![
                Opt::new("n-studies", Kind::Int, "Internal studies").default(d.n_studies),
                Opt::new("external-studies", Kind::Int, "Domain-shifted external-test studies")
                    .default(d.n_external_studies),
                Opt::new("videos-min", Kind::Int, "Fewest videos per study").default(d.videos_per_study.0),
                Opt::new("videos-max", Kind::Int, "Most videos per study").default(d.videos_per_study.1),
                Opt::new("frames", Kind::Int, "Frames per video").default(d.frames_per_video),
                Opt::new("height", Kind::Int, "Frame height").default(d.height),
                Opt::new("width", Kind::Int, "Frame width").default(d.width),
                Opt::new("fps", Kind::Float, "Frame rate").default(d.fps),
                Opt::new("noise", Kind::Float, "Speckle level").default(d.noise_level),
                Opt::new("theta-lvh", Kind::Float, "Wall-thickness threshold").default(d.theta_lvh),
                Opt::new("theta-as", Kind::Float, "Valve-amplitude threshold").default(d.theta_as),
                Opt::new("lvh-prevalence", Kind::Float, "Target LVH prevalence").default(d.lvh_prevalence),
                Opt::new("as-prevalence", Kind::Float, "Target severe AS prevalence").default(d.as_prevalence),
                Opt::new("format", Kind::Text, "Video container: avi or raw").default("avi"),
            ]
        }
        "preprocess" => vec![
            Opt::new("manifest", Kind::Path, "Input manifest CSV").required(),
            Opt::new("size", Kind::Int, "Output frame size (square)").default(112),
            Opt::new(
                "drop-excluded",
                Kind::Bool,
                "Drop studies flagged excluded_flow_gradient",
            )
            .default(true),
        ],
        "pretrain" => {
            let d = PretrainConfig::default();
            let mut v = vec![
                Opt::new("manifest", Kind::Path, "Manifest CSV").required(),
                Opt::new("mode", Kind::Text, "simclr, mi_simclr or echoclr").default(d.mode.as_str()),
                Opt::new("split", Kind::Text, "Split whose videos are used").default("train"),
                Opt::new("epochs", Kind::Int, "Epochs (multi-instance count)").default(d.epochs),
                Opt::new("lr", Kind::Float, "Adam learning rate").default(d.learning_rate),
                Opt::new("batch-pairs", Kind::Int, "Positive pairs per batch").default(d.batch_pairs),
                Opt::new("tau", Kind::Float, "NT-Xent temperature").default(d.tau),
                Opt::new("k", Kind::Int, "Frames per pretraining clip").default(d.k),
                Opt::new("reorder-weight", Kind::Float, "Weight on the reorder loss").default(d.reorder_weight),
                Opt::new(
                    "match-simclr-epochs",
                    Kind::Bool,
                    "Match SimCLR steps to the multi-instance run",
                )
                .default(d.match_simclr_epochs),
                Opt::new("eval-split", Kind::Text, "Split for reorder accuracy (echoclr only)").default("val"),
            ];
            v.extend(model_opts());
            v
        }
        "finetune" => {
            let mut v = finetune_opts();
            v.push(Opt::new("ratio", Kind::Float, "Fraction of training studies").default(1.0));
            v.extend(model_opts());
            v
        }
        "titrate" => {
            let mut v = finetune_opts();
            let ratios: Vec<String> = DEFAULT_RATIOS.iter().map(|r| r.to_string()).collect();
            v.push(Opt::new("ratios", Kind::FloatList, "Training ratios").default(ratios.join(",")));
            v.push(
                Opt::new("bootstrap", Kind::Int, "Bootstrap replicates").default(echoclr::evaluate::DEFAULT_REPLICATES),
            );
            v.push(Opt::new(
                "baseline",
                Kind::Path,
                "predictions.json of a baseline titration run",
            ));
            v.extend(model_opts());
            v
        }
        "evaluate" => vec![
            Opt::new("predictions", Kind::Path, "CSV with study_id, label, prob columns").required(),
            Opt::new("compare", Kind::Path, "Second predictions CSV for a paired AUROC test"),
            Opt::new("metric", Kind::Text, "auroc, aupr or both").default("both"),
            Opt::new("bootstrap", Kind::Int, "Bootstrap replicates").default(echoclr::evaluate::DEFAULT_REPLICATES),
            Opt::new("level", Kind::Float, "Confidence level").default(echoclr::evaluate::DEFAULT_LEVEL),
            Opt::new("stratified", Kind::Bool, "Resample within classes in the paired test").default(false),
        ],
        "explain" => vec![
            Opt::new("checkpoint", Kind::Path, "Fine-tuned model checkpoint").required(),
            Opt::new("manifest", Kind::Path, "Manifest CSV").required(),
            Opt::new(
                "videos",
                Kind::Text,
                "Comma-separated video ids; empty takes --limit from --split",
            )
            .default(""),
            Opt::new("split", Kind::Text, "Split to draw videos from").default("internal_test"),
            Opt::new("limit", Kind::Int, "Videos to explain when --videos is empty").default(4),
            Opt::new("top-k", Kind::Int, "Hotspots listed per sidecar").default(5),
        ],
        "plot" => vec![
            Opt::new("results", Kind::Path, "Results CSV from titrate").required(),
            Opt::new("metric", Kind::Text, "auroc or aupr").default("auroc"),
        ],
        _ => Vec::new(),
    }
}

pub fn dispatch(s: &Settings) -> Result<(), CliError> {
    let out = prepare_out_dir(s)?;
    let _beat = Heartbeat::start(s)?;
    let outputs = match s.command.as_str() {
        "synth-gen" => synth_gen(s, &out)?,
        "preprocess" => preprocess(s, &out)?,
        "pretrain" => pretrain(s, &out)?,
        "finetune" => finetune(s, &out)?,
        "titrate" => titrate_cmd(s, &out)?,
        "evaluate" => evaluate(s, &out)?,
        "explain" => explain(s, &out)?,
        "plot" => plot_cmd(s, &out)?,
        other => return Err(CliError::Usage(format!("unknown command {other}"))),
    };
    let paths: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    println!("{}", json!({"event": "done", "command": s.command, "outputs": paths}));
    Ok(())
}

fn prepare_out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    let out = s.path("out-dir")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_atomic(&out.join(RESOLVED_CONFIG), s.to_file_string().as_bytes())?;
    Ok(out)
}

fn quiet(s: &Settings) -> Result<bool, CliError> {
    match s.str("log-level")? {
        "info" => Ok(false),
        "quiet" => Ok(true),
        other => Err(CliError::Usage(format!(
            "--log-level must be info or quiet, got {other:?}"
        ))),
    }
}

/// Periodic `{"event":"heartbeat"}` lines on stderr while a command runs.
struct Heartbeat {
    stop: Option<mpsc::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl Heartbeat {
    fn start(s: &Settings) -> Result<Self, CliError> {
        if quiet(s)? {
            return Ok(Self {
                stop: None,
                handle: None,
            });
        }
        let every = std::env::var("ECHOCLR_HEARTBEAT_SECS")
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(30);
        let command = s.command.clone();
        let (tx, rx) = mpsc::channel::<()>();
        let start = Instant::now();
        let handle = std::thread::spawn(move || {
            while let Err(mpsc::RecvTimeoutError::Timeout) = rx.recv_timeout(Duration::from_secs(every)) {
                eprintln!(
                    "{}",
                    json!({"event": "heartbeat", "command": command, "elapsed_s": start.elapsed().as_secs()})
                );
            }
        });
        Ok(Self {
            stop: Some(tx),
            handle: Some(handle),
        })
    }
}

impl Drop for Heartbeat {
    fn drop(&mut self) {
        drop(self.stop.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Line-delimited JSON log file, echoed to stderr unless quiet.
struct LogSink {
    file: BufWriter<File>,
    echo: bool,
}

impl LogSink {
    fn create(path: &Path, s: &Settings) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
            echo: !quiet(s)?,
        })
    }
}

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        if self.echo {
            std::io::stderr().write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

fn finish_log(mut log: LogSink, path: &Path) -> Result<(), CliError> {
    log.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn disk_source(m: &Manifest) -> DiskVideos {
    DiskVideos {
        paths: m.videos.iter().map(|v| v.path.clone()).collect(),
    }
}

fn model_config(s: &Settings) -> Result<ModelConfig, CliError> {
    match s.str("encoder")? {
        "tiny" => Ok(ModelConfig::tiny(s.parse("rep-dim")?)),
        "full" => Ok(ModelConfig::full()),
        other => Err(usage(format!("--encoder must be tiny or full, got {other:?}"))),
    }
}

fn synth_gen(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let config = SynthConfig {
        n_studies: s.parse("n-studies")?,
        n_external_studies: s.parse("external-studies")?,
        videos_per_study: (s.parse("videos-min")?, s.parse("videos-max")?),
        frames_per_video: s.parse("frames")?,
        height: s.parse("height")?,
        width: s.parse("width")?,
        fps: s.parse("fps")?,
        noise_level: s.parse("noise")?,
        theta_lvh: s.parse("theta-lvh")?,
        theta_as: s.parse("theta-as")?,
        lvh_prevalence: s.parse("lvh-prevalence")?,
        as_prevalence: s.parse("as-prevalence")?,
        seed: s.parse("seed")?,
        ..SynthConfig::default()
    };
    let format = match s.str("format")? {
        "avi" => VideoFormat::Avi,
        "raw" => VideoFormat::Raw,
        other => return Err(usage(format!("--format must be avi or raw, got {other:?}"))),
    };
    let m = generate_dataset(&config, out, format)?;
    eprintln!(
        "{}",
        json!({"event": "generated", "studies": m.studies.len(), "videos": m.videos.len()})
    );
    Ok(vec![out.join("manifest.csv"), out.join("videos")])
}

fn preprocess(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let input = s.path("manifest")?;
    let target = out.join("manifest.csv");
    if same_file(&input, &target) {
        return Err(usage("--out-dir would overwrite the input manifest".into()));
    }
    let mut m = load_manifest(&input)?;
    if s.flag("drop-excluded")? {
        m.drop_excluded();
    }
    let size: usize = s.parse("size")?;
    let video_dir = out.join("videos");
    std::fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    for rec in &mut m.videos {
        let v = read_video(&rec.path)?;
        let p = echoclr::preprocess::preprocess_video(&v, (size, size))?;
        let ext = match rec.path.extension().and_then(|e| e.to_str()) {
            Some("avi") => "avi",
            _ => "raw",
        };
        let rel = PathBuf::from(format!("videos/{}.{ext}", rec.video_id));
        write_video(&out.join(&rel), &p, rec.fps)?;
        rec.path = rel;
        rec.height = size;
        rec.width = size;
    }
    m.save(&target)?;
    Ok(vec![target, video_dir])
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn split_ids(m: &Manifest, split: Split) -> HashSet<String> {
    m.studies_in(split).into_iter().map(|s| s.study_id).collect()
}

fn videos_in(m: &Manifest, split: Split) -> Vec<usize> {
    let ids = split_ids(m, split);
    let refs: HashSet<&str> = ids.iter().map(String::as_str).collect();
    m.videos_of(&refs)
}

fn parse_split(s: &Settings, key: &str) -> Result<Split, CliError> {
    s.parse(key)
}

fn pretrain(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let m = load_manifest(&s.path("manifest")?)?;
    let mode: PretrainMode = s.parse("mode")?;
    let config = PretrainConfig {
        mode,
        tau: s.parse("tau")?,
        k: s.parse("k")?,
        learning_rate: s.parse("lr")?,
        batch_pairs: s.parse("batch-pairs")?,
        epochs: s.parse("epochs")?,
        match_simclr_epochs: s.flag("match-simclr-epochs")?,
        reorder_weight: s.parse("reorder-weight")?,
        seed: s.parse("seed")?,
    };
    let mut net = EchoNet::<f32>::random(config.model_config(model_config(s)?), config.seed)?;
    let videos = videos_in(&m, parse_split(s, "split")?);
    let source = disk_source(&m);
    let log_path = out.join("pretrain_log.jsonl");
    let mut log = LogSink::create(&log_path, s)?;
    let outcome = pretrain_loop(
        &mut net,
        &m,
        &source,
        &videos,
        &config,
        PretrainSinks {
            log: Some(&mut log),
            checkpoint_dir: Some(out),
        },
    )?;
    finish_log(log, &log_path)?;
    let accuracy = if mode == PretrainMode::EchoClr {
        let held_out = videos_in(&m, parse_split(s, "eval-split")?);
        if held_out.is_empty() {
            None
        } else {
            Some(reorder_accuracy(&net, &source, &held_out, config.k, 4, config.seed)?)
        }
    } else {
        None
    };
    let last = outcome.history.last();
    write_json(
        &out.join("summary.json"),
        &json!({
            "mode": mode,
            "epochs_run": outcome.epochs_run,
            "steps": outcome.steps,
            "n_pairs": outcome.n_pairs,
            "n_videos": outcome.n_videos,
            "final_combined": last.map(|e| e.combined),
            "final_nt_xent": last.map(|e| e.nt_xent),
            "final_reorder_ce": last.and_then(|e| e.reorder_ce),
            "reorder_accuracy": accuracy,
        }),
    )?;
    Ok(vec![log_path, out.join("final.ckpt"), out.join("summary.json")])
}

/// Initialization from `--init`/`--checkpoint`, with the label used in results.
fn init_mode(s: &Settings) -> Result<(InitMode, String), CliError> {
    let label = s.str("init")?.to_string();
    let ckpt = || {
        s.opt_path("checkpoint")
            .ok_or_else(|| usage(format!("missing required flag --checkpoint (needed by --init {label})")))
    };
    let mode = match label.as_str() {
        "random" => InitMode::Random,
        "external" | "external_file" => InitMode::ExternalFile(ckpt()?),
        "ssl" | "ssl_checkpoint" | "echoclr" | "mi_simclr" | "simclr" => InitMode::SslCheckpoint(ckpt()?),
        other => return Err(usage(format!("unknown --init {other:?}"))),
    };
    Ok((mode, label))
}

/// Architecture for fine-tuning: taken from the checkpoint when it records
/// one, otherwise from `--encoder`/`--rep-dim`. Heads are always rebuilt.
fn finetune_model(s: &Settings, init: &InitMode) -> Result<ModelConfig, CliError> {
    let recorded = match init {
        InitMode::Random => None,
        InitMode::ExternalFile(p) | InitMode::SslCheckpoint(p) => Checkpoint::load(p)?.config,
    };
    let base = match recorded {
        Some(c) => c,
        None => model_config(s)?,
    };
    Ok(ModelConfig {
        reorder_frames: None,
        ..base
    })
}

fn finetune_config(s: &Settings, init: &InitMode, ratio: f64) -> Result<FinetuneConfig, CliError> {
    let config = FinetuneConfig {
        init: InitKind::of(init),
        outcome: s.parse::<Outcome>("outcome")?,
        ratio,
        clip_len: s.parse("clip-len")?,
        max_epochs: s.parse("max-epochs")?,
        patience: s.parse("patience")?,
        batch: s.parse("batch")?,
        lr_candidates: s.floats("lr")?,
        augment: s.flag("augment")?,
        seed: s.parse("seed")?,
    };
    config.validate()?;
    Ok(config)
}

fn labeled(m: &Manifest, split: Split, outcome: Outcome) -> Vec<StudyRecord> {
    m.studies_in(split)
        .into_iter()
        .filter(|st| st.label(outcome).is_some())
        .collect()
}

fn finetune(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let m = load_manifest(&s.path("manifest")?)?;
    let (init, label) = init_mode(s)?;
    let model = finetune_model(s, &init)?;
    let config = finetune_config(s, &init, s.parse("ratio")?)?;
    let train = titrate(&labeled(&m, Split::Train, config.outcome), config.ratio, config.seed)?;
    let val = labeled(&m, Split::Val, config.outcome);
    let source = disk_source(&m);
    let log_path = out.join("finetune_log.jsonl");
    let mut log = LogSink::create(&log_path, s)?;
    let (fit, grid) = fit_with_grid(&model, &init, &m, &source, &train, &val, &config, Some(&mut log))?;
    finish_log(log, &log_path)?;
    let ckpt = out.join("model.ckpt");
    fit.net
        .to_checkpoint(json!({
            "kind": "finetune",
            "init": label,
            "finetune_config": config,
            "lr": fit.lr,
            "best_epoch": fit.best_epoch,
            "best_val_loss": fit.best_val_loss,
        }))
        .save(&ckpt)?;
    let mut outputs = vec![log_path, ckpt];
    let mut scores = BTreeMap::new();
    for (name, split) in [("internal", Split::InternalTest), ("external", Split::ExternalTest)] {
        let studies = labeled(&m, split, config.outcome);
        if studies.is_empty() {
            continue;
        }
        let preds = predict_studies(&fit.net, &m, &source, &studies, &config)?;
        let path = out.join(format!("predictions_{name}.csv"));
        write_predictions_csv(&preds, &path)?;
        outputs.push(path);
        let (p, l): (Vec<f64>, Vec<bool>) = preds.iter().map(|x| (x.study_prob, x.label)).unzip();
        scores.insert(name, roc_auc(&p, &l).ok());
    }
    let summary = out.join("summary.json");
    write_json(
        &summary,
        &json!({
            "init": label,
            "ratio": config.ratio,
            "n_train_studies": train.len(),
            "lr_selected": fit.lr,
            "best_epoch": fit.best_epoch,
            "best_val_loss": fit.best_val_loss,
            "stopped_early": fit.stopped_early,
            "grid": grid.iter().map(|g| json!({"lr": g.lr, "best_epoch": g.best_epoch, "best_val_loss": g.best_val_loss, "epochs_run": g.epochs_run})).collect::<Vec<_>>(),
            "auroc": scores,
            "warnings": fit.warnings,
        }),
    )?;
    outputs.push(summary);
    Ok(outputs)
}

/// One test set of one ratio in `predictions.json`.
#[derive(Serialize, Deserialize)]
struct PredictionGroup {
    ratio: String,
    test_set: String,
    predictions: Vec<StudyPrediction>,
}

fn read_prediction_table(path: &Path) -> Result<PredictionTable, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let groups: Vec<PredictionGroup> = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(groups
        .into_iter()
        .map(|g| ((g.ratio, g.test_set), g.predictions))
        .collect())
}

fn titrate_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let m = load_manifest(&s.path("manifest")?)?;
    let (init, label) = init_mode(s)?;
    let model = finetune_model(s, &init)?;
    let ratios = s.floats("ratios")?;
    if ratios.is_empty() {
        return Err(usage("--ratios is empty".into()));
    }
    let finetune = finetune_config(s, &init, ratios[0])?;
    let baseline = s.opt_path("baseline").map(|p| read_prediction_table(&p)).transpose()?;
    let spec = TitrationSpec {
        init: &init,
        init_label: label,
        ratios,
        model,
        finetune,
        bootstrap_b: s.parse("bootstrap")?,
        baseline: baseline.as_ref(),
    };
    let source = disk_source(&m);
    let log_path = out.join("titrate_log.jsonl");
    let mut log = LogSink::create(&log_path, s)?;
    let outcome = run_titration(&m, &source, &spec, Some(&mut log))?;
    finish_log(log, &log_path)?;
    let results = out.join("results.csv");
    write_results_csv(&outcome.rows, &results)?;
    let groups: Vec<PredictionGroup> = outcome
        .predictions
        .into_iter()
        .map(|((ratio, test_set), predictions)| PredictionGroup {
            ratio,
            test_set,
            predictions,
        })
        .collect();
    let preds = out.join("predictions.json");
    write_json(&preds, &groups)?;
    let summary = out.join("summary.json");
    write_json(
        &summary,
        &json!({
            "fits": outcome.fits.iter().map(|f| json!({
                "ratio": ratio_key(f.ratio),
                "n_studies": f.n_studies,
                "lr_selected": f.fit.lr,
                "best_epoch": f.fit.best_epoch,
                "best_val_loss": f.fit.best_val_loss,
                "grid": f.grid.iter().map(|g| json!({"lr": g.lr, "best_val_loss": g.best_val_loss, "epochs_run": g.epochs_run})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "warnings": outcome.warnings,
        }),
    )?;
    Ok(vec![log_path, results, preds, summary])
}

fn write_predictions_csv(preds: &[StudyPrediction], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["study_id", "label", "prob", "n_videos"])
        .map_err(Error::from)?;
    for p in preds {
        w.write_record([
            p.study_id.clone(),
            u8::from(p.label).to_string(),
            format!("{}", p.study_prob),
            p.video_probs.len().to_string(),
        ])
        .map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Predictions CSV with `study_id`, `label`, `prob` columns (others ignored).
/// Several rows for one study are treated as video-level scores and averaged.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<StudyPrediction>, CliError> {
    let bad = |row: usize, msg: String| Error::Config(format!("{}: row {row}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let header = r.headers().map_err(Error::from)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing column {name}", path.display())))
    };
    let (ci, cl, cp) = (col("study_id")?, col("label")?, col("prob")?);
    let mut probs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut labels: HashMap<String, bool> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(bad(row, "empty study_id".into()).into());
        }
        let label = match rec.get(cl).unwrap_or("") {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(row, format!("label {other:?} is not 0/1")).into()),
        };
        let raw = rec.get(cp).unwrap_or("");
        let prob: f64 = raw
            .parse()
            .map_err(|_| bad(row, format!("prob {raw:?} is not a number")))?;
        if labels.insert(id.clone(), label).is_some_and(|prev| prev != label) {
            return Err(bad(row, format!("study {id} has conflicting labels")).into());
        }
        probs.entry(id).or_default().push(prob);
    }
    Ok(aggregate_to_study(&probs, &labels)?)
}

fn evaluate(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let preds = read_predictions_csv(&s.path("predictions")?)?;
    let metrics = match s.str("metric")? {
        "both" => vec![Metric::Auroc, Metric::Aupr],
        one => vec![one.parse::<Metric>().map_err(|e| usage(e.to_string()))?],
    };
    let (b, level, seed): (usize, f64, u64) = (s.parse("bootstrap")?, s.parse("level")?, s.parse("seed")?);
    let mut reports = Vec::new();
    for metric in metrics {
        reports.push(bootstrap_ci(metric, &preds, b, level, seed)?);
    }
    let paired = match s.opt_path("compare") {
        Some(path) => {
            let other = read_predictions_csv(&path)?;
            let by_id: HashMap<&str, &StudyPrediction> = other.iter().map(|p| (p.study_id.as_str(), p)).collect();
            let mut a = Vec::new();
            let mut bb = Vec::new();
            let mut labels = Vec::new();
            for p in &preds {
                let q = by_id
                    .get(p.study_id.as_str())
                    .ok_or_else(|| Error::Config(format!("{} lacks study {}", path.display(), p.study_id)))?;
                if q.label != p.label {
                    return Err(Error::Config(format!("label mismatch for study {}", p.study_id)).into());
                }
                a.push(p.study_prob);
                bb.push(q.study_prob);
                labels.push(p.label);
            }
            Some(paired_auc_test(&a, &bb, &labels, b, seed, s.flag("stratified")?)?)
        }
        None => None,
    };
    let path = out.join("metrics.json");
    write_json(
        &path,
        &json!({"n_studies": preds.len(), "reports": reports, "paired": paired}),
    )?;
    Ok(vec![path])
}

fn explain(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ck = Checkpoint::load(&s.path("checkpoint")?)?;
    let net = EchoNet::<f32>::from_checkpoint(&ck)?;
    let standardize = net.config.encoder.in_channels == 3;
    let m = load_manifest(&s.path("manifest")?)?;
    let wanted: Vec<usize> = match s.str("videos")? {
        "" => {
            let limit: usize = s.parse("limit")?;
            videos_in(&m, parse_split(s, "split")?)
                .into_iter()
                .take(limit)
                .collect()
        }
        list => list
            .split(',')
            .map(|id| {
                let id = id.trim();
                m.videos
                    .iter()
                    .position(|v| v.video_id == id)
                    .ok_or_else(|| Error::Config(format!("video {id:?} not in manifest")).into())
            })
            .collect::<Result<_, CliError>>()?,
    };
    let k: usize = s.parse("top-k")?;
    let mut outputs = Vec::new();
    for i in wanted {
        let rec = &m.videos[i];
        let video = read_video(&rec.path)?;
        let paths = echoclr::explain::explain_video(&net, &video, &rec.video_id, standardize, out, k)?;
        outputs.extend([paths.png, paths.raw, paths.json]);
    }
    Ok(outputs)
}

fn plot_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = read_results_csv(&s.path("results")?)?;
    let metric = PlotMetric::parse(s.str("metric")?)
        .ok_or_else(|| usage(format!("--metric must be auroc or aupr, got {:?}", s.raw("metric"))))?;
    Ok(plot::write_panels(&plot::panels(&rows, metric), out)?)
}
