//! Contrastive and frame-reordering objectives and the pretraining loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Manifest;
use crate::error::{Error, Result};
use crate::model::{EchoNet, EncoderOutput, Mode, ModelConfig};
use crate::nn::{Adam, Grads, Scalar, Tensor};
use crate::preprocess::{minmax_normalize_in_place, Clip};
use crate::rng;
use crate::sampleaug::{apply_augment, draw_augment_params, enumerate_mi_pairs, sample_clip, shuffle_frames};
use crate::video::VideoSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretrainMode {
    #[serde(rename = "simclr")]
    SimClr,
    #[serde(rename = "mi_simclr")]
    MiSimClr,
    #[serde(rename = "echoclr")]
    EchoClr,
}

impl PretrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::SimClr => "simclr",
            PretrainMode::MiSimClr => "mi_simclr",
            PretrainMode::EchoClr => "echoclr",
        }
    }

    pub fn multi_instance(self) -> bool {
        self != PretrainMode::SimClr
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "simclr" => Ok(PretrainMode::SimClr),
            "mi_simclr" => Ok(PretrainMode::MiSimClr),
            "echoclr" => Ok(PretrainMode::EchoClr),
            other => Err(format!("unknown pretraining mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub tau: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_pairs: usize,
    /// Passes over the pair list in multi-instance modes. SimCLR converts this
    /// with [`match_epochs`] when `match_simclr_epochs` is set.
    pub epochs: usize,
    pub match_simclr_epochs: bool,
    pub reorder_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::EchoClr,
            tau: 0.5,
            k: 4,
            learning_rate: 0.01,
            batch_pairs: 32,
            epochs: 10,
            match_simclr_epochs: true,
            reorder_weight: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_pairs < 2 {
            return Err(Error::Config("batch_pairs must be at least 2".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("clip length K must be positive".into()));
        }
        Ok(())
    }

    /// Model config with a reorder head when the mode needs one.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        match self.mode {
            PretrainMode::EchoClr => base.with_reorder(self.k),
            _ => ModelConfig {
                reorder_frames: None,
                ..base
            },
        }
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}

/// NT-Xent over `2N` rows laid out as `[view_a(0..N), view_b(0..N)]`.
pub fn nt_xent_loss(z: &[Vec<f64>], tau: f64) -> Result<f64> {
    let d = z.first().map_or(0, Vec::len);
    let flat: Vec<f64> = z.iter().flatten().copied().collect();
    let t = Tensor::from_vec(&[z.len(), d], flat)?;
    Ok(nt_xent_with_grad(&t, tau)?.0)
}

/// NT-Xent loss and its gradient with respect to `z` (shape `(2N, D)`).
///
/// Row `i` is paired with row `(i + N) mod 2N`; the denominator runs over
/// every row except `i` itself. A zero row has similarity 0 to everything
/// and receives zero gradient.
pub fn nt_xent_with_grad<T: Scalar>(z: &Tensor<T>, tau: f64) -> Result<(f64, Tensor<T>)> {
    if z.ndim() != 2 || z.dim(0) == 0 || z.dim(0) % 2 != 0 {
        return Err(Error::Shape(format!("NT-Xent expects (2N, D), got {:?}", z.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (rows, d) = (z.dim(0), z.dim(1));
    let n = rows / 2;
    let mut u = vec![0.0f64; rows * d];
    let mut norms = vec![0.0f64; rows];
    for i in 0..rows {
        let row = &z.data()[i * d..(i + 1) * d];
        if row.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFiniteEmbedding(i));
        }
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > 0.0 {
            for (o, v) in u[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v.as_f64() / norm;
            }
        }
    }
    let mut sim = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for k in i..rows {
            let s: f64 = (0..d).map(|c| u[i * d + c] * u[k * d + c]).sum();
            sim[i * rows + k] = s;
            sim[k * rows + i] = s;
        }
    }
    // g[i][k] = dL/ds_ik for the ordered term of row i
    let mut g = vec![0.0f64; rows * rows];
    let mut loss = 0.0;
    let scale = 1.0 / (rows as f64 * tau);
    for i in 0..rows {
        let p = (i + n) % rows;
        let max = (0..rows)
            .filter(|&k| k != i)
            .map(|k| sim[i * rows + k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows)
            .filter(|&k| k != i)
            .map(|k| (sim[i * rows + k] / tau - max).exp())
            .sum();
        let log_denom = max + denom.ln();
        loss += log_denom - sim[i * rows + p] / tau;
        for k in (0..rows).filter(|&k| k != i) {
            let prob = (sim[i * rows + k] / tau - log_denom).exp();
            g[i * rows + k] = scale * (prob - if k == p { 1.0 } else { 0.0 });
        }
    }
    loss /= rows as f64;
    let mut dz = Tensor::zeros(&[rows, d]);
    for i in 0..rows {
        if norms[i] == 0.0 {
            continue;
        }
        let mut du = vec![0.0f64; d];
        for k in 0..rows {
            let w = g[i * rows + k] + g[k * rows + i];
            if w != 0.0 {
                for (o, &uk) in du.iter_mut().zip(&u[k * d..(k + 1) * d]) {
                    *o += w * uk;
                }
            }
        }
        let ui = &u[i * d..(i + 1) * d];
        let dot: f64 = du.iter().zip(ui).map(|(a, b)| a * b).sum();
        for c in 0..d {
            dz.data_mut()[i * d + c] = T::of((du[c] - dot * ui[c]) / norms[i]);
        }
    }
    Ok((loss, dz))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn reorder_ce_with_grad<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.ndim() != 2 || logits.dim(0) != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "reorder logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let (b, c) = (logits.dim(0), logits.dim(1));
    let mut dl = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        let row: Vec<f64> = logits.data()[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp() - if j == t { 1.0 } else { 0.0 };
            dl.data_mut()[i * c + j] = T::of(p / b as f64);
        }
    }
    Ok((loss / b as f64, dl))
}

pub fn reorder_ce_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    let c = logits.first().map_or(0, Vec::len);
    let t = Tensor::from_vec(&[logits.len(), c], logits.iter().flatten().copied().collect())?;
    Ok(reorder_ce_with_grad(&t, targets)?.0)
}

/// EchoCLR adds the reorder term to NT-Xent; the other modes must not supply one.
pub fn combined_loss(contrastive: f64, reorder: Option<f64>, mode: PretrainMode, reorder_weight: f64) -> Result<f64> {
    match (mode, reorder) {
        (PretrainMode::EchoClr, Some(r)) => Ok(contrastive + reorder_weight * r),
        (PretrainMode::EchoClr, None) => Err(Error::MissingReorderLoss),
        (m, Some(_)) => Err(Error::UnexpectedReorderLoss(m.as_str())),
        (_, None) => Ok(contrastive),
    }
}

/// SimCLR epochs that see as many examples as `epochs_mi` passes over the pairs.
pub fn match_epochs(epochs_mi: usize, n_pairs: usize, n_videos: usize) -> usize {
    (epochs_mi as f64 * n_pairs as f64 / n_videos as f64).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nt_xent: f64,
    pub reorder_ce: Option<f64>,
    pub combined: f64,
}

/// Forward and backward through encoder, projector and (in EchoCLR mode) the
/// reorder head for one contrastive batch.
pub fn loss_and_grads<T: Scalar>(
    net: &EchoNet<T>,
    clips: &Tensor<T>,
    targets: Option<&[usize]>,
    mode: PretrainMode,
    tau: f64,
    reorder_weight: f64,
) -> Result<(LossParts, Grads<T>, EncoderOutput<T>)> {
    let out = net.encode(clips, Mode::Train)?;
    let (z, pcache) = net.projector.forward(&net.store, &out.h)?;
    let (nt, dz) = nt_xent_with_grad(&z, tau)?;
    let mut grads = Grads::zeros_like(&net.store);
    let mut dh = net.projector.backward(&net.store, &pcache, &dz, &mut grads)?;
    let reorder = match (mode, targets) {
        (PretrainMode::EchoClr, Some(t)) => {
            let head = net
                .reorder_head
                .as_ref()
                .ok_or_else(|| Error::Config("echoclr mode needs a reorder head".into()))?;
            let logits = head.forward(&net.store, &out.h)?;
            let (ce, mut dl) = reorder_ce_with_grad(&logits, t)?;
            let w = T::of(reorder_weight);
            for v in dl.data_mut() {
                *v *= w;
            }
            let dh2 = head.backward(&net.store, &out.h, &dl, &mut grads)?;
            dh.add_assign(&dh2);
            Some(ce)
        }
        _ => None,
    };
    let combined = combined_loss(nt, reorder, mode, reorder_weight)?;
    net.encoder.backward(&net.store, &out, &dh, &mut grads)?;
    Ok((
        LossParts {
            nt_xent: nt,
            reorder_ce: reorder,
            combined,
        },
        grads,
        out,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainItem {
    /// One video, augmented twice.
    Single(usize),
    /// Two distinct videos of one study.
    Pair(usize, usize),
}

#[derive(Clone, Debug)]
pub struct PretrainSet {
    pub items: Vec<PretrainItem>,
    pub n_videos: usize,
    pub n_pairs: usize,
}

/// Enumerate training items over the given videos (manifest indices).
pub fn pretrain_items(manifest: &Manifest, videos: &[usize], mode: PretrainMode) -> Result<PretrainSet> {
    let mut by_study: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for &v in videos {
        by_study
            .entry(manifest.videos[v].study_id.as_str())
            .or_default()
            .push(v);
    }
    let pairs: Vec<PretrainItem> = by_study
        .values()
        .flat_map(|vs| enumerate_mi_pairs(vs))
        .map(|(a, b)| PretrainItem::Pair(a, b))
        .collect();
    let n_pairs = pairs.len();
    let items = if mode.multi_instance() {
        pairs
    } else {
        videos.iter().map(|&v| PretrainItem::Single(v)).collect()
    };
    if items.is_empty() {
        return Err(Error::NoEligibleStudies(format!(
            "{} videos yield no {} training items",
            videos.len(),
            mode
        )));
    }
    Ok(PretrainSet {
        items,
        n_videos: videos.len(),
        n_pairs,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// `(2N, 1, K, H, W)`, rows `[view_a, view_b]`.
    pub clips: Tensor<f32>,
    pub targets: Option<Vec<usize>>,
    pub items: Vec<PretrainItem>,
}

/// Sample, augment and normalize one view.
fn make_view(clip: &Clip, r: &mut rng::Rng) -> Clip {
    let params = draw_augment_params(r);
    let mut c = apply_augment(clip, &params);
    minmax_normalize_in_place(&mut c);
    c
}

/// Build the two views of one item from its own random stream.
pub fn build_item(
    source: &dyn VideoSource,
    item: PretrainItem,
    mode: PretrainMode,
    k: usize,
    r: &mut rng::Rng,
) -> Result<(Clip, Clip, Option<(usize, usize)>)> {
    let (mut a, mut b) = match item {
        PretrainItem::Single(v) => {
            let video = source.get(v)?;
            let clip = sample_clip(&video, k, r);
            (make_view(&clip, r), make_view(&clip, r))
        }
        PretrainItem::Pair(va, vb) => {
            let ca = sample_clip(&*source.get(va)?, k, r);
            let cb = sample_clip(&*source.get(vb)?, k, r);
            (make_view(&ca, r), make_view(&cb, r))
        }
    };
    let mut targets = None;
    if mode == PretrainMode::EchoClr {
        let (sa, ra) = shuffle_frames(&a, r);
        let (sb, rb) = shuffle_frames(&b, r);
        a = sa;
        b = sb;
        targets = Some((ra, rb));
    }
    Ok((a, b, targets))
}

/// Stack equally shaped clips into a `(B, C, K, H, W)` tensor.
pub fn stack_clips(clips: &[&Clip]) -> Result<Tensor<f32>> {
    let first = clips.first().ok_or_else(|| Error::Shape("no clips to stack".into()))?;
    let shape = [clips.len(), first.channels, first.frames, first.height, first.width];
    let mut data = Vec::with_capacity(shape.iter().product());
    for c in clips {
        if (c.channels, c.frames, c.height, c.width) != (first.channels, first.frames, first.height, first.width) {
            return Err(Error::Shape("clips in a batch must share a shape".into()));
        }
        data.extend_from_slice(&c.data);
    }
    Tensor::from_vec(&shape, data)
}

/// Build a batch; item `j` draws from stream `(seed, epoch, offset + j)`.
pub fn build_pretrain_batch(
    source: &dyn VideoSource,
    items: &[PretrainItem],
    mode: PretrainMode,
    k: usize,
    seed: u64,
    epoch: usize,
    offset: usize,
) -> Result<PretrainBatch> {
    let views: Vec<(Clip, Clip, Option<(usize, usize)>)> = items
        .par_iter()
        .enumerate()
        .map(|(j, &item)| {
            let mut r = rng::stream(seed, &[rng::tag("pretrain-item"), epoch as u64, (offset + j) as u64]);
            build_item(source, item, mode, k, &mut r)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<&Clip> = views.iter().map(|v| &v.0).collect();
    rows.extend(views.iter().map(|v| &v.1));
    let targets = (mode == PretrainMode::EchoClr).then(|| {
        let mut t: Vec<usize> = views.iter().map(|v| v.2.expect("echoclr targets").0).collect();
        t.extend(views.iter().map(|v| v.2.expect("echoclr targets").1));
        t
    });
    Ok(PretrainBatch {
        clips: stack_clips(&rows)?,
        targets,
        items: items.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nt_xent: f64,
    pub reorder_ce: Option<f64>,
    pub combined: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub history: Vec<EpochLog>,
    pub epochs_run: usize,
    pub steps: u64,
    pub n_pairs: usize,
    pub n_videos: usize,
}

/// Where the loop writes its artifacts; both are optional.
#[derive(Default)]
pub struct PretrainSinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

/// Worker cap for data preparation from `ECHOCLR_NUM_WORKERS` (default: all cores).
pub fn num_workers() -> usize {
    std::env::var("ECHOCLR_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Adam on the combined objective over `videos` (manifest indices).
///
/// Batches with fewer than two pairs are dropped. Running batch-norm
/// statistics are updated after every step. A non-finite loss aborts with the
/// offending video ids.
pub fn pretrain_loop(
    net: &mut EchoNet<f32>,
    manifest: &Manifest,
    source: &dyn VideoSource,
    videos: &[usize],
    config: &PretrainConfig,
    sinks: PretrainSinks<'_>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if config.mode == PretrainMode::EchoClr && net.reorder_head.as_ref().map(|h| h.frames) != Some(config.k) {
        return Err(Error::Config(format!(
            "echoclr needs a reorder head for K={}",
            config.k
        )));
    }
    let set = pretrain_items(manifest, videos, config.mode)?;
    let epochs = if config.mode == PretrainMode::SimClr && config.match_simclr_epochs {
        match_epochs(config.epochs, set.n_pairs.max(1), set.n_videos)
    } else {
        config.epochs
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(num_workers())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let PretrainSinks {
        mut log,
        checkpoint_dir,
    } = sinks;
    let mut adam = Adam::new(&net.store, config.learning_rate);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut order = set.items.clone();
        order.shuffle(&mut rng::stream(
            config.seed,
            &[rng::tag("pretrain-order"), epoch as u64],
        ));
        let (mut sum_nt, mut sum_ce, mut sum_all, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_pairs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = pool.install(|| {
                build_pretrain_batch(
                    source,
                    chunk,
                    config.mode,
                    config.k,
                    config.seed,
                    epoch,
                    b * config.batch_pairs,
                )
            })?;
            let (parts, grads, out) = loss_and_grads(
                net,
                &batch.clips,
                batch.targets.as_deref(),
                config.mode,
                config.tau,
                config.reorder_weight,
            )?;
            if !parts.combined.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    videos: item_video_ids(manifest, chunk),
                });
            }
            adam.step(&mut net.store, &grads);
            net.encoder.update_running(&mut net.store, &out);
            sum_nt += parts.nt_xent;
            sum_ce += parts.reorder_ce.unwrap_or(0.0);
            sum_all += parts.combined;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            nt_xent: sum_nt / denom,
            reorder_ce: (config.mode == PretrainMode::EchoClr).then_some(sum_ce / denom),
            combined: sum_all / denom,
            lr: config.learning_rate,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("<pretrain log>", e))?;
        }
        if let Some(dir) = checkpoint_dir {
            let ck = net.to_checkpoint(checkpoint_metadata(config, &entry, epochs));
            ck.save(&dir.join("latest.ckpt"))?;
        }
        history.push(entry);
    }
    if let (Some(dir), Some(last)) = (checkpoint_dir, history.last()) {
        net.to_checkpoint(checkpoint_metadata(config, last, epochs))
            .save(&dir.join("final.ckpt"))?;
    }
    Ok(PretrainOutcome {
        history,
        epochs_run: epochs,
        steps: adam.steps_taken(),
        n_pairs: set.n_pairs,
        n_videos: set.n_videos,
    })
}

fn checkpoint_metadata(config: &PretrainConfig, entry: &EpochLog, total_epochs: usize) -> serde_json::Value {
    serde_json::json!({
        "kind": "pretrain",
        "mode": config.mode,
        "epoch": entry.epoch,
        "total_epochs": total_epochs,
        "losses": entry,
        "pretrain_config": config,
        // every random draw is a pure function of (seed, epoch, item)
        "rng": {"seed": config.seed, "next_epoch": entry.epoch},
    })
}

fn item_video_ids(manifest: &Manifest, items: &[PretrainItem]) -> Vec<String> {
    items
        .iter()
        .flat_map(|it| match *it {
            PretrainItem::Single(v) => vec![v],
            PretrainItem::Pair(a, b) => vec![a, b],
        })
        .map(|v| manifest.videos[v].video_id.clone())
        .collect()
}

/// Top-1 accuracy of the reorder head on shuffled, unaugmented clips.
pub fn reorder_accuracy(
    net: &EchoNet<f32>,
    source: &dyn VideoSource,
    videos: &[usize],
    k: usize,
    clips_per_video: usize,
    seed: u64,
) -> Result<f64> {
    let mut clips = Vec::new();
    let mut targets = Vec::new();
    for (i, &v) in videos.iter().enumerate() {
        let video = source.get(v)?;
        for c in 0..clips_per_video {
            let mut r = rng::stream(seed, &[rng::tag("reorder-eval"), i as u64, c as u64]);
            let mut clip = sample_clip(&video, k, &mut r);
            minmax_normalize_in_place(&mut clip);
            let (s, rank) = shuffle_frames(&clip, &mut r);
            clips.push(s);
            targets.push(rank);
        }
    }
    if clips.is_empty() {
        return Err(Error::NoEligibleStudies(
            "no held-out clips for reorder accuracy".into(),
        ));
    }
    let mut correct = 0usize;
    for (chunk, t) in clips.chunks(64).zip(targets.chunks(64)) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let out = net.encode(&stack_clips(&refs)?, Mode::Eval)?;
        let logits = net.reorder_logits(&out.h)?;
        let c = logits.dim(1);
        for (row, &target) in logits.data().chunks(c).zip(t) {
            let arg = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0;
            correct += (arg == target) as usize;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Direct evaluation of the per-pair term, summed over the 2N ordered pairs.
    fn oracle(z: &[Vec<f64>], tau: f64) -> f64 {
        let m = z.len();
        let n = m / 2;
        let mut total = 0.0;
        for i in 0..m {
            let j = (i + n) % m;
            let num = (cosine_sim(&z[i], &z[j]) / tau).exp();
            let mut den = 0.0;
            for k in 0..m {
                if k != i {
                    den += (cosine_sim(&z[i], &z[k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / m as f64
    }

    fn random_z(r: &mut crate::rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..2 * n)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, -2.0, 3.0], &[3.0, -6.0, 9.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn closed_form_cases() {
        let single = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        assert_eq!(nt_xent_loss(&single, 0.5).unwrap(), 0.0);
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect())
            .collect();
        for tau in [0.1, 0.5, 1.0] {
            assert!((nt_xent_loss(&eye, tau).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        let uniform = vec![vec![0.0; 24]; 3];
        assert!((reorder_ce_loss(&uniform, &[0, 5, 23]).unwrap() - 24f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_equation() {
        let mut r = seeded(4);
        let z = random_z(&mut r, 4, 16);
        assert!((nt_xent_loss(&z, 0.5).unwrap() - oracle(&z, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let z = vec![vec![1.0, f64::NAN], vec![1.0, 0.0]];
        assert!(matches!(nt_xent_loss(&z, 0.5), Err(Error::NonFiniteEmbedding(0))));
        assert!(matches!(
            reorder_ce_loss(&[vec![0.0; 6]], &[6]),
            Err(Error::TargetOutOfRange { target: 6, classes: 6 })
        ));
    }

    #[test]
    fn reorder_ce_manual_and_dominant() {
        let logits = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
        let manual = |row: &[f64], t: usize| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / s).ln()
        };
        let expect = (manual(&logits[0], 1) + manual(&logits[1], 0)) / 2.0;
        assert!((reorder_ce_loss(&logits, &[1, 0]).unwrap() - expect).abs() < 1e-12);
        let dominant = vec![vec![0.0, 500.0, 0.0]];
        assert!(reorder_ce_loss(&dominant, &[1]).unwrap() < 1e-12);
        assert_eq!(reorder_ce_loss(&[vec![3.7]], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn combined_rules() {
        assert!((combined_loss(1.2, Some(0.8), PretrainMode::EchoClr, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(combined_loss(1.2, None, PretrainMode::MiSimClr, 1.0).unwrap(), 1.2);
        assert_eq!(combined_loss(1.2, Some(0.0), PretrainMode::EchoClr, 1.0).unwrap(), 1.2);
        assert!(combined_loss(1.2, Some(0.1), PretrainMode::SimClr, 1.0).is_err());
        assert!(combined_loss(1.2, None, PretrainMode::EchoClr, 1.0).is_err());
    }

    #[test]
    fn epoch_matching() {
        assert_eq!(match_epochs(300, 26, 15), 520);
        assert_eq!(match_epochs(7, 40, 40), 7);
        assert_eq!(match_epochs(10, 100, 100), 10);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let mut r = seeded(8);
        let z = random_z(&mut r, 3, 5);
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let t = Tensor::from_vec(&[6, 5], flat.clone()).unwrap();
        let (_, g) = nt_xent_with_grad(&t, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut m = flat.clone();
            m[i] -= h;
            let lp = nt_xent_with_grad(&Tensor::from_vec(&[6, 5], p).unwrap(), 0.5)
                .unwrap()
                .0;
            let lm = nt_xent_with_grad(&Tensor::from_vec(&[6, 5], m).unwrap(), 0.5)
                .unwrap()
                .0;
            assert!((g.data()[i] - (lp - lm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_row_gets_zero_gradient() {
        let t = Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let (l, g) = nt_xent_with_grad(&t, 0.5).unwrap();
        assert!(l.is_finite());
        assert_eq!(&g.data()[..2], &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn scale_invariant_and_pair_order_invariant(
            seed in any::<u64>(), n in 1usize..6, scale in 0.01f64..100.0, row in 0usize..12,
        ) {
            let mut r = seeded(seed);
            let z = random_z(&mut r, n, 7);
            let base = nt_xent_loss(&z, 0.5).unwrap();
            let mut scaled = z.clone();
            for v in &mut scaled[row % (2 * n)] {
                *v *= scale;
            }
            prop_assert!((nt_xent_loss(&scaled, 0.5).unwrap() - base).abs() < 1e-6);
            // rotate pair order: pair p -> p+1
            let mut perm = z.clone();
            for p in 0..n {
                perm[(p + 1) % n] = z[p].clone();
                perm[n + (p + 1) % n] = z[n + p].clone();
            }
            prop_assert!((nt_xent_loss(&perm, 0.5).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn per_term_lower_bound(seed in any::<u64>(), n in 1usize..6) {
            let tau = 0.5;
            let z = random_z(&mut seeded(seed), n, 4);
            let bound = -((1.0 / tau as f64).exp()
                / ((2 * n - 2) as f64 * (-1.0 / tau as f64).exp() + (1.0 / tau as f64).exp())).ln();
            prop_assert!(nt_xent_loss(&z, tau).unwrap() >= bound - 1e-12);
        }
    }
}
