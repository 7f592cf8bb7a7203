//! Encoder, projector and task heads, plus weight initialization and checkpoints.

mod checkpoint;
mod encoder;
mod heads;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use checkpoint::{write_atomic, Checkpoint, NamedTensor};
pub use encoder::{BlockSpec, Encoder, EncoderCache, EncoderConfig, EncoderOutput, EncoderVariant, Mode};
pub use heads::{reorder_classes, DiseaseHead, Projector, ProjectorCache, ReorderHead, MAX_REORDER_CLASSES};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};
use crate::rng;

pub const PROJECTOR_HIDDEN: usize = 256;
pub const PROJECTION_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    /// Clip length the reorder head is sized for; `None` builds no reorder head.
    pub reorder_frames: Option<usize>,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            projector_hidden: PROJECTOR_HIDDEN,
            projection_dim: PROJECTION_DIM,
            reorder_frames: None,
        }
    }

    pub fn full() -> Self {
        Self::new(EncoderConfig::full())
    }

    pub fn tiny(representation_dim: usize) -> Self {
        Self::new(EncoderConfig::tiny(representation_dim))
    }

    pub fn with_reorder(mut self, frames: usize) -> Self {
        self.reorder_frames = Some(frames);
        self
    }
}

/// Encoder plus every head, sharing one parameter store.
///
/// Parameter names are prefixed `encoder.`, `projector.`, `reorder_head.` and
/// `disease_head.`; only the `encoder.` group moves between pretraining and
/// fine-tuning.
#[derive(Clone, Debug)]
pub struct EchoNet<T> {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub projector: Projector,
    pub reorder_head: Option<ReorderHead>,
    pub disease_head: DiseaseHead,
    pub store: ParamStore<T>,
}

impl<T: Scalar> EchoNet<T> {
    /// Fresh model with default initialization drawn from `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::tag("model-init")]);
        let encoder = Encoder::new(&mut store, "encoder", config.encoder.clone(), &mut r)?;
        let rep = encoder.representation_dim();
        let projector = Projector::new(
            &mut store,
            "projector",
            rep,
            config.projector_hidden,
            config.projection_dim,
            &mut r,
        );
        let reorder_head = match config.reorder_frames {
            Some(k) => Some(ReorderHead::new(&mut store, "reorder_head", rep, k, &mut r)?),
            None => None,
        };
        let disease_head = DiseaseHead::new(&mut store, "disease_head", rep, &mut r);
        Ok(Self {
            config,
            encoder,
            projector,
            reorder_head,
            disease_head,
            store,
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.representation_dim()
    }

    pub fn encode(&self, clips: &Tensor<T>, mode: Mode) -> Result<EncoderOutput<T>> {
        self.encoder.forward(&self.store, clips, mode)
    }

    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.projector.forward(&self.store, h)?.0)
    }

    pub fn reorder_logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let head = self
            .reorder_head
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a reorder head".into()))?;
        head.forward(&self.store, h)
    }

    pub fn disease_logit(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.disease_head.forward(&self.store, h)
    }

    /// Names of the encoder parameters and buffers.
    pub fn encoder_names(&self) -> Vec<String> {
        self.store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint::from_store(Some(self.config.clone()), &self.store, metadata)
    }

    /// Rebuild a model from a checkpoint that carries its own config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
        let mut net = Self::random(config, 0)?;
        for t in &ck.tensors {
            net.store.set(&t.name, Checkpoint::to_tensor(t))?;
        }
        Ok(net)
    }

    pub fn cast<U: Scalar>(&self) -> EchoNet<U> {
        EchoNet {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            reorder_head: self.reorder_head.clone(),
            disease_head: self.disease_head.clone(),
            store: self.store.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Framework-default random initialization.
    Random,
    /// Externally trained video weights in checkpoint format (3-channel input).
    ExternalFile(PathBuf),
    /// Encoder weights from a self-supervised pretraining checkpoint.
    SslCheckpoint(PathBuf),
}

/// What happened while transferring weights into a fresh model.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InitReport {
    pub loaded: Vec<String>,
    /// Encoder tensors the source did not provide (left at random init).
    pub missing: Vec<String>,
    /// Source tensors with no encoder counterpart (ignored).
    pub unexpected: Vec<String>,
}

/// Build a model for fine-tuning under one of the three initializations.
///
/// Heads are always freshly initialized from `seed`. External weights force a
/// 3-channel encoder input.
pub fn init_weights(mut config: ModelConfig, mode: &InitMode, seed: u64) -> Result<(EchoNet<f32>, InitReport)> {
    match mode {
        InitMode::Random => Ok((EchoNet::random(config, seed)?, InitReport::default())),
        InitMode::SslCheckpoint(path) => {
            let ck = Checkpoint::load(path)?;
            let mut net = EchoNet::random(config, seed)?;
            let report = transfer_encoder(&mut net, &ck, false)?;
            Ok((net, report))
        }
        InitMode::ExternalFile(path) => {
            config.encoder.in_channels = 3;
            let ck = Checkpoint::load(path)?;
            let mut net = EchoNet::random(config, seed)?;
            let report = transfer_encoder(&mut net, &ck, true)?;
            Ok((net, report))
        }
    }
}

/// Copy `encoder.*` tensors from `ck` into `net`.
///
/// Any shape mismatch is a hard error listing every offending layer. With
/// `allow_missing`, encoder tensors absent from the source are reported instead
/// of rejected; torchvision-style names are translated first.
pub fn transfer_encoder<T: Scalar>(net: &mut EchoNet<T>, ck: &Checkpoint, allow_missing: bool) -> Result<InitReport> {
    let mut report = InitReport::default();
    let mut mismatched = Vec::new();
    let mut provided = std::collections::HashSet::new();
    for t in &ck.tensors {
        let name = if t.name.starts_with("encoder.") {
            Some(t.name.clone())
        } else {
            torchvision_to_encoder_name(&t.name)
        };
        let Some(name) = name else {
            report.unexpected.push(t.name.clone());
            continue;
        };
        let Some(id) = net.store.find(&name) else {
            report.unexpected.push(t.name.clone());
            continue;
        };
        let target_shape = net.store.get(id).shape().to_vec();
        let compatible = t.shape == target_shape
            || (t.data.len() == target_shape.iter().product::<usize>() && t.shape.first() == target_shape.first());
        if !compatible {
            mismatched.push(format!("{name}: expected {target_shape:?}, found {:?}", t.shape));
            continue;
        }
        let value = Tensor::from_vec(&target_shape, t.data.iter().map(|&v| T::of(v as f64)).collect())?;
        *net.store.get_mut(id) = value;
        provided.insert(name.clone());
        report.loaded.push(name);
    }
    for name in net.encoder_names() {
        if !provided.contains(&name) {
            if allow_missing {
                report.missing.push(name);
            } else {
                mismatched.push(format!("{name}: missing from checkpoint"));
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::EncoderMismatch(mismatched));
    }
    Ok(report)
}

/// Translate torchvision `r3d_18` state-dict keys to encoder parameter names.
pub fn torchvision_to_encoder_name(name: &str) -> Option<String> {
    let bn_field = |f: &str| matches!(f, "weight" | "bias" | "running_mean" | "running_var").then(|| f.to_string());
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["stem", "0", "weight"] => Some("encoder.stem.conv.weight".into()),
        ["stem", "1", f] => bn_field(f).map(|f| format!("encoder.stem.bn.{f}")),
        [layer, block, rest @ ..] if layer.starts_with("layer") => {
            let stage: usize = layer.strip_prefix("layer")?.parse().ok()?;
            let block: usize = block.parse().ok()?;
            if !(1..=4).contains(&stage) || block > 1 {
                return None;
            }
            let idx = 2 * (stage - 1) + block;
            let tail = match rest {
                ["conv1", "0", "weight"] => "conv1.weight".to_string(),
                ["conv1", "1", f] => format!("bn1.{}", bn_field(f)?),
                ["conv2", "0", "weight"] => "conv2.weight".to_string(),
                ["conv2", "1", f] => format!("bn2.{}", bn_field(f)?),
                ["downsample", "0", "weight"] => "downsample.conv.weight".to_string(),
                ["downsample", "1", f] => format!("downsample.bn.{}", bn_field(f)?),
                _ => return None,
            };
            Some(format!("encoder.blocks.{idx}.{tail}"))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_batch(b: usize, k: usize, side: usize) -> Tensor<f32> {
        let n = b * k * side * side;
        Tensor::from_vec(
            &[b, 1, k, side, side],
            (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_encoder_emits_512_dims() {
        let net = EchoNet::<f32>::random(ModelConfig::full(), 1).unwrap();
        let out = net.encode(&clip_batch(2, 4, 112), Mode::Eval).unwrap();
        assert_eq!(out.h.shape(), &[2, 512]);
        assert_eq!(net.project(&out.h).unwrap().shape(), &[2, 128]);
        assert_eq!(net.disease_logit(&out.h).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn tiny_encoder_shapes_and_determinism() {
        let net = EchoNet::<f32>::random(ModelConfig::tiny(32).with_reorder(4), 1).unwrap();
        let x = clip_batch(3, 4, 112);
        let a = net.encode(&x, Mode::Eval).unwrap();
        let b = net.encode(&x, Mode::Eval).unwrap();
        assert_eq!(a.h.shape(), &[3, 32]);
        assert_eq!(a.h, b.h);
        assert_eq!(net.reorder_logits(&a.h).unwrap().shape(), &[3, 24]);
    }

    #[test]
    fn reorder_head_sizes() {
        for (k, classes) in [(1, 1), (3, 6), (4, 24), (7, 5040)] {
            assert_eq!(reorder_classes(k).unwrap(), classes);
        }
        assert!(matches!(reorder_classes(8), Err(Error::FactorialHeadTooLarge { k: 8 })));
    }

    #[test]
    fn zero_projector_weights_give_zero_output() {
        let mut net = EchoNet::<f64>::random(ModelConfig::tiny(8), 3).unwrap();
        for e in net.store.entries_mut() {
            if e.name.starts_with("projector.") {
                e.value.data_mut().fill(0.0);
            }
        }
        let h = Tensor::full(&[2, 8], 0.7);
        assert!(net.project(&h).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disease_logit_scales_linearly_with_head_weights() {
        let mut net = EchoNet::<f64>::random(ModelConfig::tiny(8), 3).unwrap();
        let w = net.disease_head.fc.weight;
        let b = net.disease_head.fc.bias;
        net.store.get_mut(b).data_mut().fill(0.0);
        let h = Tensor::from_vec(&[1, 8], (0..8).map(|i| i as f64 * 0.1 + 0.05).collect()).unwrap();
        let base = net.disease_logit(&h).unwrap().data()[0];
        for e in net.store.get_mut(w).data_mut() {
            *e *= 3.0;
        }
        let scaled = net.disease_logit(&h).unwrap().data()[0];
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn different_seeds_give_different_first_layer() {
        let a = EchoNet::<f32>::random(ModelConfig::tiny(16), 1).unwrap();
        let b = EchoNet::<f32>::random(ModelConfig::tiny(16), 2).unwrap();
        let id = a.store.find("encoder.stem.conv.weight").unwrap();
        assert_ne!(a.store.get(id), b.store.get(id));
    }

    #[test]
    fn ssl_transfer_reproduces_encoder_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ssl.ckpt");
        let pre = EchoNet::<f32>::random(ModelConfig::tiny(16).with_reorder(4), 11).unwrap();
        pre.to_checkpoint(serde_json::json!({})).save(&path).unwrap();
        let (fine, report) = init_weights(ModelConfig::tiny(16), &InitMode::SslCheckpoint(path), 99).unwrap();
        assert!(report.missing.is_empty());
        assert!(fine.reorder_head.is_none());
        let x = clip_batch(2, 4, 112);
        assert_eq!(
            pre.encode(&x, Mode::Eval).unwrap().h,
            fine.encode(&x, Mode::Eval).unwrap().h
        );
    }

    #[test]
    fn wrong_representation_dim_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.ckpt");
        let other = EchoNet::<f32>::random(ModelConfig::new(EncoderConfig::tiny(16).with_in_channels(3)), 1).unwrap();
        other.to_checkpoint(serde_json::json!({})).save(&path).unwrap();
        let err = init_weights(ModelConfig::tiny(32), &InitMode::ExternalFile(path), 1).unwrap_err();
        match err {
            Error::EncoderMismatch(layers) => assert!(layers.iter().any(|l| l.contains("blocks.1"))),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn torchvision_names_map_onto_encoder() {
        assert_eq!(
            torchvision_to_encoder_name("stem.0.weight").as_deref(),
            Some("encoder.stem.conv.weight")
        );
        assert_eq!(
            torchvision_to_encoder_name("layer3.1.conv2.1.running_var").as_deref(),
            Some("encoder.blocks.5.bn2.running_var")
        );
        assert_eq!(
            torchvision_to_encoder_name("layer2.0.downsample.0.weight").as_deref(),
            Some("encoder.blocks.2.downsample.conv.weight")
        );
        assert_eq!(torchvision_to_encoder_name("fc.weight"), None);
        assert_eq!(torchvision_to_encoder_name("stem.1.num_batches_tracked"), None);
    }
}
