use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool_spatial, global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BnCache, Conv3d,
    Conv3dSpec, Grads, ParamStore, Scalar, Tensor,
};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Full,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// 1 for native grayscale, 3 when external RGB weights are loaded.
    pub in_channels: usize,
    /// Non-overlapping spatial average pooling applied to the raw clip.
    pub input_pool: usize,
    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub stem_padding: [usize; 3],
    pub blocks: Vec<BlockSpec>,
}

impl EncoderConfig {
    /// 18-layer residual 3D CNN: 3x7x7 stem, four stages of two basic blocks.
    pub fn full() -> Self {
        let stage = |channels, s| {
            [
                BlockSpec {
                    channels,
                    stride: [s, s, s],
                },
                BlockSpec {
                    channels,
                    stride: [1, 1, 1],
                },
            ]
        };
        let blocks = [stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)].concat();
        Self {
            variant: EncoderVariant::Full,
            in_channels: 1,
            input_pool: 1,
            stem_channels: 64,
            stem_kernel: [3, 7, 7],
            stem_stride: [1, 2, 2],
            stem_padding: [1, 3, 3],
            blocks,
        }
    }

    /// Two-block reduction for desk-scale runs and gradient checks.
    ///
    /// The clip is average-pooled 4x spatially, a strided stem brings it to
    /// 1/8 resolution, and the first block halves time and space again.
    pub fn tiny(representation_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::Tiny,
            in_channels: 1,
            input_pool: 4,
            stem_channels: 8,
            stem_kernel: [3, 3, 3],
            stem_stride: [1, 2, 2],
            stem_padding: [1, 1, 1],
            blocks: vec![
                BlockSpec {
                    channels: 16,
                    stride: [2, 2, 2],
                },
                BlockSpec {
                    channels: representation_dim,
                    stride: [1, 1, 1],
                },
            ],
        }
    }

    pub fn with_in_channels(mut self, in_channels: usize) -> Self {
        self.in_channels = in_channels;
        self
    }

    pub fn representation_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.input_pool == 0 {
            return Err(Error::Config(
                "encoder channel counts and pool factor must be positive".into(),
            ));
        }
        if self.variant == EncoderVariant::Tiny && self.blocks.len() > 4 {
            return Err(Error::Config("tiny encoder allows at most 4 residual blocks".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride.contains(&0)) {
            return Err(Error::Config("block channels and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv3d,
    bn1: BatchNorm,
    conv2: Conv3d,
    bn2: BatchNorm,
    shortcut: Option<(Conv3d, BatchNorm)>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    r1: Tensor<T>,
    bn2: BnCache<T>,
    shortcut_bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

fn conv3(in_channels: usize, out_channels: usize, stride: [usize; 3]) -> Conv3dSpec {
    Conv3dSpec {
        in_channels,
        out_channels,
        kernel: [3, 3, 3],
        stride,
        padding: [1, 1, 1],
    }
}

impl BasicBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, spec: BlockSpec, rng: &mut Rng) -> Self {
        let conv1 = Conv3d::new(
            store,
            &format!("{name}.conv1"),
            conv3(in_ch, spec.channels, spec.stride),
            rng,
        );
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), spec.channels);
        let conv2 = Conv3d::new(
            store,
            &format!("{name}.conv2"),
            conv3(spec.channels, spec.channels, [1, 1, 1]),
            rng,
        );
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), spec.channels);
        let shortcut = (in_ch != spec.channels || spec.stride != [1, 1, 1]).then(|| {
            let conv = Conv3d::new(
                store,
                &format!("{name}.downsample.conv"),
                Conv3dSpec {
                    in_channels: in_ch,
                    out_channels: spec.channels,
                    kernel: [1, 1, 1],
                    stride: spec.stride,
                    padding: [0, 0, 0],
                },
                rng,
            );
            let bn = BatchNorm::new(store, &format!("{name}.downsample.bn"), spec.channels);
            (conv, bn)
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
        let a1 = self.conv1.forward(store, &x)?;
        match mode {
            Mode::Eval => {
                let r1 = relu(&self.bn1.forward_eval(store, &a1)?);
                let a2 = self.conv2.forward(store, &r1)?;
                let mut pre = self.bn2.forward_eval(store, &a2)?;
                match &self.shortcut {
                    Some((conv, bn)) => pre.add_assign(&bn.forward_eval(store, &conv.forward(store, &x)?)?),
                    None => pre.add_assign(&x),
                }
                Ok((relu(&pre), None))
            }
            Mode::Train => {
                let (b1, bn1) = self.bn1.forward_train(store, &a1)?;
                let r1 = relu(&b1);
                let a2 = self.conv2.forward(store, &r1)?;
                let (mut pre, bn2) = self.bn2.forward_train(store, &a2)?;
                let shortcut_bn = match &self.shortcut {
                    Some((conv, bn)) => {
                        let (s, cache) = bn.forward_train(store, &conv.forward(store, &x)?)?;
                        pre.add_assign(&s);
                        Some(cache)
                    }
                    None => {
                        pre.add_assign(&x);
                        None
                    }
                };
                let out = relu(&pre);
                let cache = BlockCache {
                    x,
                    bn1,
                    r1,
                    bn2,
                    shortcut_bn,
                    out: out.clone(),
                };
                Ok((out, Some(cache)))
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BlockCache<T>,
        dout: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let dpre = relu_backward(&cache.out, dout);
        let da2 = self.bn2.backward(store, &cache.bn2, &dpre, grads)?;
        let dr1 = self
            .conv2
            .backward(store, &cache.r1, &da2, grads, true)?
            .expect("requested");
        let db1 = relu_backward(&cache.r1, &dr1);
        let da1 = self.bn1.backward(store, &cache.bn1, &db1, grads)?;
        let dx_main = self.conv1.backward(store, &cache.x, &da1, grads, need_dx)?;
        let dx_short = match (&self.shortcut, &cache.shortcut_bn) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let ds = bn.backward(store, bn_cache, &dpre, grads)?;
                conv.backward(store, &cache.x, &ds, grads, need_dx)?
            }
            _ => need_dx.then(|| dpre.clone()),
        };
        Ok(match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        })
    }

    fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BlockCache<T>) {
        self.bn1.update_running(store, &cache.bn1);
        self.bn2.update_running(store, &cache.bn2);
        if let (Some((_, bn)), Some(c)) = (&self.shortcut, &cache.shortcut_bn) {
            bn.update_running(store, c);
        }
    }
}

/// Spatiotemporal residual encoder `f`: clip batch `(B, C, T, H, W)` to `h` of shape `(B, D)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem_conv: Conv3d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    stem_input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// Pooled representation, `(B, D)`.
    pub h: Tensor<T>,
    /// Output of the last residual block, `(B, D, T', H', W')`.
    pub features: Tensor<T>,
    pub cache: Option<EncoderCache<T>>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem_conv = Conv3d::new(
            store,
            &format!("{prefix}.stem.conv"),
            Conv3dSpec {
                in_channels: config.in_channels,
                out_channels: config.stem_channels,
                kernel: config.stem_kernel,
                stride: config.stem_stride,
                padding: config.stem_padding,
            },
            rng,
        );
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem.bn"), config.stem_channels);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut in_ch = config.stem_channels;
        for (i, spec) in config.blocks.iter().enumerate() {
            blocks.push(BasicBlock::new(
                store,
                &format!("{prefix}.blocks.{i}"),
                in_ch,
                *spec,
                rng,
            ));
            in_ch = spec.channels;
        }
        Ok(Self {
            config,
            stem_conv,
            stem_bn,
            blocks,
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.config.representation_dim()
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<EncoderOutput<T>> {
        if x.ndim() != 5 || x.dim(1) != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects (B, {}, T, H, W), got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        let stem_input = avg_pool_spatial(x, self.config.input_pool)?;
        let a = self.stem_conv.forward(store, &stem_input)?;
        let (mut act, stem_cache) = match mode {
            Mode::Eval => (relu(&self.stem_bn.forward_eval(store, &a)?), None),
            Mode::Train => {
                let (b, c) = self.stem_bn.forward_train(store, &a)?;
                (relu(&b), Some(c))
            }
        };
        let stem_out = (mode == Mode::Train).then(|| act.clone());
        let mut block_caches = Vec::new();
        for block in &self.blocks {
            let (out, cache) = block.forward(store, act, mode)?;
            block_caches.extend(cache);
            act = out;
        }
        let h = global_avg_pool(&act);
        let cache = match (stem_cache, stem_out) {
            (Some(stem_bn), Some(stem_out)) => Some(EncoderCache {
                stem_input,
                stem_bn,
                stem_out,
                blocks: block_caches,
            }),
            _ => None,
        };
        Ok(EncoderOutput {
            h,
            features: act,
            cache,
        })
    }

    /// Backpropagate `dh` into parameter gradients. Input gradients are not formed.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        out: &EncoderOutput<T>,
        dh: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let cache = out
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape("encoder backward needs a train-mode forward".into()))?;
        let mut d = global_avg_pool_backward(dh, out.features.shape());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(store, bc, &d, grads, true)?.expect("requested");
        }
        let d = relu_backward(&cache.stem_out, &d);
        let da = self.stem_bn.backward(store, &cache.stem_bn, &d, grads)?;
        self.stem_conv.backward(store, &cache.stem_input, &da, grads, false)?;
        Ok(())
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, out: &EncoderOutput<T>) {
        if let Some(cache) = &out.cache {
            self.stem_bn.update_running(store, &cache.stem_bn);
            for (block, bc) in self.blocks.iter().zip(&cache.blocks) {
                block.update_running(store, bc);
            }
        }
    }
}
