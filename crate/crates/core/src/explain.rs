//! Grad-CAM saliency on the last residual block, reduced over time and
//! rendered over the first frame.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{write_atomic, EchoNet, Mode};
use crate::nn::Tensor;
use crate::preprocess::{minmax_normalize_in_place, standardize_external, KINETICS_MEAN, KINETICS_STD};
use crate::sampleaug::clip_from;
use crate::video::Video;

pub const CAM_FRAMES: usize = 32;
pub const OVERLAY_ALPHA: f32 = 0.4;
pub const SOURCE_LAYER: &str = "encoder.blocks.last";

/// Nonnegative saliency, stored time-major: index `(t * height + y) * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source_layer: String,
}

impl SaliencyVolume {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * height * width || frames == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "saliency volume {frames}x{height}x{width} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
            source_layer: SOURCE_LAYER.into(),
        })
    }

    /// `(height, width, time)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.frames)
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> f32 {
        self.values[(t * self.height + y) * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Grad-CAM for the disease logit of one clip `(1, C, T, H, W)`.
///
/// The disease head is linear on globally pooled features, so the gradient of
/// the logit with respect to every position of channel `c` equals `w_c / N`.
/// The channel weights are therefore exact without a backward pass.
pub fn gradcam_volume(net: &EchoNet<f32>, clip: &Tensor<f32>) -> Result<SaliencyVolume> {
    if clip.ndim() != 5 || clip.dim(0) != 1 {
        return Err(Error::Shape(format!(
            "Grad-CAM target must be a single logit; got input {:?}",
            clip.shape()
        )));
    }
    let out = net.encode(clip, Mode::Eval)?;
    let a = &out.features;
    let (channels, t, h, w) = (a.dim(1), a.dim(2), a.dim(3), a.dim(4));
    let weight = net.store.get(net.disease_head.fc.weight).data();
    if weight.len() != channels {
        return Err(Error::Shape(format!(
            "disease head has {} inputs for {channels} channels",
            weight.len()
        )));
    }
    let n = (t * h * w) as f32;
    let vol = t * h * w;
    let mut cam = vec![0.0f32; vol];
    for (c, &wc) in weight.iter().enumerate() {
        let alpha = wc / n;
        for (dst, &v) in cam.iter_mut().zip(&a.data()[c * vol..(c + 1) * vol]) {
            *dst += alpha * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    SaliencyVolume::new(t, h, w, cam)
}

/// First `CAM_FRAMES` frames of a video, zero-padded, as one model input.
pub fn cam_input(video: &Video, standardize: bool) -> Result<Tensor<f32>> {
    let mut clip = clip_from(video, 0, CAM_FRAMES);
    minmax_normalize_in_place(&mut clip);
    if standardize {
        clip = standardize_external(&clip, KINETICS_MEAN, KINETICS_STD)?;
    }
    Tensor::from_vec(&[1, clip.channels, clip.frames, clip.height, clip.width], clip.data)
}

/// Source coordinate for output index `i` under align-corners sampling.
fn axis_map(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Trilinear resampling to `(height, width, frames)`, corners aligned.
pub fn upsample_volume(volume: &SaliencyVolume, target: (usize, usize, usize)) -> Result<SaliencyVolume> {
    let (th, tw, tt) = target;
    let (h, w, t) = volume.shape();
    let zs: Vec<_> = (0..tt).map(|i| axis_map(i, t, tt)).collect();
    let ys: Vec<_> = (0..th).map(|i| axis_map(i, h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|i| axis_map(i, w, tw)).collect();
    let mut out = Vec::with_capacity(tt * th * tw);
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let lerp_x = |z, y| volume.at(z, y, x0) * (1.0 - fx) + volume.at(z, y, x1) * fx;
                let lerp_y = |z| lerp_x(z, y0) * (1.0 - fy) + lerp_x(z, y1) * fy;
                out.push(lerp_y(z0) * (1.0 - fz) + lerp_y(z1) * fz);
            }
        }
    }
    let mut v = SaliencyVolume::new(tt, th, tw, out)?;
    v.source_layer = volume.source_layer.clone();
    Ok(v)
}

/// Pixelwise maximum over time.
pub fn temporal_max(volume: &SaliencyVolume) -> Heatmap {
    let plane = volume.height * volume.width;
    let mut values = volume.values[..plane].to_vec();
    for t in 1..volume.frames {
        for (m, &v) in values.iter_mut().zip(&volume.values[t * plane..(t + 1) * plane]) {
            *m = m.max(v);
        }
    }
    Heatmap {
        height: volume.height,
        width: volume.width,
        values,
    }
}

const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Piecewise-linear viridis, `s` in [0, 1].
pub fn viridis(s: f32) -> [f32; 3] {
    let pos = s.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f32;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * f)
}

/// Heatmap scaled to [0, 1]; a flat map becomes all zeros.
pub fn normalize_heatmap(heatmap: &Heatmap) -> Vec<f32> {
    let lo = heatmap.values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = heatmap.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; heatmap.values.len()];
    }
    heatmap.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Blend the colormapped heatmap over a grayscale frame. Each pixel's opacity
/// is `alpha` times its normalized saliency, so zero saliency leaves the frame.
pub fn render_overlay(heatmap: &Heatmap, frame: &[u8], alpha: f32) -> Result<image::RgbImage> {
    if frame.len() != heatmap.height * heatmap.width {
        return Err(Error::Shape(format!(
            "frame has {} pixels, heatmap is {}x{}",
            frame.len(),
            heatmap.height,
            heatmap.width
        )));
    }
    let s = normalize_heatmap(heatmap);
    let mut img = image::RgbImage::new(heatmap.width as u32, heatmap.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let gray = frame[i] as f32;
        let a = alpha * s[i];
        let c = viridis(s[i]);
        *px = image::Rgb(c.map(|ck| (gray * (1.0 - a) + ck * a).round().clamp(0.0, 255.0) as u8));
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// The `k` largest heatmap entries, descending; ties keep raster order.
pub fn top_k(heatmap: &Heatmap, k: usize) -> Vec<Hotspot> {
    let mut idx: Vec<usize> = (0..heatmap.values.len()).collect();
    idx.sort_by(|&a, &b| heatmap.values[b].total_cmp(&heatmap.values[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| Hotspot {
            row: i / heatmap.width,
            col: i % heatmap.width,
            value: heatmap.values[i],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamSidecar {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub byte_order: String,
    pub source_layer: String,
    pub volume_shape: [usize; 3],
    pub max: f32,
    pub top_k: Vec<Hotspot>,
}

#[derive(Clone, Debug)]
pub struct CamPaths {
    pub png: PathBuf,
    pub raw: PathBuf,
    pub json: PathBuf,
}

fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(bytes)
}

/// Full pipeline for one video: Grad-CAM, upsample to the input grid, temporal
/// max, overlay on frame 0. Writes `<id>_cam.png`, `<id>_cam.raw` (row-major
/// little-endian f32 heatmap) and `<id>_cam.json`.
pub fn explain_video(
    net: &EchoNet<f32>,
    video: &Video,
    video_id: &str,
    standardize: bool,
    out_dir: &Path,
    k: usize,
) -> Result<CamPaths> {
    let x = cam_input(video, standardize)?;
    let vol = gradcam_volume(net, &x)?;
    let up = upsample_volume(&vol, (video.height, video.width, CAM_FRAMES))?;
    let heat = temporal_max(&up);
    let img = render_overlay(&heat, video.frame(0), OVERLAY_ALPHA)?;
    let paths = CamPaths {
        png: out_dir.join(format!("{video_id}_cam.png")),
        raw: out_dir.join(format!("{video_id}_cam.raw")),
        json: out_dir.join(format!("{video_id}_cam.json")),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&paths.png, &encode_png(&img)?)?;
    let raw: Vec<u8> = heat.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&paths.raw, &raw)?;
    let sidecar = CamSidecar {
        video_id: video_id.into(),
        height: heat.height,
        width: heat.width,
        dtype: "float32".into(),
        byte_order: "little".into(),
        source_layer: vol.source_layer.clone(),
        volume_shape: [vol.height, vol.width, vol.frames],
        max: heat.values.iter().copied().fold(0.0, f32::max),
        top_k: top_k(&heat, k),
    };
    write_atomic(&paths.json, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(paths)
}
