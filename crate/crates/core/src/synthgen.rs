//! Synthetic echo-like video studies with known disease latents.
//!
//! Each study shares a [`LatentHeart`]: wall thickness drives the LVH label
//! and valve excursion drives the severe-AS label. Videos of one study differ
//! by translation, contrast and speckle. The valve opens quickly and closes
//! slowly, so frame order is recoverable from the clip content.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{split_by_study, Manifest, Split, StudyRecord, VideoRecord, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::video::{write_video, Video, VideoFormat};

pub const MIN_FRAMES: usize = 16;
/// Fraction of the cardiac cycle spent opening the valve.
pub const OPENING_FRACTION: f64 = 0.25;
const MAX_VALVE_ANGLE: f64 = 70.0 * PI / 180.0;
const OUTLINE_LEVEL: f64 = 232.0;
/// Content stays strictly below the masking threshold so the fan outline is the
/// dominant bright component.
const CONTENT_CEILING: f64 = 196.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentHeart {
    pub wall_thickness: f64,
    pub valve_amplitude: f64,
    pub heart_rate: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub dx: f64,
    pub dy: f64,
    pub contrast: f64,
    /// Cardiac phase at the first frame, radians; acquisitions start anywhere in the cycle.
    pub phase: f64,
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            contrast: 1.0,
            phase: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_studies: usize,
    pub videos_per_study: (usize, usize),
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub noise_level: f64,
    pub theta_lvh: f64,
    pub theta_as: f64,
    pub lvh_prevalence: f64,
    pub as_prevalence: f64,
    pub max_translation: f64,
    pub contrast_jitter: f64,
    /// Extra studies rendered with a domain shift and assigned to `external_test`.
    pub n_external_studies: usize,
    pub external_noise_level: f64,
    pub external_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_studies: 500,
            videos_per_study: (2, 4),
            frames_per_video: 64,
            height: 112,
            width: 112,
            fps: 20.0,
            noise_level: 0.2,
            theta_lvh: 0.15,
            theta_as: 0.4,
            lvh_prevalence: 0.25,
            as_prevalence: 0.25,
            max_translation: 5.0,
            contrast_jitter: 0.10,
            n_external_studies: 0,
            external_noise_level: 0.3,
            external_gain: 0.85,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames_per_video < MIN_FRAMES {
            return bad(format!(
                "frames_per_video must be at least {MIN_FRAMES}, got {}",
                self.frames_per_video
            ));
        }
        let (lo, hi) = self.videos_per_study;
        if lo < 1 || hi < lo {
            return bad(format!("videos_per_study range ({lo}, {hi}) is invalid"));
        }
        if self.height < 16 || self.width < 16 {
            return bad("frame size must be at least 16x16".into());
        }
        if !(self.fps > 0.0) || self.noise_level < 0.0 {
            return bad("fps must be positive and noise_level non-negative".into());
        }
        if !(0.05..0.30).contains(&self.theta_lvh) || !(0.0..1.0).contains(&self.theta_as) || self.theta_as == 0.0 {
            return bad("label thresholds must lie inside the latent ranges".into());
        }
        for p in [self.lvh_prevalence, self.as_prevalence] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("prevalence {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lvh_label(&self, l: &LatentHeart) -> bool {
        l.wall_thickness > self.theta_lvh
    }

    pub fn severe_as_label(&self, l: &LatentHeart) -> bool {
        l.valve_amplitude < self.theta_as
    }
}

/// Valve opening in [0, 1] at cycle position `u` in [0, 1): a short sin^2 rise
/// followed by a long cos^2 fall.
pub fn valve_waveform(u: f64) -> f64 {
    let u = u.rem_euclid(1.0);
    if u < OPENING_FRACTION {
        (0.5 * PI * u / OPENING_FRACTION).sin().powi(2)
    } else {
        (0.5 * PI * (u - OPENING_FRACTION) / (1.0 - OPENING_FRACTION))
            .cos()
            .powi(2)
    }
}

pub fn cycle_position(latents: &LatentHeart, t_seconds: f64) -> f64 {
    (latents.heart_rate * t_seconds + latents.phase / (2.0 * PI)).rem_euclid(1.0)
}

/// Draw study latents so that each label is positive with its configured prevalence.
pub fn draw_latents(config: &SynthConfig, rng: &mut Rng) -> LatentHeart {
    let lvh = rng.gen_bool(config.lvh_prevalence);
    let sas = rng.gen_bool(config.as_prevalence);
    let wall_thickness = if lvh {
        rng.gen_range(config.theta_lvh..0.30).max(config.theta_lvh + 1e-6)
    } else {
        rng.gen_range(0.05..=config.theta_lvh)
    };
    let valve_amplitude = if sas {
        rng.gen_range(0.0..config.theta_as)
    } else {
        rng.gen_range(config.theta_as..=1.0)
    };
    LatentHeart {
        wall_thickness,
        valve_amplitude,
        heart_rate: rng.gen_range(0.8..=2.0),
        phase: rng.gen_range(0.0..2.0 * PI),
    }
}

struct Geometry {
    h: f64,
    w: f64,
    apex: (f64, f64),
    fan_radius: f64,
    fan_half_angle: f64,
    outline: f64,
}

impl Geometry {
    fn new(height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        Self {
            h,
            w,
            apex: (w / 2.0, 1.0),
            fan_radius: 0.95 * h,
            fan_half_angle: 40f64.to_radians(),
            outline: (h / 112.0).max(1.0),
        }
    }

    /// Signed distance into the fan (positive inside), in pixels.
    fn fan_depth(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.apex.0, y - self.apex.1);
        let r = (dx * dx + dy * dy).sqrt();
        let ang = dx.atan2(dy).abs();
        let radial = self.fan_radius - r;
        let lateral = if dy <= 0.0 {
            -r
        } else {
            r * (self.fan_half_angle - ang).sin()
        };
        radial.min(lateral)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Render one frame at time `t_seconds`; `rng = None` disables speckle.
pub fn render_frame(
    latents: &LatentHeart,
    nuisance: &Nuisance,
    t_seconds: f64,
    height: usize,
    width: usize,
    noise_level: f64,
    gain: f64,
    mut rng: Option<&mut Rng>,
) -> Vec<u8> {
    let g = Geometry::new(height, width);
    let opening = valve_waveform(cycle_position(latents, t_seconds) + nuisance.phase / (2.0 * PI));
    let (cx, cy) = (0.5 * g.w + nuisance.dx, 0.56 * g.h + nuisance.dy);
    // the cavity contracts while the valve is open
    let (ax, by) = (0.30 * g.w, 0.22 * g.h);
    let th = latents.wall_thickness * g.h * 0.5;
    // a strong cavity squeeze is what makes frame order recoverable at 28x28
    let squeeze = 1.0 - 0.5 * opening;
    let (iax, iby) = (((ax - th) * squeeze).max(1.0), ((by - th) * squeeze).max(1.0));
    let hinge = (cx + 0.55 * ax, cy - 1.02 * by);
    let len = 0.22 * g.h;
    let angle = PI - latents.valve_amplitude * MAX_VALVE_ANGLE * opening;
    let tip = (hinge.0 + len * angle.cos(), hinge.1 - len * angle.sin());
    let half_width = (0.025 * g.h).max(1.0);
    let text_w = (0.12 * g.w).ceil();
    let text_h = (0.05 * g.h).ceil().max(2.0);

    let mut out = Vec::with_capacity(height * width);
    for yi in 0..height {
        for xi in 0..width {
            let (x, y) = (xi as f64, yi as f64);
            let depth = g.fan_depth(x, y);
            let text = (x >= 2.0 && x < 2.0 + text_w && y >= 2.0 && y < 2.0 + text_h)
                || (x >= g.w - 2.0 - text_w && x < g.w - 2.0 && y >= 2.0 && y < 2.0 + text_h);
            let v = if text {
                255.0
            } else if depth < 0.0 {
                0.0
            } else if depth < g.outline {
                OUTLINE_LEVEL * nuisance.contrast.min(1.08)
            } else {
                let (dx, dy) = (x - cx, y - cy);
                let outer = (dx / ax).powi(2) + (dy / by).powi(2);
                let inner = (dx / iax).powi(2) + (dy / iby).powi(2);
                let mut v = if outer <= 1.0 && inner > 1.0 {
                    150.0
                } else if inner <= 1.0 {
                    12.0
                } else {
                    48.0
                };
                let d = segment_distance((x, y), hinge, tip);
                if d < half_width + 1.0 {
                    let cover = (half_width + 1.0 - d).min(1.0);
                    v = v * (1.0 - cover) + 185.0 * cover;
                }
                v *= nuisance.contrast * gain;
                if let Some(r) = rng.as_deref_mut() {
                    let n: f64 = StandardNormal.sample(r);
                    v *= (1.0 + noise_level * n).max(0.0);
                }
                v.min(CONTENT_CEILING)
            };
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub struct SynthStudy {
    pub study: StudyRecord,
    pub latents: LatentHeart,
    pub videos: Vec<(VideoRecord, Video)>,
}

/// Render `n_videos` videos of one study under independent nuisances.
pub fn generate_study(
    study_id: &str,
    latents: LatentHeart,
    n_videos: usize,
    config: &SynthConfig,
    external: bool,
    rng: &mut Rng,
) -> Result<SynthStudy> {
    config.validate()?;
    let (noise, gain) = if external {
        (config.external_noise_level, config.external_gain)
    } else {
        (config.noise_level, 1.0)
    };
    let mut videos = Vec::with_capacity(n_videos);
    for j in 0..n_videos {
        let nuisance = Nuisance {
            dx: rng.gen_range(-config.max_translation..=config.max_translation),
            dy: rng.gen_range(-config.max_translation..=config.max_translation),
            contrast: 1.0 + rng.gen_range(-config.contrast_jitter..=config.contrast_jitter),
            phase: rng.gen_range(0.0..2.0 * PI),
        };
        let mut data = Vec::with_capacity(config.frames_per_video * config.height * config.width);
        for t in 0..config.frames_per_video {
            data.extend(render_frame(
                &latents,
                &nuisance,
                t as f64 / config.fps,
                config.height,
                config.width,
                noise,
                gain,
                Some(rng),
            ));
        }
        let video_id = format!("{study_id}_v{j}");
        let record = VideoRecord {
            path: format!("videos/{video_id}.raw").into(),
            video_id,
            study_id: study_id.to_string(),
            n_frames: config.frames_per_video,
            height: config.height,
            width: config.width,
            fps: config.fps,
        };
        videos.push((
            record,
            Video::new(config.frames_per_video, config.height, config.width, data)?,
        ));
    }
    let study = StudyRecord {
        study_id: study_id.to_string(),
        lvh_label: Some(config.lvh_label(&latents)),
        severe_as_label: Some(config.severe_as_label(&latents)),
        split: None,
        excluded_flow_gradient: false,
    };
    Ok(SynthStudy { study, latents, videos })
}

/// A generated dataset held in memory; `videos[i]` belongs to `manifest.videos[i]`.
pub struct SynthDataset {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
    pub latents: Vec<(String, LatentHeart)>,
}

/// Generate all studies in memory and assign train/val/internal_test splits.
/// Output is a pure function of the config regardless of thread count.
pub fn generate_in_memory(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let total = config.n_studies + config.n_external_studies;
    let studies: Vec<SynthStudy> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(config.seed, &[rng::tag("synth_study"), i as u64]);
            let latents = draw_latents(config, &mut r);
            let (lo, hi) = config.videos_per_study;
            let n = r.gen_range(lo..=hi);
            let external = i >= config.n_studies;
            let id = if external {
                format!("X{:05}", i - config.n_studies)
            } else {
                format!("S{i:05}")
            };
            generate_study(&id, latents, n, config, external, &mut r)
        })
        .collect::<Result<_>>()?;

    let internal: Vec<StudyRecord> = studies[..config.n_studies].iter().map(|s| s.study.clone()).collect();
    let mut assigned = if internal.is_empty() {
        Vec::new()
    } else {
        split_by_study(&internal, DEFAULT_FRACTIONS, config.seed)?
    };
    for s in &studies[config.n_studies..] {
        assigned.push(StudyRecord {
            split: Some(Split::ExternalTest),
            ..s.study.clone()
        });
    }
    let mut manifest = Manifest {
        studies: assigned,
        videos: Vec::new(),
        comments: vec![format!("config_sha256={}", config.sha256())],
    };
    let mut videos = Vec::new();
    let mut latents = Vec::new();
    for s in studies {
        latents.push((s.study.study_id.clone(), s.latents));
        for (rec, v) in s.videos {
            manifest.videos.push(rec);
            videos.push(v);
        }
    }
    Ok(SynthDataset {
        manifest,
        videos,
        latents,
    })
}

/// Write videos, `manifest.csv`, `latents.json` and `synth_config.json` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path, format: VideoFormat) -> Result<Manifest> {
    let mut ds = generate_in_memory(config)?;
    let video_dir = out_dir.join("videos");
    std::fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    for (rec, v) in ds.manifest.videos.iter_mut().zip(&ds.videos) {
        rec.path = format!("videos/{}.{}", rec.video_id, format.extension()).into();
        write_video(&out_dir.join(&rec.path), v, rec.fps)?;
    }
    ds.manifest.save(&out_dir.join("manifest.csv"))?;
    let latents: serde_json::Map<String, serde_json::Value> = ds
        .latents
        .iter()
        .map(|(id, l)| (id.clone(), serde_json::to_value(l).expect("latents serialize")))
        .collect();
    crate::model::write_atomic(
        &out_dir.join("latents.json"),
        &serde_json::to_vec_pretty(&serde_json::Value::Object(latents))?,
    )?;
    crate::model::write_atomic(&out_dir.join("synth_config.json"), &serde_json::to_vec_pretty(config)?)?;
    Ok(ds.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_studies: 12,
            frames_per_video: 16,
            height: 48,
            width: 48,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    fn mean_abs_diff(a: &[u8], b: &[u8]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn waveform_shape() {
        assert_eq!(valve_waveform(0.0), 0.0);
        assert!((valve_waveform(OPENING_FRACTION) - 1.0).abs() < 1e-12);
        assert!(valve_waveform(0.999_999) < 1e-9);
        assert!(valve_waveform(0.1) < valve_waveform(0.2));
        assert!(valve_waveform(0.5) > valve_waveform(0.8));
    }

    #[test]
    fn study_structure_and_labels() {
        let cfg = small();
        let l = LatentHeart {
            wall_thickness: cfg.theta_lvh + 0.01,
            valve_amplitude: 0.9,
            heart_rate: 1.0,
            phase: 0.0,
        };
        let s = generate_study("S1", l, 3, &cfg, false, &mut rng::seeded(1)).unwrap();
        assert_eq!(s.videos.len(), 3);
        assert!(s.videos.iter().all(|(r, _)| r.study_id == "S1"));
        assert_eq!((s.study.lvh_label, s.study.severe_as_label), (Some(true), Some(false)));

        let short = SynthConfig {
            frames_per_video: 15,
            ..cfg
        };
        assert!(generate_study("S1", l, 1, &short, false, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_in_memory(&small()).unwrap();
        let b = generate_in_memory(&small()).unwrap();
        assert_eq!(a.videos, b.videos);
        assert_eq!(a.manifest, b.manifest);
        let c = generate_in_memory(&SynthConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.videos, c.videos);
    }

    #[test]
    fn labels_match_latents_and_studies_have_pairs() {
        let cfg = small();
        let ds = generate_in_memory(&cfg).unwrap();
        for (id, l) in &ds.latents {
            let s = ds.manifest.study(id).unwrap();
            assert_eq!(s.lvh_label, Some(cfg.lvh_label(l)));
            assert_eq!(s.severe_as_label, Some(cfg.severe_as_label(l)));
        }
        for (_, vids) in ds.manifest.videos_by_study() {
            assert!((2..=4).contains(&vids.len()));
        }
        assert!(ds.manifest.comments[0].starts_with("config_sha256="));
    }

    #[test]
    fn opening_moves_faster_than_closing() {
        let l = LatentHeart {
            wall_thickness: 0.1,
            valve_amplitude: 1.0,
            heart_rate: 1.0,
            phase: 0.0,
        };
        let steps = 400;
        let frames: Vec<Vec<u8>> = (0..=steps)
            .map(|i| render_frame(&l, &Nuisance::none(), i as f64 / steps as f64, 112, 112, 0.0, 1.0, None))
            .collect();
        let (mut open, mut n_open, mut close, mut n_close) = (0.0, 0, 0.0, 0);
        for i in 0..steps {
            let d = mean_abs_diff(&frames[i], &frames[i + 1]);
            if (i as f64 + 0.5) / (steps as f64) < OPENING_FRACTION {
                open += d;
                n_open += 1;
            } else {
                close += d;
                n_close += 1;
            }
        }
        let ratio = (open / n_open as f64) / (close / n_close as f64);
        assert!(ratio >= 1.5, "opening/closing energy ratio {ratio}");
    }

    #[test]
    fn outline_survives_masking_and_text_is_removed() {
        let l = draw_latents(&small(), &mut rng::seeded(2));
        let f = render_frame(
            &l,
            &Nuisance::none(),
            0.3,
            112,
            112,
            0.2,
            1.0,
            Some(&mut rng::seeded(3)),
        );
        let mut masked = f.clone();
        crate::preprocess::mask_periphery_in_place(&mut masked, 112, 112);
        assert_eq!(masked[3 * 112 + 4], 0, "corner text must be masked");
        assert_eq!(f[3 * 112 + 4], 255);
        let centre = 60 * 112 + 56;
        assert_eq!(masked[centre], f[centre]);
    }

    #[test]
    fn same_study_videos_correlate_more() {
        let cfg = SynthConfig {
            n_studies: 30,
            max_translation: 0.0,
            ..small()
        };
        let ds = generate_in_memory(&cfg).unwrap();
        let by = ds.manifest.videos_by_study();
        let groups: Vec<&Vec<usize>> = by.values().collect();
        let corr = |a: &Video, b: &Video| {
            let (x, y) = (&a.data, &b.data);
            let n = x.len() as f64;
            let (mx, my) = (
                x.iter().map(|&v| v as f64).sum::<f64>() / n,
                y.iter().map(|&v| v as f64).sum::<f64>() / n,
            );
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (&p, &q) in x.iter().zip(y) {
                let (p, q) = (p as f64 - mx, q as f64 - my);
                sxy += p * q;
                sxx += p * p;
                syy += q * q;
            }
            sxy / (sxx * syy).sqrt()
        };
        let mut r = rng::seeded(9);
        let (mut same, mut diff) = (0.0, 0.0);
        for _ in 0..100 {
            let g = groups[r.gen_range(0..groups.len())];
            same += corr(&ds.videos[g[0]], &ds.videos[g[1]]);
            let h = groups[r.gen_range(0..groups.len())];
            let other = if std::ptr::eq(g, h) { groups[0] } else { h };
            diff += corr(&ds.videos[g[0]], &ds.videos[other[0]]);
        }
        assert!(same > diff, "same {same} vs different {diff}");
    }
}
