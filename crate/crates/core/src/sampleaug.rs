//! Clip sampling, augmentation and the frame-permutation codec.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::preprocess::Clip;
use crate::rng::Rng;
use crate::video::Video;

pub const MAX_PAD: usize = 8;
pub const MAX_ANGLE_DEG: f64 = 10.0;

pub fn factorial(k: usize) -> usize {
    (1..=k).product()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub order: Vec<usize>,
    pub rank: usize,
}

impl Permutation {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let rank = perm_encode(&order)?;
        Ok(Self { order, rank })
    }

    pub fn from_rank(rank: usize, k: usize) -> Result<Self> {
        Ok(Self {
            order: perm_decode(rank, k)?,
            rank,
        })
    }
}

/// Lexicographic rank of `order` (Lehmer code in the factorial number system).
pub fn perm_encode(order: &[usize]) -> Result<usize> {
    let k = order.len();
    let mut seen = vec![false; k];
    for &v in order {
        if v >= k || seen[v] {
            return Err(Error::Permutation(format!("{order:?} is not a permutation of 0..{k}")));
        }
        seen[v] = true;
    }
    let mut rank = 0;
    for i in 0..k {
        let smaller_later = order[i + 1..].iter().filter(|&&v| v < order[i]).count();
        rank += smaller_later * factorial(k - 1 - i);
    }
    Ok(rank)
}

pub fn perm_decode(rank: usize, k: usize) -> Result<Vec<usize>> {
    let total = factorial(k);
    if rank >= total {
        return Err(Error::Permutation(format!(
            "rank {rank} out of range for K={k} ({total} permutations)"
        )));
    }
    let mut pool: Vec<usize> = (0..k).collect();
    let mut rem = rank;
    let mut order = Vec::with_capacity(k);
    for i in 0..k {
        let f = factorial(k - 1 - i);
        order.push(pool.remove(rem / f));
        rem %= f;
    }
    Ok(order)
}

/// `k` consecutive frames from a uniform start, scaled to [0, 1]; short videos
/// are padded with zero frames at the end.
pub fn sample_clip(video: &Video, k: usize, rng: &mut Rng) -> Clip {
    let start = if video.n_frames > k {
        rng.gen_range(0..=video.n_frames - k)
    } else {
        0
    };
    clip_from(video, start, k)
}

/// Frames `start..start+k` scaled to [0, 1], zero-padded past the end of the video.
pub fn clip_from(video: &Video, start: usize, k: usize) -> Clip {
    let mut clip = Clip::zeros(k, video.height, video.width);
    for t in 0..k {
        let src = start + t;
        if src >= video.n_frames {
            break;
        }
        for (d, &s) in clip.frame_mut(t).iter_mut().zip(video.frame(src)) {
            *d = s as f32 / 255.0;
        }
    }
    clip
}

/// All unordered pairs `(i, j)` with `i < j`; fewer than two videos gives none.
pub fn enumerate_mi_pairs<T: Clone>(study_videos: &[T]) -> Vec<(T, T)> {
    let n = study_videos.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((study_videos[i].clone(), study_videos[j].clone()));
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub pad_x: usize,
    pub pad_y: usize,
    /// Crop offset into the padded frame, in `[0, 2 * pad]`.
    pub crop_x: usize,
    pub crop_y: usize,
    pub apply_flip: bool,
    pub apply_rotation: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            pad_x: 0,
            pad_y: 0,
            crop_x: 0,
            crop_y: 0,
            apply_flip: false,
            apply_rotation: false,
            angle_deg: 0.0,
        }
    }

    /// Net translation in pixels; content moves by `-shift`.
    pub fn shift(&self) -> (isize, isize) {
        (
            self.crop_x as isize - self.pad_x as isize,
            self.crop_y as isize - self.pad_y as isize,
        )
    }
}

pub fn draw_augment_params(rng: &mut Rng) -> AugmentParams {
    let pad_x = rng.gen_range(0..=MAX_PAD);
    let pad_y = rng.gen_range(0..=MAX_PAD);
    let crop_x = rng.gen_range(0..=2 * pad_x);
    let crop_y = rng.gen_range(0..=2 * pad_y);
    let apply_flip = rng.gen_bool(0.5);
    let apply_rotation = rng.gen_bool(0.5);
    let angle_deg = rng.gen_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG);
    AugmentParams {
        pad_x,
        pad_y,
        crop_x,
        crop_y,
        apply_flip,
        apply_rotation,
        angle_deg,
    }
}

/// Translate, flip and rotate every frame with the same parameters.
pub fn apply_augment(clip: &Clip, params: &AugmentParams) -> Clip {
    let (h, w) = (clip.height, clip.width);
    let mut out = clip.clone();
    let mut tmp = vec![0.0f32; h * w];
    let (sx, sy) = params.shift();
    let rotate = params.apply_rotation && params.angle_deg != 0.0;
    for plane in 0..clip.channels * clip.frames {
        let src = &clip.data[plane * h * w..(plane + 1) * h * w];
        // pad then crop: out(y, x) = in(y + sy, x + sx), zero outside
        for y in 0..h {
            for x in 0..w {
                let (iy, ix) = (y as isize + sy, x as isize + sx);
                let xs = if params.apply_flip { w as isize - 1 - ix } else { ix };
                tmp[y * w + x] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    src[iy as usize * w + xs as usize]
                } else {
                    0.0
                };
            }
        }
        let dst = &mut out.data[plane * h * w..(plane + 1) * h * w];
        if rotate {
            rotate_bilinear(&tmp, dst, h, w, params.angle_deg);
        } else {
            dst.copy_from_slice(&tmp);
        }
    }
    out
}

/// Rotation about the frame centre with bilinear sampling and zero fill.
fn rotate_bilinear(src: &[f32], dst: &mut [f32], h: usize, w: usize, angle_deg: f64) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map of a counter-clockwise rotation
            let xs = c * dx - s * dy + cx;
            let ys = s * dx + c * dy + cy;
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            dst[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

/// Reorder frames by a uniformly drawn permutation: output frame `i` is input
/// frame `order[i]`. Returns the permutation rank.
pub fn shuffle_frames(clip: &Clip, rng: &mut Rng) -> (Clip, usize) {
    let rank = rng.gen_range(0..factorial(clip.frames));
    let order = perm_decode(rank, clip.frames).expect("rank drawn in range");
    (permute_frames(clip, &order), rank)
}

pub fn permute_frames(clip: &Clip, order: &[usize]) -> Clip {
    let mut out = clip.clone();
    let n = clip.frame_len();
    for c in 0..clip.channels {
        let base = c * clip.frames * n;
        for (i, &src) in order.iter().enumerate() {
            out.data[base + i * n..base + (i + 1) * n]
                .copy_from_slice(&clip.data[base + src * n..base + (src + 1) * n]);
        }
    }
    out
}

pub fn invert_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}
