//! Periphery masking, resampling and intensity normalization.

use crate::error::{Error, Result};
use crate::video::Video;

/// Binarization threshold; pixels at or above it are foreground.
pub const MASK_THRESHOLD: u8 = 200;
pub const TARGET_SIZE: (usize, usize) = (112, 112);

/// Channel statistics of the Kinetics-400 training set used by torchvision video models.
pub const KINETICS_MEAN: [f32; 3] = [0.432_16, 0.394_666, 0.376_45];
pub const KINETICS_STD: [f32; 3] = [0.228_03, 0.221_45, 0.216_989];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// `frames x height x width` reals; one channel unless standardized for external weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Clip {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels: 1,
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }
}

/// Zero every pixel outside the convex hull of the largest bright component.
pub fn mask_periphery(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    mask_periphery_in_place(&mut out.data, frame.height, frame.width);
    out
}

/// In-place variant of [`mask_periphery`] over a row-major `height x width` buffer.
///
/// Foreground is `pixel >= 200`; components use 8-connectivity and are ranked
/// by pixel count (first in raster order wins ties). A frame with no
/// foreground is zeroed entirely.
pub fn mask_periphery_in_place(pixels: &mut [u8], height: usize, width: usize) {
    debug_assert_eq!(pixels.len(), height * width);
    let Some(component) = largest_component(pixels, height, width) else {
        pixels.fill(0);
        return;
    };
    // Extreme pixels per row suffice for the hull.
    let mut extremes = Vec::with_capacity(2 * height);
    for (y, span) in component.iter().enumerate() {
        if let Some((lo, hi)) = span {
            extremes.push((*lo as i64, y as i64));
            if hi != lo {
                extremes.push((*hi as i64, y as i64));
            }
        }
    }
    let hull = convex_hull(&extremes);
    for y in 0..height {
        let row = &mut pixels[y * width..(y + 1) * width];
        match hull_row_span(&hull, y as i64, width as i64) {
            Some((lo, hi)) => {
                row[..lo as usize].fill(0);
                row[hi as usize + 1..].fill(0);
            }
            None => row.fill(0),
        }
    }
}

/// Row-wise column extents of the largest 8-connected foreground component.
fn largest_component(pixels: &[u8], height: usize, width: usize) -> Option<Vec<Option<(usize, usize)>>> {
    let n = height * width;
    let mut label = vec![0u32; n];
    let mut stack = Vec::new();
    let mut best: Option<(usize, u32)> = None;
    let mut next = 0u32;
    for start in 0..n {
        if pixels[start] < MASK_THRESHOLD || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut count = 0usize;
        while let Some(p) = stack.pop() {
            count += 1;
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if pixels[q] >= MASK_THRESHOLD && label[q] == 0 {
                        label[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, next));
        }
    }
    let (_, id) = best?;
    let mut spans = vec![None; height];
    for (y, span) in spans.iter_mut().enumerate() {
        let row = &label[y * width..(y + 1) * width];
        let lo = row.iter().position(|&l| l == id);
        let hi = row.iter().rposition(|&l| l == id);
        if let (Some(lo), Some(hi)) = (lo, hi) {
            *span = Some((lo, hi));
        }
    }
    Some(spans)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of lattice points (x, y), counter-clockwise in a y-up frame,
/// without collinear vertices. Degenerate inputs return 1 or 2 points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() == 1 {
        // all points collinear collapse to their two endpoints
        return vec![pts[0], pts[pts.len() - 1]];
    }
    lower
}

fn floor_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -floor_div(-a, b)
}

/// Inclusive column range of lattice points on row `y` inside (or on) the hull.
fn hull_row_span(hull: &[(i64, i64)], y: i64, width: i64) -> Option<(i64, i64)> {
    let (mut lo, mut hi) = (0i64, width - 1);
    match hull.len() {
        0 => return None,
        1 => {
            let (px, py) = hull[0];
            if py != y {
                return None;
            }
            lo = lo.max(px);
            hi = hi.min(px);
        }
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            if y < a.1.min(b.1) || y > a.1.max(b.1) {
                return None;
            }
            if dy == 0 {
                lo = lo.max(a.0.min(b.0));
                hi = hi.min(a.0.max(b.0));
            } else {
                // x on the segment at row y must be an integer
                let num = dx * (y - a.1);
                if num % dy != 0 {
                    return None;
                }
                let x = a.0 + num / dy;
                lo = lo.max(x);
                hi = hi.min(x);
            }
        }
        _ => {
            // Hull is counter-clockwise in (x, y) coordinates: inside means
            // cross(q - p, r - p) >= 0 for every edge p -> q.
            for i in 0..hull.len() {
                let p = hull[i];
                let q = hull[(i + 1) % hull.len()];
                let (dx, dy) = (q.0 - p.0, q.1 - p.1);
                let a = dx * (y - p.1);
                // dx*(y-py) - dy*(x-px) >= 0  <=>  dy*(x-px) <= a
                if dy > 0 {
                    hi = hi.min(p.0 + floor_div(a, dy));
                } else if dy < 0 {
                    lo = lo.max(p.0 + ceil_div(a, dy));
                } else if a < 0 {
                    return None;
                }
            }
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Apply [`mask_periphery`] to every frame of a video.
pub fn mask_video(video: &mut Video) {
    let (h, w) = (video.height, video.width);
    for t in 0..video.n_frames {
        mask_periphery_in_place(video.frame_mut(t), h, w);
    }
}

/// Bilinear resampling of every frame (half-pixel centers, edge clamping).
pub fn resize_video(video: &Video, target: (usize, usize)) -> Result<Video> {
    if video.height < 8 || video.width < 8 {
        return Err(Error::Shape(format!(
            "source {}x{} smaller than 8x8",
            video.height, video.width
        )));
    }
    let (th, tw) = target;
    if (th, tw) == (video.height, video.width) {
        return Ok(video.clone());
    }
    let ys = axis_weights(video.height, th);
    let xs = axis_weights(video.width, tw);
    let mut data = Vec::with_capacity(video.n_frames * th * tw);
    for t in 0..video.n_frames {
        let f = video.frame(t);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| f[y * video.width + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Video::new(video.n_frames, th, tw, data)
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Mask every frame, then resample to `target`.
pub fn preprocess_video(video: &Video, target: (usize, usize)) -> Result<Video> {
    let mut v = video.clone();
    mask_video(&mut v);
    resize_video(&v, target)
}

/// One affine map per clip taking its minimum to 0 and maximum to 1.
/// A constant clip maps to all zeros.
pub fn minmax_normalize(clip: &Clip) -> Clip {
    let mut out = clip.clone();
    minmax_normalize_in_place(&mut out);
    out
}

pub fn minmax_normalize_in_place(clip: &mut Clip) {
    let (lo, hi) = clip
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if clip.data.is_empty() || hi <= lo {
        clip.data.fill(0.0);
        return;
    }
    let scale = 1.0 / (hi - lo);
    for v in &mut clip.data {
        *v = ((*v - lo) * scale).clamp(0.0, 1.0);
    }
}

/// Replicate a grayscale clip to three channels and standardize each channel.
/// Must run after [`minmax_normalize`].
pub fn standardize_external(clip: &Clip, means: [f32; 3], stds: [f32; 3]) -> Result<Clip> {
    if clip.channels != 1 {
        return Err(Error::Shape(format!(
            "standardize_external expects a grayscale clip, got {} channels",
            clip.channels
        )));
    }
    if let Some(s) = stds.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!("channel std must be positive, got {s}")));
    }
    let mut data = Vec::with_capacity(3 * clip.data.len());
    for c in 0..3 {
        data.extend(clip.data.iter().map(|&v| (v - means[c]) / stds[c]));
    }
    Ok(Clip {
        channels: 3,
        frames: clip.frames,
        height: clip.height,
        width: clip.width,
        data,
    })
}
