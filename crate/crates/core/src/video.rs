//! 8-bit grayscale video container and its two on-disk formats.
//!
//! * Raw tensor: `<name>.raw` holds little-endian u8 frames in C order
//!   (frame, row, column) and `<name>.json` holds
//!   `{"n_frames": .., "height": .., "width": .., "dtype": "u8"}`.
//! * AVI: RIFF/AVI 1.0 with uncompressed 8-bit frames, either paletted DIB
//!   (`biCompression = 0`, bottom-up rows padded to 4 bytes) or `Y800`/`GREY`
//!   FourCC (top-down, unpadded). Compressed codecs are rejected.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// `n_frames * height * width` intensities.
    pub data: Vec<u8>,
}

impl Video {
    pub fn new(n_frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n_frames * height * width {
            return Err(Error::VideoFormat(format!(
                "{n_frames}x{height}x{width} video needs {} bytes, got {}",
                n_frames * height * width,
                data.len()
            )));
        }
        Ok(Self {
            n_frames,
            height,
            width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }
}

/// Random access to videos by manifest index.
pub trait VideoSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Cow<'_, Video>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VideoSource for [Video] {
    fn len(&self) -> usize {
        <[Video]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Cow<'_, Video>> {
        <[Video]>::get(self, index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::VideoFormat(format!("no video at index {index}")))
    }
}

impl VideoSource for Vec<Video> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, Video>> {
        VideoSource::get(self.as_slice(), index)
    }
}

/// Videos read from disk on every access.
pub struct DiskVideos {
    pub paths: Vec<PathBuf>,
}

impl VideoSource for DiskVideos {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, Video>> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| Error::VideoFormat(format!("no video at index {index}")))?;
        read_video(path).map(Cow::Owned)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoFormat {
    Raw,
    Avi,
}

impl VideoFormat {
    pub fn extension(self) -> &'static str {
        match self {
            VideoFormat::Raw => "raw",
            VideoFormat::Avi => "avi",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    n_frames: usize,
    height: usize,
    width: usize,
    dtype: String,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn write_raw(path: &Path, video: &Video) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &video.data).map_err(|e| Error::io(path, e))?;
    let sidecar = RawSidecar {
        n_frames: video.n_frames,
        height: video.height,
        width: video.width,
        dtype: "u8".into(),
    };
    let json = sidecar_path(path);
    fs::write(&json, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&json, e))
}

pub fn read_raw(path: &Path) -> Result<Video> {
    let json = sidecar_path(path);
    let sidecar: RawSidecar = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if sidecar.dtype != "u8" {
        return Err(Error::VideoFormat(format!("unsupported raw dtype {}", sidecar.dtype)));
    }
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    Video::new(sidecar.n_frames, sidecar.height, sidecar.width, data)
}

/// Read either format, chosen by file extension (`.avi` or anything else as raw).
pub fn read_video(path: &Path) -> Result<Video> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("avi") => read_avi(path),
        _ => read_raw(path),
    }
}

pub fn write_video(path: &Path, video: &Video, fps: f64) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("avi") => write_avi(path, video, fps),
        _ => write_raw(path, video),
    }
}

fn chunk(id: &[u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len() + 1);
    out.extend_from_slice(id);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    if payload.len() % 2 == 1 {
        out.push(0);
    }
    out
}

fn list(kind: &[u8; 4], parts: &[Vec<u8>]) -> Vec<u8> {
    let mut payload = kind.to_vec();
    for p in parts {
        payload.extend_from_slice(p);
    }
    chunk(b"LIST", &payload)
}

fn le32(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

/// Encode as an uncompressed paletted 8-bit AVI.
pub fn encode_avi(video: &Video, fps: f64) -> Vec<u8> {
    let (w, h, n) = (video.width as u32, video.height as u32, video.n_frames as u32);
    let stride = (video.width + 3) / 4 * 4;
    let frame_bytes = (stride * video.height) as u32;
    let micro = (1e6 / fps.max(1e-3)).round() as u32;

    let mut avih = Vec::new();
    for v in [
        micro,
        frame_bytes * fps.ceil() as u32,
        0,
        0x10,
        n,
        0,
        1,
        frame_bytes,
        w,
        h,
        0,
        0,
        0,
        0,
    ] {
        avih.extend_from_slice(&le32(v));
    }
    let mut strh = Vec::new();
    strh.extend_from_slice(b"vids");
    strh.extend_from_slice(&[0, 0, 0, 0]);
    strh.extend_from_slice(&le32(0)); // flags
    strh.extend_from_slice(&[0, 0, 0, 0]); // priority, language
    strh.extend_from_slice(&le32(0)); // initial frames
    strh.extend_from_slice(&le32(1000)); // scale
    strh.extend_from_slice(&le32((fps * 1000.0).round() as u32)); // rate
    strh.extend_from_slice(&le32(0)); // start
    strh.extend_from_slice(&le32(n)); // length
    strh.extend_from_slice(&le32(frame_bytes)); // suggested buffer
    strh.extend_from_slice(&le32(u32::MAX)); // quality
    strh.extend_from_slice(&le32(0)); // sample size
    strh.extend_from_slice(&[0u8; 8]); // frame rect
    let mut strf = Vec::new();
    strf.extend_from_slice(&le32(40));
    strf.extend_from_slice(&(w as i32).to_le_bytes());
    strf.extend_from_slice(&(h as i32).to_le_bytes());
    strf.extend_from_slice(&1u16.to_le_bytes());
    strf.extend_from_slice(&8u16.to_le_bytes());
    strf.extend_from_slice(&le32(0)); // BI_RGB
    strf.extend_from_slice(&le32(frame_bytes));
    strf.extend_from_slice(&le32(0));
    strf.extend_from_slice(&le32(0));
    strf.extend_from_slice(&le32(256));
    strf.extend_from_slice(&le32(0));
    for i in 0..=255u8 {
        strf.extend_from_slice(&[i, i, i, 0]);
    }
    let strl = list(b"strl", &[chunk(b"strh", &strh), chunk(b"strf", &strf)]);
    let hdrl = list(b"hdrl", &[chunk(b"avih", &avih), strl]);

    let mut frames = Vec::with_capacity(video.n_frames);
    let mut row = vec![0u8; stride];
    for t in 0..video.n_frames {
        let f = video.frame(t);
        let mut payload = Vec::with_capacity(frame_bytes as usize);
        for y in (0..video.height).rev() {
            row[..video.width].copy_from_slice(&f[y * video.width..(y + 1) * video.width]);
            payload.extend_from_slice(&row);
        }
        frames.push(chunk(b"00db", &payload));
    }
    let movi = list(b"movi", &frames);

    let mut body = b"AVI ".to_vec();
    body.extend_from_slice(&hdrl);
    body.extend_from_slice(&movi);
    chunk(b"RIFF", &body)
}

pub fn write_avi(path: &Path, video: &Video, fps: f64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_avi(video, fps)).map_err(|e| Error::io(path, e))
}

pub fn read_avi(path: &Path) -> Result<Video> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_avi(&bytes)
}

struct Chunk<'a> {
    id: [u8; 4],
    data: &'a [u8],
}

fn chunks(mut buf: &[u8]) -> Result<Vec<Chunk<'_>>> {
    let mut out = Vec::new();
    while buf.len() >= 8 {
        let id: [u8; 4] = buf[..4].try_into().expect("4 bytes");
        let len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        if 8 + len > buf.len() {
            return Err(Error::VideoFormat(format!(
                "chunk {} overruns file",
                String::from_utf8_lossy(&id)
            )));
        }
        out.push(Chunk {
            id,
            data: &buf[8..8 + len],
        });
        let advance = (8 + len + (len & 1)).min(buf.len());
        buf = &buf[advance..];
    }
    Ok(out)
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::VideoFormat("truncated header".into()))
}

pub fn decode_avi(bytes: &[u8]) -> Result<Video> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"AVI " {
        return Err(Error::VideoFormat("not a RIFF AVI file".into()));
    }
    let top = chunks(&bytes[12..])?;
    let mut format = None;
    let mut frames: Vec<&[u8]> = Vec::new();
    for c in &top {
        if &c.id != b"LIST" || c.data.len() < 4 {
            continue;
        }
        match &c.data[..4] {
            b"hdrl" => {
                for s in chunks(&c.data[4..])? {
                    if &s.id == b"LIST" && s.data.starts_with(b"strl") {
                        for f in chunks(&s.data[4..])? {
                            if &f.id == b"strf" && format.is_none() {
                                format = Some(f.data);
                            }
                        }
                    }
                }
            }
            b"movi" => {
                for f in chunks(&c.data[4..])? {
                    if &f.id[2..] == b"db" || &f.id[2..] == b"dc" {
                        frames.push(f.data);
                    } else if &f.id == b"LIST" && f.data.starts_with(b"rec ") {
                        for g in chunks(&f.data[4..])? {
                            if &g.id[2..] == b"db" || &g.id[2..] == b"dc" {
                                frames.push(g.data);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let strf = format.ok_or_else(|| Error::VideoFormat("missing video stream format".into()))?;
    let width = u32_at(strf, 4)? as i32;
    let height = u32_at(strf, 8)? as i32;
    let bits = strf
        .get(14..16)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::VideoFormat("truncated bitmap header".into()))?;
    let compression = strf
        .get(16..20)
        .ok_or_else(|| Error::VideoFormat("truncated bitmap header".into()))?;
    if bits != 8 {
        return Err(Error::VideoFormat(format!("unsupported bit depth {bits}")));
    }
    let (w, h_abs) = (width.unsigned_abs() as usize, height.unsigned_abs() as usize);
    let (stride, bottom_up) = match compression {
        [0, 0, 0, 0] => ((w + 3) / 4 * 4, height > 0),
        b"Y800" | b"GREY" | b"Y8  " => (w, false),
        other => {
            return Err(Error::VideoFormat(format!(
                "compressed codec {} not supported",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let palette: Vec<u8> = if compression == [0, 0, 0, 0] {
        let size = u32_at(strf, 0)? as usize;
        let used = match u32_at(strf, 32)? {
            0 => 256,
            n => n as usize,
        };
        (0..256)
            .map(|i| {
                if i < used {
                    strf.get(size + 4 * i).copied().unwrap_or(i as u8)
                } else {
                    i as u8
                }
            })
            .collect()
    } else {
        (0..=255).collect()
    };
    let mut data = Vec::with_capacity(frames.len() * w * h_abs);
    for f in &frames {
        if f.len() < stride * h_abs {
            return Err(Error::VideoFormat("frame chunk shorter than frame size".into()));
        }
        for y in 0..h_abs {
            let src_row = if bottom_up { h_abs - 1 - y } else { y };
            data.extend(
                f[src_row * stride..src_row * stride + w]
                    .iter()
                    .map(|&v| palette[v as usize]),
            );
        }
    }
    Video::new(frames.len(), h_abs, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, h: usize, w: usize) -> Video {
        let data = (0..n * h * w).map(|i| (i * 7 % 251) as u8).collect();
        Video::new(n, h, w, data).unwrap()
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        let v = ramp(3, 5, 7);
        write_raw(&p, &v).unwrap();
        assert_eq!(read_video(&p).unwrap(), v);
        let side: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(
            side,
            serde_json::json!({"n_frames": 3, "height": 5, "width": 7, "dtype": "u8"})
        );
    }

    #[test]
    fn avi_round_trip_with_row_padding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.avi");
        let v = ramp(4, 6, 10);
        write_avi(&p, &v, 30.0).unwrap();
        assert_eq!(read_video(&p).unwrap(), v);
    }

    #[test]
    fn rejects_non_avi() {
        assert!(decode_avi(b"RIFF\0\0\0\0WAVEfmt ").is_err());
    }
}
