//! `GFD1` clip container.
//!
//! All values little-endian. Header: magic, version `u32`, clip count `u32`.
//! Per clip: `N`, `H`, `W` as `u32`, trajectory kind `u8`, seed `u64`, then
//! `N` frames of rgb, depth, points, 3×4 pose and 6 intrinsics, all `f32`.

use std::fs;
use std::path::Path;

use super::camera::{CameraPose, Intrinsics};
use super::render::{RenderedFrame, VideoClip};
use super::trajectory::TrajectoryKind;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"GFD1";
pub const DATASET_VERSION: u32 = 1;
/// On-disk stand-in for infinite sky depth.
pub const SKY_DEPTH: f32 = 3.4e38;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_dataset(clips: &[VideoClip]) -> Result<Vec<u8>> {
    if clips.is_empty() {
        return Err(Error::invalid("dataset needs at least one clip"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, clips.len())?;
    for (ci, clip) in clips.iter().enumerate() {
        if clip.frames.len() < 2 {
            return Err(Error::invalid(format!("clip {ci} has fewer than 2 frames")));
        }
        let k = clip.intrinsics();
        if clip.frames.iter().any(|f| f.intrinsics != k) {
            return Err(Error::invalid(format!("clip {ci} mixes intrinsics")));
        }
        put_u32(&mut out, clip.frames.len())?;
        put_u32(&mut out, k.height)?;
        put_u32(&mut out, k.width)?;
        out.push(clip.trajectory_kind.code());
        out.extend_from_slice(&clip.seed.to_le_bytes());
        let px = k.height * k.width;
        for f in &clip.frames {
            if f.rgb.len() != 3 * px || f.depth.len() != px || f.point_map.len() != 3 * px {
                return Err(Error::invalid(format!("clip {ci} frame planes do not match {}x{}", k.height, k.width)));
            }
            put_f32s(&mut out, f.rgb.iter().copied());
            put_f32s(&mut out, f.depth.iter().map(|&d| if d.is_finite() { d } else { SKY_DEPTH }));
            put_f32s(&mut out, f.point_map.iter().copied());
            put_f32s(&mut out, f.pose.to_rows().map(|v| v as f32));
            put_f32s(
                &mut out,
                [k.fx as f32, k.fy as f32, k.cx as f32, k.cy as f32, k.width as f32, k.height as f32],
            );
        }
    }
    Ok(out)
}

pub fn write_dataset(clips: &[VideoClip], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(clips)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<VideoClip>> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected GFD1")));
    }
    let version = c.u32("version")?;
    if version != DATASET_VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_clips = c.u32("clip count")?;
    let mut clips = Vec::with_capacity(n_clips.min(4096));
    for ci in 0..n_clips {
        let n = c.u32("frame count")?;
        let h = c.u32("height")?;
        let w = c.u32("width")?;
        let code = c.take(1, "trajectory kind")?[0];
        let kind = TrajectoryKind::from_code(code)
            .ok_or_else(|| Error::Format(format!("clip {ci}: unknown trajectory code {code}")))?;
        let seed = u64::from_le_bytes(c.take(8, "seed")?.try_into().unwrap());
        if n < 2 || h == 0 || w == 0 {
            return Err(Error::Format(format!("clip {ci}: invalid dimensions N={n} H={h} W={w}")));
        }
        let px = h * w;
        let mut frames = Vec::with_capacity(n);
        for fi in 0..n {
            let what = format!("clip {ci} frame {fi}");
            let rgb = c.f32s(3 * px, &what)?;
            let depth = c
                .f32s(px, &what)?
                .into_iter()
                .map(|d| if d >= SKY_DEPTH { f32::INFINITY } else { d })
                .collect();
            let point_map = c.f32s(3 * px, &what)?;
            let rows: [f64; 12] = c.f32s(12, &what)?.iter().map(|&v| v as f64).collect::<Vec<_>>().try_into().unwrap();
            let kv = c.f32s(6, &what)?;
            if kv[4] as usize != w || kv[5] as usize != h {
                return Err(Error::Format(format!(
                    "{what}: intrinsics say {}x{}, header says {w}x{h}",
                    kv[4], kv[5]
                )));
            }
            let intrinsics = Intrinsics::new(kv[0] as f64, kv[1] as f64, kv[2] as f64, kv[3] as f64, w, h)
                .map_err(|e| Error::Format(format!("{what}: {e}")))?;
            frames.push(RenderedFrame {
                rgb,
                depth,
                point_map,
                pose: CameraPose::from_rows(&rows),
                intrinsics,
            });
        }
        if frames.iter().any(|f| f.intrinsics != frames[0].intrinsics) {
            return Err(Error::Format(format!("clip {ci}: frames disagree on intrinsics")));
        }
        clips.push(VideoClip {
            frames,
            trajectory_kind: kind,
            seed,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(clips)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoClip>> {
    decode_dataset(&fs::read(path)?)
}
