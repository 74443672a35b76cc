//! Render stored clips as media files: an animated gif per clip, or a still
//! image with the frames tiled left to right. Output bytes depend only on
//! the frame tensors, so re-exporting a run reproduces identical files.

use std::fs;
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgba, RgbaImage};
use tinyvid_autodiff::RawTensor;
use tinyvid_core::{Error, Result};

use crate::MediaFormat;

const FRAME_MS: u32 = 125;

fn media_err(e: image::ImageError) -> Error {
    Error::Format(format!("media encoding failed: {e}"))
}

/// Validate a `[F, H, W, 3]` clip tensor and return its dimensions.
fn clip_dims(frames: &RawTensor) -> Result<(usize, usize, usize)> {
    match *frames.shape() {
        [f, h, w, 3] if f > 0 => Ok((f, h, w)),
        ref s => Err(Error::ShapeMismatch(format!("clip tensor has shape {s:?}, want [F,H,W,3]"))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_image(frames: &RawTensor, index: usize, h: usize, w: usize) -> RgbaImage {
    let data = frames.data();
    let base = index * h * w * 3;
    RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let at = base + (y as usize * w + x as usize) * 3;
        Rgba([to_byte(data[at]), to_byte(data[at + 1]), to_byte(data[at + 2]), 255])
    })
}

/// Write one looping gif, one frame per stored frame.
pub fn write_gif(path: &Path, frames: &RawTensor) -> Result<()> {
    let (f, h, w) = clip_dims(frames)?;
    let file = fs::File::create(path)?;
    let mut encoder = GifEncoder::new(file);
    encoder.set_repeat(Repeat::Infinite).map_err(media_err)?;
    for index in 0..f {
        let frame = Frame::from_parts(
            frame_image(frames, index, h, w),
            0,
            0,
            Delay::from_numer_denom_ms(FRAME_MS, 1),
        );
        encoder.encode_frame(frame).map_err(media_err)?;
    }
    Ok(())
}

/// Write one png with every frame side by side in time order.
pub fn write_grid(path: &Path, frames: &RawTensor) -> Result<()> {
    let (f, h, w) = clip_dims(frames)?;
    let data = frames.data();
    let grid = RgbaImage::from_fn((f * w) as u32, h as u32, |x, y| {
        let tile = x as usize / w;
        let at = (tile * h * w + y as usize * w + (x as usize - tile * w)) * 3;
        Rgba([to_byte(data[at]), to_byte(data[at + 1]), to_byte(data[at + 2]), 255])
    });
    grid.save(path).map_err(media_err)
}

/// Export every stored clip of a run; an empty run warns and writes nothing.
pub fn export_run(run: &Path, format: MediaFormat, out: &Path) -> Result<()> {
    let videos = crate::store::load_videos(run)?;
    if videos.is_empty() {
        eprintln!("warning: {} holds no generated clips; nothing to export", run.display());
        return Ok(());
    }
    fs::create_dir_all(out)?;
    for (index, video) in videos.iter().enumerate() {
        match format {
            MediaFormat::Gif => write_gif(&out.join(format!("clip_{index:02}.gif")), &video.frames)?,
            MediaFormat::PngGrid => {
                write_grid(&out.join(format!("clip_{index:02}.png")), &video.frames)?
            }
        }
    }
    println!("exported {} clips to {}", videos.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(f: usize, h: usize, w: usize) -> RawTensor {
        let n = f * h * w * 3;
        RawTensor::new(vec![f, h, w, 3], (0..n).map(|i| i as f64 / n as f64).collect())
    }

    #[test]
    fn grid_tiles_every_frame_left_to_right() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.png");
        write_grid(&path, &ramp_clip(5, 4, 3)).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (15, 4));
    }

    #[test]
    fn exports_are_byte_identical_on_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let clip = ramp_clip(3, 4, 4);
        let a = dir.path().join("a.gif");
        let b = dir.path().join("b.gif");
        write_gif(&a, &clip).unwrap();
        write_gif(&b, &clip).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());

        let c = dir.path().join("c.png");
        let d = dir.path().join("d.png");
        write_grid(&c, &clip).unwrap();
        write_grid(&d, &clip).unwrap();
        assert_eq!(fs::read(c).unwrap(), fs::read(d).unwrap());
    }

    #[test]
    fn rejects_malformed_clip_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = RawTensor::new(vec![4, 4, 3], vec![0.0; 48]);
        let err = write_gif(&dir.path().join("x.gif"), &bad).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "got {err:?}");
    }
}
