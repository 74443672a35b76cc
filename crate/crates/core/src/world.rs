//! Procedural identity-video universe.
//!
//! An identity is a sprite with a seeded color palette and face pattern.
//! Videos render the sprite following an analytic trajectory over a static
//! background, so face boxes come from geometry rather than detection and
//! motion magnitude is controlled exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tinyvid_autodiff::RawTensor;

use crate::error::{Error, Result};
use crate::prompts::{self, PromptSpec};
use crate::rng;

pub const FRAME_H: usize = 32;
pub const FRAME_W: usize = 32;

/// Normalized rectangle inside the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= 1.0 + 1e-9
            && self.y + self.h <= 1.0 + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("rectangle {self:?} outside the unit square")))
        }
    }

    /// Pixel bounds (y0, y1, x0, x1), end-exclusive, at least 1x1.
    pub fn to_pixels(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let y0 = (self.y * h as f64).floor().max(0.0) as usize;
        let x0 = (self.x * w as f64).floor().max(0.0) as usize;
        let y1 = (((self.y + self.h) * h as f64).ceil() as usize).clamp(y0 + 1, h);
        let x1 = (((self.x + self.w) * w as f64).ceil() as usize).clamp(x0 + 1, w);
        (y0, y1, x0, x1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionId {
    Static,
    OrbitSmall,
    OrbitLarge,
    Bounce,
}

impl MotionId {
    pub fn all() -> [MotionId; 4] {
        [MotionId::Static, MotionId::OrbitSmall, MotionId::OrbitLarge, MotionId::Bounce]
    }

    pub fn phrase(&self) -> &'static str {
        match self {
            MotionId::Static => "standing still",
            MotionId::OrbitSmall => "drifting in a small circle",
            MotionId::OrbitLarge => "sweeping in a wide circle",
            MotionId::Bounce => "bouncing across the scene",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundId {
    Meadow,
    Night,
    Sunset,
    Studio,
}

impl BackgroundId {
    pub fn all() -> [BackgroundId; 4] {
        [BackgroundId::Meadow, BackgroundId::Night, BackgroundId::Sunset, BackgroundId::Studio]
    }

    pub fn phrase(&self) -> &'static str {
        match self {
            BackgroundId::Meadow => "over a green meadow",
            BackgroundId::Night => "under a night sky",
            BackgroundId::Sunset => "in a sunset glow",
            BackgroundId::Studio => "in a plain studio",
        }
    }
}

pub const APPEARANCE_DIM: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    pub id_seed: u64,
    /// Palette and pattern parameters, each in [0,1]:
    /// body RGB, face RGB, pattern RGB, pattern kind, pattern scale, body width.
    pub appearance: Vec<f64>,
    pub face_box_template: Rect,
}

impl Identity {
    pub fn subject_token(&self) -> String {
        format!("id{:016x}", self.id_seed)
    }
}

#[derive(Debug, Clone)]
pub struct SceneVideo {
    /// Pixels `[F, H, W, 3]` in [0,1].
    pub frames: RawTensor,
    pub identity: Identity,
    pub motion_id: MotionId,
    pub background_id: BackgroundId,
    pub face_boxes: Vec<Rect>,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_videos: Vec<SceneVideo>,
    pub train_identities: Vec<Identity>,
    pub heldout_identities: Vec<Identity>,
    pub seed: u64,
    pub n_videos_per_identity: usize,
}

// Sprite geometry in normalized coordinates, shared by rendering and the
// canonical face box so generated videos can be cropped without detection.
const STATIC_CENTER: (f64, f64) = (0.5, 0.58);
const FACE_CENTER_DY: f64 = -0.06;
const FACE_HALF: f64 = 0.14;
const FACE_BOX_HALF: f64 = 0.16;
const BODY_TOP_DY: f64 = 0.09;
const BODY_BOTTOM_DY: f64 = 0.21;

/// Sprite center for a frame of an F-frame clip.
pub fn trajectory(motion: MotionId, frame: usize, f_count: usize) -> (f64, f64) {
    let t = frame as f64;
    let f = f_count as f64;
    match motion {
        MotionId::Static => STATIC_CENTER,
        MotionId::OrbitSmall => {
            let th = std::f64::consts::TAU * t / f;
            (0.5 + 0.06 * th.cos(), 0.58 + 0.05 * th.sin())
        }
        MotionId::OrbitLarge => {
            let th = std::f64::consts::TAU * t / f;
            (0.5 + 0.20 * th.cos(), 0.55 + 0.14 * th.sin())
        }
        MotionId::Bounce => {
            let x = 0.28 + 0.44 * t / (f - 1.0).max(1.0);
            let y = 0.60 - 0.22 * (std::f64::consts::PI * 2.0 * t / f).sin().abs();
            (x, y)
        }
    }
}

/// Face box for frame `frame` of any video with this motion, identity-free.
pub fn canonical_box(motion: MotionId, frame: usize, f_count: usize) -> Rect {
    let (cx, cy) = trajectory(motion, frame, f_count);
    Rect {
        x: cx - FACE_BOX_HALF,
        y: cy + FACE_CENTER_DY - FACE_BOX_HALF,
        w: 2.0 * FACE_BOX_HALF,
        h: 2.0 * FACE_BOX_HALF,
    }
}

pub fn make_identity(seed: u64) -> Identity {
    let mut r = rng::stream(seed, "identity-appearance", 0);
    let mut appearance = Vec::with_capacity(APPEARANCE_DIM);
    for _ in 0..9 {
        appearance.push(r.random_range(0.05..0.95));
    }
    for _ in 9..APPEARANCE_DIM {
        appearance.push(r.random_range(0.0..1.0));
    }
    let face_box = canonical_box(MotionId::Static, 0, 2);
    Identity { id_seed: seed, appearance, face_box_template: face_box }
}

fn background_pixel(bg: BackgroundId, y: usize, x: usize, h: usize, _w: usize) -> [f64; 3] {
    let fy = y as f64 / (h - 1) as f64;
    match bg {
        BackgroundId::Meadow => {
            if fy < 0.55 {
                let k = fy / 0.55;
                [0.55 - 0.1 * k, 0.75 - 0.05 * k, 0.95 - 0.15 * k]
            } else {
                let k = (fy - 0.55) / 0.45;
                let tuft = if (x * 7 + y * 3) % 11 == 0 { -0.08 } else { 0.0 };
                [0.20 + tuft, 0.62 - 0.18 * k + tuft, 0.22]
            }
        }
        BackgroundId::Night => {
            let star = (x * 13 + y * 29) % 97 == 0;
            if star {
                [0.9, 0.9, 0.85]
            } else {
                [0.05, 0.06 + 0.04 * fy, 0.18 + 0.08 * fy]
            }
        }
        BackgroundId::Sunset => [0.92 - 0.35 * fy, 0.55 - 0.30 * fy, 0.35 + 0.25 * fy],
        BackgroundId::Studio => {
            if fy > 0.8 {
                [0.62, 0.62, 0.64]
            } else {
                [0.78, 0.78, 0.80]
            }
        }
    }
}

fn pattern_hits(appearance: &[f64], px: usize, py: usize, face_px: usize) -> bool {
    let kind = ((appearance[9] * 4.0).floor() as usize).min(3);
    let cell = 2 + (appearance[10] * 2.0).round() as usize;
    match kind {
        0 => (px / cell) % 2 == 0,
        1 => (py / cell) % 2 == 0,
        2 => ((px / cell) + (py / cell)) % 2 == 0,
        _ => px < cell || py < cell || px >= face_px - cell || py >= face_px - cell,
    }
}

fn render_frame(
    identity: &Identity,
    bg: BackgroundId,
    center: (f64, f64),
    dither: &[f64],
) -> Vec<f64> {
    let (h, w) = (FRAME_H, FRAME_W);
    let a = &identity.appearance;
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let base = background_pixel(bg, y, x, h, w);
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = (base[c] + dither[y * w + x]).clamp(0.0, 1.0);
            }
        }
    }

    let (cx, cy) = center;
    let body_half = 0.08 + 0.04 * a[11];
    let paint = |img: &mut [f64], y0: f64, y1: f64, x0: f64, x1: f64, color: [f64; 3]| {
        let rect = Rect {
            x: x0.max(0.0),
            y: y0.max(0.0),
            w: (x1.min(1.0) - x0.max(0.0)).max(0.0),
            h: (y1.min(1.0) - y0.max(0.0)).max(0.0),
        };
        if rect.w <= 0.0 || rect.h <= 0.0 {
            return;
        }
        let (py0, py1, px0, px1) = rect.to_pixels(h, w);
        for y in py0..py1 {
            for x in px0..px1 {
                for c in 0..3 {
                    img[(y * w + x) * 3 + c] = color[c];
                }
            }
        }
    };

    let body = [a[0], a[1], a[2]];
    paint(
        &mut img,
        cy + BODY_TOP_DY,
        cy + BODY_BOTTOM_DY,
        cx - body_half,
        cx + body_half,
        body,
    );

    let face = [a[3], a[4], a[5]];
    let pattern = [a[6], a[7], a[8]];
    let fcy = cy + FACE_CENTER_DY;
    let face_rect = Rect {
        x: cx - FACE_HALF,
        y: fcy - FACE_HALF,
        w: 2.0 * FACE_HALF,
        h: 2.0 * FACE_HALF,
    };
    let (fy0, fy1, fx0, fx1) = face_rect.to_pixels(h, w);
    let face_px = fx1 - fx0;
    for y in fy0..fy1 {
        for x in fx0..fx1 {
            let color =
                if pattern_hits(a, x - fx0, y - fy0, face_px) { pattern } else { face };
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = color[c];
            }
        }
    }
    img
}

pub fn make_video(
    identity: &Identity,
    motion_id: MotionId,
    background_id: BackgroundId,
    f_count: usize,
    seed: u64,
) -> Result<SceneVideo> {
    if f_count < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {f_count}")));
    }
    // Static per-video background dither keeps same-motion frames identical.
    let mut r = rng::stream(seed, "video-dither", 0);
    let dither: Vec<f64> =
        (0..FRAME_H * FRAME_W).map(|_| r.random_range(-0.015..0.015)).collect();

    let mut data = Vec::with_capacity(f_count * FRAME_H * FRAME_W * 3);
    let mut face_boxes = Vec::with_capacity(f_count);
    for frame in 0..f_count {
        let center = trajectory(motion_id, frame, f_count);
        data.extend(render_frame(identity, background_id, center, &dither));
        let b = canonical_box(motion_id, frame, f_count);
        b.validate()?;
        face_boxes.push(b);
    }
    let prompt = prompts::corpus_prompt(&identity.subject_token(), motion_id, background_id);
    Ok(SceneVideo {
        frames: RawTensor::new(vec![f_count, FRAME_H, FRAME_W, 3], data),
        identity: identity.clone(),
        motion_id,
        background_id,
        face_boxes,
        prompt,
    })
}

pub fn make_corpus(
    n_identities: usize,
    n_videos_per_identity: usize,
    n_heldout: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_identities < 2 {
        return Err(Error::invalid("need at least 2 identities"));
    }
    if n_heldout < 1 {
        return Err(Error::invalid("need at least 1 held-out identity"));
    }
    if n_heldout >= n_identities {
        return Err(Error::invalid(format!(
            "{n_heldout} held-out of {n_identities} identities leaves no training split"
        )));
    }
    let identities: Vec<Identity> = (0..n_identities)
        .map(|i| make_identity(rng::derive_seed(seed, "identity", i as u64)))
        .collect();
    let n_train = n_identities - n_heldout;
    let train_identities = identities[..n_train].to_vec();
    let heldout_identities = identities[n_train..].to_vec();

    let motions = MotionId::all();
    let backgrounds = BackgroundId::all();
    let mut train_videos = Vec::with_capacity(n_train * n_videos_per_identity);
    for (i, identity) in train_identities.iter().enumerate() {
        for j in 0..n_videos_per_identity {
            let g = i * n_videos_per_identity + j;
            let motion = motions[g % motions.len()];
            let background = backgrounds[(g / motions.len()) % backgrounds.len()];
            let vseed = rng::derive_seed(seed, "video", g as u64);
            train_videos.push(make_video(identity, motion, background, 16, vseed)?);
        }
    }
    Ok(Corpus { train_videos, train_identities, heldout_identities, seed, n_videos_per_identity })
}

/// K reference images of one identity: static pose, varied backgrounds.
pub fn make_references(identity: &Identity, k: usize, seed: u64) -> Result<Vec<(RawTensor, Rect)>> {
    if k < 1 {
        return Err(Error::invalid("need at least one reference"));
    }
    let backgrounds = BackgroundId::all();
    let mut refs = Vec::with_capacity(k);
    for i in 0..k {
        let vseed = rng::derive_seed(seed, "reference", i as u64);
        let video =
            make_video(identity, MotionId::Static, backgrounds[i % backgrounds.len()], 2, vseed)?;
        refs.push((video.frames.index_axis0(0), video.face_boxes[0]));
    }
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_deterministic_and_in_range() {
        let a = make_identity(7);
        let b = make_identity(7);
        assert_eq!(a.appearance, b.appearance);
        assert!(a.appearance.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.appearance.len(), APPEARANCE_DIM);
        a.face_box_template.validate().unwrap();

        let c = make_identity(8);
        assert_ne!(a.appearance, c.appearance);
    }

    #[test]
    fn video_shape_and_range() {
        let id = make_identity(3);
        let v = make_video(&id, MotionId::Bounce, BackgroundId::Meadow, 16, 5).unwrap();
        assert_eq!(v.frames.shape(), [16, FRAME_H, FRAME_W, 3]);
        assert_eq!(v.face_boxes.len(), 16);
        assert!(v.frames.data().iter().all(|p| (0.0..=1.0).contains(p)));
        for b in &v.face_boxes {
            b.validate().unwrap();
        }
        assert!(make_video(&id, MotionId::Static, BackgroundId::Night, 1, 5).is_err());
    }

    #[test]
    fn static_motion_gives_identical_frames() {
        let id = make_identity(4);
        let v = make_video(&id, MotionId::Static, BackgroundId::Sunset, 4, 9).unwrap();
        let first = v.frames.index_axis0(0);
        for f in 1..4 {
            assert_eq!(v.frames.index_axis0(f).to_vec(), first.to_vec());
        }
    }

    #[test]
    fn orbit_large_moves_more_than_orbit_small() {
        let id = make_identity(11);
        let diff = |motion| {
            let v = make_video(&id, motion, BackgroundId::Studio, 8, 2).unwrap();
            let mut acc = 0.0;
            for f in 0..7 {
                let a = v.frames.index_axis0(f);
                let b = v.frames.index_axis0(f + 1);
                acc += a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.len() as f64;
            }
            acc / 7.0
        };
        assert!(diff(MotionId::OrbitLarge) > diff(MotionId::OrbitSmall));
    }

    #[test]
    fn face_box_tracks_sprite_pattern() {
        // The crop at each frame must contain the face pattern colors.
        let id = make_identity(21);
        let v = make_video(&id, MotionId::Bounce, BackgroundId::Night, 8, 3).unwrap();
        let face = [id.appearance[3], id.appearance[4], id.appearance[5]];
        for f in 0..8 {
            let frame = v.frames.index_axis0(f);
            let (y0, y1, x0, x1) = v.face_boxes[f].to_pixels(FRAME_H, FRAME_W);
            let mut found = false;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = &frame.data()[(y * FRAME_W + x) * 3..(y * FRAME_W + x) * 3 + 3];
                    if (px[0] - face[0]).abs() < 1e-9 && (px[1] - face[1]).abs() < 1e-9 {
                        found = true;
                    }
                }
            }
            assert!(found, "face color missing from crop at frame {f}");
        }
    }

    #[test]
    fn corpus_split_counts_and_determinism() {
        let c = make_corpus(10, 4, 2, 77).unwrap();
        assert_eq!(c.train_identities.len(), 8);
        assert_eq!(c.heldout_identities.len(), 2);
        assert_eq!(c.train_videos.len(), 32);
        let train_seeds: Vec<u64> = c.train_identities.iter().map(|i| i.id_seed).collect();
        for h in &c.heldout_identities {
            assert!(!train_seeds.contains(&h.id_seed));
        }

        let c2 = make_corpus(10, 4, 2, 77).unwrap();
        assert_eq!(
            c.train_videos[5].frames.to_vec(),
            c2.train_videos[5].frames.to_vec()
        );

        assert!(make_corpus(10, 4, 10, 77).is_err());
        assert!(make_corpus(1, 4, 1, 77).is_err());
        assert!(make_corpus(10, 4, 0, 77).is_err());
    }

    #[test]
    fn corpus_covers_all_motions_and_backgrounds() {
        let c = make_corpus(6, 4, 1, 5).unwrap();
        for m in MotionId::all() {
            assert!(c.train_videos.iter().any(|v| v.motion_id == m), "missing {m:?}");
        }
        for b in BackgroundId::all() {
            assert!(c.train_videos.iter().any(|v| v.background_id == b), "missing {b:?}");
        }
    }

    #[test]
    fn references_are_static_crops_of_the_identity() {
        let id = make_identity(31);
        let refs = make_references(&id, 4, 1).unwrap();
        assert_eq!(refs.len(), 4);
        for (img, b) in &refs {
            assert_eq!(img.shape(), [FRAME_H, FRAME_W, 3]);
            b.validate().unwrap();
        }
        assert!(make_references(&id, 0, 1).is_err());
    }
}
