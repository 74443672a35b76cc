//! Run-directory payloads beyond what the core artifact helpers cover:
//! the generated clips a run is judged by, and the reference images the
//! adapter was fitted against. Both live inside the run directory so a run
//! can be evaluated and exported without the corpus it came from.

use std::fs;
use std::path::{Path, PathBuf};

use tinyvid_autodiff::RawTensor;
use tinyvid_core::artifacts::{read_container, write_container, Container, KIND_FRAMES};
use tinyvid_core::eval::EvalVideo;
use tinyvid_core::prompts::PromptSpec;
use tinyvid_core::world::Rect;
use tinyvid_core::{Error, Result};

pub const VIDEOS_DIR: &str = "videos";
pub const REFS_FILE: &str = "refs.tvt";
const KIND_REFS: &str = "reference-images";

fn clip_name(index: usize) -> String {
    format!("clip_{index:02}.tvt")
}

/// Write one frame container per clip into `<run>/videos/`, with the prompt
/// and per-frame face boxes in the container metadata.
pub fn save_videos(run: &Path, videos: &[EvalVideo]) -> Result<()> {
    let dir = run.join(VIDEOS_DIR);
    fs::create_dir_all(&dir)?;
    for (index, video) in videos.iter().enumerate() {
        let container = Container {
            kind: KIND_FRAMES.to_string(),
            meta: serde_json::json!({
                "prompt": video.prompt,
                "face_boxes": video.face_boxes,
            }),
            tensors: [("frames".to_string(), video.frames.clone())].into_iter().collect(),
        };
        write_container(dir.join(clip_name(index)), &container)?;
    }
    Ok(())
}

/// Read every clip saved by [`save_videos`], in index order. A run directory
/// without a videos directory reads as empty.
pub fn load_videos(run: &Path) -> Result<Vec<EvalVideo>> {
    let dir = run.join(VIDEOS_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tvt"))
        .collect();
    paths.sort();
    let mut videos = Vec::with_capacity(paths.len());
    for path in &paths {
        let container = read_container(path)?;
        if container.kind != KIND_FRAMES {
            return Err(Error::Format(format!(
                "{} holds '{}', expected '{KIND_FRAMES}'",
                path.display(),
                container.kind
            )));
        }
        let meta = container.meta.clone();
        let prompt: PromptSpec = serde_json::from_value(meta["prompt"].clone())?;
        let face_boxes: Vec<Rect> = serde_json::from_value(meta["face_boxes"].clone())?;
        let frames = container.tensors.get("frames").cloned().ok_or_else(|| {
            Error::Format(format!("{} has no 'frames' entry", path.display()))
        })?;
        videos.push(EvalVideo { frames, face_boxes, prompt });
    }
    Ok(videos)
}

/// Persist the reference images and their face boxes as one container.
pub fn save_refs(run: &Path, refs: &[(RawTensor, Rect)]) -> Result<()> {
    let boxes: Vec<&Rect> = refs.iter().map(|(_, b)| b).collect();
    let container = Container {
        kind: KIND_REFS.to_string(),
        meta: serde_json::json!({ "face_boxes": boxes }),
        tensors: refs
            .iter()
            .enumerate()
            .map(|(i, (img, _))| (format!("ref_{i:02}"), img.clone()))
            .collect(),
    };
    write_container(run.join(REFS_FILE), &container)
}

/// Read back the references saved by [`save_refs`].
pub fn load_refs(run: &Path) -> Result<Vec<(RawTensor, Rect)>> {
    let path = run.join(REFS_FILE);
    let container = read_container(&path)?;
    if container.kind != KIND_REFS {
        return Err(Error::Format(format!(
            "{} holds '{}', expected '{KIND_REFS}'",
            path.display(),
            container.kind
        )));
    }
    let boxes: Vec<Rect> = serde_json::from_value(container.meta["face_boxes"].clone())?;
    if boxes.len() != container.tensors.len() {
        return Err(Error::Format(format!(
            "{} lists {} boxes for {} images",
            path.display(),
            boxes.len(),
            container.tensors.len()
        )));
    }
    Ok(container.tensors.into_values().zip(boxes).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tinyvid_core::world::{make_corpus, make_references};

    #[test]
    fn clips_and_refs_round_trip() {
        let corpus = make_corpus(2, 2, 1, 5).unwrap();
        let videos: Vec<EvalVideo> =
            corpus.train_videos.iter().take(3).map(EvalVideo::from_scene).collect();
        let refs = make_references(&corpus.train_identities[0], 2, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();

        save_videos(dir.path(), &videos).unwrap();
        let back = load_videos(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in videos.iter().zip(back.iter()) {
            assert_eq!(a.frames.data(), b.frames.data());
            assert_eq!(a.prompt.text, b.prompt.text);
            assert_eq!(a.face_boxes.len(), b.face_boxes.len());
        }

        save_refs(dir.path(), &refs).unwrap();
        let back = load_refs(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in refs.iter().zip(back.iter()) {
            assert_eq!(a.0.data(), b.0.data());
            assert!((a.1.x - b.1.x).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_videos_directory_reads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_videos(dir.path()).unwrap().is_empty());
    }
}
