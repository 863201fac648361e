//! Episode sources: on-disk corpus layout and in-memory episodes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotation::EpisodeRef;
use crate::progress::load_features;

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.bin";

/// Contents of `<dataset>/<episode>/meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub instruction: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeData {
    /// Camera directory holding `frame_%06d.png` files and/or `features.bin`.
    Dir(PathBuf),
    Features(Vec<Vec<f64>>),
    /// PNG bytes per frame.
    Images(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub episode: EpisodeRef,
    pub data: EpisodeData,
}

#[derive(Debug, Clone)]
pub struct LoadedEpisode {
    pub episode: EpisodeRef,
    pub features: Option<Vec<Vec<f64>>>,
    pub images: Option<Vec<Arc<Vec<u8>>>>,
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:06}.png")
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_meta(episode_dir: &Path) -> Result<EpisodeMeta, String> {
    let path = episode_dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Lists every camera stream under `root/<dataset>/<episode>/<camera>/`,
/// sorted by dataset, episode and camera.
pub fn scan_corpus(root: &Path) -> Result<Vec<EpisodeSpec>, String> {
    if !root.is_dir() {
        return Err(format!("input directory {} does not exist", root.display()));
    }
    let mut out = Vec::new();
    for dataset in sorted_subdirs(root)? {
        for episode_dir in sorted_subdirs(&dataset)? {
            if !episode_dir.join(META_FILE).is_file() {
                continue;
            }
            let meta = read_meta(&episode_dir)?;
            for camera in sorted_subdirs(&episode_dir)? {
                out.push(EpisodeSpec {
                    episode: EpisodeRef {
                        dataset_name: file_name(&dataset),
                        episode_id: file_name(&episode_dir),
                        camera_key: file_name(&camera),
                        num_frames: meta.num_frames,
                        instruction: meta.instruction.clone(),
                    },
                    data: EpisodeData::Dir(camera),
                });
            }
        }
    }
    Ok(out)
}

/// Camera directory of a trajectory under a corpus root.
pub fn camera_dir(root: &Path, episode: &EpisodeRef) -> PathBuf {
    root.join(&episode.dataset_name)
        .join(&episode.episode_id)
        .join(&episode.camera_key)
}

/// Reads frames and features, checking both against `num_frames`.
pub fn load_episode(spec: &EpisodeSpec) -> Result<LoadedEpisode, String> {
    let n = spec.episode.num_frames;
    let (features, images) = match &spec.data {
        EpisodeData::Features(rows) => (Some(rows.clone()), None),
        EpisodeData::Images(imgs) => (
            None,
            Some(imgs.iter().cloned().map(Arc::new).collect::<Vec<_>>()),
        ),
        EpisodeData::Dir(dir) => {
            let feat_path = dir.join(FEATURES_FILE);
            let features = if feat_path.is_file() {
                Some(load_features(&feat_path).map_err(|e| e.to_string())?)
            } else {
                None
            };
            let images = if dir.join(frame_file_name(0)).is_file() {
                let mut imgs = Vec::with_capacity(n);
                for t in 0..n {
                    let p = dir.join(frame_file_name(t));
                    imgs.push(Arc::new(
                        fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?,
                    ));
                }
                Some(imgs)
            } else {
                None
            };
            (features, images)
        }
    };
    if let Some(rows) = &features {
        if rows.len() != n {
            return Err(format!("{} feature rows for {n} frames", rows.len()));
        }
    }
    if let Some(imgs) = &images {
        if imgs.len() != n {
            return Err(format!("{} images for {n} frames", imgs.len()));
        }
    }
    if features.is_none() && images.is_none() {
        return Err("episode has neither images nor features".into());
    }
    Ok(LoadedEpisode {
        episode: spec.episode.clone(),
        features,
        images,
    })
}
