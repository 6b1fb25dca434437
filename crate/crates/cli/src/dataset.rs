//! Frame directories: PNG files ordered by name plus landmark records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use deid_core::facegeom::{align_face, read_landmark_file, read_landmark_jsonl, LandmarkSet};
use deid_core::image::Image;
use deid_core::trainer::FaceSet;

pub const LANDMARKS_FILE: &str = "landmarks.jsonl";

/// One input frame and its landmarks, if any were recorded.
#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub path: PathBuf,
    pub landmarks: Option<LandmarkSet>,
}

/// The ordered frames of one directory, all de-identified with one donor.
#[derive(Clone, Debug)]
pub struct FrameJob {
    pub name: String,
    pub frames: Vec<Frame>,
}

/// PNG file names in `dir`, sorted.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.file_type()?.is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Landmarks keyed by image file name. `source` is a JSON-lines file or a
/// directory of `<stem>.json` records.
pub fn load_landmarks(source: &Path, names: &[String]) -> Result<BTreeMap<String, LandmarkSet>> {
    let mut out = BTreeMap::new();
    if source.is_dir() {
        for name in names {
            let stem = Path::new(name).file_stem().unwrap_or_default();
            let p = source.join(stem).with_extension("json");
            if p.exists() {
                let rec = read_landmark_file(&p)?;
                out.insert(name.clone(), rec.points);
            }
        }
    } else {
        if !source.exists() {
            bail!("landmark file {} does not exist", source.display());
        }
        for rec in read_landmark_jsonl(source)? {
            if out.insert(rec.image.clone(), rec.points).is_some() {
                bail!("{}: duplicate record for {}", source.display(), rec.image);
            }
        }
    }
    Ok(out)
}

pub fn job_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "frames".into())
}

impl FrameJob {
    pub fn load(dir: &Path, landmarks: Option<&Path>) -> Result<FrameJob> {
        if !dir.is_dir() {
            bail!("input directory {} does not exist", dir.display());
        }
        let names = png_names(dir)?;
        let default = dir.join(LANDMARKS_FILE);
        let mut marks = load_landmarks(landmarks.unwrap_or(&default), &names)?;
        let frames = names
            .into_iter()
            .map(|name| Frame {
                path: dir.join(&name),
                landmarks: marks.remove(&name),
                name,
            })
            .collect();
        Ok(FrameJob {
            name: job_name(dir),
            frames,
        })
    }
}

/// Loads and aligns a face-set directory. Every listed image must exist and
/// every PNG must have landmarks.
pub fn load_face_set(dir: &Path) -> Result<FaceSet> {
    let lm_path = dir.join(LANDMARKS_FILE);
    if !lm_path.exists() {
        bail!("face set {}: missing landmark file {}", dir.display(), lm_path.display());
    }
    let job = FrameJob::load(dir, None).with_context(|| format!("face set {}", dir.display()))?;
    let mut faces = Vec::with_capacity(job.frames.len());
    let mut marks = Vec::with_capacity(job.frames.len());
    for f in job.frames {
        let Some(lm) = f.landmarks else {
            bail!("face set {}: no landmarks for {} in {}", dir.display(), f.name, lm_path.display());
        };
        let img = Image::load_png(&f.path)?;
        let (aligned, _) = align_face(&img, &lm).with_context(|| format!("aligning {}", f.path.display()))?;
        faces.push(aligned);
        marks.push(lm);
    }
    FaceSet::new(&job.name, faces, marks).with_context(|| format!("face set {}", dir.display()))
}
