//! Posed-image datasets: `images/<stem>.png` paired with `cameras/<stem>.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::FitError;
use crate::image::Image;
use crate::render::Camera;

#[derive(Clone, Debug)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>, FitError> {
    if !dir.is_dir() {
        return Err(FitError::Dataset(format!("directory not found: {}", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| FitError::Dataset(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| FitError::Dataset(format!("{}: {e}", dir.display())))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn load_camera(path: &Path) -> Result<Camera, FitError> {
    let text = std::fs::read_to_string(path).map_err(|e| FitError::Dataset(format!("{}: {e}", path.display())))?;
    let cam: Camera = serde_json::from_str(&text).map_err(|e| FitError::Dataset(format!("{}: {e}", path.display())))?;
    cam.validate().map_err(|e| FitError::Dataset(format!("{}: {e}", path.display())))?;
    Ok(cam)
}

/// Loads every view of `root`, ordered by stem. Each image needs a camera of
/// the same stem and vice versa.
pub fn load_dataset(root: &Path) -> Result<Vec<View>, FitError> {
    let images = files_with_extension(&root.join("images"), "png")?;
    let cameras = files_with_extension(&root.join("cameras"), "json")?;
    if let Some(stem) = images.keys().find(|s| !cameras.contains_key(*s)) {
        return Err(FitError::Dataset(format!("image {stem}.png has no camera in {}", root.join("cameras").display())));
    }
    if let Some(stem) = cameras.keys().find(|s| !images.contains_key(*s)) {
        return Err(FitError::Dataset(format!("camera {stem}.json has no image in {}", root.join("images").display())));
    }
    if images.is_empty() {
        return Err(FitError::Dataset(format!("no views in {}", root.display())));
    }
    images
        .iter()
        .map(|(stem, img_path)| {
            let camera = load_camera(&cameras[stem])?;
            let image = Image::load_png(img_path).map_err(|e| FitError::Dataset(e.to_string()))?;
            if image.width != camera.width || image.height != camera.height {
                return Err(FitError::Dataset(format!(
                    "{}: image is {}x{} but its camera is {}x{}",
                    img_path.display(),
                    image.width,
                    image.height,
                    camera.width,
                    camera.height
                )));
            }
            Ok(View { name: stem.clone(), camera, image })
        })
        .collect()
}

/// Writes views in the layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, views: &[View]) -> Result<(), FitError> {
    let io = |e: std::io::Error| FitError::Dataset(format!("{}: {e}", root.display()));
    std::fs::create_dir_all(root.join("images")).map_err(io)?;
    std::fs::create_dir_all(root.join("cameras")).map_err(io)?;
    for v in views {
        v.image.save_png(&root.join("images").join(format!("{}.png", v.name))).map_err(|e| FitError::Dataset(e.to_string()))?;
        let json = serde_json::to_string_pretty(&v.camera).expect("camera serializes");
        std::fs::write(root.join("cameras").join(format!("{}.json", v.name)), json).map_err(io)?;
    }
    Ok(())
}
