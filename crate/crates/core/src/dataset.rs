//! MVTec-style dataset folder ingestion.
//!
//! A category directory holds `train/good`, `test/good`, `test/<kind>` and
//! optionally `ground_truth/<kind>` with `<stem>_mask.png` files. A dataset
//! root is either a single category or a directory of categories.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::synth::load_mask;
use ndarray::Array2;
use std::path::{Path, PathBuf};

/// One labeled test image.
#[derive(Debug, Clone)]
pub struct TestSample {
    /// Stable id: `<subdir>/<stem>`.
    pub id: String,
    pub image: Image,
    /// True when anomalous.
    pub label: bool,
    pub kind: Option<String>,
    pub mask: Option<Array2<bool>>,
}

/// A fully loaded category.
#[derive(Debug, Clone)]
pub struct CategoryData {
    pub name: String,
    pub train_normal: Vec<(String, Image)>,
    pub test: Vec<TestSample>,
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().to_string()
}

/// Whether a directory looks like one category.
pub fn is_category_dir(dir: &Path) -> bool {
    dir.join("train/good").is_dir() && dir.join("test").is_dir()
}

/// Load one category directory.
pub fn load_category(dir: &Path) -> Result<CategoryData> {
    if !is_category_dir(dir) {
        return Err(Error::Format {
            what: "dataset",
            reason: format!("{} lacks train/good and test subdirectories", dir.display()),
        });
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "category".into());

    let mut train_normal = Vec::new();
    for path in sorted_pngs(&dir.join("train/good"))? {
        train_normal.push((stem(&path), Image::load_png(&path)?));
    }
    if train_normal.is_empty() {
        return Err(Error::InsufficientData {
            what: "train/good images",
            needed: 1,
            available: 0,
        });
    }

    let mut test = Vec::new();
    let test_root = dir.join("test");
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&test_root)
        .map_err(|e| Error::io(&test_root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let kind_name = stem(&sub);
        let anomalous = kind_name != "good";
        for path in sorted_pngs(&sub)? {
            let file_stem = stem(&path);
            let mask = if anomalous {
                let mask_path = dir
                    .join("ground_truth")
                    .join(&kind_name)
                    .join(format!("{file_stem}_mask.png"));
                if mask_path.exists() {
                    Some(load_mask(&mask_path)?)
                } else {
                    None
                }
            } else {
                None
            };
            test.push(TestSample {
                id: format!("{kind_name}/{file_stem}"),
                image: Image::load_png(&path)?,
                label: anomalous,
                kind: anomalous.then(|| kind_name.clone()),
                mask,
            });
        }
    }
    if test.is_empty() {
        return Err(Error::InsufficientData {
            what: "test images",
            needed: 1,
            available: 0,
        });
    }
    Ok(CategoryData {
        name,
        train_normal,
        test,
    })
}

/// Category directories under a root (or the root itself when it is one).
pub fn list_categories(root: &Path) -> Result<Vec<PathBuf>> {
    if is_category_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_category_dir(p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Format {
            what: "dataset",
            reason: format!("no category directories under {}", root.display()),
        });
    }
    Ok(out)
}
