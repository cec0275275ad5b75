use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationFile, DotAnnotations};
use super::density::{generate_density_map, DensityMap};
use super::image::{load_image, Image};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub annotation: PathBuf,
    pub split: Split,
    pub count: usize,
}

/// Index of a dataset directory: which annotation files exist and which
/// split each belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One loaded image with its annotations and ground-truth density.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub annotations: DotAnnotations,
    pub density: DensityMap,
}

impl Sample {
    pub fn new(image: Image, annotations: DotAnnotations, sigma: f64) -> Result<Self> {
        if let Some(roi) = &annotations.roi {
            roi.check_dims("sample", image.height(), image.width())?;
        }
        let density = generate_density_map(&annotations, (image.height(), image.width()), sigma)?;
        Ok(Sample {
            id: annotations.image_id.clone(),
            image,
            annotations,
            density,
        })
    }

    pub fn count(&self) -> f64 {
        self.annotations
            .in_bounds(self.image.height(), self.image.width())
            .count() as f64
    }
}

/// In-memory, read-only collection of samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub sigma: f64,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, sigma: f64) -> Self {
        Dataset { samples, sigma }
    }

    /// Loads every manifest entry of `split`, resolving paths against the
    /// manifest's directory.
    pub fn load(manifest_path: &Path, split: Split, sigma: f64) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        for entry in manifest.entries.iter().filter(|e| e.split == split) {
            let ann_path = root.join(&entry.annotation);
            let file = AnnotationFile::load(&ann_path)?;
            let annotations = file.to_annotations(&entry.id, root)?;
            let image = load_image(&root.join(&file.image))?;
            samples.push(Sample::new(image, annotations, sigma)?);
        }
        Ok(Dataset { samples, sigma })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
