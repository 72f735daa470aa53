//! Dataset index files and image/label loading.
//!
//! Index lines are `image_id <TAB> path-or-SYNTH:spec <TAB> class,class,...`.
//! Lines starting with `#` are comments, except `# classes: N`, which fixes
//! the total class count (otherwise the largest listed id plus one).
//!
//! A path names an image tensor `[3, H, W]`; its label map `[1, H, W]` lives
//! next to it with the `.label.msht` suffix and stores `class id + 1` per
//! pixel, `0` for background.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::backbone::{FeaturePyramid, FeatureSource};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::protocol::synth::SynthSpec;
use crate::tensor::Tensor;

pub const SYNTH_PREFIX: &str = "SYNTH:";
pub const LABEL_SUFFIX: &str = ".label.msht";

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub source: ImageSource,
    pub classes: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub images: Vec<ImageEntry>,
    pub classes: usize,
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
}

/// Path of the label map that belongs to an image tensor file.
pub fn label_path(image: &Path) -> PathBuf {
    let s = image.to_string_lossy();
    let stem = s.strip_suffix(".msht").unwrap_or(&s);
    PathBuf::from(format!("{}{}", stem, LABEL_SUFFIX))
}

impl DatasetIndex {
    pub fn new(images: Vec<ImageEntry>, classes: usize, root: impl Into<PathBuf>) -> Result<Self> {
        let idx = Self {
            images,
            classes,
            root: root.into(),
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.images {
            if e.classes.is_empty() {
                return Err(Error::Data(format!("image `{}` lists no class", e.id)));
            }
            if let Some(c) = e.classes.iter().find(|&&c| c >= self.classes) {
                return Err(Error::Data(format!(
                    "image `{}` has class {} outside [0, {})",
                    e.id, c, self.classes
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate image id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut declared = None;
        let mut images = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("classes:") {
                    declared = Some(v.trim().parse::<usize>().map_err(|_| {
                        Error::Data(format!("line {}: bad class count `{}`", n + 1, v.trim()))
                    })?);
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Data(format!(
                    "line {}: expected 3 tab-separated columns, found {}",
                    n + 1,
                    cols.len()
                )));
            }
            let source = match cols[1].strip_prefix(SYNTH_PREFIX) {
                Some(spec) => ImageSource::Synth(
                    spec.parse()
                        .map_err(|e: Error| Error::Data(format!("line {}: {}", n + 1, e)))?,
                ),
                None => ImageSource::Path(PathBuf::from(cols[1])),
            };
            let classes = cols[2]
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Data(format!("line {}: bad class id `{}`", n + 1, c)))
                })
                .collect::<Result<BTreeSet<_>>>()?;
            images.push(ImageEntry {
                id: cols[0].to_string(),
                source,
                classes,
            });
        }
        let inferred = images
            .iter()
            .flat_map(|e| e.classes.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        Self::new(images, declared.unwrap_or(inferred), root)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# classes: {}\n", self.classes);
        for e in &self.images {
            let src = match &e.source {
                ImageSource::Path(p) => p.to_string_lossy().into_owned(),
                ImageSource::Synth(s) => format!("{}{}", SYNTH_PREFIX, s),
            };
            let classes: Vec<String> = e.classes.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{}\t{}\t{}", e.id, src, classes.join(","));
        }
        out
    }

    /// Indices of images containing `class`.
    pub fn images_with(&self, class: usize) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, e)| e.classes.contains(&class))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|e| e.id == id)
    }
}

/// A loaded image and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub labels: Tensor<f32>,
}

impl LabeledImage {
    /// Binary `[1, H, W]` mask of `class`.
    pub fn mask(&self, class: usize) -> Tensor<f32> {
        let code = (class + 1) as f32;
        self.labels.map(|v| if v == code { 1.0 } else { 0.0 })
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.chw();
        (h, w)
    }
}

pub fn load_image(index: &DatasetIndex, entry: &ImageEntry) -> Result<LabeledImage> {
    let img = match &entry.source {
        ImageSource::Synth(spec) => spec.render(),
        ImageSource::Path(p) => {
            let path = index.root.join(p);
            let image = Tensor::from_bytes(&std::fs::read(&path)?)?;
            let labels = Tensor::from_bytes(&std::fs::read(label_path(&path))?)?;
            LabeledImage { image, labels }
        }
    };
    let (c, h, w) = img.image.chw();
    if c != 3 || img.labels.chw() != (1, h, w) {
        return Err(Error::Data(format!(
            "image `{}` has shape {:?} with labels {:?}; expected [3,H,W] and [1,H,W]",
            entry.id,
            img.image.shape(),
            img.labels.shape()
        )));
    }
    Ok(img)
}

/// Thread-safe cache of loaded images and their feature pyramids.
pub struct ImageStore {
    index: DatasetIndex,
    source: FeatureSource,
    images: Mutex<HashMap<usize, Arc<LabeledImage>>>,
    pyramids: Mutex<HashMap<usize, Arc<FeaturePyramid>>>,
}

impl ImageStore {
    pub fn new(index: DatasetIndex, source: FeatureSource) -> Self {
        Self {
            index,
            source,
            images: Mutex::new(HashMap::new()),
            pyramids: Mutex::new(HashMap::new()),
        }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    pub fn image(&self, i: usize) -> Result<Arc<LabeledImage>> {
        if let Some(img) = self.images.lock().expect("image cache poisoned").get(&i) {
            return Ok(img.clone());
        }
        let entry = self
            .index
            .images
            .get(i)
            .ok_or_else(|| Error::Usage(format!("image index {} out of range", i)))?;
        let img = Arc::new(load_image(&self.index, entry)?);
        self.images
            .lock()
            .expect("image cache poisoned")
            .insert(i, img.clone());
        Ok(img)
    }

    pub fn pyramid(&self, exec: Exec, i: usize) -> Result<Arc<FeaturePyramid>> {
        if let Some(p) = self.pyramids.lock().expect("pyramid cache poisoned").get(&i) {
            return Ok(p.clone());
        }
        let id = &self.index.images[i].id;
        let p = Arc::new(self.source.pyramid(exec, id, || Ok(self.image(i)?.image.clone()))?);
        self.pyramids
            .lock()
            .expect("pyramid cache poisoned")
            .insert(i, p.clone());
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "# classes: 4\na\timgs/a.msht\t0,2\nb\tSYNTH:seed=3;size=32x32;shapes=1\t1\n";
        let idx = DatasetIndex::parse(text, "/data").unwrap();
        assert_eq!(idx.classes, 4);
        assert_eq!(idx.images.len(), 2);
        assert_eq!(idx.images[0].classes, BTreeSet::from([0, 2]));
        assert_eq!(idx.to_text(), text);
        assert_eq!(idx.images_with(1), vec![1]);
    }

    #[test]
    fn inferred_class_count() {
        let idx = DatasetIndex::parse("a\tx.msht\t5\n", "").unwrap();
        assert_eq!(idx.classes, 6);
    }

    #[test]
    fn malformed_lines_are_data_errors() {
        for bad in ["a\tx.msht\n", "a\tx.msht\t\n", "a\tx.msht\tq\n", "# classes: 2\na\tx\t3\n", "a\tx\t0\na\ty\t0\n"] {
            assert!(matches!(DatasetIndex::parse(bad, ""), Err(Error::Data(_))), "{:?}", bad);
        }
    }

    #[test]
    fn label_path_convention() {
        assert_eq!(label_path(Path::new("d/x.msht")), PathBuf::from("d/x.label.msht"));
    }

    #[test]
    fn class_mask_is_binary() {
        let li = LabeledImage {
            image: Tensor::zeros(&[3, 1, 3]),
            labels: Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap(),
        };
        assert_eq!(li.mask(1).data(), &[0.0, 0.0, 1.0]);
    }
}
