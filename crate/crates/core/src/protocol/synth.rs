//! Synthetic few-shot corpus: coloured geometric shapes on textured noise,
//! one shape type (and hue) per class, with exact label maps.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::protocol::dataset::{label_path, DatasetIndex, ImageEntry, ImageSource, LabeledImage};
use crate::tensor::Tensor;

pub const SHAPE_KINDS: usize = 8;

/// Everything needed to render one image deterministically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Class of each shape, left to right.
    pub shapes: Vec<usize>,
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shapes: Vec<String> = self.shapes.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "seed={};size={}x{};shapes={}",
            self.seed,
            self.height,
            self.width,
            shapes.join(",")
        )
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("synthetic spec `{}`: {}", s, what));
        let (mut seed, mut size, mut shapes) = (None, None, None);
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k.trim() {
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "size" => {
                    let (h, w) = v.split_once('x').ok_or_else(|| bad("size must be HxW"))?;
                    let h = h.parse::<usize>().map_err(|_| bad("bad height"))?;
                    let w = w.parse::<usize>().map_err(|_| bad("bad width"))?;
                    size = Some((h, w));
                }
                "shapes" => {
                    shapes = Some(
                        v.split(',')
                            .map(|c| c.parse::<usize>().map_err(|_| bad("bad shape class")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                other => return Err(bad(&format!("unknown key `{}`", other))),
            }
        }
        let (height, width) = size.ok_or_else(|| bad("missing size"))?;
        let spec = SynthSpec {
            seed: seed.ok_or_else(|| bad("missing seed"))?,
            height,
            width,
            shapes: shapes.ok_or_else(|| bad("missing shapes"))?,
        };
        if spec.shapes.is_empty() || height < 8 || width < 8 * spec.shapes.len() {
            return Err(bad("image too small for its shapes"));
        }
        Ok(spec)
    }
}

/// Fully saturated-ish colour for `class`, spaced by the golden angle in hue.
pub fn class_colour(class: usize) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Whether offset `(dy, dx)` from the centre lies inside shape `kind` of radius `r`.
fn inside(kind: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match kind % SHAPE_KINDS {
        0 => ay <= r && ax <= r,
        1 => dy * dy + dx * dx <= r * r,
        2 => dy >= -r && dy <= r && ax <= (dy + r) * 0.5,
        3 => ay + ax <= r,
        4 => (ay <= r * 0.35 && ax <= r) || (ax <= r * 0.35 && ay <= r),
        5 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
        6 => ay <= r * 0.45 && ax <= r,
        _ => ax <= r * 0.45 && ay <= r,
    }
}

impl SynthSpec {
    pub fn render(&self) -> LabeledImage {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let fy = rng.gen_range(0.1..0.5);
        let fx = rng.gen_range(0.1..0.5);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut image = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let wave = 0.08 * ((y as f64 * fy + x as f64 * fx + phase + c as f64).sin() + 1.0);
                    image[(c * h + y) * w + x] = (wave + rng.gen_range(0.0..0.3)) as f32;
                }
            }
        }
        let mut labels = vec![0.0f32; h * w];
        let strip = w / self.shapes.len();
        for (i, &class) in self.shapes.iter().enumerate() {
            let max_r = (strip.min(h) as f64 / 2.0 - 1.0).max(2.0);
            let r = rng.gen_range(max_r * 0.55..=max_r);
            let cy = rng.gen_range(r..=(h as f64 - 1.0 - r).max(r));
            let x0 = (i * strip) as f64;
            let cx = rng.gen_range(x0 + r..=(x0 + strip as f64 - 1.0 - r).max(x0 + r));
            let base = class_colour(class);
            let jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
            for y in 0..h {
                for x in i * strip..(i + 1) * strip {
                    if inside(class, y as f64 - cy, x as f64 - cx, r) {
                        labels[y * w + x] = (class + 1) as f32;
                        for c in 0..3 {
                            let noise = rng.gen_range(-0.04..0.04);
                            image[(c * h + y) * w + x] = (base[c] + jitter[c] + noise).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
        }
        LabeledImage {
            image: Tensor::new(&[3, h, w], image).expect("image shape"),
            labels: Tensor::new(&[1, h, w], labels).expect("label shape"),
        }
    }

    /// Classes with at least one labelled pixel.
    pub fn present_classes(&self) -> BTreeSet<usize> {
        let img = self.render();
        img.labels
            .data()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v as usize - 1)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 64,
            classes: 4,
            height: 64,
            width: 64,
            max_shapes: 2,
            seed: 0,
        }
    }
}

/// An index of on-the-fly `SYNTH:` images.
pub fn synth_index(cfg: &SynthConfig) -> Result<DatasetIndex> {
    if cfg.classes == 0 || cfg.max_shapes == 0 || cfg.images == 0 {
        return Err(Error::Config("synthetic corpus needs images, classes and shapes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let n = rng.gen_range(1..=cfg.max_shapes.min(cfg.classes));
        let shapes: Vec<usize> = sample(&mut rng, cfg.classes, n).into_iter().collect();
        let spec = SynthSpec {
            seed: rng.gen(),
            height: cfg.height,
            width: cfg.width,
            shapes,
        };
        let text = spec.to_string();
        let spec: SynthSpec = text.parse()?;
        let classes = spec.present_classes();
        images.push(ImageEntry {
            id: format!("synth{:05}", i),
            source: ImageSource::Synth(spec),
            classes,
        });
    }
    DatasetIndex::new(images, cfg.classes, "")
}

/// Renders every `SYNTH:` image of `index` into `dir` and returns the
/// equivalent path-based index (relative paths, so `dir` is self-contained).
pub fn materialize(index: &DatasetIndex, dir: &Path) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut images = Vec::with_capacity(index.images.len());
    for e in &index.images {
        let ImageSource::Synth(spec) = &e.source else {
            images.push(e.clone());
            continue;
        };
        let img = spec.render();
        let rel = Path::new("images").join(format!("{}.msht", e.id));
        crate::io::write_atomic(&dir.join(&rel), &img.image.to_bytes())?;
        crate::io::write_atomic(&label_path(&dir.join(&rel)), &img.labels.to_bytes())?;
        images.push(ImageEntry {
            id: e.id.clone(),
            source: ImageSource::Path(rel),
            classes: e.classes.clone(),
        });
    }
    DatasetIndex::new(images, index.classes, dir)
}
