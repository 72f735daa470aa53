//! Frozen multi-block feature extraction, the `MSHP` pyramid container, and
//! mask resampling to feature resolution.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, conv2d_strided};
use crate::par::Exec;
use crate::params::{kaiming_uniform, ParamSet};
use crate::tensor::{read_exact, Scalar, Tensor};

pub const PYRAMID_MAGIC: &[u8; 4] = b"MSHP";
pub const PYRAMID_VERSION: u8 = 1;
/// Index of the first (finest) block.
pub const FIRST_BLOCK: usize = 2;

/// Per-layer feature maps of one block; all layers share `(h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock<T: Scalar = f32> {
    pub index: usize,
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureBlock<T> {
    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.layers[0].chw();
        (h, w)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.chw().0).collect()
    }
}

/// Feature maps for one image, finest block first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    blocks: Vec<FeatureBlock<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Validates layer agreement within blocks and strictly shrinking blocks.
    pub fn new(layers_per_block: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        if layers_per_block.is_empty() {
            return Err(Error::Data("pyramid has no blocks".into()));
        }
        let mut blocks = Vec::with_capacity(layers_per_block.len());
        let mut prev: Option<(usize, usize)> = None;
        for (i, layers) in layers_per_block.into_iter().enumerate() {
            let index = FIRST_BLOCK + i;
            let Some(first) = layers.first() else {
                return Err(Error::Data(format!("block {} has no layers", index)));
            };
            let (_, h, w) = first.chw();
            for l in &layers {
                if l.rank() != 3 {
                    return Err(Error::Data(format!(
                        "block {} layer has shape {:?}, expected [d, h, w]",
                        index,
                        l.shape()
                    )));
                }
                let (_, lh, lw) = l.chw();
                if (lh, lw) != (h, w) {
                    return Err(Error::Data(format!(
                        "block {} layers disagree on spatial size: {}x{} vs {}x{}",
                        index, lh, lw, h, w
                    )));
                }
            }
            if let Some((ph, pw)) = prev {
                if h >= ph || w >= pw {
                    return Err(Error::Data(format!(
                        "block {} ({}x{}) is not smaller than block {} ({}x{})",
                        index,
                        h,
                        w,
                        index - 1,
                        ph,
                        pw
                    )));
                }
            }
            prev = Some((h, w));
            blocks.push(FeatureBlock { index, layers });
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[FeatureBlock<T>] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| b.hw()).collect()
    }

    /// Feature dimensions per block and layer.
    pub fn layout(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.dims()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            blocks: self
                .blocks
                .iter()
                .map(|b| FeatureBlock {
                    index: b.index,
                    layers: b.layers.iter().map(|l| l.cast()).collect(),
                })
                .collect(),
        }
    }
}

impl FeaturePyramid<f32> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PYRAMID_MAGIC)?;
        w.write_all(&[PYRAMID_VERSION, self.blocks.len() as u8])?;
        for b in &self.blocks {
            w.write_all(&[b.layers.len() as u8])?;
            for l in &b.layers {
                l.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 6];
        read_exact(r, &mut head)?;
        if &head[..4] != PYRAMID_MAGIC {
            return Err(Error::Format("bad pyramid magic".into()));
        }
        if head[4] != PYRAMID_VERSION {
            return Err(Error::Format(format!("unsupported pyramid version {}", head[4])));
        }
        let mut blocks = Vec::with_capacity(head[5] as usize);
        for _ in 0..head[5] {
            let mut n = [0u8; 1];
            read_exact(r, &mut n)?;
            let layers = (0..n[0])
                .map(|_| Tensor::read_from(r))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(layers);
        }
        Self::new(blocks)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let p = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format("trailing bytes after pyramid".into()));
        }
        Ok(p)
    }
}

pub fn load_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid<f32>> {
    FeaturePyramid::from_bytes(&fs::read(path)?)
}

/// Binary masks at every block resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid<T: Scalar = f32> {
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> MaskPyramid<T> {
    pub fn cast<U: Scalar>(&self) -> MaskPyramid<U> {
        MaskPyramid {
            masks: self.masks.iter().map(|m| m.cast()).collect(),
        }
    }
}

/// Nearest-neighbour resampling with centre-aligned sampling; stays binary.
pub fn resample_nearest<T: Scalar>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (_, h, w) = mask.chw();
    let src = mask.data();
    Tensor::from_fn(&[1, out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        let sy = (((2 * y + 1) * h) / (2 * out_h)).min(h - 1);
        let sx = (((2 * x + 1) * w) / (2 * out_w)).min(w - 1);
        src[sy * w + sx]
    })
}

pub fn downsample_mask<T: Scalar, U: Scalar>(mask: &Tensor<T>, pyramid: &FeaturePyramid<U>) -> Result<MaskPyramid<T>> {
    if let Some(v) = mask.data().iter().find(|v| **v != T::zero() && v.to_f64() != 1.0) {
        return Err(Error::Data(format!("mask value {:?} outside {{0,1}}", v)));
    }
    let masks = pyramid
        .blocks
        .iter()
        .map(|b| {
            let (h, w) = b.hw();
            resample_nearest(mask, h, w)
        })
        .collect();
    Ok(MaskPyramid { masks })
}

/// Spatial size after `stages` stride-2 stages: each stage maps `n` to `ceil(n/2)`.
fn halve(n: usize, stages: usize) -> usize {
    (0..stages).fold(n, |acc, _| acc.div_ceil(2))
}

/// Block resolutions for an input of `h x w` with `stem` stride-2 stages
/// before the first block and one stride-2 entry per block.
pub fn pyramid_sizes(h: usize, w: usize, stem: usize, blocks: usize) -> Vec<(usize, usize)> {
    (1..=blocks)
        .map(|b| (halve(h, stem + b), halve(w, stem + b)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyBackboneConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stem_channels: usize,
    /// Stride-2 stages before the first block.
    pub stem_downsamples: usize,
    pub channels: Vec<usize>,
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TinyBackboneConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 64,
            stem_channels: 16,
            stem_downsamples: 1,
            channels: vec![16, 32, 64],
            layers: vec![2, 2, 2],
            seed: 0,
        }
    }
}

impl TinyBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "backbone needs matching non-empty channel ({}) and layer ({}) lists",
                self.channels.len(),
                self.layers.len()
            )));
        }
        if self.layers.iter().any(|&l| l == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("every block needs >= 1 layer and channel".into()));
        }
        let div = 1usize << (self.channels.len() + self.stem_downsamples);
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {}",
                self.input_h, self.input_w, div
            )));
        }
        Ok(())
    }

    pub fn block_sizes(&self) -> Vec<(usize, usize)> {
        pyramid_sizes(self.input_h, self.input_w, self.stem_downsamples, self.channels.len())
    }

    /// Feature dimension of every layer, per block.
    pub fn layout(&self) -> Vec<Vec<usize>> {
        self.channels
            .iter()
            .zip(&self.layers)
            .map(|(&c, &l)| vec![c; l])
            .collect()
    }
}

/// Randomly initialised, frozen convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    config: TinyBackboneConfig,
    params: ParamSet<f32>,
}

impl TinyBackbone {
    pub fn new(config: TinyBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut conv = |name: String, cin: usize, cout: usize, params: &mut ParamSet<f32>| -> Result<()> {
            params.insert(format!("{}.w", name), kaiming_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng))?;
            params.insert(format!("{}.b", name), Tensor::zeros(&[cout]))?;
            Ok(())
        };
        let mut cin = 3;
        for s in 0..config.stem_downsamples {
            conv(format!("stem{}", s), cin, config.stem_channels, &mut params)?;
            cin = config.stem_channels;
        }
        for (bi, (&c, &l)) in config.channels.iter().zip(&config.layers).enumerate() {
            for li in 0..l {
                conv(format!("block{}.layer{}", FIRST_BLOCK + bi, li + 1), cin, c, &mut params)?;
                cin = c;
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TinyBackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn layer(&self, exec: Exec, name: &str, x: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
        let w = &self.params.get(&format!("{}.w", name)).expect("known layer").value;
        let b = &self.params.get(&format!("{}.b", name)).expect("known layer").value;
        Ok(ops::activate(&conv2d_strided(exec, x, w, b, stride)?, ops::Activation::Relu))
    }

    pub fn extract(&self, image: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        self.extract_with(Exec::default(), image)
    }

    pub fn extract_with(&self, exec: Exec, image: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        let cfg = &self.config;
        if image.shape() != [3, cfg.input_h, cfg.input_w] {
            return Err(Error::Shape(format!(
                "image {:?} does not match backbone input [3, {}, {}]",
                image.shape(),
                cfg.input_h,
                cfg.input_w
            )));
        }
        let mut x = image.clone();
        for s in 0..cfg.stem_downsamples {
            x = self.layer(exec, &format!("stem{}", s), &x, 2)?;
        }
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        for (bi, &l) in cfg.layers.iter().enumerate() {
            let mut layers = Vec::with_capacity(l);
            for li in 0..l {
                let stride = if li == 0 { 2 } else { 1 };
                x = self.layer(exec, &format!("block{}.layer{}", FIRST_BLOCK + bi, li + 1), &x, stride)?;
                layers.push(x.clone());
            }
            blocks.push(layers);
        }
        FeaturePyramid::new(blocks)
    }
}

pub fn extract_pyramid(image: &Tensor<f32>, backbone: &TinyBackbone) -> Result<FeaturePyramid<f32>> {
    backbone.extract(image)
}

/// Where feature pyramids come from: the tiny backbone, or files named
/// `<image id>.mshp` in a replay directory.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    Tiny(TinyBackbone),
    Replay(PathBuf),
}

impl FeatureSource {
    pub fn pyramid(&self, exec: Exec, image_id: &str, image: impl FnOnce() -> Result<Tensor<f32>>) -> Result<FeaturePyramid<f32>> {
        match self {
            FeatureSource::Tiny(b) => b.extract_with(exec, &image()?),
            FeatureSource::Replay(dir) => load_pyramid(dir.join(format!("{}.mshp", image_id))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(cfg: &TinyBackboneConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, cfg.input_h, cfg.input_w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn sixty_four_pixel_input_block_sizes() {
        let cfg = TinyBackboneConfig::default();
        let bb = TinyBackbone::new(cfg.clone()).unwrap();
        let p = bb.extract(&random_image(&cfg, 1)).unwrap();
        assert_eq!(p.block_sizes(), vec![(16, 16), (8, 8), (4, 4)]);
        assert_eq!(p.layout(), vec![vec![16, 16], vec![32, 32], vec![64, 64]]);
    }

    #[test]
    fn full_resolution_sizes() {
        assert_eq!(pyramid_sizes(473, 473, 2, 3), vec![(60, 60), (30, 30), (15, 15)]);
    }

    #[test]
    fn deterministic_extraction() {
        let cfg = TinyBackboneConfig::default();
        let bb = TinyBackbone::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 2);
        assert_eq!(bb.extract(&img).unwrap(), bb.extract(&img).unwrap());
        let other = TinyBackbone::new(cfg.clone()).unwrap();
        assert_eq!(bb.extract(&img).unwrap(), other.extract(&img).unwrap());
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let bb = TinyBackbone::new(TinyBackboneConfig::default()).unwrap();
        assert!(matches!(bb.extract(&Tensor::zeros(&[3, 32, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn config_divisibility() {
        let cfg = TinyBackboneConfig { input_h: 40, ..Default::default() };
        assert!(matches!(TinyBackbone::new(cfg), Err(Error::Config(_))));
        let cfg = TinyBackboneConfig { layers: vec![2, 0, 2], ..Default::default() };
        assert!(TinyBackbone::new(cfg).is_err());
    }

    #[test]
    fn pyramid_round_trip_and_truncation() {
        let cfg = TinyBackboneConfig::default();
        let bb = TinyBackbone::new(cfg.clone()).unwrap();
        let p = bb.extract(&random_image(&cfg, 3)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(FeaturePyramid::from_bytes(&bytes).unwrap(), p);
        for cut in [3, 7, 100, bytes.len() - 1] {
            assert!(matches!(FeaturePyramid::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn non_decreasing_blocks_rejected_with_block_name() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(PYRAMID_MAGIC);
        bytes.extend_from_slice(&[PYRAMID_VERSION, 3]);
        for (c, s) in [(2usize, 8usize), (2, 4), (2, 4)] {
            bytes.push(1);
            Tensor::<f32>::zeros(&[c, s, s]).write_to(&mut bytes).unwrap();
        }
        match FeaturePyramid::from_bytes(&bytes) {
            Err(Error::Data(msg)) => assert!(msg.contains("block 4"), "{}", msg),
            other => panic!("expected data error, got {:?}", other),
        }
    }

    #[test]
    fn mask_downsampling() {
        let cfg = TinyBackboneConfig { input_h: 16, input_w: 16, channels: vec![2, 2], layers: vec![1, 1], stem_downsamples: 0, ..Default::default() };
        let p = FeaturePyramid::new(vec![vec![Tensor::<f32>::zeros(&[2, 4, 4])], vec![Tensor::zeros(&[2, 2, 2])]]).unwrap();
        let _ = cfg;
        let ones = downsample_mask(&Tensor::full(&[1, 16, 16], 1.0f32), &p).unwrap();
        assert!(ones.masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)));
        let zeros = downsample_mask(&Tensor::<f32>::zeros(&[1, 16, 16]), &p).unwrap();
        assert!(zeros.masks.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        let left = Tensor::from_fn(&[1, 16, 16], |i| if i % 16 < 8 { 1.0f32 } else { 0.0 });
        let mp = downsample_mask(&left, &p).unwrap();
        let want: Vec<f32> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(mp.masks[0].data(), want.as_slice());
    }
}
