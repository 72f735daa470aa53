//! Masked feature selection, class prototypes, generative prototype
//! similarity (GPS), clamped cosine similarity, and block energy maps.

use crate::error::{Error, Result};
use crate::ops::activation::sigmoid_f64;
use crate::par::Exec;
use crate::tensor::{Scalar, Tensor};

/// Norms below this are treated as zero; their cosine is defined as 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Feature vectors at the mask-positive positions of one feature map, in
/// row-major scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeatureSet<T: Scalar = f32> {
    dim: usize,
    vectors: Vec<T>,
}

impl<T: Scalar> MaskedFeatureSet<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[T] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Builds a set directly from vectors (all of dimension `dim`).
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<T>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be >= 1".into()));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Shape(format!(
                "vector of dimension {} in a {}-dimensional set",
                v.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            vectors: vectors.into_iter().flatten().collect(),
        })
    }
}

pub fn masked_select<T: Scalar>(feature: &Tensor<T>, mask: &Tensor<T>) -> Result<MaskedFeatureSet<T>> {
    let (d, h, w) = feature.chw();
    let (mc, mh, mw) = mask.chw();
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match feature {}x{}",
            mask.shape(),
            h,
            w
        )));
    }
    let plane = h * w;
    let f = feature.data();
    let mut vectors = Vec::new();
    for (pos, &m) in mask.data().iter().enumerate() {
        match m.to_f64() {
            v if v == 1.0 => vectors.extend((0..d).map(|c| f[c * plane + pos])),
            v if v == 0.0 => {}
            v => return Err(Error::Data(format!("mask value {} outside {{0,1}}", v))),
        }
    }
    Ok(MaskedFeatureSet { dim: d, vectors })
}

/// Mean feature vector of a masked set; the zero vector when the set is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T: Scalar = f32> {
    pub vector: Tensor<T>,
}

pub fn prototype<T: Scalar>(set: &MaskedFeatureSet<T>) -> Prototype<T> {
    let n = set.count();
    let mut acc = vec![0.0f64; set.dim];
    for v in set.iter() {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x.to_f64();
        }
    }
    let vector = Tensor::from_fn(&[set.dim], |i| {
        if n == 0 {
            T::zero()
        } else {
            T::from_f64(acc[i] / n as f64)
        }
    });
    Prototype { vector }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Gps,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T: Scalar = f32> {
    pub values: Tensor<T>,
    pub kind: SimilarityKind,
}

impl<T: Scalar> SimilarityMap<T> {
    /// GPS maps must lie in (0,1), cosine maps in [0,1].
    pub fn check_range(&self) -> Result<()> {
        let bad = match self.kind {
            SimilarityKind::Gps => self
                .values
                .data()
                .iter()
                .find(|v| !(v.to_f64() > 0.0 && v.to_f64() < 1.0)),
            SimilarityKind::Cosine => self
                .values
                .data()
                .iter()
                .find(|v| !(v.to_f64() >= 0.0 && v.to_f64() <= 1.0)),
        };
        match bad {
            Some(v) => Err(Error::Numerical(format!(
                "{:?} similarity value {:?} out of range",
                self.kind, v
            ))),
            None => Ok(()),
        }
    }
}

/// Per-(block, layer) GPS weight `W` of shape `[1, 2d]`, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GpsHead<T: Scalar = f32> {
    pub w: Tensor<T>,
}

fn gps_check<T: Scalar>(proto: &Tensor<T>, query: &Tensor<T>, w: &Tensor<T>) -> Result<usize> {
    let (d, _, _) = query.chw();
    if proto.len() != d || w.len() != 2 * d {
        return Err(Error::Shape(format!(
            "gps expects prototype {} and weight {} for {}-channel query, got {} and {}",
            d,
            2 * d,
            d,
            proto.len(),
            w.len()
        )));
    }
    Ok(d)
}

/// `sigmoid(W · [prototype ‖ query(x, y)])` at every query position.
///
/// Outputs are kept inside the open unit interval at working precision.
pub fn gps_forward<T: Scalar>(proto: &Tensor<T>, query: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d = gps_check(proto, query, w)?;
    let (_, h, wd) = query.chw();
    let plane = h * wd;
    let wv = w.data();
    let bias: f64 = (0..d).map(|i| wv[i].to_f64() * proto.data()[i].to_f64()).sum();
    let mut logits = vec![bias; plane];
    let q = query.data();
    for c in 0..d {
        let wc = wv[d + c].to_f64();
        for (l, x) in logits.iter_mut().zip(&q[c * plane..(c + 1) * plane]) {
            *l += wc * x.to_f64();
        }
    }
    let (lo, hi) = (T::above_zero(), T::below_one());
    let out = logits
        .into_iter()
        .map(|z| {
            let s = T::from_f64(sigmoid_f64(z));
            if s < lo {
                lo
            } else if s > hi {
                hi
            } else {
                s
            }
        })
        .collect();
    Tensor::new(&[1, h, wd], out)
}

pub struct GpsGrads<T: Scalar> {
    pub proto: Tensor<T>,
    pub query: Tensor<T>,
    pub w: Tensor<T>,
}

pub fn gps_backward<T: Scalar>(
    proto: &Tensor<T>,
    query: &Tensor<T>,
    w: &Tensor<T>,
    out: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<GpsGrads<T>> {
    let d = gps_check(proto, query, w)?;
    let (_, h, wd) = query.chw();
    let plane = h * wd;
    let gz: Vec<f64> = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(s, g)| {
            let s = s.to_f64();
            g.to_f64() * s * (1.0 - s)
        })
        .collect();
    let gz_sum: f64 = gz.iter().sum();
    let wv = w.data();
    let q = query.data();
    let mut gw = vec![T::zero(); 2 * d];
    for i in 0..d {
        gw[i] = T::from_f64(proto.data()[i].to_f64() * gz_sum);
        let dot: f64 = q[i * plane..(i + 1) * plane]
            .iter()
            .zip(&gz)
            .map(|(x, g)| x.to_f64() * g)
            .sum();
        gw[d + i] = T::from_f64(dot);
    }
    let gproto = Tensor::from_fn(&[d], |i| T::from_f64(wv[i].to_f64() * gz_sum));
    let gquery = Tensor::from_fn(query.shape(), |k| {
        T::from_f64(wv[d + k / plane].to_f64() * gz[k % plane])
    });
    Ok(GpsGrads {
        proto: gproto,
        query: gquery,
        w: Tensor::new(w.shape(), gw)?,
    })
}

pub fn gps<T: Scalar>(prototype: &Prototype<T>, query: &Tensor<T>, head: &GpsHead<T>) -> Result<SimilarityMap<T>> {
    let values = gps_forward(&prototype.vector, query, &head.w)?;
    let map = SimilarityMap {
        values,
        kind: SimilarityKind::Gps,
    };
    map.check_range()?;
    Ok(map)
}

/// Result of [`cosine_sim`]; `degenerate` flags an empty support set.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineOutput<T: Scalar = f32> {
    pub map: SimilarityMap<T>,
    pub degenerate: bool,
}

/// Mean over support vectors of `relu(cos(x_q, x_s))` at each query position.
pub fn cosine_sim<T: Scalar>(query: &Tensor<T>, set: &MaskedFeatureSet<T>) -> Result<CosineOutput<T>> {
    cosine_sim_with(Exec::default(), query, set)
}

pub fn cosine_sim_with<T: Scalar>(
    exec: Exec,
    query: &Tensor<T>,
    set: &MaskedFeatureSet<T>,
) -> Result<CosineOutput<T>> {
    let (d, h, w) = query.chw();
    if set.dim != d {
        return Err(Error::Shape(format!(
            "support vectors have dimension {}, query has {}",
            set.dim, d
        )));
    }
    let plane = h * w;
    if set.is_empty() {
        return Ok(CosineOutput {
            map: SimilarityMap {
                values: Tensor::zeros(&[1, h, w]),
                kind: SimilarityKind::Cosine,
            },
            degenerate: true,
        });
    }
    // Unit support vectors; zero-norm vectors stay zero so their cosine is 0.
    let n = set.count();
    let mut unit = vec![0.0f64; n * d];
    for (i, v) in set.iter().enumerate() {
        let norm = v.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
        if norm >= ZERO_NORM {
            for (u, x) in unit[i * d..(i + 1) * d].iter_mut().zip(v) {
                *u = x.to_f64() / norm;
            }
        }
    }
    let q = query.data();
    let values = exec.map_range(plane, |pos| {
        let xq: Vec<f64> = (0..d).map(|c| q[c * plane + pos].to_f64()).collect();
        let qn = xq.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn < ZERO_NORM {
            return T::zero();
        }
        let total: f64 = unit
            .chunks_exact(d)
            .map(|u| {
                let cos = u.iter().zip(&xq).map(|(a, b)| a * b).sum::<f64>() / qn;
                cos.clamp(0.0, 1.0)
            })
            .sum();
        T::from_f64((total / n as f64).min(1.0))
    });
    let map = SimilarityMap {
        values: Tensor::new(&[1, h, w], values)?,
        kind: SimilarityKind::Cosine,
    };
    map.check_range()?;
    Ok(CosineOutput {
        map,
        degenerate: false,
    })
}

/// Elementwise mean of the similarity maps of one block.
pub fn energy_map<T: Scalar>(maps: &[SimilarityMap<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("energy map of an empty list".into()))?;
    let shape = first.values.shape().to_vec();
    let mut acc = vec![0.0f64; first.values.len()];
    for m in maps {
        if m.values.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "energy map inputs differ in shape: {:?} vs {:?}",
                m.values.shape(),
                shape
            )));
        }
        for (a, v) in acc.iter_mut().zip(m.values.data()) {
            *a += v.to_f64();
        }
    }
    let l = maps.len() as f64;
    Tensor::new(&shape, acc.into_iter().map(|a| T::from_f64(a / l)).collect())
}
