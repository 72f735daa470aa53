//! Symmetric merging blocks, K-shot aggregation, the multi-scale pyramid
//! merge, segmentation heads, and the combined intermediate/final loss.
//!
//! Per block `b`, for every shot:
//!
//! ```text
//!   GPS maps [L_b,h,w] -> block conv (1x1 -> relu -> 3x3 -> relu) ─┐
//!   CS maps  [L_b,h,w] -> block conv (1x1 -> relu -> 3x3 -> relu) ─┤
//! ```
//!
//! the branch outputs are averaged over shots, refined by the shot convs
//! (atrous {1,2,4} for GPS, a single 3x3 for CS), concatenated, fused by a
//! 3x3 conv with channel attention into the block's hyper feature, and decoded
//! by an intermediate head. Hyper features are then merged coarse-to-fine.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, MaskPyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::attention::{reduced_width, REDUCTION_RATIO};
use crate::par::Exec;
use crate::params::{kaiming_uniform, ParamSet};
use crate::similarity::{self, cosine_sim_with, masked_select, prototype, SimilarityKind, SimilarityMap};
use crate::tensor::{read_exact, Scalar, Tensor};

pub const DEFAULT_HIDDEN: usize = 64;
pub const ATROUS_RATES: [usize; 3] = [1, 2, 4];

/// Which similarity branches the network instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimMode {
    Both,
    GpsOnly,
    CosineOnly,
}

impl SimMode {
    pub fn uses_gps(self) -> bool {
        self != SimMode::CosineOnly
    }

    pub fn uses_cosine(self) -> bool {
        self != SimMode::GpsOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            SimMode::Both => "both",
            SimMode::GpsOnly => "gps",
            SimMode::CosineOnly => "cosine",
        }
    }

    fn branches(self) -> Vec<Branch> {
        let mut v = Vec::new();
        if self.uses_gps() {
            v.push(Branch::Gps);
        }
        if self.uses_cosine() {
            v.push(Branch::Cosine);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Gps,
    Cosine,
}

impl Branch {
    fn tag(self) -> &'static str {
        match self {
            Branch::Gps => "gps",
            Branch::Cosine => "cos",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Feature dimension of every layer, per block, finest block first.
    pub layout: Vec<Vec<usize>>,
    pub hidden: usize,
    pub sim: SimMode,
}

impl NetConfig {
    pub fn new(layout: Vec<Vec<usize>>, hidden: usize, sim: SimMode) -> Self {
        Self { layout, hidden, sim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.is_empty() || self.layout.iter().any(|b| b.is_empty()) {
            return Err(Error::Config("network needs >= 1 block with >= 1 layer".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        reduced_width(self.hidden, REDUCTION_RATIO)?;
        Ok(())
    }
}

/// Per-shot similarity maps of one block, stacked over layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack<T: Scalar = f32> {
    pub block: usize,
    pub shot: usize,
    pub gps_layers: Option<Tensor<T>>,
    pub cos_layers: Option<Tensor<T>>,
}

/// Fused multi-layer, multi-similarity feature of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperFeature<T: Scalar = f32> {
    pub block: usize,
    pub channels: Tensor<T>,
}

/// Two-channel (background, foreground) logits at query resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits<T: Scalar = f32> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> SegLogits<T> {
    pub fn new(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 3 || logits.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "segmentation logits must be [2, H, W], got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits })
    }

    /// Per-pixel argmax; ties resolve to background.
    pub fn mask(&self) -> Vec<u8> {
        let (_, h, w) = self.logits.chw();
        let n = h * w;
        let d = self.logits.data();
        (0..n).map(|i| (d[n + i] > d[i]) as u8).collect()
    }
}

/// Components of the training objective `mean(inner) + outer`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub inner: Vec<f64>,
    pub outer: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_components(inner: Vec<f64>, outer: f64) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::Usage("loss needs at least one intermediate term".into()));
        }
        let total = inner.iter().sum::<f64>() / inner.len() as f64 + outer;
        Ok(Self { inner, outer, total })
    }
}

pub fn total_loss<T: Scalar>(inner: &[SegLogits<T>], final_logits: &SegLogits<T>, target: &Tensor<T>) -> Result<LossReport> {
    let inner = inner
        .iter()
        .map(|l| crate::ops::cross_entropy(&l.logits, target))
        .collect::<Result<Vec<_>>>()?;
    let outer = crate::ops::cross_entropy(&final_logits.logits, target)?;
    LossReport::from_components(inner, outer)
}

/// One support example at feature resolution.
#[derive(Clone, Debug)]
pub struct ShotInput<T: Scalar = f32> {
    pub features: FeaturePyramid<T>,
    pub masks: MaskPyramid<T>,
}

/// Everything the network consumes for one episode.
#[derive(Clone, Debug)]
pub struct EpisodeInput<T: Scalar = f32> {
    pub query: FeaturePyramid<T>,
    pub shots: Vec<ShotInput<T>>,
    pub out_size: (usize, usize),
}

impl<T: Scalar> EpisodeInput<T> {
    pub fn cast<U: Scalar>(&self) -> EpisodeInput<U> {
        EpisodeInput {
            query: self.query.cast(),
            shots: self
                .shots
                .iter()
                .map(|s| ShotInput {
                    features: s.features.cast(),
                    masks: s.masks.cast(),
                })
                .collect(),
            out_size: self.out_size,
        }
    }
}

/// Graph handles produced by [`MshNet::forward`].
pub struct ForwardVars {
    /// Intermediate logits per block, finest block first.
    pub inner: Vec<Var>,
    pub final_logits: Var,
    /// Hyper features per block, finest block first.
    pub hyper: Vec<Var>,
    /// True when some shot had an empty mask at some block resolution.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MshNet {
    config: NetConfig,
}

/// Lazily materialised parameter nodes for one graph.
struct Binder<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    vars: HashMap<usize, Var>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{}`", name)))?;
        Ok(*self
            .vars
            .entry(id)
            .or_insert_with(|| g.param(id, self.params.value(id).clone())))
    }

    fn conv(&mut self, g: &mut Graph<T>, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
        let w = self.get(g, &format!("{}.w", prefix))?;
        let b = self.get(g, &format!("{}.b", prefix))?;
        g.conv2d(x, w, b, dilation)
    }

    fn conv_relu(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let c = self.conv(g, x, prefix, 1)?;
        Ok(g.relu(c))
    }
}

fn block_tag(b: usize) -> String {
    format!("b{}", b + crate::backbone::FIRST_BLOCK)
}

impl MshNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// `(name, shape, fan_in)` of every trainable tensor, in a fixed order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = self.config.hidden;
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
            specs.push((format!("{}.w", name), vec![cout, cin, k, k], cin * k * k));
            specs.push((format!("{}.b", name), vec![cout], 0));
        };
        let branches = self.config.sim.branches();
        for (bi, dims) in self.config.layout.iter().enumerate() {
            let bt = block_tag(bi);
            let layers = dims.len();
            if self.config.sim.uses_gps() {
                for (li, &d) in dims.iter().enumerate() {
                    specs.push((format!("{}.gps.l{}.w", bt, li + 1), vec![1, 2 * d], 2 * d));
                }
            }
            for br in &branches {
                let p = format!("{}.{}", bt, br.tag());
                conv(&mut specs, format!("{}.block.c1", p), layers, c, 1);
                conv(&mut specs, format!("{}.block.c3", p), c, c, 3);
                match br {
                    Branch::Gps => {
                        for r in ATROUS_RATES {
                            conv(&mut specs, format!("{}.shot.d{}", p, r), c, c, 3);
                        }
                    }
                    Branch::Cosine => conv(&mut specs, format!("{}.shot.c3", p), c, c, 3),
                }
            }
            conv(&mut specs, format!("{}.merge", bt), c * branches.len(), c, 3);
            let r = c / REDUCTION_RATIO;
            specs.push((format!("{}.merge.att.w1", bt), vec![r, c], c));
            specs.push((format!("{}.merge.att.b1", bt), vec![r], 0));
            specs.push((format!("{}.merge.att.w2", bt), vec![c, r], r));
            specs.push((format!("{}.merge.att.b2", bt), vec![c], 0));
            conv(&mut specs, format!("{}.head", bt), c, 2, 1);
        }
        for bi in 0..self.config.layout.len() - 1 {
            conv(&mut specs, format!("fuse.{}", block_tag(bi)), 2 * c, c, 3);
        }
        conv(&mut specs, "final".into(), c, 2, 1);
        specs
    }

    /// Fan-in uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for (name, shape, fan_in) in self.param_specs() {
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                kaiming_uniform(&shape, fan_in, &mut rng)
            };
            ps.insert(name, t).expect("parameter names are unique");
        }
        ps
    }

    /// Checks that `params` has exactly this network's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, network expects {}",
                params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in specs {
            match params.get(&name) {
                Some(p) if p.value.shape() == shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::Data(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        name,
                        p.value.shape(),
                        shape
                    )))
                }
                None => return Err(Error::Data(format!("checkpoint lacks parameter `{}`", name))),
            }
        }
        Ok(())
    }

    fn check_episode<T: Scalar>(&self, ep: &EpisodeInput<T>) -> Result<()> {
        if ep.shots.is_empty() {
            return Err(Error::Usage("episode needs K >= 1 support shots".into()));
        }
        if ep.query.layout() != self.config.layout {
            return Err(Error::Shape(format!(
                "query features {:?} do not match network layout {:?}",
                ep.query.layout(),
                self.config.layout
            )));
        }
        let sizes = ep.query.block_sizes();
        for (k, s) in ep.shots.iter().enumerate() {
            if s.features.layout() != self.config.layout || s.features.block_sizes() != sizes {
                return Err(Error::Shape(format!("shot {} features are inconsistent with the query", k)));
            }
            if s.masks.masks.len() != sizes.len()
                || s.masks.masks.iter().zip(&sizes).any(|(m, &(h, w))| m.chw() != (1, h, w))
            {
                return Err(Error::Shape(format!("shot {} masks do not match block sizes", k)));
            }
        }
        Ok(())
    }

    /// Forward-only GPS and cosine maps for every block and shot.
    pub fn similarity_stacks<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ep: &EpisodeInput<T>,
        exec: Exec,
    ) -> Result<Vec<Vec<SimilarityStack<T>>>> {
        self.check_episode(ep)?;
        let mut out = Vec::new();
        for (bi, qblock) in ep.query.blocks().iter().enumerate() {
            let mut per_shot = Vec::new();
            for (k, shot) in ep.shots.iter().enumerate() {
                let mut gps_maps = Vec::new();
                let mut cos_maps = Vec::new();
                for (li, q) in qblock.layers.iter().enumerate() {
                    let set = masked_select(&shot.features.blocks()[bi].layers[li], &shot.masks.masks[bi])?;
                    if self.config.sim.uses_gps() {
                        let name = format!("{}.gps.l{}.w", block_tag(bi), li + 1);
                        let w = params
                            .get(&name)
                            .ok_or_else(|| Error::State(format!("missing parameter `{}`", name)))?;
                        let head = similarity::GpsHead { w: w.value.clone() };
                        gps_maps.push(similarity::gps(&prototype(&set), q, &head)?.values);
                    }
                    if self.config.sim.uses_cosine() {
                        cos_maps.push(cosine_sim_with(exec, q, &set)?.map.values);
                    }
                }
                let stack = |maps: Vec<Tensor<T>>| -> Result<Option<Tensor<T>>> {
                    if maps.is_empty() {
                        return Ok(None);
                    }
                    let refs: Vec<&Tensor<T>> = maps.iter().collect();
                    Tensor::concat_channels(&refs).map(Some)
                };
                per_shot.push(SimilarityStack {
                    block: qblock.index,
                    shot: k,
                    gps_layers: stack(gps_maps)?,
                    cos_layers: stack(cos_maps)?,
                });
            }
            out.push(per_shot);
        }
        Ok(out)
    }

    /// Per-block energy maps `(gps, cosine)`: the elementwise mean over the
    /// block's layer maps (and shots).
    pub fn energy_maps<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ep: &EpisodeInput<T>,
        exec: Exec,
    ) -> Result<Vec<(Option<Tensor<T>>, Option<Tensor<T>>)>> {
        let stacks = self.similarity_stacks(params, ep, exec)?;
        let split = |t: &Tensor<T>, kind: SimilarityKind| -> Vec<SimilarityMap<T>> {
            let (l, h, w) = t.chw();
            (0..l)
                .map(|i| SimilarityMap {
                    values: Tensor::new(&[1, h, w], t.plane(i).to_vec()).expect("plane shape"),
                    kind,
                })
                .collect()
        };
        stacks
            .iter()
            .map(|shots| {
                let gps: Vec<_> = shots
                    .iter()
                    .filter_map(|s| s.gps_layers.as_ref())
                    .flat_map(|t| split(t, SimilarityKind::Gps))
                    .collect();
                let cos: Vec<_> = shots
                    .iter()
                    .filter_map(|s| s.cos_layers.as_ref())
                    .flat_map(|t| split(t, SimilarityKind::Cosine))
                    .collect();
                Ok((
                    (!gps.is_empty()).then(|| similarity::energy_map(&gps)).transpose()?,
                    (!cos.is_empty()).then(|| similarity::energy_map(&cos)).transpose()?,
                ))
            })
            .collect()
    }

    fn build_block_conv<T: Scalar>(&self, g: &mut Graph<T>, pb: &mut Binder<'_, T>, stack: Var, bi: usize, br: Branch) -> Result<Var> {
        let p = format!("{}.{}.block", block_tag(bi), br.tag());
        let a = pb.conv_relu(g, stack, &format!("{}.c1", p))?;
        pb.conv_relu(g, a, &format!("{}.c3", p))
    }

    fn build_shot_conv<T: Scalar>(&self, g: &mut Graph<T>, pb: &mut Binder<'_, T>, avg: Var, bi: usize, br: Branch) -> Result<Var> {
        let p = format!("{}.{}.shot", block_tag(bi), br.tag());
        match br {
            Branch::Gps => {
                let parts = ATROUS_RATES
                    .iter()
                    .map(|&r| pb.conv(g, avg, &format!("{}.d{}", p, r), r))
                    .collect::<Result<Vec<_>>>()?;
                let s = g.add(&parts)?;
                Ok(g.relu(s))
            }
            Branch::Cosine => pb.conv_relu(g, avg, &format!("{}.c3", p)),
        }
    }

    fn build_merge_conv<T: Scalar>(&self, g: &mut Graph<T>, pb: &mut Binder<'_, T>, feats: &[Var], bi: usize) -> Result<Var> {
        let bt = block_tag(bi);
        let cat = g.concat(feats)?;
        let fused = pb.conv_relu(g, cat, &format!("{}.merge", bt))?;
        let att = [
            pb.get(g, &format!("{}.merge.att.w1", bt))?,
            pb.get(g, &format!("{}.merge.att.b1", bt))?,
            pb.get(g, &format!("{}.merge.att.w2", bt))?,
            pb.get(g, &format!("{}.merge.att.b2", bt))?,
        ];
        g.channel_attention(fused, att)
    }

    /// Builds the full K-shot forward pass on `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, ep: &EpisodeInput<T>) -> Result<ForwardVars> {
        self.check_episode(ep)?;
        let mut pb = Binder {
            params,
            vars: HashMap::new(),
        };
        let (out_h, out_w) = ep.out_size;
        let sim = self.config.sim;
        let mut degenerate = false;
        let mut hyper = Vec::new();
        let mut inner = Vec::new();
        for (bi, qblock) in ep.query.blocks().iter().enumerate() {
            let qvars: Vec<Var> = if sim.uses_gps() {
                qblock.layers.iter().map(|q| g.constant(q.clone())).collect()
            } else {
                Vec::new()
            };
            let mut shot_feats: Vec<Vec<Var>> = vec![Vec::new(); sim.branches().len()];
            for shot in &ep.shots {
                let mut gps_maps = Vec::new();
                let mut cos_maps = Vec::new();
                for (li, q) in qblock.layers.iter().enumerate() {
                    let set = masked_select(&shot.features.blocks()[bi].layers[li], &shot.masks.masks[bi])?;
                    degenerate |= set.is_empty();
                    if sim.uses_gps() {
                        let proto = g.constant(prototype(&set).vector);
                        let w = pb.get(g, &format!("{}.gps.l{}.w", block_tag(bi), li + 1))?;
                        gps_maps.push(g.gps(proto, qvars[li], w)?);
                    }
                    if sim.uses_cosine() {
                        cos_maps.push(cosine_sim_with(g.exec(), q, &set)?.map.values);
                    }
                }
                for (slot, br) in sim.branches().into_iter().enumerate() {
                    let stack = match br {
                        Branch::Gps => g.concat(&gps_maps)?,
                        Branch::Cosine => {
                            let refs: Vec<&Tensor<T>> = cos_maps.iter().collect();
                            g.constant(Tensor::concat_channels(&refs)?)
                        }
                    };
                    let f = self.build_block_conv(g, &mut pb, stack, bi, br)?;
                    shot_feats[slot].push(f);
                }
            }
            let mut branch_out = Vec::new();
            for (slot, br) in sim.branches().into_iter().enumerate() {
                let avg = g.mean(&shot_feats[slot])?;
                branch_out.push(self.build_shot_conv(g, &mut pb, avg, bi, br)?);
            }
            let h = self.build_merge_conv(g, &mut pb, &branch_out, bi)?;
            let head = pb.conv(g, h, &format!("{}.head", block_tag(bi)), 1)?;
            inner.push(g.resize(head, out_h, out_w)?);
            hyper.push(h);
        }
        let final_logits = self.build_pyramid_merge(g, &mut pb, &hyper, ep.out_size)?;
        Ok(ForwardVars {
            inner,
            final_logits,
            hyper,
            degenerate,
        })
    }

    /// Coarse-to-fine merge: upsample, concatenate with the finer block,
    /// 3x3 conv + relu; then a 1x1 head and upsampling to query size.
    fn build_pyramid_merge<T: Scalar>(&self, g: &mut Graph<T>, pb: &mut Binder<'_, T>, hyper: &[Var], out: (usize, usize)) -> Result<Var> {
        let Some(&coarsest) = hyper.last() else {
            return Err(Error::Usage("pyramid merge needs at least one block".into()));
        };
        let mut cur = coarsest;
        for bi in (0..hyper.len() - 1).rev() {
            let (_, h, w) = g.value(hyper[bi]).chw();
            let up = g.resize(cur, h, w)?;
            let cat = g.concat(&[up, hyper[bi]])?;
            cur = pb.conv_relu(g, cat, &format!("fuse.{}", block_tag(bi)))?;
        }
        let logits = pb.conv(g, cur, "final", 1)?;
        g.resize(logits, out.0, out.1)
    }

    fn eval_op<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        inputs: &[&Tensor<T>],
        build: impl FnOnce(&Self, &mut Graph<T>, &mut Binder<'_, T>, &[Var]) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new(Exec::Sequential);
        let mut pb = Binder {
            params,
            vars: HashMap::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
        let out = build(self, &mut g, &mut pb, &vars)?;
        Ok(g.value(out).clone())
    }

    /// 1x1 conv -> relu -> 3x3 conv -> relu over one shot's layer stack.
    pub fn block_conv<T: Scalar>(&self, stack: &Tensor<T>, branch: Branch, block: usize, params: &ParamSet<T>) -> Result<Tensor<T>> {
        let layers = self.config.layout.get(block).map(|d| d.len());
        if layers != Some(stack.chw().0) {
            return Err(Error::Shape(format!(
                "block {} stack has {} layers, expected {:?}",
                block,
                stack.chw().0,
                layers
            )));
        }
        self.eval_op(params, &[stack], |n, g, pb, v| n.build_block_conv(g, pb, v[0], block, branch))
    }

    /// Atrous {1,2,4} sum + relu (GPS) or 3x3 conv + relu (cosine) over the shot mean.
    pub fn shot_conv<T: Scalar>(&self, avg: &Tensor<T>, branch: Branch, block: usize, params: &ParamSet<T>) -> Result<Tensor<T>> {
        self.eval_op(params, &[avg], |n, g, pb, v| n.build_shot_conv(g, pb, v[0], block, branch))
    }

    /// Concatenation, 3x3 conv + relu, channel attention.
    pub fn merge_conv<T: Scalar>(&self, feats: &[&Tensor<T>], block: usize, params: &ParamSet<T>) -> Result<HyperFeature<T>> {
        let channels = self.eval_op(params, feats, |n, g, pb, v| n.build_merge_conv(g, pb, v, block))?;
        Ok(HyperFeature {
            block: block + crate::backbone::FIRST_BLOCK,
            channels,
        })
    }

    /// Coarse-to-fine fusion of hyper features (finest first) into final logits.
    pub fn pyramid_merge<T: Scalar>(&self, hyper: &[&Tensor<T>], out: (usize, usize), params: &ParamSet<T>) -> Result<SegLogits<T>> {
        SegLogits::new(self.eval_op(params, hyper, |n, g, pb, v| n.build_pyramid_merge(g, pb, v, out))?)
    }

    /// Forward pass returning final logits plus the per-block intermediates.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ep: &EpisodeInput<T>,
        exec: Exec,
    ) -> Result<(SegLogits<T>, Vec<SegLogits<T>>, Vec<HyperFeature<T>>)> {
        let mut g = Graph::new(exec);
        let fv = self.forward(&mut g, params, ep)?;
        let inner = fv
            .inner
            .iter()
            .map(|&v| SegLogits::new(g.value(v).clone()))
            .collect::<Result<Vec<_>>>()?;
        let hyper = fv
            .hyper
            .iter()
            .enumerate()
            .map(|(bi, &v)| HyperFeature {
                block: bi + crate::backbone::FIRST_BLOCK,
                channels: g.value(v).clone(),
            })
            .collect();
        Ok((SegLogits::new(g.value(fv.final_logits).clone())?, inner, hyper))
    }

    fn loss_graph<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ep: &EpisodeInput<T>,
        target: &Tensor<T>,
        exec: Exec,
    ) -> Result<(Graph<T>, LossReport, Vec<(Var, f64)>)> {
        let mut g = Graph::new(exec);
        let fv = self.forward(&mut g, params, ep)?;
        let inner_vars = fv
            .inner
            .iter()
            .map(|&v| g.cross_entropy(v, target))
            .collect::<Result<Vec<_>>>()?;
        let outer_var = g.cross_entropy(fv.final_logits, target)?;
        let scalar = |v: Var| g.value(v).data()[0].to_f64();
        let report = LossReport::from_components(inner_vars.iter().map(|&v| scalar(v)).collect(), scalar(outer_var))?;
        let n = inner_vars.len() as f64;
        let mut seeds: Vec<(Var, f64)> = inner_vars.iter().map(|&v| (v, 1.0 / n)).collect();
        seeds.push((outer_var, 1.0));
        Ok((g, report, seeds))
    }

    /// Loss of one episode and the ReLU sign signature of its forward pass.
    pub fn loss<T: Scalar>(&self, params: &ParamSet<T>, ep: &EpisodeInput<T>, target: &Tensor<T>, exec: Exec) -> Result<(LossReport, u64)> {
        let (g, report, _) = self.loss_graph(params, ep, target, exec)?;
        Ok((report, g.kink_signature()))
    }

    /// Loss and parameter gradients for one episode.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ep: &EpisodeInput<T>,
        target: &Tensor<T>,
        exec: Exec,
    ) -> Result<(LossReport, Vec<(usize, Tensor<T>)>, u64)> {
        let (g, report, seeds) = self.loss_graph(params, ep, target, exec)?;
        let grads = g.backward(&seeds)?;
        let out = grads.params().map(|(id, t)| (id, t.clone())).collect();
        Ok((report, out, g.kink_signature()))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSHC";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const MOMENTUM_SUFFIX: &str = ".m";

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
}

/// Serialises parameters and their momentum buffers (`MSHC`).
pub fn write_checkpoint(params: &ParamSet<f32>, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        write_name(w, &p.name)?;
        p.value.write_to(w)?;
        write_name(w, &format!("{}{}", p.name, MOMENTUM_SUFFIX))?;
        p.momentum.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamSet<f32>> {
    let mut head = [0u8; 9];
    read_exact(r, &mut head)?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", head[4])));
    }
    let count = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let name = read_name(r)?;
        let value = Tensor::read_from(r)?;
        let mname = read_name(r)?;
        if mname != format!("{}{}", name, MOMENTUM_SUFFIX) {
            return Err(Error::Format(format!(
                "expected momentum record for `{}`, found `{}`",
                name, mname
            )));
        }
        let m = Tensor::read_from(r)?;
        let id = ps.insert(name, value).map_err(|e| Error::Format(e.to_string()))?;
        ps.set_momentum(id, m).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(ps)
}

pub fn checkpoint_bytes(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let ps = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_episode;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (NetConfig, Vec<(usize, usize)>) {
        (NetConfig::new(vec![vec![3, 3], vec![4], vec![5]], 8, SimMode::Both), vec![(8, 8), (4, 4), (2, 2)])
    }

    fn setup(k: usize, seed: u64) -> (MshNet, ParamSet<f32>, EpisodeInput<f32>, Tensor<f32>) {
        let (cfg, sizes) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ep, target) = random_episode(&cfg.layout, &sizes, k, (16, 16), &mut rng);
        let net = MshNet::new(cfg).unwrap();
        let ps = net.init_params(seed);
        (net, ps, ep, target)
    }

    #[test]
    fn ablated_branch_has_no_parameters() {
        let (cfg, _) = small();
        let both = MshNet::new(cfg.clone()).unwrap().init_params(0);
        let gps = MshNet::new(NetConfig { sim: SimMode::GpsOnly, ..cfg.clone() }).unwrap().init_params(0);
        let cos = MshNet::new(NetConfig { sim: SimMode::CosineOnly, ..cfg }).unwrap().init_params(0);
        assert!(gps.names().all(|n| !n.contains(".cos.")));
        assert!(cos.names().all(|n| !n.contains(".gps.")));
        assert!(gps.num_elements() < both.num_elements());
        assert!(cos.num_elements() < both.num_elements());
    }

    #[test]
    fn biases_start_at_zero() {
        let (cfg, _) = small();
        let ps = MshNet::new(cfg).unwrap().init_params(3);
        for p in ps.iter().filter(|p| p.name.ends_with(".b")) {
            assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn hidden_width_must_divide_by_reduction() {
        let cfg = NetConfig::new(vec![vec![2]], 6, SimMode::Both);
        assert!(matches!(MshNet::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes() {
        let (net, ps, ep, _) = setup(1, 1);
        let (fin, inner, hyper) = net.predict(&ps, &ep, Exec::Sequential).unwrap();
        assert_eq!(fin.logits.shape(), &[2, 16, 16]);
        assert_eq!(inner.len(), 3);
        assert_eq!(hyper[2].channels.shape(), &[8, 2, 2]);
        assert_eq!(hyper[0].block, 2);
    }

    #[test]
    fn identical_shots_match_one_shot() {
        let (net, ps, ep, _) = setup(1, 2);
        let mut rep = ep.clone();
        rep.shots = vec![ep.shots[0].clone(); 5];
        let a = net.predict(&ps, &ep, Exec::Sequential).unwrap().0;
        let b = net.predict(&ps, &rep, Exec::Sequential).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn shot_order_is_irrelevant() {
        let (net, ps, ep, _) = setup(4, 3);
        let mut rev = ep.clone();
        rev.shots.reverse();
        rev.shots.swap(0, 2);
        let a = net.predict(&ps, &ep, Exec::Sequential).unwrap().0;
        let b = net.predict(&ps, &rev, Exec::Sequential).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (net, ps, ep, target) = setup(2, 4);
        let (la, ga, _) = net.loss_and_grads(&ps, &ep, &target, Exec::Sequential).unwrap();
        let (lb, gb, _) = net.loss_and_grads(&ps, &ep, &target, Exec::Parallel).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn loss_components() {
        let r = LossReport::from_components(vec![1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(r.total, 2.5);
        assert!(matches!(LossReport::from_components(vec![], 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn total_loss_agrees_with_graph() {
        let (net, ps, ep, target) = setup(1, 5);
        let (fin, inner, _) = net.predict(&ps, &ep, Exec::Sequential).unwrap();
        let direct = total_loss(&inner, &fin, &target).unwrap();
        let (graph, _) = net.loss(&ps, &ep, &target, Exec::Sequential).unwrap();
        assert!((direct.total - graph.total).abs() < 1e-5);
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let l = SegLogits::new(Tensor::new(&[2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap()).unwrap();
        assert_eq!(l.mask(), vec![0, 1, 0]);
    }

    #[test]
    fn empty_episode_is_usage_error() {
        let (net, ps, mut ep, _) = setup(1, 6);
        ep.shots.clear();
        assert!(matches!(net.predict(&ps, &ep, Exec::Sequential), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_support_mask_is_flagged() {
        let (net, ps, mut ep, _) = setup(1, 7);
        for m in &mut ep.shots[0].masks.masks {
            m.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(Exec::Sequential);
        let fv = net.forward(&mut g, &ps, &ep).unwrap();
        assert!(fv.degenerate);
        assert!(g.value(fv.final_logits).all_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (net, mut ps, _, _) = setup(1, 8);
        let id = ps.id("final.w").unwrap();
        let m = ps.value(id).map(|x| x * 0.5);
        ps.set_momentum(id, m).unwrap();
        let bytes = checkpoint_bytes(&ps);
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.get("final.w").unwrap().momentum, ps.get("final.w").unwrap().momentum);
        net.check_params(&back).unwrap();
    }

    #[test]
    fn checkpoint_errors() {
        let (_, ps, _, _) = setup(1, 9);
        let bytes = checkpoint_bytes(&ps);
        assert!(matches!(read_checkpoint(&mut &bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        let other = MshNet::new(NetConfig { sim: SimMode::GpsOnly, ..small().0 }).unwrap();
        assert!(matches!(other.check_params(&ps), Err(Error::Data(_))));
    }

    #[test]
    fn energy_map_is_layer_mean() {
        let (net, ps, ep, _) = setup(1, 10);
        let stacks = net.similarity_stacks(&ps, &ep, Exec::Sequential).unwrap();
        let maps = net.energy_maps(&ps, &ep, Exec::Sequential).unwrap();
        let g = stacks[0][0].gps_layers.as_ref().unwrap();
        let e = maps[0].0.as_ref().unwrap();
        let (l, h, w) = g.chw();
        for i in 0..h * w {
            let mean = (0..l).map(|c| g.plane(c)[i] as f64).sum::<f64>() / l as f64;
            assert_eq!(e.data()[i], mean as f32);
        }
    }
}
