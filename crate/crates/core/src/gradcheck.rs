//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::fixtures::random_episode;
use crate::graph::{Graph, Var};
use crate::network::{MshNet, NetConfig, SimMode};
use crate::ops::Activation;
use crate::par::Exec;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Minimum number of probed elements per tensor (all elements when fewer).
pub const MIN_PROBES: usize = 32;
pub const TOLERANCE: f64 = 1e-3;
/// Times a probe that straddles a ReLU kink is retried at a tenth of the step.
pub const KINK_RETRIES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes discarded because the ±epsilon points straddle a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// One evaluation of the objective under test.
pub struct Evaluation {
    pub value: f64,
    /// ReLU sign-pattern signature; see [`Graph::kink_signature`].
    pub kinks: u64,
    /// Analytic gradients, one per input, when requested.
    pub grads: Option<Vec<Tensor<f64>>>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on a random
/// subsample of each input tensor. A central difference that misses
/// [`TOLERANCE`] is re-estimated with the fourth-order stencil on
/// `{±step/2, ±step}` before it counts against the report.
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    epsilon: f64,
    rng: &mut impl Rng,
    eval: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let base = eval(&values, true)?;
    let analytic = base.grads.expect("base evaluation must return gradients");
    let mut reports = Vec::with_capacity(inputs.len());
    for (ti, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let order = sample(rng, n, n);
        let mut report = GradCheckReport {
            param: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in order.iter() {
            if report.checked >= MIN_PROBES {
                break;
            }
            let orig = values[ti].data()[idx];
            let mut probe = None;
            for step in (0..=KINK_RETRIES).map(|r| epsilon / 10f64.powi(r as i32)) {
                values[ti].data_mut()[idx] = orig + step;
                let plus = eval(&values, false)?;
                values[ti].data_mut()[idx] = orig - step;
                let minus = eval(&values, false)?;
                if plus.kinks == base.kinks && minus.kinks == base.kinks {
                    probe = Some((plus.value, minus.value, step));
                    break;
                }
            }
            values[ti].data_mut()[idx] = orig;
            let Some((plus, minus, step)) = probe else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[ti].data()[idx];
            let mut err = relative_error(a, (plus - minus) / (2.0 * step));
            if err >= TOLERANCE {
                values[ti].data_mut()[idx] = orig + step / 2.0;
                let half_plus = eval(&values, false)?;
                values[ti].data_mut()[idx] = orig - step / 2.0;
                let half_minus = eval(&values, false)?;
                values[ti].data_mut()[idx] = orig;
                if half_plus.kinks == base.kinks && half_minus.kinks == base.kinks {
                    let h = step / 2.0;
                    let refined = (8.0 * (half_plus.value - half_minus.value) - (plus - minus)) / (12.0 * h);
                    err = relative_error(a, refined);
                }
            }
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Random probe weights so tensor-valued ops reduce to a scalar objective.
pub fn probe_weights(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Runs `build` on a fresh graph whose leaves are `inputs`, reducing the
/// output with `weights`.
fn graph_eval<B>(inputs: &[Tensor<f64>], want: bool, weights: &Tensor<f64>, build: B) -> Result<Evaluation>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Exec::Sequential);
    let leaves: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let y = g.weighted_sum(out, weights.clone())?;
    let value = g.value(y).data()[0];
    let grads = if want {
        let gr = g.backward(&[(y, 1.0)])?;
        Some(
            leaves
                .iter()
                .zip(inputs)
                .map(|(&v, t)| gr.of(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(Evaluation {
        value,
        kinks: g.kink_signature(),
        grads,
    })
}

fn named(prefix: &str, parts: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    parts
        .into_iter()
        .map(|(n, t)| (format!("{}.{}", prefix, n), t))
        .collect()
}

pub fn check_conv2d(dilation: usize, epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let inputs = named(
        &format!("conv2d.d{}", dilation),
        vec![
            ("input", uniform(&[2, 6, 5], -1.0, 1.0, rng)),
            ("kernel", uniform(&[3, 2, 3, 3], -1.0, 1.0, rng)),
            ("bias", uniform(&[3], -1.0, 1.0, rng)),
        ],
    );
    let w = probe_weights(&[3, 6, 5], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| g.conv2d(l[0], l[1], l[2], dilation))
    })
}

pub fn check_resize(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let inputs = named("bilinear_resize", vec![("input", uniform(&[2, 4, 3], -1.0, 1.0, rng))]);
    let w = probe_weights(&[2, 7, 8], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| g.resize(l[0], 7, 8))
    })
}

/// ReLU inputs are drawn with `|x| > 0.1`, away from the kink.
pub fn check_activation(kind: Activation, epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let x = Tensor::from_fn(&[2, 4, 5], |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) { m } else { -m }
    });
    let name = match kind {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
    };
    let inputs = named(name, vec![("input", x)]);
    let w = probe_weights(&[2, 4, 5], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| Ok(g.activate(l[0], kind)))
    })
}

/// Sigmoid applied twice through a convolution, exercising the chain rule.
pub fn check_sigmoid_chain(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let inputs = named(
        "sigmoid_chain",
        vec![
            ("input", uniform(&[2, 4, 4], -2.0, 2.0, rng)),
            ("kernel", uniform(&[2, 2, 3, 3], -1.0, 1.0, rng)),
        ],
    );
    let w = probe_weights(&[2, 4, 4], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| {
            let s = g.sigmoid(l[0]);
            let b = g.constant(Tensor::zeros(&[2]));
            let c = g.conv2d(s, l[1], b, 1)?;
            Ok(g.sigmoid(c))
        })
    })
}

pub fn check_channel_attention(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let inputs = named(
        "channel_attention",
        vec![
            ("input", uniform(&[8, 3, 3], -1.0, 1.0, rng)),
            ("w1", uniform(&[2, 8], -1.0, 1.0, rng)),
            ("b1", uniform(&[2], -0.5, 0.5, rng)),
            ("w2", uniform(&[8, 2], -1.0, 1.0, rng)),
            ("b2", uniform(&[8], -0.5, 0.5, rng)),
        ],
    );
    let w = probe_weights(&[8, 3, 3], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| g.channel_attention(l[0], [l[1], l[2], l[3], l[4]]))
    })
}

pub fn check_cross_entropy(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let inputs = named("cross_entropy", vec![("logits", uniform(&[2, 4, 4], -3.0, 3.0, rng))]);
    let target = Tensor::from_fn(&[1, 4, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let one = Tensor::scalar(1.0);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &one, |g, l| g.cross_entropy(l[0], &target))
    })
}

pub fn check_gps(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let d = 6;
    let inputs = named(
        "gps",
        vec![
            ("prototype", uniform(&[d], 0.0, 1.0, rng)),
            ("query", uniform(&[d, 4, 5], 0.0, 1.0, rng)),
            ("w", uniform(&[1, 2 * d], -1.0, 1.0, rng)),
        ],
    );
    let w = probe_weights(&[1, 4, 5], rng);
    grad_check(&inputs, epsilon, rng, |v, want| {
        graph_eval(v, want, &w, |g, l| g.gps(l[0], l[1], l[2]))
    })
}

/// Every per-op check in the suite for one random draw.
/// Tiny network configuration used by the end-to-end check.
pub fn tiny_network() -> (NetConfig, Vec<(usize, usize)>, (usize, usize)) {
    (
        NetConfig::new(vec![vec![2, 2], vec![3]], 4, SimMode::Both),
        vec![(8, 8), (4, 4)],
        (8, 8),
    )
}

/// Every parameter of a tiny 2-shot episode against the summed training loss.
pub fn check_network(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let (config, sizes, out) = tiny_network();
    let net = MshNet::new(config.clone())?;
    let base: ParamSet<f64> = net.init_params(rng.gen()).cast();
    let (ep, target) = random_episode::<f64>(&config.layout, &sizes, 2, out, rng);
    let inputs: Vec<(String, Tensor<f64>)> = base
        .iter()
        .map(|p| (format!("network.{}", p.name), p.value.clone()))
        .collect();
    let inputs: Vec<_> = inputs
        .into_iter()
        .map(|(n, t)| {
            if n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2") {
                let shape = t.shape().to_vec();
                (n, uniform(&shape, -0.1, 0.1, rng))
            } else {
                (n, t)
            }
        })
        .collect();
    grad_check(&inputs, epsilon, rng, |values, want| {
        let mut ps = base.clone();
        for (id, v) in values.iter().enumerate() {
            *ps.value_mut(id) = v.clone();
        }
        if want {
            let (report, grads, kinks) = net.loss_and_grads(&ps, &ep, &target, Exec::Sequential)?;
            let mut full: Vec<Tensor<f64>> = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            for (id, g) in grads {
                full[id] = g;
            }
            Ok(Evaluation {
                value: report.total,
                kinks,
                grads: Some(full),
            })
        } else {
            let (report, kinks) = net.loss(&ps, &ep, &target, Exec::Sequential)?;
            Ok(Evaluation {
                value: report.total,
                kinks,
                grads: None,
            })
        }
    })
}

pub fn op_suite(epsilon: f64, rng: &mut impl Rng) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for d in [1, 2, 4] {
        out.extend(check_conv2d(d, epsilon, rng)?);
    }
    out.extend(check_resize(epsilon, rng)?);
    out.extend(check_activation(Activation::Relu, epsilon, rng)?);
    out.extend(check_activation(Activation::Sigmoid, epsilon, rng)?);
    out.extend(check_sigmoid_chain(epsilon, rng)?);
    out.extend(check_channel_attention(epsilon, rng)?);
    out.extend(check_cross_entropy(epsilon, rng)?);
    out.extend(check_gps(epsilon, rng)?);
    out.extend(check_network(epsilon, rng)?);
    Ok(out)
}
