//! Finite-difference verification of every hand-written gradient.
//!
//! Each component is checked against an independent `f64` reference forward
//! written with plain loops. Layers are reduced to a scalar through a random
//! projection `L(x) = sum(r * f(x))`, so the analytical input gradient is the
//! backward pass applied to `r`. Central differences use `h = 1e-3` for
//! layers and `h = 1e-4` for losses (probabilities drawn from `[0.05, 0.95]`).
//!
//! The per-component error is `|a - n| / max(|a|, |n|, 1e-3)`: relative for
//! ordinary magnitudes, absolute for components that are essentially zero.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::Result;
use crate::layers::{self, ConvParams};
use crate::loss::{self, PixelPartition};
use crate::rng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
const ERROR_FLOOR: f64 = 1e-3;
const LAYER_STEP: f64 = 1e-3;
const LOSS_STEP: f64 = 1e-4;
/// Inputs closer than this to a ReLU or max-pool kink are redrawn.
const KINK_MARGIN: f32 = 1e-2;

pub const COMPONENTS: [&str; 9] = [
    "bce", "jaccard", "combined", "conv", "pool", "upsample", "sigmoid", "relu", "concat",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Largest spatial side of the random layer instances.
    pub size: usize,
    pub instances: usize,
    /// Test hook: scale this component's analytical gradient by 1.1.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            size: 6,
            instances: 100,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub worst_error: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.worst_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(ComponentResult::passed)
    }

    pub fn row(&self, name: &str) -> Option<&ComponentResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>9} {:>11} {:>12}  status\n",
            "component", "instances", "components", "worst_error"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>11} {:>12.3e}  {}",
                r.name,
                r.instances,
                r.checked,
                r.worst_error,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

fn error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR)
}

/// Worst error between an analytical gradient and central differences of
/// `f` around `x`.
fn compare(analytic: &[f32], x: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        worst = worst.max(error(a as f64, (plus - minus) / (2.0 * h)));
    }
    worst
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn uniform(shape: &[usize], lo: f32, hi: f32, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// reference forwards

/// Same-padded stride-1 cross-correlation.
pub fn reference_conv(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    k: &[f64],
    ks: usize,
    bias: &[f64],
) -> Vec<f64> {
    let cout = bias.len();
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; b * h * w * cout];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += x[((bi * h + sy as usize) * w + sx as usize) * cin + c]
                                    * k[((dy * ks + dx) * cin + c) * cout + o];
                            }
                        }
                    }
                    out[((bi * h + y) * w + xx) * cout + o] = acc;
                }
            }
        }
    }
    out
}

pub fn reference_maxpool(x: &[f64], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; b * oh * ow * c];
    for bi in 0..b {
        for y in 0..oh * 2 {
            for xx in 0..ow * 2 {
                for ch in 0..c {
                    let o = &mut out[((bi * oh + y / 2) * ow + xx / 2) * c + ch];
                    *o = o.max(x[((bi * h + y) * w + xx) * c + ch]);
                }
            }
        }
    }
    out
}

pub fn reference_upsample(x: &[f64], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let base = ((bi * h + y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&x[base..base + c]);
            }
        }
    }
    out
}

pub fn reference_bce(labels: &[f64], p: &[f64]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .zip(p)
        .map(|(&y, &p)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / n
}

pub fn reference_jaccard(labels: &[f64], p: &[f64]) -> f64 {
    let disc: f64 = labels.iter().sum();
    let inter: f64 = labels.iter().zip(p).map(|(y, p)| y * p).sum();
    let bg: f64 = labels.iter().zip(p).map(|(y, p)| (1.0 - y) * p).sum();
    1.0 - inter / (disc + bg)
}

// ---------------------------------------------------------------------------
// components

struct Check<'a> {
    rng: rng::Rng,
    size: usize,
    corrupt: Option<&'a str>,
}

impl Check<'_> {
    fn dims(&mut self, min: usize, even: bool) -> (usize, usize, usize, usize) {
        let max = self.size.max(min);
        let mut side = || {
            let v = self.rng.random_range(min..=max);
            if even { (v / 2).max(1) * 2 } else { v }
        };
        let (h, w) = (side(), side());
        (self.rng.random_range(1..=2), h, w, self.rng.random_range(1..=3))
    }

    fn analytic(&self, name: &str, t: &Tensor) -> Vec<f32> {
        let factor = if self.corrupt == Some(name) { 1.1 } else { 1.0 };
        t.data().iter().map(|&v| v * factor).collect()
    }

    fn loss(&mut self, name: &str) -> Result<(usize, f64)> {
        let (h, w) = (self.rng.random_range(1..=6), self.rng.random_range(1..=6));
        let n = h * w;
        let mut labels: Vec<f32> = (0..n).map(|_| self.rng.random_bool(0.3) as u8 as f32).collect();
        if name != "bce" && labels.iter().all(|&v| v == 0.0) {
            labels[self.rng.random_range(0..n)] = 1.0;
        }
        let y = Tensor::from_vec(&[1, h, w, 1], labels)?;
        let p = uniform(&[1, h, w, 1], 0.05, 0.95, &mut self.rng);
        let part = PixelPartition::new(&y, &p)?;
        let grad = match name {
            "bce" => loss::bce_grad(&part),
            "jaccard" => loss::jaccard_grad(&part)?,
            _ => loss::combined_grad(&part),
        };
        let yv = widen(&y);
        let mut f = |pp: &[f64]| match name {
            "bce" => reference_bce(&yv, pp),
            "jaccard" => reference_jaccard(&yv, pp),
            _ => reference_bce(&yv, pp) + reference_jaccard(&yv, pp),
        };
        Ok((n, compare(&self.analytic(name, &grad), &widen(&p), LOSS_STEP, &mut f)))
    }

    fn conv(&mut self) -> Result<(usize, f64)> {
        let dims @ (b, h, w, cin) = self.dims(1, false);
        let ks = if self.rng.random_bool(0.5) { 3 } else { 1 };
        let cout = self.rng.random_range(1..=3);
        let x = uniform(&[b, h, w, cin], -1.0, 1.0, &mut self.rng);
        let params = ConvParams::new(
            uniform(&[ks, ks, cin, cout], -1.0, 1.0, &mut self.rng),
            uniform(&[cout], -1.0, 1.0, &mut self.rng),
        )?;
        let r = uniform(&[b, h, w, cout], -1.0, 1.0, &mut self.rng);
        let (_, cache) = layers::conv2d_forward(&x, &params)?;
        let g = layers::conv2d_backward(&cache, &params, &r)?;
        let (xv, kv, bv, rv) = (widen(&x), widen(&params.kernels), widen(&params.biases), widen(&r));
        let mut worst = compare(&self.analytic("conv", &g.input), &xv, LAYER_STEP, &mut |p| {
            dot(&rv, &reference_conv(p, dims, &kv, ks, &bv))
        });
        worst = worst.max(compare(&self.analytic("conv", &g.kernels), &kv, LAYER_STEP, &mut |p| {
            dot(&rv, &reference_conv(&xv, dims, p, ks, &bv))
        }));
        worst = worst.max(compare(&self.analytic("conv", &g.biases), &bv, LAYER_STEP, &mut |p| {
            dot(&rv, &reference_conv(&xv, dims, &kv, ks, p))
        }));
        Ok((g.input.len() + g.kernels.len() + g.biases.len(), worst))
    }

    fn pool(&mut self) -> Result<(usize, f64)> {
        let dims @ (b, h, w, c) = self.dims(2, true);
        let x = loop {
            let x = uniform(&[b, h, w, c], -1.0, 1.0, &mut self.rng);
            if !near_pool_tie(&x, dims) {
                break x;
            }
        };
        let (y, cache) = layers::maxpool2_forward(&x)?;
        let r = uniform(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = layers::maxpool2_backward(&cache, &r)?;
        let rv = widen(&r);
        let worst = compare(&self.analytic("pool", &g), &widen(&x), LAYER_STEP, &mut |p| {
            dot(&rv, &reference_maxpool(p, dims))
        });
        Ok((g.len(), worst))
    }

    fn upsample(&mut self) -> Result<(usize, f64)> {
        let dims @ (b, h, w, c) = self.dims(1, false);
        let x = uniform(&[b, h, w, c], -1.0, 1.0, &mut self.rng);
        let r = uniform(&[b, 2 * h, 2 * w, c], -1.0, 1.0, &mut self.rng);
        let g = layers::upsample2_backward(&r)?;
        let rv = widen(&r);
        let worst = compare(&self.analytic("upsample", &g), &widen(&x), LAYER_STEP, &mut |p| {
            dot(&rv, &reference_upsample(p, dims))
        });
        Ok((g.len(), worst))
    }

    fn sigmoid(&mut self) -> Result<(usize, f64)> {
        let (b, h, w, c) = self.dims(1, false);
        let x = uniform(&[b, h, w, c], -4.0, 4.0, &mut self.rng);
        let r = uniform(x.shape(), -1.0, 1.0, &mut self.rng);
        let g = layers::sigmoid_backward(&layers::sigmoid(&x), &r)?;
        let rv = widen(&r);
        let worst = compare(&self.analytic("sigmoid", &g), &widen(&x), LAYER_STEP, &mut |p| {
            p.iter().zip(&rv).map(|(&v, r)| r / (1.0 + (-v).exp())).sum()
        });
        Ok((g.len(), worst))
    }

    fn relu(&mut self) -> Result<(usize, f64)> {
        let (b, h, w, c) = self.dims(1, false);
        let x = loop {
            let x = uniform(&[b, h, w, c], -1.0, 1.0, &mut self.rng);
            if x.data().iter().all(|v| v.abs() > KINK_MARGIN) {
                break x;
            }
        };
        let r = uniform(x.shape(), -1.0, 1.0, &mut self.rng);
        let g = layers::relu_backward(&layers::relu(&x), &r)?;
        let rv = widen(&r);
        let worst = compare(&self.analytic("relu", &g), &widen(&x), LAYER_STEP, &mut |p| {
            p.iter().zip(&rv).map(|(&v, r)| r * v.max(0.0)).sum()
        });
        Ok((g.len(), worst))
    }

    fn concat(&mut self) -> Result<(usize, f64)> {
        let (b, h, w, ca) = self.dims(1, false);
        let cb = self.rng.random_range(1..=3);
        let a = uniform(&[b, h, w, ca], -1.0, 1.0, &mut self.rng);
        let bt = uniform(&[b, h, w, cb], -1.0, 1.0, &mut self.rng);
        let r = uniform(&[b, h, w, ca + cb], -1.0, 1.0, &mut self.rng);
        let (ga, gb) = layers::split_channels(&r, ca)?;
        let (av, bv, rv) = (widen(&a), widen(&bt), widen(&r));
        let project = |a: &[f64], b: &[f64]| -> f64 {
            let mut s = 0.0;
            for px in 0..a.len() / ca {
                for c in 0..ca {
                    s += rv[px * (ca + cb) + c] * a[px * ca + c];
                }
                for c in 0..cb {
                    s += rv[px * (ca + cb) + ca + c] * b[px * cb + c];
                }
            }
            s
        };
        let mut worst = compare(&self.analytic("concat", &ga), &av, LAYER_STEP, &mut |p| project(p, &bv));
        worst = worst.max(compare(&self.analytic("concat", &gb), &bv, LAYER_STEP, &mut |p| project(&av, p)));
        // the forward itself must agree with the projection it is checked against
        let fwd = layers::concat_channels(&a, &bt)?;
        worst = worst.max(error(dot(&widen(&fwd), &rv), project(&av, &bv)));
        Ok((ga.len() + gb.len(), worst))
    }
}

fn near_pool_tie(x: &Tensor, (b, h, w, c): (usize, usize, usize, usize)) -> bool {
    let d = x.data();
    for bi in 0..b {
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                for ch in 0..c {
                    let mut v: Vec<f32> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| d[((bi * h + y + dy) * w + xx + dx) * c + ch])
                        .collect();
                    v.sort_by(f32::total_cmp);
                    if v[3] - v[2] < KINK_MARGIN {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Runs every component check and returns the per-component worst errors.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    for (ci, name) in COMPONENTS.iter().enumerate() {
        let mut check = Check {
            rng: rng::stream(options.seed, &[0x6c, ci as u64]),
            size: options.size.max(2),
            corrupt: options.corrupt.as_deref(),
        };
        let mut worst = 0.0f64;
        let mut checked = 0;
        for _ in 0..options.instances {
            let (n, e) = match *name {
                "bce" | "jaccard" | "combined" => check.loss(name)?,
                "conv" => check.conv()?,
                "pool" => check.pool()?,
                "upsample" => check.upsample()?,
                "sigmoid" => check.sigmoid()?,
                "relu" => check.relu()?,
                _ => check.concat()?,
            };
            checked += n;
            worst = worst.max(e);
        }
        rows.push(ComponentResult {
            name: name.to_string(),
            instances: options.instances,
            checked,
            worst_error: worst,
        });
    }
    Ok(GradcheckReport { rows })
}
