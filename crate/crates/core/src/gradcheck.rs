//! Finite-difference checks of the analytic gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dcf::{dcf_backward, dcf_forward, FeatureSpectrum, RegConfig};
use crate::error::Result;
use crate::features::{backward, forward_with, Lrn, NetParams, NetShape};
use crate::planes::{Patch, Planes};
use crate::spectral::{dft2, RealPlane};
use crate::unsup::{batch_loss_and_grads, cycle_loss_and_grad, cycle_losses, forward_chain, TrainConfig, TrajectorySample};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Magnitude below which differences are compared absolutely.
const FLOOR: f64 = 1e-8;

const EPS: f64 = 1e-6;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: String,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0
    }
}

/// `|a − b| / max(|a|, |b|, FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(EPS)? - f(-EPS)?) / (2.0 * EPS))
}

fn random_planes(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Planes {
    Planes::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Feature extractor against `<g, φ(p; θ)>` for every parameter and pixel.
pub fn features_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = NetParams::init(NetShape::new(2, 2), seed);
    theta.scale(6.0);
    let p = Planes::from_fn(3, 7, 6, |_, _, _| rng.random_range(0.0..1.0));
    let g = random_planes(&mut rng, 2, 7, 6);
    let lrn = Lrn::CLASSIC;
    let probe = |p: &Patch, t: &NetParams| -> Result<f64> {
        let (y, _) = forward_with(p, t, Some(&lrn))?;
        Ok(y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let (_, cache) = forward_with(&p, &theta, Some(&lrn))?;
    let (dp, dt) = backward(&g, &cache)?;
    let mut rep = SuiteReport::new("features");
    for i in 0..theta.num_params() {
        let fd = central(|e| {
            let mut t = theta.clone();
            t.set_flat(i, theta.get_flat(i) + e);
            probe(&p, &t)
        })?;
        rep.record(|| format!("param {i}"), dt.get_flat(i), fd);
    }
    for i in 0..p.data().len() {
        let fd = central(|e| {
            let mut q = p.clone();
            q.data_mut()[i] += e;
            probe(&q, &theta)
        })?;
        rep.record(|| format!("pixel {i}"), dp.data()[i], fd);
    }
    Ok(rep)
}

/// Correlation filter layer against `<g, R(x, z)>` for every feature value.
pub fn dcf_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (2, 7, 8);
    let reg = RegConfig::new(0.05)?;
    let x = random_planes(&mut rng, c, h, w);
    let z = random_planes(&mut rng, c, h, w);
    let y_hat = dft2(&RealPlane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)))?;
    let g = RealPlane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
    let probe = |x: &Planes, z: &Planes| -> Result<f64> {
        let xs = Arc::new(FeatureSpectrum::new(x, None)?);
        let zs = Arc::new(FeatureSpectrum::new(z, None)?);
        let (r, _) = dcf_forward(xs, &y_hat, zs, &reg)?;
        Ok(r.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let xs = Arc::new(FeatureSpectrum::new(&x, None)?);
    let zs = Arc::new(FeatureSpectrum::new(&z, None)?);
    let (_, cache) = dcf_forward(xs, &y_hat, zs, &reg)?;
    let (dx, dz) = dcf_backward(&g, &cache)?;
    let mut rep = SuiteReport::new("dcf");
    for i in 0..x.data().len() {
        let fd = central(|e| {
            let mut q = x.clone();
            q.data_mut()[i] += e;
            probe(&q, &z)
        })?;
        rep.record(|| format!("x[{i}]"), dx.data()[i], fd);
        let fd = central(|e| {
            let mut q = z.clone();
            q.data_mut()[i] += e;
            probe(&x, &q)
        })?;
        rep.record(|| format!("z[{i}]"), dz.data()[i], fd);
    }
    Ok(rep)
}

/// Miniature training setup used by the end-to-end suite.
pub fn miniature(seed: u64) -> (Vec<TrajectorySample>, NetParams, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 17;
    let cfg = TrainConfig {
        batch_size: 2,
        traj_len: 2,
        net: NetShape::new(2, 2),
        reg: RegConfig { lambda: 1e-2 },
        ..TrainConfig::default()
    };
    let samples = (0..2)
        .map(|v| {
            let base = Planes::from_fn(3, size, size, |_, _, _| rng.random_range(0.0..1.0));
            let searches = (1..=2)
                .map(|k| {
                    let mut s = base.circshift(k, -k);
                    s.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
                    s
                })
                .collect();
            TrajectorySample::new(base, searches, format!("mini{v}"), vec![0, 1, 2]).expect("valid sample")
        })
        .collect();
    let mut theta = NetParams::init(cfg.net, seed);
    theta.scale(4.0);
    (samples, theta, cfg)
}

/// Whole pipeline, from pixels through features and filters to the batch
/// loss, with pseudo labels and sample weights held at their values for the
/// unperturbed parameters. Checks every parameter and `pixels` sampled
/// input values.
pub fn pipeline_suite(seed: u64, pixels: usize) -> Result<SuiteReport> {
    let (samples, theta, cfg) = miniature(seed);
    let n = samples.len() as f64;
    let batch = batch_loss_and_grads(&samples, &theta, &cfg)?;
    let labels = samples
        .iter()
        .map(|s| Ok(forward_chain(s, &theta, &cfg)?.labels))
        .collect::<Result<Vec<_>>>()?;
    let coefs: Vec<f64> = batch.weights.norm.iter().map(|w| w / n).collect();
    let loss = |samples: &[TrajectorySample], t: &NetParams| -> Result<f64> {
        let mut total = 0.0;
        for ((s, y), c) in samples.iter().zip(&labels).zip(&coefs) {
            total += c * cycle_losses(s, t, y, &cfg)?.iter().sum::<f64>();
        }
        Ok(total)
    };
    let mut rep = SuiteReport::new("pipeline");
    rep.record(|| "batch loss".into(), batch.loss, loss(&samples, &theta)?);
    for i in 0..theta.num_params() {
        let fd = central(|e| {
            let mut t = theta.clone();
            t.set_flat(i, theta.get_flat(i) + e);
            loss(&samples, &t)
        })?;
        rep.record(|| format!("param {i}"), batch.grads.get_flat(i), fd);
    }
    let input_grads = samples
        .iter()
        .zip(&labels)
        .zip(&coefs)
        .map(|((s, y), c)| Ok(cycle_loss_and_grad(s, &theta, y, *c, &cfg, true)?.inputs.unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let len = samples[0].template.data().len();
    for _ in 0..pixels {
        let (i, j, k) = (
            rng.random_range(0..samples.len()),
            rng.random_range(0..=cfg.traj_len),
            rng.random_range(0..len),
        );
        let fd = central(|e| {
            let mut perturbed = samples.clone();
            let p = if j == 0 {
                &mut perturbed[i].template
            } else {
                &mut perturbed[i].searches[j - 1]
            };
            p.data_mut()[k] += e;
            loss(&perturbed, &theta)
        })?;
        rep.record(|| format!("sample {i} patch {j} value {k}"), input_grads[i][j].data()[k], fd);
    }
    Ok(rep)
}

/// All suites, as run by the command line tool.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![features_suite(seed)?, dcf_suite(seed)?, pipeline_suite(seed, 450)?])
}
