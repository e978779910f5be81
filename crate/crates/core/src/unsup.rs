//! Unsupervised training by forward tracking and backward verification.
//!
//! Each training sample is a short trajectory: a template patch `T` and
//! search patches `S_1..S_M` in time order. Tracking runs forward along the
//! chain with pseudo labels, then every `S_k` hops straight back to `T`; the
//! loss measures how far the backward response lands from the original
//! label. Pseudo labels and sample weights are constants for
//! differentiation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dcf::{dcf_backward, dcf_forward, pseudo_label, window_grad, FeatureSpectrum, RegConfig};
use crate::error::{Error, Result};
use crate::features::{
    backward, backward_params, extract_into, forward_with, sgd_step, ActivationCache, ExtractOptions, Lrn, LrSchedule,
    NetParams, NetShape, OptimState, Precision, SgdConfig,
};
use crate::imgproc::{gaussian_label, hann_window, label_sigma};
use crate::planes::{FeatureMap, Patch, Planes};
use crate::spectral::{dft2, ComplexPlane, RealPlane};

/// A template and its time-ordered search patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub template: Patch,
    pub searches: Vec<Patch>,
    pub video: String,
    /// Frame indices of the template and each search patch.
    pub frames: Vec<usize>,
}

impl TrajectorySample {
    pub fn new(template: Patch, searches: Vec<Patch>, video: impl Into<String>, frames: Vec<usize>) -> Result<Self> {
        let s = TrajectorySample {
            template,
            searches,
            video: video.into(),
            frames,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.searches.is_empty() {
            return Err(Error::InvalidInput("a trajectory needs at least one search patch".into()));
        }
        let shape = self.template.shape();
        if let Some(bad) = self.searches.iter().find(|p| p.shape() != shape) {
            return Err(Error::dims(format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        if self.frames.len() != self.searches.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} frame indices for {} patches",
                self.frames.len(),
                self.searches.len() + 1
            )));
        }
        Ok(())
    }

    /// Number of search patches `M`.
    pub fn len(&self) -> usize {
        self.searches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.searches.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.template.height(), self.template.width())
    }

    fn patch(&self, i: usize) -> &Patch {
        if i == 0 {
            &self.template
        } else {
            &self.searches[i - 1]
        }
    }
}

/// Indexed access to training samples, possibly materialized on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<TrajectorySample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [TrajectorySample] {
    fn len(&self) -> usize {
        <[TrajectorySample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<TrajectorySample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("sample {index} out of range")))
    }
}

impl SampleSource for Vec<TrajectorySample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<TrajectorySample> {
        self.as_slice().sample(index)
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Search patches per trajectory (`M`).
    pub traj_len: usize,
    pub reg: RegConfig,
    /// Label bandwidth in cells; `None` derives it from the patch size and
    /// `context`.
    pub sigma: Option<f64>,
    pub context: f64,
    pub lr: LrSchedule,
    pub sgd: SgdConfig,
    pub drop_fraction: f64,
    pub seed: u64,
    pub net: NetShape,
    pub lrn: Option<Lrn>,
    pub window: bool,
    /// Worker threads for per-sample passes; results do not depend on it.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            traj_len: 3,
            reg: RegConfig::default(),
            sigma: None,
            context: 2.0,
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            drop_fraction: 0.1,
            seed: 0,
            net: NetShape::FULL,
            lrn: Some(Lrn::CLASSIC),
            window: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.traj_len == 0 || self.jobs == 0 {
            return Err(Error::Config(
                "epochs, batch size, trajectory length and jobs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(format!(
                "drop fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        if !(self.lr.start > 0.0 && self.lr.end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.sgd.momentum < 0.0 || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config("momentum and weight decay must be non-negative".into()));
        }
        if self.net.mid == 0 || self.net.out == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        match self.sigma {
            Some(s) if !(s > 0.0) => Err(Error::Config(format!("sigma must be positive, got {s}"))),
            _ => Ok(()),
        }
    }

    pub fn label_sigma(&self, size: usize) -> f64 {
        self.sigma.unwrap_or_else(|| label_sigma(size, self.context))
    }
}

/// Labels and window shared by every sample of one patch size.
struct Setup {
    y_t: RealPlane,
    y_t_hat: ComplexPlane,
    sigma: f64,
    window: Option<RealPlane>,
}

impl Setup {
    fn new((h, w): (usize, usize), cfg: &TrainConfig) -> Result<Self> {
        let sigma = cfg.label_sigma(h.min(w));
        let y_t = gaussian_label(h, w, 0, 0, sigma);
        Ok(Setup {
            y_t_hat: dft2(&y_t)?,
            y_t,
            sigma,
            window: cfg.window.then(|| hann_window(h, w)),
        })
    }
}

/// Forward-chain outcome for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// `R_{S_1}..R_{S_M}`.
    pub responses: Vec<RealPlane>,
    /// Pseudo labels `Y_{S_1}..Y_{S_M}`.
    pub labels: Vec<RealPlane>,
}

fn spectra_without_cache(sample: &TrajectorySample, theta: &NetParams, cfg: &TrainConfig, setup: &Setup) -> Result<Vec<Arc<FeatureSpectrum>>> {
    let (h, w) = sample.dims();
    let opts = ExtractOptions {
        lrn: cfg.lrn,
        precision: Precision::F64,
    };
    let mut feat = Planes::zeros(theta.shape().out, h, w);
    (0..=sample.len())
        .map(|i| {
            extract_into(sample.patch(i), theta, &opts, &mut feat)?;
            Ok(Arc::new(FeatureSpectrum::new(&feat, setup.window.as_ref())?))
        })
        .collect()
}

fn chain(spectra: &[Arc<FeatureSpectrum>], setup: &Setup, cfg: &TrainConfig) -> Result<ChainOutput> {
    let m = spectra.len() - 1;
    let mut responses = Vec::with_capacity(m);
    let mut labels: Vec<RealPlane> = Vec::with_capacity(m);
    let mut prev_hat = setup.y_t_hat.clone();
    for k in 1..=m {
        let (r, _) = dcf_forward(spectra[k - 1].clone(), &prev_hat, spectra[k].clone(), &cfg.reg)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("forward response {k}")));
        }
        let y = pseudo_label(&r, setup.sigma);
        prev_hat = dft2(&y)?;
        responses.push(r);
        labels.push(y);
    }
    Ok(ChainOutput { responses, labels })
}

/// Tracks forward from the template through every search patch.
pub fn forward_chain(sample: &TrajectorySample, theta: &NetParams, cfg: &TrainConfig) -> Result<ChainOutput> {
    sample.validate()?;
    let setup = Setup::new(sample.dims(), cfg)?;
    let spectra = spectra_without_cache(sample, theta, cfg, &setup)?;
    chain(&spectra, &setup, cfg)
}

fn check_labels(sample: &TrajectorySample, labels: &[RealPlane]) -> Result<()> {
    if labels.len() != sample.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} search patches",
            labels.len(),
            sample.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| l.dims() != sample.dims()) {
        return Err(Error::dims(format!("{:?}", sample.dims()), format!("{:?}", bad.dims())));
    }
    Ok(())
}

fn cycles(spectra: &[Arc<FeatureSpectrum>], labels: &[RealPlane], setup: &Setup, cfg: &TrainConfig) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let (r, _) = dcf_forward(spectra[k + 1].clone(), &dft2(y)?, spectra[0].clone(), &cfg.reg)?;
            Ok(r.squared_distance(&setup.y_t))
        })
        .collect()
}

/// `L_k = ‖R(S_k → T) − Y_T‖²` for each search patch, with the filter
/// solved on `S_k` and `labels[k-1]`.
pub fn cycle_losses(sample: &TrajectorySample, theta: &NetParams, labels: &[RealPlane], cfg: &TrainConfig) -> Result<Vec<f64>> {
    sample.validate()?;
    check_labels(sample, labels)?;
    let setup = Setup::new(sample.dims(), cfg)?;
    let spectra = spectra_without_cache(sample, theta, cfg, &setup)?;
    cycles(&spectra, labels, &setup, cfg)
}

/// `Σ_k ‖R_{S_k} − Y_{S_{k−1}}‖²` with `Y_{S_0} = y_t`.
pub fn motion_weight(responses: &[RealPlane], labels: &[RealPlane], y_t: &RealPlane) -> f64 {
    responses
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let prev = if k == 0 { y_t } else { &labels[k - 1] };
            r.squared_distance(prev)
        })
        .sum()
}

/// Per-sample weights of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    /// `false` for dropped samples.
    pub keep: Vec<bool>,
    pub motion: Vec<f64>,
    /// Normalized weights; zero where dropped, summing to one otherwise.
    pub norm: Vec<f64>,
}

impl BatchWeights {
    pub fn num_dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// `⌊fraction·n⌋`, tolerant of representation error in the product.
pub fn drop_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Drops the `⌊fraction·N⌋` highest-loss samples (the higher index first on
/// ties) and normalizes the motion weights of the survivors. When every
/// surviving motion is zero the survivors share the weight uniformly.
pub fn batch_weights(losses: &[f64], motions: &[f64], drop_fraction: f64) -> Result<BatchWeights> {
    let n = losses.len();
    if motions.len() != n {
        return Err(Error::dims(format!("{n} motions"), format!("{}", motions.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop fraction must lie in [0, 1), got {drop_fraction}")));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss of batch sample {i}")));
    }
    if let Some(i) = motions.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::InvalidInput(format!("motion weight of batch sample {i} is {}", motions[i])));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(b.cmp(&a)));
    let mut keep = vec![true; n];
    for &i in &order[..drop_count(n, drop_fraction)] {
        keep[i] = false;
    }
    let total: f64 = (0..n).filter(|&i| keep[i]).map(|i| motions[i]).sum();
    let survivors = keep.iter().filter(|k| **k).count();
    let norm = (0..n)
        .map(|i| match (keep[i], total > 0.0) {
            (false, _) => 0.0,
            (true, true) => motions[i] / total,
            (true, false) => 1.0 / survivors as f64,
        })
        .collect();
    Ok(BatchWeights {
        keep,
        motion: motions.to_vec(),
        norm,
    })
}

/// `(1/N)·Σ_i norm_i·Σ_k L_k^i`.
pub fn weighted_loss(sample_losses: &[f64], weights: &BatchWeights) -> f64 {
    let n = sample_losses.len() as f64;
    sample_losses.iter().zip(&weights.norm).map(|(l, w)| l * w).sum::<f64>() / n
}

/// Losses and gradients of one sample with fixed labels.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    /// `L_1..L_M`.
    pub losses: Vec<f64>,
    /// Gradient of `coef·Σ_k L_k` with respect to the parameters.
    pub params: NetParams,
    /// Gradients with respect to the template and search patches, when
    /// requested.
    pub inputs: Option<Vec<Patch>>,
}

/// Evaluates `coef·Σ_k L_k` for fixed pseudo labels and differentiates it.
pub fn cycle_loss_and_grad(
    sample: &TrajectorySample,
    theta: &NetParams,
    labels: &[RealPlane],
    coef: f64,
    cfg: &TrainConfig,
    want_inputs: bool,
) -> Result<SampleGrad> {
    sample.validate()?;
    check_labels(sample, labels)?;
    let setup = Setup::new(sample.dims(), cfg)?;
    Ok(sample_pass(sample, theta, Some(labels), coef, cfg, &setup, want_inputs)?.grad)
}

/// One sample's forward pass, losses and gradients.
struct SamplePass {
    grad: SampleGrad,
    /// Set when the labels came from the forward chain.
    motion: Option<f64>,
}

/// Runs the forward chain unless `labels` are given, then the backward
/// hops and their gradients scaled by `coef`.
fn sample_pass(
    sample: &TrajectorySample,
    theta: &NetParams,
    labels: Option<&[RealPlane]>,
    coef: f64,
    cfg: &TrainConfig,
    setup: &Setup,
    want_inputs: bool,
) -> Result<SamplePass> {
    let mut caches: Vec<ActivationCache> = Vec::with_capacity(sample.len() + 1);
    let mut spectra = Vec::with_capacity(sample.len() + 1);
    for i in 0..=sample.len() {
        let (feat, cache) = forward_with(sample.patch(i), theta, cfg.lrn.as_ref())?;
        spectra.push(Arc::new(FeatureSpectrum::new(&feat, setup.window.as_ref())?));
        caches.push(cache);
    }
    let (chained, motion);
    let labels = match labels {
        Some(l) => {
            motion = None;
            l
        }
        None => {
            let out = chain(&spectra, setup, cfg)?;
            motion = Some(motion_weight(&out.responses, &out.labels, &setup.y_t));
            chained = out.labels;
            &chained[..]
        }
    };
    let (h, w) = sample.dims();
    let mut dfeat: Vec<FeatureMap> = (0..=sample.len())
        .map(|_| Planes::zeros(theta.shape().out, h, w))
        .collect();
    let mut losses = Vec::with_capacity(sample.len());
    for (k, y) in labels.iter().enumerate() {
        let (r, cache) = dcf_forward(spectra[k + 1].clone(), &dft2(y)?, spectra[0].clone(), &cfg.reg)?;
        losses.push(r.squared_distance(&setup.y_t));
        let upstream = RealPlane::from_fn(h, w, |row, col| 2.0 * coef * (r.get(row, col) - setup.y_t.get(row, col)));
        let (dx, dz) = dcf_backward(&upstream, &cache)?;
        dfeat[k + 1].axpy(1.0, &dx);
        dfeat[0].axpy(1.0, &dz);
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!(
            "cycle loss {} of sample {}:{:?}; batch aborted",
            i + 1,
            sample.video,
            sample.frames
        )));
    }
    let mut params = theta.zeros_like();
    let mut inputs = want_inputs.then(Vec::new);
    for (g, cache) in dfeat.iter_mut().zip(&caches) {
        if let Some(win) = &setup.window {
            window_grad(g, win);
        }
        match &mut inputs {
            Some(acc) => {
                let (dp, dt) = backward(g, cache)?;
                params.axpy(1.0, &dt);
                acc.push(dp);
            }
            None => params.axpy(1.0, &backward_params(g, cache)?),
        }
    }
    Ok(SamplePass {
        grad: SampleGrad { losses, params, inputs },
        motion,
    })
}

/// Result of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `L_final`.
    pub loss: f64,
    pub grads: NetParams,
    pub weights: BatchWeights,
    /// Unweighted `Σ_k L_k` per sample.
    pub sample_losses: Vec<f64>,
}

/// Runs `f` over `0..n` on up to `jobs` threads, returning results in index
/// order.
fn par_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(jobs);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidInput("worker thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `L_final` of a mini-batch and its parameter gradient. Sample weights are
/// computed from the same forward pass and held fixed; since each sample's
/// gradient is linear in its weight, it is computed once with unit weight
/// and scaled afterwards.
pub fn batch_loss_and_grads(batch: &[TrajectorySample], theta: &NetParams, cfg: &TrainConfig) -> Result<BatchOutput> {
    let first = batch.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    for s in batch {
        s.validate()?;
        if s.dims() != first.dims() {
            return Err(Error::dims(format!("{:?}", first.dims()), format!("{:?}", s.dims())));
        }
    }
    let setup = Setup::new(first.dims(), cfg)?;
    let passes = par_map(batch.len(), cfg.jobs, |i| sample_pass(&batch[i], theta, None, 1.0, cfg, &setup, false))?;
    let sample_losses: Vec<f64> = passes.iter().map(|p| p.grad.losses.iter().sum()).collect();
    let motions: Vec<f64> = passes.iter().map(|p| p.motion.unwrap_or(0.0)).collect();
    let weights = batch_weights(&sample_losses, &motions, cfg.drop_fraction)?;
    let n = batch.len() as f64;
    let mut grads = theta.zeros_like();
    for (p, w) in passes.iter().zip(&weights.norm) {
        if *w > 0.0 {
            grads.axpy(w / n, &p.grad.params);
        }
    }
    Ok(BatchOutput {
        loss: weighted_loss(&sample_losses, &weights),
        grads,
        weights,
        sample_losses,
    })
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unweighted `Σ_k L_k` over every sample seen in the epoch.
    pub mean_loss: f64,
    pub lr: f64,
}

impl EpochRecord {
    /// `epoch,mean_loss,lr`.
    pub fn to_line(&self) -> String {
        format!("{},{:.8e},{:.8e}", self.epoch, self.mean_loss, self.lr)
    }
}

/// Trained parameters and the loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: NetParams,
    pub log: Vec<EpochRecord>,
}

/// Runs the epoch loop from a seeded initialization. `on_epoch` sees each
/// record and the parameters after that epoch. The returned parameters are
/// rounded to single precision, matching the model file.
pub fn train(
    data: &dyn SampleSource,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &NetParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut theta = NetParams::init(cfg.net, cfg.seed);
    let mut opt = OptimState::new(cfg.net, cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = idx.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
            let out = batch_loss_and_grads(&batch, &theta, cfg)?;
            sum += out.sample_losses.iter().sum::<f64>();
            count += batch.len();
            sgd_step(&mut theta, &out.grads, &mut opt, lr)?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            mean_loss: sum / count as f64,
            lr,
        };
        on_epoch(&rec, &theta)?;
        log.push(rec);
    }
    theta.round_to_f32();
    Ok(TrainOutcome { theta, log })
}

/// Mean of each epoch's loss with its neighbours (window of three,
/// truncated at the ends).
pub fn smoothed_losses(log: &[EpochRecord]) -> Vec<f64> {
    (0..log.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(log.len());
            log[lo..hi].iter().map(|r| r.mean_loss).sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcf::{respond, solve_filter};
    use crate::features::extract;
    use crate::imgproc::apply_window;
    use rand::Rng;

    fn texture(seed: u64, c: usize, h: usize, w: usize) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, usize)> = (0..16)
            .map(|_| {
                (
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(0.0..6.28),
                    rng.random_range(0..c),
                )
            })
            .collect();
        Planes::from_fn(c, h, w, |ch, r, col| {
            let v: f64 = waves
                .iter()
                .filter(|wv| wv.3 == ch)
                .map(|(a, b, p, _)| (a * r as f64 + b * col as f64 + p).sin())
                .sum();
            0.5 + 0.1 * v
        })
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            net: NetShape::new(6, 6),
            batch_size: 4,
            traj_len: 2,
            ..TrainConfig::default()
        }
    }

    fn sample_of(t: &Patch, searches: Vec<Patch>) -> TrajectorySample {
        let frames = (0..=searches.len()).collect();
        TrajectorySample::new(t.clone(), searches, "v", frames).unwrap()
    }

    #[test]
    fn static_trajectory_keeps_labels_at_origin() {
        let cfg = small_cfg();
        let theta = NetParams::init(cfg.net, 3);
        let t = texture(1, 3, 25, 25);
        let out = forward_chain(&sample_of(&t, vec![t.clone(), t.clone()]), &theta, &cfg).unwrap();
        for y in &out.labels {
            assert_eq!(y.argmax(), (0, 0));
        }
    }

    #[test]
    fn circular_shift_moves_the_pseudo_label() {
        let cfg = TrainConfig {
            window: false,
            reg: RegConfig { lambda: 1e-6 },
            ..small_cfg()
        };
        let theta = NetParams::init(cfg.net, 4);
        let t = texture(2, 3, 32, 32);
        for d in [1isize, 3, 6, -4] {
            let s = t.circshift(d, 0);
            let out = forward_chain(&sample_of(&t, vec![s]), &theta, &cfg).unwrap();
            assert_eq!(out.labels[0].argmax(), (d.rem_euclid(32) as usize, 0), "shift {d}");
        }
    }

    #[test]
    fn single_hop_matches_the_two_frame_solve() {
        let cfg = TrainConfig {
            traj_len: 1,
            ..small_cfg()
        };
        let theta = NetParams::init(cfg.net, 5);
        let t = texture(3, 3, 21, 21);
        let s = texture(4, 3, 21, 21);
        let sample = sample_of(&t, vec![s.clone()]);
        let out = forward_chain(&sample, &theta, &cfg).unwrap();
        let losses = cycle_losses(&sample, &theta, &out.labels, &cfg).unwrap();

        let win = hann_window(21, 21);
        let opts = ExtractOptions::default();
        let ft = apply_window(&extract(&t, &theta, &opts).unwrap(), &win).unwrap();
        let fs = apply_window(&extract(&s, &theta, &opts).unwrap(), &win).unwrap();
        let sigma = cfg.label_sigma(21);
        let y_t = gaussian_label(21, 21, 0, 0, sigma);
        let r_s = respond(&solve_filter(&ft, &y_t, &cfg.reg).unwrap(), &fs).unwrap();
        let y_s = pseudo_label(&r_s, sigma);
        assert_eq!(y_s, out.labels[0]);
        let r_t = respond(&solve_filter(&fs, &y_s, &cfg.reg).unwrap(), &ft).unwrap();
        let expect = r_t.squared_distance(&y_t);
        assert!((losses[0] - expect).abs() < 1e-9 * expect.max(1.0));
    }

    #[test]
    fn self_cycle_has_vanishing_loss() {
        let cfg = TrainConfig {
            window: false,
            reg: RegConfig { lambda: 1e-10 },
            ..small_cfg()
        };
        let theta = NetParams::init(cfg.net, 6);
        let t = texture(5, 3, 17, 17);
        let sample = sample_of(&t, vec![t.clone(), t.clone()]);
        let out = forward_chain(&sample, &theta, &cfg).unwrap();
        for l in cycle_losses(&sample, &theta, &out.labels, &cfg).unwrap() {
            assert!(l < 1e-8, "loss {l}");
        }
    }

    #[test]
    fn wrong_labels_raise_the_loss() {
        let cfg = small_cfg();
        let theta = NetParams::init(cfg.net, 7);
        let t = texture(6, 3, 25, 25);
        let sample = sample_of(&t, vec![t.circshift(1, 1), t.circshift(2, 2)]);
        let out = forward_chain(&sample, &theta, &cfg).unwrap();
        let good = cycle_losses(&sample, &theta, &out.labels, &cfg).unwrap();
        let sigma = cfg.label_sigma(25);
        let bad_labels: Vec<RealPlane> = (0..2).map(|_| gaussian_label(25, 25, 12, 12, sigma)).collect();
        let bad = cycle_losses(&sample, &theta, &bad_labels, &cfg).unwrap();
        for (g, b) in good.iter().zip(&bad) {
            assert!(b > g, "{b} <= {g}");
        }
    }

    #[test]
    fn motion_weight_sums_consecutive_residuals() {
        let g = |r, c| gaussian_label(16, 16, r, c, 2.0);
        let y_t = g(0, 0);
        let labels = vec![g(2, 0), g(4, 1)];
        let responses = vec![g(2, 1), g(3, 1)];
        let expect = responses[0].squared_distance(&y_t) + responses[1].squared_distance(&labels[0]);
        assert_eq!(motion_weight(&responses, &labels, &y_t), expect);
        assert_eq!(motion_weight(&[y_t.clone()], &[y_t.clone()], &y_t), 0.0);
        let near = motion_weight(&[g(1, 0)], &[g(1, 0)], &y_t);
        let far = motion_weight(&[g(3, 0)], &[g(3, 0)], &y_t);
        assert!(far > near);
    }

    #[test]
    fn weights_drop_the_largest_losses() {
        let losses = [1.0, 5.0, 2.0, 5.0, 0.5, 0.1, 3.0, 2.0, 1.0, 4.0, 0.2];
        let motions = [1.0; 11];
        let w = batch_weights(&losses, &motions, 0.1).unwrap();
        // One drop; the tie between samples 1 and 3 goes to the higher index.
        assert_eq!(w.num_dropped(), 1);
        assert!(!w.keep[3] && w.keep[1]);
        for (i, n) in w.norm.iter().enumerate() {
            assert_eq!(*n, if i == 3 { 0.0 } else { 0.1 });
        }
        let w = batch_weights(&losses[..9], &motions[..9], 0.1).unwrap();
        assert_eq!(w.num_dropped(), 0);
        assert_eq!(drop_count(32, 0.1), 3);
        assert_eq!(drop_count(100, 0.29), 29);
    }

    #[test]
    fn an_outlier_is_dropped_and_ignored() {
        let mut losses = vec![1.0, 2.0, 1.5, 0.7, 3.0, 2.2, 1.1, 0.9, 2.5, 1.8];
        let motions = [0.3, 1.0, 0.5, 2.0, 0.8, 1.2, 0.4, 0.6, 1.5, 0.9];
        let clean = weighted_loss(&losses[..9], &batch_weights(&losses[..9], &motions[..9], 0.1).unwrap());
        losses[9] = 1e6;
        let w = batch_weights(&losses, &motions, 0.1).unwrap();
        assert_eq!(w.keep.iter().position(|k| !k), Some(9));
        // The batch mean divides by all N samples, dropped ones included.
        assert!((weighted_loss(&losses, &w) - clean * 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_motion_falls_back_to_uniform() {
        let w = batch_weights(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], 0.25).unwrap();
        assert_eq!(w.norm, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let w = batch_weights(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 0.0, 9.0], 0.25).unwrap();
        assert_eq!(w.norm, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn bad_weight_inputs_are_rejected() {
        assert!(batch_weights(&[], &[], 0.1).is_err());
        assert!(batch_weights(&[1.0], &[1.0, 2.0], 0.1).is_err());
        assert!(batch_weights(&[f64::NAN], &[1.0], 0.1).is_err());
        assert!(batch_weights(&[1.0], &[-1.0], 0.1).is_err());
        assert!(batch_weights(&[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn doubling_motions_leaves_the_loss_unchanged() {
        let losses = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let motions = [0.2, 0.7, 1.1, 0.05, 3.0, 0.4];
        let doubled: Vec<f64> = motions.iter().map(|m| 2.0 * m).collect();
        let a = weighted_loss(&losses, &batch_weights(&losses, &motions, 0.2).unwrap());
        let b = weighted_loss(&losses, &batch_weights(&losses, &doubled, 0.2).unwrap());
        assert!((a - b).abs() <= 1e-15 * a);
    }

    fn batch(seed: u64, n: usize, m: usize, size: usize) -> Vec<TrajectorySample> {
        (0..n as u64)
            .map(|i| {
                let t = texture(seed * 100 + i, 3, size, size);
                let searches = (1..=m as isize).map(|k| t.circshift(k, -k)).collect();
                sample_of(&t, searches)
            })
            .collect()
    }

    #[test]
    fn batch_gradient_is_the_weighted_sum_of_sample_gradients() {
        let cfg = TrainConfig {
            drop_fraction: 0.25,
            ..small_cfg()
        };
        let theta = NetParams::init(cfg.net, 8);
        let b = batch(1, 4, 2, 17);
        let out = batch_loss_and_grads(&b, &theta, &cfg).unwrap();
        assert_eq!(out.weights.num_dropped(), 1);
        let mut expect = theta.zeros_like();
        for (s, w) in b.iter().zip(&out.weights.norm) {
            let labels = forward_chain(s, &theta, &cfg).unwrap().labels;
            let g = cycle_loss_and_grad(s, &theta, &labels, w / 4.0, &cfg, false).unwrap();
            expect.axpy(1.0, &g.params);
        }
        for i in 0..theta.num_params() {
            assert!((out.grads.get_flat(i) - expect.get_flat(i)).abs() <= 1e-12 * (1.0 + expect.get_flat(i).abs()));
        }
        let threaded = batch_loss_and_grads(&b, &theta, &TrainConfig { jobs: 3, ..cfg }).unwrap();
        assert_eq!(threaded.loss, out.loss);
        assert_eq!(threaded.grads, out.grads);
    }

    #[test]
    fn non_finite_input_aborts_the_batch() {
        let cfg = small_cfg();
        let theta = NetParams::init(cfg.net, 9);
        let mut b = batch(2, 3, 1, 13);
        b[1].searches[0].data_mut()[5] = f64::NAN;
        assert!(matches!(batch_loss_and_grads(&b, &theta, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn malformed_samples_are_rejected() {
        let t = texture(1, 3, 9, 9);
        assert!(TrajectorySample::new(t.clone(), vec![], "v", vec![0]).is_err());
        assert!(TrajectorySample::new(t.clone(), vec![texture(1, 3, 9, 8)], "v", vec![0, 1]).is_err());
        assert!(TrajectorySample::new(t.clone(), vec![t.clone()], "v", vec![0]).is_err());
        let cfg = small_cfg();
        let theta = NetParams::init(cfg.net, 1);
        let s = sample_of(&t, vec![t.clone()]);
        assert!(cycle_losses(&s, &theta, &[], &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 11,
            net: NetShape::new(3, 3),
            ..small_cfg()
        };
        let data = batch(3, 5, 2, 15);
        let mut seen = Vec::new();
        let a = train(&data, &cfg, |r, _| {
            seen.push(r.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log[0].lr, cfg.lr.start);
        let b = train(&data, &TrainConfig { jobs: 2, ..cfg.clone() }, |_, _| Ok(())).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.log, b.log);
        assert_ne!(a.theta, NetParams::init(cfg.net, cfg.seed));
        assert!(a.log[0].to_line().starts_with("1,"));
    }

    #[test]
    fn training_rejects_bad_setups() {
        let empty: Vec<TrajectorySample> = Vec::new();
        assert!(train(&empty, &small_cfg(), |_, _| Ok(())).is_err());
        let data = batch(4, 2, 1, 9);
        for cfg in [
            TrainConfig { epochs: 0, ..small_cfg() },
            TrainConfig { drop_fraction: 1.5, ..small_cfg() },
            TrainConfig { sigma: Some(0.0), ..small_cfg() },
            TrainConfig { reg: RegConfig { lambda: -1.0 }, ..small_cfg() },
        ] {
            assert!(train(&data, &cfg, |_, _| Ok(())).is_err());
        }
    }

    #[test]
    fn smoothing_averages_neighbours() {
        let log: Vec<EpochRecord> = [4.0, 2.0, 3.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, l)| EpochRecord { epoch: i + 1, mean_loss: *l, lr: 0.1 })
            .collect();
        assert_eq!(smoothed_losses(&log), vec![3.0, 3.0, 2.0, 2.0]);
    }

    mod props {
        use super::super::*;
        use proptest::collection::vec;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn weights_keep_their_invariants(
                rows in vec((0.0f64..10.0, 0.0f64..5.0), 1..64),
                scale in 0.01f64..100.0,
            ) {
                let losses: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let motions: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let n = losses.len();
                let w = batch_weights(&losses, &motions, 0.1).unwrap();
                prop_assert_eq!(w.num_dropped(), n / 10);
                let sum: f64 = w.norm.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(w.norm.iter().all(|v| *v >= 0.0));
                let min_dropped = (0..n).filter(|&i| !w.keep[i]).map(|i| losses[i]).fold(f64::INFINITY, f64::min);
                let max_kept = (0..n).filter(|&i| w.keep[i]).map(|i| losses[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(min_dropped >= max_kept);
                let scaled: Vec<f64> = motions.iter().map(|m| m * scale).collect();
                let ws = batch_weights(&losses, &scaled, 0.1).unwrap();
                prop_assert_eq!(&ws.keep, &w.keep);
                for (a, b) in w.norm.iter().zip(&ws.norm) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
