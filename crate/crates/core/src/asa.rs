//! Feature-statistic adversarial style augmentation.
//!
//! Speaker style is modelled as the per-channel mean and standard deviation
//! of an instance. Each training instance is normalized, then re-styled with
//! statistics drawn from Gaussians centred on its own statistics, with
//! spreads derived from how much those statistics vary across the batch.
//! The spread scale is a learnable parameter that sits behind a gradient
//! reversal node, so it is pushed to make the downstream loss larger while
//! the encoder is pushed to make it smaller.
//!
//! Two evaluation paths exist: plain functions over `ndarray` values
//! ([`asa_forward`]) and a taped path ([`asa_forward_graph`]) used by the
//! trainer. Both consume the same [`StyleNoise`] draws.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, softplus_inv, Graph, Mat, Var};
use crate::error::{Error, Result};

/// Stabilizer inside the standard-deviation square root.
pub const EPS: f64 = 1e-5;
/// Floor for sampled standard deviations.
pub const SIGMA_MIN: f64 = 1e-3;
/// Default cap on literal-mode spreads.
pub const LITERAL_CAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Standard deviations, across a batch, of per-instance means and sigmas.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpread {
    pub sigma_mu: Array1<f64>,
    pub sigma_sigma: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// `I / (I * spread)`, taken as written; cancels to `1 / spread`.
    Literal,
    /// `softplus(I) * spread`.
    #[default]
    LearnedScale,
    /// `spread` unchanged.
    Fixed,
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "learned-scale" => Ok(Self::LearnedScale),
            "fixed" => Ok(Self::Fixed),
            _ => Err(Error::Config(format!("unknown perturbation mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::LearnedScale => "learned-scale",
            Self::Fixed => "fixed",
        })
    }
}

/// Persistent per-channel perturbation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbParams {
    pub i_mu: Array1<f64>,
    pub i_sigma: Array1<f64>,
    pub mode: PerturbMode,
    pub grl_lambda: f64,
    pub literal_cap: f64,
}

impl PerturbParams {
    /// Parameters initialized so that `softplus(I) = 1`.
    pub fn new(channels: usize, mode: PerturbMode) -> Self {
        let init = softplus_inv(1.0);
        Self {
            i_mu: Array1::from_elem(channels, init),
            i_sigma: Array1::from_elem(channels, init),
            mode,
            grl_lambda: 1.0,
            literal_cap: LITERAL_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grl_lambda > 0.0) {
            return Err(Error::Validation(format!(
                "GRL lambda must be positive, got {}",
                self.grl_lambda
            )));
        }
        if self.i_mu.len() != self.i_sigma.len() {
            return Err(Error::Shape("i_mu and i_sigma lengths differ".into()));
        }
        if self.i_mu.iter().chain(self.i_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite perturbation parameter".into()));
        }
        Ok(())
    }
}

/// Training or inference. Augmentation only exists during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

/// Per-channel mean and `sqrt(population variance + eps^2)` over frames.
pub fn channel_stats(x: &Array2<f64>, eps: f64) -> Result<ChannelStats> {
    let w = x.nrows();
    if w < 2 {
        return Err(Error::Shape(format!("channel_stats needs >= 2 frames, got {w}")));
    }
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mu;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
    let sigma = var.mapv(|v| (v + eps * eps).sqrt());
    Ok(ChannelStats { mu, sigma })
}

fn check_channels(x: &Array2<f64>, c: usize, what: &str) -> Result<()> {
    if x.ncols() != c {
        return Err(Error::Shape(format!(
            "{what}: input has {} channels, statistics have {c}",
            x.ncols()
        )));
    }
    Ok(())
}

pub fn instance_normalize(x: &Array2<f64>, stats: &ChannelStats) -> Result<Array2<f64>> {
    check_channels(x, stats.channels(), "instance_normalize")?;
    Ok((x - &stats.mu) / &stats.sigma)
}

pub fn batch_stat_spread(batch: &[ChannelStats]) -> Result<BatchSpread> {
    if batch.len() < 2 {
        return Err(Error::Validation(format!(
            "batch statistic spread needs B >= 2, got {}",
            batch.len()
        )));
    }
    let c = batch[0].channels();
    if batch.iter().any(|s| s.channels() != c) {
        return Err(Error::Shape("instances disagree on channel count".into()));
    }
    let pop_std = |rows: Vec<&Array1<f64>>| {
        let n = rows.len() as f64;
        let mean = rows.iter().fold(Array1::<f64>::zeros(c), |acc, r| acc + *r) / n;
        let var = rows
            .iter()
            .fold(Array1::<f64>::zeros(c), |acc, r| acc + (*r - &mean).mapv(|d| d * d))
            / n;
        var.mapv(f64::sqrt)
    };
    Ok(BatchSpread {
        sigma_mu: pop_std(batch.iter().map(|s| &s.mu).collect()),
        sigma_sigma: pop_std(batch.iter().map(|s| &s.sigma).collect()),
    })
}

fn literal(i: f64, spread: f64, cap: f64) -> f64 {
    let den = i * spread;
    if den == 0.0 {
        return cap;
    }
    (i / den).min(cap)
}

pub fn perturbed_spread(params: &PerturbParams, spread: &BatchSpread) -> BatchSpread {
    match params.mode {
        PerturbMode::Fixed => spread.clone(),
        PerturbMode::LearnedScale => BatchSpread {
            sigma_mu: params.i_mu.mapv(softplus) * &spread.sigma_mu,
            sigma_sigma: params.i_sigma.mapv(softplus) * &spread.sigma_sigma,
        },
        PerturbMode::Literal => {
            let cap = params.literal_cap;
            BatchSpread {
                sigma_mu: ndarray::Zip::from(&params.i_mu)
                    .and(&spread.sigma_mu)
                    .map_collect(|&i, &s| literal(i, s, cap)),
                sigma_sigma: ndarray::Zip::from(&params.i_sigma)
                    .and(&spread.sigma_sigma)
                    .map_collect(|&i, &s| literal(i, s, cap)),
            }
        }
    }
}

/// Standard-normal draws for one batch: per instance, `C` draws for the
/// mean followed by `C` draws for the standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleNoise {
    pub z_mu: Array2<f64>,
    pub z_sigma: Array2<f64>,
}

impl StyleNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, channels: usize) -> Self {
        let mut z_mu = Array2::zeros((batch, channels));
        let mut z_sigma = Array2::zeros((batch, channels));
        for b in 0..batch {
            for c in 0..channels {
                z_mu[[b, c]] = rng.sample(StandardNormal);
            }
            for c in 0..channels {
                z_sigma[[b, c]] = rng.sample(StandardNormal);
            }
        }
        Self { z_mu, z_sigma }
    }
}

fn apply_noise(
    stats: &ChannelStats,
    spread: &BatchSpread,
    z_mu: ndarray::ArrayView1<f64>,
    z_sigma: ndarray::ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let mu_t = &stats.mu + &(&z_mu * &spread.sigma_mu);
    let sigma_t = (&stats.sigma + &(&z_sigma * &spread.sigma_sigma)).mapv(|s| s.max(SIGMA_MIN));
    (mu_t, sigma_t)
}

/// Draws target statistics `mu_t ~ N(mu, spread_mu)`, `sigma_t ~ N(sigma, spread_sigma)`,
/// with `sigma_t` floored at [`SIGMA_MIN`].
pub fn sample_stats<R: Rng + ?Sized>(
    stats: &ChannelStats,
    spread: &BatchSpread,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let noise = StyleNoise::draw(rng, 1, stats.channels());
    apply_noise(stats, spread, noise.z_mu.row(0), noise.z_sigma.row(0))
}

/// `x_n * sigma_t + mu_t` per channel.
pub fn style_transform(
    x_n: &Array2<f64>,
    mu_t: &Array1<f64>,
    sigma_t: &Array1<f64>,
) -> Result<Array2<f64>> {
    check_channels(x_n, mu_t.len(), "style_transform")?;
    check_channels(x_n, sigma_t.len(), "style_transform")?;
    Ok(x_n * sigma_t + mu_t)
}

/// Intermediate results of one augmentation pass.
#[derive(Debug, Clone)]
pub struct AsaTrace {
    pub stats: Vec<ChannelStats>,
    pub normalized: Vec<Array2<f64>>,
    pub spread: BatchSpread,
    pub perturbed: BatchSpread,
}

fn prepare(batch: &[Array2<f64>], params: &PerturbParams, phase: Phase) -> Result<AsaTrace> {
    if phase == Phase::Inference {
        return Err(Error::Contract("style augmentation invoked at inference".into()));
    }
    params.validate()?;
    if batch.len() < 2 {
        return Err(Error::Validation(format!(
            "style augmentation needs B >= 2, got {}",
            batch.len()
        )));
    }
    let c = params.i_mu.len();
    let stats = batch
        .iter()
        .map(|x| {
            check_channels(x, c, "asa")?;
            channel_stats(x, EPS)
        })
        .collect::<Result<Vec<_>>>()?;
    let normalized = batch
        .iter()
        .zip(&stats)
        .map(|(x, s)| instance_normalize(x, s))
        .collect::<Result<Vec<_>>>()?;
    let spread = batch_stat_spread(&stats)?;
    let perturbed = perturbed_spread(params, &spread);
    Ok(AsaTrace {
        stats,
        normalized,
        spread,
        perturbed,
    })
}

/// Full augmentation of a batch of `W x C` instances.
pub fn asa_forward<R: Rng + ?Sized>(
    batch: &[Array2<f64>],
    params: &PerturbParams,
    phase: Phase,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let trace = prepare(batch, params, phase)?;
    let noise = StyleNoise::draw(rng, batch.len(), params.i_mu.len());
    asa_apply(&trace, &noise)
}

/// Re-styles a prepared batch with explicit noise draws.
pub fn asa_apply(trace: &AsaTrace, noise: &StyleNoise) -> Result<Vec<Array2<f64>>> {
    trace
        .normalized
        .iter()
        .zip(&trace.stats)
        .enumerate()
        .map(|(b, (x_n, s))| {
            let (mu_t, sigma_t) = apply_noise(s, &trace.perturbed, noise.z_mu.row(b), noise.z_sigma.row(b));
            style_transform(x_n, &mu_t, &sigma_t)
        })
        .collect()
}

pub fn asa_prepare(batch: &[Array2<f64>], params: &PerturbParams, phase: Phase) -> Result<AsaTrace> {
    prepare(batch, params, phase)
}

fn row(a: &Array1<f64>) -> Mat {
    a.clone().insert_axis(Axis(0))
}

/// Taped augmentation. `i_mu` and `i_sigma` are `1 x C` nodes holding the
/// current perturbation parameters; in learned-scale mode the perturbed
/// spread passes through a gradient reversal node before sampling, so those
/// parameters receive sign-reversed gradients. Returns `(B*W) x C`.
pub fn asa_forward_graph(
    g: &mut Graph,
    trace: &AsaTrace,
    params: &PerturbParams,
    i_mu: Var,
    i_sigma: Var,
    noise: &StyleNoise,
) -> Result<Var> {
    let b = trace.normalized.len();
    let w = trace.normalized[0].nrows();
    if trace.normalized.iter().any(|x| x.nrows() != w) {
        return Err(Error::Shape("taped augmentation needs equal-length instances".into()));
    }
    let views: Vec<_> = trace.normalized.iter().map(|x| x.view()).collect();
    let s_n = g.constant(ndarray::concatenate(Axis(0), &views).expect("same channels"));
    let stack = |f: &dyn Fn(&ChannelStats) -> &Array1<f64>| {
        let rows: Vec<_> = trace.stats.iter().map(|s| f(s).view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &rows).expect("same channels")
    };
    let mu = g.constant(stack(&|s| &s.mu));
    let sigma = g.constant(stack(&|s| &s.sigma));

    let (p_mu, p_sigma) = match params.mode {
        PerturbMode::LearnedScale => {
            let sm = g.constant(row(&trace.spread.sigma_mu));
            let ss = g.constant(row(&trace.spread.sigma_sigma));
            let scale_mu = g.softplus(i_mu);
            let scale_sigma = g.softplus(i_sigma);
            let pm = g.mul(scale_mu, sm);
            let ps = g.mul(scale_sigma, ss);
            (g.grl(pm, params.grl_lambda), g.grl(ps, params.grl_lambda))
        }
        // No live dependence on the parameters in these modes.
        PerturbMode::Literal | PerturbMode::Fixed => (
            g.constant(row(&trace.perturbed.sigma_mu)),
            g.constant(row(&trace.perturbed.sigma_sigma)),
        ),
    };
    let z_mu = g.constant(noise.z_mu.clone());
    let z_sigma = g.constant(noise.z_sigma.clone());
    let d_mu = g.mul_row(z_mu, p_mu);
    let mu_t = g.add(mu, d_mu);
    let d_sigma = g.mul_row(z_sigma, p_sigma);
    let sigma_t = g.add(sigma, d_sigma);
    let sigma_t = g.clamp_min(sigma_t, SIGMA_MIN);
    debug_assert_eq!(g.value(mu_t).nrows(), b);
    let sig_rep = g.repeat_rows(sigma_t, w);
    let mu_rep = g.repeat_rows(mu_t, w);
    let scaled = g.mul(s_n, sig_rep);
    Ok(g.add(scaled, mu_rep))
}
