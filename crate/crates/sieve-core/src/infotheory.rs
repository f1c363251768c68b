//! Nonparametric mutual-information and entropy estimation, plus the
//! analytical Gaussian upper bound on the additive-noise channel.
//!
//! The MI estimator is Kraskov-Stogbauer-Grassberger variant 1 with max-norm
//! neighborhoods: I = psi(k) + psi(N) - <psi(n_x + 1) + psi(n_y + 1)>.
//! Entropy uses the Kozachenko-Leonenko k-NN estimator. Both work directly on
//! samples without binning, which is what calibrates well on the Gaussian
//! fixtures the acceptance checks are built from.
//!
//! All estimates are in nats; divide by ln 2 for bits.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Row-major f64 sample matrix `[n, d]`.
#[derive(Debug, Clone)]
pub struct Samples {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n * d != data.len() || d == 0 {
            return Err(Error::InvalidArg {
                op: "Samples::new",
                msg: format!("{n} x {d} does not match data length {}", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArg {
                op: "Samples::new",
                msg: format!("non-finite value {v}"),
            });
        }
        Ok(Samples { n, d, data })
    }

    /// Flatten a feature batch `[n, ...]` into `[n, prod(rest)]`.
    pub fn from_batch(t: &Tensor) -> Result<Samples> {
        if t.shape().is_empty() {
            return Err(Error::InvalidArg {
                op: "Samples::from_batch",
                msg: "need at least rank 1".into(),
            });
        }
        let n = t.shape()[0];
        let d = t.len() / n;
        Samples::new(n, d, t.data().iter().map(|&v| v as f64).collect())
    }

    /// Extract one channel of an image batch `[n, c, h, w]` as `[n, h*w]`.
    pub fn from_channel(t: &Tensor, channel: usize) -> Result<Samples> {
        let s = t.shape();
        if s.len() != 4 || channel >= s[1] {
            return Err(Error::InvalidArg {
                op: "Samples::from_channel",
                msg: format!("channel {channel} of shape {:?}", s),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(n * hw);
        for i in 0..n {
            let base = (i * c + channel) * hw;
            data.extend(t.data()[base..base + hw].iter().map(|&v| v as f64));
        }
        Samples::new(n, hw, data)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Seeded uniform jitter of tiny amplitude; collapses no structure but
    /// breaks exact duplicates before neighbor searches.
    fn jittered(&self, amplitude: f64, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self
            .data
            .iter()
            .map(|&v| v + rng.gen_range(-amplitude..amplitude))
            .collect();
        Samples {
            n: self.n,
            d: self.d,
            data,
        }
    }
}

const JITTER: f64 = 1e-10;
const JITTER_SEED: u64 = 0x5eed_5eed;

/// Digamma via upward recurrence into the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma needs a positive argument, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln()
        - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
}

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Distance to the k-th nearest neighbor of point `i` (self excluded) under
/// the given metric.
fn kth_neighbor_distance(i: usize, k: usize, dist: impl Fn(usize) -> f64, n: usize) -> f64 {
    // small max-heap over the k best distances
    let mut best = vec![f64::INFINITY; k];
    for j in 0..n {
        if j == i {
            continue;
        }
        let d = dist(j);
        if d < best[k - 1] {
            best[k - 1] = d;
            let mut p = k - 1;
            while p > 0 && best[p] < best[p - 1] {
                best.swap(p, p - 1);
                p -= 1;
            }
        }
    }
    best[k - 1]
}

#[derive(Debug, Clone)]
pub struct MiEstimate {
    /// Mutual information in nats, clamped to be non-negative.
    pub value: f64,
    pub k: usize,
    pub n_samples: usize,
    pub method: &'static str,
    /// The estimator saturated near its ceiling psi(N) - psi(k): the
    /// variables are (close to) deterministically related and the true MI
    /// exceeds what k-NN counting can resolve.
    pub degenerate: bool,
}

/// Saturation ceiling of the KSG estimator.
pub fn ksg_saturation(n: usize, k: usize) -> f64 {
    digamma(n as f64) - digamma(k as f64)
}

/// KSG variant-1 mutual information between paired samples.
pub fn estimate_mi_ksg(x: &Samples, y: &Samples, k: usize) -> Result<MiEstimate> {
    if x.n != y.n {
        return Err(Error::InvalidArg {
            op: "estimate_mi_ksg",
            msg: format!("sample counts differ: {} vs {}", x.n, y.n),
        });
    }
    if k == 0 || x.n <= k {
        return Err(Error::InvalidArg {
            op: "estimate_mi_ksg",
            msg: format!("need n > k >= 1, got n = {}, k = {k}", x.n),
        });
    }
    crate::init_thread_pool();
    let n = x.n;
    let xj = x.jittered(JITTER, JITTER_SEED);
    let yj = y.jittered(JITTER, JITTER_SEED ^ 0xffff_ffff);

    let psi_sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = xj.row(i);
            let yi = yj.row(i);
            let eps = kth_neighbor_distance(
                i,
                k,
                |j| max_norm(xi, xj.row(j)).max(max_norm(yi, yj.row(j))),
                n,
            );
            let mut nx = 0usize;
            let mut ny = 0usize;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if max_norm(xi, xj.row(j)) < eps {
                    nx += 1;
                }
                if max_norm(yi, yj.row(j)) < eps {
                    ny += 1;
                }
            }
            digamma((nx + 1) as f64) + digamma((ny + 1) as f64)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();

    let raw = digamma(k as f64) + digamma(n as f64) - psi_sum / n as f64;
    let ceiling = ksg_saturation(n, k);
    Ok(MiEstimate {
        value: raw.max(0.0),
        k,
        n_samples: n,
        method: "ksg1-maxnorm",
        degenerate: raw >= 0.9 * ceiling,
    })
}

/// Kozachenko-Leonenko differential entropy (nats), max-norm, k = min(3, n-1).
pub fn estimate_entropy_kl(x: &Samples) -> Result<f64> {
    if x.n < 2 {
        return Err(Error::InvalidArg {
            op: "estimate_entropy_kl",
            msg: format!("need at least 2 samples, got {}", x.n),
        });
    }
    estimate_entropy_kl_with_k(x, 3.min(x.n - 1))
}

pub fn estimate_entropy_kl_with_k(x: &Samples, k: usize) -> Result<f64> {
    if k == 0 || x.n <= k {
        return Err(Error::InvalidArg {
            op: "estimate_entropy_kl",
            msg: format!("need n > k >= 1, got n = {}, k = {k}", x.n),
        });
    }
    crate::init_thread_pool();
    let n = x.n;
    let xj = x.jittered(JITTER, JITTER_SEED.wrapping_add(1));
    let log_eps_sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = xj.row(i);
            let eps = kth_neighbor_distance(i, k, |j| max_norm(xi, xj.row(j)), n);
            eps.max(f64::MIN_POSITIVE).ln()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    // volume of the max-norm unit ball is 2^d
    Ok(digamma(n as f64) - digamma(k as f64)
        + x.d as f64 * std::f64::consts::LN_2
        + (x.d as f64 / n as f64) * log_eps_sum)
}

/// Mutual-information loss of sifted representations, in percent, following
/// the channel-by-channel protocol: I(raw_c; sifted_c) averaged over
/// channels, divided by the raw self-information from the entropy estimator.
/// Single-channel inputs are flattened to one vector per item.
///
/// When the MI estimator saturates (sifted is essentially raw), the raw
/// entropy stands in for the unresolvable MI, giving a loss of 0%.
pub fn mi_loss_percent(raw: &Tensor, sifted: &Tensor, channels: usize) -> Result<f64> {
    if raw.shape() != sifted.shape() {
        return Err(Error::ShapeMismatch {
            op: "mi_loss_percent",
            lhs: raw.shape().to_vec(),
            rhs: sifted.shape().to_vec(),
        });
    }
    let (mi, h_raw) = if channels <= 1 {
        let x = Samples::from_batch(raw)?;
        let y = Samples::from_batch(sifted)?;
        let est = estimate_mi_ksg(&x, &y, 3)?;
        let h = estimate_entropy_kl(&x)?;
        let mi = if est.degenerate { h } else { est.value };
        (mi, h)
    } else {
        let mut mi_sum = 0.0;
        let mut h_sum = 0.0;
        for c in 0..channels {
            let x = Samples::from_channel(raw, c)?;
            let y = Samples::from_channel(sifted, c)?;
            let est = estimate_mi_ksg(&x, &y, 3)?;
            let h = estimate_entropy_kl(&x)?;
            mi_sum += if est.degenerate { h } else { est.value };
            h_sum += h;
        }
        (mi_sum / channels as f64, h_sum / channels as f64)
    };
    if h_raw <= 0.0 {
        return Err(Error::Numeric {
            op: "mi_loss_percent",
            msg: format!("entropy denominator invalid: {h_raw}"),
        });
    }
    Ok(((h_raw - mi) / h_raw * 100.0).clamp(0.0, 100.0))
}

/// The two analytic upper-bound forms for I(x; x + r) with r ~ N(0, diag(sigma^2)).
#[derive(Debug, Clone, Copy)]
pub struct MiBound {
    /// 1/2 log((2 pi e)^n) + 1/2 logdet(Cov(x) + Sigma) - 1/2 logdet(Sigma),
    /// computed by Cholesky with a 1e-8 ridge. The authoritative form.
    pub log_det_nats: f64,
    /// 1/2 sum_i log(2 pi e (1 + lambda_i / sigma_i^2)) with eigenvalues of
    /// Cov(x) in descending order paired with sigma by index. Approximate:
    /// the pairing assumes commuting structure.
    pub product_form_nats: f64,
}

/// Compute both bound forms from data samples and per-dimension noise scales.
pub fn mi_upper_bound(data: &Samples, sigma: &[f64]) -> Result<MiBound> {
    if sigma.len() != data.d {
        return Err(Error::InvalidArg {
            op: "mi_upper_bound",
            msg: format!("{} noise scales for dimension {}", sigma.len(), data.d),
        });
    }
    let d = data.d;
    let sigma2: Vec<f64> = sigma.iter().map(|&s| s.max(1e-6).powi(2)).collect();
    let cov = linalg::covariance(&data.data, data.n, d)?;
    let mut cov_plus = cov.clone();
    for i in 0..d {
        cov_plus[i * d + i] += sigma2[i];
    }
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    let logdet_sum = linalg::cholesky_logdet(&cov_plus, d, 1e-8)?;
    let logdet_sigma: f64 = sigma2.iter().map(|&s| s.ln()).sum();
    let log_det_nats = 0.5 * (d as f64) * two_pi_e.ln() + 0.5 * logdet_sum - 0.5 * logdet_sigma;

    let eigen = linalg::jacobi_eigenvalues(&cov, d);
    let product_form_nats = 0.5
        * eigen
            .iter()
            .zip(sigma2.iter())
            .map(|(&l, &s2)| (two_pi_e * (1.0 + l.max(0.0) / s2)).ln())
            .sum::<f64>();
    Ok(MiBound {
        log_det_nats,
        product_form_nats,
    })
}

/// Correlated standard-normal pairs; the calibration fixture for the KSG
/// estimator (closed-form MI = -1/2 ln(1 - rho^2)).
pub fn correlated_gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Samples, Samples) {
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let root = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        xs.push(z1);
        ys.push(rho * z1 + root * z2);
    }
    (
        Samples::new(n, 1, xs).expect("finite"),
        Samples::new(n, 1, ys).expect("finite"),
    )
}
