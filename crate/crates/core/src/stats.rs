//! Small statistics helpers shared by the experiments.

/// Pairwise (cascade) summation; result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_err: f64::NAN,
                n,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Whether the two estimates differ by at most `k` combined standard errors.
    pub fn agrees_with(&self, other: &MeanEstimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.std_err.hypot(other.std_err)
    }
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Density histogram of `samples` on `n_bins` equal bins over `[lo, hi)`.
/// Samples outside the range are counted in the normalization but not binned.
pub fn density_histogram(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &x in samples {
        if x >= lo && x < hi {
            let k = (((x - lo) / width) as usize).min(n_bins - 1);
            counts[k] += 1;
        }
    }
    let norm = samples.len() as f64 * width;
    counts.into_iter().map(|c| c as f64 / norm).collect()
}
