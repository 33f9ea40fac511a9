//! Monte Carlo means with batch-jackknife standard errors.
//!
//! The index range `0..n` is cut into [`N_BATCHES`] contiguous batches.
//! Batches run in parallel, each summing its samples in index order, and
//! the batch sums are combined in batch order. Sample `i` draws from the
//! counter stream `i`, so the result is bit-identical for any thread count.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng::CounterRng;

pub const N_BATCHES: usize = 32;

/// Per-batch sample means of an `m`-valued integrand.
#[derive(Clone, Debug)]
pub struct BatchMeans {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Estimate with one standard error per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n: usize,
}

/// Run `f` once per sample index and collect batch means.
pub fn batch_means<F>(n: usize, seed: u64, m: usize, f: F) -> BatchMeans
where
    F: Fn(&mut ChaCha8Rng, u64, &mut [f64]) + Sync,
{
    let rng = CounterRng::new(seed);
    let batches = N_BATCHES.min(n.max(1));
    let per: Vec<(Vec<f64>, usize)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * n / batches;
            let hi = (b + 1) * n / batches;
            let mut sum = vec![0.0; m];
            let mut buf = vec![0.0; m];
            for i in lo..hi {
                let mut r = rng.stream(i as u64);
                buf.iter_mut().for_each(|x| *x = 0.0);
                f(&mut r, i as u64, &mut buf);
                for (s, x) in sum.iter_mut().zip(&buf) {
                    *s += x;
                }
            }
            let c = hi - lo;
            let mean = sum.iter().map(|s| if c > 0 { s / c as f64 } else { 0.0 }).collect();
            (mean, c)
        })
        .collect();
    let (means, counts) = per.into_iter().unzip();
    BatchMeans { means, counts }
}

impl BatchMeans {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn pooled(&self, skip: Option<usize>) -> Vec<f64> {
        let m = self.means[0].len();
        let mut acc = vec![0.0; m];
        let mut tot = 0usize;
        for (b, (mean, c)) in self.means.iter().zip(&self.counts).enumerate() {
            if Some(b) == skip {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(mean) {
                *a += x * *c as f64;
            }
            tot += c;
        }
        acc.iter().map(|a| a / tot as f64).collect()
    }

    /// Jackknife over batches of a smooth statistic of the pooled means.
    pub fn jackknife<S>(&self, stat: S) -> (f64, f64)
    where
        S: Fn(&[f64]) -> f64,
    {
        let full = stat(&self.pooled(None));
        let b = self.means.len();
        if b < 2 {
            return (full, f64::NAN);
        }
        let loo: Vec<f64> = (0..b).map(|j| stat(&self.pooled(Some(j)))).collect();
        let avg = loo.iter().sum::<f64>() / b as f64;
        let var = loo.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>() * (b as f64 - 1.0) / b as f64;
        (full, var.sqrt())
    }

    pub fn estimate(&self) -> McEstimate {
        let m = self.means[0].len();
        let mut mean = Vec::with_capacity(m);
        let mut se = Vec::with_capacity(m);
        for k in 0..m {
            let (v, s) = self.jackknife(|x| x[k]);
            mean.push(v);
            se.push(s);
        }
        McEstimate {
            mean,
            std_err: se,
            n: self.total(),
        }
    }
}

/// Shorthand: plain MC mean with jackknife errors.
pub fn mc_mean<F>(n: usize, seed: u64, m: usize, f: F) -> McEstimate
where
    F: Fn(&mut ChaCha8Rng, u64, &mut [f64]) + Sync,
{
    batch_means(n, seed, m, f).estimate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_mean_and_error() {
        let e = mc_mean(100_000, 3, 1, |r, _, out| out[0] = r.random::<f64>());
        assert!((e.mean[0] - 0.5).abs() < 4.0 * e.std_err[0]);
        // sd of U(0,1) is 1/sqrt(12).
        let expect = (1.0f64 / 12.0).sqrt() / (1e5f64).sqrt();
        assert!((e.std_err[0] / expect - 1.0).abs() < 0.35);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let f = |r: &mut ChaCha8Rng, _: u64, out: &mut [f64]| out[0] = r.random::<f64>().powi(2);
        let a = mc_mean(10_000, 9, 1, f);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_mean(10_000, 9, 1, f));
        assert_eq!(a, b);
    }
}
