//! Quantized cumulative frequency tables derived from the logistic entropy
//! model: probabilities floored at 1/2^16 and renormalized by largest
//! remainder so each channel's total is exactly 2^16.

use crate::autodiff::kernels::logistic_bin_prob;
use crate::codec::{CodecModel, LatentKind};

use super::range::{ChannelCdf, CDF_TOTAL};

/// Per-channel tables over integer symbols in `[-bound, bound]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    channels: Vec<ChannelCdf>,
    bound: i32,
}

impl CdfTable {
    pub fn channel(&self, c: usize) -> &ChannelCdf {
        &self.channels[c]
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn bound(&self) -> i32 {
        self.bound
    }

    pub fn symbol_count(&self) -> usize {
        2 * self.bound as usize + 1
    }

    /// Symbol table index of latent value `v`.
    pub fn index_of(&self, v: i32) -> usize {
        (v + self.bound) as usize
    }

    pub fn value_of(&self, index: usize) -> i32 {
        index as i32 - self.bound
    }

    /// Build one channel from a logistic location-scale pair.
    pub fn channel_from_logistic(mu: f64, s: f64, bound: i32) -> ChannelCdf {
        let n = 2 * bound as usize + 1;
        let p_floor = 1.0 / CDF_TOTAL as f64;
        let probs: Vec<f64> = (0..n)
            .map(|i| {
                let v = i as f64 - bound as f64;
                logistic_bin_prob(v, mu, s).max(p_floor)
            })
            .collect();
        let total_p: f64 = probs.iter().sum();
        let ideal: Vec<f64> = probs
            .iter()
            .map(|p| p / total_p * CDF_TOTAL as f64)
            .collect();
        let mut freqs: Vec<u32> = ideal.iter().map(|&x| (x.floor() as u32).max(1)).collect();
        let mut assigned: i64 = freqs.iter().map(|&f| f as i64).sum();
        // largest-remainder distribution, deterministic tie-break by index
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let ra = ideal[a] - ideal[a].floor();
            let rb = ideal[b] - ideal[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut k = 0;
        while assigned < CDF_TOTAL as i64 {
            freqs[order[k % n]] += 1;
            assigned += 1;
            k += 1;
        }
        // the minimum-1 floor can overshoot; take back from the largest bins
        while assigned > CDF_TOTAL as i64 {
            let (idx, _) = freqs
                .iter()
                .enumerate()
                .filter(|(_, &f)| f > 1)
                .max_by(|(ia, fa), (ib, fb)| fa.cmp(fb).then(ib.cmp(ia)))
                .expect("some bin above 1");
            freqs[idx] -= 1;
            assigned -= 1;
        }
        ChannelCdf::from_freqs(&freqs)
    }

    /// Tables for the entropy model of the given latent kind.
    pub fn for_model(model: &CodecModel, kind: LatentKind) -> CdfTable {
        let (mu, s) = model.entropy_params(kind);
        let bound = model.config.latent_bound;
        let channels = mu
            .iter()
            .zip(&s)
            .map(|(&m, &sc)| Self::channel_from_logistic(m, sc, bound))
            .collect();
        CdfTable { channels, bound }
    }
}
