//! Integer CDF tables shared bit-exactly by encoder and decoder.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Probability precision of every coding table.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;
pub const NUM_SCALES: usize = 64;
/// Largest support radius of a Gaussian table.
pub const MAX_RADIUS: i32 = 2048;

/// Frequency table over the integers `offset .. offset + n - 1` plus a final
/// escape entry for anything outside that support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    offset: i32,
    /// Cumulative frequencies, `cdf[0] = 0`, `cdf[n] = 2^16`, strictly increasing.
    cdf: Vec<u32>,
}

impl QuantizedCdf {
    /// Builds a table from (unnormalized) probabilities of the in-support
    /// symbols followed by the escape mass.
    pub fn from_pmf(offset: i32, pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n < 2 || n as u32 > TOTAL_FREQ {
            return Err(Error::Contract(format!("pmf of {n} entries cannot be quantized")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Contract("pmf entries must be finite and non-negative".into()));
        }
        let total: f64 = pmf.iter().sum();
        let budget = (TOTAL_FREQ - n as u32) as f64;
        // Every entry gets 1, the rest is split by largest remainder.
        let mut freq = Vec::with_capacity(n);
        let mut rema = Vec::with_capacity(n);
        let mut used = 0u32;
        for &p in pmf {
            let share = if total > 0.0 { p / total * budget } else { budget / n as f64 };
            let fl = share.floor();
            freq.push(1 + fl as u32);
            rema.push(share - fl);
            used += fl as u32;
        }
        let mut left = (TOTAL_FREQ - n as u32) - used;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rema[b].total_cmp(&rema[a]).then(a.cmp(&b)));
        for &i in &order {
            if left == 0 {
                break;
            }
            freq[i] += 1;
            left -= 1;
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, TOTAL_FREQ);
        Ok(Self { offset, cdf })
    }

    /// Builds a table directly from cumulative frequencies.
    pub fn from_cdf(offset: i32, cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 3 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL_FREQ {
            return Err(Error::Contract("cdf must start at 0 and end at 2^16".into()));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("cdf must be strictly increasing".into()));
        }
        Ok(Self { offset, cdf })
    }

    /// Number of entries including the escape.
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn escape_index(&self) -> usize {
        self.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Table index of `symbol`, or `None` if it must be escaped.
    pub fn index_of(&self, symbol: i64) -> Option<usize> {
        let i = symbol - self.offset as i64;
        (0..self.escape_index() as i64).contains(&i).then_some(i as usize)
    }

    pub fn symbol_at(&self, index: usize) -> i32 {
        self.offset + index as i32
    }

    /// Entry whose cumulative interval contains `target < 2^16`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Serialized table bytes (offset then cdf, little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.offset.to_le_bytes().to_vec();
        for c in &self.cdf {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Ideal code length in bits of `symbol` under this table, escapes
    /// included.
    pub fn cost_bits(&self, symbol: i64) -> f64 {
        let total = TOTAL_FREQ as f64;
        match self.index_of(symbol) {
            Some(i) => -(self.freq(i) as f64 / total).log2(),
            None => -(self.freq(self.escape_index()) as f64 / total).log2() + 32.0,
        }
    }
}

/// Log-spaced Gaussian scales, `[0.11, 256]` in 64 steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTable {
    scales: Vec<f64>,
}

impl Default for ScaleTable {
    fn default() -> Self {
        let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
        let step = (hi - lo) / (NUM_SCALES - 1) as f64;
        let mut scales: Vec<f64> = (0..NUM_SCALES).map(|i| (lo + step * i as f64).exp()).collect();
        scales[0] = SCALE_MIN;
        scales[NUM_SCALES - 1] = SCALE_MAX;
        Self { scales }
    }
}

impl ScaleTable {
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Smallest table index whose scale is `>= sigma` (last index if none).
    pub fn index_of(&self, sigma: f64) -> usize {
        self.scales
            .partition_point(|&s| s < sigma)
            .min(NUM_SCALES - 1)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Support radius for a zero-mean Gaussian of the given scale.
pub fn support_radius(scale: f64) -> i32 {
    ((scale * 9.0).ceil() as i32 + 2).min(MAX_RADIUS)
}

/// Coding table of the discretized zero-mean Gaussian with table scale
/// `scale_index`. Depends on nothing but the index.
pub fn cdf_for_scale(scale_index: usize) -> Result<QuantizedCdf> {
    if scale_index >= NUM_SCALES {
        return Err(Error::Contract(format!("scale index {scale_index} out of range")));
    }
    let s = ScaleTable::default().scales[scale_index];
    let r = support_radius(s);
    let mut pmf: Vec<f64> = (-r..=r)
        .map(|v| {
            let a = (v as f64).abs();
            std_normal_cdf((0.5 - a) / s) - std_normal_cdf((-0.5 - a) / s)
        })
        .collect();
    pmf.push(2.0 * std_normal_cdf(-(r as f64 + 0.5) / s));
    QuantizedCdf::from_pmf(-r, &pmf)
}

/// All 64 Gaussian tables, built once per process.
pub fn gaussian_tables() -> &'static [QuantizedCdf] {
    static TABLES: OnceLock<Vec<QuantizedCdf>> = OnceLock::new();
    TABLES.get_or_init(|| {
        (0..NUM_SCALES)
            .map(|i| cdf_for_scale(i).expect("valid scale index"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_table_endpoints_and_monotone() {
        let t = ScaleTable::default();
        assert_eq!(t.scales()[0], 0.11);
        assert_eq!(t.scales()[63], 256.0);
        assert!(t.scales().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn index_of_is_smallest_scale_at_least_sigma() {
        let t = ScaleTable::default();
        for i in 0..NUM_SCALES {
            let s = t.scales()[i];
            assert_eq!(t.index_of(s), i);
            if i > 0 {
                let mid = 0.5 * (t.scales()[i - 1] + s);
                assert_eq!(t.index_of(mid), i);
            }
        }
        assert_eq!(t.index_of(0.01), 0);
        assert_eq!(t.index_of(1e9), 63);
        let mut last = 0;
        for k in 0..2000 {
            let i = t.index_of(0.1 * 1.005f64.powi(k));
            assert!(i >= last);
            last = i;
        }
    }

    #[test]
    fn every_table_sums_to_total_with_positive_freqs() {
        for (i, t) in gaussian_tables().iter().enumerate() {
            assert_eq!(*t.cdf().last().unwrap(), TOTAL_FREQ, "index {i}");
            assert!((0..t.len()).all(|j| t.freq(j) >= 1));
        }
    }

    #[test]
    fn smallest_scale_concentrates_at_zero() {
        let t = cdf_for_scale(0).unwrap();
        assert!(-t.offset() <= 4);
        let zero = t.index_of(0).unwrap();
        assert!(t.freq(zero) > TOTAL_FREQ - 64);
    }

    #[test]
    fn largest_scale_hits_radius_cap() {
        let t = cdf_for_scale(NUM_SCALES - 1).unwrap();
        assert_eq!(-t.offset(), MAX_RADIUS);
        assert_eq!(t.len() as i32, 2 * MAX_RADIUS + 2);
    }

    #[test]
    fn tables_are_byte_deterministic() {
        for i in [0, 17, 40, 63] {
            assert_eq!(cdf_for_scale(i).unwrap().to_bytes(), cdf_for_scale(i).unwrap().to_bytes());
            assert_eq!(cdf_for_scale(i).unwrap(), gaussian_tables()[i]);
        }
    }

    #[test]
    fn lookup_inverts_cumulative_intervals() {
        let t = cdf_for_scale(20).unwrap();
        for i in 0..t.len() {
            assert_eq!(t.lookup(t.cdf()[i]), i);
            assert_eq!(t.lookup(t.cdf()[i + 1] - 1), i);
        }
    }

    #[test]
    fn invalid_cdf_rejected() {
        assert!(QuantizedCdf::from_cdf(0, vec![0, 5, 5, TOTAL_FREQ]).is_err());
        assert!(QuantizedCdf::from_cdf(0, vec![0, 5, 7]).is_err());
        assert!(cdf_for_scale(64).is_err());
    }
}
