//! Byte-oriented range coder over 16-bit frequency tables.
//!
//! Carry-propagating encoder with a 32-bit range, 8-bit renormalization and a
//! five-byte flush. Symbols outside a table's support are coded as the escape
//! entry followed by 32 raw sign-magnitude bits.

use crate::entropy::tables::{QuantizedCdf, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const MAX_ESCAPED: u64 = (1 << 31) - 1;

/// Symbols paired with the index of the table that codes each of them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolStream {
    pub symbols: Vec<i64>,
    pub cdf_index: Vec<usize>,
}

impl SymbolStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, symbol: i64, cdf_index: usize) {
        self.symbols.push(symbol);
        self.cdf_index.push(cdf_index);
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn encode_interval(&mut self, start: u32, size: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        self.normalize();
    }

    /// Writes `bits` (at most 16) raw bits of `value`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value >> bits == 0);
        self.range >>= bits;
        self.low += self.range as u64 * value as u64;
        self.normalize();
    }

    pub fn encode(&mut self, table: &QuantizedCdf, symbol: i64) -> Result<()> {
        match table.index_of(symbol) {
            Some(i) => {
                self.encode_interval(table.cdf()[i], table.freq(i));
                Ok(())
            }
            None => {
                let mag = symbol.unsigned_abs();
                if mag > MAX_ESCAPED {
                    return Err(Error::Contract(format!("symbol {symbol} exceeds the escape range")));
                }
                let esc = table.escape_index();
                self.encode_interval(table.cdf()[esc], table.freq(esc));
                let raw = ((symbol < 0) as u32) << 31 | mag as u32;
                self.encode_bits(raw >> 16, 16);
                self.encode_bits(raw & 0xFFFF, 16);
                Ok(())
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
        };
        // The encoder's first byte is the initial empty cache, always zero.
        if d.next_byte()? != 0 {
            return Err(Error::Decode("payload does not start with a zero byte".into()));
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("payload truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        self.range >>= bits;
        let v = self.code / self.range;
        if v >> bits != 0 {
            return Err(Error::Decode("corrupt raw bits".into()));
        }
        self.code -= v * self.range;
        self.normalize()?;
        Ok(v)
    }

    pub fn decode(&mut self, table: &QuantizedCdf) -> Result<i64> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >> PRECISION_BITS != 0 {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let i = table.lookup(target);
        self.code -= r * table.cdf()[i];
        self.range = r * table.freq(i);
        self.normalize()?;
        if i != table.escape_index() {
            return Ok(table.symbol_at(i) as i64);
        }
        let raw = self.decode_bits(16)? << 16 | self.decode_bits(16)?;
        let mag = (raw & 0x7FFF_FFFF) as i64;
        if table.index_of(if raw >> 31 == 1 { -mag } else { mag }).is_some() {
            return Err(Error::Decode("escaped symbol lies inside the table support".into()));
        }
        Ok(if raw >> 31 == 1 { -mag } else { mag })
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Errors unless the whole payload was consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn table_for(tables: &[QuantizedCdf], idx: usize) -> Result<&QuantizedCdf> {
    tables
        .get(idx)
        .ok_or_else(|| Error::Contract(format!("table index {idx} out of range ({} tables)", tables.len())))
}

pub fn rc_encode(stream: &SymbolStream, tables: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if stream.symbols.len() != stream.cdf_index.len() {
        return Err(Error::Contract("symbol and table index counts differ".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&s, &i) in stream.symbols.iter().zip(&stream.cdf_index) {
        enc.encode(table_for(tables, i)?, s)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(bytes: &[u8], tables: &[QuantizedCdf], n: usize, cdf_index: &[usize]) -> Result<Vec<i64>> {
    if cdf_index.len() != n {
        return Err(Error::Contract(format!("{n} symbols but {} table indices", cdf_index.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let out = cdf_index
        .iter()
        .map(|&i| dec.decode(table_for(tables, i)?))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::gaussian_tables;
    use crate::entropy::tables::TOTAL_FREQ;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(n: usize, seed: u64) -> SymbolStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = gaussian_tables();
        let mut s = SymbolStream::new();
        for _ in 0..n {
            let idx = rng.gen_range(0..tables.len());
            let sym = if rng.gen_bool(0.02) {
                rng.gen_range(-100_000i64..100_000)
            } else {
                rng.gen_range(-5i64..=5)
            };
            s.push(sym, idx);
        }
        s
    }

    #[test]
    fn round_trip_random_streams() {
        let tables = gaussian_tables();
        for seed in 0..50 {
            let s = random_stream(500, seed);
            let bytes = rc_encode(&s, tables).unwrap();
            assert_eq!(rc_decode(&bytes, tables, s.len(), &s.cdf_index).unwrap(), s.symbols);
        }
    }

    #[test]
    fn empty_stream() {
        let bytes = rc_encode(&SymbolStream::new(), gaussian_tables()).unwrap();
        assert!(bytes.len() <= 5);
        assert!(rc_decode(&bytes, gaussian_tables(), 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn near_deterministic_symbol_is_tiny() {
        // K entries: the first carries 2^16 - (K - 1), the others 1 each.
        let k = 8u32;
        let mut cdf = vec![0, TOTAL_FREQ - (k - 1)];
        cdf.extend((1..k).map(|i| TOTAL_FREQ - (k - 1) + i));
        let t = QuantizedCdf::from_cdf(0, cdf).unwrap();
        assert_eq!(t.freq(0), TOTAL_FREQ - (k - 1));
        let bytes = rc_encode(&SymbolStream { symbols: vec![0], cdf_index: vec![0] }, std::slice::from_ref(&t)).unwrap();
        assert!(bytes.len() <= 16, "{}", bytes.len());
        assert_eq!(rc_decode(&bytes, &[t], 1, &[0]).unwrap(), vec![0]);
    }

    #[test]
    fn payload_close_to_entropy() {
        let pmf = [0.5, 0.25, 0.125, 0.0625, 0.0625];
        let t = QuantizedCdf::from_pmf(0, &[pmf[0], pmf[1], pmf[2], pmf[3], pmf[4], 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut s = SymbolStream::new();
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let sym = pmf.iter().position(|p| {
                acc += p;
                u < acc
            });
            s.push(sym.unwrap_or(4) as i64, 0);
        }
        let entropy: f64 = pmf.iter().map(|p| -p * p.log2()).sum();
        let bytes = rc_encode(&s, std::slice::from_ref(&t)).unwrap();
        let bits = 8.0 * bytes.len() as f64;
        assert!(bits <= n as f64 * entropy + 0.1 * n as f64 + 128.0, "{bits}");
        assert_eq!(rc_decode(&bytes, &[t], n, &s.cdf_index).unwrap(), s.symbols);
    }

    #[test]
    fn truncation_is_a_decode_error() {
        let s = random_stream(300, 9);
        let bytes = rc_encode(&s, gaussian_tables()).unwrap();
        for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
            let r = rc_decode(&bytes[..cut], gaussian_tables(), s.len(), &s.cdf_index);
            assert!(matches!(r, Err(Error::Decode(_))), "cut {cut}");
        }
    }

    #[test]
    fn tampering_is_detected() {
        let s = random_stream(300, 10);
        let bytes = rc_encode(&s, gaussian_tables()).unwrap();
        // The last flush bytes may carry no information, so only the body is
        // required to change the outcome.
        for pos in 0..bytes.len() - 4 {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x5A;
            match rc_decode(&bad, gaussian_tables(), s.len(), &s.cdf_index) {
                Err(_) => {}
                Ok(out) => assert_ne!(out, s.symbols, "tamper at {pos} went unnoticed"),
            }
        }
    }

    #[test]
    fn oversized_symbol_rejected() {
        let s = SymbolStream {
            symbols: vec![1 << 40],
            cdf_index: vec![0],
        };
        assert!(rc_encode(&s, gaussian_tables()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn lossless(syms in proptest::collection::vec((-3000i64..3000, 0usize..64), 0..64)) {
            let s = SymbolStream {
                symbols: syms.iter().map(|p| p.0).collect(),
                cdf_index: syms.iter().map(|p| p.1).collect(),
            };
            let bytes = rc_encode(&s, gaussian_tables()).unwrap();
            prop_assert_eq!(rc_decode(&bytes, gaussian_tables(), s.len(), &s.cdf_index).unwrap(), s.symbols);
        }
    }
}
