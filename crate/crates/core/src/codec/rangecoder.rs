//! Reference range coder over static 16-bit CDF tables.
//!
//! State is a 64-bit `low` with a 32-bit `range`; renormalization is
//! byte-wise with carry propagation through a cached byte. A stream is the
//! coder's byte output without its first byte (which is always zero),
//! so an empty message is four bytes and each symbol costs
//! `-log2(freq / 65536)` bits plus at most a few bytes for the whole stream.
//!
//! The batch functions take plain integer slices so other implementations
//! can be bound to the same call convention; see [`encode_flat`].

use crate::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;

/// Static distribution over the symbols `offset ..= offset + cdf.len() - 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    offset: i32,
}

impl CdfTable {
    /// `cdf` must start at 0, end at 65536 and be strictly increasing.
    pub fn new(cdf: Vec<u32>, offset: i32) -> Result<Self> {
        if cdf.len() < 2 {
            return Err(Error::Internal("cdf table needs at least two entries".into()));
        }
        if cdf[0] != 0 || *cdf.last().expect("non-empty") != TOTAL {
            return Err(Error::Internal(format!(
                "cdf table must run from 0 to {TOTAL}, got {} .. {}",
                cdf[0],
                cdf[cdf.len() - 1]
            )));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Internal("cdf table is not strictly increasing".into()));
        }
        Ok(Self { cdf, offset })
    }

    /// Equal mass on `n` symbols starting at `offset`; any remainder of
    /// `65536 / n` goes to the last symbol.
    pub fn uniform(n: usize, offset: i32) -> Result<Self> {
        if n == 0 || n > TOTAL as usize {
            return Err(Error::Internal(format!("cannot build a uniform table over {n} symbols")));
        }
        let step = TOTAL / n as u32;
        let mut cdf: Vec<u32> = (0..n as u32).map(|i| i * step).collect();
        cdf.push(TOTAL);
        Self::new(cdf, offset)
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn min_symbol(&self) -> i32 {
        self.offset
    }

    pub fn max_symbol(&self) -> i32 {
        self.offset + self.num_symbols() as i32 - 1
    }

    pub fn contains(&self, symbol: i32) -> bool {
        (self.min_symbol()..=self.max_symbol()).contains(&symbol)
    }

    /// Probability mass of `symbol` as the coder sees it.
    pub fn probability(&self, symbol: i32) -> f64 {
        if !self.contains(symbol) {
            return 0.0;
        }
        let i = (symbol - self.offset) as usize;
        f64::from(self.cdf[i + 1] - self.cdf[i]) / f64::from(TOTAL)
    }
}

#[derive(Debug, Clone)]
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
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
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

    /// Codes the sub-interval `[start, start + freq)` of `[0, 65536)`.
    pub fn encode_interval(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        if !table.contains(symbol) {
            return Err(Error::Encode(format!(
                "symbol {symbol} outside table support [{}, {}]",
                table.min_symbol(),
                table.max_symbol()
            )));
        }
        let i = (symbol - table.offset) as usize;
        self.encode_interval(table.cdf[i], table.cdf[i + 1] - table.cdf[i]);
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Decode(format!("stream of {} bytes is shorter than the 4-byte minimum", data.len())));
        }
        let code = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
        Ok(Self { data, pos: 4, code, range: u32::MAX })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .data
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Decode("range coder stream exhausted".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the index `s` with `cdf[s] <= target < cdf[s + 1]` and
    /// consumes that interval.
    pub fn decode_index(&mut self, cdf: &[u32]) -> Result<usize> {
        let r = self.range >> PRECISION;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(Error::Decode("corrupt range coder stream".into()));
        }
        let s = cdf.partition_point(|&c| c <= v) - 1;
        self.code -= r * cdf[s];
        self.range = r * (cdf[s + 1] - cdf[s]);
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(s)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        Ok(self.decode_index(&table.cdf)? as i32 + table.offset)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn table_for(tables: &[CdfTable], index: u32, position: usize) -> Result<&CdfTable> {
    tables.get(index as usize).ok_or_else(|| {
        Error::Encode(format!("symbol {position} references table {index} of {}", tables.len()))
    })
}

/// Codes `symbols[i]` with `tables[indices[i]]`.
pub fn encode(symbols: &[i32], tables: &[CdfTable], indices: &[u32]) -> Result<Vec<u8>> {
    if symbols.len() != indices.len() {
        return Err(Error::Encode(format!("{} symbols but {} table indices", symbols.len(), indices.len())));
    }
    let mut enc = RangeEncoder::new();
    for (pos, (&s, &i)) in symbols.iter().zip(indices).enumerate() {
        let t = table_for(tables, i, pos)?;
        enc.encode(s, t).map_err(|e| Error::Encode(format!("at position {pos}: {e}")))?;
    }
    Ok(enc.finish())
}

/// Inverse of [`encode`] for `count` symbols.
pub fn decode(bytes: &[u8], tables: &[CdfTable], indices: &[u32], count: usize) -> Result<Vec<i32>> {
    if indices.len() < count {
        return Err(Error::Decode(format!("{count} symbols requested but only {} table indices", indices.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for (pos, &i) in indices[..count].iter().enumerate() {
        let t = tables
            .get(i as usize)
            .ok_or_else(|| Error::Decode(format!("symbol {pos} references table {i} of {}", tables.len())))?;
        out.push(dec.decode(t)?);
    }
    Ok(out)
}

/// Rebuilds tables from the flat layout: table `k` owns the next
/// `cdf_lengths[k]` entries of `cdf_data` and starts at symbol `offsets[k]`.
pub fn tables_from_flat(cdf_data: &[u32], cdf_lengths: &[u32], offsets: &[i32]) -> Result<Vec<CdfTable>> {
    if cdf_lengths.len() != offsets.len() {
        return Err(Error::Internal(format!(
            "{} cdf lengths but {} offsets",
            cdf_lengths.len(),
            offsets.len()
        )));
    }
    let total: usize = cdf_lengths.iter().map(|&l| l as usize).sum();
    if total != cdf_data.len() {
        return Err(Error::Internal(format!("cdf lengths sum to {total}, data has {}", cdf_data.len())));
    }
    let mut start = 0;
    cdf_lengths
        .iter()
        .zip(offsets)
        .map(|(&len, &off)| {
            let end = start + len as usize;
            let t = CdfTable::new(cdf_data[start..end].to_vec(), off);
            start = end;
            t
        })
        .collect()
}

/// Flat-buffer form of [`encode`]: contiguous integer arrays in, bytes out.
pub fn encode_flat(
    symbols: &[i32],
    indices: &[u32],
    cdf_data: &[u32],
    cdf_lengths: &[u32],
    offsets: &[i32],
) -> Result<Vec<u8>> {
    encode(symbols, &tables_from_flat(cdf_data, cdf_lengths, offsets)?, indices)
}

/// Flat-buffer form of [`decode`].
pub fn decode_flat(
    bytes: &[u8],
    indices: &[u32],
    cdf_data: &[u32],
    cdf_lengths: &[u32],
    offsets: &[i32],
    count: usize,
) -> Result<Vec<i32>> {
    decode(bytes, &tables_from_flat(cdf_data, cdf_lengths, offsets)?, indices, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(rng: &mut ChaCha8Rng) -> CdfTable {
        let n = rng.random_range(1..40usize);
        let mut cuts: Vec<u32> = Vec::new();
        while cuts.len() < n - 1 {
            let c = rng.random_range(1..TOTAL);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.sort_unstable();
        let mut cdf = vec![0];
        cdf.extend(cuts);
        cdf.push(TOTAL);
        CdfTable::new(cdf, rng.random_range(-20..20)).unwrap()
    }

    #[test]
    fn uniform_quarters() {
        assert_eq!(CdfTable::uniform(4, 0).unwrap().cdf(), &[0, 16384, 32768, 49152, 65536]);
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(CdfTable::new(vec![0], 0).is_err());
        assert!(CdfTable::new(vec![0, 100, 100, TOTAL], 0).is_err());
        assert!(CdfTable::new(vec![1, TOTAL], 0).is_err());
        assert!(CdfTable::new(vec![0, 65535], 0).is_err());
    }

    #[test]
    fn empty_message() {
        let bytes = encode(&[], &[], &[]).unwrap();
        assert_eq!(bytes.len(), 4);
        assert!(decode(&bytes, &[], &[], 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_four_symbols_cost_two_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = CdfTable::uniform(4, 0).unwrap();
        let s: Vec<i32> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let bytes = encode(&s, std::slice::from_ref(&t), &vec![0; 1000]).unwrap();
        assert!((250..=258).contains(&bytes.len()), "{}", bytes.len());
        assert_eq!(decode(&bytes, &[t], &vec![0; 1000], 1000).unwrap(), s);
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tables: Vec<CdfTable> = (0..rng.random_range(1..5)).map(|_| random_table(&mut rng)).collect();
            let n = rng.random_range(0..300);
            let indices: Vec<u32> = (0..n).map(|_| rng.random_range(0..tables.len() as u32)).collect();
            let symbols: Vec<i32> = indices
                .iter()
                .map(|&i| {
                    let t = &tables[i as usize];
                    rng.random_range(t.min_symbol()..=t.max_symbol())
                })
                .collect();
            let bytes = encode(&symbols, &tables, &indices).unwrap();
            assert_eq!(decode(&bytes, &tables, &indices, n).unwrap(), symbols);
        }
    }

    #[test]
    fn out_of_support_symbol_reports_position() {
        let t = CdfTable::uniform(4, -1).unwrap();
        let err = encode(&[0, 1, 3], &[t], &[0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::Encode(ref m) if m.contains("position 2")), "{err}");
    }

    #[test]
    fn truncated_stream_is_a_decode_error() {
        let t = CdfTable::uniform(256, 0).unwrap();
        let s: Vec<i32> = (0..100).collect();
        let bytes = encode(&s, std::slice::from_ref(&t), &[0; 100]).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut, &[t], &[0; 100], 100), Err(Error::Decode(_))));
    }

    #[test]
    fn random_bytes_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_table(&mut rng);
        for _ in 0..500 {
            let len = rng.random_range(0..40);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let _ = decode(&bytes, std::slice::from_ref(&t), &[0; 64], 64);
        }
    }

    #[test]
    fn flat_layout_matches_table_api() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tables: Vec<CdfTable> = (0..3).map(|_| random_table(&mut rng)).collect();
        let data: Vec<u32> = tables.iter().flat_map(|t| t.cdf().to_vec()).collect();
        let lens: Vec<u32> = tables.iter().map(|t| t.cdf().len() as u32).collect();
        let offs: Vec<i32> = tables.iter().map(|t| t.offset()).collect();
        let indices: Vec<u32> = (0..50).map(|i| i % 3).collect();
        let symbols: Vec<i32> = indices.iter().map(|&i| tables[i as usize].max_symbol()).collect();
        let a = encode(&symbols, &tables, &indices).unwrap();
        let b = encode_flat(&symbols, &indices, &data, &lens, &offs).unwrap();
        assert_eq!(a, b);
        assert_eq!(decode_flat(&b, &indices, &data, &lens, &offs, 50).unwrap(), symbols);
    }
}
