//! Discretization of the continuous entropy models into coder tables.

use statrs::function::erf::erfc;

use crate::codec::rangecoder::{CdfTable, RangeDecoder, RangeEncoder, TOTAL};
use crate::{Error, Result};

/// Probability mass left outside a table's symbol range; it is folded into
/// the two edge symbols.
pub const TAIL_MASS: f64 = 1e-9;
pub const SCALE_TABLE_LEN: usize = 64;
pub const SCALE_TABLE_MAX: f64 = 256.0;
/// Overflow beyond an edge symbol is coded with at most this many
/// Exp-Golomb prefix bits.
const MAX_ESCAPE_BITS: u32 = 30;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper standard normal quantile `z` with `P(X > z) = p`, by bisection.
fn normal_upper_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(-mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Quantizes a probability vector to integer frequencies summing to 65536,
/// each at least 1, and returns the cumulative table `[0, ..., 65536]`.
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    let n = pmf.len();
    if n == 0 || n > TOTAL as usize {
        return Err(Error::Internal(format!("cannot quantize a pmf over {n} symbols")));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Internal("pmf has negative or non-finite entries".into()));
    }
    let mass: f64 = pmf.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Internal("pmf has zero total mass".into()));
    }
    let mut freq: Vec<i64> = pmf
        .iter()
        .map(|p| ((p / mass) * f64::from(TOTAL)).round().max(1.0) as i64)
        .collect();
    let mut excess: i64 = freq.iter().sum::<i64>() - i64::from(TOTAL);
    // Take from (or give to) the largest entries, where the relative change
    // and hence the coding cost is smallest.
    while excess != 0 {
        let (i, &f) = freq
            .iter()
            .enumerate()
            .max_by_key(|(i, f)| (**f, std::cmp::Reverse(*i)))
            .expect("non-empty");
        if excess > 0 {
            let step = excess.min(f - 1).min((f / 8).max(1));
            if step <= 0 {
                return Err(Error::Internal("pmf cannot be normalized".into()));
            }
            freq[i] -= step;
            excess -= step;
        } else {
            freq[i] -= excess;
            excess = 0;
        }
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    if cdf.windows(2).any(|w| w[1] <= w[0]) || acc != TOTAL {
        return Err(Error::Internal("quantized cdf is not strictly increasing".into()));
    }
    Ok(cdf)
}

/// Table over the integers `lo..=hi` for a distribution with continuous CDF
/// `cdf`; the mass below `lo - 0.5` and above `hi + 0.5` goes to the edges.
pub fn table_from_cdf(lo: i32, hi: i32, cdf: impl Fn(f64) -> f64) -> Result<CdfTable> {
    if hi < lo {
        return Err(Error::Internal(format!("empty symbol range [{lo}, {hi}]")));
    }
    let pmf: Vec<f64> = (lo..=hi)
        .map(|k| {
            let upper = if k == hi { 1.0 } else { cdf(k as f64 + 0.5) };
            let lower = if k == lo { 0.0 } else { cdf(k as f64 - 0.5) };
            (upper - lower).max(0.0)
        })
        .collect();
    CdfTable::new(quantize_pmf(&pmf)?, lo)
}

/// `n` log-spaced scales from `min` to `max`, inclusive.
pub fn scale_table(min: f64, max: f64, n: usize) -> Vec<f64> {
    let (a, b) = (min.ln(), max.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                max
            } else if i == 0 {
                min
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Half-width `K` of the zero-mean Gaussian table for `scale`: the symbols
/// `-K..=K` hold all but [`TAIL_MASS`] of the distribution.
pub fn gaussian_support(scale: f64) -> i32 {
    let z = normal_upper_quantile(TAIL_MASS / 2.0);
    (scale * z).ceil().max(1.0) as i32
}

pub fn gaussian_table(scale: f64) -> Result<CdfTable> {
    let k = gaussian_support(scale);
    table_from_cdf(-k, k, |x| normal_cdf(x / scale))
}

pub fn gaussian_tables(scales: &[f64]) -> Result<Vec<CdfTable>> {
    scales.iter().map(|&s| gaussian_table(s)).collect()
}

/// Index of the smallest table scale `>= scale` (the last entry for
/// anything beyond the table).
pub fn snap_scale_index(table: &[f64], scale: f64) -> usize {
    table.partition_point(|&t| t < scale).min(table.len() - 1)
}

fn bit_table() -> CdfTable {
    CdfTable::new(vec![0, TOTAL / 2, TOTAL], 0).expect("valid binary table")
}

/// Codes `value` with `table`, clamping it into the table's support. When
/// the clamped symbol is an edge symbol, the distance past the edge
/// follows as an Exp-Golomb code on equiprobable bits, so every integer is
/// representable. One-symbol tables carry no escapes.
pub fn encode_clamped(enc: &mut RangeEncoder, value: i32, table: &CdfTable) -> Result<()> {
    let (lo, hi) = (table.min_symbol(), table.max_symbol());
    if lo == hi {
        return enc.encode(value, table);
    }
    let clamped = value.clamp(lo, hi);
    enc.encode(clamped, table)?;
    if clamped == lo {
        encode_exp_golomb(enc, (i64::from(lo) - i64::from(value)) as u64)?;
    } else if clamped == hi {
        encode_exp_golomb(enc, (i64::from(value) - i64::from(hi)) as u64)?;
    }
    Ok(())
}

pub fn decode_clamped(dec: &mut RangeDecoder<'_>, table: &CdfTable) -> Result<i32> {
    let (lo, hi) = (table.min_symbol(), table.max_symbol());
    let s = dec.decode(table)?;
    if lo == hi {
        return Ok(s);
    }
    let overflow = if s == lo || s == hi { decode_exp_golomb(dec)? } else { 0 };
    let v = if s == lo { i64::from(lo) - overflow as i64 } else { i64::from(s) + overflow as i64 };
    i32::try_from(v).map_err(|_| Error::Decode("escaped value out of range".into()))
}

fn encode_exp_golomb(enc: &mut RangeEncoder, n: u64) -> Result<()> {
    let bits = bit_table();
    let m = n + 1;
    let len = 64 - m.leading_zeros();
    if len - 1 > MAX_ESCAPE_BITS {
        return Err(Error::Encode(format!("escape value {n} is too large")));
    }
    for _ in 0..len - 1 {
        enc.encode(1, &bits)?;
    }
    enc.encode(0, &bits)?;
    for i in (0..len - 1).rev() {
        enc.encode(((m >> i) & 1) as i32, &bits)?;
    }
    Ok(())
}

fn decode_exp_golomb(dec: &mut RangeDecoder<'_>) -> Result<u64> {
    let bits = bit_table();
    let mut len = 0;
    while dec.decode(&bits)? == 1 {
        len += 1;
        if len > MAX_ESCAPE_BITS {
            return Err(Error::Decode("escape code too long".into()));
        }
    }
    let mut m: u64 = 1;
    for _ in 0..len {
        m = (m << 1) | dec.decode(&bits)? as u64;
    }
    Ok(m - 1)
}

/// Codes each value with `tables[indices[i]]` (with escapes past the edges).
pub fn encode_values(values: &[i32], tables: &[CdfTable], indices: &[u32]) -> Result<Vec<u8>> {
    if values.len() != indices.len() {
        return Err(Error::Encode(format!("{} values but {} table indices", values.len(), indices.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&v, &i) in values.iter().zip(indices) {
        let t = tables
            .get(i as usize)
            .ok_or_else(|| Error::Encode(format!("table index {i} out of range")))?;
        encode_clamped(&mut enc, v, t)?;
    }
    Ok(enc.finish())
}

pub fn decode_values(bytes: &[u8], tables: &[CdfTable], indices: &[u32]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    indices
        .iter()
        .map(|&i| {
            let t = tables
                .get(i as usize)
                .ok_or_else(|| Error::Decode(format!("table index {i} out of range")))?;
            decode_clamped(&mut dec, t)
        })
        .collect()
}
