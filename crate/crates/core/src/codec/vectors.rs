//! Range-coder test vectors.
//!
//! The vector file pins the coded bytes for a seeded corpus of tables and
//! symbol sequences. Any coder implementing the [`rangecoder`] contract
//! must reproduce every stream byte for byte.
//!
//! Layout (little-endian): magic `LVCV`, version `u8 = 1`, three reserved
//! bytes, case count `u32`, then per case: table count `u32`; per table
//! `offset i32`, `len u32`, `len` x `u32` cdf entries; symbol count `u32`,
//! symbols `i32` x n, table indices `u32` x n; stream length `u32`, stream
//! bytes.
//!
//! [`rangecoder`]: crate::codec::rangecoder

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::rangecoder::{self, CdfTable, TOTAL};
use crate::{Error, Result};

pub const VECTOR_MAGIC: &[u8; 4] = b"LVCV";
pub const VECTOR_VERSION: u8 = 1;
/// Seed and size of the published corpus.
pub const VECTOR_SEED: u64 = 0xC0DE_2024;
pub const VECTOR_CASES: usize = 96;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoderCase {
    pub tables: Vec<CdfTable>,
    pub symbols: Vec<i32>,
    pub indices: Vec<u32>,
    pub stream: Vec<u8>,
}

fn random_table(rng: &mut ChaCha8Rng) -> Result<CdfTable> {
    let n = match rng.random_range(0..4) {
        0 => 1,
        1 => rng.random_range(2..5),
        _ => rng.random_range(5..200),
    };
    // Peaked tables exercise long runs of cheap symbols and carries.
    let peaked = rng.random_bool(0.5);
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            if peaked {
                (-((i as f64 - n as f64 / 2.0).powi(2)) / (1.0 + n as f64 / 8.0)).exp() + 1e-6
            } else {
                rng.random::<f64>() + 1e-3
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let cdf = crate::codec::cdf::quantize_pmf(&pmf)?;
    CdfTable::new(cdf, rng.random_range(-300..300))
}

/// Generates the seeded corpus, coding every case with the reference coder.
pub fn generate(seed: u64, cases: usize) -> Result<Vec<CoderCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for k in 0..cases {
        let (tables, symbols, indices) = match k {
            0 => (vec![CdfTable::uniform(4, 0)?], vec![], vec![]),
            1 => (vec![CdfTable::uniform(1, 0)?], vec![0; 50], vec![0; 50]),
            2 => {
                // Extreme skew: the rare symbol forces long renormalization runs.
                let t = CdfTable::new(vec![0, 1, TOTAL], 0)?;
                let s: Vec<i32> = (0..300).map(|i| i32::from(i % 7 != 0)).collect();
                (vec![t], s, vec![0; 300])
            }
            _ => {
                let tables: Vec<CdfTable> =
                    (0..rng.random_range(1..6)).map(|_| random_table(&mut rng)).collect::<Result<_>>()?;
                let n = rng.random_range(0..400);
                let indices: Vec<u32> = (0..n).map(|_| rng.random_range(0..tables.len() as u32)).collect();
                let symbols = indices
                    .iter()
                    .map(|&i| {
                        let t = &tables[i as usize];
                        rng.random_range(t.min_symbol()..=t.max_symbol())
                    })
                    .collect();
                (tables, symbols, indices)
            }
        };
        let stream = rangecoder::encode(&symbols, &tables, &indices)?;
        out.push(CoderCase { tables, symbols, indices, stream });
    }
    Ok(out)
}

pub fn write(cases: &[CoderCase], mut w: impl Write) -> Result<()> {
    w.write_all(VECTOR_MAGIC)?;
    w.write_all(&[VECTOR_VERSION, 0, 0, 0])?;
    w.write_all(&(cases.len() as u32).to_le_bytes())?;
    for c in cases {
        w.write_all(&(c.tables.len() as u32).to_le_bytes())?;
        for t in &c.tables {
            w.write_all(&t.offset().to_le_bytes())?;
            w.write_all(&(t.cdf().len() as u32).to_le_bytes())?;
            for v in t.cdf() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(c.symbols.len() as u32).to_le_bytes())?;
        for s in &c.symbols {
            w.write_all(&s.to_le_bytes())?;
        }
        for i in &c.indices {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&(c.stream.len() as u32).to_le_bytes())?;
        w.write_all(&c.stream)?;
    }
    Ok(())
}

fn u32_le(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated vector file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

// Guards allocations against corrupt counts.
fn bounded(n: u32, limit: u32, what: &str) -> Result<usize> {
    if n > limit {
        return Err(Error::Format(format!("implausible {what} count {n}")));
    }
    Ok(n as usize)
}

pub fn read(mut r: impl Read) -> Result<Vec<CoderCase>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|e| Error::Format(format!("truncated vector file: {e}")))?;
    if &head[..4] != VECTOR_MAGIC {
        return Err(Error::Format("not a coder vector file".into()));
    }
    if head[4] != VECTOR_VERSION {
        return Err(Error::Format(format!("unsupported vector file version {}", head[4])));
    }
    let n_cases = bounded(u32_le(&mut r)?, 1 << 20, "case")?;
    let mut cases = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let n_tables = bounded(u32_le(&mut r)?, 1 << 16, "table")?;
        let mut tables = Vec::with_capacity(n_tables);
        for _ in 0..n_tables {
            let offset = u32_le(&mut r)? as i32;
            let len = bounded(u32_le(&mut r)?, TOTAL + 1, "cdf entry")?;
            let cdf = (0..len).map(|_| u32_le(&mut r)).collect::<Result<Vec<_>>>()?;
            tables.push(CdfTable::new(cdf, offset)?);
        }
        let n = bounded(u32_le(&mut r)?, 1 << 28, "symbol")?;
        let symbols = (0..n).map(|_| u32_le(&mut r).map(|v| v as i32)).collect::<Result<Vec<_>>>()?;
        let indices = (0..n).map(|_| u32_le(&mut r)).collect::<Result<Vec<_>>>()?;
        let len = bounded(u32_le(&mut r)?, 1 << 30, "stream byte")?;
        let mut stream = vec![0u8; len];
        r.read_exact(&mut stream).map_err(|e| Error::Format(format!("truncated vector file: {e}")))?;
        cases.push(CoderCase { tables, symbols, indices, stream });
    }
    Ok(cases)
}
