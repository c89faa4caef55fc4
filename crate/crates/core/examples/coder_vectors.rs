//! Writes the range-coder test vectors and verifies them.
//!
//! `cargo run --example coder_vectors -- [out.bin]`
//!
//! The flat-buffer calls below are the boundary any other coder
//! implementation binds to: concatenated CDFs, per-table lengths and
//! offsets, symbols and table indices in; bytes out.

use std::fs::File;
use std::io::BufWriter;

use lvcc::codec::rangecoder::{decode_flat, encode_flat};
use lvcc::codec::vectors::{self, VECTOR_CASES, VECTOR_SEED};

fn main() -> lvcc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "coder_vectors.bin".into());
    let cases = vectors::generate(VECTOR_SEED, VECTOR_CASES)?;
    vectors::write(&cases, BufWriter::new(File::create(&out)?))?;

    let mut symbols = 0;
    for case in &cases {
        let cdf_data: Vec<u32> = case.tables.iter().flat_map(|t| t.cdf().iter().copied()).collect();
        let cdf_lengths: Vec<u32> = case.tables.iter().map(|t| t.cdf().len() as u32).collect();
        let offsets: Vec<i32> = case.tables.iter().map(|t| t.offset()).collect();
        let bytes = encode_flat(&case.symbols, &case.indices, &cdf_data, &cdf_lengths, &offsets)?;
        assert_eq!(bytes, case.stream);
        let back = decode_flat(&bytes, &case.indices, &cdf_data, &cdf_lengths, &offsets, case.symbols.len())?;
        assert_eq!(back, case.symbols);
        symbols += case.symbols.len();
    }
    println!("wrote {out}: {} cases, {symbols} symbols, all streams reproduced", cases.len());
    Ok(())
}
