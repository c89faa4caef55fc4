use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use lvcc::codec::rangecoder::{self, CdfTable};
use lvcc::codec::vectors::{self, CoderCase, VECTOR_CASES, VECTOR_SEED};

fn vector_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/coder_vectors.bin")
}

fn load() -> Vec<CoderCase> {
    vectors::read(BufReader::new(File::open(vector_path()).unwrap())).unwrap()
}

fn flatten(tables: &[CdfTable]) -> (Vec<u32>, Vec<u32>, Vec<i32>) {
    let mut data = Vec::new();
    let mut lengths = Vec::new();
    let mut offsets = Vec::new();
    for t in tables {
        data.extend_from_slice(t.cdf());
        lengths.push(t.cdf().len() as u32);
        offsets.push(t.offset());
    }
    (data, lengths, offsets)
}

#[test]
fn file_matches_seeded_regeneration() {
    let stored = load();
    assert_eq!(stored.len(), VECTOR_CASES);
    assert_eq!(stored, vectors::generate(VECTOR_SEED, VECTOR_CASES).unwrap());
}

#[test]
fn file_bytes_round_trip_through_writer() {
    let raw = std::fs::read(vector_path()).unwrap();
    let mut out = Vec::new();
    vectors::write(&load(), &mut out).unwrap();
    assert_eq!(raw, out);
}

#[test]
fn every_stream_is_reproduced_by_the_table_api() {
    for (k, case) in load().iter().enumerate() {
        let bytes = rangecoder::encode(&case.symbols, &case.tables, &case.indices).unwrap();
        assert_eq!(bytes, case.stream, "case {k}");
        let decoded = rangecoder::decode(&case.stream, &case.tables, &case.indices, case.symbols.len()).unwrap();
        assert_eq!(decoded, case.symbols, "case {k}");
    }
}

#[test]
fn every_stream_is_reproduced_by_the_flat_api() {
    for (k, case) in load().iter().enumerate() {
        let (data, lengths, offsets) = flatten(&case.tables);
        let bytes = rangecoder::encode_flat(&case.symbols, &case.indices, &data, &lengths, &offsets).unwrap();
        assert_eq!(bytes, case.stream, "case {k}");
        let decoded =
            rangecoder::decode_flat(&case.stream, &case.indices, &data, &lengths, &offsets, case.symbols.len())
                .unwrap();
        assert_eq!(decoded, case.symbols, "case {k}");
    }
}

#[test]
fn stream_lengths_are_within_32_bytes_of_the_information_content() {
    // Ideal code length from the quantized frequencies, computed directly.
    for (k, case) in load().iter().enumerate() {
        let ideal_bits: f64 = case
            .symbols
            .iter()
            .zip(&case.indices)
            .map(|(&s, &i)| {
                let t = &case.tables[i as usize];
                let j = (s - t.offset()) as usize;
                let freq = f64::from(t.cdf()[j + 1] - t.cdf()[j]);
                -(freq / 65536.0).log2()
            })
            .sum();
        let actual_bytes = case.stream.len() as f64;
        assert!(8.0 * actual_bytes >= ideal_bits - 1e-9, "case {k}: {actual_bytes} bytes < {ideal_bits} bits");
        assert!(actual_bytes <= (ideal_bits / 8.0).ceil() + 32.0, "case {k}: {actual_bytes} bytes vs {ideal_bits} bits");
    }
}

#[test]
fn empty_message_is_four_bytes() {
    let case = &load()[0];
    assert!(case.symbols.is_empty());
    assert_eq!(case.stream.len(), 4);
}
