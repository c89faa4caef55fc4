use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

use lvcc::codec::cdf::quantize_pmf;
use lvcc::codec::rangecoder::{self, CdfTable};
use lvcc::evalkit::{bd_rate, dominates, pareto_front, RaPoint};
use lvcc::tokens::soft_rank_matrix;

fn points() -> impl Strategy<Value = Vec<RaPoint>> {
    prop::collection::vec((0.01f64..4.0, -10.0f64..100.0), 1..30)
        .prop_map(|v| v.into_iter().map(|(r, m)| RaPoint::new(r, m).unwrap()).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Soft rank through the eigenvalues of the smaller Gram matrix.
fn gram_soft_rank(rows: usize, cols: usize, v: &[f64]) -> f64 {
    let m = DMatrix::from_row_slice(rows, cols, v);
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    gram.symmetric_eigenvalues().iter().map(|&e| sigmoid(e.max(0.0).sqrt())).sum()
}

fn tables_and_message() -> impl Strategy<Value = (Vec<CdfTable>, Vec<i32>, Vec<u32>)> {
    let table = (prop::collection::vec(0.001f64..1.0, 1..60), -50i32..50).prop_map(|(w, off)| {
        let total: f64 = w.iter().sum();
        let pmf: Vec<f64> = w.iter().map(|x| x / total).collect();
        CdfTable::new(quantize_pmf(&pmf).unwrap(), off).unwrap()
    });
    prop::collection::vec(table, 1..5).prop_flat_map(|tables| {
        let n = tables.len();
        let picks = prop::collection::vec((0..n as u32, any::<prop::sample::Index>()), 0..300);
        (Just(tables), picks).prop_map(|(tables, picks)| {
            let mut symbols = Vec::with_capacity(picks.len());
            let mut indices = Vec::with_capacity(picks.len());
            for (i, pick) in picks {
                let t = &tables[i as usize];
                symbols.push(t.min_symbol() + pick.index(t.num_symbols()) as i32);
                indices.push(i);
            }
            (tables, symbols, indices)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pareto_front_is_a_nondominated_monotone_subset(pts in points()) {
        let front = pareto_front(&pts).unwrap();
        prop_assert!(!front.is_empty());
        for p in &front {
            prop_assert!(pts.contains(p));
        }
        for a in &front {
            for b in &front {
                prop_assert!(!dominates(a, b));
            }
        }
        for w in front.windows(2) {
            prop_assert!(w[0].rate <= w[1].rate);
            prop_assert!(w[0].metric <= w[1].metric);
        }
        for p in &pts {
            let kept = front.contains(p);
            let dominated = pts.iter().any(|q| dominates(q, p));
            prop_assert_eq!(kept, !dominated);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn range_coder_round_trips((tables, symbols, indices) in tables_and_message()) {
        let bytes = rangecoder::encode(&symbols, &tables, &indices).unwrap();
        let back = rangecoder::decode(&bytes, &tables, &indices, symbols.len()).unwrap();
        prop_assert_eq!(back, symbols);
    }

    #[test]
    fn decoding_random_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64), n in 0usize..100) {
        let table = CdfTable::uniform(7, -3).unwrap();
        let indices = vec![0u32; n];
        if let Ok(v) = rangecoder::decode(&bytes, std::slice::from_ref(&table), &indices, n) {
            prop_assert!(v.iter().all(|s| table.contains(*s)));
        }
    }

    #[test]
    fn soft_rank_matches_gram_eigenvalues_and_bounds(
        rows in 1usize..9,
        cols in 1usize..12,
        seed in prop::collection::vec(-3.0f64..3.0, 96),
    ) {
        let v: Vec<f64> = seed.into_iter().cycle().take(rows * cols).enumerate()
            .map(|(i, x)| x * (1.0 + (i % 5) as f64 * 0.3))
            .collect();
        let m = Tensor::from_vec(v.clone(), (rows, cols), &Device::Cpu).unwrap();
        let ours = soft_rank_matrix(&m).unwrap();
        let oracle = gram_soft_rank(rows, cols, &v);
        prop_assert!((ours - oracle).abs() < 1e-6, "{} vs {}", ours, oracle);
        let r = rows.min(cols) as f64;
        prop_assert!(ours >= r / 2.0 - 1e-12 && ours <= r + 1e-12);
    }

    #[test]
    fn bd_rate_of_a_scaled_curve_is_the_scale(
        base in prop::collection::vec(0.05f64..0.5, 5),
        factor in 0.3f64..3.0,
    ) {
        let mut rate = 0.05;
        let anchor: Vec<RaPoint> = base
            .iter()
            .enumerate()
            .map(|(i, step)| {
                rate += step;
                RaPoint::new(rate, 20.0 + 3.0 * i as f64 + rate.ln()).unwrap()
            })
            .collect();
        let test: Vec<RaPoint> = anchor.iter().map(|p| RaPoint::new(p.rate * factor, p.metric).unwrap()).collect();
        let bd = bd_rate(&anchor, &test).unwrap();
        prop_assert!((bd - 100.0 * (factor - 1.0)).abs() < 1e-6, "{} vs {}", bd, factor);
    }
}
