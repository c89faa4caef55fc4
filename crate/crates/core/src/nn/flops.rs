//! Analytic FLOP accounting.
//!
//! Convolution and linear layers report `2 * fan_in * outputs` multiply-adds
//! here while a [`count`] scope is active on the current thread. Elementwise
//! work is not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(flops: u64) {
    COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + flops));
        }
    });
}

/// Runs `f` and returns its result together with the FLOPs it recorded.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = COUNTER.with(|c| c.replace(outer)).unwrap_or(0);
    if let Some(total) = outer {
        COUNTER.with(|c| c.set(Some(total + counted)));
    }
    (out, counted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_accumulate_outward() {
        let ((_, inner), outer) = count(|| {
            record(5);
            count(|| record(7))
        });
        assert_eq!(inner, 7);
        assert_eq!(outer, 12);
        record(100);
        assert_eq!(count(|| ()).1, 0);
    }
}
