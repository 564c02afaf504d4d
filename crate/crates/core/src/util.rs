//! Small shared helpers.

/// Derives an independent seed for `stream` from `base` (splitmix64 finalizer).
pub fn sub_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps `f` over `items` on up to `threads` scoped threads. Output order
/// follows input order regardless of scheduling.
pub fn par_map<T, U, E, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>, E>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(sub_seed(0, 0), sub_seed(0, 1));
        assert_ne!(sub_seed(0, 1), sub_seed(1, 0));
        assert_eq!(sub_seed(7, 3), sub_seed(7, 3));
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u32> = (0..103).collect();
        for t in [1, 2, 4, 200] {
            let ys: Vec<u32> = par_map(&xs, t, |x| Ok::<_, ()>(x * 2)).unwrap();
            assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        assert_eq!(par_map(&xs, 3, |x| if *x == 50 { Err(*x) } else { Ok(*x) }), Err(50));
    }
}
