//! Border extension rules shared by morphology, cropping and resampling.

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
///
/// Works for arbitrarily distant indices by folding with period `2(n-1)`.
pub fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}
