//! Adaptive Simpson integration.

use crate::scalar::Scalar;

const MAX_DEPTH: u32 = 60;

fn simpson<T: Scalar>(a: T, b: T, fa: T, fm: T, fb: T) -> T {
    (b - a) / T::of_f64(6.0) * (fa + T::of_f64(4.0) * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<T: Scalar, F: Fn(T) -> T>(
    f: &F,
    a: T,
    b: T,
    fa: T,
    fm: T,
    fb: T,
    whole: T,
    tol: T,
    depth: u32,
) -> T {
    let two = T::of_f64(2.0);
    let m = (a + b) / two;
    let lm = (a + m) / two;
    let rm = (m + b) / two;
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth >= MAX_DEPTH || delta.abs() <= T::of_f64(15.0) * tol {
        return left + right + delta / T::of_f64(15.0);
    }
    refine(f, a, m, fa, flm, fm, left, tol / two, depth + 1)
        + refine(f, m, b, fm, frm, fb, right, tol / two, depth + 1)
}

/// Integral of `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The interval is first cut into 8 panels so that narrow features near a
/// single sample point are not missed by the initial estimate.
pub fn adaptive_simpson<T: Scalar, F: Fn(T) -> T>(f: F, a: T, b: T, tol: T) -> T {
    const PANELS: usize = 8;
    let h = (b - a) / T::of_f64(PANELS as f64);
    let panel_tol = tol / T::of_f64(PANELS as f64);
    (0..PANELS)
        .map(|i| {
            let lo = a + h * T::of_f64(i as f64);
            let hi = if i + 1 == PANELS { b } else { lo + h };
            let mid = (lo + hi) / T::of_f64(2.0);
            let (flo, fmid, fhi) = (f(lo), f(mid), f(hi));
            let whole = simpson(lo, hi, flo, fmid, fhi);
            refine(&f, lo, hi, flo, fmid, fhi, whole, panel_tol, 0)
        })
        .fold(T::zero(), |acc, v| acc + v)
}
