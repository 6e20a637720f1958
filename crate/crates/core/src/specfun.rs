//! Integer-order Bessel functions of the first kind, generalized Laguerre
//! polynomials and a log-space `√(n_<! / n_>!)`.
//!
//! Validated ranges: Bessel orders `|v| ≤ 64` with `|x| ≤ 100`; Laguerre
//! degrees `n ≤ 64` with `k ≤ 8`; factorial ratios up to 64!.

use crate::error::{Error, Result};

pub const MAX_BESSEL_ORDER: usize = 64;
pub const MAX_BESSEL_ARG: f64 = 100.0;
pub const MAX_LAGUERRE_DEGREE: u32 = 64;
pub const MAX_LAGUERRE_ORDER: u32 = 8;
pub const MAX_FACTORIAL: u32 = 64;

const RESCALE_ABOVE: f64 = 1e250;

/// `J_0(x) .. J_max_order(x)` for `x ≥ 0`, by Miller's backward recurrence
/// normalized with `J_0 + 2 Σ J_2k = 1`. Callers validate the range.
fn bessel_table_nonneg(max_order: usize, x: f64, out: &mut [f64]) {
    debug_assert!(x >= 0.0 && out.len() == max_order + 1);
    if x == 0.0 {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    if x < 1e-5 {
        // two-term series; relative error O(x⁴)
        let half = 0.5 * x;
        let mut lead = 1.0;
        for (v, slot) in out.iter_mut().enumerate() {
            if v > 0 {
                lead *= half / v as f64;
            }
            *slot = lead * (1.0 - half * half / (v as f64 + 1.0));
        }
        return;
    }

    let top = max_order.max(x.ceil() as usize);
    let mut start = top + 20 + (50.0 * top as f64).sqrt() as usize;
    start += start % 2;

    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-300; // J_k
    let mut norm = 0.0;
    out.fill(0.0);
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next; // J_{k-1}
        next = cur;
        cur = prev;
        let order = k - 1;
        if order <= max_order {
            out[order] = cur;
        }
        if order % 2 == 0 && order > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > RESCALE_ABOVE {
            let s = 1.0 / RESCALE_ABOVE;
            cur *= s;
            next *= s;
            norm *= s;
            out.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm += cur;
    let inv = 1.0 / norm;
    out.iter_mut().for_each(|v| *v *= inv);
}

fn check_bessel_range(order: usize, x: f64) -> Result<()> {
    if order > MAX_BESSEL_ORDER {
        return Err(Error::domain(format!(
            "Bessel order {order} outside validated range |v| ≤ {MAX_BESSEL_ORDER}"
        )));
    }
    if !x.is_finite() || x.abs() > MAX_BESSEL_ARG {
        return Err(Error::domain(format!(
            "Bessel argument {x} outside validated range |x| ≤ {MAX_BESSEL_ARG}"
        )));
    }
    Ok(())
}

/// `J_v(x)` for integer `v`.
pub fn bessel_j(v: i32, x: f64) -> Result<f64> {
    let order = v.unsigned_abs() as usize;
    check_bessel_range(order, x)?;
    let mut table = vec![0.0; order + 1];
    bessel_table_nonneg(order, x.abs(), &mut table);
    let mut value = table[order];
    // J_{-v}(x) = (-1)^v J_v(x) and J_v(-x) = (-1)^v J_v(x)
    let odd = order % 2 == 1;
    if odd && v < 0 {
        value = -value;
    }
    if odd && x < 0.0 {
        value = -value;
    }
    Ok(value)
}

/// `J_0(x) ..= J_max_order(x)` in one recurrence sweep.
pub fn bessel_j_upto(max_order: usize, x: f64) -> Result<Vec<f64>> {
    check_bessel_range(max_order, x)?;
    let mut table = vec![0.0; max_order + 1];
    bessel_j_upto_into(x, &mut table);
    Ok(table)
}

/// Unchecked variant of [`bessel_j_upto`] filling a caller-owned buffer
/// (`out.len() - 1` is the top order).
pub(crate) fn bessel_j_upto_into(x: f64, out: &mut [f64]) {
    let max_order = out.len() - 1;
    bessel_table_nonneg(max_order, x.abs(), out);
    if x < 0.0 {
        out.iter_mut().skip(1).step_by(2).for_each(|v| *v = -*v);
    }
}

/// Generalized Laguerre polynomial `L_n^k(x)` by the three-term recurrence.
pub fn laguerre(n: u32, k: u32, x: f64) -> Result<f64> {
    if n > MAX_LAGUERRE_DEGREE || k > MAX_LAGUERRE_ORDER {
        return Err(Error::domain(format!(
            "Laguerre L_{n}^{k} outside validated range n ≤ {MAX_LAGUERRE_DEGREE}, k ≤ {MAX_LAGUERRE_ORDER}"
        )));
    }
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::domain(format!("Laguerre argument must be ≥ 0, got {x}")));
    }
    Ok(laguerre_unchecked(n, k, x))
}

pub(crate) fn laguerre_unchecked(n: u32, k: u32, x: f64) -> f64 {
    let k = k as f64;
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 1.0 + k - x;
    for m in 1..n {
        let m = m as f64;
        let next = ((2.0 * m + 1.0 + k - x) * cur - (m + k) * prev) / (m + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// `√(n_less! / n_greater!)`, summed in log space.
pub fn sqrt_factorial_ratio(n_less: u32, n_greater: u32) -> Result<f64> {
    if n_less > n_greater {
        return Err(Error::domain(format!(
            "factorial ratio needs n_less ≤ n_greater, got {n_less} > {n_greater}"
        )));
    }
    if n_greater > MAX_FACTORIAL {
        return Err(Error::domain(format!("factorial argument {n_greater} above {MAX_FACTORIAL}")));
    }
    Ok(sqrt_factorial_ratio_unchecked(n_less, n_greater))
}

pub(crate) fn sqrt_factorial_ratio_unchecked(n_less: u32, n_greater: u32) -> f64 {
    if n_less == n_greater {
        return 1.0;
    }
    let log: f64 = (n_less + 1..=n_greater).map(|k| (k as f64).ln()).sum();
    (-0.5 * log).exp()
}
