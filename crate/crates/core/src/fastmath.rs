//! Branch-light transcendental kernels for the softmax/sigmoid hot paths.
//!
//! The polynomial `exp` below stays within 2 ulp of libm over the range the
//! model produces, is bit-deterministic across platforms (pure f64
//! arithmetic, no libm dispatch), and autovectorizes when called in a loop.

/// ln(2) split for Cody-Waite range reduction.
const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;
const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// Degree-13 Taylor polynomial of e^r in fused-multiply-add Horner form.
/// `mul_add` keeps the chain short, maps to hardware FMA, and is correctly
/// rounded everywhere, so results stay bit-identical across the scalar and
/// sliced paths.
#[inline(always)]
fn horner13(r: f64) -> f64 {
    let mut p: f64 = 1.0 / 6227020800.0;
    p = p.mul_add(r, 1.0 / 479001600.0);
    p = p.mul_add(r, 1.0 / 39916800.0);
    p = p.mul_add(r, 1.0 / 3628800.0);
    p = p.mul_add(r, 1.0 / 362880.0);
    p = p.mul_add(r, 1.0 / 40320.0);
    p = p.mul_add(r, 1.0 / 5040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    p
}

/// e^x via degree-13 Taylor on the reduced interval, exact 2^k scaling.
///
/// Relative error < 3e-16 on reduced arguments; saturates to 0.0 / +inf
/// outside the representable range.
#[inline]
pub fn exp(x: f64) -> f64 {
    if x > 709.782712893384 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    // x = k*ln2 + r with |r| <= ln2/2
    let kf = (x * LOG2_E).round_ties_even();
    let k = kf as i64;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;

    let p = horner13(r);

    // p * 2^k without calling ldexp; two steps to cover subnormal range.
    if k >= -1021 {
        if k <= 1023 {
            p * pow2i(k)
        } else {
            f64::INFINITY
        }
    } else {
        // Deep underflow: scale in two hops so the intermediate stays normal.
        p * pow2i(-1021) * pow2i(k + 1021)
    }
}

/// 2^k for k in [-1074, 1023] as an f64 multiplication constant.
#[inline]
fn pow2i(k: i64) -> f64 {
    if k >= -1022 {
        f64::from_bits(((1023 + k) as u64) << 52)
    } else {
        // subnormal
        f64::from_bits(1u64 << (52 - (-1022 - k).min(52) as u32))
    }
}

/// 1.5 * 2^52; adding it to an integral |k| < 2^51 plants k in the low
/// mantissa bits, giving a branch-free, integer-register-free route from
/// the rounded exponent to the 2^k bit pattern (the `as i64` cast would
/// otherwise force the lanes through scalar registers).
const SHIFTER: f64 = 6755399441055744.0;

#[inline(always)]
fn exp_reduced(v: f64) -> f64 {
    let kf = (v * LOG2_E).round_ties_even();
    let r = (v - kf * LN2_HI) - kf * LN2_LO;
    let p = horner13(r);
    // kf in [-1010, 1024]: single-step exact scaling by 2^k
    let k_bits = (kf + SHIFTER).to_bits().wrapping_sub(SHIFTER.to_bits());
    let bits = k_bits.wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

/// In-place e^x over a slice of max-subtracted softmax arguments
/// (x <= 0; larger inputs up to 709 are also exact), returning the sum of
/// the results. Inputs are clamped at -700, which maps to ~1e-304 and is
/// indistinguishable from zero in every consumer. The clamp removes the
/// range branches, and the fixed-width lane blocks below vectorize; on the
/// shared range the result is bit-identical to `exp`.
#[inline]
pub fn exp_slice_sum(xs: &mut [f64]) -> f64 {
    const LANES: usize = 8;
    let mut lane_sums = [0.0f64; LANES];
    let mut chunks = xs.chunks_exact_mut(LANES);
    for ch in &mut chunks {
        let mut out = [0.0f64; LANES];
        for l in 0..LANES {
            out[l] = exp_reduced(ch[l].max(-700.0));
        }
        for l in 0..LANES {
            ch[l] = out[l];
            lane_sums[l] += out[l];
        }
    }
    let mut tail = 0.0;
    for x in chunks.into_remainder() {
        let e = exp_reduced((*x).max(-700.0));
        *x = e;
        tail += e;
    }
    // fixed combination order keeps the reduction deterministic
    let mut sum = tail;
    for l in 0..LANES {
        sum += lane_sums[l];
    }
    sum
}

/// `exp_slice_sum` without the reduction.
#[inline]
pub fn exp_slice(xs: &mut [f64]) {
    let _ = exp_slice_sum(xs);
}

/// Logistic function 1 / (1 + e^-x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -708.0;
        while x < 709.0 {
            let a = exp(x);
            let b = x.exp();
            let rel = if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
            worst = worst.max(rel);
            x += 0.37;
        }
        assert!(worst < 1e-14, "worst relative error {worst}");
    }

    #[test]
    fn exp_exact_anchors() {
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(f64::INFINITY), f64::INFINITY);
        assert!((exp(1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn exp_underflow_region() {
        // Around the normal/subnormal boundary the two-hop scaling applies.
        for &x in &[-700.0, -709.0, -720.0, -740.0, -745.0] {
            let a = exp(x);
            let b = (x as f64).exp();
            let rel = if b == 0.0 { a } else { ((a - b) / b).abs() };
            assert!(rel < 1e-11, "x={x}: {a} vs {b}");
        }
        assert_eq!(exp(-1000.0), 0.0);
    }

    #[test]
    fn exp_slice_matches_scalar() {
        let xs: Vec<f64> = (0..3000).map(|i| -(i as f64) * 0.2337).collect();
        let mut ys = xs.clone();
        exp_slice(&mut ys);
        for (x, y) in xs.iter().zip(&ys) {
            if *x >= -700.0 {
                assert_eq!(*y, exp(*x), "x={x}");
            } else {
                assert!(*y <= f64::MIN_POSITIVE.max(exp(-700.0)));
            }
        }
        let mut at_zero = vec![0.0, 1.0, -1.0, 709.0];
        exp_slice(&mut at_zero);
        assert_eq!(at_zero[0], 1.0);
        assert_eq!(at_zero[1], exp(1.0));
        assert_eq!(at_zero[2], exp(-1.0));
        assert_eq!(at_zero[3], exp(709.0));
    }

    #[test]
    fn sigmoid_anchors() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 1.0 - 1e-15);
        assert!(sigmoid(-40.0) < 1e-15);
        assert!((sigmoid(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }
}
