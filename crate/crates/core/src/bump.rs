//! Smooth step and cutoff profiles used to build partitions of unity.

use crate::real::{lit, Real};

/// Quintic smoothstep `6u⁵ − 15u⁴ + 10u³`, clamped to 0 below 0 and 1 above 1.
/// C² with vanishing first and second derivatives at both ends.
#[inline]
pub fn smoothstep5<T: Real>(u: T) -> T {
    if u <= T::zero() {
        T::zero()
    } else if u >= T::one() {
        T::one()
    } else {
        u * u * u * (u * (u * lit(6.0) - lit(15.0)) + lit(10.0))
    }
}

#[inline]
pub fn smoothstep5_deriv<T: Real>(u: T) -> T {
    if u <= T::zero() || u >= T::one() {
        T::zero()
    } else {
        let v = u * (T::one() - u);
        v * v * lit(30.0)
    }
}

#[inline]
pub fn smoothstep5_second<T: Real>(u: T) -> T {
    if u <= T::zero() || u >= T::one() {
        T::zero()
    } else {
        // 60u(1−u)(1−2u)
        u * (T::one() - u) * (T::one() - u * lit(2.0)) * lit(60.0)
    }
}

/// 1 for `d ≤ 0`, 0 for `d ≥ width`, quintic in between.
#[inline]
pub fn falloff<T: Real>(d: T, width: T) -> T {
    T::one() - smoothstep5(d / width)
}

/// Smooth cutoff around a band `[lo, hi]`: 1 on the band extended by
/// `width / 2`, 0 at distance `width` or more.
#[inline]
pub fn band_cutoff<T: Real>(x: T, lo: T, hi: T, width: T) -> T {
    let d = (lo - x).max(x - hi).max(T::zero());
    let half = width * lit(0.5);
    falloff(d - half, half)
}

/// Bump on an interval: 1 on `[lo, hi]`, positive on `(lo − pad, hi + pad)`,
/// zero outside.
#[inline]
pub fn interval_bump<T: Real>(x: T, lo: T, hi: T, pad: T) -> T {
    smoothstep5((x - (lo - pad)) / pad) * smoothstep5(((hi + pad) - x) / pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_endpoints_and_symmetry() {
        assert_eq!(smoothstep5(0.0_f64), 0.0);
        assert_eq!(smoothstep5(1.0_f64), 1.0);
        assert!((smoothstep5(0.5_f64) - 0.5).abs() < 1e-15);
        for i in 0..=20 {
            let u = i as f64 / 20.0;
            assert!((smoothstep5(u) + smoothstep5(1.0 - u) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn smoothstep_derivatives_match_differences() {
        let h = 1e-6;
        for i in 1..20 {
            let u = i as f64 / 20.0;
            let fd = (smoothstep5(u + h) - smoothstep5(u - h)) / (2.0 * h);
            assert!((fd - smoothstep5_deriv(u)).abs() < 1e-8);
            let fd2 = (smoothstep5_deriv(u + h) - smoothstep5_deriv(u - h)) / (2.0 * h);
            assert!((fd2 - smoothstep5_second(u)).abs() < 1e-7);
        }
    }

    #[test]
    fn band_cutoff_profile() {
        let (lo, hi, w) = (2.0_f64, 3.0, 0.5);
        assert_eq!(band_cutoff(2.5, lo, hi, w), 1.0);
        assert_eq!(band_cutoff(1.8, lo, hi, w), 1.0);
        assert_eq!(band_cutoff(3.5, lo, hi, w), 0.0);
        assert_eq!(band_cutoff(1.4, lo, hi, w), 0.0);
        let mid = band_cutoff(3.375, lo, hi, w);
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn interval_bump_support() {
        assert_eq!(interval_bump(0.0_f64, -1.0, 1.0, 0.5), 1.0);
        assert_eq!(interval_bump(1.5_f64, -1.0, 1.0, 0.5), 0.0);
        assert!(interval_bump(1.4_f64, -1.0, 1.0, 0.5) > 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let v: f32 = smoothstep5(0.25_f32);
        assert!((v - 0.103_515_625).abs() < 1e-6);
    }
}
