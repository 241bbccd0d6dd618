//! Adaptive Dormand–Prince 5(4) integrator with finite-time blow-up detection.
//!
//! The driver is deliberately small: callers observe every accepted step and
//! may stop the integration or replace the state (chart switches, angle
//! wrapping) through [`Control`].

use crate::real::{lit, max_abs, Real};

/// The right-hand side could not be evaluated (e.g. the state left the
/// coordinate domain). Treated as a step rejection by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFault;

pub trait OdeSystem<T: Real> {
    fn dim(&self) -> usize;

    fn rhs(&self, t: T, y: &[T], dy: &mut [T]) -> Result<(), StepFault>;

    /// Norm compared against the escape radius. Defaults to the max norm of
    /// the whole state.
    fn escape_norm(&self, y: &[T]) -> T {
        max_abs(y)
    }
}

#[derive(Clone, Debug)]
pub struct IntegratorOptions<T> {
    pub rtol: T,
    pub atol: T,
    /// Absolute minimum step. `None` means `1e-12 · (t1 − t0)`.
    pub h_min: Option<T>,
    pub h_max: Option<T>,
    pub h_init: Option<T>,
    pub escape_radius: T,
    pub max_steps: usize,
    /// Also require the dense-output midpoint residual `h·|y′ − F(y)|` to be
    /// within tolerance before accepting a step.
    pub defect_control: bool,
}

impl<T: Real> Default for IntegratorOptions<T> {
    fn default() -> Self {
        Self {
            rtol: lit::<T>(1e-9).max(T::tol_floor()),
            atol: lit::<T>(1e-12).max(T::tol_floor() * T::epsilon()),
            h_min: None,
            h_max: None,
            h_init: None,
            escape_radius: lit(1e6),
            max_steps: 2_000_000,
            defect_control: false,
        }
    }
}

impl<T: Real> IntegratorOptions<T> {
    pub fn with_tolerances(mut self, rtol: T, atol: T) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn with_h_max(mut self, h_max: T) -> Self {
        self.h_max = Some(h_max);
        self
    }

    pub fn with_defect_control(mut self, on: bool) -> Self {
        self.defect_control = on;
        self
    }

    pub fn with_escape_radius(mut self, r: T) -> Self {
        self.escape_radius = r;
        self
    }

    fn h_min_for(&self, span: T) -> T {
        self.h_min.unwrap_or(span * lit(1e-12))
    }
}

/// Information handed to the observer after every accepted step.
pub struct StepInfo<'a, T> {
    pub t_prev: T,
    pub t: T,
    pub h: T,
    pub y_prev: &'a [T],
    pub y: &'a [T],
    /// Index into the checkpoint list when `t` landed on a checkpoint.
    pub checkpoint: Option<usize>,
    /// Dense-output state and derivative at the step midpoint.
    pub y_mid: &'a [T],
    pub dy_mid: &'a [T],
}

pub enum Control<T> {
    Continue,
    Stop,
    /// Replace the state (same time) and continue.
    Replace(Vec<T>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Termination<T> {
    Completed,
    /// Escape-norm beyond the radius while the step size collapsed.
    Escaped(T),
    /// Step size fell below the minimum without an escape.
    StepUnderflow(T),
    /// Step size collapsed while the right-hand side kept faulting.
    Faulted(T),
    /// Observer requested a stop.
    Stopped(T),
    StepLimit(T),
}

#[derive(Clone, Debug)]
pub struct IntegrationResult<T> {
    pub termination: Termination<T>,
    pub t: T,
    pub y: Vec<T>,
    pub accepted: usize,
    pub rejected: usize,
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// continuous extension of order four
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `sys` from `t0` to `t1 > t0`.
///
/// `checkpoints` (strictly increasing, inside `(t0, t1]`) are hit exactly.
pub fn integrate<T, S, F>(
    sys: &S,
    t0: T,
    y0: &[T],
    t1: T,
    checkpoints: &[T],
    opts: &IntegratorOptions<T>,
    mut observer: F,
) -> IntegrationResult<T>
where
    T: Real,
    S: OdeSystem<T> + ?Sized,
    F: FnMut(&StepInfo<'_, T>) -> Control<T>,
{
    let n = sys.dim();
    assert_eq!(y0.len(), n, "initial state has wrong dimension");
    let span = t1 - t0;
    let h_min = opts.h_min_for(span);
    let h_max = opts.h_max.unwrap_or(span).min(span);
    let a: Vec<Vec<T>> = A.iter().map(|r| r.iter().map(|&x| lit(x)).collect()).collect();
    let c: Vec<T> = C.iter().map(|&x| lit(x)).collect();
    let e: Vec<T> = E.iter().map(|&x| lit(x)).collect();
    let d: Vec<T> = D.iter().map(|&x| lit(x)).collect();
    let mut y_mid = vec![T::zero(); n];
    let mut dy_mid = vec![T::zero(); n];

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
    let mut stage = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut next_cp = checkpoints.iter().position(|&c| c > t0).unwrap_or(checkpoints.len());

    let finish = |termination, t, y: Vec<T>, accepted, rejected| IntegrationResult {
        termination,
        t,
        y,
        accepted,
        rejected,
    };

    if span <= T::zero() {
        return finish(Termination::Completed, t, y, 0, 0);
    }

    let mut need_k1 = true;
    let mut h = match opts.h_init {
        Some(h) => h,
        None => {
            if sys.rhs(t, &y, &mut k[0]).is_err() {
                return finish(Termination::Faulted(t), t, y, 0, 0);
            }
            need_k1 = false;
            let sc: Vec<T> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
            let d0 = y.iter().zip(&sc).fold(T::zero(), |m, (v, s)| m.max(v.abs() / *s));
            let d1 = k[0].iter().zip(&sc).fold(T::zero(), |m, (v, s)| m.max(v.abs() / *s));
            let guess = if d0 < lit(1e-5) || d1 < lit(1e-5) {
                lit(1e-6)
            } else {
                d0 / d1 * lit(0.01)
            };
            guess.min(span * lit(1e-2)).max(h_min * lit(10.0))
        }
    };
    h = h.min(h_max);

    let safety: T = lit(0.9);
    let fac_min: T = lit(0.2);
    let fac_max: T = lit(5.0);
    let fifth: T = lit(0.2);

    loop {
        if t >= t1 {
            return finish(Termination::Completed, t, y, accepted, rejected);
        }
        if accepted >= opts.max_steps {
            return finish(Termination::StepLimit(t), t, y, accepted, rejected);
        }
        if need_k1 {
            if sys.rhs(t, &y, &mut k[0]).is_err() {
                return finish(Termination::Faulted(t), t, y, accepted, rejected);
            }
            need_k1 = false;
        }

        // clip to the next checkpoint or the end
        let target = if next_cp < checkpoints.len() {
            checkpoints[next_cp].min(t1)
        } else {
            t1
        };
        let mut lands = false;
        let mut h_try = h;
        if t + h_try >= target || (target - (t + h_try)) < h_min {
            h_try = target - t;
            lands = true;
        }

        // stages 2..7
        let mut fault = false;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = T::zero();
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += a[s][j] * kj[i];
                }
                stage[i] = y[i] + h_try * acc;
            }
            if sys.rhs(t + c[s] * h_try, &stage, &mut k[s]).is_err() {
                fault = true;
                break;
            }
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }

        let err = if fault {
            T::infinity()
        } else {
            let mut m = T::zero();
            for i in 0..n {
                let mut ei = T::zero();
                for (s, ks) in k.iter().enumerate() {
                    ei += e[s] * ks[i];
                }
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                let r = (h_try * ei).abs() / sc;
                if r.is_nan() || !y_new[i].is_finite() {
                    m = T::infinity();
                    break;
                }
                m = m.max(r);
            }
            m
        };

        let mut err = err;
        if err.is_finite() {
            let half: T = lit(0.5);
            let quarter: T = lit(0.25);
            for i in 0..n {
                let r2 = y_new[i] - y[i];
                let r3 = h_try * k[0][i] - r2;
                let r4 = r2 - h_try * k[6][i] - r3;
                let mut r5 = T::zero();
                for (s, ks) in k.iter().enumerate() {
                    r5 += d[s] * ks[i];
                }
                r5 *= h_try;
                y_mid[i] = y[i] + half * (r2 + half * (r3 + half * (r4 + half * r5)));
                dy_mid[i] = (r2 + quarter * r4) / h_try;
            }
            if opts.defect_control {
                if sys.rhs(t + half * h_try, &y_mid, &mut stage).is_err() {
                    err = T::infinity();
                } else {
                    for i in 0..n {
                        let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                        let r = (h_try * (dy_mid[i] - stage[i])).abs() / sc;
                        err = if r.is_nan() { T::infinity() } else { err.max(r) };
                    }
                }
            }
        }

        if err <= T::one() {
            let t_prev = t;
            let h_acc = h_try;
            let t_next = if lands { target } else { t + h_try };
            let cp = if lands && next_cp < checkpoints.len() && target == checkpoints[next_cp].min(t1)
            {
                let idx = next_cp;
                next_cp += 1;
                Some(idx)
            } else {
                None
            };
            let y_prev = std::mem::replace(&mut y, y_new.clone());
            t = t_next;
            accepted += 1;
            // FSAL: last stage is f(t+h, y_new)
            let last = k[6].clone();
            k[0] = last;

            let info = StepInfo {
                t_prev,
                t,
                h: h_acc,
                y_prev: &y_prev,
                y: &y,
                checkpoint: cp,
                y_mid: &y_mid,
                dy_mid: &dy_mid,
            };
            match observer(&info) {
                Control::Continue => {}
                Control::Stop => {
                    return finish(Termination::Stopped(t), t, y, accepted, rejected);
                }
                Control::Replace(new_y) => {
                    y = new_y;
                    need_k1 = true;
                }
            }

            if sys.escape_norm(&y) > opts.escape_radius && h_acc < h_min * lit(10.0) {
                return finish(Termination::Escaped(t), t, y, accepted, rejected);
            }

            let fac = if err == T::zero() {
                fac_max
            } else {
                (safety * err.powf(-fifth)).max(fac_min).min(fac_max)
            };
            // a landing step may have been artificially short
            let base = if lands { h.max(h_acc) } else { h_acc };
            h = (base * fac).min(h_max);
        } else {
            rejected += 1;
            let fac = if err.is_finite() {
                (safety * err.powf(-fifth)).max(fac_min).min(T::one())
            } else {
                fac_min
            };
            h = h_try * fac;
            if h < h_min {
                let term = if sys.escape_norm(&y) > opts.escape_radius {
                    Termination::Escaped(t)
                } else if fault {
                    Termination::Faulted(t)
                } else {
                    Termination::StepUnderflow(t)
                };
                return finish(term, t, y, accepted, rejected);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar<G: Fn(f64, f64) -> f64>(G);

    impl<G: Fn(f64, f64) -> f64> OdeSystem<f64> for Scalar<G> {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), StepFault> {
            dy[0] = (self.0)(t, y[0]);
            Ok(())
        }
    }

    #[test]
    fn exponential_decay_is_accurate() {
        let sys = Scalar(|_, y| -y);
        let r = integrate(&sys, 0.0, &[1.0], 5.0, &[], &IntegratorOptions::default(), |_| {
            Control::Continue
        });
        assert_eq!(r.termination, Termination::Completed);
        assert!((r.y[0] - (-5.0_f64).exp()).abs() < 1e-10);
        assert_eq!(r.t, 5.0);
    }

    #[test]
    fn riccati_blow_up_time() {
        // y' = y², y(0) = 1 → y = 1/(1 − t)
        let sys = Scalar(|_, y| y * y);
        let r = integrate(&sys, 0.0, &[1.0], 2.0, &[], &IntegratorOptions::default(), |_| {
            Control::Continue
        });
        match r.termination {
            Termination::Escaped(ts) => assert!((ts - 1.0).abs() < 1e-6, "t* = {ts}"),
            other => panic!("expected escape, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_are_hit_exactly() {
        let sys = Scalar(|_, _| 1.0);
        let cps: Vec<f64> = (1..=10).map(|i| i as f64 * 0.1).collect();
        let mut seen = Vec::new();
        integrate(&sys, 0.0, &[0.0], 1.0, &cps, &IntegratorOptions::default(), |s| {
            if let Some(i) = s.checkpoint {
                seen.push((i, s.t));
            }
            Control::Continue
        });
        assert_eq!(seen.len(), 10);
        for (i, t) in seen {
            assert_eq!(t, cps[i]);
        }
    }

    #[test]
    fn faulting_rhs_collapses_steps() {
        struct Wall;
        impl OdeSystem<f64> for Wall {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), StepFault> {
                if y[0] > 1.0 {
                    return Err(StepFault);
                }
                dy[0] = 1.0;
                Ok(())
            }
        }
        let r = integrate(&Wall, 0.0, &[0.0], 3.0, &[], &IntegratorOptions::default(), |_| {
            Control::Continue
        });
        match r.termination {
            Termination::Faulted(t) => assert!((t - 1.0).abs() < 1e-6),
            other => panic!("expected fault, got {other:?}"),
        }
    }

    #[test]
    fn single_precision_integration() {
        struct Decay;
        impl OdeSystem<f32> for Decay {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f32, y: &[f32], dy: &mut [f32]) -> Result<(), StepFault> {
                dy[0] = -y[0];
                Ok(())
            }
        }
        let opts = IntegratorOptions::<f32>::default();
        let r = integrate(&Decay, 0.0f32, &[1.0], 2.0, &[], &opts, |_| Control::Continue);
        assert_eq!(r.termination, Termination::Completed);
        assert!((r.y[0] - (-2.0f32).exp()).abs() < 1e-4);
    }

    #[test]
    fn dense_midpoint_tracks_solution() {
        let sys = Scalar(|t, y| y * t.cos());
        let exact = |t: f64| t.sin().exp();
        let mut worst = 0.0_f64;
        let mut worst_res = 0.0_f64;
        let opts = IntegratorOptions::default().with_defect_control(true);
        integrate(&sys, 0.0, &[1.0], 10.0, &[], &opts, |s| {
            let tm = 0.5 * (s.t_prev + s.t);
            worst = worst.max((s.y_mid[0] - exact(tm)).abs());
            let tol = 1e-12 + 1e-9 * s.y[0].abs().max(s.y_prev[0].abs());
            worst_res = worst_res.max((s.dy_mid[0] - s.y_mid[0] * tm.cos()).abs() * s.h / tol);
            Control::Continue
        });
        assert!(worst < 1e-8, "{worst}");
        assert!(worst_res <= 1.0, "{worst_res}");
    }
}
