//! Super-Gaussian potentials and their dual machinery.
//!
//! Every potential `t(s)` here satisfies `log t(s) - b s = g(s^2)` with `g`
//! convex and decreasing on `x >= 0`. Writing
//! `h(gamma) = max_x (-x / gamma - 2 g(x))` gives the Gaussian-form lower
//! bounds `t(s) >= exp(b s - s^2 / (2 gamma) - h(gamma) / 2)`, tight at
//! `gamma = -1 / (2 g'(s^2))`.
//!
//! The inner loop of the double-loop algorithm only needs the penalty
//! `h*(s) = 1/2 min_gamma k(x, gamma)` with
//! `k = (z1 + x) / gamma + z2 gamma - z3 log gamma + h(gamma)`, `x = s^2`,
//! together with its first and second derivatives. Laplace and Student's t
//! have closed forms; Bernoulli potentials go through nested safeguarded
//! Newton solves on `g` alone.

use crate::error::{domain, Result, SlmError};
use crate::scalar::{golden_section, newton_bisect, RootOptions};

/// `v^2` below which the Bernoulli `tanh` expressions switch to their Taylor series.
const BERNOULLI_SERIES_SWITCH: f64 = 1e-4;
/// Relative distance above `gamma0` below which `x*(gamma)` uses its logarithmic asymptote.
const BERNOULLI_ASYMPTOTE_SWITCH: f64 = 1e-6;
const GAMMA_LO: f64 = 1e-12;
const GAMMA_HI: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PotentialKind {
    /// `t(s) = exp(-tau |s|)`
    Laplace,
    /// `t(s) = (1 + (tau / nu) s^2)^(-(nu + 1) / 2)`
    StudentT,
    /// `t(s) = 1 / (1 + exp(-y tau s))`
    Bernoulli,
}

/// A single potential with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub tau: f64,
    /// Degrees of freedom (Student's t only).
    pub nu: f64,
    /// Label in `{-1, +1}` (Bernoulli only).
    pub y: f64,
    /// Linear coefficient: zero for even potentials, `y tau / 2` for Bernoulli.
    pub b: f64,
}

/// `g(x)` and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GEval {
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
}

/// `h(gamma)` and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HEval {
    pub h: f64,
    pub dh: f64,
    pub d2h: f64,
}

/// Branches of the Student's t split `h = h_cap + h_cup` (with `-z3 log gamma`
/// folded into the concave part).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentTSplit {
    pub h_cap: f64,
    pub dh_cap: f64,
    pub h_cup: f64,
    pub dh_cup: f64,
    pub d2h_cup: f64,
}

/// Outer-loop bound coefficients for one potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCoefficients {
    pub z1: f64,
    pub z2: f64,
    /// Coefficient of `-log gamma`. Zero under type A bounding; under type B
    /// it is the number of coefficients sharing `gamma` (1 for scalar potentials).
    pub z3: f64,
}

impl BoundCoefficients {
    pub fn new(z1: f64, z2: f64, z3: f64) -> Result<Self> {
        let bc = Self { z1, z2, z3 };
        bc.validate()?;
        Ok(bc)
    }

    /// Type A form: `z1 > 0` (or `z1 = 0` in the MAP limit), `z3 = 0`.
    pub fn type_a(z1: f64, z2: f64) -> Self {
        Self { z1, z2, z3: 0.0 }
    }

    /// Type B form: `z1 = 0`, `z2 > 0`, `z3 = group dimension`.
    pub fn type_b(z2: f64, z3: f64) -> Self {
        Self { z1: 0.0, z2, z3 }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { z1, z2, z3 } = *self;
        if !(z1.is_finite() && z2.is_finite() && z3.is_finite()) || z1 < 0.0 || z2 < 0.0 || z3 < 0.0
        {
            return domain(format!(
                "bound coefficients must be finite and nonnegative: {self:?}"
            ));
        }
        if z3 > 0.0 && (z1 != 0.0 || z2 <= 0.0) {
            return domain(format!(
                "log-term bounding requires z1 = 0 and z2 > 0: {self:?}"
            ));
        }
        Ok(())
    }
}

/// Inner-loop penalty `h*` evaluated at `s` (or at a group norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyEval {
    pub hstar: f64,
    /// `(h*)'(s) - b`
    pub theta: f64,
    /// `(h*)''(s)`
    pub rho: f64,
    /// `(h*)'(s) / s`, computed directly.
    pub theta_tilde: f64,
    /// `sqrt(theta_tilde - rho) / |s|`, computed directly.
    pub kappa: f64,
    /// Minimizer of `k(x, .)`.
    pub gamma_star: f64,
}

/// Per-potential warm start for the implicit scalar solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStart {
    pub gamma: f64,
    pub x: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self { gamma: 1.0, x: 1.0 }
    }
}

impl PotentialSpec {
    pub fn laplace(tau: f64) -> Result<Self> {
        check_positive("tau", tau)?;
        Ok(Self {
            kind: PotentialKind::Laplace,
            tau,
            nu: 0.0,
            y: 0.0,
            b: 0.0,
        })
    }

    pub fn student_t(nu: f64, tau: f64) -> Result<Self> {
        check_positive("tau", tau)?;
        check_positive("nu", nu)?;
        Ok(Self {
            kind: PotentialKind::StudentT,
            tau,
            nu,
            y: 0.0,
            b: 0.0,
        })
    }

    pub fn bernoulli(tau: f64, y: f64) -> Result<Self> {
        check_positive("tau", tau)?;
        if y != 1.0 && y != -1.0 {
            return domain(format!("Bernoulli label must be +1 or -1, got {y}"));
        }
        Ok(Self {
            kind: PotentialKind::Bernoulli,
            tau,
            nu: 0.0,
            y,
            b: 0.5 * y * tau,
        })
    }

    pub fn is_even(&self) -> bool {
        self.kind != PotentialKind::Bernoulli
    }

    pub fn is_log_concave(&self) -> bool {
        self.kind != PotentialKind::StudentT
    }

    /// `log t(s)`.
    pub fn log_t(&self, s: f64) -> f64 {
        match self.kind {
            PotentialKind::Laplace => -self.tau * s.abs(),
            PotentialKind::StudentT => {
                -0.5 * (self.nu + 1.0) * (self.tau / self.nu * s * s).ln_1p()
            }
            PotentialKind::Bernoulli => {
                let z = -self.y * self.tau * s;
                // -log(1 + e^z)
                -(z.max(0.0) + (-z.abs()).exp().ln_1p())
            }
        }
    }

    /// Student's t scale `alpha = nu / tau`.
    fn alpha(&self) -> f64 {
        self.nu / self.tau
    }

    /// Bernoulli constant `C = (y tau / 2)^2 / 2`.
    fn bernoulli_c(&self) -> f64 {
        0.125 * self.tau * self.tau
    }

    /// `gamma0 = -1 / (2 g'(0))`: below it the dual maximizer sits at `x = 0`.
    pub fn gamma0(&self) -> f64 {
        match self.kind {
            PotentialKind::Laplace => 0.0,
            PotentialKind::StudentT => self.alpha() / (self.nu + 1.0),
            PotentialKind::Bernoulli => 1.0 / (2.0 * self.bernoulli_c()),
        }
    }

    /// `g(x) = log t(sqrt x) - b sqrt x` with `g'` and `g''`.
    ///
    /// For Laplace at `x = 0` the derivatives are reported as `g' = -inf`,
    /// `g'' = +inf`; algorithm paths only go through [`Self::h_star`], which
    /// stays smooth while `z1 > 0`.
    pub fn g_value_derivs(&self, x: f64) -> Result<GEval> {
        if !(x >= 0.0) {
            return domain(format!("g(x) requires x >= 0, got {x}"));
        }
        Ok(match self.kind {
            PotentialKind::Laplace => {
                if x == 0.0 {
                    GEval {
                        g: 0.0,
                        dg: f64::NEG_INFINITY,
                        d2g: f64::INFINITY,
                    }
                } else {
                    let r = x.sqrt();
                    GEval {
                        g: -self.tau * r,
                        dg: -0.5 * self.tau / r,
                        d2g: 0.25 * self.tau / (x * r),
                    }
                }
            }
            PotentialKind::StudentT => {
                let a = self.alpha();
                let c = 0.5 * (self.nu + 1.0);
                GEval {
                    g: -c * (x / a).ln_1p(),
                    dg: -c / (a + x),
                    d2g: c / ((a + x) * (a + x)),
                }
            }
            PotentialKind::Bernoulli => {
                let c = self.bernoulli_c();
                let v = 0.5 * self.tau * x.sqrt();
                let v2 = v * v;
                // log cosh v, stable for small and large v
                let log_cosh = if v < 1.0 {
                    let sh = (0.5 * v).sinh();
                    (2.0 * sh * sh).ln_1p()
                } else {
                    v + (-2.0 * v).exp().ln_1p() - std::f64::consts::LN_2
                };
                let g = -log_cosh - std::f64::consts::LN_2;
                if v2 < BERNOULLI_SERIES_SWITCH {
                    let cx = c * x;
                    GEval {
                        g,
                        dg: -c * (1.0 - 2.0 * cx / 3.0 + 8.0 * cx * cx / 15.0),
                        d2g: c * c * (2.0 / 3.0 - 16.0 * cx / 15.0 + 136.0 * cx * cx / 105.0),
                    }
                } else {
                    let t = v.tanh();
                    GEval {
                        g,
                        dg: -c * t / v,
                        d2g: 0.5 * c / x * (t / v + t * t - 1.0),
                    }
                }
            }
        })
    }

    /// `h(gamma)` with derivatives (cold start for implicit potentials).
    pub fn h_value_derivs(&self, gamma: f64) -> Result<HEval> {
        let mut warm = WarmStart::default();
        self.h_value_derivs_warm(gamma, &mut warm)
    }

    /// `h(gamma)` with derivatives, reusing and updating the warm start.
    pub fn h_value_derivs_warm(&self, gamma: f64, warm: &mut WarmStart) -> Result<HEval> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return domain(format!("h(gamma) requires gamma > 0, got {gamma}"));
        }
        match self.kind {
            PotentialKind::Laplace => {
                let t2 = self.tau * self.tau;
                Ok(HEval {
                    h: t2 * gamma,
                    dh: t2,
                    d2h: 0.0,
                })
            }
            PotentialKind::StudentT => {
                let a = self.alpha();
                let nu1 = self.nu + 1.0;
                let g0 = self.gamma0();
                if gamma <= g0 {
                    Ok(HEval {
                        h: 0.0,
                        dh: 0.0,
                        d2h: 0.0,
                    })
                } else {
                    let c = -nu1 * (g0.ln() + 1.0);
                    Ok(HEval {
                        h: a / gamma + nu1 * gamma.ln() + c,
                        dh: -a / (gamma * gamma) + nu1 / gamma,
                        d2h: 2.0 * a / gamma.powi(3) - nu1 / (gamma * gamma),
                    })
                }
            }
            PotentialKind::Bernoulli => self.implicit_h(gamma, warm),
        }
    }

    /// Implicit `h(gamma) = -min_x (x / gamma + 2 g(x))`.
    fn implicit_h(&self, gamma: f64, warm: &mut WarmStart) -> Result<HEval> {
        let g0 = self.gamma0();
        if gamma <= g0 {
            let g_zero = self.g_value_derivs(0.0)?.g;
            return Ok(HEval {
                h: -2.0 * g_zero,
                dh: 0.0,
                d2h: 0.0,
            });
        }
        let at0 = self.g_value_derivs(0.0)?;
        let ratio = gamma / g0 - 1.0;
        if ratio < BERNOULLI_ASYMPTOTE_SWITCH {
            let xi0 = -at0.dg / at0.d2g;
            let x = xi0 * (gamma / g0).ln();
            let gx = self.g_value_derivs(x)?.g;
            warm.x = x;
            return Ok(HEval {
                h: -x / gamma - 2.0 * gx,
                dh: x / (gamma * gamma),
                d2h: (xi0 - 2.0 * x) / gamma.powi(3),
            });
        }
        let x = self.dual_argmax(gamma, warm.x)?;
        warm.x = x;
        let gx = self.g_value_derivs(x)?;
        Ok(HEval {
            h: -x / gamma - 2.0 * gx.g,
            dh: x / (gamma * gamma),
            d2h: (1.0 / (2.0 * gamma * gx.d2g) - 2.0 * x) / gamma.powi(3),
        })
    }

    /// Solves `g'(x) = -1 / (2 gamma)` for `x > 0` (requires `gamma > gamma0`).
    fn dual_argmax(&self, gamma: f64, start: f64) -> Result<f64> {
        let target = 0.5 / gamma;
        let resid = |x: f64| -> (f64, f64, f64) {
            match self.g_value_derivs(x) {
                Ok(e) => (e.dg + target, e.d2g, target),
                Err(_) => (f64::NAN, f64::NAN, target),
            }
        };
        let mut hi = start.max(1.0);
        let mut grow = 0;
        while resid(hi).0 < 0.0 {
            hi *= 4.0;
            grow += 1;
            if grow > 200 {
                return Err(SlmError::IterationLimit {
                    iterations: grow,
                    lo: 0.0,
                    hi,
                });
            }
        }
        newton_bisect(resid, 0.0, hi, start, RootOptions::default())
    }

    /// Student's t split `h = h_cap + h_cup` with `-z3 log gamma` folded into `h_cap`.
    pub fn h_decompose_student_t(&self, gamma: f64, z3: f64) -> Result<StudentTSplit> {
        if self.kind != PotentialKind::StudentT {
            return Err(SlmError::Unsupported(format!(
                "h_cap/h_cup split is defined for Student's t only, got {:?}",
                self.kind
            )));
        }
        if !(gamma > 0.0) {
            return domain(format!("gamma must be positive, got {gamma}"));
        }
        let nu1 = self.nu + 1.0;
        let a_scale = self.alpha();
        let g0 = self.gamma0();
        let b = nu1 * g0.ln();
        let a = nu1 / g0;
        let c = -nu1 * (g0.ln() + 1.0);
        let lg = gamma.ln();
        Ok(if gamma >= g0 {
            StudentTSplit {
                h_cap: (nu1 - z3) * lg,
                dh_cap: (nu1 - z3) / gamma,
                h_cup: a_scale / gamma + c,
                dh_cup: -a_scale / (gamma * gamma),
                d2h_cup: 2.0 * a_scale / gamma.powi(3),
            }
        } else {
            StudentTSplit {
                h_cap: (2.0 * nu1 - z3) * lg - a * (gamma - g0) - b,
                dh_cap: (2.0 * nu1 - z3) / gamma - a,
                h_cup: -2.0 * nu1 * lg + a * (gamma - g0) + b,
                dh_cup: -2.0 * nu1 / gamma + a,
                d2h_cup: 2.0 * nu1 / (gamma * gamma),
            }
        })
    }

    /// Slope of the concave part of `h` that the outer loop linearizes into `z2`.
    /// Zero for log-concave potentials.
    pub fn cap_slope(&self, gamma: f64, z3: f64) -> Result<f64> {
        match self.kind {
            PotentialKind::StudentT => Ok(self.h_decompose_student_t(gamma, z3)?.dh_cap),
            _ => Ok(0.0),
        }
    }

    /// Value of the concave part (with `-z3 log gamma` folded in for Student's t).
    pub fn cap_value(&self, gamma: f64, z3: f64) -> Result<f64> {
        match self.kind {
            PotentialKind::StudentT => Ok(self.h_decompose_student_t(gamma, z3)?.h_cap),
            _ => Ok(0.0),
        }
    }

    /// The part of `h` that stays inside `k(x, gamma)`: `h_cup` for Student's t, `h` otherwise.
    pub fn inner_h(&self, gamma: f64, warm: &mut WarmStart) -> Result<f64> {
        match self.kind {
            PotentialKind::StudentT => Ok(self.h_decompose_student_t(gamma, 0.0)?.h_cup),
            _ => Ok(self.h_value_derivs_warm(gamma, warm)?.h),
        }
    }

    /// Whether `k(x, gamma)` carries its own `-z3 log gamma` term. For Student's t
    /// the term is folded into the linearized `h_cap`.
    pub fn keeps_log_term(&self) -> bool {
        self.kind != PotentialKind::StudentT
    }

    /// `k(x, gamma)` as minimized by [`Self::h_star`].
    pub fn k_value(
        &self,
        x: f64,
        gamma: f64,
        bc: &BoundCoefficients,
        warm: &mut WarmStart,
    ) -> Result<f64> {
        let log_term = if self.keeps_log_term() {
            bc.z3 * gamma.ln()
        } else {
            0.0
        };
        Ok((bc.z1 + x) / gamma + bc.z2 * gamma - log_term + self.inner_h(gamma, warm)?)
    }

    /// Inner-loop penalty `h*(s) = 1/2 min_gamma k(s^2, gamma)` and derivatives.
    ///
    /// `s` is a signed scalar coefficient or a (nonnegative) group norm.
    pub fn h_star(
        &self,
        s: f64,
        bc: &BoundCoefficients,
        warm: &mut WarmStart,
    ) -> Result<PenaltyEval> {
        let x = s * s;
        let mut out = match self.kind {
            PotentialKind::Laplace => self.laplace_h_star(s, x, bc),
            PotentialKind::StudentT => self.student_t_h_star(s, x, bc)?,
            PotentialKind::Bernoulli => {
                if bc.z2 == 0.0 && bc.z3 == 0.0 {
                    self.generic_type_a_h_star(s, x, bc)?
                } else {
                    self.generic_h_star(s, x, bc, warm)?
                }
            }
        };
        out.theta -= self.b;
        warm.gamma = if out.gamma_star > 0.0 {
            out.gamma_star
        } else {
            warm.gamma
        };
        Ok(out)
    }

    fn laplace_h_star(&self, s: f64, x: f64, bc: &BoundCoefficients) -> PenaltyEval {
        let t2 = self.tau * self.tau;
        if bc.z3 == 0.0 {
            let q = (bc.z2 + t2).sqrt();
            let p = bc.z1 + x;
            if p == 0.0 {
                // MAP limit at the kink: subgradient zero, curvature undefined
                return PenaltyEval {
                    hstar: 0.0,
                    theta: 0.0,
                    rho: 0.0,
                    theta_tilde: 0.0,
                    kappa: 0.0,
                    gamma_star: 0.0,
                };
            }
            let rp = p.sqrt();
            let theta_tilde = q / rp;
            PenaltyEval {
                hstar: q * rp,
                theta: theta_tilde * s,
                rho: q * bc.z1 / (p * rp),
                theta_tilde,
                kappa: (q / (p * rp)).sqrt(),
                gamma_star: rp / q,
            }
        } else {
            let c = bc.z3;
            let q = 2.0 * (bc.z2 + t2);
            let p = (c * c + 2.0 * q * x).sqrt();
            let theta_tilde = q / (c + p);
            PenaltyEval {
                hstar: 0.5 * (p - c * (c + p).ln() + c * q.ln()),
                theta: theta_tilde * s,
                rho: q * c / (p * (c + p)),
                theta_tilde,
                kappa: (2.0 / p).sqrt() * theta_tilde,
                gamma_star: (c + p) / q,
            }
        }
    }

    fn student_t_h_star(&self, s: f64, x: f64, bc: &BoundCoefficients) -> Result<PenaltyEval> {
        if !(bc.z2 > 0.0) {
            return domain("Student's t penalty needs z2 > 0 (h_cap slope folded into z2)");
        }
        let nu1 = self.nu + 1.0;
        let alpha = self.alpha();
        let g0 = self.gamma0();
        let a = nu1 / g0;
        let p = bc.z1 + x;
        let g1 = ((p + alpha) / bc.z2).sqrt();
        // h_cup is C^2 so k is smooth and strictly convex: exactly one branch
        // holds the stationary point (both agree at gamma0).
        let (gamma, hstar, g3_h2) = if g1 >= g0 {
            let c = -nu1 * (g0.ln() + 1.0);
            let k = 2.0 * (bc.z2 * (p + alpha)).sqrt() + c;
            (g1, 0.5 * k, 2.0 * alpha)
        } else {
            let za = bc.z2 + a;
            let d = (nu1 * nu1 + za * p).sqrt();
            let g2 = (nu1 + d) / za;
            let k = 2.0 * d + nu1 * (2.0 * za.ln() - 2.0 * (nu1 + d).ln() + g0.ln() - 1.0);
            (g2, 0.5 * k, 2.0 * nu1 * g2)
        };
        Ok(implicit_derivs(s, x, bc.z1, 0.0, gamma, hstar, g3_h2))
    }

    /// `z2 = z3 = 0`: `h*(s) = -g(z1 + s^2)`.
    fn generic_type_a_h_star(&self, s: f64, x: f64, bc: &BoundCoefficients) -> Result<PenaltyEval> {
        let p = bc.z1 + x;
        let e = self.g_value_derivs(p)?;
        if !e.dg.is_finite() {
            return domain("h* at p = 0 requires z1 > 0");
        }
        Ok(PenaltyEval {
            hstar: -e.g,
            theta: -2.0 * e.dg * s,
            rho: -4.0 * e.d2g * x - 2.0 * e.dg,
            theta_tilde: -2.0 * e.dg,
            kappa: 2.0 * e.d2g.sqrt(),
            gamma_star: -0.5 / e.dg,
        })
    }

    /// General case: scalar convex minimization of `k(x, .)` via safeguarded Newton.
    fn generic_h_star(
        &self,
        s: f64,
        x: f64,
        bc: &BoundCoefficients,
        warm: &mut WarmStart,
    ) -> Result<PenaltyEval> {
        let p = bc.z1 + x;
        let mut hw = *warm;
        let mut k_gamma = |gamma: f64| -> (f64, f64, f64) {
            match self.h_value_derivs_warm(gamma, &mut hw) {
                Ok(h) => {
                    let g2 = gamma * gamma;
                    let f = -p / g2 - bc.z3 / gamma + bc.z2 + h.dh;
                    let df = 2.0 * p / (g2 * gamma) + bc.z3 / g2 + h.d2h;
                    let scale = p / g2 + bc.z3 / gamma + bc.z2 + h.dh.abs();
                    (f, df, scale)
                }
                Err(_) => (f64::NAN, f64::NAN, 1.0),
            }
        };
        let gamma = if k_gamma(GAMMA_LO).0 >= 0.0 {
            GAMMA_LO
        } else {
            newton_bisect(
                &mut k_gamma,
                GAMMA_LO,
                GAMMA_HI,
                warm.gamma,
                RootOptions {
                    geometric: true,
                    ..RootOptions::default()
                },
            )?
        };
        let h = self.h_value_derivs_warm(gamma, &mut hw)?;
        warm.x = hw.x;
        let k = p / gamma + bc.z2 * gamma - bc.z3 * gamma.ln() + h.h;
        let g3_h2 = gamma.powi(3) * h.d2h;
        Ok(implicit_derivs(s, x, bc.z1, bc.z3, gamma, 0.5 * k, g3_h2))
    }
}

/// Derivatives of `h*` from the inner minimizer `gamma*`, where `g3_h2 = gamma*^3 h''(gamma*)`.
fn implicit_derivs(
    s: f64,
    x: f64,
    z1: f64,
    z3: f64,
    gamma: f64,
    hstar: f64,
    g3_h2: f64,
) -> PenaltyEval {
    // gamma^3 k_gamma,gamma
    let g3_kgg = 2.0 * (z1 + x) + gamma * z3 + g3_h2;
    let theta_tilde = 1.0 / gamma;
    let rho = theta_tilde * (1.0 - 2.0 * x / g3_kgg);
    PenaltyEval {
        hstar,
        theta: s / gamma,
        rho: rho.max(0.0),
        theta_tilde,
        kappa: (2.0 / (gamma * g3_kgg)).sqrt(),
        gamma_star: gamma,
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        domain(format!("{name} must be positive and finite, got {v}"))
    }
}

/// Log-spaced grid over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// Duality gap `min_gamma (x / gamma + h(gamma)) + 2 g(x)` by grid search
/// refined with golden section in `log gamma`. Nonnegative up to rounding and
/// zero when the Gaussian-form bounds are tight.
pub fn fenchel_gap(pot: &PotentialSpec, x: f64, gamma_grid: &[f64]) -> Result<f64> {
    if !(x >= 0.0) {
        return domain(format!("fenchel_gap requires x >= 0, got {x}"));
    }
    if gamma_grid.is_empty() {
        return domain("empty gamma grid");
    }
    let mut warm = WarmStart::default();
    let mut obj = |gamma: f64| -> f64 {
        match pot.h_value_derivs_warm(gamma, &mut warm) {
            Ok(h) => x / gamma + h.h,
            Err(_) => f64::INFINITY,
        }
    };
    let vals: Vec<f64> = gamma_grid.iter().map(|&g| obj(g)).collect();
    let (best, _) =
        vals.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        );
    let lo = gamma_grid[best.saturating_sub(1)];
    let hi = gamma_grid[(best + 1).min(gamma_grid.len() - 1)];
    let (_, refined) = golden_section(|lg| obj(lg.exp()), lo.ln(), hi.ln(), 1e-12, 300);
    let best_val = refined.min(vals[best]);
    Ok(best_val + 2.0 * pot.g_value_derivs(x)?.g)
}
