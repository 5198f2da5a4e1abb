//! Aggregated load: ZIP polynomial, third-order induction motor and a
//! progressive tripping characteristic with optional process noise.
//!
//! The motor is written in the usual d/q transient-EMF form. Its state is
//! `(e_d, e_q, s)`; stator currents are algebraic and solved every step from
//! the terminal voltage. The connected fraction `fr` multiplies the motor
//! injection only, so the motor dynamics never depend on it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::VoltageScenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotorParams {
    pub r_a: f64,
    pub x_a: f64,
    pub x_m: f64,
    pub r_1: f64,
    pub x_1: f64,
    /// Inertia constant (s).
    #[serde(rename = "H")]
    pub inertia: f64,
    /// Motor active power used to locate the initial operating point.
    #[serde(default = "default_p_mot_init")]
    pub p_mot_init: f64,
    /// Synchronous angular speed (rad/s); slip is dimensionless.
    #[serde(default = "default_omega_s")]
    pub omega_s: f64,
}

fn default_p_mot_init() -> f64 {
    0.8
}

fn default_omega_s() -> f64 {
    2.0 * PI * 60.0
}

impl Default for MotorParams {
    fn default() -> Self {
        MotorParams {
            r_a: 0.0138,
            x_a: 0.083,
            x_m: 3.0,
            r_1: 0.055,
            x_1: 0.053,
            inertia: 0.8,
            p_mot_init: default_p_mot_init(),
            omega_s: default_omega_s(),
        }
    }
}

/// Reduced-order constants of the machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    /// Open-circuit reactance.
    pub x0: f64,
    /// Transient reactance.
    pub x_prime: f64,
    /// Transient open-circuit time constant (s).
    pub t_p: f64,
}

impl MotorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_a", self.r_a),
            ("x_a", self.x_a),
            ("x_m", self.x_m),
            ("r_1", self.r_1),
            ("x_1", self.x_1),
            ("H", self.inertia),
            ("omega_s", self.omega_s),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!(
                    "motor parameter {name} must be positive, got {value}"
                )));
            }
        }
        if !(self.p_mot_init.is_finite() && self.p_mot_init >= 0.0) {
            return Err(Error::config(format!(
                "p_mot_init must be non-negative, got {}",
                self.p_mot_init
            )));
        }
        let k = self.derived();
        if !(k.x_prime < k.x0) {
            return Err(Error::config("transient reactance must be below x0"));
        }
        Ok(())
    }

    pub fn derived(&self) -> DerivedConstants {
        derived_motor_constants(self)
    }
}

/// `x0 = x_a + x_m`, `x' = x_a + x_1 x_m / (x_1 + x_m)`,
/// `T_p = (x_1 + x_m) / (omega_s r_1)`.
pub fn derived_motor_constants(p: &MotorParams) -> DerivedConstants {
    DerivedConstants {
        x0: p.x_a + p.x_m,
        x_prime: p.x_a + (p.x_1 * p.x_m) / (p.x_1 + p.x_m),
        t_p: (p.x_1 + p.x_m) / (p.omega_s * p.r_1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZipParams {
    #[serde(rename = "P_z")]
    pub p_z: f64,
    #[serde(rename = "P_i")]
    pub p_i: f64,
    #[serde(rename = "P_p")]
    pub p_p: f64,
    #[serde(rename = "Q_z")]
    pub q_z: f64,
    #[serde(rename = "Q_i")]
    pub q_i: f64,
    #[serde(rename = "Q_p")]
    pub q_p: f64,
    #[serde(default = "default_v0")]
    pub v0: f64,
}

fn default_v0() -> f64 {
    1.0
}

impl Default for ZipParams {
    fn default() -> Self {
        ZipParams {
            p_z: 0.6,
            p_i: 0.2,
            p_p: 0.1,
            q_z: 0.2,
            q_i: 0.05,
            q_p: 0.05,
            v0: default_v0(),
        }
    }
}

impl ZipParams {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("P_z", self.p_z),
            ("P_i", self.p_i),
            ("P_p", self.p_p),
            ("Q_z", self.q_z),
            ("Q_i", self.q_i),
            ("Q_p", self.q_p),
        ];
        for (name, value) in coeffs {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(format!(
                    "ZIP coefficient {name} must be non-negative, got {value}"
                )));
            }
        }
        if !(self.v0.is_finite() && self.v0 > 0.0) {
            return Err(Error::config(format!(
                "v0 must be positive, got {}",
                self.v0
            )));
        }
        Ok(())
    }

    /// Static `(P_zip, Q_zip)` at terminal voltage `v`.
    pub fn power(&self, v: f64) -> (f64, f64) {
        let u = v / self.v0;
        let u2 = u * u;
        (
            self.p_p + self.p_i * u + self.p_z * u2,
            self.q_p + self.q_i * u + self.q_z * u2,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrippingParams {
    /// Upper threshold: nothing trips at or above it.
    pub v_1off: f64,
    /// Lower threshold: everything trips at or below it.
    pub v_2off: f64,
    /// Lag time constant (s).
    pub t_d: f64,
    /// Fixed fraction kept by the block-tripping characteristic.
    #[serde(default = "default_b_frac")]
    pub b_frac: f64,
    /// Wiener intensity of the fraction noise (per sqrt(s)).
    #[serde(default)]
    pub sigma_w: f64,
}

fn default_b_frac() -> f64 {
    0.5
}

impl Default for TrippingParams {
    fn default() -> Self {
        TrippingParams {
            v_1off: 0.8,
            v_2off: 0.2,
            t_d: 0.1,
            b_frac: default_b_frac(),
            sigma_w: 0.0,
        }
    }
}

impl TrippingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_2off > 0.0 && self.v_1off > self.v_2off && self.v_1off.is_finite()) {
            return Err(Error::config(format!(
                "tripping thresholds must satisfy v_1off > v_2off > 0, got v_1off={} v_2off={}",
                self.v_1off, self.v_2off
            )));
        }
        if !(self.t_d.is_finite() && self.t_d > 0.0) {
            return Err(Error::config(format!(
                "t_d must be positive, got {}",
                self.t_d
            )));
        }
        if !(self.sigma_w.is_finite() && self.sigma_w >= 0.0) {
            return Err(Error::config(format!(
                "sigma_w must be non-negative, got {}",
                self.sigma_w
            )));
        }
        if !(0.0..=1.0).contains(&self.b_frac) {
            return Err(Error::config(format!(
                "b_frac must lie in [0, 1], got {}",
                self.b_frac
            )));
        }
        Ok(())
    }

    /// Open interval where the characteristic ramps and noise acts.
    pub fn in_ramp(&self, v: f64) -> bool {
        v > self.v_2off && v < self.v_1off
    }
}

/// Parameters that can be placed under inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamName {
    #[serde(rename = "v_1off")]
    V1off,
    #[serde(rename = "v_2off")]
    V2off,
    #[serde(rename = "H")]
    Inertia,
    #[serde(rename = "t_d")]
    Td,
    #[serde(rename = "sigma_w")]
    SigmaW,
}

impl ParamName {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::V1off => "v_1off",
            ParamName::V2off => "v_2off",
            ParamName::Inertia => "H",
            ParamName::Td => "t_d",
            ParamName::SigmaW => "sigma_w",
        }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v_1off" => Ok(ParamName::V1off),
            "v_2off" => Ok(ParamName::V2off),
            "H" => Ok(ParamName::Inertia),
            "t_d" => Ok(ParamName::Td),
            "sigma_w" => Ok(ParamName::SigmaW),
            other => Err(Error::config(format!("unknown parameter name {other:?}"))),
        }
    }
}

/// Ordered list of parameters forming the inference vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamName>", into = "Vec<ParamName>")]
pub struct ThetaMask(Vec<ParamName>);

impl ThetaMask {
    pub fn new(names: Vec<ParamName>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("theta mask must not be empty"));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::config(format!(
                    "parameter {a} listed twice in theta mask"
                )));
            }
        }
        Ok(ThetaMask(names))
    }

    /// `{v_1off, v_2off, H}`.
    pub fn case_study() -> Self {
        ThetaMask(vec![ParamName::V1off, ParamName::V2off, ParamName::Inertia])
    }

    pub fn names(&self) -> &[ParamName] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, name: ParamName) -> Option<usize> {
        self.0.iter().position(|&n| n == name)
    }
}

impl TryFrom<Vec<ParamName>> for ThetaMask {
    type Error = Error;

    fn try_from(v: Vec<ParamName>) -> Result<Self> {
        ThetaMask::new(v)
    }
}

impl From<ThetaMask> for Vec<ParamName> {
    fn from(m: ThetaMask) -> Self {
        m.0
    }
}

impl Default for ThetaMask {
    fn default() -> Self {
        ThetaMask::case_study()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadParams {
    #[serde(flatten)]
    pub motor: MotorParams,
    #[serde(flatten)]
    pub zip: ZipParams,
    #[serde(flatten)]
    pub tripping: TrippingParams,
    #[serde(default)]
    pub theta_mask: ThetaMask,
    /// Use `-x' i_d` in the second stator equation instead of the
    /// standard `+x' i_d`.
    #[serde(default)]
    pub negative_stator_coupling: bool,
}

impl Default for LoadParams {
    fn default() -> Self {
        LoadParams {
            motor: MotorParams::default(),
            zip: ZipParams::default(),
            tripping: TrippingParams::default(),
            theta_mask: ThetaMask::case_study(),
            negative_stator_coupling: false,
        }
    }
}

impl LoadParams {
    pub fn validate(&self) -> Result<()> {
        self.motor.validate()?;
        self.zip.validate()?;
        self.tripping.validate()
    }

    pub fn get(&self, name: ParamName) -> f64 {
        match name {
            ParamName::V1off => self.tripping.v_1off,
            ParamName::V2off => self.tripping.v_2off,
            ParamName::Inertia => self.motor.inertia,
            ParamName::Td => self.tripping.t_d,
            ParamName::SigmaW => self.tripping.sigma_w,
        }
    }

    pub fn set(&mut self, name: ParamName, value: f64) {
        match name {
            ParamName::V1off => self.tripping.v_1off = value,
            ParamName::V2off => self.tripping.v_2off = value,
            ParamName::Inertia => self.motor.inertia = value,
            ParamName::Td => self.tripping.t_d = value,
            ParamName::SigmaW => self.tripping.sigma_w = value,
        }
    }

    /// Current values of the masked parameters.
    pub fn theta(&self) -> Vec<f64> {
        self.theta_mask
            .names()
            .iter()
            .map(|&n| self.get(n))
            .collect()
    }

    /// Copy with the masked parameters replaced by `theta`, validated.
    pub fn with_theta(&self, theta: &[f64]) -> Result<LoadParams> {
        if theta.len() != self.theta_mask.len() {
            return Err(Error::config(format!(
                "theta has {} entries, mask has {}",
                theta.len(),
                self.theta_mask.len()
            )));
        }
        let mut p = self.clone();
        for (&name, &value) in self.theta_mask.names().iter().zip(theta) {
            p.set(name, value);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: LoadParams =
            toml::from_str(text).map_err(|e| Error::config(format!("parameter file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("load parameters always serialize")
    }
}

/// Dynamic state plus algebraic currents and the frozen load torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadState {
    pub e_d: f64,
    pub e_q: f64,
    pub s: f64,
    pub fr: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub tau_m: f64,
}

/// Block tripping: all, nothing, or a fixed fraction in between.
pub fn block_tripping_fraction(v: f64, p: &TrippingParams) -> f64 {
    if v >= p.v_1off {
        1.0
    } else if v <= p.v_2off {
        0.0
    } else {
        p.b_frac
    }
}

/// Linear progressive tripping target fraction.
pub fn d_input(v: f64, p: &TrippingParams) -> f64 {
    if v >= p.v_1off {
        1.0
    } else if v <= p.v_2off {
        0.0
    } else {
        (v - p.v_2off) / (p.v_1off - p.v_2off)
    }
}

fn check_step(h: f64, p: &TrippingParams) -> Result<()> {
    if !(h > 0.0 && h < p.t_d) {
        return Err(Error::config(format!(
            "step size h={h} must satisfy 0 < h < t_d={}",
            p.t_d
        )));
    }
    Ok(())
}

/// Per-step input of the lag block: target fraction and the standard
/// deviation of the Wiener increment (zero where no noise acts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LagInput {
    pub target: f64,
    pub noise_sd: f64,
}

#[inline]
pub(crate) fn lag_input(v: f64, h: f64, p: &TrippingParams, stochastic: bool) -> LagInput {
    let noise_sd = if stochastic && p.sigma_w > 0.0 && p.in_ramp(v) {
        p.sigma_w * h.sqrt()
    } else {
        0.0
    };
    LagInput {
        target: d_input(v, p),
        noise_sd,
    }
}

#[inline]
pub(crate) fn lag_update_det(fr: f64, gain: f64, target: f64) -> f64 {
    (fr + gain * (-fr + target)).clamp(0.0, 1.0)
}

#[inline]
pub(crate) fn lag_update<R: Rng + ?Sized>(fr: f64, gain: f64, input: LagInput, rng: &mut R) -> f64 {
    let mut next = fr + gain * (-fr + input.target);
    if input.noise_sd > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        next += input.noise_sd * z;
    }
    next.clamp(0.0, 1.0)
}

#[inline]
pub(crate) fn fraction_step<R: Rng + ?Sized>(
    fr: f64,
    v: f64,
    h: f64,
    p: &TrippingParams,
    noise: Option<&mut R>,
) -> f64 {
    let gain = h / p.t_d;
    match noise {
        Some(rng) => lag_update(fr, gain, lag_input(v, h, p, true), rng),
        None => lag_update_det(fr, gain, d_input(v, p)),
    }
}

/// One explicit-Euler step of the lag block, clamped to `[0, 1]`.
pub fn step_fraction_deterministic(fr: f64, v: f64, h: f64, p: &TrippingParams) -> Result<f64> {
    check_step(h, p)?;
    Ok(fraction_step::<rand_chacha::ChaCha8Rng>(fr, v, h, p, None))
}

/// Euler-Maruyama step of the lag block. Noise acts only on the ramp
/// `(v_2off, v_1off)`; elsewhere the step is deterministic.
pub fn step_fraction_stochastic<R: Rng + ?Sized>(
    fr: f64,
    v: f64,
    h: f64,
    p: &TrippingParams,
    noise: &mut R,
) -> Result<f64> {
    check_step(h, p)?;
    Ok(fraction_step(fr, v, h, p, Some(noise)))
}

/// Motor parameters prepared for repeated evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Motor {
    pub params: MotorParams,
    pub k: DerivedConstants,
    sign: f64,
    det: f64,
}

impl Motor {
    pub fn new(params: MotorParams, negative_stator_coupling: bool) -> Result<Self> {
        params.validate()?;
        let k = params.derived();
        let sign = if negative_stator_coupling { -1.0 } else { 1.0 };
        // [r_a, -x'; sign*x', r_a]
        let det = params.r_a * params.r_a + sign * k.x_prime * k.x_prime;
        let scale = params.r_a * params.r_a + k.x_prime * k.x_prime;
        if det.abs() <= f64::EPSILON * scale {
            return Err(Error::Singular { det });
        }
        Ok(Motor {
            params,
            k,
            sign,
            det,
        })
    }

    /// Solves `r_a i_d - x' i_q = -e_d - V sin(th)` and
    /// `(+/-)x' i_d + r_a i_q = V cos(th) - e_q`.
    #[inline]
    pub fn currents(&self, e_d: f64, e_q: f64, v: f64, theta_v: f64) -> (f64, f64) {
        let (sin, cos) = theta_v.sin_cos();
        let b1 = -e_d - v * sin;
        let b2 = v * cos - e_q;
        let r = self.params.r_a;
        let xp = self.k.x_prime;
        let i_d = (b1 * r + xp * b2) / self.det;
        let i_q = (r * b2 - self.sign * xp * b1) / self.det;
        (i_d, i_q)
    }

    /// Residuals of the two stator equations.
    pub fn algebraic_residual(
        &self,
        e_d: f64,
        e_q: f64,
        i_d: f64,
        i_q: f64,
        v: f64,
        theta_v: f64,
    ) -> (f64, f64) {
        let (sin, cos) = theta_v.sin_cos();
        let r = self.params.r_a;
        let xp = self.k.x_prime;
        (
            r * i_d - xp * i_q + e_d + v * sin,
            r * i_q + self.sign * xp * i_d + e_q - v * cos,
        )
    }

    #[inline]
    pub fn derivative(&self, x: &LoadState) -> (f64, f64, f64) {
        let DerivedConstants { x0, x_prime, t_p } = self.k;
        let w = self.params.omega_s;
        let de_d = (-1.0 / t_p) * (x.e_d + (x0 - x_prime) * x.i_q) + x.s * w * x.e_q;
        let de_q = (-1.0 / t_p) * (x.e_q - (x0 - x_prime) * x.i_d) - x.s * w * x.e_d;
        let ds = (x.tau_m - x.e_d * x.i_d - x.e_q * x.i_q) / (2.0 * self.params.inertia);
        (de_d, de_q, ds)
    }

    /// Motor `(P, Q)` drawn at the terminal.
    #[inline]
    pub fn power(&self, i_d: f64, i_q: f64, v: f64, theta_v: f64) -> (f64, f64) {
        let (sin, cos) = theta_v.sin_cos();
        (
            -v * sin * i_d + v * cos * i_q,
            v * cos * i_d + v * sin * i_q,
        )
    }
}

/// Stator currents for the given EMFs and terminal voltage.
pub fn solve_algebraic_currents(
    e_d: f64,
    e_q: f64,
    v: f64,
    theta_v: f64,
    p: &MotorParams,
    negative_stator_coupling: bool,
) -> Result<(f64, f64)> {
    let motor = Motor::new(*p, negative_stator_coupling)?;
    Ok(motor.currents(e_d, e_q, v, theta_v))
}

/// Time derivatives of `(e_d, e_q, s)`.
pub fn state_derivative(x: &LoadState, p: &LoadParams) -> Result<(f64, f64, f64)> {
    let motor = Motor::new(p.motor, p.negative_stator_coupling)?;
    Ok(motor.derivative(x))
}

/// Total injected `(P, Q)`: tripping-scaled motor plus ZIP.
pub fn measure_power(x: &LoadState, v: f64, theta_v: f64, p: &LoadParams) -> (f64, f64) {
    let (sin, cos) = theta_v.sin_cos();
    let p_mot = -v * sin * x.i_d + v * cos * x.i_q;
    let q_mot = v * cos * x.i_d + v * sin * x.i_q;
    let (p_zip, q_zip) = p.zip.power(v);
    (inject(x.fr, p_mot, p_zip), inject(x.fr, q_mot, q_zip))
}

#[inline]
pub(crate) fn inject(fr: f64, motor: f64, zip: f64) -> f64 {
    fr * motor + zip
}

const INIT_SCAN_POINTS: usize = 4000;
const INIT_TOLERANCE: f64 = 1e-10;

fn operating_point(motor: &Motor, slip: f64, v: f64) -> Option<[f64; 4]> {
    let DerivedConstants { x0, x_prime, t_p } = motor.k;
    let kk = x0 - x_prime;
    let sw = slip * motor.params.omega_s * t_p;
    let r = motor.params.r_a;
    // unknowns (e_d, e_q, i_d, i_q), voltage angle zero
    let a = Matrix4::new(
        1.0,
        -sw,
        0.0,
        kk, //
        sw,
        1.0,
        -kk,
        0.0, //
        1.0,
        0.0,
        r,
        -x_prime, //
        0.0,
        1.0,
        motor.sign * x_prime,
        r,
    );
    let b = Vector4::new(0.0, 0.0, 0.0, v);
    a.lu().solve(&b).map(|x| [x[0], x[1], x[2], x[3]])
}

/// Operating point with zero derivatives and motor power `p_mot_init` at
/// terminal voltage `v0` (angle zero). The slip is taken from the first
/// crossing on `(0, 1)`, i.e. the stable branch of the torque curve.
pub fn steady_state_init(p: &LoadParams, v0: f64) -> Result<LoadState> {
    if !(v0.is_finite() && v0 > 0.0) {
        return Err(Error::config(format!(
            "initial voltage must be positive, got {v0}"
        )));
    }
    p.validate()?;
    let motor = Motor::new(p.motor, p.negative_stator_coupling)?;
    let target = p.motor.p_mot_init;
    let excess = |s: f64| -> f64 {
        match operating_point(&motor, s, v0) {
            Some(x) => v0 * x[3] - target,
            None => f64::NAN,
        }
    };

    let mut lo = 0.0;
    let mut f_lo = excess(lo);
    let mut bracket = None;
    for i in 1..=INIT_SCAN_POINTS {
        let hi = i as f64 / INIT_SCAN_POINTS as f64 * (1.0 - 1e-9);
        let f_hi = excess(hi);
        if f_lo.is_finite() && f_hi.is_finite() && f_lo.signum() != f_hi.signum() {
            bracket = Some((lo, hi, f_lo));
            break;
        }
        lo = hi;
        f_lo = f_hi;
    }
    let (mut lo, mut hi, mut f_lo) = bracket.ok_or_else(|| Error::Initialization {
        reason: format!("no slip in (0, 1) delivers P_mot = {target} at V = {v0}"),
        residual: f_lo.abs(),
    })?;
    if f_lo == 0.0 {
        hi = lo;
    }
    while hi - lo > 0.0 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = excess(mid);
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let s = if excess(lo).abs() <= excess(hi).abs() {
        lo
    } else {
        hi
    };
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Initialization {
            reason: format!("non-physical slip {s}"),
            residual: excess(s).abs(),
        });
    }
    let [e_d, e_q, i_d, i_q] = operating_point(&motor, s, v0).ok_or(Error::Initialization {
        reason: "singular operating-point system".into(),
        residual: f64::NAN,
    })?;
    let state = LoadState {
        e_d,
        e_q,
        s,
        fr: d_input(v0, &p.tripping),
        i_d,
        i_q,
        tau_m: e_d * i_d + e_q * i_q,
    };
    let residual = init_residual(&motor, &state, v0, target);
    if !(residual < INIT_TOLERANCE) {
        return Err(Error::Initialization {
            reason: "root polish did not reach tolerance".into(),
            residual,
        });
    }
    Ok(state)
}

fn init_residual(motor: &Motor, x: &LoadState, v0: f64, target: f64) -> f64 {
    let (a, b, c) = motor.derivative(x);
    let (r1, r2) = motor.algebraic_residual(x.e_d, x.e_q, x.i_d, x.i_q, v0, 0.0);
    let (p_mot, _) = motor.power(x.i_d, x.i_q, v0, 0.0);
    [a, b, c, r1, r2, p_mot - target]
        .iter()
        .map(|r| r * r)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Deterministic,
    Stochastic,
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "det" => Ok(SimMode::Deterministic),
            "stochastic" | "stoch" => Ok(SimMode::Stochastic),
            other => Err(Error::config(format!("unknown simulation mode {other:?}"))),
        }
    }
}

/// One integration instant of the motor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MotorSample {
    pub t: f64,
    pub v: f64,
    pub state: LoadState,
    pub p_mot: f64,
    pub q_mot: f64,
}

/// Number of Euler steps covering `[0, t_end]`.
pub(crate) fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!(
            "step size must be positive, got {h}"
        )));
    }
    let n = (t_end / h).round();
    if n < 1.0 || ((n * h - t_end).abs() > 1e-9 * t_end.max(1.0)) {
        return Err(Error::config(format!(
            "step size {h} does not divide the horizon {t_end}"
        )));
    }
    Ok(n as usize)
}

/// Forward-Euler integration of the motor over steps `0..=last`, calling
/// `visit` at each instant before the state is advanced.
pub(crate) fn integrate_motor<F>(
    p: &LoadParams,
    scenario: &VoltageScenario,
    h: f64,
    last: usize,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &MotorSample),
{
    let motor = Motor::new(p.motor, p.negative_stator_coupling)?;
    let theta_v = 0.0;
    let mut x = steady_state_init(p, scenario.voltage_at(0.0))?;
    for step in 0..=last {
        let t = step as f64 * h;
        let v = scenario.voltage_at(t);
        let (i_d, i_q) = motor.currents(x.e_d, x.e_q, v, theta_v);
        x.i_d = i_d;
        x.i_q = i_q;
        let (p_mot, q_mot) = motor.power(i_d, i_q, v, theta_v);
        visit(
            step,
            &MotorSample {
                t,
                v,
                state: x,
                p_mot,
                q_mot,
            },
        );
        if step == last {
            break;
        }
        let (de_d, de_q, ds) = motor.derivative(&x);
        x.e_d += h * de_d;
        x.e_q += h * de_q;
        x.s += h * ds;
        if !(x.e_d.is_finite() && x.e_q.is_finite() && x.s.is_finite()) {
            return Err(Error::BlowUp {
                step: step + 1,
                time: (step + 1) as f64 * h,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub v: f64,
    pub state: LoadState,
    pub p_inj: f64,
    pub q_inj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub const CSV_HEADER: &'static str = "t,V,e_d,e_q,s,fr,P_inj,Q_inj";

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 120);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t, r.v, r.state.e_d, r.state.e_q, r.state.s, r.state.fr, r.p_inj, r.q_inj
            ));
        }
        out
    }
}

/// Simulates the load under `scenario` with step `h`. In stochastic mode
/// the fraction receives Wiener increments drawn from `noise`.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    p: &LoadParams,
    scenario: &VoltageScenario,
    h: f64,
    mode: SimMode,
    noise: &mut R,
) -> Result<Trajectory> {
    p.validate()?;
    scenario.validate()?;
    check_step(h, &p.tripping)?;
    let n = step_count(scenario.t_end, h)?;
    let trip = p.tripping;
    let zip = p.zip;
    let mut rows = Vec::with_capacity(n + 1);
    let mut fr = d_input(scenario.voltage_at(0.0), &trip);
    integrate_motor(p, scenario, h, n, |_, m| {
        let mut state = m.state;
        state.fr = fr;
        let (p_zip, q_zip) = zip.power(m.v);
        rows.push(TrajectoryRow {
            t: m.t,
            v: m.v,
            state,
            p_inj: inject(fr, m.p_mot, p_zip),
            q_inj: inject(fr, m.q_mot, q_zip),
        });
        fr = match mode {
            SimMode::Deterministic => fraction_step::<R>(fr, m.v, h, &trip, None),
            SimMode::Stochastic => fraction_step(fr, m.v, h, &trip, Some(&mut *noise)),
        };
    })?;
    Ok(Trajectory { h, rows })
}
