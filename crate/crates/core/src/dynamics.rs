//! Dynamic bicycle model: the continuous six-state ODE, its discrete
//! four-state map `Υ` with yaw and yaw rate as controls, and the inverse
//! map recovering controls from two consecutive states.
//!
//! Cornering stiffness enters every equation as `−|k|` (tire force opposes
//! slip), so attributes may be given in either global sign convention.

use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, Tape, Tensor, Var};

pub const V_MIN_FLOOR: f64 = 0.5;
pub const STEER_LIMIT: f64 = 0.6;
pub const REG_LAMBDA: f64 = 1e-6;
pub const TOL_ROT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("longitudinal speed {vx} m/s is below the {floor} m/s floor")]
    NearZeroLongitudinalSpeed { vx: f64, floor: f64 },
    #[error("singular v_y denominator m·v_x − Δt(k_f + k_r) = {0}")]
    SingularDenominator(f64),
    #[error("displacement is not a rotation of the velocity (residual {residual} m > {limit} m)")]
    InconsistentDisplacement { residual: f64, limit: f64 },
    #[error("invalid vehicle attributes: {0}")]
    InvalidAttributes(String),
    #[error("invalid time step {0} s (need 0 < Δt ≤ 1)")]
    InvalidStep(f64),
    #[error("no controls to roll out")]
    EmptyControls,
    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<DynamicsError>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleAttributes {
    pub mass_kg: f64,
    pub yaw_inertia_kg_m2: f64,
    pub dist_cg_front_m: f64,
    pub dist_cg_rear_m: f64,
    pub cornering_stiffness_front_n_per_rad: f64,
    pub cornering_stiffness_rear_n_per_rad: f64,
}

impl Default for VehicleAttributes {
    fn default() -> Self {
        Self {
            mass_kg: 1500.0,
            yaw_inertia_kg_m2: 2500.0,
            dist_cg_front_m: 1.2,
            dist_cg_rear_m: 1.6,
            cornering_stiffness_front_n_per_rad: -1e5,
            cornering_stiffness_rear_n_per_rad: -1e5,
        }
    }
}

impl VehicleAttributes {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass_kg", self.mass_kg),
            ("yaw_inertia_kg_m2", self.yaw_inertia_kg_m2),
            ("dist_cg_front_m", self.dist_cg_front_m),
            ("dist_cg_rear_m", self.dist_cg_rear_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidAttributes(format!("{name} = {v}")));
            }
        }
        let (kf, kr) = (
            self.cornering_stiffness_front_n_per_rad,
            self.cornering_stiffness_rear_n_per_rad,
        );
        if kf == 0.0 || kr == 0.0 || !kf.is_finite() || !kr.is_finite() {
            return Err(DynamicsError::InvalidAttributes(
                "cornering stiffness must be nonzero".into(),
            ));
        }
        if kf.signum() != kr.signum() {
            return Err(DynamicsError::InvalidAttributes(
                "k_f and k_r must share a sign".into(),
            ));
        }
        Ok(())
    }

    /// Same vehicle with the opposite stiffness sign convention.
    pub fn flipped_stiffness_sign(&self) -> Self {
        Self {
            cornering_stiffness_front_n_per_rad: -self.cornering_stiffness_front_n_per_rad,
            cornering_stiffness_rear_n_per_rad: -self.cornering_stiffness_rear_n_per_rad,
            ..*self
        }
    }

    fn kf(&self) -> f64 {
        -self.cornering_stiffness_front_n_per_rad.abs()
    }

    fn kr(&self) -> f64 {
        -self.cornering_stiffness_rear_n_per_rad.abs()
    }
}

/// `[x, y, v_x, v_y]`; `v_x` is the forward (body) speed component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct KinematicState {
    pub x_m: f64,
    pub y_m: f64,
    pub vx_mps: f64,
    pub vy_mps: f64,
}

impl KinematicState {
    pub const fn new(x_m: f64, y_m: f64, vx_mps: f64, vy_mps: f64) -> Self {
        Self {
            x_m,
            y_m,
            vx_mps,
            vy_mps,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_m, self.y_m, self.vx_mps, self.vy_mps]
    }

    pub fn position(self) -> [f64; 2] {
        [self.x_m, self.y_m]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 4]> for KinematicState {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<KinematicState> for [f64; 4] {
    fn from(s: KinematicState) -> Self {
        s.to_array()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FullContinuousState {
    pub kinematic: KinematicState,
    pub yaw_rad: f64,
    pub yaw_rate_radps: f64,
}

/// Time derivatives of a [`FullContinuousState`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StateRate {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
}

/// `C = [φ, ω, δ, a]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct ControlInput {
    pub yaw_rad: f64,
    pub yaw_rate_radps: f64,
    pub steer_rad: f64,
    pub accel_mps2: f64,
}

impl ControlInput {
    pub const fn new(yaw_rad: f64, yaw_rate_radps: f64, steer_rad: f64, accel_mps2: f64) -> Self {
        Self {
            yaw_rad,
            yaw_rate_radps,
            steer_rad,
            accel_mps2,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [
            self.yaw_rad,
            self.yaw_rate_radps,
            self.steer_rad,
            self.accel_mps2,
        ]
    }
}

impl From<[f64; 4]> for ControlInput {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<ControlInput> for [f64; 4] {
    fn from(c: ControlInput) -> Self {
        c.to_array()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSpec {
    dt_s: f64,
}

impl StepSpec {
    pub fn new(dt_s: f64) -> Result<Self, DynamicsError> {
        if dt_s > 0.0 && dt_s <= 1.0 {
            Ok(Self { dt_s })
        } else {
            Err(DynamicsError::InvalidStep(dt_s))
        }
    }

    pub fn dt(self) -> f64 {
        self.dt_s
    }
}

/// How to evaluate the `ẏ` row of the continuous model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LateralRateForm {
    /// `v_x sin φ + v_y cos φ`.
    #[default]
    Corrected,
    /// `v_x sin φ + v_x cos φ`, kept for comparison only.
    Literal,
}

fn check_speed(vx: f64) -> Result<(), DynamicsError> {
    if vx.abs() < V_MIN_FLOOR || !vx.is_finite() {
        Err(DynamicsError::NearZeroLongitudinalSpeed {
            vx,
            floor: V_MIN_FLOOR,
        })
    } else {
        Ok(())
    }
}

pub fn continuous_derivative(
    state: &FullContinuousState,
    steer_rad: f64,
    accel_mps2: f64,
    attrs: &VehicleAttributes,
) -> Result<StateRate, DynamicsError> {
    continuous_derivative_with(
        state,
        steer_rad,
        accel_mps2,
        attrs,
        LateralRateForm::Corrected,
    )
}

pub fn continuous_derivative_with(
    state: &FullContinuousState,
    steer_rad: f64,
    accel_mps2: f64,
    attrs: &VehicleAttributes,
    form: LateralRateForm,
) -> Result<StateRate, DynamicsError> {
    let KinematicState {
        vx_mps: vx,
        vy_mps: vy,
        ..
    } = state.kinematic;
    check_speed(vx)?;
    let (phi, w, d) = (state.yaw_rad, state.yaw_rate_radps, steer_rad);
    let (m, iz) = (attrs.mass_kg, attrs.yaw_inertia_kg_m2);
    let (lf, lr, kf, kr) = (
        attrs.dist_cg_front_m,
        attrs.dist_cg_rear_m,
        attrs.kf(),
        attrs.kr(),
    );
    let slip_f = (vy + lf * w) / vx - d;
    let slip_r = (vy - lr * w) / vx;
    let y_rate = match form {
        LateralRateForm::Corrected => vx * phi.sin() + vy * phi.cos(),
        LateralRateForm::Literal => vx * phi.sin() + vx * phi.cos(),
    };
    Ok(StateRate {
        x: vx * phi.cos() - vy * phi.sin(),
        y: y_rate,
        vx: accel_mps2 + vx * w - kf * slip_f * d.sin() / m,
        vy: -vx * w + (kf * slip_f * d.cos() + kr * slip_r) / m,
        yaw: w,
        yaw_rate: (lf * kf * slip_f * d.cos() - lr * kr * slip_r) / iz,
    })
}

fn advance(s: &FullContinuousState, r: &StateRate, h: f64) -> FullContinuousState {
    FullContinuousState {
        kinematic: KinematicState::new(
            s.kinematic.x_m + h * r.x,
            s.kinematic.y_m + h * r.y,
            s.kinematic.vx_mps + h * r.vx,
            s.kinematic.vy_mps + h * r.vy,
        ),
        yaw_rad: s.yaw_rad + h * r.yaw,
        yaw_rate_radps: s.yaw_rate_radps + h * r.yaw_rate,
    }
}

/// Classical fourth-order Runge–Kutta step of the continuous model with
/// steering and acceleration held over the step. `dt = 0` is allowed.
pub fn rk4_step(
    state: &FullContinuousState,
    steer_rad: f64,
    accel_mps2: f64,
    attrs: &VehicleAttributes,
    dt: f64,
) -> Result<FullContinuousState, DynamicsError> {
    let f = |s: &FullContinuousState| continuous_derivative(s, steer_rad, accel_mps2, attrs);
    let k1 = f(state)?;
    let k2 = f(&advance(state, &k1, dt / 2.0))?;
    let k3 = f(&advance(state, &k2, dt / 2.0))?;
    let k4 = f(&advance(state, &k3, dt))?;
    let combined = StateRate {
        x: (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x) / 6.0,
        y: (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y) / 6.0,
        vx: (k1.vx + 2.0 * k2.vx + 2.0 * k3.vx + k4.vx) / 6.0,
        vy: (k1.vy + 2.0 * k2.vy + 2.0 * k3.vy + k4.vy) / 6.0,
        yaw: (k1.yaw + 2.0 * k2.yaw + 2.0 * k3.yaw + k4.yaw) / 6.0,
        yaw_rate: (k1.yaw_rate + 2.0 * k2.yaw_rate + 2.0 * k3.yaw_rate + k4.yaw_rate) / 6.0,
    };
    Ok(advance(state, &combined, dt))
}

fn vy_denominator(vx: f64, attrs: &VehicleAttributes, dt: f64) -> f64 {
    vx * attrs.mass_kg + -dt * (attrs.kf() + attrs.kr())
}

/// The discrete map `Υ`: one step of the four-state model.
pub fn discrete_step(
    state: &KinematicState,
    ctrl: &ControlInput,
    attrs: &VehicleAttributes,
    spec: StepSpec,
) -> Result<KinematicState, DynamicsError> {
    check_speed(state.vx_mps)?;
    let dt = spec.dt();
    let KinematicState {
        x_m: x,
        y_m: y,
        vx_mps: vx,
        vy_mps: vy,
    } = *state;
    let (phi, w, d, a) = (
        ctrl.yaw_rad,
        ctrl.yaw_rate_radps,
        ctrl.steer_rad,
        ctrl.accel_mps2,
    );
    let m = attrs.mass_kg;
    let (lf, lr, kf, kr) = (
        attrs.dist_cg_front_m,
        attrs.dist_cg_rear_m,
        attrs.kf(),
        attrs.kr(),
    );
    let den = vy_denominator(vx, attrs, dt);
    if den.abs() < 1e-9 * (m * vx).abs().max(1.0) {
        return Err(DynamicsError::SingularDenominator(den));
    }
    // Same association order as `discrete_step_tape`, so both agree bitwise.
    let (sin, cos) = phi.sin_cos();
    let num = (vx * vy) * m
        + w * (dt * (lf * kf - lr * kr))
        + (d * vx) * (-dt * kf)
        + ((vx * vx) * w) * (-dt * m);
    Ok(KinematicState::new(
        x + (vx * cos - vy * sin) * dt,
        y + (vy * cos + vx * sin) * dt,
        vx + a * dt,
        num / den,
    ))
}

/// Regularization and tolerance knobs for [`inverse_controls`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseOptions {
    pub reg_lambda: f64,
    pub tol_rot: f64,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            reg_lambda: REG_LAMBDA,
            tol_rot: TOL_ROT,
        }
    }
}

/// `Υ⁻¹`: controls that carry `state_t` to `state_t1`.
///
/// `a` and `φ` are determined exactly. The `v_y` row is one linear equation
/// in `(ω, δ)`; the returned pair is its minimum-norm Tikhonov solution.
pub fn inverse_controls(
    state_t: &KinematicState,
    state_t1: &KinematicState,
    attrs: &VehicleAttributes,
    spec: StepSpec,
    opts: InverseOptions,
) -> Result<ControlInput, DynamicsError> {
    check_speed(state_t.vx_mps)?;
    let dt = spec.dt();
    let (vx, vy) = (state_t.vx_mps, state_t.vy_mps);
    let (dx, dy) = (state_t1.x_m - state_t.x_m, state_t1.y_m - state_t.y_m);

    let cross = vx * dy - vy * dx;
    let dot = vx * dx + vy * dy;
    let phi = cross.atan2(dot);
    let (s, c) = phi.sin_cos();
    let rx = dt * (vx * c - vy * s) - dx;
    let ry = dt * (vy * c + vx * s) - dy;
    let residual = rx.hypot(ry);
    let limit = opts.tol_rot * dx.hypot(dy);
    if residual > limit {
        return Err(DynamicsError::InconsistentDisplacement { residual, limit });
    }

    let accel = (state_t1.vx_mps - vx) / dt;

    let m = attrs.mass_kg;
    let (lf, lr, kf, kr) = (
        attrs.dist_cg_front_m,
        attrs.dist_cg_rear_m,
        attrs.kf(),
        attrs.kr(),
    );
    let den = vy_denominator(vx, attrs, dt);
    let c_w = dt * (lf * kf - lr * kr - m * vx * vx);
    let c_d = -dt * kf * vx;
    let rhs = state_t1.vy_mps * den - m * vx * vy;
    let norm2 = c_w * c_w + c_d * c_d + opts.reg_lambda;
    Ok(ControlInput::new(
        phi,
        c_w * rhs / norm2,
        c_d * rhs / norm2,
        accel,
    ))
}

/// Applies `Υ` once per control; `out[k]` is the state after `k + 1` steps.
pub fn rollout(
    initial: &KinematicState,
    controls: &[ControlInput],
    attrs: &VehicleAttributes,
    spec: StepSpec,
) -> Result<Vec<KinematicState>, DynamicsError> {
    if controls.is_empty() {
        return Err(DynamicsError::EmptyControls);
    }
    let mut out = Vec::with_capacity(controls.len());
    let mut s = *initial;
    for (index, c) in controls.iter().enumerate() {
        s = discrete_step(&s, c, attrs, spec).map_err(|e| DynamicsError::AtStep {
            index,
            source: Box::new(e),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Batched `Υ` on a tape. `states` and `controls` are `[n, 4]`; `v_x` is
/// floored at `v_floor` before evaluation instead of raising an error.
pub fn discrete_step_tape(
    tape: &mut Tape,
    states: Var,
    controls: Var,
    attrs: &VehicleAttributes,
    dt: f64,
    v_floor: f64,
) -> Result<Var, KernelError> {
    let x = tape.col(states, 0)?;
    let y = tape.col(states, 1)?;
    let vx = tape.col(states, 2)?;
    let vy = tape.col(states, 3)?;
    let vx = tape.clamp(vx, v_floor, f64::MAX);
    let phi = tape.col(controls, 0)?;
    let w = tape.col(controls, 1)?;
    let d = tape.col(controls, 2)?;
    let a = tape.col(controls, 3)?;

    let m = attrs.mass_kg;
    let (lf, lr, kf, kr) = (
        attrs.dist_cg_front_m,
        attrs.dist_cg_rear_m,
        attrs.kf(),
        attrs.kr(),
    );
    let cos = tape.cos(phi);
    let sin = tape.sin(phi);

    let vx_cos = tape.mul(vx, cos)?;
    let vy_sin = tape.mul(vy, sin)?;
    let fwd = tape.sub(vx_cos, vy_sin)?;
    let fwd = tape.scale(fwd, dt);
    let x1 = tape.add(x, fwd)?;

    let vy_cos = tape.mul(vy, cos)?;
    let vx_sin = tape.mul(vx, sin)?;
    let lat = tape.add(vy_cos, vx_sin)?;
    let lat = tape.scale(lat, dt);
    let y1 = tape.add(y, lat)?;

    let da = tape.scale(a, dt);
    let vx1 = tape.add(vx, da)?;

    // m vx vy + dt(lf kf − lr kr) ω − dt kf δ vx − dt m vx² ω
    let vxvy = tape.mul(vx, vy)?;
    let t1 = tape.scale(vxvy, m);
    let t2 = tape.scale(w, dt * (lf * kf - lr * kr));
    let dvx = tape.mul(d, vx)?;
    let t3 = tape.scale(dvx, -dt * kf);
    let vx2 = tape.square(vx);
    let vx2w = tape.mul(vx2, w)?;
    let t4 = tape.scale(vx2w, -dt * m);
    let num = tape.add(t1, t2)?;
    let num = tape.add(num, t3)?;
    let num = tape.add(num, t4)?;
    let den = tape.scale(vx, m);
    let den = tape.add_scalar(den, -dt * (kf + kr));
    let vy1 = tape.div(num, den)?;
    tape.concat_cols(&[x1, y1, vx1, vy1])
}

/// Stacks states as an `[n, 4]` tensor.
pub fn states_tensor(states: &[KinematicState]) -> Tensor {
    Tensor::from_rows(&states.iter().map(|s| s.to_array().to_vec()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn spec(dt: f64) -> StepSpec {
        StepSpec::new(dt).unwrap()
    }

    fn full(x: f64, y: f64, vx: f64, vy: f64, phi: f64, w: f64) -> FullContinuousState {
        FullContinuousState {
            kinematic: KinematicState::new(x, y, vx, vy),
            yaw_rad: phi,
            yaw_rate_radps: w,
        }
    }

    #[test]
    fn derivative_straight_line() {
        let r = continuous_derivative(
            &full(0.0, 0.0, 10.0, 0.0, 0.0, 0.0),
            0.0,
            0.0,
            &VehicleAttributes::default(),
        )
        .unwrap();
        assert_eq!(
            r,
            StateRate {
                x: 10.0,
                ..Default::default()
            }
        );
    }

    #[test]
    fn derivative_rotated_velocity() {
        let r = continuous_derivative(
            &full(0.0, 0.0, 10.0, 0.0, FRAC_PI_2, 0.0),
            0.0,
            1.0,
            &VehicleAttributes::default(),
        )
        .unwrap();
        assert!(r.x.abs() < 1e-12);
        assert!((r.y - 10.0).abs() < 1e-12);
        assert_eq!((r.vx, r.vy, r.yaw, r.yaw_rate), (1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn derivative_golden_by_scalar_evaluation() {
        // Term-by-term hand evaluation, m=1500, Iz=2500, lf=1.2, lr=1.6, k=-1e5,
        // state (0,0,10,0.5, φ=0, ω=0.1), δ=0.05, a=0.
        // slip_f = (0.5 + 0.12)/10 - 0.05 = 0.012
        // slip_r = (0.5 - 0.16)/10 = 0.034
        let sf = 0.012f64;
        let sr = 0.034f64;
        let want = StateRate {
            x: 10.0,
            y: 0.5,
            vx: 0.0 + 10.0 * 0.1 - (-1e5) * sf * 0.05f64.sin() / 1500.0,
            vy: -10.0 * 0.1 + ((-1e5) * sf * 0.05f64.cos() + (-1e5) * sr) / 1500.0,
            yaw: 0.1,
            yaw_rate: (1.2 * (-1e5) * sf * 0.05f64.cos() - 1.6 * (-1e5) * sr) / 2500.0,
        };
        // frozen numbers for the same terms
        assert!((want.vx - 1.039_983_335_416_542_6).abs() < 1e-12);
        assert!((want.vy - (-4.065_666_874_982_639_5)).abs() < 1e-12);
        assert!((want.yaw_rate - 1.600_719_850_012_499_5).abs() < 1e-12);
        for attrs in [
            VehicleAttributes::default(),
            VehicleAttributes::default().flipped_stiffness_sign(),
        ] {
            let got =
                continuous_derivative(&full(0.0, 0.0, 10.0, 0.5, 0.0, 0.1), 0.05, 0.0, &attrs)
                    .unwrap();
            for (g, w) in [
                (got.x, want.x),
                (got.y, want.y),
                (got.vx, want.vx),
                (got.vy, want.vy),
                (got.yaw, want.yaw),
                (got.yaw_rate, want.yaw_rate),
            ] {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn literal_lateral_form_differs_only_in_y_rate() {
        let s = full(0.0, 0.0, 10.0, 0.5, 0.3, 0.1);
        let a = VehicleAttributes::default();
        let c = continuous_derivative_with(&s, 0.05, 0.0, &a, LateralRateForm::Corrected).unwrap();
        let l = continuous_derivative_with(&s, 0.05, 0.0, &a, LateralRateForm::Literal).unwrap();
        assert!((l.y - (10.0 * 0.3f64.sin() + 10.0 * 0.3f64.cos())).abs() < 1e-12);
        assert_eq!((c.x, c.vx, c.vy, c.yaw_rate), (l.x, l.vx, l.vy, l.yaw_rate));
    }

    #[test]
    fn derivative_rejects_low_speed() {
        let e = continuous_derivative(
            &full(0.0, 0.0, 0.2, 0.0, 0.0, 0.0),
            0.0,
            0.0,
            &VehicleAttributes::default(),
        );
        assert!(matches!(
            e,
            Err(DynamicsError::NearZeroLongitudinalSpeed { .. })
        ));
    }

    #[test]
    fn rk4_translation_and_zero_step() {
        let a = VehicleAttributes::default();
        let s = full(0.0, 0.0, 10.0, 0.0, 0.0, 0.0);
        let n = rk4_step(&s, 0.0, 0.0, &a, 0.1).unwrap();
        assert!((n.kinematic.x_m - 1.0).abs() < 1e-15);
        assert_eq!(n.kinematic.y_m, 0.0);
        let s = full(1.0, 2.0, 10.0, 0.5, 0.2, 0.1);
        assert_eq!(rk4_step(&s, 0.05, 1.0, &a, 0.0).unwrap(), s);
    }

    #[test]
    fn rk4_matches_fine_euler_reference() {
        let a = VehicleAttributes::default();
        let s0 = full(0.0, 0.0, 10.0, 0.5, 0.0, 0.1);
        // Independent fine-step explicit Euler reference (dt = 1e-5).
        let mut e = s0;
        for _ in 0..1000 {
            let r = continuous_derivative(&e, 0.05, 0.0, &a).unwrap();
            e = advance(&e, &r, 1e-5);
        }
        let got = rk4_step(&s0, 0.05, 0.0, &a, 0.01).unwrap();
        let pairs = [
            (got.kinematic.x_m, e.kinematic.x_m),
            (got.kinematic.y_m, e.kinematic.y_m),
            (got.kinematic.vx_mps, e.kinematic.vx_mps),
            (got.kinematic.vy_mps, e.kinematic.vy_mps),
            (got.yaw_rad, e.yaw_rad),
            (got.yaw_rate_radps, e.yaw_rate_radps),
        ];
        for (g, w) in pairs {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn discrete_step_examples() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let n = discrete_step(&s, &ControlInput::default(), &a, spec(0.1)).unwrap();
        assert_eq!(n, KinematicState::new(1.0, 0.0, 10.0, 0.0));

        let n = discrete_step(&s, &ControlInput::new(FRAC_PI_2, 0.0, 0.0, 2.0), &a, spec(0.1))
            .unwrap();
        assert!(n.x_m.abs() < 1e-15);
        assert!((n.y_m - 1.0).abs() < 1e-15);
        assert!((n.vx_mps - 10.2).abs() < 1e-15);
        assert_eq!(n.vy_mps, 0.0);
    }

    #[test]
    fn discrete_step_golden_lateral_speed() {
        // numerator 0 + 0.1·4e4·0.1 + 0.1·1e5·0.05·10 − 0.1·1500·100·0.1 = 3900
        // denominator 1500·10 + 0.1·2e5 = 35000
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let c = ControlInput::new(0.0, 0.1, 0.05, 0.0);
        for a in [
            VehicleAttributes::default(),
            VehicleAttributes::default().flipped_stiffness_sign(),
        ] {
            let n = discrete_step(&s, &c, &a, spec(0.1)).unwrap();
            assert!((n.vy_mps - 3900.0 / 35000.0).abs() < 1e-12);
            assert_eq!((n.x_m, n.y_m, n.vx_mps), (1.0, 0.0, 10.0));
        }
    }

    #[test]
    fn discrete_step_errors() {
        let a = VehicleAttributes::default();
        let slow = KinematicState::new(0.0, 0.0, 0.1, 0.0);
        assert!(matches!(
            discrete_step(&slow, &ControlInput::default(), &a, spec(0.1)),
            Err(DynamicsError::NearZeroLongitudinalSpeed { .. })
        ));
        // m vx = dt (kf + kr) is impossible with −|k|, unless vx is negative.
        let rev = KinematicState::new(0.0, 0.0, -200.0 / 15.0, 0.0);
        assert!(matches!(
            discrete_step(&rev, &ControlInput::default(), &a, spec(0.1)),
            Err(DynamicsError::SingularDenominator(_))
        ));
        assert!(StepSpec::new(0.0).is_err());
        assert!(StepSpec::new(1.5).is_err());
    }

    #[test]
    fn inverse_examples() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let c = inverse_controls(
            &s,
            &KinematicState::new(1.0, 0.0, 10.2, 0.0),
            &a,
            spec(0.1),
            InverseOptions::default(),
        )
        .unwrap();
        assert_eq!(c.yaw_rad, 0.0);
        assert_eq!((c.yaw_rate_radps, c.steer_rad), (0.0, 0.0));
        assert!((c.accel_mps2 - 2.0).abs() < 1e-12);

        let c = inverse_controls(
            &s,
            &KinematicState::new(0.0, 1.0, 10.0, 0.0),
            &a,
            spec(0.1),
            InverseOptions::default(),
        )
        .unwrap();
        assert!((c.yaw_rad - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(c.accel_mps2, 0.0);
    }

    #[test]
    fn inverse_rejects_inconsistent_displacement() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let e = inverse_controls(
            &s,
            &KinematicState::new(3.0, 0.0, 10.0, 0.0),
            &a,
            spec(0.1),
            InverseOptions::default(),
        );
        assert!(matches!(
            e,
            Err(DynamicsError::InconsistentDisplacement { .. })
        ));
    }

    #[test]
    fn inverse_roundtrip_reproduces_lateral_speed() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let c = ControlInput::new(0.0, 0.1, 0.05, 0.0);
        let n = discrete_step(&s, &c, &a, spec(0.1)).unwrap();
        let r = inverse_controls(&s, &n, &a, spec(0.1), InverseOptions::default()).unwrap();
        assert!((r.yaw_rate_radps - c.yaw_rate_radps).abs() > 1e-3);
        let back = discrete_step(&s, &r, &a, spec(0.1)).unwrap();
        assert!((back.vy_mps - n.vy_mps).abs() < 1e-9);
    }

    #[test]
    fn rollout_examples() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 10.0, 0.0);
        let out = rollout(&s, &[ControlInput::default(); 5], &a, spec(0.1)).unwrap();
        assert_eq!(out.len(), 5);
        assert!((out[4].x_m - 5.0).abs() < 1e-12);
        assert!((out[0].x_m - 1.0).abs() < 1e-15);

        let c = ControlInput::new(0.1, 0.05, 0.02, 0.5);
        let one = rollout(&s, &[c], &a, spec(0.1)).unwrap();
        assert_eq!(one[0], discrete_step(&s, &c, &a, spec(0.1)).unwrap());
        assert!(matches!(
            rollout(&s, &[], &a, spec(0.1)),
            Err(DynamicsError::EmptyControls)
        ));
    }

    #[test]
    fn rollout_reports_failing_index() {
        let a = VehicleAttributes::default();
        let s = KinematicState::new(0.0, 0.0, 1.0, 0.0);
        let brake = ControlInput::new(0.0, 0.0, 0.0, -4.0);
        match rollout(&s, &[brake; 4], &a, spec(0.1)) {
            Err(DynamicsError::AtStep { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tape_step_matches_scalar_step() {
        let a = VehicleAttributes::default();
        let states = [
            KinematicState::new(1.0, -2.0, 12.0, 0.3),
            KinematicState::new(0.0, 0.0, 25.0, -0.1),
        ];
        let ctrls = [
            ControlInput::new(0.1, 0.05, 0.02, 1.0),
            ControlInput::new(-0.3, -0.1, 0.0, -2.0),
        ];
        let mut t = Tape::new();
        let sv = t.constant(states_tensor(&states));
        let cv = t.constant(Tensor::from_rows(
            &ctrls.iter().map(|c| c.to_array().to_vec()).collect::<Vec<_>>(),
        ));
        let out = discrete_step_tape(&mut t, sv, cv, &a, 0.2, V_MIN_FLOOR).unwrap();
        for (i, (s, c)) in states.iter().zip(&ctrls).enumerate() {
            let want = discrete_step(s, c, &a, spec(0.2)).unwrap().to_array();
            assert_eq!(t.value(out).row_slice(i), &want);
        }
    }
}
