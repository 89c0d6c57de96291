//! Dynamics learning stage: a conditional VAE over control variables whose
//! samples are pushed through the discrete bicycle model.
//!
//! Loop, for `t = t_c .. t_c + t_s − 1` and every vehicle at once:
//! `ctx_t = X̊` at `t_c` and `X̊ + enc(X^t)` afterwards; `z ~ p(z | ctx_t)`
//! (or `q(z | ctx_t, X^{t+1})` when teacher states are given);
//! `C^t = g(ctx_t, z)`; `X^{t+1} = Υ(X^t, C^t)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::config::{DynamicsParams, ModelConfig};
use crate::data::HorizonSpec;
use crate::dynamics::{discrete_step, discrete_step_tape, ControlInput, KinematicState, StepSpec, VehicleAttributes};
use crate::error::ModelError;
use crate::features::{CONTROL_SCALE, STATE_SCALE, STATE_SHIFT};
use crate::numkernel::{Activation, Mlp, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 4.0;
/// Output scales of the raw generator head for `Δφ`, `ω` and `a`.
const DPHI_SCALE: f64 = 0.1;
const OMEGA_SCALE: f64 = 0.2;
const ACCEL_SCALE: f64 = 3.0;
/// Transition features `(X^{t+1} − X^t)/Δt` are divided by these.
const RATE_SCALE: [f64; 4] = [20.0, 2.0, 3.0, 1.0];

#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mean: Var,
    pub log_var: Var,
}

pub enum GenerationMode<'a> {
    Prior,
    /// Teacher states `[n][t_s]` (the true `X^{t_c+1 ..}`) drive both the
    /// context and the posterior.
    Posterior { teacher: &'a [Vec<KinematicState>] },
}

pub enum LatentSource<'a> {
    Mean,
    Sample(&'a mut ChaCha8Rng),
    /// Use these `z` values (`[n, z_dim]` per step) as given.
    Fixed(&'a [Tensor]),
}

/// Tape handles of one generation pass.
pub struct DynPass {
    /// `X^{t_c+1 .. t_c+t_s}`, each `[n, 4]`.
    pub states: Vec<Var>,
    /// `C^{t_c .. t_c+t_s−1}`, each `[n, 4]` as `[φ, ω, δ, a]`.
    pub controls: Vec<Var>,
    pub priors: Vec<GaussianLatent>,
    pub posteriors: Vec<GaussianLatent>,
    pub latents: Vec<Tensor>,
    /// `F_d`, `[n, d_model]`.
    pub dyn_features: Var,
}

/// Plain values of a pass, per vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct DynStageOutput {
    pub short_traj: Vec<Vec<KinematicState>>,
    pub controls: Vec<Vec<ControlInput>>,
    pub dyn_features: Tensor,
}

impl DynPass {
    pub fn output(&self, tape: &Tape) -> DynStageOutput {
        let n = tape.dims(self.dyn_features).0;
        let rows = |vars: &[Var], i: usize| -> Vec<[f64; 4]> {
            vars.iter()
                .map(|&v| tape.value(v).row_slice(i).try_into().expect("4 columns"))
                .collect()
        };
        DynStageOutput {
            short_traj: (0..n)
                .map(|i| rows(&self.states, i).into_iter().map(KinematicState::from).collect())
                .collect(),
            controls: (0..n)
                .map(|i| rows(&self.controls, i).into_iter().map(ControlInput::from).collect())
                .collect(),
            dyn_features: tape.value(self.dyn_features).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DynStage {
    pub embed: Mlp,
    pub step_enc: Mlp,
    pub prior_net: Mlp,
    pub posterior_net: Mlp,
    pub generator: Mlp,
    pub dyn_feat: Mlp,
    pub z_dim: usize,
    pub t_p: usize,
    pub t_s: usize,
    pub dt: f64,
    pub limits: DynamicsParams,
}

fn row_const(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::row(v))
}

impl DynStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        horizon: &HorizonSpec,
        limits: DynamicsParams,
    ) -> Result<Self> {
        let (d, z) = (cfg.d_model, cfg.z_dim);
        let (t_p, t_s) = (horizon.t_p_steps(), horizon.t_s_steps());
        let gelu = Activation::Gelu;
        let id = Activation::Identity;
        Ok(Self {
            embed: Mlp::new(store, rng, "dyn.embed", &[t_p * 4 + 2, d, d], gelu, id)?,
            step_enc: Mlp::new(store, rng, "dyn.step_enc", &[5, d, d], gelu, id)?,
            prior_net: Mlp::new(store, rng, "dyn.prior", &[d, d, 2 * z], gelu, id)?,
            posterior_net: Mlp::new(store, rng, "dyn.posterior", &[d + 4, d, 2 * z], gelu, id)?,
            generator: Mlp::new(store, rng, "dyn.generator", &[d + z, d, 4], gelu, id)?,
            dyn_feat: Mlp::new(store, rng, "dyn.features", &[t_s * 8, d, d], gelu, id)?,
            z_dim: z,
            t_p,
            t_s,
            dt: horizon.dt_s,
            limits,
        })
    }

    /// `X̊`: per-vehicle MLP over the flattened history, positions taken
    /// relative to each vehicle's last sample, plus that sample's position.
    pub fn embed_history(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history: &[Vec<KinematicState>],
    ) -> Result<Var> {
        let rows = history
            .iter()
            .map(|h| {
                if h.len() != self.t_p {
                    return Err(ModelError::WrongHistoryLength {
                        expected: self.t_p,
                        got: h.len(),
                    });
                }
                let last = h[self.t_p - 1];
                let mut row = Vec::with_capacity(self.t_p * 4 + 2);
                for s in h {
                    let rel = KinematicState::new(s.x_m - last.x_m, s.y_m - last.y_m, s.vx_mps, s.vy_mps);
                    let a = rel.to_array();
                    row.extend((0..4).map(|i| a[i] * STATE_SCALE[i] + STATE_SHIFT[i]));
                }
                row.push(last.x_m * STATE_SCALE[0]);
                row.push(last.y_m * STATE_SCALE[1]);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = tape.constant(Tensor::from_rows(&rows));
        Ok(self.embed.forward(tape, store, x)?)
    }

    fn split_gaussian(&self, tape: &mut Tape, out: Var) -> Result<GaussianLatent> {
        let mean = tape.slice_cols(out, 0, self.z_dim)?;
        let lv = tape.slice_cols(out, self.z_dim, 2 * self.z_dim)?;
        let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(GaussianLatent { mean, log_var })
    }

    /// `p(z | ctx)`.
    pub fn prior(&self, tape: &mut Tape, store: &ParamStore, ctx: Var) -> Result<GaussianLatent> {
        let out = self.prior_net.forward(tape, store, ctx)?;
        self.split_gaussian(tape, out)
    }

    /// `q(z | ctx, X^{t+1})`; `transition` holds scaled `(X^{t+1} − X^t)/Δt`.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: Var,
        transition: Var,
    ) -> Result<GaussianLatent> {
        let x = tape.concat_cols(&[ctx, transition])?;
        let out = self.posterior_net.forward(tape, store, x)?;
        self.split_gaussian(tape, out)
    }

    /// Decodes `[φ, ω, δ, a]`: `φ = φ_ref + Δφ`, `δ` squashed by
    /// `steer_limit·tanh`, `a` clamped to `±accel_limit`.
    pub fn generate_control(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: Var,
        z: Var,
        phi_ref: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[ctx, z])?;
        let raw = self.generator.forward(tape, store, x)?;
        let r0 = tape.col(raw, 0)?;
        let r1 = tape.col(raw, 1)?;
        let r2 = tape.col(raw, 2)?;
        let r3 = tape.col(raw, 3)?;
        let dphi = tape.scale(r0, DPHI_SCALE);
        let phi = tape.add(phi_ref, dphi)?;
        let omega = tape.scale(r1, OMEGA_SCALE);
        let steer = tape.tanh(r2);
        let steer = tape.scale(steer, self.limits.steer_limit);
        let accel = tape.scale(r3, ACCEL_SCALE);
        let accel = tape.clamp(accel, -self.limits.accel_limit, self.limits.accel_limit);
        Ok(tape.concat_cols(&[phi, omega, steer, accel])?)
    }

    fn transition_features(&self, from: &[KinematicState], to: &[KinematicState]) -> Tensor {
        let rows: Vec<Vec<f64>> = from
            .iter()
            .zip(to)
            .map(|(a, b)| {
                let (a, b) = (a.to_array(), b.to_array());
                (0..4)
                    .map(|i| (b[i] - a[i]) / (self.dt * RATE_SCALE[i]))
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Runs the generation loop for all vehicles. `history` and `heading0`
    /// are in the target frame.
    #[allow(clippy::too_many_arguments)]
    pub fn iterative_generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history: &[Vec<KinematicState>],
        heading0: &[f64],
        attrs: &VehicleAttributes,
        mode: GenerationMode<'_>,
        mut latents: LatentSource<'_>,
    ) -> Result<DynPass> {
        let n = history.len();
        if heading0.len() != n {
            return Err(ModelError::LengthMismatch(format!(
                "{} headings for {n} vehicles",
                heading0.len()
            )));
        }
        if let GenerationMode::Posterior { teacher } = &mode {
            if teacher.len() != n || teacher.iter().any(|t| t.len() < self.t_s) {
                return Err(ModelError::LengthMismatch(
                    "teacher states must cover t_s steps for every vehicle".into(),
                ));
            }
        }
        if let LatentSource::Fixed(zs) = &latents {
            if zs.len() != self.t_s {
                return Err(ModelError::LengthMismatch(format!(
                    "{} fixed latents for {} steps",
                    zs.len(),
                    self.t_s
                )));
            }
        }
        let x_ring = self.embed_history(tape, store, history)?;
        let last: Vec<KinematicState> = history.iter().map(|h| h[self.t_p - 1]).collect();
        let last_pad = Tensor::from_rows(
            &last
                .iter()
                .map(|s| vec![s.x_m, s.y_m, 0.0, 0.0])
                .collect::<Vec<_>>(),
        );
        let last_pad = tape.constant(last_pad);
        let scale = row_const(tape, &STATE_SCALE);
        let shift = row_const(tape, &STATE_SHIFT);
        let h0 = tape.constant(Tensor::column(heading0));
        let h0_pad = tape.constant(Tensor::from_rows(
            &heading0.iter().map(|&h| vec![h, 0.0, 0.0, 0.0]).collect::<Vec<_>>(),
        ));
        let ctrl_scale = row_const(tape, &CONTROL_SCALE);

        let state_features = |tape: &mut Tape, s: Var| -> Result<Var> {
            let rel = tape.sub(s, last_pad)?;
            let rel = tape.mul(rel, scale)?;
            Ok(tape.add(rel, shift)?)
        };

        let mut state_vals: Vec<KinematicState> = last.clone();
        let mut state = tape.constant(crate::dynamics::states_tensor(&last));
        let mut phi_ref = h0;
        let mut phi_prev = h0;
        let mut pass = DynPass {
            states: Vec::with_capacity(self.t_s),
            controls: Vec::with_capacity(self.t_s),
            priors: Vec::with_capacity(self.t_s),
            posteriors: Vec::new(),
            latents: Vec::with_capacity(self.t_s),
            dyn_features: x_ring,
        };
        for t in 0..self.t_s {
            let ctx = if t == 0 {
                x_ring
            } else {
                let sf = state_features(tape, state)?;
                let dphi = tape.sub(phi_prev, h0)?;
                let dphi = tape.scale(dphi, CONTROL_SCALE[0]);
                let inp = tape.concat_cols(&[sf, dphi])?;
                let enc = self.step_enc.forward(tape, store, inp)?;
                tape.add(x_ring, enc)?
            };
            let prior = self.prior(tape, store, ctx)?;
            pass.priors.push(prior);
            let q = match &mode {
                GenerationMode::Prior => prior,
                GenerationMode::Posterior { teacher } => {
                    let next: Vec<KinematicState> = teacher.iter().map(|tr| tr[t]).collect();
                    let feat = tape.constant(self.transition_features(&state_vals, &next));
                    let post = self.posterior(tape, store, ctx, feat)?;
                    pass.posteriors.push(post);
                    post
                }
            };
            let z = match &mut latents {
                LatentSource::Mean => q.mean,
                LatentSource::Sample(rng) => {
                    let eps: Vec<f64> = (0..n * self.z_dim)
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    let eps = tape.constant(Tensor::matrix(n, self.z_dim, eps));
                    let half = tape.scale(q.log_var, 0.5);
                    let std = tape.exp(half);
                    let noise = tape.mul(std, eps)?;
                    tape.add(q.mean, noise)?
                }
                LatentSource::Fixed(zs) => tape.constant(zs[t].clone()),
            };
            pass.latents.push(tape.value(z).clone());
            let c = self.generate_control(tape, store, ctx, z, phi_ref)?;
            let next = discrete_step_tape(tape, state, c, attrs, self.dt, self.limits.v_min_floor)?;
            pass.states.push(next);
            pass.controls.push(c);
            let phi = tape.col(c, 0)?;
            let omega = tape.col(c, 1)?;
            let turn = tape.scale(omega, self.dt);
            phi_ref = tape.add(phi, turn)?;
            phi_prev = phi;
            match &mode {
                GenerationMode::Prior => {
                    state = next;
                }
                GenerationMode::Posterior { teacher } => {
                    state_vals = teacher.iter().map(|tr| tr[t]).collect();
                    state = tape.constant(crate::dynamics::states_tensor(&state_vals));
                }
            }
        }

        let mut parts = Vec::with_capacity(2 * self.t_s);
        for t in 0..self.t_s {
            parts.push(state_features(tape, pass.states[t])?);
            let c = tape.sub(pass.controls[t], h0_pad)?;
            parts.push(tape.mul(c, ctrl_scale)?);
        }
        let flat = tape.concat_cols(&parts)?;
        pass.dyn_features = self.dyn_feat.forward(tape, store, flat)?;
        Ok(pass)
    }
}

/// `KL(N(μ_q, e^{lv_q}) ‖ N(μ_p, e^{lv_p}))` for diagonal Gaussians.
pub fn gaussian_kl(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(lv_q)
        .zip(mu_p.iter().zip(lv_p))
        .map(|((mq, lq), (mp, lp))| {
            0.5 * (lp - lq + ((lq.exp() + (mq - mp).powi(2)) / lp.exp()) - 1.0)
        })
        .sum()
}

fn mask_column(tape: &mut Tape, mask: &[bool]) -> (Var, f64) {
    let m: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
    let count = m.iter().sum();
    (tape.constant(Tensor::column(&m)), count)
}

/// `(1/t_s)·Σ_t KL(q_t ‖ p_t)`, summed over latent dims and averaged over
/// vehicles with `mask` set.
pub fn kl_loss(
    tape: &mut Tape,
    posteriors: &[GaussianLatent],
    priors: &[GaussianLatent],
    mask: &[bool],
) -> Result<Var> {
    if posteriors.len() != priors.len() || priors.is_empty() {
        return Err(ModelError::LengthMismatch(format!(
            "{} posteriors vs {} priors",
            posteriors.len(),
            priors.len()
        )));
    }
    let (m, count) = mask_column(tape, mask);
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(priors.len());
    for (q, p) in posteriors.iter().zip(priors) {
        let var_q = tape.exp(q.log_var);
        let diff = tape.sub(q.mean, p.mean)?;
        let diff2 = tape.square(diff);
        let num = tape.add(var_q, diff2)?;
        let neg_lv_p = tape.neg(p.log_var);
        let inv_var_p = tape.exp(neg_lv_p);
        let ratio = tape.mul(num, inv_var_p)?;
        let lv = tape.sub(p.log_var, q.log_var)?;
        let e = tape.add(lv, ratio)?;
        let e = tape.add_scalar(e, -1.0);
        let e = tape.scale(e, 0.5);
        let per_vehicle = tape.sum_cols(e);
        let masked = tape.mul(per_vehicle, m)?;
        terms.push(tape.sum(masked));
    }
    let all = tape.concat_cols(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / (count * priors.len() as f64)))
}

/// Mean squared norm of `X^{t+1} − Υ(X^t, Ĉ^t)`: `teacher[i][t]` is the
/// true state reached by vehicle `i` after step `t`, `predicted[t]` the
/// one-step reconstruction `[n, 4]`. Only vehicles with `mask` set count.
pub fn dynamics_informed_loss_tape(
    tape: &mut Tape,
    teacher: &[Vec<KinematicState>],
    predicted: &[Var],
    mask: &[bool],
) -> Result<Var> {
    if predicted.is_empty() || teacher.iter().any(|t| t.len() < predicted.len()) {
        return Err(ModelError::LengthMismatch(
            "teacher shorter than reconstruction".into(),
        ));
    }
    let (m, count) = mask_column(tape, mask);
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(predicted.len());
    for (t, &p) in predicted.iter().enumerate() {
        let truth: Vec<KinematicState> = teacher.iter().map(|tr| tr[t]).collect();
        let truth = tape.constant(crate::dynamics::states_tensor(&truth));
        let r = tape.sub(truth, p)?;
        let r2 = tape.square(r);
        let per_vehicle = tape.sum_cols(r2);
        let masked = tape.mul(per_vehicle, m)?;
        terms.push(tape.sum(masked));
    }
    let all = tape.concat_cols(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / (count * predicted.len() as f64)))
}

/// Scalar form of the dynamics-informed loss for one vehicle.
pub fn dynamics_informed_loss(
    true_states: &[KinematicState],
    controls: &[ControlInput],
    attrs: &VehicleAttributes,
    spec: StepSpec,
) -> Result<f64> {
    if true_states.len() != controls.len() + 1 || controls.is_empty() {
        return Err(ModelError::LengthMismatch(format!(
            "{} states for {} controls",
            true_states.len(),
            controls.len()
        )));
    }
    let mut total = 0.0;
    for (w, c) in true_states.windows(2).zip(controls) {
        let rec = discrete_step(&w[0], c, attrs, spec)?.to_array();
        let truth = w[1].to_array();
        total += (0..4).map(|i| (truth[i] - rec[i]).powi(2)).sum::<f64>();
    }
    Ok(total / controls.len() as f64)
}
