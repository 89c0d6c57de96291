//! Multi-modal decoder, maneuver labels and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::config::LossWeights;
use crate::data::Mode;
use crate::dynamics::KinematicState;
use crate::error::ModelError;
use crate::features::HEADING_WINDOW;
use crate::numkernel::{Activation, Glu, Linear, Mlp, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// Lateral threshold for a lane change, half a lane width.
pub const LANE_CHANGE_M: f64 = 1.75;
/// Mean longitudinal acceleration below which a future counts as braking.
pub const BRAKING_MPS2: f64 = -0.5;
pub const NUM_MANEUVERS: usize = 6;
const SIGMA_FLOOR: f64 = 1e-3;
const RHO_LIMIT: f64 = 0.99;
/// Scale of the raw head output added to the anchor, per axis.
const OFFSET_SCALE: [f64; 2] = [4.0, 2.0];
const DISPLACEMENT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lateral {
    Keep,
    LeftChange,
    RightChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Longitudinal {
    Normal,
    Braking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Maneuver {
    pub lateral: Lateral,
    pub longitudinal: Longitudinal,
}

impl Maneuver {
    pub fn index(self) -> usize {
        let lat = match self.lateral {
            Lateral::Keep => 0,
            Lateral::LeftChange => 1,
            Lateral::RightChange => 2,
        };
        lat * 2 + usize::from(self.longitudinal == Longitudinal::Braking)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        let lateral = match i / 2 {
            0 => Lateral::Keep,
            1 => Lateral::LeftChange,
            2 => Lateral::RightChange,
            _ => return None,
        };
        let longitudinal = if i % 2 == 1 {
            Longitudinal::Braking
        } else {
            Longitudinal::Normal
        };
        Some(Self { lateral, longitudinal })
    }
}

/// Labels a future. The lateral axis is the left normal of the direction of
/// travel over the first `HEADING_WINDOW` steps of history, which usually
/// predates a lane change already under way at the last sample.
pub fn label_maneuver(history: &[KinematicState], future: &[KinematicState], t_f_s: f64) -> Maneuver {
    let keep = Maneuver {
        lateral: Lateral::Keep,
        longitudinal: Longitudinal::Normal,
    };
    let (Some(first), Some(last), Some(end)) = (history.first(), history.last(), future.last()) else {
        return keep;
    };
    let early = history[HEADING_WINDOW.min(history.len() - 1)];
    let (cx, cy) = (early.x_m - first.x_m, early.y_m - first.y_m);
    let len = cx.hypot(cy);
    let (ux, uy) = if len > 1e-6 { (cx / len, cy / len) } else { (1.0, 0.0) };
    let dy = ux * (end.y_m - last.y_m) - uy * (end.x_m - last.x_m);
    let lateral = if dy > LANE_CHANGE_M {
        Lateral::LeftChange
    } else if dy < -LANE_CHANGE_M {
        Lateral::RightChange
    } else {
        Lateral::Keep
    };
    let longitudinal = if (end.vx_mps - last.vx_mps) / t_f_s < BRAKING_MPS2 {
        Longitudinal::Braking
    } else {
        Longitudinal::Normal
    };
    Maneuver { lateral, longitudinal }
}

/// `K` candidate trajectories with their probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub maneuver_probs: Vec<f64>,
}

impl PredictionSet {
    pub fn most_probable(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.maneuver_probs.iter().enumerate() {
            if p > self.maneuver_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Candidate indices by descending probability, ties by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.maneuver_probs.len()).collect();
        idx.sort_by(|&a, &b| {
            self.maneuver_probs[b]
                .total_cmp(&self.maneuver_probs[a])
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Per-head output handles, all `[t_f, 1]` except `mean` (`[t_f, 2]`).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub mean: Var,
    pub sigma_x: Var,
    pub sigma_y: Var,
    pub rho: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderPass {
    pub heads: Vec<HeadOutput>,
    /// `[1, K]`.
    pub log_probs: Var,
}

impl DecoderPass {
    pub fn prediction(&self, tape: &Tape) -> PredictionSet {
        let trajectories = self
            .heads
            .iter()
            .map(|h| {
                let m = tape.value(h.mean);
                (0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1)]).collect()
            })
            .collect();
        let lp = tape.value(self.log_probs).data();
        let raw: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let total: f64 = raw.iter().sum();
        PredictionSet {
            trajectories,
            maneuver_probs: raw.iter().map(|p| p / total).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub interaction_mlp: Mlp,
    pub dynamics_mlp: Mlp,
    pub glu: Glu,
    pub heads: Vec<Mlp>,
    pub prob: Linear,
    pub t_f: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, t_f: usize) -> Result<Self> {
        let token = 2 * d;
        let heads = (0..NUM_MANEUVERS)
            .map(|k| {
                Mlp::new(
                    store,
                    rng,
                    &format!("decoder.head{k}"),
                    &[token, token, t_f * 5],
                    Activation::Gelu,
                    Activation::Identity,
                )
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            interaction_mlp: Mlp::new(store, rng, "decoder.fi", &[d, d], Activation::Identity, Activation::Gelu)?,
            dynamics_mlp: Mlp::new(store, rng, "decoder.fd", &[d, d], Activation::Identity, Activation::Gelu)?,
            glu: Glu::new(store, rng, "decoder.glu", token, token)?,
            heads,
            prob: Linear::new(store, rng, "decoder.prob", token, NUM_MANEUVERS)?,
            t_f,
        })
    }

    /// Decodes from the target rows of `F_i` and `F_d`. `anchor` is the
    /// constant-velocity extrapolation `[t_f, 2]`; heads predict offsets.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_i: Var,
        f_d: Var,
        anchor: &[[f64; 2]],
    ) -> Result<DecoderPass> {
        if anchor.len() != self.t_f {
            return Err(ModelError::LengthMismatch(format!(
                "anchor has {} steps, expected {}",
                anchor.len(),
                self.t_f
            )));
        }
        let fi = tape.slice_rows(f_i, 0, 1)?;
        let fd = tape.slice_rows(f_d, 0, 1)?;
        let a = self.interaction_mlp.forward(tape, store, fi)?;
        let b = self.dynamics_mlp.forward(tape, store, fd)?;
        let token = tape.concat_cols(&[a, b])?;
        let token = self.glu.forward(tape, store, token)?;
        let anchor = tape.constant(Tensor::from_rows(
            &anchor.iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
        ));
        let offset_scale = tape.constant(Tensor::row(&OFFSET_SCALE));
        let heads = self
            .heads
            .iter()
            .map(|h| {
                let raw = h.forward(tape, store, token)?;
                let raw = tape.reshape(raw, self.t_f, 5)?;
                let off = tape.slice_cols(raw, 0, 2)?;
                let off = tape.mul(off, offset_scale)?;
                let mean = tape.add(anchor, off)?;
                let sx = tape.col(raw, 2)?;
                let sx = tape.softplus(sx);
                let sigma_x = tape.add_scalar(sx, SIGMA_FLOOR);
                let sy = tape.col(raw, 3)?;
                let sy = tape.softplus(sy);
                let sigma_y = tape.add_scalar(sy, SIGMA_FLOOR);
                let r = tape.col(raw, 4)?;
                let r = tape.tanh(r);
                let rho = tape.scale(r, RHO_LIMIT);
                Ok(HeadOutput {
                    mean,
                    sigma_x,
                    sigma_y,
                    rho,
                })
            })
            .collect::<Result<_>>()?;
        let logits = self.prob.forward(tape, store, token)?;
        Ok(DecoderPass {
            heads,
            log_probs: tape.log_softmax_rows(logits),
        })
    }
}

/// `−log p(gt)`.
pub fn cross_entropy(tape: &mut Tape, log_probs: Var, gt: Maneuver) -> Result<Var> {
    let lp = tape.col(log_probs, gt.index())?;
    let lp = tape.sum(lp);
    Ok(tape.neg(lp))
}

fn future_tensor(gt: &[[f64; 2]], mask: &[bool]) -> Result<(Tensor, Tensor, f64)> {
    if gt.len() != mask.len() {
        return Err(ModelError::LengthMismatch("future mask".into()));
    }
    let pos = Tensor::from_rows(&gt.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
    let m: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
    let count = m.iter().sum::<f64>();
    Ok((pos, Tensor::column(&m), count))
}

/// Masked mean over steps of the squared displacement `dx² + dy²`.
pub fn mse_loss(tape: &mut Tape, mean: Var, gt: &[[f64; 2]], mask: &[bool]) -> Result<Var> {
    let (pos, m, count) = future_tensor(gt, mask)?;
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pos = tape.constant(pos);
    let m = tape.constant(m);
    let d = tape.sub(mean, pos)?;
    let d2 = tape.square(d);
    let per_step = tape.sum_cols(d2);
    let masked = tape.mul(per_step, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / count))
}

/// Masked mean over steps of the bivariate Gaussian negative log-likelihood.
pub fn bivariate_nll(tape: &mut Tape, head: &HeadOutput, gt: &[[f64; 2]], mask: &[bool]) -> Result<Var> {
    let (pos, m, count) = future_tensor(gt, mask)?;
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pos = tape.constant(pos);
    let m = tape.constant(m);
    let d = tape.sub(pos, head.mean)?;
    let dx = tape.col(d, 0)?;
    let dy = tape.col(d, 1)?;
    let zx = tape.div(dx, head.sigma_x)?;
    let zy = tape.div(dy, head.sigma_y)?;
    let zx2 = tape.square(zx);
    let zy2 = tape.square(zy);
    let zxy = tape.mul(zx, zy)?;
    let rzxy = tape.mul(head.rho, zxy)?;
    let rzxy = tape.scale(rzxy, -2.0);
    let q = tape.add(zx2, zy2)?;
    let q = tape.add(q, rzxy)?;
    let rho2 = tape.square(head.rho);
    let one_minus = tape.neg(rho2);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let quad = tape.div(q, one_minus)?;
    let quad = tape.scale(quad, 0.5);
    let ln_sx = tape.ln(head.sigma_x);
    let ln_sy = tape.ln(head.sigma_y);
    let ln_om = tape.ln(one_minus);
    let ln_om = tape.scale(ln_om, 0.5);
    let nll = tape.add(ln_sx, ln_sy)?;
    let nll = tape.add(nll, ln_om)?;
    let nll = tape.add(nll, quad)?;
    let nll = tape.add_scalar(nll, (2.0 * std::f64::consts::PI).ln());
    let masked = tape.mul(nll, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / count))
}

/// Per-step Euclidean distances `[t_f, 1]`, with a small floor inside the root.
fn distances(tape: &mut Tape, mean: Var, pos: Var) -> Result<Var> {
    let d = tape.sub(mean, pos)?;
    let d2 = tape.square(d);
    let s = tape.sum_cols(d2);
    let s = tape.add_scalar(s, DISPLACEMENT_EPS);
    Ok(tape.sqrt(s))
}

/// `min_k ADE_k + min_k FDE_k` over all heads; the minimum picks a head by
/// value and differentiates through that head only.
pub fn min_ade_fde_loss(tape: &mut Tape, heads: &[HeadOutput], gt: &[[f64; 2]], mask: &[bool]) -> Result<Var> {
    let (pos, m, count) = future_tensor(gt, mask)?;
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let last = mask
        .iter()
        .rposition(|&b| b)
        .expect("count > 0");
    let pos = tape.constant(pos);
    let m = tape.constant(m);
    let mut best_ade: Option<Var> = None;
    let mut best_fde: Option<Var> = None;
    for h in heads {
        let dist = distances(tape, h.mean, pos)?;
        let masked = tape.mul(dist, m)?;
        let s = tape.sum(masked);
        let ade = tape.scale(s, 1.0 / count);
        let fde = tape.slice_rows(dist, last, last + 1)?;
        let fde = tape.sum(fde);
        if best_ade.is_none_or(|b| tape.scalar(ade) < tape.scalar(b)) {
            best_ade = Some(ade);
        }
        if best_fde.is_none_or(|b| tape.scalar(fde) < tape.scalar(b)) {
            best_fde = Some(fde);
        }
    }
    let (a, f) = (
        best_ade.ok_or_else(|| ModelError::LengthMismatch("no heads".into()))?,
        best_fde.expect("same loop"),
    );
    Ok(tape.add(a, f)?)
}

/// Accuracy loss for the dataset mode.
pub fn accuracy_loss(
    tape: &mut Tape,
    pass: &DecoderPass,
    gt: &[[f64; 2]],
    mask: &[bool],
    maneuver: Maneuver,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Highway => {
            let head = pass.heads[maneuver.index()];
            let mse = mse_loss(tape, head.mean, gt, mask)?;
            let nll = bivariate_nll(tape, &head, gt, mask)?;
            Ok(tape.add(mse, nll)?)
        }
        Mode::Nuscenes => min_ade_fde_loss(tape, &pass.heads, gt, mask),
    }
}

/// Accuracy loss for a mode given by name.
pub fn accuracy_loss_named(
    tape: &mut Tape,
    pass: &DecoderPass,
    gt: &[[f64; 2]],
    mask: &[bool],
    maneuver: Maneuver,
    mode: &str,
) -> Result<Var> {
    let mode: Mode = mode
        .parse()
        .map_err(|_| ModelError::ModeUnknown(mode.to_string()))?;
    accuracy_loss(tape, pass, gt, mask, maneuver, mode)
}

/// The four loss terms of one scene.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub kl: Var,
    pub di: Var,
    pub ce: Var,
    pub ac: Var,
}

impl LossTerms {
    /// `w_kl·L_KL + w_di·L_DI + w_ce·L_CE + w_ac·L_AC`.
    pub fn total(&self, tape: &mut Tape, w: &LossWeights) -> Result<Var> {
        let parts = [
            tape.scale(self.kl, w.w_kl),
            tape.scale(self.di, w.w_di),
            tape.scale(self.ce, w.w_ce),
            tape.scale(self.ac, w.w_ac),
        ];
        let all = tape.concat_cols(&parts)?;
        Ok(tape.sum(all))
    }

    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        [
            tape.scalar(self.kl),
            tape.scalar(self.di),
            tape.scalar(self.ce),
            tape.scalar(self.ac),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(x: f64, y: f64, vx: f64) -> KinematicState {
        KinematicState::new(x, y, vx, 0.0)
    }

    fn decoder(store: &mut ParamStore) -> Decoder {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Decoder::new(store, &mut rng, 8, 25).unwrap()
    }

    fn anchor() -> Vec<[f64; 2]> {
        (1..=25).map(|k| [2.0 * k as f64, 0.0]).collect()
    }

    #[test]
    fn maneuver_index_roundtrip() {
        for i in 0..6 {
            assert_eq!(Maneuver::from_index(i).unwrap().index(), i);
        }
        assert!(Maneuver::from_index(6).is_none());
    }

    #[test]
    fn labels_and_threshold_ties() {
        let hist = [st(-20.0, 0.0, 20.0), st(0.0, 0.0, 20.0)];
        let m = label_maneuver(&hist, &[st(100.0, 0.0, 20.0)], 5.0);
        assert_eq!(m.index(), 0);
        let m = label_maneuver(&hist, &[st(100.0, -3.0, 20.0)], 5.0);
        assert_eq!(m.lateral, Lateral::RightChange);
        let m = label_maneuver(&hist, &[st(100.0, 3.0, 20.0)], 5.0);
        assert_eq!(m.lateral, Lateral::LeftChange);
        let m = label_maneuver(&hist, &[st(100.0, 1.75, 20.0)], 5.0);
        assert_eq!(m.lateral, Lateral::Keep);
        let m = label_maneuver(&hist, &[st(100.0, -1.75, 20.0)], 5.0);
        assert_eq!(m.lateral, Lateral::Keep);
        let m = label_maneuver(&hist, &[st(80.0, 0.0, 15.0)], 5.0);
        assert_eq!(m.longitudinal, Longitudinal::Braking);
        let m = label_maneuver(&hist, &[st(80.0, 0.0, 17.5)], 5.0);
        assert_eq!(m.longitudinal, Longitudinal::Normal);
        // the chord sets the lateral axis: driving along +y, +x is to the right
        let up = [st(0.0, -20.0, 20.0), st(0.0, 0.0, 20.0)];
        let m = label_maneuver(&up, &[st(3.0, 100.0, 20.0)], 5.0);
        assert_eq!(m.lateral, Lateral::RightChange);
    }

    #[test]
    fn decode_shapes_and_probabilities() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let mut t = Tape::new();
        let fi = t.constant(Tensor::filled(3, 8, 0.2));
        let fd = t.constant(Tensor::filled(3, 8, -0.1));
        let pass = dec.forward(&mut t, &store, fi, fd, &anchor()).unwrap();
        let p = pass.prediction(&t);
        assert_eq!(p.trajectories.len(), 6);
        assert!(p.trajectories.iter().all(|tr| tr.len() == 25));
        assert!((p.maneuver_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.maneuver_probs.iter().all(|&v| v >= 0.0));
        assert!(dec.forward(&mut t, &store, fi, fd, &anchor()[..3]).is_err());
    }

    #[test]
    fn uniform_cross_entropy_is_ln6() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::row(&[0.3; 6]));
        let lp = t.log_softmax_rows(logits);
        let ce = cross_entropy(&mut t, lp, Maneuver::from_index(4).unwrap()).unwrap();
        assert!((t.scalar(ce) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_zero_mse_and_certain_ce() {
        let mut t = Tape::new();
        let gt = anchor();
        let mean = t.constant(Tensor::from_rows(&gt.iter().map(|p| p.to_vec()).collect::<Vec<_>>()));
        let mse = mse_loss(&mut t, mean, &gt, &[true; 25]).unwrap();
        assert_eq!(t.scalar(mse), 0.0);
        let logits = t.constant(Tensor::row(&[0.0, 0.0, 800.0, 0.0, 0.0, 0.0]));
        let lp = t.log_softmax_rows(logits);
        let ce = cross_entropy(&mut t, lp, Maneuver::from_index(2).unwrap()).unwrap();
        assert_eq!(t.scalar(ce), 0.0);
    }

    #[test]
    fn nll_matches_closed_form() {
        let mut t = Tape::new();
        let (sx, sy, rho) = (1.5, 0.5, 0.3);
        let head = HeadOutput {
            mean: t.constant(Tensor::row(&[1.0, 2.0])),
            sigma_x: t.constant(Tensor::scalar(sx)),
            sigma_y: t.constant(Tensor::scalar(sy)),
            rho: t.constant(Tensor::scalar(rho)),
        };
        let nll = bivariate_nll(&mut t, &head, &[[2.0, 1.5]], &[true]).unwrap();
        let (zx, zy) = (1.0 / sx, -0.5 / sy);
        let om: f64 = 1.0 - rho * rho;
        let want = (2.0 * std::f64::consts::PI * sx * sy * om.sqrt()).ln()
            + (zx * zx + zy * zy - 2.0 * rho * zx * zy) / (2.0 * om);
        assert!((t.scalar(nll) - want).abs() < 1e-12);
    }

    #[test]
    fn min_ade_fde_picks_best_head() {
        let mut t = Tape::new();
        let gt: Vec<[f64; 2]> = (0..4).map(|k| [k as f64, 0.0]).collect();
        let mk = |t: &mut Tape, dy: f64| HeadOutput {
            mean: t.constant(Tensor::from_rows(&gt.iter().map(|p| vec![p[0], p[1] + dy]).collect::<Vec<_>>())),
            sigma_x: t.constant(Tensor::filled(4, 1, 1.0)),
            sigma_y: t.constant(Tensor::filled(4, 1, 1.0)),
            rho: t.constant(Tensor::zeros(4, 1)),
        };
        let heads = [mk(&mut t, 3.0), mk(&mut t, 1.0), mk(&mut t, 2.0)];
        let l = min_ade_fde_loss(&mut t, &heads, &gt, &[true; 4]).unwrap();
        assert!((t.scalar(l) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn weights_select_terms_and_mode_names() {
        let mut t = Tape::new();
        let terms = LossTerms {
            kl: t.constant(Tensor::scalar(3.0)),
            di: t.constant(Tensor::scalar(5.0)),
            ce: t.constant(Tensor::scalar(0.25)),
            ac: t.constant(Tensor::scalar(7.0)),
        };
        let only_ce = LossWeights {
            w_kl: 0.0,
            w_di: 0.0,
            w_ce: 1.0,
            w_ac: 0.0,
        };
        let total = terms.total(&mut t, &only_ce).unwrap();
        assert_eq!(t.scalar(total), 0.25);
        let total = terms.total(&mut t, &LossWeights::default()).unwrap();
        assert_eq!(t.scalar(total), 1.5 + 5.0 + 0.25 + 7.0);

        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let fi = t.constant(Tensor::filled(1, 8, 0.2));
        let pass = dec.forward(&mut t, &store, fi, fi, &anchor()).unwrap();
        let man = Maneuver::from_index(0).unwrap();
        assert!(matches!(
            accuracy_loss_named(&mut t, &pass, &anchor(), &[true; 25], man, "argoverse"),
            Err(ModelError::ModeUnknown(_))
        ));
        assert!(accuracy_loss_named(&mut t, &pass, &anchor(), &[true; 25], man, "nuscenes").is_ok());
    }

    #[test]
    fn ranked_orders_by_probability() {
        let p = PredictionSet {
            trajectories: vec![vec![]; 3],
            maneuver_probs: vec![0.2, 0.5, 0.3],
        };
        assert_eq!(p.ranked(), vec![1, 2, 0]);
        assert_eq!(p.most_probable(), 1);
    }
}
