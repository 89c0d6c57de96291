//! Interaction learning stage: temporal encoder, cross-modal fusion and the
//! spatio-temporal encoder. Row 0 is always the target vehicle.

use rand::Rng;

use crate::data::config::ModelConfig;
use crate::dynamics::KinematicState;
use crate::error::ModelError;
use crate::features::{STATE_SCALE, STATE_SHIFT};
use crate::numkernel::{
    Activation, AttentionHead, EncoderBlock, Glu, GraphConv, Gru, LayerNorm, Linear, Mlp, ParamStore,
    SelectiveScan, Tape, Tensor, Var,
};

type Result<T> = std::result::Result<T, ModelError>;

/// `sigmoid(FC(scan(in_proj(LN(X_hist ‖ X_short)))))`, one output per frame.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub scan: SelectiveScan,
    pub fc: Linear,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: LayerNorm::new(store, "temporal.ln", 4)?,
            in_proj: Linear::new(store, rng, "temporal.in", 4, d)?,
            scan: SelectiveScan::new(store, rng, "temporal.scan", d, cfg.scan_state)?,
            fc: Linear::new(store, rng, "temporal.fc", d, d)?,
        })
    }

    /// `frames[t]` is `[n, 4]` of normalized states; returns `F_v` per frame.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: &[Var]) -> Result<Vec<Var>> {
        let mut xs = Vec::with_capacity(frames.len());
        for &f in frames {
            let x = self.norm.forward(tape, store, f)?;
            xs.push(self.in_proj.forward(tape, store, x)?);
        }
        let ys = self.scan.forward(tape, store, &xs)?;
        ys.into_iter()
            .map(|y| {
                let y = self.fc.forward(tape, store, y)?;
                Ok(tape.sigmoid(y))
            })
            .collect()
    }
}

/// Three disjoint GLU + GELU embeddings, one per modality.
#[derive(Clone, Debug)]
pub struct SpatialEmbedding {
    pub vehicle: Glu,
    pub map: Glu,
    pub dynamics: Glu,
}

fn glu_gelu(glu: &Glu, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let y = glu.forward(tape, store, x)?;
    Ok(tape.gelu(y))
}

impl SpatialEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Result<Self> {
        Ok(Self {
            vehicle: Glu::new(store, rng, "embed.v", d, d)?,
            map: Glu::new(store, rng, "embed.h", d, d)?,
            dynamics: Glu::new(store, rng, "embed.d", d, d)?,
        })
    }

    pub fn vehicle(&self, tape: &mut Tape, store: &ParamStore, frames: &[Var]) -> Result<Vec<Var>> {
        frames
            .iter()
            .map(|&f| glu_gelu(&self.vehicle, tape, store, f))
            .collect()
    }

    pub fn map(&self, tape: &mut Tape, store: &ParamStore, f_h: Var) -> Result<Var> {
        glu_gelu(&self.map, tape, store, f_h)
    }

    pub fn dynamics(&self, tape: &mut Tape, store: &ParamStore, f_d: Var) -> Result<Var> {
        glu_gelu(&self.dynamics, tape, store, f_d)
    }
}

/// One channel's projections `W^Q, W^K, W^V` and its attention head.
#[derive(Clone, Debug)]
pub struct Channel {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub head: AttentionHead,
}

impl Channel {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, score_hidden: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::without_bias(store, rng, &format!("{name}.wq"), d, d)?,
            wk: Linear::without_bias(store, rng, &format!("{name}.wk"), d, d)?,
            wv: Linear::without_bias(store, rng, &format!("{name}.wv"), d, d)?,
            head: AttentionHead::new(store, rng, &format!("{name}.head"), score_hidden, d)?,
        })
    }

    fn attend(&self, tape: &mut Tape, store: &ParamStore, q_in: Var, k_in: Var, v_in: Var, d: usize) -> Result<Var> {
        let q = self.wq.forward(tape, store, q_in)?;
        let k = self.wk.forward(tape, store, k_in)?;
        let v = self.wv.forward(tape, store, v_in)?;
        Ok(self.head.forward(tape, store, q, k, v, d, None)?)
    }
}

/// One cross-modal attention block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub mlp_v: Mlp,
    pub mlp_h: Mlp,
    pub mlp_t: Mlp,
    pub mlp_s: Mlp,
    pub target: Channel,
    pub surround: Channel,
    pub norm: LayerNorm,
    pub out: Mlp,
}

fn small_mlp(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Result<Mlp> {
    Ok(Mlp::new(store, rng, name, &[d, d], Activation::Identity, Activation::Gelu)?)
}

impl FusionBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, score_hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp_v: small_mlp(store, rng, &format!("{name}.mlp_v"), d)?,
            mlp_h: small_mlp(store, rng, &format!("{name}.mlp_h"), d)?,
            mlp_t: small_mlp(store, rng, &format!("{name}.mlp_t"), d)?,
            mlp_s: small_mlp(store, rng, &format!("{name}.mlp_s"), d)?,
            target: Channel::new(store, rng, &format!("{name}.target"), d, score_hidden)?,
            surround: Channel::new(store, rng, &format!("{name}.surround"), d, score_hidden)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), d)?,
            out: Mlp::new(
                store,
                rng,
                &format!("{name}.out"),
                &[d, d, d],
                Activation::Gelu,
                Activation::Identity,
            )?,
        })
    }

    /// `H_c = H_t + H_s`. Queries come from every vehicle. The target
    /// channel keys on the target's per-frame map tokens, the surrounding
    /// channel on the time-pooled tokens of the other vehicles.
    pub fn head_sum(&self, tape: &mut Tape, store: &ParamStore, inp: &FusionInput) -> Result<Var> {
        let (n, d) = tape.dims(inp.vehicle_mean);
        let mv = self.mlp_v.forward(tape, store, inp.vehicle_mean)?;
        let q_in = tape.add(mv, inp.dyn_embed)?;

        let d0 = tape.slice_rows(inp.dyn_embed, 0, 1)?;
        let mh = self.mlp_h.forward(tape, store, inp.target_map_frames)?;
        let k_t = tape.add(mh, d0)?;
        let v_t = self.mlp_t.forward(tape, store, inp.target_frames)?;
        let h_t = self.target.attend(tape, store, q_in, k_t, v_t, d)?;
        if n == 1 {
            return Ok(h_t);
        }
        let h_s_rows = tape.slice_rows(inp.map_mean, 1, n)?;
        let mh = self.mlp_h.forward(tape, store, h_s_rows)?;
        let d_s = tape.slice_rows(inp.dyn_embed, 1, n)?;
        let k_s = tape.add(mh, d_s)?;
        let f_s = tape.slice_rows(inp.vehicle_mean, 1, n)?;
        let v_s = self.mlp_s.forward(tape, store, f_s)?;
        let h_s = self.surround.attend(tape, store, q_in, k_s, v_s, d)?;
        Ok(tape.add(h_t, h_s)?)
    }

    /// `MLP(LN(H_c + F̂_h)) + (H_c + F̂_h)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inp: &FusionInput) -> Result<Var> {
        let hc = self.head_sum(tape, store, inp)?;
        let r = tape.add(hc, inp.map_mean)?;
        let x = self.norm.forward(tape, store, r)?;
        let x = self.out.forward(tape, store, x)?;
        Ok(tape.add(x, r)?)
    }
}

/// Embedded tokens entering the fusion blocks.
#[derive(Clone, Copy, Debug)]
pub struct FusionInput {
    /// Time mean of `F̂_v`, `[n, d]`.
    pub vehicle_mean: Var,
    /// `F̂_t` per frame, `[T, d]`.
    pub target_frames: Var,
    /// Time mean of `F̂_h`, `[n, d]`.
    pub map_mean: Var,
    /// Target row of `F̂_h` per frame, `[T, d]`.
    pub target_map_frames: Var,
    /// `F̂_d`, `[n, d]`.
    pub dyn_embed: Var,
}

impl FusionInput {
    pub fn new(tape: &mut Tape, v_hat: &[Var], h_hat: &[Var], dyn_embed: Var) -> Result<Self> {
        let target_rows = |tape: &mut Tape, frames: &[Var]| -> Result<Var> {
            let rows = frames
                .iter()
                .map(|&f| tape.slice_rows(f, 0, 1))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(tape.concat_rows(&rows)?)
        };
        Ok(Self {
            vehicle_mean: time_mean(tape, v_hat)?,
            target_frames: target_rows(tape, v_hat)?,
            map_mean: time_mean(tape, h_hat)?,
            target_map_frames: target_rows(tape, h_hat)?,
            dyn_embed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SpatioTemporalEncoder {
    pub gru: Gru,
    pub gcn1: GraphConv,
    pub gcn2: GraphConv,
    pub merge: Linear,
    pub encoder: EncoderBlock,
}

impl SpatioTemporalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Result<Self> {
        Ok(Self {
            gru: Gru::new(store, rng, "st.gru", d, d, 2)?,
            gcn1: GraphConv::new(store, rng, "st.gcn1", d, d, Activation::Relu)?,
            gcn2: GraphConv::new(store, rng, "st.gcn2", d, d, Activation::Identity)?,
            merge: Linear::new(store, rng, "st.merge", 2 * d, d)?,
            encoder: EncoderBlock::new(store, rng, "st.encoder", d)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_v: &[Var],
        f_c: Var,
        adjacency: &Tensor,
    ) -> Result<Var> {
        let temporal = self.gru.forward(tape, store, f_v)?;
        let g = self.gcn1.forward(tape, store, f_c, adjacency)?;
        let g = self.gcn2.forward(tape, store, g, adjacency)?;
        let x = tape.concat_cols(&[temporal, g])?;
        let x = self.merge.forward(tape, store, x)?;
        Ok(self.encoder.forward(tape, store, x)?)
    }
}

/// Tape handles of one interaction pass.
#[derive(Clone, Debug)]
pub struct InteractionPass {
    /// `F_v` per frame, `[n, d]`.
    pub vehicle_feats: Vec<Var>,
    /// `H_e`.
    pub hidden: Var,
    /// `F_c`.
    pub cross_modal: Var,
    /// `F_i`.
    pub interaction: Var,
}

#[derive(Clone, Debug)]
pub struct InteractionStage {
    pub temporal: TemporalEncoder,
    pub embed: SpatialEmbedding,
    pub map_encoder: Mlp,
    pub blocks: Vec<FusionBlock>,
    pub regression: Mlp,
    pub st: SpatioTemporalEncoder,
    pub d_model: usize,
    pub polyline_points: usize,
}

/// Normalized per-frame state rows `[n, 4]` for the whole sequence.
pub fn state_frames(tape: &mut Tape, history: &[Vec<KinematicState>], short_traj: &[Var]) -> Result<Vec<Var>> {
    let t_p = history.first().map_or(0, Vec::len);
    if history.iter().any(|h| h.len() != t_p) {
        return Err(ModelError::LengthMismatch("ragged history".into()));
    }
    let scale = tape.constant(Tensor::row(&STATE_SCALE));
    let shift = tape.constant(Tensor::row(&STATE_SHIFT));
    let mut frames = Vec::with_capacity(t_p + short_traj.len());
    for t in 0..t_p {
        let rows: Vec<Vec<f64>> = history
            .iter()
            .map(|h| {
                let a = h[t].to_array();
                (0..4).map(|i| a[i] * STATE_SCALE[i] + STATE_SHIFT[i]).collect()
            })
            .collect();
        frames.push(tape.constant(Tensor::from_rows(&rows)));
    }
    for &s in short_traj {
        if tape.dims(s) != (history.len(), 4) {
            return Err(ModelError::LengthMismatch(format!(
                "short trajectory frame {:?} for {} vehicles",
                tape.dims(s),
                history.len()
            )));
        }
        let x = tape.mul(s, scale)?;
        frames.push(tape.add(x, shift)?);
    }
    Ok(frames)
}

fn time_mean(tape: &mut Tape, frames: &[Var]) -> Result<Var> {
    let mut acc = frames[0];
    for &f in &frames[1..] {
        acc = tape.add(acc, f)?;
    }
    Ok(tape.scale(acc, 1.0 / frames.len() as f64))
}

impl InteractionStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let blocks = (0..cfg.num_blocks)
            .map(|i| FusionBlock::new(store, rng, &format!("fusion.{i}"), d, cfg.score_hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            temporal: TemporalEncoder::new(store, rng, cfg)?,
            embed: SpatialEmbedding::new(store, rng, d)?,
            map_encoder: Mlp::new(
                store,
                rng,
                "map.encoder",
                &[cfg.polyline_points * 2, d, d],
                Activation::Gelu,
                Activation::Identity,
            )?,
            blocks,
            regression: Mlp::new(
                store,
                rng,
                "regression",
                &[d, d, d, d, d],
                Activation::Relu,
                Activation::Identity,
            )?,
            st: SpatioTemporalEncoder::new(store, rng, d)?,
            d_model: d,
            polyline_points: cfg.polyline_points,
        })
    }

    /// `F_h` per frame: without a map the vehicle features stand in for map
    /// features; with one, the mean polyline embedding is added to them.
    pub fn map_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_v: &[Var],
        polylines: Option<&[Vec<[f64; 2]>]>,
    ) -> Result<Vec<Var>> {
        let Some(lines) = polylines.filter(|l| !l.is_empty()) else {
            return Ok(f_v.to_vec());
        };
        let rows = lines
            .iter()
            .map(|l| {
                if l.len() != self.polyline_points {
                    return Err(ModelError::LengthMismatch(format!(
                        "polyline with {} points, expected {}",
                        l.len(),
                        self.polyline_points
                    )));
                }
                Ok(l.iter()
                    .flat_map(|p| [p[0] * STATE_SCALE[0], p[1] * STATE_SCALE[1]])
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let x = tape.constant(Tensor::from_rows(&rows));
        let e = self.map_encoder.forward(tape, store, x)?;
        let e = tape.mean_rows(e);
        f_v.iter()
            .map(|&f| Ok(tape.add(f, e)?))
            .collect()
    }

    /// `H_e = Σ_i block_i(...)`.
    pub fn cross_modal_attention(&self, tape: &mut Tape, store: &ParamStore, inp: &FusionInput) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for b in &self.blocks {
            let y = b.forward(tape, store, inp)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        acc.ok_or_else(|| ModelError::LengthMismatch("no fusion blocks".into()))
    }

    /// Runs the stage. `history` is `[n][t_p]` in the target frame,
    /// `short_traj` the `t_s` generated frames `[n, 4]`, `dyn_features` `[n, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history: &[Vec<KinematicState>],
        short_traj: &[Var],
        dyn_features: Var,
        polylines: Option<&[Vec<[f64; 2]>]>,
        adjacency: &Tensor,
    ) -> Result<InteractionPass> {
        let frames = state_frames(tape, history, short_traj)?;
        if frames.is_empty() {
            return Err(ModelError::LengthMismatch("empty sequence".into()));
        }
        let f_v = self.temporal.forward(tape, store, &frames)?;
        let f_h = self.map_features(tape, store, &f_v, polylines)?;
        let v_hat = self.embed.vehicle(tape, store, &f_v)?;
        let h_hat = f_h
            .iter()
            .map(|&f| self.embed.map(tape, store, f))
            .collect::<Result<Vec<_>>>()?;
        let d_hat = self.embed.dynamics(tape, store, dyn_features)?;
        let inp = FusionInput::new(tape, &v_hat, &h_hat, d_hat)?;
        let hidden = self.cross_modal_attention(tape, store, &inp)?;
        let cross_modal = self.regression.forward(tape, store, hidden)?;
        let interaction = self.st.forward(tape, store, &f_v, cross_modal, adjacency)?;
        Ok(InteractionPass {
            vehicle_feats: f_v,
            hidden,
            cross_modal,
            interaction,
        })
    }
}
