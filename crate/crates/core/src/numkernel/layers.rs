//! Parameterized layers built from tape primitives.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! pulled onto a [`Tape`] at forward time.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::KernelError;

type Result<T> = std::result::Result<T, KernelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// `x·W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = store.insert_filled(&format!("{name}.b"), 1, fan_out, 0.0)?;
        Ok(Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{name}.w"), fan_in, fan_out, rng)?;
        Ok(Self {
            w,
            b: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine chain; `hidden` activation between layers, `output` after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        mlp(tape, store, x, &self.layers, self.hidden, self.output)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Affine + activation chain over explicit layers.
pub fn mlp(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layers: &[Linear],
    hidden: Activation,
    output: Activation,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, store, h)?;
        let act = if i + 1 == layers.len() { output } else { hidden };
        h = act.apply(tape, h);
    }
    Ok(h)
}

/// Gated linear unit `(x·Wa + b) ⊙ σ(x·Wb + b̂)`.
pub fn glu(
    tape: &mut Tape,
    x: Var,
    wa: Var,
    b: Var,
    wb: Var,
    b_hat: Var,
) -> Result<Var> {
    let lin = tape.matmul(x, wa)?;
    let lin = tape.add(lin, b)?;
    let gate = tape.matmul(x, wb)?;
    let gate = tape.add(gate, b_hat)?;
    let gate = tape.sigmoid(gate);
    tape.mul(lin, gate)
}

#[derive(Clone, Debug)]
pub struct Glu {
    pub value: Linear,
    pub gate: Linear,
}

impl Glu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            value: Linear::new(store, rng, &format!("{name}.a"), fan_in, fan_out)?,
            gate: Linear::new(store, rng, &format!("{name}.g"), fan_in, fan_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let wa = tape.param(store, self.value.w);
        let b = tape.param(store, self.value.b.expect("glu bias"));
        let wb = tape.param(store, self.gate.w);
        let b_hat = tape.param(store, self.gate.b.expect("glu bias"));
        glu(tape, x, wa, b, wb, b_hat)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert_filled(&format!("{name}.gain"), 1, dim, 1.0)?,
            bias: store.insert_filled(&format!("{name}.bias"), 1, dim, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Gated recurrent unit cell (gate order: reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

/// Update-gate bias giving `h' ≈ 0.9·h + 0.1·candidate` at init.
pub const GRU_DECAY_BIAS: f64 = 2.197_224_577_336_219_6; // logit(0.9)

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_ih = store.insert_uniform(&format!("{name}.w_ih"), input, 3 * hidden, rng)?;
        let w_hh = store.insert_uniform(&format!("{name}.w_hh"), hidden, 3 * hidden, rng)?;
        let b_ih = store.insert_filled(&format!("{name}.b_ih"), 1, 3 * hidden, 0.0)?;
        let mut b = vec![0.0; 3 * hidden];
        b[hidden..2 * hidden].fill(GRU_DECAY_BIAS);
        let b_hh = store.insert(&format!("{name}.b_hh"), Tensor::matrix(1, 3 * hidden, b))?;
        Ok(Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        gru_cell(tape, x, h, w_ih, w_hh, b_ih, b_hh, self.hidden)
    }
}

/// One GRU step: `r = σ(xWr + hUr)`, `z = σ(xWz + hUz)`,
/// `n = tanh(xWn + r ⊙ hUn)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
) -> Result<Var> {
    if tape.dims(h).1 != hidden || tape.dims(w_hh).1 != 3 * hidden {
        return Err(KernelError::ShapeMismatch(format!(
            "gru hidden {hidden} vs h {:?}, w_hh {:?}",
            tape.dims(h),
            tape.dims(w_hh)
        )));
    }
    let gi = tape.matmul(x, w_ih)?;
    let gi = tape.add(gi, b_ih)?;
    let gh = tape.matmul(h, w_hh)?;
    let gh = tape.add(gh, b_hh)?;
    let (hd, h2) = (hidden, 2 * hidden);
    let i_r = tape.slice_cols(gi, 0, hd)?;
    let i_z = tape.slice_cols(gi, hd, h2)?;
    let i_n = tape.slice_cols(gi, h2, 3 * hd)?;
    let h_r = tape.slice_cols(gh, 0, hd)?;
    let h_z = tape.slice_cols(gh, hd, h2)?;
    let h_n = tape.slice_cols(gh, h2, 3 * hd)?;
    let r = tape.add(i_r, h_r)?;
    let r = tape.sigmoid(r);
    let z = tape.add(i_z, h_z)?;
    let z = tape.sigmoid(z);
    let rn = tape.mul(r, h_n)?;
    let n = tape.add(i_n, rn)?;
    let n = tape.tanh(n);
    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Stacked GRU run over a time-major sequence of `[rows, input]` frames.
#[derive(Clone, Debug)]
pub struct Gru {
    pub cells: Vec<GruCell>,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        let cells = (0..layers)
            .map(|i| {
                let inp = if i == 0 { input } else { hidden };
                GruCell::new(store, rng, &format!("{name}.{i}"), inp, hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Self { cells })
    }

    /// Final hidden state of the top layer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: &[Var]) -> Result<Var> {
        let first = *seq.first().ok_or(KernelError::EmptySequence)?;
        let rows = tape.dims(first).0;
        let mut inputs = seq.to_vec();
        for cell in &self.cells {
            let mut h = tape.constant(Tensor::zeros(rows, cell.hidden));
            let mut outs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                h = cell.forward(tape, store, x, h)?;
                outs.push(h);
            }
            inputs = outs;
        }
        Ok(*inputs.last().expect("nonempty"))
    }
}

/// `softmax(score_mlp(Q·Kᵀ/√d)) · value_mlp(V)`.
///
/// The score MLP acts elementwise on the score matrix (scalar in, scalar
/// out), so the head stays equivariant under permutations of keys.
/// `mask` has the score shape; zero entries are excluded from the softmax.
#[allow(clippy::too_many_arguments)]
pub fn attention_head(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    scale_dim: usize,
    score_mlp: &Mlp,
    value_mlp: &Mlp,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let (nq, dq) = tape.dims(q);
    let (nk, dk) = tape.dims(k);
    let (nv, _) = tape.dims(v);
    if dq != dk || nk != nv {
        return Err(KernelError::ShapeMismatch(format!(
            "attention: q [{nq},{dq}] k [{nk},{dk}] v rows {nv}"
        )));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (scale_dim as f64).sqrt());
    let flat = tape.reshape(scores, nq * nk, 1)?;
    let flat = score_mlp.forward(tape, store, flat)?;
    let scores = tape.reshape(flat, nq, nk)?;
    let weights = tape.softmax_rows(scores, mask)?;
    let values = value_mlp.forward(tape, store, v)?;
    tape.matmul(weights, values)
}

/// Attention head parameters: elementwise score MLP and value MLP.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub score_mlp: Mlp,
    pub value_mlp: Mlp,
}

impl AttentionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        score_hidden: usize,
        value_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            score_mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.score"),
                &[1, score_hidden, 1],
                Activation::Gelu,
                Activation::Identity,
            )?,
            value_mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.value"),
                &[value_dim, value_dim],
                Activation::Identity,
                Activation::Gelu,
            )?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        scale_dim: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        attention_head(
            tape,
            store,
            q,
            k,
            v,
            scale_dim,
            &self.score_mlp,
            &self.value_mlp,
            mask,
        )
    }
}

/// Diagonal selective state-space scan.
///
/// Per step, with input `x_t: [rows, d]`:
/// `Δ_t = softplus(x_t W_Δ + b_Δ)`, `B_t = x_t W_B`, `C_t = x_t W_C`,
/// `h_t = exp(−Δ_t ⊗ A) ⊙ h_{t−1} + (Δ_t ⊙ x_t) ⊗ B_t`, `y_t = Σ_s h_t C_t`.
/// The state `h` is `[rows, d·S]`, indexed `i·S + s`.
#[derive(Clone, Debug)]
pub struct SelectiveScan {
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub dim: usize,
    pub state: usize,
}

/// `softplus(b) = −ln 0.9`, so `exp(−Δ·A) ≈ 0.9` at init with `A = 1`.
pub const SCAN_DELTA_BIAS: f64 = -2.197_224_577_336_219_6;

impl SelectiveScan {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        state: usize,
    ) -> Result<Self> {
        let w_delta = store.insert_uniform(&format!("{name}.w_delta"), dim, dim, rng)?;
        store
            .value_mut(w_delta)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 0.1);
        let b_delta = store.insert_filled(&format!("{name}.b_delta"), 1, dim, SCAN_DELTA_BIAS)?;
        let w_b = store.insert_uniform(&format!("{name}.w_b"), dim, state, rng)?;
        let w_c = store.insert_uniform(&format!("{name}.w_c"), dim, state, rng)?;
        let a_log = store.insert_filled(&format!("{name}.a_log"), 1, dim * state, 0.0)?;
        Ok(Self {
            w_delta,
            b_delta,
            w_b,
            w_c,
            a_log,
            dim,
            state,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Result<Vec<Var>> {
        let w_delta = tape.param(store, self.w_delta);
        let b_delta = tape.param(store, self.b_delta);
        let w_b = tape.param(store, self.w_b);
        let w_c = tape.param(store, self.w_c);
        let a_log = tape.param(store, self.a_log);
        let a = tape.exp(a_log);
        selective_ssm_scan(tape, xs, w_delta, b_delta, w_b, w_c, a, self.state)
    }
}

/// Causal selective scan over a time-major sequence; see [`SelectiveScan`].
#[allow(clippy::too_many_arguments)]
pub fn selective_ssm_scan(
    tape: &mut Tape,
    xs: &[Var],
    w_delta: Var,
    b_delta: Var,
    w_b: Var,
    w_c: Var,
    a: Var,
    state: usize,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(KernelError::EmptySequence);
    }
    let d = tape.dims(w_delta).0;
    if tape.value(a).len() != d * state {
        return Err(KernelError::ShapeMismatch(format!(
            "scan A has {} entries, expected {}",
            tape.value(a).len(),
            d * state
        )));
    }
    let a_row = tape.reshape(a, 1, d * state)?;
    let mut h: Option<Var> = None;
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        let delta = tape.matmul(x, w_delta)?;
        let delta = tape.add(delta, b_delta)?;
        let delta = tape.softplus(delta);
        let b_t = tape.matmul(x, w_b)?;
        let c_t = tape.matmul(x, w_c)?;
        let dx = tape.mul(delta, x)?;
        let dx = tape.repeat_each_col(dx, state);
        let b_tiled = tape.tile_cols(b_t, d);
        let inject = tape.mul(dx, b_tiled)?;
        let h_new = match h {
            None => inject,
            Some(prev) => {
                let dr = tape.repeat_each_col(delta, state);
                let da = tape.mul(dr, a_row)?;
                let da = tape.neg(da);
                let decay = tape.exp(da);
                let kept = tape.mul(decay, prev)?;
                tape.add(kept, inject)?
            }
        };
        let c_tiled = tape.tile_cols(c_t, d);
        let read = tape.mul(h_new, c_tiled)?;
        ys.push(tape.group_sum_cols(read, state)?);
        h = Some(h_new);
    }
    Ok(ys)
}

/// `D^{-1/2}(A + I)D^{-1/2}` for a square 0/1 adjacency without self loops.
pub fn normalized_adjacency(adj: &Tensor) -> Result<Tensor> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(KernelError::ShapeMismatch(format!(
            "adjacency must be square, got {:?}",
            adj.shape()
        )));
    }
    let mut a = adj.clone();
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row_slice(i).iter().sum()).collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                out.set(i, j, v / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    Ok(out)
}

/// `act(Â · X · W)` with `Â` the symmetric-normalized adjacency.
pub fn graph_conv(
    tape: &mut Tape,
    node_feats: Var,
    adjacency: &Tensor,
    w: Var,
    act: Activation,
) -> Result<Var> {
    let n = tape.dims(node_feats).0;
    if adjacency.rows() != n || adjacency.cols() != n {
        return Err(KernelError::ShapeMismatch(format!(
            "adjacency {:?} for {n} nodes",
            adjacency.shape()
        )));
    }
    let a_hat = tape.constant(normalized_adjacency(adjacency)?);
    let xw = tape.matmul(node_feats, w)?;
    let y = tape.matmul(a_hat, xw)?;
    Ok(act.apply(tape, y))
}

#[derive(Clone, Debug)]
pub struct GraphConv {
    pub w: ParamId,
    pub act: Activation,
}

impl GraphConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            w: store.insert_uniform(&format!("{name}.w"), fan_in, fan_out, rng)?,
            act,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        adjacency: &Tensor,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        graph_conv(tape, x, adjacency, w, self.act)
    }
}

/// Post-norm self-attention encoder block over rows.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
    pub dim: usize,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::without_bias(store, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::without_bias(store, rng, &format!("{name}.k"), dim, dim)?,
            v: Linear::without_bias(store, rng, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            ff: Mlp::new(
                store,
                rng,
                &format!("{name}.ff"),
                &[dim, 2 * dim, dim],
                Activation::Gelu,
                Activation::Identity,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (self.dim as f64).sqrt());
        let w = tape.softmax_rows(s, None)?;
        let a = tape.matmul(w, v)?;
        let a = self.o.forward(tape, store, a)?;
        let x1 = tape.add(x, a)?;
        let x1 = self.ln1.forward(tape, store, x1)?;
        let f = self.ff.forward(tape, store, x1)?;
        let x2 = tape.add(x1, f)?;
        self.ln2.forward(tape, store, x2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn gelu_zero_and_asymptote() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 10.0, -10.0]));
        let y = t.gelu(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn glu_identity_value_zero_gate_halves() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let wa = t.constant(Tensor::identity(3));
        let b = t.constant(Tensor::zeros(1, 3));
        let wb = t.constant(Tensor::zeros(3, 3));
        let bh = t.constant(Tensor::zeros(1, 3));
        let y = glu(&mut t, x, wa, b, wb, bh).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -1.0, 1.5]);
        let x0 = t.constant(Tensor::zeros(1, 3));
        let y0 = glu(&mut t, x0, wa, b, wb, bh).unwrap();
        assert_eq!(t.value(y0).data(), &[0.0; 3]);
    }

    #[test]
    fn glu_matches_scalar_evaluation() {
        // 1x2 input, 2x2 weights, hand-evaluated.
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.3, -1.2]));
        let wa = t.constant(Tensor::from_rows(&[vec![0.5, -0.1], vec![0.2, 0.7]]));
        let b = t.constant(Tensor::row(&[0.05, -0.3]));
        let wb = t.constant(Tensor::from_rows(&[vec![-0.4, 0.9], vec![0.3, 0.1]]));
        let bh = t.constant(Tensor::row(&[0.2, 0.0]));
        let y = glu(&mut t, x, wa, b, wb, bh).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let a0 = 0.3 * 0.5 + -1.2 * 0.2 + 0.05;
        let a1 = 0.3 * -0.1 + -1.2 * 0.7 - 0.3;
        let g0 = 0.3 * -0.4 + -1.2 * 0.3 + 0.2;
        let g1 = 0.3 * 0.9 + -1.2 * 0.1;
        let want = [a0 * sig(g0), a1 * sig(g1)];
        for (got, w) in t.value(y).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 0.0]));
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let a = t.constant(Tensor::row(&[0.3, -1.0, 2.5]));
        let b = t.add_scalar(a, 123.4);
        let sa = t.softmax_rows(a, None).unwrap();
        let sb = t.softmax_rows(b, None).unwrap();
        assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-12);
        assert!((t.value(sa).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_and_standardized_inputs() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::filled(1, 4, 1.0));
        let b = t.constant(Tensor::zeros(1, 4));
        let c = t.constant(Tensor::filled(1, 4, 3.3));
        let y = t.layer_norm(c, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
        // mean 0, population variance 1
        let s = [1.0, -1.0, 1.0, -1.0];
        let x = t.constant(Tensor::row(&s));
        let y = t.layer_norm(x, g, b).unwrap();
        for (got, want) in t.value(y).data().iter().zip(s) {
            assert!((got - want).abs() < 1e-5);
        }
        let one = t.constant(Tensor::scalar(1.0));
        assert!(t.layer_norm(one, one, one).is_err());
    }

    #[test]
    fn mlp_identity_and_zero_weights() {
        let mut store = ParamStore::new();
        let m = Mlp::new(
            &mut store,
            &mut rng(),
            "m",
            &[3, 3],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        *store.value_mut(m.layers[0].w) = Tensor::identity(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[1.0, -2.0, 0.5]));
        let y = m.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -2.0, 0.5]);

        *store.value_mut(m.layers[0].w) = Tensor::zeros(3, 3);
        *store.value_mut(m.layers[0].b.unwrap()) = Tensor::row(&[0.1, 0.2, 0.3]);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 9.0]]));
        let y = m.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn gru_zero_params_halve_state() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.7, -0.2]));
        let h = t.constant(Tensor::row(&[0.4, -1.0, 2.0]));
        let w_ih = t.constant(Tensor::zeros(2, 9));
        let w_hh = t.constant(Tensor::zeros(3, 9));
        let b = t.constant(Tensor::zeros(1, 9));
        let h1 = gru_cell(&mut t, x, h, w_ih, w_hh, b, b, 3).unwrap();
        assert_eq!(t.value(h1).data(), &[0.2, -0.5, 1.0]);
        let x0 = t.constant(Tensor::zeros(1, 2));
        let h0 = t.constant(Tensor::zeros(1, 3));
        let h1 = gru_cell(&mut t, x0, h0, w_ih, w_hh, b, b, 3).unwrap();
        assert_eq!(t.value(h1).data(), &[0.0; 3]);
        assert!(gru_cell(&mut t, x0, h0, w_ih, w_hh, b, b, 4).is_err());
    }

    #[test]
    fn gru_initial_decay_is_point_nine() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, &mut rng(), "g", 2, 3).unwrap();
        *store.value_mut(cell.w_ih) = Tensor::zeros(2, 9);
        *store.value_mut(cell.w_hh) = Tensor::zeros(3, 9);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 2));
        let h = t.constant(Tensor::row(&[1.0, 1.0, 1.0]));
        let h1 = cell.forward(&mut t, &store, x, h).unwrap();
        for v in t.value(h1).data() {
            assert!((v - 0.9).abs() < 1e-12);
        }
    }

    fn head(store: &mut ParamStore, d: usize) -> AttentionHead {
        AttentionHead::new(store, &mut rng(), "h", 4, d).unwrap()
    }

    #[test]
    fn attention_single_key_weight_is_one() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3);
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]));
        let k = t.constant(Tensor::row(&[0.3, 0.3, -0.9]));
        let v = t.constant(Tensor::row(&[0.2, -0.4, 1.1]));
        let out = h.forward(&mut t, &store, q, k, v, 3, None).unwrap();
        let mv = h.value_mlp.forward(&mut t, &store, v).unwrap();
        let mv = t.value(mv).clone();
        for r in 0..2 {
            for c in 0..3 {
                assert!((t.value(out).get(r, c) - mv.get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_identical_keys_give_uniform_weights() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 2);
        let mut t = Tape::new();
        let q = t.constant(Tensor::row(&[0.7, -1.3]));
        let k = t.constant(Tensor::from_rows(&vec![vec![0.5, 0.5]; 3]));
        let v = t.constant(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, -1.0],
        ]));
        let out = h.forward(&mut t, &store, q, k, v, 2, None).unwrap();
        let mv = h.value_mlp.forward(&mut t, &store, v).unwrap();
        let mean = t.mean_rows(mv);
        assert!(t.value(out).max_abs_diff(t.value(mean)) < 1e-15);
    }

    fn scan_parts(t: &mut Tape, w_d: f64, b_d: f64, w_b: f64, w_c: f64, a: f64) -> [Var; 5] {
        [
            t.constant(Tensor::scalar(w_d)),
            t.constant(Tensor::scalar(b_d)),
            t.constant(Tensor::scalar(w_b)),
            t.constant(Tensor::scalar(w_c)),
            t.constant(Tensor::scalar(a)),
        ]
    }

    #[test]
    fn scan_three_step_scalar_unroll() {
        let (w_d, b_d, w_b, w_c, a) = (0.4, -0.3, 1.5, -0.8, 0.7);
        let xs_v = [0.5, -1.0, 2.0];
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let mut h = 0.0;
        let mut want = Vec::new();
        for &x in &xs_v {
            let d = sp(w_d * x + b_d);
            h = (-d * a).exp() * h + d * x * (w_b * x);
            want.push(h * (w_c * x));
        }
        let mut t = Tape::new();
        let [wd, bd, wb, wc, av] = scan_parts(&mut t, w_d, b_d, w_b, w_c, a);
        let xs: Vec<Var> = xs_v.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let ys = selective_ssm_scan(&mut t, &xs, wd, bd, wb, wc, av, 1).unwrap();
        for (y, w) in ys.iter().zip(want) {
            assert!((t.scalar(*y) - w).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_length_one_is_single_readout() {
        let mut t = Tape::new();
        let [wd, bd, wb, wc, av] = scan_parts(&mut t, 0.2, 0.1, 0.9, 1.1, 1.0);
        let x = t.constant(Tensor::scalar(0.6));
        let ys = selective_ssm_scan(&mut t, &[x], wd, bd, wb, wc, av, 1).unwrap();
        let d = (1.0f64 + (0.2f64 * 0.6 + 0.1).exp()).ln();
        let want = d * 0.6 * (0.9 * 0.6) * (1.1 * 0.6);
        assert!((t.scalar(ys[0]) - want).abs() < 1e-15);
        assert!(matches!(
            selective_ssm_scan(&mut t, &[], wd, bd, wb, wc, av, 1),
            Err(KernelError::EmptySequence)
        ));
    }

    #[test]
    fn scan_with_closed_gate_forgets_history() {
        // A so large that exp(-Δ·A) underflows: output depends on x_t only.
        let mut store = ParamStore::new();
        let scan = SelectiveScan::new(&mut store, &mut rng(), "s", 3, 2).unwrap();
        *store.value_mut(scan.a_log) = Tensor::filled(1, 6, 1e3f64.ln() + 6.0);
        let run = |xs_v: &[[f64; 3]]| {
            let mut t = Tape::new();
            let xs: Vec<Var> = xs_v.iter().map(|x| t.constant(Tensor::row(x))).collect();
            let ys = scan.forward(&mut t, &store, &xs).unwrap();
            t.value(*ys.last().unwrap()).clone()
        };
        let a = run(&[[1.0, 2.0, 3.0], [0.5, 0.1, -0.2]]);
        let b = run(&[[-7.0, 0.0, 9.0], [0.5, 0.1, -0.2]]);
        let c = run(&[[0.5, 0.1, -0.2]]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn scan_is_causal_bitwise() {
        let mut store = ParamStore::new();
        let scan = SelectiveScan::new(&mut store, &mut rng(), "s", 2, 3).unwrap();
        let run = |last: f64| {
            let mut t = Tape::new();
            let xs: Vec<Var> = [[0.1, 0.2], [0.3, -0.4], [last, 1.0]]
                .iter()
                .map(|x| t.constant(Tensor::row(x)))
                .collect();
            let ys = scan.forward(&mut t, &store, &xs).unwrap();
            ys.iter().map(|y| t.value(*y).clone()).collect::<Vec<_>>()
        };
        let a = run(0.5);
        let b = run(-3.0);
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn scan_initial_decay_is_point_nine() {
        let sp = (1.0 + SCAN_DELTA_BIAS.exp()).ln();
        assert!(((-sp).exp() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn graph_conv_single_node_and_disconnected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[-1.0, 2.0]));
        let w = t.constant(Tensor::identity(2));
        let y = graph_conv(&mut t, x, &Tensor::zeros(1, 1), w, Activation::Relu).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        let x = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 5.0]]));
        let y = graph_conv(&mut t, x, &Tensor::zeros(2, 2), w, Activation::Identity).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.0, 5.0]);
        assert!(graph_conv(&mut t, x, &Tensor::zeros(3, 3), w, Activation::Identity).is_err());
    }

    #[test]
    fn graph_conv_line_graph_by_hand() {
        // 0 - 1 - 2 with self loops: degrees 2, 3, 2.
        let adj = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let x = [1.0, 2.0, 4.0];
        let s = |a: f64, b: f64| 1.0 / (a * b).sqrt();
        let want = [
            x[0] * s(2.0, 2.0) + x[1] * s(2.0, 3.0),
            x[0] * s(3.0, 2.0) + x[1] * s(3.0, 3.0) + x[2] * s(3.0, 2.0),
            x[1] * s(2.0, 3.0) + x[2] * s(2.0, 2.0),
        ];
        let mut t = Tape::new();
        let xv = t.constant(Tensor::column(&x));
        let w = t.constant(Tensor::scalar(1.0));
        let y = graph_conv(&mut t, xv, &adj, w, Activation::Identity).unwrap();
        for (got, w) in t.value(y).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }
}
