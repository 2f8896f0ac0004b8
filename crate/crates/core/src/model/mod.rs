//! The attention-based encoder-decoder: bidirectional GRU encoder, additive
//! attention, GRU decoder fed with the previous word and the attention
//! context, and a single-layer readout before the output softmax.

mod checkpoint;
mod forward;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, meta_path, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    attention, decode_step, decoder_init, encode, gru_cell, teacher_forced, Encoded, ForcedPass, StepOutput,
};

use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Half-width of the uniform initialization range.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutKind {
    Tanh,
    /// Two-way maxout over a readout layer of twice the width.
    Maxout,
}

impl ReadoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadoutKind::Tanh => "tanh",
            ReadoutKind::Maxout => "maxout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ReadoutKind::Tanh),
            "maxout" => Ok(ReadoutKind::Maxout),
            other => Err(NmtError::invalid(format!("unknown readout `{other}` (expected tanh or maxout)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub readout: usize,
    pub readout_kind: ReadoutKind,
}

impl Dims {
    /// Attention and readout widths default to the hidden width.
    pub fn new(src_vocab: usize, tgt_vocab: usize, embed: usize, hidden: usize) -> Self {
        Dims {
            src_vocab,
            tgt_vocab,
            embed,
            hidden,
            attention: hidden,
            readout: hidden,
            readout_kind: ReadoutKind::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.src_vocab, self.tgt_vocab, self.embed, self.hidden, self.attention, self.readout];
        if all.iter().any(|&d| d == 0) {
            return Err(NmtError::invalid(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the readout pre-activation.
    pub fn readout_pre(&self) -> usize {
        match self.readout_kind {
            ReadoutKind::Tanh => self.readout,
            ReadoutKind::Maxout => 2 * self.readout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight,
    Recurrent,
    Bias,
}

pub const GRU_PARAMS: [&str; 9] = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"];

fn gru_layout(prefix: &str, input: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>, ParamKind)>) {
    for gate in ["z", "r", "h"] {
        out.push((format!("{prefix}.W_{gate}"), vec![input, hidden], ParamKind::Weight));
        out.push((format!("{prefix}.U_{gate}"), vec![hidden, hidden], ParamKind::Recurrent));
        out.push((format!("{prefix}.b_{gate}"), vec![hidden], ParamKind::Bias));
    }
}

/// Parameter names and shapes in their declared (checkpoint) order.
pub(crate) fn layout(d: &Dims) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let (de, dh, da) = (d.embed, d.hidden, d.attention);
    let ro = d.readout_pre();
    let mut v = vec![
        ("src_embed".to_string(), vec![d.src_vocab, de], Weight),
        ("tgt_embed".to_string(), vec![d.tgt_vocab, de], Weight),
    ];
    gru_layout("enc_fwd", de, dh, &mut v);
    gru_layout("enc_bwd", de, dh, &mut v);
    v.push(("att.W_a".into(), vec![dh, da], Weight));
    v.push(("att.U_a".into(), vec![2 * dh, da], Weight));
    v.push(("att.v_a".into(), vec![da, 1], Weight));
    gru_layout("dec", de + 2 * dh, dh, &mut v);
    v.push(("init.W".into(), vec![dh, dh], Weight));
    v.push(("init.b".into(), vec![dh], Bias));
    v.push(("readout.W_s".into(), vec![dh, ro], Weight));
    v.push(("readout.W_y".into(), vec![de, ro], Weight));
    v.push(("readout.W_c".into(), vec![2 * dh, ro], Weight));
    v.push(("readout.b".into(), vec![ro], Bias));
    v.push(("out.W".into(), vec![d.readout, d.tgt_vocab], Weight));
    v.push(("out.b".into(), vec![d.tgt_vocab], Bias));
    v
}

/// All learnable tensors of the model, in declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnSearchModel {
    pub dims: Dims,
    pub seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl RnnSearchModel {
    /// Uniform(-0.08, 0.08) weights, orthogonal recurrent matrices, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, kind) in layout(&dims) {
            let n: usize = shape.iter().product();
            let data = match kind {
                ParamKind::Bias => vec![0.0; n],
                ParamKind::Weight => (0..n).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect(),
                ParamKind::Recurrent => orthogonal(shape[0], &mut rng),
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(RnnSearchModel {
            dims,
            seed,
            names,
            params,
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        let mut m = RnnSearchModel::init(dims, 0)?;
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub(crate) fn from_parts(dims: Dims, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        let lay = layout(&dims);
        if lay.len() != params.len() {
            return Err(NmtError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                lay.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in lay.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(NmtError::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", p.shape())));
            }
        }
        Ok(RnnSearchModel {
            dims,
            seed,
            names: lay.into_iter().map(|(n, _, _)| n).collect(),
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the graph; `track` makes them differentiable.
    pub fn bind(&self, g: &mut Graph, track: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| if track { g.param(p.without_grad()) } else { g.constant(p.without_grad()) })
            .collect();
        ModelVars::from_vars(self.dims, vars)
    }

    /// Gradients accumulated on the graph for each parameter, in order.
    pub fn collect_grads(&self, g: &Graph, vars: &ModelVars) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&vars.all)
            .map(|(p, &v)| {
                let data = g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
                Tensor::new(p.shape().to_vec(), data).expect("gradient shape")
            })
            .collect()
    }
}

/// Orthogonal `n x n` matrix from modified Gram-Schmidt (two passes) on a
/// random uniform matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum();
                    for k in 0..n {
                        cols[i][k] -= dot * cols[j][k];
                    }
                }
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut out = vec![0.0; n * n];
            for (c, col) in cols.iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    out[r * n + c] = *v;
                }
            }
            return out;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    fn from_slice(v: &[Var]) -> Self {
        GruVars {
            w_z: v[0],
            u_z: v[1],
            b_z: v[2],
            w_r: v[3],
            u_r: v[4],
            b_r: v[5],
            w_h: v[6],
            u_h: v[7],
            b_h: v[8],
        }
    }

    /// Binds a free-standing GRU parameter set (order of [`GRU_PARAMS`]).
    pub fn bind(g: &mut Graph, params: &[Tensor], track: bool) -> Self {
        let vars: Vec<Var> = params
            .iter()
            .map(|p| if track { g.param(p.without_grad()) } else { g.constant(p.without_grad()) })
            .collect();
        GruVars::from_slice(&vars)
    }
}

/// Graph handles for every parameter, keyed by role.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub dims: Dims,
    pub all: Vec<Var>,
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub enc_fwd: GruVars,
    pub enc_bwd: GruVars,
    pub w_a: Var,
    pub u_a: Var,
    pub v_a: Var,
    pub dec: GruVars,
    pub w_init: Var,
    pub b_init: Var,
    pub readout_s: Var,
    pub readout_y: Var,
    pub readout_c: Var,
    pub readout_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    fn from_vars(dims: Dims, all: Vec<Var>) -> Self {
        let v = &all;
        ModelVars {
            dims,
            src_embed: v[0],
            tgt_embed: v[1],
            enc_fwd: GruVars::from_slice(&v[2..11]),
            enc_bwd: GruVars::from_slice(&v[11..20]),
            w_a: v[20],
            u_a: v[21],
            v_a: v[22],
            dec: GruVars::from_slice(&v[23..32]),
            w_init: v[32],
            b_init: v[33],
            readout_s: v[34],
            readout_y: v[35],
            readout_c: v[36],
            readout_b: v[37],
            out_w: v[38],
            out_b: v[39],
            all,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let d = Dims::new(10, 11, 4, 5);
        assert_eq!(RnnSearchModel::init(d, 7).unwrap(), RnnSearchModel::init(d, 7).unwrap());
        assert_ne!(RnnSearchModel::init(d, 7).unwrap(), RnnSearchModel::init(d, 8).unwrap());
    }

    #[test]
    fn recurrent_matrices_are_orthogonal() {
        let m = RnnSearchModel::init(Dims::new(6, 6, 4, 7), 3).unwrap();
        for (name, p) in m.names().iter().zip(m.params()) {
            if !name.contains(".U_") || name.starts_with("att.") {
                continue;
            }
            let n = p.shape()[0];
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| p.get2(k, i) * p.get2(k, j)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-8, "{name} ({i},{j}) = {dot}");
                }
            }
        }
    }

    #[test]
    fn weights_in_range_biases_zero() {
        let m = RnnSearchModel::init(Dims::new(6, 6, 4, 5), 1).unwrap();
        for (name, p) in m.names().iter().zip(m.params()) {
            if name.contains(".b") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            } else if !name.contains(".U_") || name.starts_with("att.") {
                assert!(p.data().iter().all(|&v| v.abs() < INIT_SCALE));
            }
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        // count each term independently of the layout table
        let (vs, vt, de, dh, da, dr) = (20usize, 20, 8, 16, 16, 16);
        let gru = |inp: usize| 3 * (inp * dh + dh * dh + dh);
        let expected = vs * de
            + vt * de
            + 2 * gru(de)
            + (dh * da + 2 * dh * da + da)
            + gru(de + 2 * dh)
            + (dh * dh + dh)
            + ((dh + de + 2 * dh) * dr + dr)
            + (dr * vt + vt);
        let mut d = Dims::new(vs, vt, de, dh);
        d.attention = da;
        d.readout = dr;
        assert_eq!(RnnSearchModel::init(d, 0).unwrap().num_parameters(), expected);
        let mut maxout = d;
        maxout.readout_kind = ReadoutKind::Maxout;
        let extra = (dh + de + 2 * dh) * dr + dr;
        assert_eq!(RnnSearchModel::init(maxout, 0).unwrap().num_parameters(), expected + extra);
    }
}
