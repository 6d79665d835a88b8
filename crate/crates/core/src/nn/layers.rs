use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConvGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = init_bound(inputs);
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[inputs, outputs], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Linear { w, b, inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Same-padded 2-D convolution over flattened `[n, c*h*w]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let fan_in = geom.channels * geom.kernel * geom.kernel;
        let k = store.add(
            format!("{name}.k"),
            Tensor::uniform(&[geom.out_channels, geom.channels, geom.kernel, geom.kernel], init_bound(fan_in), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[geom.out_channels]));
        Conv2d { k, b, geom }
    }

    pub fn output_len(&self) -> usize {
        self.geom.out_channels * self.geom.height * self.geom.width
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.k);
        let b = g.param(self.b);
        g.conv2d(x, k, b, self.geom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

/// Recurrent state: `c` is unused (and zero-width) for the GRU.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

/// Gated recurrent cell. The input projection is separate so a whole
/// sequence can be projected with one matmul before unrolling.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    /// GRU only: bias on the hidden projection (needed inside the reset gate).
    pub bh: Option<ParamId>,
    pub inputs: usize,
    pub hidden: usize,
}

impl RecurrentCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        };
        let bound = init_bound(hidden);
        let wx = store.add(format!("{name}.wx"), Tensor::uniform(&[inputs, gates * hidden], bound, rng));
        let wh = store.add(format!("{name}.wh"), Tensor::uniform(&[hidden, gates * hidden], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[gates * hidden]));
        let bh = (kind == CellKind::Gru).then(|| store.add(format!("{name}.bh"), Tensor::zeros(&[gates * hidden])));
        RecurrentCell {
            kind,
            wx,
            wh,
            b,
            bh,
            inputs,
            hidden,
        }
    }

    /// Input projection `x Wx + b` for any number of rows.
    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let wx = g.param(self.wx);
        let b = g.param(self.b);
        let p = g.matmul(x, wx)?;
        g.add_bias(p, b)
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: usize) -> RecurrentState {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = match self.kind {
            CellKind::Lstm => g.constant(Tensor::zeros(&[batch, self.hidden])),
            CellKind::Gru => g.constant(Tensor::zeros(&[batch, 0])),
        };
        RecurrentState { h, c }
    }

    /// One step from a projected input `xp` (`[n, gates*hidden]`).
    pub fn step<T: Scalar>(&self, g: &mut Graph<'_, T>, xp: Var, s: RecurrentState) -> Result<RecurrentState> {
        let n = self.hidden;
        let wh = g.param(self.wh);
        let hp = g.matmul(s.h, wh)?;
        match self.kind {
            CellKind::Lstm => {
                let z = g.add(xp, hp)?;
                let i = g.slice_cols(z, 0, n)?;
                let f = g.slice_cols(z, n, n)?;
                let u = g.slice_cols(z, 2 * n, n)?;
                let o = g.slice_cols(z, 3 * n, n)?;
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let u = g.tanh(u);
                let o = g.sigmoid(o);
                let keep = g.mul(f, s.c)?;
                let write = g.mul(i, u)?;
                let c = g.add(keep, write)?;
                let ct = g.tanh(c);
                let h = g.mul(o, ct)?;
                Ok(RecurrentState { h, c })
            }
            CellKind::Gru => {
                let bh = g.param(self.bh.expect("gru bias"));
                let hp = g.add_bias(hp, bh)?;
                let xr = g.slice_cols(xp, 0, n)?;
                let xz = g.slice_cols(xp, n, n)?;
                let xn = g.slice_cols(xp, 2 * n, n)?;
                let hr = g.slice_cols(hp, 0, n)?;
                let hz = g.slice_cols(hp, n, n)?;
                let hn = g.slice_cols(hp, 2 * n, n)?;
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r);
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z);
                let rh = g.mul(r, hn)?;
                let cand = g.add(xn, rh)?;
                let cand = g.tanh(cand);
                // h' = cand + z * (h - cand)
                let diff = g.sub(s.h, cand)?;
                let gated = g.mul(z, diff)?;
                let h = g.add(cand, gated)?;
                Ok(RecurrentState { h, c: s.c })
            }
        }
    }
}
