//! Gated recurrent unit with the original gate convention:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! Input weights are stored fused as `{name}.w [in, 3H]` (gate order z, r,
//! h~) with bias `{name}.b [3H]`; recurrent weights as `{name}.u_zr [H, 2H]`
//! and `{name}.u_h [H, H]`.

use super::glorot;
use crate::engine::{Bound, Graph, ModelParams, Real, Tensor, Var};
use crate::error::Result;
use rand_chacha::ChaCha8Rng;

pub fn add_gru<T: Real>(p: &mut ModelParams<T>, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Result<()> {
    p.insert(format!("{name}.w"), glorot(rng, input, 3 * hidden))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[3 * hidden]))?;
    p.insert(format!("{name}.u_zr"), glorot(rng, hidden, 2 * hidden))?;
    p.insert(format!("{name}.u_h"), glorot(rng, hidden, hidden))?;
    Ok(())
}

/// Bound weights of one GRU.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w: Var,
    pub b: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub hidden: usize,
}

impl GruWeights {
    pub fn bind<T: Real>(g: &Graph<T>, p: &Bound, name: &str) -> Result<Self> {
        let u_h = p.get(&format!("{name}.u_h"))?;
        Ok(Self {
            w: p.get(&format!("{name}.w"))?,
            b: p.get(&format!("{name}.b"))?,
            u_zr: p.get(&format!("{name}.u_zr"))?,
            u_h,
            hidden: g.shape(u_h)[0],
        })
    }

    /// Input projection `x W + b` for `[.., in]` inputs.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.w, Some(self.b))
    }

    /// One step from a precomputed input projection `xp [B, 3H]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let hzr = g.matmul(h, self.u_zr)?;
        let xz = g.slice(xp, 1, 0, hd)?;
        let xr = g.slice(xp, 1, hd, hd)?;
        let xn = g.slice(xp, 1, 2 * hd, hd)?;
        let hz = g.slice(hzr, 1, 0, hd)?;
        let hr = g.slice(hzr, 1, hd, hd)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let un = g.matmul(rh, self.u_h)?;
        let n = g.add(xn, un)?;
        let n = g.tanh(n);
        let delta = g.sub(n, h)?;
        let upd = g.mul(z, delta)?;
        g.add(h, upd)
    }

    /// `x [B, in]`, `h [B, H]` to the next state.
    pub fn cell<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
        let xp = self.project(g, x)?;
        self.step(g, xp, h)
    }

    /// Runs over `x [B, T, in]` in index order from `h0`; returns the state
    /// after every step.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, x: Var, h0: Var, backwards: bool) -> Result<Vec<Var>> {
        let t_len = g.shape(x)[1];
        let xp = self.project(g, x)?;
        let mut h = h0;
        let mut out = vec![h0; t_len];
        let order: Vec<usize> = if backwards { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let xt = g.select(xp, 1, t)?;
            h = self.step(g, xt, h)?;
            out[t] = h;
        }
        Ok(out)
    }
}
