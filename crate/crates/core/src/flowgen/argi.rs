//! Gated cross-hand attention at the U-Net bottleneck, shared by both hands.

use crate::error::{dim_err, Result};
use crate::numcore::nn::{attention_with_weights, Attention, FeedForward, Linear};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct Argi {
    pub identity: [ParamId; 2],
    pub zeta: Attention,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub ffn: FeedForward,
    pub d_k: usize,
}

/// Updated features and their frame-wise gates (`N′×1`, left then right).
#[derive(Debug, Clone, Copy)]
pub struct ArgiOutput {
    pub hands: [Var; 2],
    pub gates: [Var; 2],
}

impl Argi {
    pub fn new(ps: &mut ParamStore, prefix: &str, c: usize, d_k: usize, gate_hidden: usize, rng: &mut Rng) -> Self {
        let mut embed = |name: &str, rng: &mut Rng| ps.add(format!("{prefix}.{name}"), rng::normal(rng, &[1, c]).map(|v| 0.1 * v));
        let identity = [embed("id.left", rng), embed("id.right", rng)];
        Self {
            identity,
            zeta: Attention::new(ps, &format!("{prefix}.zeta"), c, c, c, c, rng),
            wq: Linear::new(ps, &format!("{prefix}.q"), c, d_k, false, rng),
            wk: Linear::new(ps, &format!("{prefix}.k"), c, d_k, false, rng),
            wv: Linear::new(ps, &format!("{prefix}.v"), c, d_k, false, rng),
            gate_hidden: Linear::new(ps, &format!("{prefix}.gate.hidden"), c, gate_hidden, true, rng),
            gate_out: Linear::new(ps, &format!("{prefix}.gate.out"), gate_hidden, 1, true, rng),
            ffn: FeedForward::new(ps, &format!("{prefix}.ffn"), d_k, c, c, rng),
            d_k,
        }
    }

    fn gate(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let z = self.gate_hidden.forward(g, h)?;
        let z = g.gelu(z)?;
        let z = self.gate_out.forward(g, z)?;
        g.sigmoid(z)
    }

    /// `h_s + FFN(g_s ⊙ softmax(Q_s K_s̄ᵀ/√d_k) V_s̄)` with
    /// `Q_s = ζ(h_s + e_id(s)) W_Q`.
    pub fn forward(&self, g: &mut Graph, h: [Var; 2]) -> Result<ArgiOutput> {
        if g.shape(h[0]) != g.shape(h[1]) {
            return Err(dim_err!("argi: {:?} vs {:?}", g.shape(h[0]), g.shape(h[1])));
        }
        let mut hands = [h[0]; 2];
        let mut gates = [h[0]; 2];
        for s in 0..2 {
            let other = h[1 - s];
            let id = g.param(self.identity[s]);
            let z = g.add_row(h[s], id)?;
            let a = self.zeta.forward(g, z, z, 1)?;
            let z = g.add(z, a)?;
            let q = self.wq.forward(g, z)?;
            let k = self.wk.forward(g, other)?;
            let v = self.wv.forward(g, other)?;
            let (m, _) = attention_with_weights(g, q, k, v, 1)?;
            let gate = self.gate(g, h[s])?;
            let gm = g.mul_col(m, gate)?;
            let f = self.ffn.forward(g, gm)?;
            hands[s] = g.add(h[s], f)?;
            gates[s] = gate;
        }
        Ok(ArgiOutput { hands, gates })
    }
}
