use fs2ffpe_autograd::{Real, Tape, Var};
use rand::Rng;

use super::{normal_tensor, Bound, GeneratorSpec, ParamSet};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-7;

/// One two-layer MLP per encoder tap, mapping `[N, C_l]` patch features to unit vectors in
/// `R^head_dim`.
#[derive(Clone, Debug)]
pub struct ProjectionHeads<T: Real> {
    pub params: ParamSet<T>,
    layer_ids: Vec<usize>,
    head_dim: usize,
}

impl<T: Real> ProjectionHeads<T> {
    pub fn new(g: &GeneratorSpec, layer_ids: &[usize], head_dim: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if layer_ids.is_empty() || head_dim == 0 {
            return Err(Error::Config("projection heads need at least one layer and a positive width".into()));
        }
        let mut p = ParamSet::default();
        for (i, &id) in layer_ids.iter().enumerate() {
            let c = g.tap_channels(id)?;
            p.push(format!("mlp{i}.0.weight"), normal_tensor(&[head_dim, c], std, rng));
            p.push(format!("mlp{i}.0.bias"), fs2ffpe_autograd::Tensor::zeros(&[head_dim]));
            p.push(format!("mlp{i}.2.weight"), normal_tensor(&[head_dim, head_dim], std, rng));
            p.push(format!("mlp{i}.2.bias"), fs2ffpe_autograd::Tensor::zeros(&[head_dim]));
        }
        Ok(Self { params: p, layer_ids: layer_ids.to_vec(), head_dim })
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// `normalize(W2 relu(W1 f + b1) + b2)` row-wise, for the `k`-th configured layer.
    pub fn project(&self, tape: &mut Tape<T>, p: &Bound, k: usize, feats: Var) -> Result<Var> {
        let base = 4 * k;
        let mut y = tape.matmul(feats, p.at(base), false, true)?;
        y = tape.add_row_bias(y, p.at(base + 1))?;
        y = tape.relu(y)?;
        y = tape.matmul(y, p.at(base + 2), false, true)?;
        y = tape.add_row_bias(y, p.at(base + 3))?;
        Ok(tape.l2_normalize_rows(y, NORM_EPS)?)
    }
}
