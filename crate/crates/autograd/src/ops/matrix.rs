//! Rank-2 ops for projection heads and contrastive logits.

use crate::error::{invalid, shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::Op;
use crate::tensor::Tensor;

/// `op(a) * op(b)` for row-major matrices.
#[derive(Clone, Copy, Debug, Default)]
pub struct MatMul {
    pub trans_a: bool,
    pub trans_b: bool,
}

impl MatMul {
    fn dims<T: Real>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (ar, ac) = a.rc("matmul")?;
        let (br, bc) = b.rc("matmul")?;
        let (m, ka) = if self.trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if self.trans_b { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        Ok((m, n, ka))
    }
}

impl<T: Real> Op<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (m, n, k) = self.dims(x[0], x[1])?;
        let mut out = vec![T::zero(); m * n];
        gemm(self.trans_a, self.trans_b, m, n, k, T::one(), x[0].data(), x[1].data(), T::zero(), &mut out);
        Tensor::from_vec(&[m, n], out)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (m, n, k) = self.dims(x[0], x[1]).expect("validated");
        let (a, b, g) = (x[0].data(), x[1].data(), g.data());
        let da = need[0].then(|| {
            // C = A B: dA = G B^T ; stored transposed when trans_a: dA^T = B G^T
            let mut d = vec![T::zero(); m * k];
            if self.trans_a {
                gemm(self.trans_b, true, k, m, n, T::one(), b, g, T::zero(), &mut d);
            } else {
                gemm(false, !self.trans_b, m, k, n, T::one(), g, b, T::zero(), &mut d);
            }
            Tensor::from_vec(x[0].shape(), d).expect("shape")
        });
        let db = need[1].then(|| {
            // dB = A^T G ; stored transposed when trans_b: dB^T = G^T A
            let mut d = vec![T::zero(); k * n];
            if self.trans_b {
                gemm(true, self.trans_a, n, k, m, T::one(), g, a, T::zero(), &mut d);
            } else {
                gemm(!self.trans_a, false, k, n, m, T::one(), a, g, T::zero(), &mut d);
            }
            Tensor::from_vec(x[1].shape(), d).expect("shape")
        });
        vec![da, db]
    }
}

/// Adds `b: [n]` to every row of `x: [m, n]`.
pub struct AddRowBias;

impl<T: Real> Op<T> for AddRowBias {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (_, n) = x[0].rc("add_row_bias")?;
        if x[1].numel() != n {
            return Err(shape_err("add_row_bias", format!("bias {} for {n} columns", x[1].numel())));
        }
        let mut out = x[0].clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(x[1].data()) {
                *v += b;
            }
        }
        Ok(out)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = x[1].numel();
        let db = need[1].then(|| {
            let mut d = Tensor::zeros(x[1].shape());
            for row in g.data().chunks(n) {
                for (acc, &v) in d.data_mut().iter_mut().zip(row) {
                    *acc += v;
                }
            }
            d
        });
        vec![need[0].then(|| g.clone()), db]
    }
}

/// Scales each row of `[m, n]` to unit Euclidean norm (`x / (|x| + eps)`).
pub struct L2NormalizeRows<T> {
    pub eps: T,
}

impl<T: Real> Op<T> for L2NormalizeRows<T> {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (_, n) = x[0].rc("l2_normalize_rows")?;
        let mut out = x[0].clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt() + self.eps;
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(out)
    }
    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (_, n) = x[0].rc("l2_normalize_rows").expect("validated");
        let mut dx = Tensor::zeros(x[0].shape());
        for ((dr, xr), (yr, gr)) in
            dx.data_mut().chunks_mut(n).zip(x[0].data().chunks(n)).zip(y.data().chunks(n).zip(g.data().chunks(n)))
        {
            let r = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = r + self.eps;
            let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
            // y = x / (r + eps); dy/dx = I/(r+eps) - x x^T / (r (r+eps)^2)
            let coef = if r > T::zero() { gy / (r * denom) } else { T::zero() };
            for ((d, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                *d = gv / denom - coef * xv;
            }
        }
        vec![Some(dx)]
    }
}

/// Feature vectors at flat spatial locations: `[C, H, W] -> [N, C]`.
pub struct GatherLocations {
    pub locations: Vec<usize>,
}

impl<T: Real> Op<T> for GatherLocations {
    fn name(&self) -> &'static str {
        "gather_locations"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (c, h, w) = x[0].chw("gather_locations")?;
        let plane = h * w;
        if let Some(&bad) = self.locations.iter().find(|&&l| l >= plane) {
            return Err(invalid("gather_locations", format!("location {bad} outside {h}x{w}")));
        }
        let d = x[0].data();
        let mut out = Vec::with_capacity(self.locations.len() * c);
        for &l in &self.locations {
            out.extend((0..c).map(|ch| d[ch * plane + l]));
        }
        Tensor::from_vec(&[self.locations.len(), c], out)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = x[0].chw("gather_locations").expect("validated");
        let plane = h * w;
        let mut dx = Tensor::zeros(x[0].shape());
        for (row, &l) in g.data().chunks(c).zip(&self.locations) {
            for (ch, &v) in row.iter().enumerate() {
                dx.data_mut()[ch * plane + l] += v;
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over rows of softmax cross-entropy where row `i`'s target class is column `i`.
pub struct DiagonalCrossEntropy;

impl DiagonalCrossEntropy {
    fn softmax_row<T: Real>(row: &[T]) -> (Vec<T>, T) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let lse = max + z.ln();
        (exps.into_iter().map(|e| e / z).collect(), lse)
    }
}

impl<T: Real> Op<T> for DiagonalCrossEntropy {
    fn name(&self) -> &'static str {
        "diagonal_cross_entropy"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (m, n) = x[0].rc("diagonal_cross_entropy")?;
        if m != n || m == 0 {
            return Err(shape_err("diagonal_cross_entropy", format!("need non-empty square logits, got {m}x{n}")));
        }
        let total: T = x[0].data().chunks(n).enumerate().map(|(i, row)| Self::softmax_row(row).1 - row[i]).sum();
        Ok(Tensor::scalar(total / T::lit(m as f64)))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (m, n) = x[0].rc("diagonal_cross_entropy").expect("validated");
        let scale = g.item() / T::lit(m as f64);
        let mut dx = Vec::with_capacity(m * n);
        for (i, row) in x[0].data().chunks(n).enumerate() {
            let (p, _) = Self::softmax_row(row);
            dx.extend(p.into_iter().enumerate().map(|(j, pj)| scale * if i == j { pj - T::one() } else { pj }));
        }
        vec![Some(Tensor::from_vec(x[0].shape(), dx).expect("shape"))]
    }
}
