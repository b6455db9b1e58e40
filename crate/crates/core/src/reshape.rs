//! Feature reshaping.
//!
//! A sentence's token-id vector `x` (one scalar per position) is lifted to
//! the symmetric matrix `X[i][j] = sqrt(x[i] * x[j])`, whose diagonal is `x`
//! itself and whose off-diagonal entries pair every token with every other.
//! A learned per-column projection `x*[j] = Σ_i w[i] X[i][j] + b[j]` folds
//! the matrix back to one value per position, so each position of `x*`
//! carries information from the whole sentence.
//!
//! Padded positions have zero rows and columns in `X` and zero in `x*`.

use crate::tensor::{Param, Result, SeededRng, Tape, Tensor, TensorError, Var};
use crate::text::TokenSequence;

const SYMMETRY_TOL: f64 = 1e-12;

/// How token ids become reals before lifting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IdScale {
    /// Ids as-is.
    Raw,
    /// Ids divided by the vocabulary size.
    Normalized { vocab_size: usize },
}

impl IdScale {
    pub fn new(normalize: bool, vocab_size: usize) -> Self {
        if normalize {
            IdScale::Normalized { vocab_size }
        } else {
            IdScale::Raw
        }
    }

    fn divisor(self) -> f64 {
        match self {
            IdScale::Raw => 1.0,
            IdScale::Normalized { vocab_size } => vocab_size.max(1) as f64,
        }
    }
}

/// Lifted `L_max × L_max` matrix of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshapeMatrix {
    pub x: Tensor,
    pub pad_mask: Vec<bool>,
}

impl ReshapeMatrix {
    pub fn l_max(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.x.data()[i * self.l_max() + j]
    }
}

/// Projection weights: one shared weight per row and one bias per column.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    pub w: Param,
    pub b: Param,
}

impl ProjectionParams {
    /// `w ~ U(-a, a)` with `a = sqrt(6 / (l_max + 1))`, `b = 0`.
    pub fn init(l_max: usize, rng: &SeededRng) -> Self {
        let mut r = rng.split("projection.w");
        let bound = (6.0 / (l_max as f64 + 1.0)).sqrt();
        let w = (0..l_max).map(|_| r.uniform(-bound, bound)).collect();
        Self::from_parts(w, vec![0.0; l_max])
    }

    pub fn from_parts(w: Vec<f64>, b: Vec<f64>) -> Self {
        ProjectionParams {
            w: Param::new("projection.w", Tensor::vector(w)),
            b: Param::new("projection.b", Tensor::vector(b)),
        }
    }

    pub fn l_max(&self) -> usize {
        self.w.value().numel()
    }

    pub fn bind(&self, tape: &Tape) -> BoundProjection {
        BoundProjection {
            w: self.w.bind(tape),
            b: self.b.bind(tape),
        }
    }

    pub fn absorb(&mut self, bound: &BoundProjection, scale: f64) {
        self.w.absorb(&bound.w, scale);
        self.b.absorb(&bound.b, scale);
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct BoundProjection {
    pub w: Var,
    pub b: Var,
}

/// Reshaped feature of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshapedFeature {
    pub x_star: Tensor,
    pub source_hash: u64,
}

/// `X[i][j] = sqrt(x[i] * x[j])` at real positions, zero elsewhere.
pub fn lift(seq: &TokenSequence, scale: IdScale) -> ReshapeMatrix {
    let n = seq.l_max();
    let d = scale.divisor();
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        if !seq.pad_mask[i] {
            continue;
        }
        let xi = seq.ids[i] as f64;
        for j in 0..n {
            if seq.pad_mask[j] {
                let xj = seq.ids[j] as f64;
                x[i * n + j] = (xi * xj).sqrt() / d;
            }
        }
    }
    ReshapeMatrix {
        x: Tensor::matrix(n, n, x).expect("square"),
        pad_mask: seq.pad_mask.clone(),
    }
}

/// Splits `X` into its diagonal and the zero-diagonal symmetric remainder.
pub fn decompose(m: &ReshapeMatrix) -> Result<(Tensor, Tensor)> {
    let n = m.l_max();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(TensorError::Param {
                    op: "decompose",
                    detail: format!("asymmetric at ({i}, {j}): {a} vs {b}"),
                });
            }
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut off = m.x.to_vec();
    for i in 0..n {
        off[i * n + i] = 0.0;
    }
    Ok((Tensor::vector(diag), Tensor::matrix(n, n, off)?))
}

/// `diag(d) + off`.
pub fn reconstruct(diag: &Tensor, off: &Tensor) -> Result<Tensor> {
    let n = diag.numel();
    if off.shape() != [n, n] {
        return Err(TensorError::Shape {
            op: "reconstruct",
            lhs: diag.shape().to_vec(),
            rhs: off.shape().to_vec(),
        });
    }
    let mut x = off.to_vec();
    for i in 0..n {
        x[i * n + i] += diag.data()[i];
    }
    Tensor::matrix(n, n, x)
}

/// Differentiable projection of a lifted matrix onto `L_max` values.
///
/// `x` is the lifted matrix as a tape value (constant or leaf).
pub fn project_on(tape: &Tape, x: &Var, pad_mask: &[bool], proj: &BoundProjection) -> Result<Var> {
    let n = pad_mask.len();
    if x.shape() != [n, n] || proj.w.shape() != [n] || proj.b.shape() != [n] {
        return Err(TensorError::Shape {
            op: "project",
            lhs: x.shape().to_vec(),
            rhs: proj.w.shape().to_vec(),
        });
    }
    let w_row = tape.reshape(&proj.w, vec![1, n])?;
    let mixed = tape.matmul(&w_row, x)?;
    let mixed = tape.reshape(&mixed, vec![n])?;
    let shifted = tape.add(&mixed, &proj.b)?;
    let mask = tape.constant(Tensor::vector(
        pad_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    ));
    tape.mul(&shifted, &mask)
}

/// Value-only projection.
pub fn project(m: &ReshapeMatrix, params: &ProjectionParams) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let x = tape.constant(m.x.clone());
    Ok(project_on(&tape, &x, &m.pad_mask, &bound)?.value().clone())
}

/// `project(lift(seq))` tagged with the sequence's content hash.
pub fn reshape_feature(
    seq: &TokenSequence,
    params: &ProjectionParams,
    scale: IdScale,
) -> Result<ReshapedFeature> {
    let x_star = project(&lift(seq, scale), params)?;
    Ok(ReshapedFeature {
        x_star,
        source_hash: seq.content_hash(),
    })
}

/// Reshaped features of a batch as a `[B × L_max]` tape value, live in the
/// projection parameters.
pub fn reshape_batch_on(
    tape: &Tape,
    seqs: &[&TokenSequence],
    proj: &BoundProjection,
    scale: IdScale,
) -> Result<Var> {
    let rows = seqs
        .iter()
        .map(|seq| {
            let m = lift(seq, scale);
            let x = tape.constant(m.x.clone());
            let row = project_on(tape, &x, &m.pad_mask, proj)?;
            tape.reshape(&row, vec![1, seq.l_max()])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}
