//! Dense FFN kernel with and without alignment padding.
//!
//! The padded form inserts zero column blocks into the up projection and
//! matching zero row blocks into the down projection, one block after every
//! TP shard. The product `f(I·U')·D'` equals `f(I·U)·D` regardless of `f(0)`
//! because every padded intermediate column meets a zero row of `D'`.
//!
//! Matrix multiply is a plain triple loop with a fixed summation order so
//! results are reproducible bit for bit.

use num_traits::Float;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FfnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, FfnError> {
        if data.len() != rows * cols {
            return Err(FfnError::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite_value()) {
            return Err(FfnError::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| T::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map(&self, mut f: impl FnMut(&T) -> T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(&mut f).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, FfnError> {
        if self.cols != rhs.rows {
            return Err(FfnError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc = acc + self.get(i, k).clone() * rhs.get(k, j).clone();
                }
                out.data[i * rhs.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, FfnError> {
        if self.shape() != rhs.shape() {
            return Err(FfnError::ShapeMismatch(format!(
                "adding {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a.clone() + b.clone())
                .collect(),
        })
    }

    /// Columns `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |r, c| self.get(r, start + c).clone())
    }

    /// Rows `[start, start + height)`.
    pub fn row_block(&self, start: usize, height: usize) -> Self {
        Self::from_fn(height, self.cols, |r, c| self.get(start + r, c).clone())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, FfnError> {
        if self.shape() != other.shape() {
            return Err(FfnError::ShapeMismatch(format!(
                "comparing {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut worst = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (a.clone() - b.clone()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }
}

/// Elementwise map applied between the two projections.
pub trait Elementwise<T> {
    fn apply(&self, x: &T) -> T;
}

impl<T, F: Fn(&T) -> T> Elementwise<T> for F {
    fn apply(&self, x: &T) -> T {
        self(x)
    }
}

/// Activations used by common MLP blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    GeluTanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Relu,
        Activation::Silu,
        Activation::GeluTanh,
    ];

    pub fn eval<T: Float>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::GeluTanh => {
                let half = T::from(0.5).unwrap();
                let c = T::from((2.0 / std::f64::consts::PI).sqrt()).unwrap();
                let k = T::from(0.044_715).unwrap();
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
        }
    }
}

impl<T: Float> Elementwise<T> for Activation {
    fn apply(&self, x: &T) -> T {
        self.eval(*x)
    }
}

/// `f(I·U)·D`.
pub fn ffn<T: Scalar, F: Elementwise<T> + ?Sized>(
    input: &DenseMatrix<T>,
    up: &DenseMatrix<T>,
    down: &DenseMatrix<T>,
    f: &F,
) -> Result<DenseMatrix<T>, FfnError> {
    if up.cols() != down.rows() {
        return Err(FfnError::ShapeMismatch(format!(
            "up has {} columns but down has {} rows",
            up.cols(),
            down.rows()
        )));
    }
    let hidden = input.matmul(up)?.map(|x| f.apply(x));
    hidden.matmul(down)
}

/// Insert `pad` zero columns after each of the `tp` column shards of `up`
/// and matching zero rows after each row shard of `down`.
pub fn pad_weights<T: Scalar>(
    up: &DenseMatrix<T>,
    down: &DenseMatrix<T>,
    tp: usize,
    pad: usize,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>), FfnError> {
    if tp == 0 || !up.cols().is_multiple_of(tp) {
        return Err(FfnError::ShapeMismatch(format!(
            "{} columns do not split into {tp} shards",
            up.cols()
        )));
    }
    if down.rows() != up.cols() {
        return Err(FfnError::ShapeMismatch(format!(
            "down has {} rows, up has {} columns",
            down.rows(),
            up.cols()
        )));
    }
    let shard = up.cols() / tp;
    let stride = shard + pad;
    // padded index -> original index, None inside a pad block
    let source = |i: usize| (i % stride < shard).then(|| (i / stride) * shard + i % stride);
    let width = tp * stride;
    let up_p = DenseMatrix::from_fn(up.rows(), width, |r, c| match source(c) {
        Some(o) => up.get(r, o).clone(),
        None => T::zero(),
    });
    let down_p = DenseMatrix::from_fn(width, down.cols(), |r, c| match source(r) {
        Some(o) => down.get(o, c).clone(),
        None => T::zero(),
    });
    Ok((up_p, down_p))
}

/// `f(I·U')·D'` on already padded weights.
pub fn ffn_padded<T: Scalar, F: Elementwise<T> + ?Sized>(
    input: &DenseMatrix<T>,
    up_padded: &DenseMatrix<T>,
    down_padded: &DenseMatrix<T>,
    f: &F,
) -> Result<DenseMatrix<T>, FfnError> {
    ffn(input, up_padded, down_padded, f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedFfn<T> {
    pub partials: Vec<DenseMatrix<T>>,
    pub reduced: DenseMatrix<T>,
}

/// Column-parallel up projection, row-parallel down projection, then a sum
/// over workers standing in for the all-reduce.
pub fn shard_ffn<T: Scalar, F: Elementwise<T> + ?Sized>(
    input: &DenseMatrix<T>,
    up_padded: &DenseMatrix<T>,
    down_padded: &DenseMatrix<T>,
    tp: usize,
    f: &F,
) -> Result<ShardedFfn<T>, FfnError> {
    if tp == 0 || !up_padded.cols().is_multiple_of(tp) || down_padded.rows() != up_padded.cols() {
        return Err(FfnError::ShapeMismatch(format!(
            "cannot shard {}x{} / {}x{} over {tp} workers",
            up_padded.rows(),
            up_padded.cols(),
            down_padded.rows(),
            down_padded.cols()
        )));
    }
    let width = up_padded.cols() / tp;
    let partials = (0..tp)
        .map(|w| {
            let u = up_padded.column_block(w * width, width);
            let d = down_padded.row_block(w * width, width);
            ffn(input, &u, &d, f)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reduced = all_reduce(&partials)?;
    Ok(ShardedFfn { partials, reduced })
}

/// Sum of per-worker partial products in worker order.
pub fn all_reduce<T: Scalar>(partials: &[DenseMatrix<T>]) -> Result<DenseMatrix<T>, FfnError> {
    let (first, rest) = partials
        .split_first()
        .ok_or_else(|| FfnError::ShapeMismatch("no partials to reduce".into()))?;
    rest.iter().try_fold(first.clone(), |acc, p| acc.add(p))
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "gelu" | "gelu-tanh" => Ok(Activation::GeluTanh),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// Shape of one randomized padding check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckShape {
    pub rows: usize,
    pub hidden: usize,
    /// Intermediate size; must split into `tp` shards.
    pub inter: usize,
    pub tp: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// max |f(I·U')·D' - f(I·U)·D|
    pub padded_diff: f64,
    /// max |all_reduce(shards) - f(I·U)·D|
    pub sharded_diff: f64,
}

/// Draw entries uniformly from [-1, 1], then compare the padded and sharded
/// evaluations against the plain FFN in `f64`.
pub fn random_check(
    shape: CheckShape,
    act: Activation,
    rng: &mut impl rand::Rng,
) -> Result<CheckReport, FfnError> {
    let mut draw =
        |r: usize, c: usize| DenseMatrix::<f64>::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
    let input = draw(shape.rows, shape.hidden);
    let up = draw(shape.hidden, shape.inter);
    let down = draw(shape.inter, shape.hidden);
    let plain = ffn(&input, &up, &down, &act)?;
    let (up_p, down_p) = pad_weights(&up, &down, shape.tp, shape.pad)?;
    let padded = ffn_padded(&input, &up_p, &down_p, &act)?;
    let sharded = shard_ffn(&input, &up_p, &down_p, shape.tp, &act)?;
    Ok(CheckReport {
        padded_diff: padded.max_abs_diff(&plain)?,
        sharded_diff: sharded.reduced.max_abs_diff(&plain)?,
    })
}
