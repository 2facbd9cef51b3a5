//! Dense matrix arithmetic and the Householder / compact-WY rotation machinery.
//!
//! Matrices are row-major `f64` with a fixed inner summation order, so results
//! are bit-reproducible across runs. The compact-WY form stores a product of
//! Householder reflectors `H_1 H_2 ... H_m` as `Q = I - V T V^T`, where `V`
//! stacks the unit reflector vectors and `T` is upper triangular. All rotation
//! math runs in full precision; quantization lives elsewhere.

use crate::error::{Error, Result};

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                expected: format!("{} elements", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Entrywise max-magnitude (the ∞-norm used all over the fault analysis).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::sub",
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Standard product `self * rhs` with a fixed i-k-j loop: for each output
    /// element the sum over k runs in ascending order, so results are
    /// deterministic across runs and thread counts.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                expected: format!("lhs.cols == rhs.rows ({})", self.cols),
                got: format!("{}", rhs.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Unit reflector vector targeting one activation channel.
#[derive(Debug, Clone)]
pub struct HouseholderVector {
    v: Vec<f64>,
    target_channel: usize,
}

impl HouseholderVector {
    /// Wrap a raw vector, normalizing it to unit 2-norm.
    pub fn new(mut v: Vec<f64>, target_channel: usize) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(
                "reflector vector must be nonzero and finite".into(),
            ));
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(HouseholderVector { v, target_channel })
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn target_channel(&self) -> usize {
        self.target_channel
    }
}

/// Reflector that maps the outlier axis `e_k` onto the uniform direction
/// `u = (d^-1/2, ..., d^-1/2)`: `v = (e_k - u) / ||e_k - u||`.
pub fn householder_from_outlier(d: usize, k: usize) -> Result<HouseholderVector> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "reflection undefined for dimension {d}"
        )));
    }
    if k >= d {
        return Err(Error::OutOfBounds {
            what: "channel",
            index: k,
            bound: d,
        });
    }
    let u = (d as f64).sqrt().recip();
    let mut v = vec![-u; d];
    v[k] += 1.0;
    HouseholderVector::new(v, k)
}

/// Apply `H = I - 2 v v^T` from the right: `X H = X - 2 (X v) v^T`,
/// without materializing `H`.
pub fn apply_householder(x: &Matrix, h: &HouseholderVector) -> Result<Matrix> {
    if x.cols() != h.dim() {
        return Err(Error::DimensionMismatch {
            op: "apply_householder",
            expected: format!("{} cols", h.dim()),
            got: format!("{}", x.cols()),
        });
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let dot: f64 = row.iter().zip(h.v()).map(|(a, b)| a * b).sum();
        let out_row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        for (o, &vj) in out_row.iter_mut().zip(h.v()) {
            *o -= 2.0 * dot * vj;
        }
    }
    Ok(out)
}

/// Compact WY factors of an accumulated reflector product
/// `Q = H_1 H_2 ... H_m = I - V T V^T`.
#[derive(Debug, Clone)]
pub struct CompactWY {
    /// d×m stacked unit reflector vectors.
    v: Matrix,
    /// m×m upper-triangular factor.
    t: Matrix,
    /// Channels each reflector was built for, in append order.
    protected_channels: Vec<usize>,
    dim: usize,
}

impl CompactWY {
    pub fn empty(dim: usize) -> Self {
        CompactWY {
            v: Matrix::zeros(dim, 0),
            t: Matrix::zeros(0, 0),
            protected_channels: Vec::new(),
            dim,
        }
    }

    /// Rebuild from raw factors, e.g. after container deserialization.
    pub fn from_parts(v: Matrix, t: Matrix, protected_channels: Vec<usize>) -> Result<Self> {
        let dim = v.rows();
        let m = v.cols();
        if t.rows() != m || t.cols() != m || protected_channels.len() != m {
            return Err(Error::DimensionMismatch {
                op: "CompactWY::from_parts",
                expected: format!("T {m}x{m} and {m} channels"),
                got: format!("T {}x{}, {} channels", t.rows(), t.cols(), protected_channels.len()),
            });
        }
        Ok(CompactWY {
            v,
            t,
            protected_channels,
            dim,
        })
    }

    pub fn m(&self) -> usize {
        self.v.cols()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn v_factor(&self) -> &Matrix {
        &self.v
    }

    pub fn t_factor(&self) -> &Matrix {
        &self.t
    }

    pub fn protected_channels(&self) -> &[usize] {
        &self.protected_channels
    }
}

/// Append one reflector: `Q_new = Q_old * H`. `V` gains the column `v` and
/// `T` gains the column `-2 T_old (V_old^T v)` above a diagonal entry 2
/// (blocked-Householder recurrence with coefficient 2 for unit reflectors).
pub fn wy_append(wy: &CompactWY, h: &HouseholderVector) -> Result<CompactWY> {
    if h.dim() != wy.dim {
        return Err(Error::DimensionMismatch {
            op: "wy_append",
            expected: format!("reflector of dim {}", wy.dim),
            got: format!("{}", h.dim()),
        });
    }
    let d = wy.dim;
    let m = wy.m();

    // V^T v, then -2 T (V^T v)
    let mut vt_v = vec![0.0; m];
    for (j, slot) in vt_v.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            acc += wy.v.get(i, j) * h.v()[i];
        }
        *slot = acc;
    }
    let mut t_col = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for (j, &x) in vt_v.iter().enumerate() {
            acc += wy.t.get(i, j) * x;
        }
        t_col[i] = -2.0 * acc;
    }

    let mut v_new = Matrix::zeros(d, m + 1);
    for i in 0..d {
        for j in 0..m {
            v_new.set(i, j, wy.v.get(i, j));
        }
        v_new.set(i, m, h.v()[i]);
    }
    let mut t_new = Matrix::zeros(m + 1, m + 1);
    for i in 0..m {
        for j in i..m {
            t_new.set(i, j, wy.t.get(i, j));
        }
        t_new.set(i, m, t_col[i]);
    }
    t_new.set(m, m, 2.0);

    let mut channels = wy.protected_channels.clone();
    channels.push(h.target_channel());
    Ok(CompactWY {
        v: v_new,
        t: t_new,
        protected_channels: channels,
        dim: d,
    })
}

/// Materialize `Q = I - V T V^T`. For tests and the white-box attack; the
/// inference path never calls this.
pub fn wy_to_dense(wy: &CompactWY) -> Matrix {
    let d = wy.dim;
    let mut q = Matrix::identity(d);
    if wy.m() == 0 {
        return q;
    }
    let tv = wy.t.matmul(&wy.v.transpose()).expect("shape by construction");
    let vtv = wy.v.matmul(&tv).expect("shape by construction");
    for i in 0..d {
        for j in 0..d {
            q.set(i, j, q.get(i, j) - vtv.get(i, j));
        }
    }
    q
}

/// `X Q` evaluated as `X - ((X V) T) V^T` with two skinny products.
pub fn apply_wy_right(x: &Matrix, wy: &CompactWY) -> Result<Matrix> {
    if x.cols() != wy.dim {
        return Err(Error::DimensionMismatch {
            op: "apply_wy_right",
            expected: format!("{} cols", wy.dim),
            got: format!("{}", x.cols()),
        });
    }
    if wy.m() == 0 {
        return Ok(x.clone());
    }
    let xv = x.matmul(&wy.v)?;
    let xvt = xv.matmul(&wy.t)?;
    let corr = xvt.matmul(&wy.v.transpose())?;
    x.sub(&corr)
}

/// `Q^T W` evaluated as `W - V (T^T (V^T W))`, the offline fusion product.
pub fn apply_wy_transpose_left(w: &Matrix, wy: &CompactWY) -> Result<Matrix> {
    if w.rows() != wy.dim {
        return Err(Error::DimensionMismatch {
            op: "apply_wy_transpose_left",
            expected: format!("{} rows", wy.dim),
            got: format!("{}", w.rows()),
        });
    }
    if wy.m() == 0 {
        return Ok(w.clone());
    }
    let vt_w = wy.v.transpose().matmul(w)?;
    let tt_vt_w = wy.t.transpose().matmul(&vt_w)?;
    let corr = wy.v.matmul(&tt_vt_w)?;
    w.sub(&corr)
}
