use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array. Scalars have shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let expected = numel_of(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() {
            return Err(TensorError::Axis {
                op: "get",
                axis: index.len(),
                rank: self.shape.len(),
            });
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(TensorError::Index {
                    op: "get",
                    index: i,
                    extent: d,
                });
            }
            flat = flat * d + i;
        }
        Ok(self.data[flat])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
                detail: "element counts differ".into(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let width = self.numel() / self.shape.first().copied().unwrap_or(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// View of a tensor along one axis as `(outer, len, inner)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    pub fn offset(&self, o: usize, i: usize) -> usize {
        o * self.len * self.inner + i
    }

    /// Calls `f(base, stride)` for each 1-D lane along the axis.
    pub fn for_each_lane(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(self.offset(o, i), self.inner);
            }
        }
    }
}

/// Result of [`top_k`]: the selected scores and their indices along the axis,
/// laid out with the axis extent replaced by `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK<T> {
    pub values: Tensor<T>,
    pub indices: Vec<usize>,
}

/// The `k` largest entries along `axis`, ordered by descending score with ties
/// going to the lower index. Not differentiable.
pub fn top_k<T: Scalar>(scores: &Tensor<T>, k: usize, axis: usize) -> Result<TopK<T>> {
    let split = AxisSplit::new("top_k", scores.shape(), axis)?;
    if k == 0 || k > split.len {
        return Err(TensorError::TopK {
            k,
            extent: split.len,
        });
    }
    let mut out_shape = scores.shape().to_vec();
    out_shape[axis] = k;
    let out_split = AxisSplit {
        outer: split.outer,
        len: k,
        inner: split.inner,
    };
    let mut values = vec![T::zero(); numel_of(&out_shape)];
    let mut indices = vec![0usize; values.len()];
    let data = scores.data();
    let mut order: Vec<usize> = Vec::with_capacity(split.len);
    for o in 0..split.outer {
        for i in 0..split.inner {
            let base = split.offset(o, i);
            let at = |j: usize| data[base + j * split.inner];
            order.clear();
            order.extend(0..split.len);
            // total order: descending score, NaN last, then ascending index
            let cmp = |&a: &usize, &b: &usize| {
                let (x, y) = (at(a), at(b));
                y.partial_cmp(&x)
                    .unwrap_or_else(|| x.is_nan().cmp(&y.is_nan()))
                    .then(a.cmp(&b))
            };
            if k < split.len {
                order.select_nth_unstable_by(k - 1, cmp);
                order.truncate(k);
            }
            order.sort_unstable_by(cmp);
            let out_base = out_split.offset(o, i);
            for (r, &j) in order.iter().enumerate() {
                values[out_base + r * split.inner] = at(j);
                indices[out_base + r * split.inner] = j;
            }
        }
    }
    Ok(TopK {
        values: Tensor::from_parts(out_shape, values),
        indices,
    })
}

/// Output shape of a trailing-dimension broadcast, or an error.
///
/// The smaller operand must either hold a single element or have a shape equal
/// to the trailing dimensions of the larger one.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (big, small) = if numel_of(a) >= numel_of(b) && a.len() >= b.len() {
        (a, b)
    } else {
        (b, a)
    };
    let fits = numel_of(small) == 1 || big.ends_with(small);
    if !fits {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
            detail: "only trailing-dimension broadcasting is supported".into(),
        });
    }
    Ok(big.to_vec())
}

/// Sums `grad` (of `out_len` elements) down onto an operand that was
/// broadcast by repetition of its `n` elements.
pub(crate) fn reduce_broadcast<T: Scalar>(grad: &[T], n: usize) -> Vec<T> {
    if grad.len() == n {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in grad.chunks_exact(n) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

/// Strides of a row-major shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `data` (shaped `shape`) into the axis order given by `perm`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        for j in 0..inner {
            out.push(data[src + j * inner_stride]);
        }
        // advance the odometer over all but the innermost output axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
