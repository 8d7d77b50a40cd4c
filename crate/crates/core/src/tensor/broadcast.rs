//! Numpy-style broadcasting for binary element-wise ops.

use super::Scalar;

/// Broadcast result shape, or `None` when the shapes are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand maps onto the broadcast output.
#[derive(Debug, Clone)]
pub(crate) enum Layout {
    /// Same shape as the output.
    Same,
    /// A single element repeated everywhere.
    Scalar,
    /// Operand is the trailing `cols` block, repeated across rows.
    Row { cols: usize },
    /// Operand holds one value per row of width `cols`.
    Col { cols: usize },
    /// Anything else: explicit per-output-dimension strides (0 on broadcast axes).
    Strided { strides: Vec<usize> },
}

impl Layout {
    pub(crate) fn of(operand: &[usize], out: &[usize]) -> Layout {
        let n_op: usize = operand.iter().product();
        let n_out: usize = out.iter().product();
        if n_op == n_out {
            return Layout::Same;
        }
        if n_op == 1 {
            return Layout::Scalar;
        }
        let cols = *out.last().unwrap();
        let trailing_nonunit = operand.iter().rev().skip_while(|&&d| d == 1).count();
        // [.., cols] with every leading extent 1
        if operand.last() == Some(&cols) && n_op == cols {
            return Layout::Row { cols };
        }
        // [.., rows, 1] matching every leading output extent
        if operand.last() == Some(&1)
            && n_op * cols == n_out
            && trailing_nonunit + 1 == operand.len()
            && operand.len() == out.len()
            && operand[..operand.len() - 1] == out[..out.len() - 1]
        {
            return Layout::Col { cols };
        }
        let pad = out.len() - operand.len();
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..operand.len()).rev() {
            strides[i + pad] = if operand[i] == 1 { 0 } else { acc };
            acc *= operand[i];
        }
        Layout::Strided { strides }
    }

    /// Operand flat index for every output flat index, in order.
    pub(crate) fn for_each_index(&self, out: &[usize], mut f: impl FnMut(usize, usize)) {
        let n: usize = out.iter().product();
        match self {
            Layout::Same => (0..n).for_each(|i| f(i, i)),
            Layout::Scalar => (0..n).for_each(|i| f(i, 0)),
            Layout::Row { cols } => (0..n).for_each(|i| f(i, i % cols)),
            Layout::Col { cols } => (0..n).for_each(|i| f(i, i / cols)),
            Layout::Strided { strides } => {
                let mut idx = vec![0usize; out.len()];
                let mut off = 0usize;
                for i in 0..n {
                    f(i, off);
                    for d in (0..out.len()).rev() {
                        idx[d] += 1;
                        off += strides[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        off -= strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

/// `out[i] = f(a[ia(i)], b[ib(i)])` over the broadcast shape.
pub(crate) fn zip_map<T: Scalar>(
    a: &[T],
    la: &Layout,
    b: &[T],
    lb: &Layout,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    match (la, lb) {
        (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Layout::Same, Layout::Row { cols }) => {
            let mut out = Vec::with_capacity(n);
            for r in a.chunks(*cols) {
                out.extend(r.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Layout::Same, Layout::Col { cols }) => {
            let mut out = Vec::with_capacity(n);
            for (r, &y) in a.chunks(*cols).zip(b) {
                out.extend(r.iter().map(|&x| f(x, y)));
            }
            out
        }
        _ => {
            let mut ia = vec![0usize; n];
            la.for_each_index(out_shape, |i, j| ia[i] = j);
            let mut out = vec![T::zero(); n];
            lb.for_each_index(out_shape, |i, j| out[i] = f(a[ia[i]], b[j]));
            out
        }
    }
}

/// Sums `grad` (output-shaped) back into the operand layout.
pub(crate) fn reduce_into<T: Scalar>(grad: &[T], layout: &Layout, out_shape: &[usize], acc: &mut [T]) {
    match layout {
        Layout::Same => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
        Layout::Row { cols } => {
            for r in grad.chunks(*cols) {
                acc.iter_mut().zip(r).for_each(|(a, &g)| *a += g);
            }
        }
        Layout::Col { cols } => {
            for (a, r) in acc.iter_mut().zip(grad.chunks(*cols)) {
                *a += r.iter().fold(T::zero(), |s, &g| s + g);
            }
        }
        _ => layout.for_each_index(out_shape, |i, j| acc[j] += grad[i]),
    }
}
