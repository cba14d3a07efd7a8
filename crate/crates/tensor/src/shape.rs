//! Index arithmetic shared by the tape operations.

use crate::error::{Result, TensorError};

/// Splits a shape around `axis` into `(outer, extent, inner)` so that flat
/// index `(o * extent + k) * inner + i` addresses coordinate `k` on the axis.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// Right-aligned broadcast of two shapes. An extent of 1 stretches to match.
pub(crate) fn broadcast_shape(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let a = if i + lhs.len() >= rank { lhs[i + lhs.len() - rank] } else { 1 };
        let b = if i + rhs.len() >= rank { rhs[i + rhs.len() - rank] } else { 1 };
        out[i] = match (a, b) {
            (a, b) if a == b => a,
            (1, b) => b,
            (a, 1) => a,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source
/// with shape `src`.
pub(crate) fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    // strides of src aligned to out, zero on stretched axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}
