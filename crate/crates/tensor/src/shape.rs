pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the (larger or equal rank) `target` shape,
/// with zero stride on broadcast axes.
pub(crate) fn aligned_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    assert!(shape.len() <= rank, "cannot align {shape:?} into {target:?}");
    let own = strides(shape);
    let offset = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = shape[i - offset];
                assert!(
                    d == target[i] || d == 1,
                    "shape {shape:?} is not broadcast-compatible with {target:?}"
                );
                if d == 1 {
                    0
                } else {
                    own[i - offset]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, offsets)` for every element of `shape` in row-major order,
/// where `offsets[k]` is the offset into the k-th strided operand.
pub(crate) fn for_each_offset<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, [0; K]);
        return;
    }
    let rank = shape.len();
    let last = shape[rank - 1];
    let last_strides: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; K];
    let mut out = 0;
    loop {
        let mut offs = base;
        for _ in 0..last {
            f(out, offs);
            out += 1;
            for k in 0..K {
                offs[k] += last_strides[k];
            }
        }
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for k in 0..K {
                base[k] += strides[k][axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn odometer_visits_in_row_major_order() {
        let shape = [2, 3];
        let s = strides(&shape);
        let mut seen = vec![];
        for_each_offset(&shape, [&s], |o, [a]| seen.push((o, a)));
        assert_eq!(seen, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }
}
