//! Shape arithmetic and broadcasting helpers.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
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

/// True when `from` can be broadcast to `to`.
pub fn broadcastable_to(from: &[usize], to: &[usize]) -> bool {
    broadcast_shape(from, to).as_deref() == Some(to)
}

/// Strides of `inp` viewed with the rank of `out`; broadcast axes get stride 0.
pub fn broadcast_strides(inp: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let base = strides(inp);
    let mut s = vec![0; rank];
    for i in 0..inp.len() {
        let o = rank - inp.len() + i;
        s[o] = if inp[i] == 1 && out[o] != 1 { 0 } else { base[i] };
    }
    s
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out`, where
/// the offsets follow the given (possibly zero) strides.
pub fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        if o >= n {
            break;
        }
        // odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
        assert!(broadcastable_to(&[1, 3, 1, 1], &[2, 3, 4, 4]));
        assert!(!broadcastable_to(&[2, 3], &[3]));
    }

    #[test]
    fn pair_iteration_matches_naive_indexing() {
        let out = [2, 3, 4];
        let a = [2, 1, 4];
        let b = [3, 1];
        let sa = broadcast_strides(&a, &out);
        let sb = broadcast_strides(&b, &out);
        let mut seen = Vec::new();
        for_each_pair(&out, &sa, &sb, |o, x, y| seen.push((o, x, y)));
        let mut expect = Vec::new();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    expect.push((i * 12 + j * 4 + k, i * 4 + k, j));
                }
            }
        }
        assert_eq!(seen, expect);
    }
}
