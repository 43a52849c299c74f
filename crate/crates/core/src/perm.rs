//! Permutation enumeration shared by PIT, window alignment and evaluation.

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    // Standard next-permutation walk.
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

/// Number of positions a permutation moves away from identity.
pub fn displacement(perm: &[usize]) -> usize {
    perm.iter().enumerate().filter(|(i, p)| i != *p).count()
}

/// `result[i] = outer[inner[i]]`.
pub fn compose(outer: &[usize], inner: &[usize]) -> Vec<usize> {
    inner.iter().map(|&i| outer[i]).collect()
}

pub fn is_identity(perm: &[usize]) -> bool {
    displacement(perm) == 0
}
