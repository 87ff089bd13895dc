//! Minimum-cost injective assignment with a deterministic tie-break.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use crate::error::{Error, Result};

/// Dense `rows x cols` cost matrix, rows being ground-truth tuples and
/// columns predictions. Entries may be negative but must be finite.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength { shape: vec![rows, cols], got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// `pairs[g]` is the prediction assigned to ground truth `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// `(gt, prediction)` pairs ordered by prediction index.
    pub fn by_prediction(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.pairs.iter().enumerate().map(|(g, &p)| (g, p)).collect();
        v.sort_by_key(|&(_, p)| p);
        v
    }

    /// Ground truth matched to each prediction, `None` when unmatched.
    pub fn matched_gt(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; predictions];
        for (g, &p) in self.pairs.iter().enumerate() {
            out[p] = Some(g);
        }
        out
    }
}

/// Cost extended with a secondary integer key that orders assignments
/// lexicographically when the primary costs tie.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Key {
    main: f64,
    tie: i128,
}

impl Key {
    const ZERO: Key = Key { main: 0.0, tie: 0 };
    const INF: Key = Key { main: f64::INFINITY, tie: 0 };
}

impl Add for Key {
    type Output = Key;
    fn add(self, o: Key) -> Key {
        Key { main: self.main + o.main, tie: self.tie + o.tie }
    }
}

impl Sub for Key {
    type Output = Key;
    fn sub(self, o: Key) -> Key {
        Key { main: self.main - o.main, tie: self.tie - o.tie }
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Key) -> Option<Ordering> {
        match self.main.partial_cmp(&o.main)? {
            Ordering::Equal => Some(self.tie.cmp(&o.tie)),
            ord => Some(ord),
        }
    }
}

/// Place values `cols^(rows-1-g)` when the full key range fits comfortably
/// in an `i128`; otherwise ties fall back to the solver's natural order.
fn tie_weights(rows: usize, cols: usize) -> Vec<i128> {
    let bits = (rows as f64) * (cols.max(2) as f64).log2();
    if bits > 100.0 {
        return vec![0; rows];
    }
    let mut w = vec![1i128; rows];
    for g in (0..rows.saturating_sub(1)).rev() {
        w[g] = w[g + 1] * cols as i128;
    }
    w
}

/// Globally minimal injective assignment of every row to a distinct column.
/// Among optimal assignments the lexicographically smallest `pairs` vector is
/// returned.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (c.rows, c.cols);
    if n > m {
        return Err(Error::TooManyTargets { targets: n, predictions: m });
    }
    if n == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    let weights = tie_weights(n, m);
    let key = |i: usize, j: usize| Key { main: c.get(i - 1, j - 1), tie: weights[i - 1] * (j - 1) as i128 };

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let mut u = vec![Key::ZERO; n + 1];
    let mut v = vec![Key::ZERO; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Key::INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = Key::INF;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = key(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            pairs[owner[j] - 1] = j - 1;
        }
    }
    let cost = pairs.iter().enumerate().map(|(g, &p)| c.get(g, p)).sum();
    Ok(Assignment { pairs, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(c: &CostMatrix) -> Assignment {
        fn rec(c: &CostMatrix, g: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<Assignment>) {
            if g == c.rows() {
                let cost: f64 = cur.iter().enumerate().map(|(g, &p)| c.get(g, p)).sum();
                if best.as_ref().map_or(true, |b| cost < b.cost) {
                    *best = Some(Assignment { pairs: cur.clone(), cost });
                }
                return;
            }
            for p in 0..c.cols() {
                if !used[p] {
                    used[p] = true;
                    cur.push(p);
                    rec(c, g + 1, used, cur, best);
                    cur.pop();
                    used[p] = false;
                }
            }
        }
        let mut best = None;
        rec(c, 0, &mut vec![false; c.cols()], &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn small_examples() {
        let a = hungarian(&CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!((a.pairs, a.cost), (vec![0, 1], 0.0));
        let a = hungarian(&CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 1.0]).unwrap()).unwrap();
        assert_eq!((a.pairs, a.cost), (vec![0, 1], 2.0));
        // the other permutation costs 2 + 3 = 5
        assert_eq!(2.0 + 3.0, 5.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let c = CostMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![0, 1]);
        let c = CostMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![1, 0]);
    }

    #[test]
    fn rejects_more_rows_than_columns_and_nan() {
        assert!(matches!(
            hungarian(&CostMatrix::new(3, 2, vec![0.0; 6]).unwrap()),
            Err(Error::TooManyTargets { targets: 3, predictions: 2 })
        ));
        assert!(matches!(CostMatrix::new(1, 2, vec![0.0, f64::NAN]), Err(Error::NonFiniteCost { row: 0, col: 1 })));
    }

    #[test]
    fn empty_rows_give_empty_assignment() {
        let a = hungarian(&CostMatrix::new(0, 4, vec![]).unwrap()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn large_matrix_stays_injective() {
        let c = CostMatrix::from_fn(30, 100, |i, j| ((i * 37 + j * 11) % 17) as f64 - 8.0).unwrap();
        let a = hungarian(&c).unwrap();
        let mut seen = a.pairs.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 30);
    }

    fn small_matrix() -> impl Strategy<Value = CostMatrix> {
        (1usize..=5, 0usize..=3).prop_flat_map(|(rows, extra)| {
            let cols = rows + extra;
            prop::collection::vec(-8i32..8, rows * cols)
                .prop_map(move |d| CostMatrix::new(rows, cols, d.into_iter().map(|x| f64::from(x) / 4.0).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_including_ties(c in small_matrix()) {
            let a = hungarian(&c).unwrap();
            let b = brute(&c);
            prop_assert_eq!(a.cost, b.cost);
            prop_assert_eq!(a.pairs, b.pairs);
        }

        #[test]
        fn row_shift_keeps_assignment(c in small_matrix(), row in 0usize..5, shift in -16i32..16) {
            let row = row % c.rows();
            let k = f64::from(shift) / 2.0;
            let shifted = CostMatrix::from_fn(c.rows(), c.cols(), |i, j| c.get(i, j) + if i == row { k } else { 0.0 }).unwrap();
            let a = hungarian(&c).unwrap();
            let b = hungarian(&shifted).unwrap();
            prop_assert_eq!(&a.pairs, &b.pairs);
            prop_assert_eq!(a.cost + k, b.cost);
        }
    }
}
