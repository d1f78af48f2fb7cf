use ndarray::Array2;

use super::rng::SplitMix64;
use crate::error::{Error, Result};

/// A bijection on `N` block slots, the key's `lt` vector.
///
/// Stored 0-based; [`Permutation::one_based`] gives the `{1, …, N}` form used
/// in manifests and reports. Slot `i` of a permuted sequence receives source
/// element `lt[i]` (gather form).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn from_zero_based(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &j in &map {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::param(format!(
                    "{map:?} is not a permutation of 0..{n}"
                )));
            }
        }
        Ok(Permutation(map))
    }

    pub fn from_one_based(lt: &[usize]) -> Result<Self> {
        let map = lt
            .iter()
            .map(|&v| {
                v.checked_sub(1)
                    .ok_or_else(|| Error::param("permutation values start at 1"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_zero_based(map)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|&v| v + 1).collect()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Permutation(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// `out[i] = items[self[i]]`.
    pub fn gather<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.0.len(), "permutation length mismatch");
        self.0.iter().map(|&j| items[j].clone()).collect()
    }

    /// Dense `n × n` matrix with a one at `(i, self[i])`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.0.len();
        let mut m = Array2::zeros((n, n));
        for (i, &j) in self.0.iter().enumerate() {
            m[[i, j]] = 1.0;
        }
        m
    }
}

/// Fisher–Yates shuffle of `0..n` drawn from `rng`.
pub fn shuffle_from_stream(rng: &mut SplitMix64, n: usize) -> Permutation {
    let mut map: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        map.swap(i, j);
    }
    Permutation(map)
}

/// The key's block permutation `lt` for `n` blocks.
pub fn make_permutation(seed: u64, n: usize) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::param("number of blocks must be at least 1"));
    }
    Ok(shuffle_from_stream(&mut SplitMix64::new(seed), n))
}

/// `E_b`: the `(N+1) × (N+1)` permutation that fixes the class-token slot 0
/// and moves patch slot `i` to read from slot `lt[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMatrix {
    lt: Permutation,
}

impl PermutationMatrix {
    pub fn size(&self) -> usize {
        self.lt.len() + 1
    }

    pub fn block_permutation(&self) -> &Permutation {
        &self.lt
    }

    /// The full token-slot permutation, slot 0 included.
    pub fn slot_permutation(&self) -> Permutation {
        let mut map = Vec::with_capacity(self.size());
        map.push(0);
        map.extend(self.lt.as_slice().iter().map(|&j| j + 1));
        Permutation(map)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.slot_permutation().to_matrix()
    }

    /// `E_b · m` computed as a row gather.
    pub fn apply_rows(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        if m.nrows() != self.size() {
            return Err(Error::dim(format!(
                "E_b is {0}x{0} but the operand has {1} rows",
                self.size(),
                m.nrows()
            )));
        }
        let perm = self.slot_permutation();
        Ok(m.select(ndarray::Axis(0), perm.as_slice()))
    }
}

pub fn build_eb(lt: &Permutation) -> PermutationMatrix {
    PermutationMatrix { lt: lt.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_block() {
        assert_eq!(make_permutation(99, 1).unwrap().one_based(), vec![1]);
    }

    #[test]
    fn worked_example_matrix() {
        let lt = Permutation::from_one_based(&[1, 3, 2]).unwrap();
        let eb = build_eb(&lt).to_dense();
        let expected = array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        assert_eq!(eb, expected);
    }

    #[test]
    fn shuffle_is_bijection() {
        for seed in 0..20 {
            let mut sorted = make_permutation(seed, 50).unwrap().one_based();
            sorted.sort_unstable();
            assert_eq!(sorted, (1..=50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn identity_and_involution() {
        let id = build_eb(&Permutation::identity(4)).to_dense();
        assert_eq!(id, Array2::<f64>::eye(5));
        let swap = build_eb(&Permutation::from_one_based(&[2, 1]).unwrap()).to_dense();
        assert_eq!(swap.dot(&swap), Array2::<f64>::eye(3));
    }

    #[test]
    fn apply_rows_matches_dense_product() {
        let lt = make_permutation(4, 6).unwrap();
        let eb = build_eb(&lt);
        let m = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(eb.apply_rows(&m).unwrap(), eb.to_dense().dot(&m));
        assert!(eb.apply_rows(&Array2::zeros((6, 3))).is_err());
    }

    #[test]
    fn invalid_vectors_rejected() {
        assert!(Permutation::from_one_based(&[1, 1]).is_err());
        assert!(Permutation::from_one_based(&[0, 1]).is_err());
        assert!(Permutation::from_one_based(&[1, 3]).is_err());
        assert!(make_permutation(0, 0).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = make_permutation(8, 12).unwrap();
        let items: Vec<usize> = (0..12).collect();
        assert_eq!(p.inverse().gather(&p.gather(&items)), items);
    }
}
