//! Observation store with without-replacement claims: every row is recruited
//! by at most one procedure, ever. Supports uniformly random claims and
//! D-optimal claims (maximize the determinant growth factor).

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

const UNCLAIMED: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pool has {rows} rows, need at least {need}")]
    TooFewRows { rows: usize, need: usize },
}

/// One row of the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T: Scalar> {
    /// Stable row index within the pool.
    pub id: u32,
    pub x: DVector<T>,
    pub y: T,
}

/// Whether procedures see disjoint partitions or the full pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Partitioned,
    Shared,
}

/// Shared observation store. Claim marks are append-only and atomic, so two
/// procedures can never claim the same row even when racing.
#[derive(Debug)]
pub struct DataPool<T: Scalar> {
    rows: Vec<Observation<T>>,
    claimed: Vec<AtomicU32>,
}

impl<T: Scalar> DataPool<T> {
    pub fn from_rows(rows: Vec<(DVector<T>, T)>) -> Arc<Self> {
        let rows: Vec<Observation<T>> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| Observation { id: i as u32, x, y })
            .collect();
        let claimed = (0..rows.len()).map(|_| AtomicU32::new(UNCLAIMED)).collect();
        Arc::new(Self { rows, claimed })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: u32) -> &Observation<T> {
        &self.rows[id as usize]
    }

    pub fn claimed_by(&self, id: u32) -> Option<u32> {
        match self.claimed[id as usize].load(Ordering::Acquire) {
            UNCLAIMED => None,
            p => Some(p),
        }
    }

    pub fn claimed_count(&self) -> usize {
        self.claimed
            .iter()
            .filter(|c| c.load(Ordering::Acquire) != UNCLAIMED)
            .count()
    }

    fn try_claim(&self, id: u32, proc_id: u32) -> bool {
        self.claimed[id as usize]
            .compare_exchange(UNCLAIMED, proc_id, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }
}

/// A procedure's view onto the pool: the set of row ids it may claim from.
#[derive(Debug)]
pub struct PoolHandle<T: Scalar> {
    pool: Arc<DataPool<T>>,
    proc_id: u32,
    /// Visible ids; `order[..cursor]` have been consumed by this handle.
    order: Vec<u32>,
    cursor: usize,
}

impl<T: Scalar> PoolHandle<T> {
    pub fn proc_id(&self) -> u32 {
        self.proc_id
    }

    pub fn pool(&self) -> &Arc<DataPool<T>> {
        &self.pool
    }

    pub fn visible_len(&self) -> usize {
        self.order.len()
    }

    /// Rows still claimable through this handle.
    pub fn remaining(&self) -> usize {
        self.order[self.cursor..]
            .iter()
            .filter(|&&id| self.pool.claimed_by(id).is_none())
            .count()
    }

    /// Claims a uniformly random unclaimed row from the visible set, or
    /// `None` when exhausted. Incremental Fisher-Yates keeps each draw
    /// uniform over the not-yet-consumed remainder.
    pub fn claim_random<R: Rng>(&mut self, rng: &mut R) -> Option<Observation<T>> {
        while self.cursor < self.order.len() {
            let j = rng.random_range(self.cursor..self.order.len());
            self.order.swap(self.cursor, j);
            let id = self.order[self.cursor];
            self.cursor += 1;
            if self.pool.try_claim(id, self.proc_id) {
                return Some(self.pool.row(id).clone());
            }
            // Claimed by another procedure in shared mode; draw again.
        }
        None
    }

    /// Claims the unclaimed visible row maximizing `1 + x^T gram_inv x`,
    /// ties broken by lowest row id. `None` when exhausted.
    pub fn claim_d_optimal(&mut self, gram_inv: &DMatrix<T>) -> Option<Observation<T>> {
        loop {
            let mut best: Option<(T, u32, usize)> = None;
            for (offset, &id) in self.order[self.cursor..].iter().enumerate() {
                if self.pool.claimed_by(id).is_some() {
                    continue;
                }
                let x = &self.pool.row(id).x;
                let score = T::one() + (gram_inv * x).dot(x);
                let better = match &best {
                    None => true,
                    Some((s, bid, _)) => score > *s || (score == *s && id < *bid),
                };
                if better {
                    best = Some((score, id, self.cursor + offset));
                }
            }
            let (_, id, pos) = best?;
            self.order.swap(self.cursor, pos);
            self.cursor += 1;
            if self.pool.try_claim(id, self.proc_id) {
                return Some(self.pool.row(id).clone());
            }
            // Lost the race in shared mode; rescan for the next best.
        }
    }
}

/// Splits the pool into `m` handles. Partitioned mode randomly permutes the
/// rows and hands out contiguous near-equal slices (the first `len % m`
/// partitions get one extra row); shared mode gives every handle the full
/// pool. Procedure ids are `0..m`.
pub fn partition<T: Scalar, R: Rng>(
    pool: &Arc<DataPool<T>>,
    m: usize,
    mode: PoolMode,
    rng: &mut R,
) -> Result<Vec<PoolHandle<T>>, PoolError> {
    assert!(m >= 1);
    if pool.len() < m {
        return Err(PoolError::TooFewRows {
            rows: pool.len(),
            need: m,
        });
    }
    let all: Vec<u32> = (0..pool.len() as u32).collect();
    match mode {
        PoolMode::Shared => Ok((0..m)
            .map(|j| PoolHandle {
                pool: Arc::clone(pool),
                proc_id: j as u32,
                order: all.clone(),
                cursor: 0,
            })
            .collect()),
        PoolMode::Partitioned => {
            let mut perm = all;
            // Fisher-Yates.
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let base = perm.len() / m;
            let extra = perm.len() % m;
            let mut handles = Vec::with_capacity(m);
            let mut start = 0usize;
            for j in 0..m {
                let size = base + usize::from(j < extra);
                handles.push(PoolHandle {
                    pool: Arc::clone(pool),
                    proc_id: j as u32,
                    order: perm[start..start + size].to_vec(),
                    cursor: 0,
                });
                start += size;
            }
            Ok(handles)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool_of(n: usize) -> Arc<DataPool<f64>> {
        DataPool::from_rows(
            (0..n)
                .map(|i| (DVector::from_vec(vec![1.0, i as f64]), i as f64))
                .collect(),
        )
    }

    #[test]
    fn partition_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hs = partition(&pool_of(6000), 2, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(
            hs.iter().map(PoolHandle::visible_len).collect::<Vec<_>>(),
            vec![3000, 3000]
        );
        let hs = partition(&pool_of(10), 3, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(
            hs.iter().map(PoolHandle::visible_len).collect::<Vec<_>>(),
            vec![4, 3, 3]
        );
        let hs = partition(&pool_of(10), 1, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(hs[0].visible_len(), 10);
        assert!(partition(&pool_of(2), 3, PoolMode::Partitioned, &mut rng).is_err());
    }

    #[test]
    fn shared_handles_see_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hs = partition(&pool_of(10), 3, PoolMode::Shared, &mut rng).unwrap();
        assert!(hs.iter().all(|h| h.visible_len() == 10));
    }

    #[test]
    fn claim_random_exhaustion_and_uniqueness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = pool_of(5);
        let mut hs = partition(&pool, 2, PoolMode::Shared, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        // Alternate claims between the two handles until both exhaust.
        loop {
            let mut progressed = false;
            for h in hs.iter_mut() {
                if let Some(obs) = h.claim_random(&mut rng) {
                    assert!(seen.insert(obs.id), "row {} claimed twice", obs.id);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        assert_eq!(seen.len(), 5);
        assert_eq!(pool.claimed_count(), 5);
        assert!(hs[0].claim_random(&mut rng).is_none());
    }

    #[test]
    fn single_row_claim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = pool_of(1);
        let mut hs = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(hs[0].claim_random(&mut rng).unwrap().id, 0);
        assert!(hs[0].claim_random(&mut rng).is_none());
    }

    #[test]
    fn deterministic_claim_sequence() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let pool = pool_of(50);
            let mut hs = partition(&pool, 2, PoolMode::Partitioned, &mut rng).unwrap();
            let mut ids = Vec::new();
            for _ in 0..20 {
                for h in hs.iter_mut() {
                    ids.push(h.claim_random(&mut rng).map(|o| o.id));
                }
            }
            ids
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn d_optimal_dominance_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = DataPool::from_rows(vec![
            (DVector::from_vec(vec![1.0, 0.0]), 0.0),
            (DVector::from_vec(vec![1.0, 3.0]), 0.0),
        ]);
        let mut hs = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        let eye = DMatrix::identity(2, 2);
        // Scores are 2 and 11.
        assert_eq!(hs[0].claim_d_optimal(&eye).unwrap().id, 1);

        let pool = DataPool::from_rows(vec![
            (DVector::from_vec(vec![1.0, 2.0]), 0.0),
            (DVector::from_vec(vec![1.0, 2.0]), 0.0),
            (DVector::from_vec(vec![1.0, 2.0]), 0.0),
        ]);
        let mut hs = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(hs[0].claim_d_optimal(&eye).unwrap().id, 0);
        assert_eq!(hs[0].claim_d_optimal(&eye).unwrap().id, 1);
    }

    #[test]
    fn d_optimal_matches_brute_force_and_storage_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 3;
        let rows: Vec<(DVector<f64>, f64)> = (0..100)
            .map(|_| (DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0)), 0.0))
            .collect();
        let b = DMatrix::<f64>::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let gram = &b * b.transpose() + DMatrix::identity(p, p);
        let gram_inv = gram.clone().try_inverse().unwrap();

        // Brute force: recompute det(gram + x x^T) for every candidate.
        let best_brute = rows
            .iter()
            .enumerate()
            .max_by(|(ia, (xa, _)), (ib, (xb, _))| {
                let da = (&gram + xa * xa.transpose()).determinant();
                let db = (&gram + xb * xb.transpose()).determinant();
                da.partial_cmp(&db).unwrap().then(ib.cmp(ia)) // prefer lower index on ties
            })
            .unwrap()
            .0 as u32;

        let pool = DataPool::from_rows(rows.clone());
        let mut hs = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        assert_eq!(hs[0].claim_d_optimal(&gram_inv).unwrap().id, best_brute);

        // Storing the rows in a different order must not change the winner.
        let mut shuffled: Vec<(usize, (DVector<f64>, f64))> =
            rows.into_iter().enumerate().collect();
        shuffled.reverse();
        let ids: Vec<usize> = shuffled.iter().map(|(i, _)| *i).collect();
        let pool2 = DataPool::from_rows(shuffled.into_iter().map(|(_, r)| r).collect());
        let mut hs2 = partition(&pool2, 1, PoolMode::Partitioned, &mut rng).unwrap();
        let winner2 = hs2[0].claim_d_optimal(&gram_inv).unwrap().id;
        assert_eq!(ids[winner2 as usize] as u32, best_brute);
    }
}
