//! Per-instance memory bank of unit-norm invariant embeddings. Supplies
//! the contrastive negatives and each instance's past reference, updated
//! once per step by a renormalized exponential moving average.

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::Real;
use ndarray::{Array2, ArrayView1, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashSet;

#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    slots: Array2<T>,
    momentum: f64,
    rng: ChaCha8Rng,
}

/// Sampling generator state, persisted so a restored run resumes the exact
/// negative-draw sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankRngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl<T: Real> MemoryBank<T> {
    /// Slots start as i.i.d. random unit vectors.
    pub fn init(n_instances: usize, dim: usize, seed: u64) -> Self {
        assert!(n_instances >= 1 && dim >= 1);
        let mut init_rng = rng::derive_rng(seed, &[domain::BANK_INIT]);
        let normal = StandardNormal;
        let mut slots = Array2::from_shape_fn((n_instances, dim), |_| {
            T::from_f64(normal.sample(&mut init_rng))
        });
        for mut row in slots.rows_mut() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                row.mapv_inplace(|v| v / n);
            } else {
                row[0] = T::one();
            }
        }
        MemoryBank {
            slots,
            momentum: 0.5,
            rng: rng::derive_rng(seed, &[domain::NEGATIVES]),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum));
        self.momentum = momentum;
        self
    }

    pub fn len(&self) -> usize {
        self.slots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn slots(&self) -> &Array2<T> {
        &self.slots
    }

    /// The stored past representation of one instance.
    pub fn get_past_reference(&self, instance_id: usize) -> Result<ArrayView1<'_, T>> {
        if instance_id >= self.len() {
            return Err(Error::argument(format!(
                "instance id {instance_id} out of range for bank of {}",
                self.len()
            )));
        }
        Ok(self.slots.row(instance_id))
    }

    /// Row-stacked past references for a minibatch.
    pub fn past_references(&self, instance_ids: &[usize]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((instance_ids.len(), self.dim()));
        for (i, &id) in instance_ids.iter().enumerate() {
            out.row_mut(i).assign(&self.get_past_reference(id)?);
        }
        Ok(out)
    }

    /// Uniform sample without replacement from all slots whose ids are not
    /// excluded; drawn once per minibatch and shared by all loss terms.
    pub fn sample_negatives(&mut self, exclude_ids: &[usize], count: usize) -> Result<Array2<T>> {
        let excluded: HashSet<usize> = exclude_ids.iter().copied().collect();
        let allowed: Vec<usize> =
            (0..self.len()).filter(|id| !excluded.contains(id)).collect();
        if count > allowed.len() {
            return Err(Error::argument(format!(
                "requested {count} negatives but only {} slots are eligible",
                allowed.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut self.rng, allowed.len(), count);
        let mut out = Array2::zeros((count, self.dim()));
        for (row, pick) in picks.into_iter().enumerate() {
            out.row_mut(row).assign(&self.slots.row(allowed[pick]));
        }
        Ok(out)
    }

    /// slot <- normalize(momentum * slot + (1 - momentum) * v0), once per
    /// training step after the loss is computed.
    pub fn update(&mut self, instance_ids: &[usize], v0: &Array2<T>) -> Result<()> {
        if v0.nrows() != instance_ids.len() {
            return Err(Error::argument("one embedding row per instance id required"));
        }
        if v0.ncols() != self.dim() {
            return Err(Error::argument("embedding dimensionality mismatch"));
        }
        let mut seen = HashSet::new();
        for &id in instance_ids {
            if id >= self.len() {
                return Err(Error::argument(format!("instance id {id} out of range")));
            }
            if !seen.insert(id) {
                return Err(Error::argument(format!(
                    "duplicate instance id {id} in one update"
                )));
            }
        }
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (i, &id) in instance_ids.iter().enumerate() {
            if self.momentum == 0.0 {
                self.slots.row_mut(id).assign(&v0.index_axis(Axis(0), i));
                continue;
            }
            let mut mixed = self.slots.row(id).to_owned();
            mixed.zip_mut_with(&v0.index_axis(Axis(0), i), |s, &v| *s = m * *s + keep * v);
            let n = mixed.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.to_f64() > 1e-12 {
                mixed.mapv_inplace(|v| v / n);
                self.slots.row_mut(id).assign(&mixed);
            }
            // a vanishing mixture (v0 opposite the slot) keeps the old slot
        }
        Ok(())
    }

    pub fn rng_state(&self) -> BankRngState {
        BankRngState {
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
            stream: self.rng.get_stream(),
        }
    }

    pub fn restore(slots: Array2<T>, momentum: f64, state: &BankRngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        MemoryBank { slots, momentum, rng }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn norms_ok<T: Real>(bank: &MemoryBank<T>) -> bool {
        bank.slots().rows().into_iter().all(|r| {
            (r.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64() - 1.0).abs() < 1e-6
        })
    }

    #[test]
    fn init_is_unit_norm_and_deterministic() {
        let a: MemoryBank<f32> = MemoryBank::init(100, 64, 1);
        assert!(norms_ok(&a));
        let b: MemoryBank<f32> = MemoryBank::init(100, 64, 1);
        assert_eq!(a.slots(), b.slots());
        let one: MemoryBank<f64> = MemoryBank::init(1, 1, 99);
        assert!((one.slots()[[0, 0]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn past_reference_reads_do_not_mutate() {
        let bank: MemoryBank<f64> = MemoryBank::init(10, 4, 2);
        let first = bank.get_past_reference(3).unwrap().to_owned();
        let second = bank.get_past_reference(3).unwrap().to_owned();
        assert_eq!(first, second);
        assert!(bank.get_past_reference(10).is_err());
    }

    #[test]
    fn negatives_respect_exclusions() {
        let mut bank: MemoryBank<f64> = MemoryBank::init(50, 8, 3);
        let excluded = [0usize, 7, 13, 49];
        let exc_rows: Vec<_> =
            excluded.iter().map(|&id| bank.slots().row(id).to_owned()).collect();
        for _ in 0..200 {
            let negs = bank.sample_negatives(&excluded, 30).unwrap();
            for neg in negs.rows() {
                for row in &exc_rows {
                    assert_ne!(neg, row.view());
                }
            }
        }
    }

    #[test]
    fn exhaustive_complement_and_bounds() {
        let mut bank: MemoryBank<f64> = MemoryBank::init(10, 4, 4);
        let excluded = [1usize, 4];
        let negs = bank.sample_negatives(&excluded, 8).unwrap();
        let mut matched = vec![false; 10];
        for neg in negs.rows() {
            for id in 0..10 {
                if neg == bank.slots().row(id) {
                    matched[id] = true;
                }
            }
        }
        for id in 0..10 {
            assert_eq!(matched[id], !excluded.contains(&id), "slot {id}");
        }
        assert!(bank.sample_negatives(&excluded, 9).is_err());
    }

    #[test]
    fn update_closed_forms() {
        let mut bank: MemoryBank<f64> = MemoryBank::init(3, 3, 5);
        bank.slots.row_mut(0).assign(&array![1.0, 0.0, 0.0]);
        let v0 = array![[0.0, 1.0, 0.0]];
        bank.update(&[0], &v0).unwrap();
        let s = bank.get_past_reference(0).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((s[0] - r).abs() < 1e-9 && (s[1] - r).abs() < 1e-9 && s[2].abs() < 1e-9);

        let mut zero_m = MemoryBank::<f64>::init(2, 3, 6).with_momentum(0.0);
        let v = array![[0.6, 0.8, 0.0]];
        zero_m.update(&[1], &v).unwrap();
        assert_eq!(zero_m.get_past_reference(1).unwrap().to_owned(), array![0.6, 0.8, 0.0]);

        let mut high_m = MemoryBank::<f64>::init(2, 3, 7).with_momentum(0.999);
        let slot = high_m.get_past_reference(0).unwrap().to_owned();
        let same = slot.clone().insert_axis(Axis(0));
        high_m.update(&[0], &same).unwrap();
        let after = high_m.get_past_reference(0).unwrap();
        for (a, b) in slot.iter().zip(after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut bank: MemoryBank<f64> = MemoryBank::init(5, 2, 8);
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(bank.update(&[2, 2], &v).is_err());
    }

    #[test]
    fn norms_hold_under_random_op_sequences() {
        let mut bank: MemoryBank<f32> = MemoryBank::init(40, 16, 9);
        let mut rng = rng::derive_rng(1234, &[99]);
        for _ in 0..500 {
            let op: u8 = rng.random_range(0..3);
            match op {
                0 => {
                    let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..40)).collect();
                    let mut uniq = ids.clone();
                    uniq.sort_unstable();
                    uniq.dedup();
                    let mut v = Array2::from_shape_fn((uniq.len(), 16), |_| {
                        rng.random_range(-1.0f32..1.0)
                    });
                    for mut row in v.rows_mut() {
                        let n = row.iter().map(|&x| x * x).sum::<f32>().sqrt().max(1e-6);
                        row.mapv_inplace(|x| x / n);
                    }
                    bank.update(&uniq, &v).unwrap();
                }
                1 => {
                    let _ = bank.sample_negatives(&[0, 1], 10).unwrap();
                }
                _ => {
                    let _ = bank.get_past_reference(rng.random_range(0..40)).unwrap();
                }
            }
        }
        assert!(norms_ok(&bank));
    }

    #[test]
    fn rng_state_round_trip_resumes_sequence() {
        let mut bank: MemoryBank<f32> = MemoryBank::init(30, 8, 10);
        let _ = bank.sample_negatives(&[], 5).unwrap();
        let state = bank.rng_state();
        let slots = bank.slots().clone();
        let a = bank.sample_negatives(&[], 5).unwrap();
        let mut restored = MemoryBank::restore(slots, bank.momentum(), &state);
        let b = restored.sample_negatives(&[], 5).unwrap();
        assert_eq!(a, b);
    }
}
