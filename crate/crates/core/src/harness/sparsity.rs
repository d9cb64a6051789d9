//! Data-sparsity knobs and per-round client sampling.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::SeedStream;
use crate::partition::{ClientDataset, MaskKind};

/// Fractions of feature entries, edges and train labels to remove.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SparsityKnobs {
    pub feature_mask_rate: f64,
    pub edge_drop_rate: f64,
    pub label_mask_rate: f64,
}

impl SparsityKnobs {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("feature_mask_rate", self.feature_mask_rate),
            ("edge_drop_rate", self.edge_drop_rate),
            ("label_mask_rate", self.label_mask_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Invalid(format!("{name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.feature_mask_rate == 0.0 && self.edge_drop_rate == 0.0 && self.label_mask_rate == 0.0
    }
}

fn exact_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Applies the knobs to every task of one client. Counts are exact floors of
/// rate × population; one train node per task always stays labeled so the
/// task keeps a supervised signal and a nonzero aggregation weight.
pub fn apply_sparsity(data: &mut ClientDataset, knobs: &SparsityKnobs, seed: SeedStream) -> Result<()> {
    knobs.validate()?;
    if knobs.is_identity() {
        return Ok(());
    }
    let stream = seed.fork(&format!("sparsity/client/{}", data.client));
    for task in &mut data.tasks {
        let mut rng = stream.rng(&format!("task/{}", task.index));

        let entries = task.features.len();
        let masked = exact_count(knobs.feature_mask_rate, entries);
        if masked > 0 {
            let values = task.features.data_mut();
            for i in index::sample(&mut rng, entries, masked) {
                values[i] = 0.0;
            }
        }

        let edges = task.edges().to_vec();
        let dropped = exact_count(knobs.edge_drop_rate, edges.len());
        if dropped > 0 {
            let mut gone = vec![false; edges.len()];
            for i in index::sample(&mut rng, edges.len(), dropped) {
                gone[i] = true;
            }
            let kept = edges.iter().zip(&gone).filter(|(_, &g)| !g).map(|(e, _)| *e).collect();
            task.set_edges(kept)?;
        }

        let mut train = task.masks.indices(MaskKind::Train);
        let demote = exact_count(knobs.label_mask_rate, train.len()).min(train.len().saturating_sub(1));
        if demote > 0 {
            train.shuffle(&mut rng);
            for &i in &train[..demote] {
                task.masks.train[i] = false;
            }
        }
    }
    Ok(())
}

/// Clients taking part in one round: `max(1, round(rate·K))` drawn without
/// replacement, returned in ascending id order.
pub fn sample_participants(clients: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    if rate >= 1.0 {
        return (0..clients).collect();
    }
    let m = ((rate * clients as f64).round() as usize).clamp(1, clients);
    let mut chosen = index::sample(rng, clients, m).into_vec();
    chosen.sort_unstable();
    chosen
}
