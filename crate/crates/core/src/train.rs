//! Helpers shared by the training loops: validation slices, minibatching and
//! early stopping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Splits `pool` into (train, validation). Validation is empty when the pool
/// is too small to spare a meaningful slice.
pub(crate) fn holdout(
    pool: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n_val = (pool.len() as f64 * fraction).round() as usize;
    if fraction <= 0.0 || n_val < 5 || pool.len() - n_val < 2 {
        return (pool.to_vec(), Vec::new());
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub(crate) fn shuffled_batches(
    indices: &[usize],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainTrace {
    /// Mean loss over the minibatches that had at least one event.
    pub epoch_loss: Vec<f64>,
    pub val_cindex: Vec<Option<f64>>,
    pub skipped_batches: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_cindex\n");
        for (e, loss) in self.epoch_loss.iter().enumerate() {
            let c = self
                .val_cindex
                .get(e)
                .copied()
                .flatten()
                .map(|c| format!("{c:?}"))
                .unwrap_or_default();
            s.push_str(&format!("{},{loss:?},{c}\n", e + 1));
        }
        s
    }
}

/// Tracks the best validation score and signals when patience runs out.
pub(crate) struct EarlyStopper<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
    epochs_since: usize,
}

impl<T: Clone> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            epochs_since: 0,
        }
    }

    /// Returns true when training should stop.
    pub fn observe(
        &mut self,
        score: Option<f64>,
        epoch: usize,
        snapshot: impl FnOnce() -> T,
    ) -> bool {
        let Some(score) = score else {
            return false;
        };
        match &self.best {
            Some((best, _, _)) if score <= *best => {
                self.epochs_since += 1;
                self.patience > 0 && self.epochs_since >= self.patience
            }
            _ => {
                self.best = Some((score, epoch, snapshot()));
                self.epochs_since = 0;
                false
            }
        }
    }

    pub fn into_best(self) -> Option<(usize, T)> {
        self.best.map(|(_, e, t)| (e, t))
    }
}
