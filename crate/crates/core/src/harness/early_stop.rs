/// Patience counter over validation loss and accuracy.
///
/// Patience resets whenever the epoch beats the best loss seen so far or the
/// best accuracy seen so far. The checkpoint to restore is tracked separately:
/// lowest validation loss, then higher accuracy, then the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_acc: f64,
    stale: usize,
    best: Option<(usize, f64, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_acc: f64::NEG_INFINITY,
            stale: 0,
            best: None,
        }
    }

    /// Records one epoch. Returns `(is_new_checkpoint, should_stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, val_acc: f64) -> (bool, bool) {
        let improved = val_loss < self.best_loss || val_acc > self.best_acc;
        self.best_loss = self.best_loss.min(val_loss);
        self.best_acc = self.best_acc.max(val_acc);
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let checkpoint = match self.best {
            None => true,
            Some((_, loss, acc)) => val_loss < loss || (val_loss == loss && val_acc > acc),
        };
        if checkpoint {
            self.best = Some((epoch, val_loss, val_acc));
        }
        (checkpoint, self.stale >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _, _)| e)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best.map(|(_, l, _)| l)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best.map(|(_, _, a)| a)
    }
}
