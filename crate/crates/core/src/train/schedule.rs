/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict F1 improvement; the counter then restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        ReduceOnPlateau {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation F1 and returns the rate for the next.
    pub fn step(&mut self, f1: f64) -> f64 {
        if self.best.is_none_or(|b| f1 > b) {
            self.best = Some(f1);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Stops once `patience` epochs pass without a strict F1 improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's F1; returns whether it strictly improved.
    pub fn update(&mut self, f1: f64) -> bool {
        if self.best.is_none_or(|b| f1 > b) {
            self.best = Some(f1);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
