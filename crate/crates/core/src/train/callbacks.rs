use serde::{Deserialize, Serialize};

/// Which validation quantity drives checkpointing, LR reduction and early
/// stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

impl Monitor {
    pub fn as_str(self) -> &'static str {
        match self {
            Monitor::ValLoss => "val_loss",
            Monitor::ValAccuracy => "val_accuracy",
        }
    }

    /// Strict improvement of `value` over `best`. NaN never improves.
    pub fn improves(self, value: f64, best: Option<f64>) -> bool {
        if value.is_nan() {
            return false;
        }
        match (self, best) {
            (_, None) => true,
            (Monitor::ValLoss, Some(b)) => value < b,
            (Monitor::ValAccuracy, Some(b)) => value > b,
        }
    }
}

/// Tracks the best monitored value and how many epochs have passed without
/// improving on it.
#[derive(Debug, Clone)]
struct Plateau {
    monitor: Monitor,
    best: Option<f64>,
    wait: usize,
}

impl Plateau {
    fn new(monitor: Monitor) -> Self {
        Self {
            monitor,
            best: None,
            wait: 0,
        }
    }

    fn observe(&mut self, value: f64) -> bool {
        if self.monitor.improves(value, self.best) {
            self.best = Some(value);
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }
}

/// Stops once `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    plateau: Plateau,
}

impl EarlyStopping {
    pub fn new(monitor: Monitor, patience: usize) -> Self {
        Self {
            patience,
            plateau: Plateau::new(monitor),
        }
    }

    /// Returns true when training should stop after this epoch.
    pub fn on_epoch_end(&mut self, value: f64) -> bool {
        self.plateau.observe(value);
        self.plateau.wait >= self.patience
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, never going below `min_lr`. The wait counter restarts after
/// each reduction.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    factor: f64,
    patience: usize,
    min_lr: f64,
    plateau: Plateau,
}

impl ReduceLrOnPlateau {
    pub fn new(monitor: Monitor, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            plateau: Plateau::new(monitor),
        }
    }

    /// Learning rate to use for the next epoch.
    pub fn on_epoch_end(&mut self, value: f64, lr: f64) -> f64 {
        self.plateau.observe(value);
        if self.plateau.wait >= self.patience && lr > self.min_lr {
            self.plateau.wait = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

/// Keeps a copy of whatever was current at the best epoch.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint<T> {
    monitor: Monitor,
    best: Option<(usize, f64, T)>,
}

impl<T: Clone> ModelCheckpoint<T> {
    pub fn new(monitor: Monitor) -> Self {
        Self { monitor, best: None }
    }

    /// Stores `state` if `value` strictly improves; returns whether it did.
    pub fn on_epoch_end(&mut self, epoch: usize, value: f64, state: &T) -> bool {
        let best = self.best.as_ref().map(|(_, v, _)| *v);
        if self.monitor.improves(value, best) {
            self.best = Some((epoch, value, state.clone()));
            true
        } else {
            false
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|(e, _, _)| *e)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.as_ref().map(|(_, v, _)| *v)
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drives the three callbacks over a scripted loss curve the way the
    /// training loop does; returns (epochs run, best epoch, lrs used).
    fn run(losses: &[f64], max_epochs: usize) -> (usize, usize, Vec<f64>) {
        let mut es = EarlyStopping::new(Monitor::ValLoss, 5);
        let mut rl = ReduceLrOnPlateau::new(Monitor::ValLoss, 0.5, 3, 1e-6);
        let mut ck = ModelCheckpoint::new(Monitor::ValLoss);
        let mut lr = 1e-4;
        let mut lrs = Vec::new();
        let mut epochs = 0;
        for (e, &loss) in losses.iter().enumerate().take(max_epochs) {
            let epoch = e + 1;
            epochs = epoch;
            lrs.push(lr);
            ck.on_epoch_end(epoch, loss, &epoch);
            lr = rl.on_epoch_end(loss, lr);
            if es.on_epoch_end(loss) {
                break;
            }
        }
        (epochs, ck.best_epoch().unwrap(), lrs)
    }

    #[test]
    fn strictly_improving_runs_to_the_end() {
        let losses: Vec<f64> = (0..50).map(|e| 1.0 / (e + 1) as f64).collect();
        let (epochs, best, lrs) = run(&losses, 50);
        assert_eq!((epochs, best), (50, 50));
        assert!(lrs.iter().all(|&l| l == 1e-4));
    }

    #[test]
    fn single_improvement_at_three_stops_at_eight() {
        let mut losses = vec![1.0, 0.9, 0.5];
        losses.extend(std::iter::repeat_n(0.7, 47));
        let (epochs, best, lrs) = run(&losses, 50);
        assert_eq!(epochs, 8);
        assert_eq!(best, 3);
        // No improvement at 4, 5, 6 → reduced for epoch 7.
        assert_eq!(&lrs[..], &[1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 5e-5, 5e-5]);
    }

    #[test]
    fn lr_is_floored() {
        let mut rl = ReduceLrOnPlateau::new(Monitor::ValLoss, 0.1, 1, 1e-6);
        let mut lr = 1e-4;
        rl.on_epoch_end(1.0, lr);
        let mut seen = Vec::new();
        for _ in 0..5 {
            lr = rl.on_epoch_end(1.0, lr);
            seen.push(lr);
        }
        assert!((seen[0] - 1e-5).abs() < 1e-20);
        assert!((seen[1] - 1e-6).abs() < 1e-20);
        assert_eq!(seen[2], 1e-6);
        assert_eq!(seen[4], 1e-6);
    }

    #[test]
    fn accuracy_monitor_maximizes_and_nan_never_improves() {
        let mut ck = ModelCheckpoint::new(Monitor::ValAccuracy);
        assert!(ck.on_epoch_end(1, 0.5, &()));
        assert!(!ck.on_epoch_end(2, 0.5, &()));
        assert!(ck.on_epoch_end(3, 0.6, &()));
        assert!(!ck.on_epoch_end(4, f64::NAN, &()));
        assert_eq!(ck.best_epoch(), Some(3));
    }
}
