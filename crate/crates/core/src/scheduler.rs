//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMode {
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement required to reset the counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 10,
            factor: 0.1,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedulerState {
    pub current_lr: f64,
    pub best_metric: Option<f64>,
    pub epochs_since_improve: usize,
    pub config: PlateauConfig,
}

impl LrSchedulerState {
    pub fn new(lr: f64, config: PlateauConfig) -> Self {
        LrSchedulerState {
            current_lr: lr.max(config.min_lr),
            best_metric: None,
            epochs_since_improve: 0,
            config,
        }
    }

    fn improves(&self, metric: f64, mode: PlateauMode) -> bool {
        let Some(best) = self.best_metric else {
            return true;
        };
        let margin = self.config.threshold * best.abs();
        match mode {
            PlateauMode::Max => metric > best + margin,
            PlateauMode::Min => metric < best - margin,
        }
    }

    /// Feeds one epoch's monitored metric. Returns true if the rate was cut.
    pub fn step(&mut self, metric: f64, mode: PlateauMode) -> bool {
        if self.improves(metric, mode) {
            self.best_metric = Some(metric);
            self.epochs_since_improve = 0;
            return false;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve >= self.config.patience {
            self.epochs_since_improve = 0;
            let next = (self.current_lr * self.config.factor).max(self.config.min_lr);
            let reduced = next < self.current_lr;
            self.current_lr = next;
            return reduced;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_flat_epochs_cut_rate_tenfold() {
        let mut s = LrSchedulerState::new(0.001, PlateauConfig::default());
        s.step(0.5, PlateauMode::Max);
        for i in 0..10 {
            assert_eq!(s.current_lr, 0.001, "cut too early at {i}");
            s.step(0.5, PlateauMode::Max);
        }
        assert!((s.current_lr - 0.0001).abs() < 1e-18);
        assert_eq!(s.epochs_since_improve, 0);
    }

    #[test]
    fn improving_sequence_keeps_rate() {
        let mut s = LrSchedulerState::new(0.001, PlateauConfig::default());
        for i in 0..50 {
            s.step(i as f64, PlateauMode::Max);
        }
        assert_eq!(s.current_lr, 0.001);
        let mut s = LrSchedulerState::new(0.001, PlateauConfig::default());
        for i in 0..50 {
            s.step(100.0 - i as f64, PlateauMode::Min);
        }
        assert_eq!(s.current_lr, 0.001);
    }

    #[test]
    fn rate_clamped_at_min() {
        let cfg = PlateauConfig {
            patience: 1,
            ..Default::default()
        };
        let mut s = LrSchedulerState::new(1e-6, cfg);
        for _ in 0..20 {
            s.step(1.0, PlateauMode::Max);
        }
        assert_eq!(s.current_lr, 1e-6);
    }

    #[test]
    fn never_raises_rate() {
        let mut s = LrSchedulerState::new(
            0.01,
            PlateauConfig {
                patience: 2,
                ..Default::default()
            },
        );
        let mut last = s.current_lr;
        for v in [0.1, 0.3, 0.2, 0.2, 0.25, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1] {
            s.step(v, PlateauMode::Max);
            assert!(s.current_lr <= last);
            assert!(s.epochs_since_improve <= s.config.patience);
            last = s.current_lr;
        }
    }
}
