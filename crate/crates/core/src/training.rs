//! Per-epoch loss log shared by the network trainers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Training window length, samples.
    pub window: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Set when training stopped early; the returned weights are the last
    /// good checkpoint.
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,window,train_loss,val_loss\n");
        for e in &self.epochs {
            let v = e.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:?},{}\n", e.epoch, e.window, e.train_loss, v));
        }
        s
    }
}
