use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Confusion;

/// Evaluation summary of one inference method over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub lambda: Option<f64>,
    pub images: usize,
    pub patches: usize,
    pub mean_iou: f64,
    pub total_flops: f64,
    pub iou_per_gigaflop: f64,
    pub assignment_counts: Vec<u64>,
    /// Mean per-patch cost of the chosen models.
    pub mean_cost: f64,
    pub confusion: Option<Confusion>,
    pub tvd: Option<f64>,
}

impl RunReport {
    pub const CSV_HEADER: &'static str =
        "method,lambda,images,patches,mean_iou,total_flops,iou_per_gigaflop,mean_cost,assignment_counts,assignment_accuracy,tvd";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            opt(self.lambda),
            self.images,
            self.patches,
            self.mean_iou,
            self.total_flops,
            self.iou_per_gigaflop,
            self.mean_cost,
            self.assignment_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            opt(self.confusion.as_ref().map(|c| c.accuracy)),
            opt(self.tvd),
        )
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join("report.json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load() {
        let r = RunReport {
            method: "paser".into(),
            lambda: Some(0.5),
            images: 2,
            patches: 32,
            mean_iou: 0.75,
            total_flops: 2e9,
            iou_per_gigaflop: 0.375,
            assignment_counts: vec![20, 10, 2],
            mean_cost: 0.1,
            confusion: None,
            tvd: None,
        };
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        assert_eq!(RunReport::load(dir.path()).unwrap(), r);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "paser,0.5,2,32,0.75,2000000000,0.375,0.1,20;10;2,,");
        assert!(matches!(RunReport::load(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
