use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CriterionKind;

/// Detection cutoffs. Probability thresholds are strict (`prob > t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdTable {
    pub mitosis: f64,
    pub necrosis: f64,
    pub prominent_nucleoli: f64,
    pub sheeting: f64,
    pub small_cell_min_nuclei: u32,
    pub small_cell_top_k: usize,
    pub tumor_min_nuclei: u32,
    pub brain_range: [u32; 2],
}

impl Default for ThresholdTable {
    fn default() -> Self {
        ThresholdTable {
            mitosis: 0.78,
            necrosis: 0.74,
            prominent_nucleoli: 0.90,
            sheeting: 0.52,
            small_cell_min_nuclei: 125,
            small_cell_top_k: 10,
            tumor_min_nuclei: 55,
            brain_range: [10, 55],
        }
    }
}

impl ThresholdTable {
    /// Probability cutoff for criteria decided by a classifier, `None` otherwise.
    pub fn probability(&self, criterion: CriterionKind) -> Option<f64> {
        match criterion {
            CriterionKind::MitoticCount => Some(self.mitosis),
            CriterionKind::Necrosis => Some(self.necrosis),
            CriterionKind::ProminentNucleoli => Some(self.prominent_nucleoli),
            CriterionKind::Sheeting => Some(self.sheeting),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.mitosis, self.necrosis, self.prominent_nucleoli, self.sheeting] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Validation(format!("probability threshold {p} outside (0,1)")));
            }
        }
        if self.brain_range[0] > self.brain_range[1] {
            return Err(Error::Validation("brain_range lower bound exceeds upper bound".into()));
        }
        Ok(())
    }
}

/// Everything tunable about a processing run and the derived review state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub thresholds: ThresholdTable,
    /// Side of one high-power field in micrometers.
    pub hpf_um: f64,
    /// Grid cells per HPF side; the grid cell is `hpf_um / cells_per_hpf`.
    pub cells_per_hpf: u32,
    pub nms_iou: f64,
    /// Lower bound of the High confidence band.
    pub high_confidence: f64,
    pub ki67_min_total: u64,
    /// Whether evidence marked uncertain still counts toward the mitotic count.
    pub count_uncertain: bool,
    pub evidence_n: usize,
    pub hotspot_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            thresholds: ThresholdTable::default(),
            hpf_um: 500.0,
            cells_per_hpf: 5,
            nms_iou: 0.25,
            high_confidence: 0.90,
            ki67_min_total: 200,
            count_uncertain: false,
            evidence_n: 10,
            hotspot_k: 10,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if !(self.hpf_um > 0.0) || self.cells_per_hpf == 0 {
            return Err(Error::Validation("HPF geometry must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.high_confidence) {
            return Err(Error::Validation("nms_iou and high_confidence must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn cell_um(&self) -> f64 {
        self.hpf_um / self.cells_per_hpf as f64
    }

    /// Reads a TOML config; absent keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EngineConfig = toml::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
