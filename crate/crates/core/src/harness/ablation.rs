use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, RunConfig, TrainMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::metrics::OverlapKind;
use crate::model::ModelVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// SUM, CONCAT and DIRECT CONCAT fusion.
    FusionStrategy,
    /// Each stage replaced by a linear stand-in.
    ComponentRemoval,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::FusionStrategy => "fusion_strategy",
            AblationKind::ComponentRemoval => "component_removal",
        }
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion_strategy" => Ok(Self::FusionStrategy),
            "component_removal" => Ok(Self::ComponentRemoval),
            _ => Err(Error::Config(format!("unknown ablation {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub ap: f64,
    pub aph: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub scores: Vec<ClassScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<20}", "method");
        if let Some(r) = self.rows.first() {
            for c in &r.scores {
                let _ = write!(s, " {:>12} {:>12}", format!("{} AP", c.class), format!("{} APH", c.class));
            }
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<20}", r.label);
            for c in &r.scores {
                let _ = write!(s, " {:>12.4} {:>12.4}", c.ap, c.aph);
            }
            s.push('\n');
        }
        s
    }
}

/// Configurations compared by an ablation, with their row labels.
pub fn ablation_configs(kind: AblationKind, cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    match kind {
        AblationKind::FusionStrategy => FusionStrategy::ALL
            .iter()
            .map(|&strategy| {
                let mut c = cfg.clone();
                c.model.fusion.strategy = strategy;
                c.model.variant = ModelVariant::NORMAL;
                (strategy.label().to_string(), c)
            })
            .collect(),
        AblationKind::ComponentRemoval => ModelVariant::ALL
            .iter()
            .map(|&variant| {
                let mut c = cfg.clone();
                c.model.variant = variant;
                (variant.label().to_string(), c)
            })
            .collect(),
    }
}

/// Trains every configuration of the ablation from scratch under the same
/// seed and step budget, then scores it on `data` (overall bin, 3D IoU).
pub fn run_ablation(kind: AblationKind, cfg: &RunConfig, data: &Dataset) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, c) in ablation_configs(kind, cfg) {
        log::info!("ablation {}: {label}", kind.name());
        let mut c = c;
        c.train.target_map_3d = 0.0;
        c.train.eval_every = 0;
        let out = train(&c, TrainMode::Fusion, data, None)?;
        let report = evaluate(&out.model, data, &c.eval)?;
        let scores = c
            .eval
            .class_names
            .iter()
            .map(|name| {
                let cell = report
                    .metrics
                    .entry(name, "overall", OverlapKind::ThreeD)
                    .ok_or_else(|| Error::Contract(format!("no overall entry for {name}")))?;
                Ok(ClassScore {
                    class: name.clone(),
                    ap: cell.ap,
                    aph: cell.aph,
                })
            })
            .collect::<Result<_>>()?;
        rows.push(AblationRow { label, scores });
    }
    Ok(AblationReport { kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts_match_the_tables() {
        let cfg = RunConfig::toy();
        assert_eq!(ablation_configs(AblationKind::FusionStrategy, &cfg).len(), 3);
        assert_eq!(ablation_configs(AblationKind::ComponentRemoval, &cfg).len(), 5);
        for (_, c) in ablation_configs(AblationKind::FusionStrategy, &cfg) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn table_has_one_line_per_row() {
        let r = AblationReport {
            kind: AblationKind::FusionStrategy,
            rows: vec![AblationRow {
                label: "SUM".into(),
                scores: vec![ClassScore {
                    class: "vehicle".into(),
                    ap: 0.5,
                    aph: 0.25,
                }],
            }],
        };
        let t = r.to_table();
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("vehicle APH"));
        assert!(t.contains("0.2500"));
    }
}
