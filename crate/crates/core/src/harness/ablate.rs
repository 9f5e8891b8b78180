//! Module ablation: four configurations trained with the same seed and budget.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::train::Trainer;

/// Published full-scale row for the complete model (mAP, R-1), kept for
/// reference next to the desk-scale numbers; never asserted.
pub const REFERENCE_FULL: (f64, f64) = (81.2, 83.4);

/// `(label, sfm, str, chi)`.
pub const VARIANTS: [(&str, bool, bool, bool); 4] = [
    ("A", false, false, false),
    ("B", true, false, false),
    ("C", true, true, false),
    ("D", true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub sfm: bool,
    pub str_tokens: bool,
    pub chi: bool,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table in percent.
    pub fn render(&self) -> String {
        let mark = |on: bool| if on { "x" } else { " " };
        let mut s = String::from("| model | SFM | STR | CHI | mAP | R-1 |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.1} | {:.1} |",
                r.label,
                mark(r.sfm),
                mark(r.str_tokens),
                mark(r.chi),
                100.0 * r.map,
                100.0 * r.rank1
            );
        }
        let _ = writeln!(
            s,
            "\nreference (full scale, complete model): mAP {:.1} R-1 {:.1}",
            REFERENCE_FULL.0, REFERENCE_FULL.1
        );
        s
    }

    /// `label.metric=value` lines at full precision.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}.mAP={:?}\n{}.R1={:?}", r.label, r.map, r.label, r.rank1);
        }
        s
    }
}

/// Trains each variant from `base` for the full step budget and evaluates it
/// once at the end. `on_row` sees each row as it completes.
pub fn ablate(base: &RunConfig, data: &Dataset, mut on_row: impl FnMut(&AblationRow)) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (label, sfm, str_tokens, chi) in VARIANTS {
        let cfg = RunConfig {
            sfm_on: sfm,
            str_on: str_tokens,
            chi_on: chi,
            eval_every: 0,
            ..base.clone()
        };
        let mut trainer = Trainer::new(cfg, data)?;
        trainer.run()?;
        let m = trainer.evaluate()?.metrics;
        let row = AblationRow {
            label,
            sfm,
            str_tokens,
            chi,
            map: m.map,
            rank1: m.cmc1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
