//! Dice overlap and the per-model result table.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Reported tissue classes (background, class 0, is never reported).
pub const TISSUES: [(u8, &str); 3] = [(1, "CSF"), (2, "GM"), (3, "WM")];

/// Overlap counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub reference: usize,
    pub automatic: usize,
    pub intersection: usize,
}

impl Overlap {
    pub fn count(reference: &[u8], automatic: &[u8], class_id: u8) -> Result<Self> {
        if reference.len() != automatic.len() {
            return Err(Error::shape("dice", &[reference.len()], &[automatic.len()]));
        }
        let mut o = Overlap::default();
        for (&r, &a) in reference.iter().zip(automatic) {
            let (r, a) = (r == class_id, a == class_id);
            o.reference += r as usize;
            o.automatic += a as usize;
            o.intersection += (r && a) as usize;
        }
        Ok(o)
    }

    /// `2|A∩B| / (|A|+|B|)`; two empty masks count as perfect agreement.
    pub fn dice(&self) -> f64 {
        let denom = self.reference + self.automatic;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

/// Dice coefficient of `class_id` between two label fields of equal size.
pub fn dice(reference: &[u8], automatic: &[u8], class_id: u8) -> Result<f64> {
    Ok(Overlap::count(reference, automatic, class_id)?.dice())
}

/// Dice of CSF, GM and WM for one segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub overlaps: [Overlap; 3],
}

impl DiceReport {
    pub fn compute(reference: &[u8], automatic: &[u8]) -> Result<Self> {
        let mut overlaps = [Overlap::default(); 3];
        for (slot, &(class_id, _)) in overlaps.iter_mut().zip(&TISSUES) {
            *slot = Overlap::count(reference, automatic, class_id)?;
        }
        Ok(Self { overlaps })
    }

    pub fn per_class(&self) -> [f64; 3] {
        self.overlaps.map(|o| o.dice())
    }

    pub fn mean(&self) -> f64 {
        self.per_class().iter().sum::<f64>() / 3.0
    }

    /// Element-wise average of several reports' Dice values.
    pub fn average(reports: &[DiceReport]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for r in reports {
            for (a, d) in acc.iter_mut().zip(r.per_class()) {
                *a += d;
            }
        }
        acc.map(|a| a / reports.len().max(1) as f64)
    }
}

/// One row of the model comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDice {
    pub model: String,
    pub dice: [f64; 3],
}

impl ModelDice {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

/// Reference values the fused model reached on real MRI, shown for context only.
pub const REFERENCE_FUSE_DICE: [f64; 3] = [0.96, 0.92, 0.90];

pub fn report_csv(rows: &[ModelDice]) -> String {
    let mut out = String::from("model,dice_csf,dice_gm,dice_wm,mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.model, r.dice[0], r.dice[1], r.dice[2], r.mean()
        );
    }
    out
}

pub fn report_table(rows: &[ModelDice]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>7} {:>7} {:>7} {:>7}", "Model", "CSF", "GM", "WM", "mean");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.model, r.dice[0], r.dice[1], r.dice[2], r.mean()
        );
    }
    let [c, g, w] = REFERENCE_FUSE_DICE;
    let _ = writeln!(
        out,
        "reference: the fuse model reached {c:.2}/{g:.2}/{w:.2} (CSF/GM/WM) \
         on real MRI; phantom scores are not comparable"
    );
    out
}
