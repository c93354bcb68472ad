//! Stage and module ablations trained at toy scale.

use std::fmt;

use crate::data::PairedSample;
use crate::error::Result;
use crate::pipeline::{PipelineConfig, Prism, Variant};
use crate::train::{evaluate, train, EvalReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Stage,
    Module,
}

/// Table layout: four stage rows, then three module rows. The full model
/// closes both sections and is trained once.
pub const ROWS: [(Section, &str, Variant); 7] = [
    (Section::Stage, "CENet only", Variant::CenetOnly),
    (Section::Stage, "SFNet only", Variant::SfnetOnly),
    (Section::Stage, "RNet only", Variant::RnetOnly),
    (Section::Stage, "CENet + SFNet + RNet", Variant::Full),
    (Section::Module, "w/o HDMamba (conv stack)", Variant::NoHdMamba),
    (Section::Module, "w/o HA-UNet (conv UNet)", Variant::NoHaUnet),
    (Section::Module, "full", Variant::Full),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub section: Section,
    pub label: &'static str,
    pub variant: Variant,
    pub params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Trains every variant with the same seed, data and schedule, and evaluates
/// the last stage of each on `held_out`.
pub fn ablate(base: PipelineConfig, train_cfg: &TrainConfig, data: &[PairedSample], held_out: &[PairedSample]) -> Result<AblationTable> {
    let mut done: Vec<AblationRow> = Vec::new();
    let mut rows = Vec::with_capacity(ROWS.len());
    for (section, label, variant) in ROWS {
        let trained = match done.iter().find(|r| r.variant == variant) {
            Some(prev) => prev.clone(),
            None => {
                let (model, mut store) = Prism::build(base.with_variant(variant), train_cfg.seed)?;
                let params = store.num_scalars();
                log::info!("ablation {}: {params} parameters", variant.name());
                let hist = train(&model, &mut store, data, train_cfg, None)?;
                let row = AblationRow {
                    section,
                    label,
                    variant,
                    params,
                    initial_loss: hist.first().map_or(f64::NAN, |b| b.total),
                    final_loss: hist.last().map_or(f64::NAN, |b| b.total),
                    eval: evaluate(&model, &store, held_out)?,
                };
                done.push(row.clone());
                row
            }
        };
        rows.push(AblationRow { section, label, ..trained });
    }
    Ok(AblationTable { rows })
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<26} {:>9} {:>10} {:>10} {:>8} {:>7}",
            "section", "configuration", "params", "loss@1", "loss@end", "PSNR", "SSIM"
        )?;
        let mut last = None;
        for r in &self.rows {
            if last.is_some() && last != Some(r.section) {
                writeln!(f, "{}", "-".repeat(84))?;
            }
            last = Some(r.section);
            let section = match r.section {
                Section::Stage => "stage",
                Section::Module => "module",
            };
            writeln!(
                f,
                "{section:<8} {:<26} {:>9} {:>10.5} {:>10.5} {:>8.2} {:>7.4}",
                r.label, r.params, r.initial_loss, r.final_loss, r.eval.psnr_restored, r.eval.ssim_restored
            )?;
        }
        if let Some(r) = self.rows.first() {
            write!(
                f,
                "rainy input baseline: PSNR {:.2} dB, SSIM {:.4}",
                r.eval.psnr_rainy, r.eval.ssim_rainy
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_four_stage_and_three_module_rows() {
        let stage = ROWS.iter().filter(|r| r.0 == Section::Stage).count();
        let module = ROWS.iter().filter(|r| r.0 == Section::Module).count();
        assert_eq!((stage, module), (4, 3));
        assert_eq!(ROWS[3].2, Variant::Full);
        assert_eq!(ROWS[6].2, Variant::Full);
    }

    #[test]
    fn variant_parameter_counts_are_distinct() {
        let mut counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| Prism::build(PipelineConfig::tiny().with_variant(v), 0).unwrap().1.num_scalars())
            .collect();
        counts.sort_unstable();
        counts.dedup();
        assert_eq!(counts.len(), Variant::ALL.len());
    }
}
