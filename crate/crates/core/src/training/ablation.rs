//! Training and evaluating the BiCA variants side by side.

use std::fmt::Write as _;

use super::trainer::{RunOptions, Trainer};
use crate::config::{Config, Variant};
use crate::datasynth::Dataset;
use crate::error::{BicaError, Result};
use crate::evalmetrics::MetricsReport;
use crate::inference::evaluate_model;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    fn runs_of(&self, v: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// CIDEr@0.5 averaged over seeds.
    pub fn mean_cider50(&self, v: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.runs_of(v).map(|r| r.report.cider50()).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_ar50(&self, v: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.runs_of(v).map(|r| r.report.ar50).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// One row per variant: mean CIDEr@0.5, mean AR@0.5, then CIDEr@0.5 of
    /// every seed.
    pub fn to_table(&self) -> String {
        let mut s = String::from("variant   cider@0.5  det_ar@0.5");
        for seed in &self.seeds {
            write!(s, "  seed{seed:<5}").unwrap();
        }
        s.push('\n');
        for &v in &self.variants {
            write!(
                s,
                "{:<9} {:>9.4} {:>11.4}",
                v.as_str(),
                self.mean_cider50(v).unwrap_or(f64::NAN),
                self.mean_ar50(v).unwrap_or(f64::NAN)
            )
            .unwrap();
            for seed in &self.seeds {
                let c = self
                    .runs_of(v)
                    .find(|r| r.seed == *seed)
                    .map_or(f64::NAN, |r| r.report.cider50());
                write!(s, "  {c:>9.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// For every seed, trains the detector once (stage 1 does not involve the
/// caption branch) and then runs stages 2 and 3 and evaluation separately
/// for each variant. `progress` is called after every finished run.
pub fn run_ablation(
    base: &Config,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(BicaError::Invalid(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let mut report = AblationReport {
        variants: variants.to_vec(),
        seeds: seeds.to_vec(),
        runs: Vec::new(),
    };
    let opts = RunOptions::default();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut det = Trainer::new(&cfg, data, threads)?;
        det.run_stage(1, &opts)?;
        for &variant in variants {
            let mut vcfg = cfg.clone();
            vcfg.variant = variant;
            let mut t = det.fork(&vcfg)?;
            t.run_stage(2, &opts)?;
            t.run_stage(3, &opts)?;
            let r = evaluate_model(&t.model, &t.store, data, vcfg.nms_iou, vcfg.beam, threads)?;
            let run = AblationRun {
                variant,
                seed,
                report: r,
            };
            progress(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}
