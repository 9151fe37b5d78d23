//! Four-arm ablation harness: proposed two-stage, meta-only, semi-only
//! (from scratch), and supervised-only, trained with identical seeds and
//! evaluated by per-category Chamfer distance.

use super::{reconstruction_cd, sign_accuracy, ReconSettings, CD_SENTINEL};
use crate::dataset::TestInstance;
use crate::error::Result;
use crate::model::{ConditionalSdfModel, DecoderConfig, EncoderConfig};
use crate::training::{
    train_stage1, train_stage2, train_supervised, LabeledDataset, TrainConfig, UnlabeledDataset,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    /// Stage 1 then stage 2.
    Proposed,
    /// Stage 1 only.
    OnlyMeta,
    /// Stage 2 objective from scratch.
    OnlySemi,
    /// Plain supervision on all labeled data, no episodes.
    SupOnly,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Proposed,
        AblationArm::OnlyMeta,
        AblationArm::OnlySemi,
        AblationArm::SupOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationArm::Proposed => "proposed",
            AblationArm::OnlyMeta => "only_meta",
            AblationArm::OnlySemi => "only_semi",
            AblationArm::SupOnly => "sup_only",
        }
    }
}

/// Everything one ablation run needs.
pub struct BenchmarkSpec<'a> {
    pub labeled: &'a LabeledDataset,
    pub unlabeled: &'a UnlabeledDataset,
    /// Seen-category evaluation instances (shape oracle + cloud).
    pub seen: &'a [TestInstance],
    /// Unseen-category evaluation instances.
    pub unseen: &'a [TestInstance],
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub seeds: Vec<u64>,
    pub recon: ReconSettings,
    /// Queries for the per-shape sign-accuracy column.
    pub sign_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub category: String,
    pub shape_id: String,
    pub seed: u64,
    pub split: String,
    pub cd: f64,
    pub sign_acc: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seen_mean: f64,
    pub seen_median: f64,
    pub unseen_mean: f64,
    pub unseen_median: f64,
    /// True when training diverged; CD columns hold sentinels then.
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub revision: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<ArmSummary>,
    pub metadata: ReportMetadata,
}

impl ExperimentReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Flat CSV: arm, category, shape_id, seed, split, cd, sign_acc.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("arm,category,shape_id,seed,split,cd,sign_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.arm,
                r.category,
                r.shape_id,
                r.seed,
                r.split,
                r.cd,
                r.sign_acc.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return CD_SENTINEL;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return CD_SENTINEL;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Trains one arm from a fresh model with the given seed.
pub fn train_arm(
    arm: AblationArm,
    spec: &BenchmarkSpec<'_>,
    seed: u64,
) -> Result<ConditionalSdfModel> {
    let mut model = ConditionalSdfModel::new(spec.encoder.clone(), spec.decoder.clone(), seed)?;
    let mut stage1 = spec.stage1.clone();
    stage1.seed = seed;
    let mut stage2 = spec.stage2.clone();
    stage2.seed = seed;
    match arm {
        AblationArm::Proposed => {
            train_stage1(&mut model, spec.labeled, &stage1)?;
            train_stage2(&mut model, spec.labeled, spec.unlabeled, &stage2)?;
        }
        AblationArm::OnlyMeta => {
            train_stage1(&mut model, spec.labeled, &stage1)?;
        }
        AblationArm::OnlySemi => {
            // From scratch, but with the full two-stage step budget.
            let mut cfg = stage2.clone();
            cfg.epochs = stage1.epochs + stage2.epochs;
            train_stage2(&mut model, spec.labeled, spec.unlabeled, &cfg)?;
        }
        AblationArm::SupOnly => {
            // Compute parity with the proposed arm.
            let mut cfg = stage1.clone();
            cfg.epochs = stage1.epochs + stage2.epochs;
            cfg.omit_self_term = true;
            train_supervised(&mut model, spec.labeled, &cfg)?;
        }
    }
    Ok(model)
}

/// Runs every arm over every seed and collects per-shape CD rows plus
/// per-arm summaries. A diverging arm is marked failed; other arms proceed.
pub fn run_ablation(spec: &BenchmarkSpec<'_>) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for arm in AblationArm::ALL {
        let mut seen_cds = Vec::new();
        let mut unseen_cds = Vec::new();
        let mut arm_failed = false;
        for &seed in &spec.seeds {
            match train_arm(arm, spec, seed) {
                Ok(model) => {
                    for (split, set, sink) in [
                        ("seen", spec.seen, &mut seen_cds),
                        ("unseen", spec.unseen, &mut unseen_cds),
                    ] {
                        for inst in set {
                            let cd = reconstruction_cd(&model, &inst.cloud, &inst.shape, &spec.recon)?;
                            let sign = sign_accuracy(
                                &model,
                                &inst.shape,
                                &inst.cloud,
                                spec.sign_queries,
                                seed,
                            )
                            .ok();
                            if cd.is_finite() {
                                sink.push(cd);
                            }
                            rows.push(ReportRow {
                                arm: arm.name().into(),
                                category: inst.shape.category_id.clone(),
                                shape_id: inst.id.clone(),
                                seed,
                                split: split.into(),
                                cd,
                                sign_acc: sign,
                                failed: false,
                            });
                        }
                    }
                }
                Err(e) => {
                    log::warn!("arm {} diverged at seed {seed}: {e}", arm.name());
                    arm_failed = true;
                    for (split, set) in [("seen", spec.seen), ("unseen", spec.unseen)] {
                        for inst in set {
                            rows.push(ReportRow {
                                arm: arm.name().into(),
                                category: inst.shape.category_id.clone(),
                                shape_id: inst.id.clone(),
                                seed,
                                split: split.into(),
                                cd: CD_SENTINEL,
                                sign_acc: None,
                                failed: true,
                            });
                        }
                    }
                }
            }
        }
        summaries.push(ArmSummary {
            arm: arm.name().into(),
            seen_mean: mean(&seen_cds),
            seen_median: median(&seen_cds),
            unseen_mean: mean(&unseen_cds),
            unseen_median: median(&unseen_cds),
            failed: arm_failed,
        });
    }
    Ok(ExperimentReport {
        rows,
        summaries,
        metadata: ReportMetadata {
            config_hash: spec.stage1.hash(),
            seeds: spec.seeds.clone(),
            revision: std::env::var("GENSDF_REVISION")
                .unwrap_or_else(|_| format!("v{}", env!("CARGO_PKG_VERSION"))),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_cover_the_four_settings() {
        let names: Vec<&str> = AblationArm::ALL.iter().map(|a| a.name()).collect();
        assert_eq!(names, ["proposed", "only_meta", "only_semi", "sup_only"]);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(!median(&[]).is_finite());
    }
}
