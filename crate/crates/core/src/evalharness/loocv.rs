//! Leave-one-out evaluation: each patient in turn is held out, the rest form
//! the population, and the held-out t3 mask is forecast from t1 and t2.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::baseline::linear_predict;
use crate::evalharness::metrics::{compute_metrics, Metrics};
use crate::growthmodels::{
    average_maps, pair_samples, personalize_snapshot, personalize_threshold, prepare_case, probability_map,
    threshold_in_zone, train_population, ArchitectureKind, CaseFeatures, PopulationSet, SnapshotPolicy, StreamModel,
    TrainedNetwork, validation_samples,
};
use crate::sampling::{growth_zone, GrowthZone, PairTag, PatchSample};
use crate::volumes::{align_to_tumor_center, LongitudinalCase, TumorMask, Volume3D};
use crate::{CoreError, Result, RunConfig};

/// Threshold of the runs without personalization.
pub const FIXED_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Learned(ArchitectureKind),
    Linear,
}

impl ModelKind {
    pub const ALL: [Self; 6] = [
        Self::Learned(ArchitectureKind::Invasion),
        Self::Learned(ArchitectureKind::Expansion),
        Self::Learned(ArchitectureKind::EarlyFusion),
        Self::Learned(ArchitectureKind::LateFusion),
        Self::Learned(ArchitectureKind::EndToEnd),
        Self::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Learned(k) => k.name(),
            Self::Linear => "linear",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            Ok(Self::Linear)
        } else {
            s.parse().map(Self::Learned)
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// Comma-separated kind list; duplicates are dropped, order is kept.
pub fn parse_kinds(list: &str) -> Result<Vec<ModelKind>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let k: ModelKind = part.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(CoreError::InvalidInput("no model kinds given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoocvRow {
    pub patient_id: String,
    pub kind: ModelKind,
    pub metrics: Metrics,
    /// None for the linear baseline.
    pub tau: Option<f64>,
    /// Snapshot epoch of each member network.
    pub epochs: Vec<usize>,
}

/// Personalization trace of one held-out patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldRecord {
    pub patient_id: String,
    pub invasion_epoch: usize,
    pub validation_curve: Vec<f64>,
    pub tau: f64,
    pub tau_dice: f64,
    pub tau_degenerate: bool,
    pub tau_curve: Vec<(f64, f64)>,
}

/// Personalized forecast kept for overlay rendering.
#[derive(Debug, Clone)]
pub struct FoldPrediction {
    pub patient_id: String,
    pub kind: ModelKind,
    pub zone: GrowthZone,
    pub predicted: TumorMask,
    pub truth: TumorMask,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoocvOptions {
    pub keep_predictions: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoocvReport {
    /// Two-step personalization: lowest-validation snapshot and fitted tau.
    pub personalized: Vec<LoocvRow>,
    /// Final-epoch snapshot and `FIXED_TAU`.
    pub fixed: Vec<LoocvRow>,
    /// Empty when no learned kind was evaluated.
    pub folds: Vec<FoldRecord>,
    pub predictions: Vec<FoldPrediction>,
}

pub fn run_loocv(cases: &[LongitudinalCase], kinds: &[ModelKind], cfg: &RunConfig) -> Result<LoocvReport> {
    run_loocv_with(cases, kinds, cfg, LoocvOptions::default())
}

struct Prepared {
    features: CaseFeatures,
    t12: Vec<PatchSample>,
    t23: Vec<PatchSample>,
    t123: Vec<PatchSample>,
    validation: Vec<PatchSample>,
}

fn prepare(case: &LongitudinalCase, cfg: &RunConfig, learned: bool) -> Result<Prepared> {
    let aligned = align_to_tumor_center(case)?;
    let features = prepare_case(&aligned, &cfg.flow)?;
    let draw = |tag, seed| -> Result<Vec<PatchSample>> {
        if learned {
            pair_samples(&features, tag, &cfg.sampling, seed)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Prepared {
        t12: draw(PairTag::T1T2, cfg.seed)?,
        t23: draw(PairTag::T2T3, cfg.seed)?,
        t123: draw(PairTag::T12T3, cfg.seed)?,
        validation: if learned {
            validation_samples(&features, &cfg.sampling, cfg.seed)?
        } else {
            Vec::new()
        },
        features,
    })
}

pub fn run_loocv_with(cases: &[LongitudinalCase], kinds: &[ModelKind], cfg: &RunConfig, opts: LoocvOptions) -> Result<LoocvReport> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(CoreError::InvalidInput(format!("leave-one-out needs at least 2 cases, got {}", cases.len())));
    }
    if kinds.is_empty() {
        return Err(CoreError::InvalidInput("no model kinds given".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = cases.iter().find(|c| !seen.insert(c.patient_id.as_str())) {
        return Err(CoreError::InvalidInput(format!("duplicate patient id '{}'", dup.patient_id)));
    }
    let learned = kinds.iter().any(|k| matches!(k, ModelKind::Learned(_)));
    let prepared = cases
        .par_iter()
        .map(|c| {
            prepare(c, cfg, learned).map_err(|e| CoreError::Fold {
                patient: c.patient_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Vec<Result<Prepared>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let folds = (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            run_fold(&prepared, i, kinds, cfg, opts).map_err(|e| CoreError::Fold {
                patient: prepared[i].features.patient_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Vec<Result<FoldOutput>>>();

    let mut outputs = Vec::with_capacity(folds.len());
    for f in folds {
        outputs.push(f?);
    }
    let mut report = LoocvReport::default();
    for k in kinds {
        for o in &outputs {
            report.personalized.extend(o.personalized.iter().filter(|r| r.kind == *k).cloned());
            report.fixed.extend(o.fixed.iter().filter(|r| r.kind == *k).cloned());
        }
    }
    for o in outputs {
        report.folds.extend(o.record);
        report.predictions.extend(o.predictions);
    }
    Ok(report)
}

struct FoldOutput {
    personalized: Vec<LoocvRow>,
    fixed: Vec<LoocvRow>,
    record: Option<FoldRecord>,
    predictions: Vec<FoldPrediction>,
}

fn stream(t: &TrainedNetwork, policy: SnapshotPolicy) -> Result<StreamModel> {
    Ok(StreamModel {
        checkpoint: personalize_snapshot(&t.snapshots, &t.val_loss, policy)?.clone(),
        groups: t.groups.clone(),
        input_scale: t.input_scale,
    })
}

fn run_fold(all: &[Prepared], target: usize, kinds: &[ModelKind], cfg: &RunConfig, opts: LoocvOptions) -> Result<FoldOutput> {
    let t = &all[target];
    let f = &t.features;
    let truth = &f.masks[2];
    let mut record = None;
    let mut predictions = Vec::new();
    let mut keep = |kind: ModelKind, zone: GrowthZone, predicted: &TumorMask| {
        if opts.keep_predictions {
            predictions.push(FoldPrediction {
                patient_id: f.patient_id.clone(),
                kind,
                zone,
                predicted: predicted.clone(),
                truth: truth.clone(),
            });
        }
    };
    let learned: Vec<ArchitectureKind> = kinds
        .iter()
        .filter_map(|k| match k {
            ModelKind::Learned(a) => Some(*a),
            ModelKind::Linear => None,
        })
        .collect();

    let mut rows_p = Vec::new();
    let mut rows_f = Vec::new();
    if !learned.is_empty() {
        let mut population = PopulationSet::default();
        for (j, p) in all.iter().enumerate() {
            if j != target {
                population.pairs.extend(p.t12.iter().chain(&p.t23));
                population.triplets.extend(&p.t123);
            }
        }
        let validation: Vec<&PatchSample> = t.validation.iter().collect();
        let train = |kind| -> Result<TrainedNetwork> {
            Ok(train_population(kind, &population, &validation, cfg)?.remove(0))
        };
        let needs = |k: ArchitectureKind| learned.contains(&k);

        // The invasion network is trained in every fold: its t1 -> t2
        // forecast is what the threshold is fitted on.
        let invasion = train(ArchitectureKind::Invasion)?;
        let expansion = if needs(ArchitectureKind::Expansion) || needs(ArchitectureKind::LateFusion) {
            Some(train(ArchitectureKind::Expansion)?)
        } else {
            None
        };
        let early = needs(ArchitectureKind::EarlyFusion).then(|| train(ArchitectureKind::EarlyFusion)).transpose()?;
        let end2end = needs(ArchitectureKind::EndToEnd).then(|| train(ArchitectureKind::EndToEnd)).transpose()?;

        let inv_p = stream(&invasion, SnapshotPolicy::LowestValidation)?;
        let inv_f = stream(&invasion, SnapshotPolicy::Final)?;
        let fusion = SnapshotPolicy::Epoch(cfg.fusion_epochs);

        let zone1 = growth_zone(&f.masks[0], cfg.zone_margin)?;
        let prob1 = probability_map(std::slice::from_ref(&inv_p), &f.invasion_source(0), &zone1, cfg.predict_batch)?;
        let choice = personalize_threshold(&prob1, &zone1, &f.masks[1], &cfg.tau_grid)?;
        record = Some(FoldRecord {
            patient_id: f.patient_id.clone(),
            invasion_epoch: inv_p.checkpoint.epoch,
            validation_curve: invasion.val_loss.clone(),
            tau: choice.tau,
            tau_dice: choice.dice,
            tau_degenerate: choice.degenerate,
            tau_curve: choice.curve.clone(),
        });

        let zone2 = growth_zone(&f.masks[1], cfg.zone_margin)?;
        let joint = f.joint_source();
        let map = |m: &StreamModel| probability_map(std::slice::from_ref(m), &joint, &zone2, cfg.predict_batch);
        let inv_map_p = map(&inv_p)?;
        let inv_map_f = if inv_f.checkpoint.epoch == inv_p.checkpoint.epoch {
            inv_map_p.clone()
        } else {
            map(&inv_f)?
        };
        let other = |t: &Option<TrainedNetwork>| -> Result<Option<(Volume3D, usize)>> {
            t.as_ref()
                .map(|t| {
                    let s = stream(t, fusion)?;
                    Ok((map(&s)?, s.checkpoint.epoch))
                })
                .transpose()
        };
        let exp_map = other(&expansion)?;
        let early_map = other(&early)?;
        let e2e_map = other(&end2end)?;

        let (ep_p, ep_f) = (inv_p.checkpoint.epoch, inv_f.checkpoint.epoch);
        for k in &learned {
            let (pm, fm, epochs_p, epochs_f) = match k {
                ArchitectureKind::Invasion => (inv_map_p.clone(), inv_map_f.clone(), vec![ep_p], vec![ep_f]),
                ArchitectureKind::LateFusion => {
                    let (e, ee) = exp_map.as_ref().expect("expansion trained for late fusion");
                    (
                        average_maps(&[inv_map_p.clone(), e.clone()]),
                        average_maps(&[inv_map_f.clone(), e.clone()]),
                        vec![ep_p, *ee],
                        vec![ep_f, *ee],
                    )
                }
                ArchitectureKind::Expansion | ArchitectureKind::EarlyFusion | ArchitectureKind::EndToEnd => {
                    let src = match k {
                        ArchitectureKind::Expansion => &exp_map,
                        ArchitectureKind::EarlyFusion => &early_map,
                        _ => &e2e_map,
                    };
                    let (m, e) = src.as_ref().expect("network trained for requested kind");
                    (m.clone(), m.clone(), vec![*e], vec![*e])
                }
            };
            let pred_p = threshold_in_zone(&pm, &zone2, choice.tau)?;
            let pred_f = threshold_in_zone(&fm, &zone2, FIXED_TAU)?;
            keep(ModelKind::Learned(*k), zone2, &pred_p);
            rows_p.push(LoocvRow {
                patient_id: f.patient_id.clone(),
                kind: ModelKind::Learned(*k),
                metrics: compute_metrics(&pred_p, truth)?,
                tau: Some(choice.tau),
                epochs: epochs_p,
            });
            rows_f.push(LoocvRow {
                patient_id: f.patient_id.clone(),
                kind: ModelKind::Learned(*k),
                metrics: compute_metrics(&pred_f, truth)?,
                tau: Some(FIXED_TAU),
                epochs: epochs_f,
            });
        }
    }
    if kinds.contains(&ModelKind::Linear) {
        let pred = linear_predict(&f.masks[0], &f.masks[1])?;
        let zone2 = growth_zone(&f.masks[1], cfg.zone_margin)?;
        keep(ModelKind::Linear, zone2, &pred);
        let row = LoocvRow {
            patient_id: f.patient_id.clone(),
            kind: ModelKind::Linear,
            metrics: compute_metrics(&pred, truth)?,
            tau: None,
            epochs: Vec::new(),
        };
        rows_p.push(row.clone());
        rows_f.push(row);
    }
    Ok(FoldOutput {
        personalized: rows_p,
        fixed: rows_f,
        record,
        predictions,
    })
}
