use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tumorcast_core::baseline::linear_predict;
use tumorcast_core::evalharness::{
    compute_metrics, format_table, parse_kinds, run_loocv_with, summarize, write_report, LoocvOptions, FIXED_TAU,
};
use tumorcast_core::growthmodels::{
    instantiate_architecture, pair_samples, personalize_snapshot, personalize_threshold, predict_volume, prepare_case,
    probability_map, select_snapshot, snapshot_loss, train_population, validation_samples, ArchitectureConfig,
    ArchitectureKind, CaseFeatures, ModelProvenance, PersonalizedModel, PopulationSet, SnapshotPolicy, StreamModel,
};
use tumorcast_core::motion::assemble_expansion_channels;
use tumorcast_core::ppm::write_ppm;
use tumorcast_core::preprocess::{assemble_invasion_channels, BloodStats};
use tumorcast_core::sampling::{growth_zone, PairTag, PatchSample};
use tumorcast_core::synthgen::{default_mix, generate_cohort, write_cohort};
use tumorcast_core::volumes::{align_to_tumor_center, load_case, load_cohort, load_mask, save_case, save_volume};
use tumorcast_core::{LongitudinalCase, Volume3D};
use tumorcast_nnet::gradcheck::{check_network, layer_suite};
use tumorcast_nnet::Checkpoint;

use crate::setup::{write_provenance, RunContext};
use crate::{CaseOut, EvaluateArgs, FlowArgs, GradcheckArgs, LoocvArgs, PersonalizeArgs, PredictArgs, SynthArgs, TrainArgs};

const TRAINING_MANIFEST: &str = "training.json";

fn aligned_case(path: &Path) -> Result<LongitudinalCase> {
    let case = load_case(path)?;
    Ok(align_to_tumor_center(&case)?)
}

fn features_of(path: &Path, ctx: &RunContext<'_>) -> Result<CaseFeatures> {
    Ok(prepare_case(&aligned_case(path)?, &ctx.cfg.flow)?)
}

pub fn synth(ctx: &RunContext<'_>, a: &SynthArgs) -> Result<ExitCode> {
    let mix = match a.mix.as_deref() {
        Some(&[n, s, k]) => [n, s, k],
        Some(m) => bail!("--mix takes three counts (nonlinear,stable,shrinking), got {}", m.len()),
        None => default_mix(a.n),
    };
    let cohort = generate_cohort(a.n, mix, ctx.cfg.seed)?;
    write_cohort(&cohort, &a.out)?;
    let ids: Vec<&str> = cohort.iter().map(|(c, _)| c.patient_id.as_str()).collect();
    let outputs: Vec<PathBuf> = ids.iter().map(|id| a.out.join(id)).collect();
    write_provenance(&a.out, ctx, &outputs, json!({ "n": a.n, "mix": mix, "patients": ids }))?;
    println!("wrote {} cases to {}", ids.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn save_all(dir: &Path, named: &[(String, &Volume3D)]) -> Result<Vec<PathBuf>> {
    named
        .iter()
        .map(|(name, v)| {
            let p = dir.join(format!("{name}.vol.json"));
            save_volume(v, &p)?;
            Ok(p)
        })
        .collect()
}

pub fn preprocess(ctx: &RunContext<'_>, a: &CaseOut) -> Result<ExitCode> {
    let case = aligned_case(&a.case)?;
    let blood = BloodStats::of(&case);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_case(&case, &a.out.join("aligned"))?;
    let mut outputs = vec![a.out.join("aligned")];
    let mut magnitudes = Vec::new();
    for (k, tp) in case.timepoints.iter().enumerate() {
        let inv = assemble_invasion_channels(tp, blood)?;
        let names = ["suv", "icvf", "mask"].map(|c| format!("inv_t{}_{c}", k + 1));
        let named: Vec<(String, &Volume3D)> = names.into_iter().zip(inv.channels()).collect();
        outputs.extend(save_all(&a.out, &named)?);
    }
    for k in 0..2 {
        let (exp, _) = assemble_expansion_channels(&case.timepoints[k].mask, &case.timepoints[k + 1].mask, &ctx.cfg.flow)?;
        let names = ["r", "g", "b", "growth"].map(|c| format!("exp_t{}t{}_{c}", k + 1, k + 2));
        let named: Vec<(String, &Volume3D)> = names.into_iter().zip(exp.channels()).collect();
        outputs.extend(save_all(&a.out, &named)?);
        magnitudes.push(exp.max_magnitude);
    }
    write_provenance(
        &a.out,
        ctx,
        &outputs,
        json!({ "patient_id": case.patient_id, "alignment": case.alignment, "flow_max_magnitude": magnitudes }),
    )?;
    println!("{}: {} channel volumes in {}", case.patient_id, outputs.len() - 1, a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn flow(ctx: &RunContext<'_>, a: &FlowArgs) -> Result<ExitCode> {
    let case = aligned_case(&a.io.case)?;
    let k = a.from as usize - 1;
    let (m1, m2) = (&case.timepoints[k].mask, &case.timepoints[k + 1].mask);
    let (exp, field) = assemble_expansion_channels(m1, m2, &ctx.cfg.flow)?;
    let spacing = m1.volume().spacing();
    let u = Volume3D::new(field.dims, spacing, field.u.clone())?;
    let v = Volume3D::new(field.dims, spacing, field.v.clone())?;
    fs::create_dir_all(&a.io.out).with_context(|| format!("creating {}", a.io.out.display()))?;
    let mut outputs = save_all(
        &a.io.out,
        &[("flow_u".into(), &u), ("flow_v".into(), &v), ("growth".into(), &exp.growth)],
    )?;
    let [nx, ny, nz] = field.dims;
    let mut slices = Vec::new();
    for z in 0..nz {
        let any = (0..ny).any(|y| (0..nx).any(|x| m1.is_on(x, y, z) || m2.is_on(x, y, z)));
        if !any {
            continue;
        }
        let mut rgb = Vec::with_capacity(nx * ny * 3);
        for y in 0..ny {
            for x in 0..nx {
                rgb.extend([&exp.r, &exp.g, &exp.b].map(|c| c.get(x, y, z) as u8));
            }
        }
        let p = a.io.out.join(format!("flow_z{z:03}.ppm"));
        write_ppm(&p, nx, ny, &rgb)?;
        outputs.push(p);
        slices.push(z);
    }
    write_provenance(
        &a.io.out,
        ctx,
        &outputs,
        json!({ "patient_id": case.patient_id, "interval": [k + 1, k + 2], "max_magnitude": exp.max_magnitude, "slices": slices }),
    )?;
    println!("{} slices rendered, max magnitude {:.3}", slices.len(), exp.max_magnitude);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    groups: Vec<[usize; 2]>,
    input_scale: f32,
    train_loss: Vec<f64>,
    snapshots: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TrainingManifest {
    kind: ArchitectureKind,
    patients: Vec<String>,
    pair_samples: usize,
    triplet_samples: usize,
    networks: Vec<NetworkEntry>,
}

pub fn train(ctx: &RunContext<'_>, a: &TrainArgs) -> Result<ExitCode> {
    let kind: ArchitectureKind = a.kind.parse()?;
    let mut cases = load_cohort(&a.cohort)?;
    for id in &a.exclude {
        if !cases.iter().any(|c| &c.patient_id == id) {
            bail!("excluded patient '{id}' is not in {}", a.cohort.display());
        }
    }
    cases.retain(|c| !a.exclude.contains(&c.patient_id));
    if cases.len() < 2 {
        bail!("population training needs at least 2 patients, got {}", cases.len());
    }
    let cfg = ctx.cfg;
    let per_case = cases
        .par_iter()
        .map(|c| -> Result<[Vec<PatchSample>; 3]> {
            let f = prepare_case(&align_to_tumor_center(c)?, &cfg.flow)?;
            let draw = |t| pair_samples(&f, t, &cfg.sampling, cfg.seed);
            Ok([draw(PairTag::T1T2)?, draw(PairTag::T2T3)?, draw(PairTag::T12T3)?])
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut pop = PopulationSet::default();
    for [a12, a23, a123] in &per_case {
        pop.pairs.extend(a12.iter().chain(a23));
        pop.triplets.extend(a123);
    }
    let trained = train_population(kind, &pop, &[], cfg)?;
    let mut outputs = Vec::new();
    let mut networks = Vec::new();
    for t in &trained {
        let name = t.snapshots[0].spec.name.clone();
        let mut snaps = Vec::new();
        for ck in &t.snapshots {
            let rel = format!("{name}/epoch_{:02}.ckpt.json", ck.epoch);
            let p = a.out.join(&rel);
            fs::create_dir_all(p.parent().expect("snapshot dir")).with_context(|| format!("creating {}", p.display()))?;
            ck.save(&p)?;
            outputs.push(p);
            snaps.push(rel);
        }
        networks.push(NetworkEntry {
            name,
            groups: t.groups.clone(),
            input_scale: t.input_scale,
            train_loss: t.train_loss.clone(),
            snapshots: snaps,
        });
    }
    let manifest = TrainingManifest {
        kind,
        patients: cases.iter().map(|c| c.patient_id.clone()).collect(),
        pair_samples: pop.pairs.len(),
        triplet_samples: pop.triplets.len(),
        networks,
    };
    let mpath = a.out.join(TRAINING_MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", mpath.display()))?;
    outputs.push(mpath);
    write_provenance(&a.out, ctx, &outputs, json!({ "kind": kind, "patients": manifest.patients }))?;
    for n in &manifest.networks {
        println!("{}: {} epochs, final training loss {:.4}", n.name, n.snapshots.len(), n.train_loss.last().copied().unwrap_or(f64::NAN));
    }
    Ok(ExitCode::SUCCESS)
}

struct LoadedNetwork {
    name: String,
    groups: Vec<[usize; 2]>,
    input_scale: f32,
    snapshots: Vec<Checkpoint>,
}

fn load_training(dir: &Path) -> Result<(ArchitectureKind, Vec<LoadedNetwork>)> {
    let mpath = dir.join(TRAINING_MANIFEST);
    let text = fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
    let m: TrainingManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", mpath.display()))?;
    let nets = m
        .networks
        .into_iter()
        .map(|n| {
            let snapshots = n
                .snapshots
                .iter()
                .map(|s| Checkpoint::load(&dir.join(s)).with_context(|| format!("loading {s}")))
                .collect::<Result<Vec<_>>>()?;
            if snapshots.is_empty() {
                bail!("{}: network {} has no snapshots", mpath.display(), n.name);
            }
            Ok(LoadedNetwork {
                name: n.name,
                groups: n.groups,
                input_scale: n.input_scale,
                snapshots,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m.kind, nets))
}

fn member(n: &LoadedNetwork, ck: &Checkpoint) -> StreamModel {
    StreamModel {
        checkpoint: ck.clone(),
        groups: n.groups.clone(),
        input_scale: n.input_scale,
    }
}

pub fn personalize(ctx: &RunContext<'_>, a: &PersonalizeArgs) -> Result<ExitCode> {
    let cfg = ctx.cfg;
    let (kind, nets) = load_training(&a.train)?;
    let f = features_of(&a.case, ctx)?;
    let external = match &a.invasion_train {
        Some(dir) => {
            let (k, mut n) = load_training(dir)?;
            if k != ArchitectureKind::Invasion {
                bail!("{} holds a {k} run, not invasion", dir.display());
            }
            Some(n.remove(0))
        }
        None => None,
    };
    let invasion = nets.iter().find(|n| n.name == "invasion").or(external.as_ref());

    let mut curve = Vec::new();
    let mut inv_member = None;
    if let Some(inv) = invasion {
        let ck = if a.no_personalization {
            personalize_snapshot(&inv.snapshots, &[], SnapshotPolicy::Final)?
        } else {
            let val = validation_samples(&f, &cfg.sampling, cfg.seed)?;
            let refs: Vec<&PatchSample> = val.iter().collect();
            curve = inv
                .snapshots
                .iter()
                .map(|ck| snapshot_loss(ck, &inv.groups, inv.input_scale, &refs))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            &inv.snapshots[select_snapshot(&curve)?]
        };
        inv_member = Some(member(inv, ck));
    }
    let members: Vec<StreamModel> = nets
        .iter()
        .map(|n| -> Result<StreamModel> {
            if n.name == "invasion" {
                return Ok(inv_member.clone().expect("invasion member selected"));
            }
            let policy = if a.no_personalization { SnapshotPolicy::Final } else { SnapshotPolicy::Epoch(cfg.fusion_epochs) };
            Ok(member(n, personalize_snapshot(&n.snapshots, &[], policy)?))
        })
        .collect::<Result<_>>()?;

    let zone1 = growth_zone(&f.masks[0], cfg.zone_margin)?;
    let (tau, choice, paper_mode) = if a.no_personalization {
        (FIXED_TAU, None, true)
    } else if let Some(m) = &inv_member {
        let prob = probability_map(std::slice::from_ref(m), &f.invasion_source(0), &zone1, cfg.predict_batch)?;
        let c = personalize_threshold(&prob, &zone1, &f.masks[1], &cfg.tau_grid)?;
        (c.tau, Some(c), true)
    } else {
        // no invasion network: the kind's own t1 -> t2 forecast, reading the
        // interval's expansion channels alongside the t1 invasion channels
        let mut src = f.invasion_source(0);
        src.extend(f.expansion12.channels());
        let prob = probability_map(&members, &src, &zone1, cfg.predict_batch)?;
        let c = personalize_threshold(&prob, &zone1, &f.masks[1], &cfg.tau_grid)?;
        (c.tau, Some(c), false)
    };
    if let Some(c) = &choice {
        if c.degenerate {
            eprintln!("warning: threshold fit found no overlap on t1 -> t2; using tau {:.2}", c.tau);
        }
    }
    let model = PersonalizedModel {
        kind,
        tau,
        provenance: ModelProvenance {
            seed: cfg.seed,
            epochs: members.iter().map(|m| m.checkpoint.epoch).collect(),
            validation_curve: curve,
            tau_dice: choice.as_ref().map(|c| c.dice),
            tau_degenerate: choice.as_ref().is_some_and(|c| c.degenerate),
            personalized: !a.no_personalization,
        },
        members,
    };
    model.save(&a.out)?;
    write_provenance(
        &a.out,
        ctx,
        &[a.out.join("model.json")],
        json!({
            "patient_id": f.patient_id,
            "kind": kind,
            "tau": tau,
            "tau_curve": choice.as_ref().map(|c| &c.curve),
            "own_threshold": !paper_mode,
            "epochs": model.provenance.epochs,
        }),
    )?;
    println!("{} {kind}: tau {tau:.2}, epochs {:?}", f.patient_id, model.provenance.epochs);
    Ok(ExitCode::SUCCESS)
}

pub fn predict(ctx: &RunContext<'_>, a: &PredictArgs) -> Result<ExitCode> {
    let cfg = ctx.cfg;
    fs::create_dir_all(&a.io.out).with_context(|| format!("creating {}", a.io.out.display()))?;
    let mask_path = a.io.out.join("prediction.vol.json");
    let (outputs, details) = if a.model == "linear" {
        let case = aligned_case(&a.io.case)?;
        let pred = linear_predict(&case.timepoints[0].mask, &case.timepoints[1].mask)?;
        save_volume(pred.volume(), &mask_path)?;
        (vec![mask_path], json!({ "patient_id": case.patient_id, "kind": "linear", "voxels": pred.count() }))
    } else {
        let model = PersonalizedModel::load(Path::new(&a.model))?;
        let f = features_of(&a.io.case, ctx)?;
        let (prob, pred) = predict_volume(&model, &f, cfg.zone_margin, cfg.predict_batch)?;
        let prob_path = a.io.out.join("probability.vol.json");
        save_volume(&prob, &prob_path)?;
        save_volume(pred.volume(), &mask_path)?;
        (
            vec![prob_path, mask_path],
            json!({
                "patient_id": f.patient_id,
                "kind": model.kind,
                "tau": model.tau,
                "epochs": model.provenance.epochs,
                "model_seed": model.provenance.seed,
                "seeds": model.members.iter().map(|m| m.checkpoint.seed).collect::<Vec<_>>(),
                "flow": cfg.flow,
                "voxels": pred.count(),
            }),
        )
    };
    write_provenance(&a.io.out, ctx, &outputs, details)?;
    println!("prediction written to {}", a.io.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(ctx: &RunContext<'_>, a: &EvaluateArgs) -> Result<ExitCode> {
    let pred = load_mask(&a.pred)?;
    let truth = match (&a.truth, &a.case) {
        (Some(t), _) => load_mask(t)?,
        (None, Some(c)) => aligned_case(c)?.timepoints[2].mask.clone(),
        (None, None) => bail!("either --truth or --case is required"),
    };
    let m = compute_metrics(&pred, &truth)?;
    let text = serde_json::to_string_pretty(&m)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        write_provenance(dir, ctx, &[out.clone()], serde_json::Value::Null)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn loocv(ctx: &RunContext<'_>, a: &LoocvArgs) -> Result<ExitCode> {
    let cases = load_cohort(&a.cohort)?;
    let kinds = parse_kinds(&a.kinds)?;
    let report = run_loocv_with(&cases, &kinds, ctx.cfg, LoocvOptions { keep_predictions: !a.no_overlays })?;
    write_report(&report, &a.out)?;
    let mut outputs = vec![
        a.out.join("loocv.csv"),
        a.out.join("loocv_wo_personalization.csv"),
        a.out.join("summary.json"),
    ];
    if !a.no_overlays {
        outputs.push(a.out.join("overlays"));
    }
    write_provenance(
        &a.out,
        ctx,
        &outputs,
        json!({ "patients": cases.iter().map(|c| &c.patient_id).collect::<Vec<_>>(), "kinds": kinds }),
    )?;
    println!("with personalization\n{}", format_table(&summarize(&report.personalized)));
    println!("without personalization (tau {FIXED_TAU:.2}, final epoch)\n{}", format_table(&summarize(&report.fixed)));
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(ctx: &RunContext<'_>, a: &GradcheckArgs) -> Result<ExitCode> {
    let mut report = layer_suite(a.tolerance, ctx.cfg.seed);
    let spec = instantiate_architecture(ArchitectureKind::Invasion, &ArchitectureConfig::default(), 0.5, ctx.cfg.seed)?.remove(0);
    let net = check_network(&spec, 2, ctx.cfg.seed, a.probes, a.tolerance)?;
    report.entries.extend(net.entries.into_iter().map(|mut e| {
        e.name = format!("invasion/{}", e.name);
        e
    }));
    print!("{report}");
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_error(), a.tolerance);
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
