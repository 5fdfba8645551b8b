//! Acceptance suite. Runs every criterion in sequence so wall-clock budgets
//! are not shared with other work, prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use tumorcast_core::evalharness::{
    compute_metrics, parse_kinds, run_loocv, summarize, KindSummary, LoocvReport, ModelKind,
};
use tumorcast_core::growthmodels::{instantiate_architecture, ArchitectureConfig, ArchitectureKind};
use tumorcast_core::motion::{assemble_expansion_channels, build_growth_map, estimate_flow, flow_to_rgb, rgb_to_flow, FlowParams};
use tumorcast_core::synthgen::generate_cohort;
use tumorcast_core::{RunConfig, TumorMask};
use tumorcast_nnet::gradcheck::{check_network, layer_suite};
use tumorcast_nnet::Shape;

const SP: [f64; 3] = [1.0, 1.0, 1.0];

/// xorshift64*; the suite needs reproducible masks, nothing more.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn random_mask(rng: &mut Rng, d: [usize; 3], density: f64) -> TumorMask {
    TumorMask::from_fn(d, SP, |_, _, _| rng.unit() < density).unwrap()
}

fn random_pair(rng: &mut Rng, max: usize) -> (TumorMask, TumorMask) {
    let d = [0; 3].map(|_| 1 + rng.below(max as u64) as usize);
    let (pa, pb) = (0.02 + 0.7 * rng.unit(), 0.02 + 0.7 * rng.unit());
    let a = random_mask(rng, d, pa);
    let b = random_mask(rng, d, pb);
    (a, b)
}

fn disc(d: [usize; 3], cx: f64, cy: f64, r: f64) -> TumorMask {
    TumorMask::from_fn(d, SP, |x, y, _| (x as f64 - cx).hypot(y as f64 - cy) <= r).unwrap()
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.1?}, budget {budget:?}"))
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng(0x5EED_0001);
    let mut checked = 0;
    let mut identities = 0;
    while checked < 200 {
        let (pred, truth) = random_pair(&mut rng, 32);
        let [nx, ny, nz] = truth.dims();
        let (mut tp, mut np, mut ng) = (0u64, 0u64, 0u64);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (p, g) = (pred.is_on(x, y, z), truth.is_on(x, y, z));
                    tp += (p && g) as u64;
                    np += p as u64;
                    ng += g as u64;
                }
            }
        }
        if ng == 0 {
            ensure(compute_metrics(&pred, &truth).is_err(), || "empty truth accepted".into())?;
            continue;
        }
        let m = compute_metrics(&pred, &truth).map_err(|e| e.to_string())?;
        ensure((m.tpv_vox, m.vpred_vox, m.vgt_vox) == (tp, np, ng), || format!("counts {m:?} vs {tp},{np},{ng}"))?;
        let dice = 2.0 * tp as f64 / (np + ng) as f64;
        let recall = tp as f64 / ng as f64;
        let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        let rvd = (np as f64 - ng as f64) / ng as f64;
        for (name, got, want) in [("dice", m.dice, dice), ("recall", m.recall, recall), ("precision", m.precision, precision), ("rvd", m.rvd, rvd)] {
            ensure((got - want).abs() <= 1e-12, || format!("{name} {got} vs {want}"))?;
        }
        if tp > 0 {
            ensure((m.rvd - (m.recall / m.precision - 1.0)).abs() <= 1e-12, || format!("rvd identity broken: {m:?}"))?;
            identities += 1;
        }
        checked += 1;
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{checked} pairs, {identities} identity checks, {:.2?}", t.elapsed()))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let tol = 1e-3;
    let layers = layer_suite(tol, 17);
    ensure(layers.passed(), || format!("layer suite max error {:.3e}\n{layers}", layers.max_error()))?;
    let kinds: Vec<&str> = layers.entries.iter().map(|e| e.name.as_str()).collect();
    for k in ["conv", "relu", "pool", "lrn", "fc", "dropout", "softmax"] {
        ensure(kinds.iter().any(|n| n.contains(k)), || format!("no {k} entry in {kinds:?}"))?;
    }
    let spec = instantiate_architecture(ArchitectureKind::Invasion, &ArchitectureConfig::default(), 0.5, 3)
        .map_err(|e| e.to_string())?
        .remove(0);
    let net = check_network(&spec, 2, 3, 6, tol).map_err(|e| e.to_string())?;
    ensure(net.passed(), || format!("invasion network max error {:.3e}\n{net}", net.max_error()))?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} layer checks max {:.1e}, invasion net {} checks max {:.1e}, {:.1?}",
        layers.entries.len(),
        layers.max_error(),
        net.entries.len(),
        net.max_error(),
        t.elapsed()
    ))
}

fn flow_recovery() -> Outcome {
    let t = Instant::now();
    let d = [64, 64, 3];
    let a = disc(d, 28.0, 30.0, 9.0);
    let b = disc(d, 31.0, 32.0, 9.0);
    let p = FlowParams::default();
    let f = estimate_flow(&a, &b, &p).map_err(|e| e.to_string())?;
    let (mut epe, mut n) = (0.0f64, 0usize);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if a.is_on(x, y, z) {
                    let (u, v) = f.at(x, y, z);
                    epe += (u as f64 - 3.0).hypot(v as f64 - 2.0);
                    n += 1;
                }
            }
        }
    }
    let epe = epe / n as f64;
    ensure(epe < 0.5, || format!("mean endpoint error {epe:.3}"))?;
    let still = estimate_flow(&a, &a, &p).map_err(|e| e.to_string())?;
    let mags: Vec<f64> = still.magnitudes().collect();
    let idle = mags.iter().sum::<f64>() / mags.len() as f64;
    ensure(idle < 0.05, || format!("identity mean |flow| {idle:.4}"))?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("EPE {epe:.3}, identity mean |flow| {idle:.2e}, {:.2?}", t.elapsed()))
}

fn angle_deg(u0: f64, v0: f64, u1: f64, v1: f64) -> f64 {
    let e = (v0.atan2(u0) - v1.atan2(u1)).abs();
    e.min(std::f64::consts::TAU - e).to_degrees()
}

fn encoding_exactness() -> Outcome {
    let mut rng = Rng(0x5EED_0004);
    for i in 0..100 {
        let (a, b) = random_pair(&mut rng, 24);
        let g = build_growth_map(&a, &b).map_err(|e| e.to_string())?;
        let [nx, ny, nz] = a.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let want = match (a.is_on(x, y, z), b.is_on(x, y, z)) {
                        (true, true) => 255.0,
                        (false, true) => 170.0,
                        (true, false) => 85.0,
                        (false, false) => 0.0,
                    };
                    let got = g.get(x, y, z);
                    ensure(got == want, || format!("pair {i} voxel ({x},{y},{z}): {got} vs {want}"))?;
                }
            }
        }
    }
    // the whole wheel at a spread of magnitudes
    let mut worst = 0.0f64;
    for step in 0..720 {
        let th = step as f64 * std::f64::consts::TAU / 720.0;
        for frac in [0.25, 0.5, 0.75, 1.0] {
            let (u, v) = (frac * 4.0 * th.cos(), frac * 4.0 * th.sin());
            let (du, dv) = rgb_to_flow(flow_to_rgb(u, v, 4.0).map(f64::from), 4.0);
            worst = worst.max(angle_deg(u, v, du, dv));
        }
    }
    ensure(worst < 3.0, || format!("wheel decode off by {worst:.2} deg"))?;
    // decoding the encoded channels of an estimated field
    let d = [48, 48, 1];
    let (img, flow) = assemble_expansion_channels(&disc(d, 22.0, 22.0, 6.0), &disc(d, 24.0, 23.0, 8.0), &FlowParams::default())
        .map_err(|e| e.to_string())?;
    let mut field_worst = 0.0f64;
    let mut decoded = 0;
    for y in 0..48 {
        for x in 0..48 {
            let (u, v) = flow.at(x, y, 0);
            let (u, v) = (u as f64, v as f64);
            if u.hypot(v) < 0.25 * img.max_magnitude {
                continue;
            }
            let rgb = [img.r.get(x, y, 0), img.g.get(x, y, 0), img.b.get(x, y, 0)].map(f64::from);
            let (du, dv) = rgb_to_flow(rgb, img.max_magnitude);
            field_worst = field_worst.max(angle_deg(u, v, du, dv));
            decoded += 1;
        }
    }
    ensure(decoded > 0, || "no voxel above a quarter of the saturation magnitude".into())?;
    ensure(field_worst < 3.0, || format!("field decode off by {field_worst:.2} deg"))?;
    Ok(format!("100 growth maps exact, wheel max {worst:.2} deg, field max {field_worst:.2} deg over {decoded} voxels"))
}

fn shape_audit() -> Outcome {
    let arch = ArchitectureConfig::default();
    let build = |k| instantiate_architecture(k, &arch, 0.5, 1).map_err(|e| e.to_string());
    let s = |h, c| Shape::new(1, h, h, c);
    let single = build(ArchitectureKind::Invasion)?.remove(0);
    let trace = single.shape_trace().map_err(|e| e.to_string())?;
    let want = [
        ("invasion.input", s(17, 3)),
        ("invasion.conv1", s(17, 64)),
        ("invasion.pool1", s(8, 64)),
        ("invasion.conv2", s(8, 128)),
        ("invasion.conv3", s(8, 256)),
        ("invasion.conv4", s(8, 512)),
        ("invasion.pool2", s(4, 512)),
        ("trunk.fc1", s(1, 256)),
        ("trunk.fc2", s(1, 2)),
    ];
    for (label, shape) in want {
        ensure(trace.get(label) == Some(shape), || format!("{label}: {:?} vs {shape:?}", trace.get(label)))?;
    }
    let e2e = build(ArchitectureKind::EndToEnd)?.remove(0);
    let trace = e2e.shape_trace().map_err(|e| e.to_string())?;
    for (label, shape) in [
        ("invasion.conv4", s(8, 512)),
        ("expansion.conv4", s(8, 512)),
        ("concat", s(8, 1024)),
        ("trunk.conv1", s(8, 512)),
        ("trunk.pool1", s(4, 512)),
        ("trunk.fc1", s(1, 256)),
        ("trunk.fc2", s(1, 2)),
    ] {
        ensure(trace.get(label) == Some(shape), || format!("end2end {label}: {:?} vs {shape:?}", trace.get(label)))?;
    }
    let count = |specs: Vec<tumorcast_nnet::NetworkSpec>| -> Result<usize, String> {
        specs.iter().map(|s| s.param_count().map_err(|e| e.to_string())).sum()
    };
    let n_single = count(vec![single])?;
    let n_e2e = count(vec![e2e])?;
    let n_late = count(build(ArchitectureKind::LateFusion)?)?;
    // weights plus biases per layer of the 3-channel stream, by hand
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let by_hand = conv(3, 3, 64) + conv(3, 64, 128) + conv(3, 128, 256) + conv(3, 256, 512) + (4 * 4 * 512 * 256 + 256) + (256 * 2 + 2);
    ensure(n_single == by_hand, || format!("single count {n_single} vs {by_hand}"))?;
    ensure(n_single < n_e2e && n_e2e < n_late, || format!("ordering {n_single} / {n_e2e} / {n_late}"))?;
    Ok(format!("shapes match, params single {n_single} < end2end {n_e2e} < late {n_late}"))
}

const COHORT_SEED: u64 = 7;

static LOOCV: OnceLock<Result<(LoocvReport, Duration), String>> = OnceLock::new();

fn cohort_run() -> Result<&'static (LoocvReport, Duration), String> {
    LOOCV
        .get_or_init(|| {
            let t = Instant::now();
            let cohort: Vec<_> = generate_cohort(10, [6, 2, 2], COHORT_SEED)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|(c, _)| c)
                .collect();
            let kinds = parse_kinds("invasion,expansion,early,late,end2end,linear").map_err(|e| e.to_string())?;
            let report = run_loocv(&cohort, &kinds, &RunConfig::desk()).map_err(|e| e.to_string())?;
            Ok((report, t.elapsed()))
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn kind_summary<'a>(s: &'a [KindSummary], kind: &str) -> Result<&'a KindSummary, String> {
    s.iter().find(|k| k.kind == kind).ok_or_else(|| format!("no rows for {kind}"))
}

fn cohort_loocv() -> Outcome {
    let (report, elapsed) = cohort_run()?;
    let sum = summarize(&report.personalized);
    let linear = kind_summary(&sum, "linear")?.dice.mean;
    let mut line = format!("linear {:.3}", linear);
    let mut failures = Vec::new();
    for k in ArchitectureKind::ALL {
        let d = kind_summary(&sum, k.name())?.dice.mean;
        write!(line, ", {k} {d:.3}").unwrap();
        if d < linear {
            failures.push(format!("{k} {d:.3} < linear {linear:.3}"));
        }
    }
    let late = kind_summary(&sum, "late")?.dice.mean;
    if late < 0.80 {
        failures.push(format!("late {late:.3} < 0.80"));
    }
    if *elapsed >= Duration::from_secs(30 * 60) {
        failures.push(format!("took {elapsed:.0?}"));
    }
    write!(line, ", {:.0?} on {} thread(s)", elapsed, rayon::current_num_threads()).unwrap();
    if failures.is_empty() {
        Ok(line)
    } else {
        Err(format!("{}; {line}", failures.join("; ")))
    }
}

fn personalization_effect() -> Outcome {
    let (report, _) = cohort_run()?;
    let with = summarize(&report.personalized);
    let without = summarize(&report.fixed);
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for k in ArchitectureKind::ALL {
        let (p, f) = (kind_summary(&with, k.name())?, kind_summary(&without, k.name())?);
        let (dp, df) = (p.dice.mean, f.dice.mean);
        let (rp, rf) = (100.0 * p.abs_rvd.mean, 100.0 * f.abs_rvd.mean);
        lines.push(format!("{k} dice {dp:.3} vs {df:.3} |rvd| {rp:.1} vs {rf:.1}"));
        if dp < df {
            failures.push(format!("{k} dice {dp:.3} < fixed {df:.3}"));
        }
        if rp > rf + 2.0 {
            failures.push(format!("{k} |rvd| {rp:.1} > fixed {rf:.1} + 2"));
        }
    }
    let linear_same = report
        .personalized
        .iter()
        .filter(|r| r.kind == ModelKind::Linear)
        .zip(report.fixed.iter().filter(|r| r.kind == ModelKind::Linear))
        .all(|(a, b)| a.metrics == b.metrics);
    if !linear_same {
        failures.push("linear rows differ between runs".into());
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{}; {}", failures.join("; "), lines.join("; ")))
    }
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tumorcast"))
        .args(args)
        .env_remove("TUMORCAST_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("tumorcast {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).display().to_string();
    let cfg = r#"{
        "train": {"max_epochs": 3},
        "fusion_epochs": 2,
        "arch": {"widths": [4, 4, 4, 4], "fc_units": 8, "fusion_channels": 4},
        "sampling": {"max_samples_per_pair": 60}
    }"#;
    std::fs::write(p("small.json"), cfg).map_err(|e| e.to_string())?;
    run_cli(&["--threads", "1", "--seed", "5", "synth", "--out", &p("cohort"), "--n", "3", "--mix", "1,1,1"])?;
    for run in ["a", "b"] {
        run_cli(&[
            "--profile", "desk", "--config", &p("small.json"), "--threads", "1", "--seed", "11",
            "loocv", "--cohort", &p("cohort"), "--out", &p(run), "--no-overlays",
        ])?;
    }
    let read = |f: &Path| std::fs::read(f).map_err(|e| format!("{}: {e}", f.display()));
    let mut rows = 0;
    for name in ["loocv.csv", "loocv_wo_personalization.csv"] {
        let (a, b) = (read(&dir.path().join("a").join(name))?, read(&dir.path().join("b").join(name))?);
        ensure(a == b, || format!("{name} differs between runs"))?;
        rows += a.iter().filter(|&&c| c == b'\n').count() - 1;
    }
    ensure(rows == 2 * 3 * 6, || format!("expected 36 rows, got {rows}"))?;
    Ok(format!("{rows} rows byte-identical across two runs, {:.1?}", t.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("gradient suite", gradient_suite),
        ("flow recovery", flow_recovery),
        ("encoding exactness", encoding_exactness),
        ("synthetic cohort LOOCV", cohort_loocv),
        ("personalization effect", personalization_effect),
        ("shape and parameter audit", shape_audit),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
