//! CSV, JSON and overlay output of a leave-one-out run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::evalharness::loocv::{LoocvReport, LoocvRow};
use crate::ppm::write_ppm;
use crate::sampling::GrowthZone;
use crate::volumes::TumorMask;
use crate::{CoreError, Result};

pub const CSV_HEADER: &str = "patient_id,kind,recall,precision,dice,rvd,tpv_vox,vpred_vox,vgt_vox,tau,epochs";

/// Fixed-precision rendering so reruns compare byte for byte. `tau` is empty
/// for the linear baseline; `epochs` joins member snapshot epochs with `+`.
pub fn metrics_csv(rows: &[LoocvRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let tau = r.tau.map(|t| format!("{t:.2}")).unwrap_or_default();
        let epochs: Vec<String> = r.epochs.iter().map(usize::to_string).collect();
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            r.patient_id,
            r.kind,
            m.recall,
            m.precision,
            m.dice,
            m.rvd,
            m.tpv_vox,
            m.vpred_vox,
            m.vgt_vox,
            tau,
            epochs.join("+")
        )
        .expect("write to String");
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[LoocvRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// `mean ± std [min, max]` in percent.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1} [{:.1}, {:.1}]", 100.0 * self.mean, 100.0 * self.std, 100.0 * self.min, 100.0 * self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: String,
    pub n: usize,
    pub recall: Stat,
    pub precision: Stat,
    pub dice: Stat,
    pub rvd: Stat,
    pub abs_rvd: Stat,
}

/// One summary per kind, in order of first appearance.
pub fn summarize(rows: &[LoocvRow]) -> Vec<KindSummary> {
    let mut kinds: Vec<String> = Vec::new();
    for r in rows {
        let k = r.kind.to_string();
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds
        .into_iter()
        .map(|k| {
            let sel: Vec<&LoocvRow> = rows.iter().filter(|r| r.kind.name() == k).collect();
            let col = |f: fn(&LoocvRow) -> f64| Stat::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            KindSummary {
                n: sel.len(),
                recall: col(|r| r.metrics.recall),
                precision: col(|r| r.metrics.precision),
                dice: col(|r| r.metrics.dice),
                rvd: col(|r| r.metrics.rvd),
                abs_rvd: col(|r| r.metrics.rvd.abs()),
                kind: k,
            }
        })
        .collect()
}

/// Plain-text table with one line per kind.
pub fn format_table(summaries: &[KindSummary]) -> String {
    let mut s = format!("{:<10} {:<30} {:<30} {:<30} {:<30}\n", "kind", "recall %", "precision %", "dice %", "rvd %");
    for k in summaries {
        writeln!(
            s,
            "{:<10} {:<30} {:<30} {:<30} {:<30}",
            k.kind,
            k.recall.percent(),
            k.precision.percent(),
            k.dice.percent(),
            k.rvd.percent()
        )
        .expect("write to String");
    }
    s
}

const BACKGROUND: [u8; 3] = [0, 0, 0];
const TRUTH_FILL: [u8; 3] = [48, 48, 48];
const TRUTH_EDGE: [u8; 3] = [0, 255, 0];
const PRED_EDGE: [u8; 3] = [255, 0, 0];
const BOTH_EDGE: [u8; 3] = [255, 255, 0];

fn on_edge(m: &TumorMask, x: usize, y: usize, z: usize) -> bool {
    if !m.is_on(x, y, z) {
        return false;
    }
    let [nx, ny, _] = m.dims();
    x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || {
        !(m.is_on(x - 1, y, z) && m.is_on(x + 1, y, z) && m.is_on(x, y - 1, z) && m.is_on(x, y + 1, z))
    }
}

/// One PPM per axial slice of `zone`: truth boundary green, predicted
/// boundary red, shared boundary yellow. Returns the number of slices.
pub fn write_overlays(dir: &Path, truth: &TumorMask, pred: &TumorMask, zone: &GrowthZone) -> Result<usize> {
    if truth.dims() != pred.dims() {
        return Err(CoreError::DimsMismatch("overlay masks differ in dims".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let [nx, ny, _] = truth.dims();
    let mut n = 0;
    for z in zone.z_range() {
        let mut rgb = Vec::with_capacity(nx * ny * 3);
        for y in 0..ny {
            for x in 0..nx {
                let px = match (on_edge(truth, x, y, z), on_edge(pred, x, y, z)) {
                    (true, true) => BOTH_EDGE,
                    (true, false) => TRUTH_EDGE,
                    (false, true) => PRED_EDGE,
                    _ if truth.is_on(x, y, z) => TRUTH_FILL,
                    _ => BACKGROUND,
                };
                rgb.extend_from_slice(&px);
            }
        }
        write_ppm(&dir.join(format!("z{z:03}.ppm")), nx, ny, &rgb)?;
        n += 1;
    }
    Ok(n)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    personalized: Vec<KindSummary>,
    without_personalization: Vec<KindSummary>,
    folds: &'a [crate::evalharness::loocv::FoldRecord],
}

/// `loocv.csv`, `loocv_wo_personalization.csv`, `summary.json` and, for
/// kept predictions, `overlays/<patient>/<kind>/z###.ppm`.
pub fn write_report(report: &LoocvReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    write_metrics_csv(&out_dir.join("loocv.csv"), &report.personalized)?;
    write_metrics_csv(&out_dir.join("loocv_wo_personalization.csv"), &report.fixed)?;
    let summary = SummaryFile {
        personalized: summarize(&report.personalized),
        without_personalization: summarize(&report.fixed),
        folds: &report.folds,
    };
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| CoreError::io(&path, e))?;
    for p in &report.predictions {
        let dir = out_dir.join("overlays").join(&p.patient_id).join(p.kind.name());
        write_overlays(&dir, &p.truth, &p.predicted, &p.zone)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::{compute_metrics, ModelKind};
    use crate::growthmodels::ArchitectureKind;
    use crate::volumes::VoxelBox;

    fn cube(lo: usize, hi: usize) -> TumorMask {
        TumorMask::from_fn([12, 12, 8], [1.0; 3], |x, y, z| {
            (lo..=hi).contains(&x) && (lo..=hi).contains(&y) && (2..=5).contains(&z)
        })
        .unwrap()
    }

    fn row(id: &str, kind: ModelKind, pred: &TumorMask) -> LoocvRow {
        LoocvRow {
            patient_id: id.into(),
            kind,
            metrics: compute_metrics(pred, &cube(3, 7)).unwrap(),
            tau: matches!(kind, ModelKind::Learned(_)).then_some(0.35),
            epochs: vec![12, 20],
        }
    }

    #[test]
    fn csv_layout() {
        let late = ModelKind::Learned(ArchitectureKind::LateFusion);
        let csv = metrics_csv(&[row("P01", late, &cube(3, 7)), row("P02", ModelKind::Linear, &cube(4, 7))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "P01,late,1.000000,1.000000,1.000000,0.000000,100,100,100,0.35,12+20");
        assert!(lines[2].starts_with("P02,linear,0.640000,1.000000,"));
        assert!(lines[2].ends_with(",64,64,100,,12+20"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn stats_and_summary() {
        let s = Stat::of(&[0.8, 0.9, 1.0]);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.8, 1.0));
        assert_eq!(s.percent(), "90.0 ± 10.0 [80.0, 100.0]");
        let inv = ModelKind::Learned(ArchitectureKind::Invasion);
        let rows = [row("a", inv, &cube(3, 7)), row("b", ModelKind::Linear, &cube(3, 6)), row("c", inv, &cube(4, 7))];
        let sum = summarize(&rows);
        assert_eq!(sum.len(), 2);
        assert_eq!((sum[0].kind.as_str(), sum[0].n), ("invasion", 2));
        assert!(format_table(&sum).lines().count() == 3);
    }

    #[test]
    fn one_overlay_per_zone_slice() {
        let dir = tempfile::tempdir().unwrap();
        let zone = GrowthZone {
            region: VoxelBox {
                min: [0, 0, 1],
                max: [11, 11, 6],
            },
        };
        let n = write_overlays(dir.path(), &cube(3, 7), &cube(4, 8), &zone).unwrap();
        assert_eq!(n, 6);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 6);
        let bytes = fs::read(dir.path().join("z003.ppm")).unwrap();
        assert!(bytes.starts_with(b"P6\n12 12\n255\n"));
    }
}
