// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact emission: CSV tables, SVG mixing-matrix heatmaps, and hashed
//! report bundles. Everything written here is deterministic — no
//! timestamps, no environment-dependent content — so reruns from the same
//! inputs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::analysis::{GridResult, HeadRanking, RedundancyCurve, SweepReport};
use crate::error::{Error, Result};
use crate::mixers::MixingMatrix;
use crate::tasks::SegmentMap;
use crate::tensor::Scalar;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

/// `sweep(step, layers_kept, suite, accuracy, chance)` — one row per
/// (step, suite), suites in sorted order within each step.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("step,layers_kept,suite,accuracy,chance\n");
    for s in &report.steps {
        for (suite, r) in &s.results {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                s.step, s.layers_kept, suite, r.accuracy, r.chance
            );
        }
    }
    out
}

/// `ranking(layer, head, accuracy)` — ascending accuracy order as ranked.
pub fn ranking_csv(ranking: &HeadRanking) -> String {
    let mut out = String::from("layer,head,accuracy\n");
    for (h, acc) in &ranking.entries {
        let _ = writeln!(out, "{},{},{:.6}", h.layer, h.head, acc);
    }
    out
}

/// `grid(config, label_acc, knowledge_acc)` — the four configurations in
/// grid order.
pub fn grid_csv(grid: &GridResult) -> String {
    let mut out = String::from("config,label_acc,knowledge_acc\n");
    for row in &grid.rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6}",
            row.config, row.label.accuracy, row.knowledge.accuracy
        );
    }
    out
}

/// `curve(k, suite, accuracy, rel_delta)`.
pub fn curve_csv(curve: &RedundancyCurve) -> String {
    let mut out = String::from("k,suite,accuracy,rel_delta\n");
    for p in &curve.points {
        for (suite, (acc, rel)) in &p.scores {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", p.k, suite, acc, rel);
        }
    }
    out
}

/// Rendering options for [`heatmap_svg`].
#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    /// Color scale range; None = auto from the matrix (min over nonzero
    /// entries, max over all).
    pub scale: Option<(f64, f64)>,
    /// Segment boundaries and the query position to annotate.
    pub segmap: Option<SegmentMap>,
    /// Side length of one cell in SVG units.
    pub cell: f64,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec {
            scale: None,
            segmap: None,
            cell: 12.0,
        }
    }
}

/// Render a mixing matrix as a static SVG: row-major T×T cells, darker =
/// larger, exact zeros left blank (no cell emitted), optional segment
/// boundary and query-row annotations.
pub fn heatmap_svg<E: Scalar>(m: &MixingMatrix<E>, spec: &HeatmapSpec) -> Result<String> {
    let t = m.t;
    if t == 0 {
        return Err(Error::Invalid("heatmap: empty matrix".into()));
    }
    let mf = m.to_f64();
    let (lo, hi) = match spec.scale {
        Some((lo, hi)) if hi > lo => (lo, hi),
        Some(_) => return Err(Error::Invalid("heatmap: scale max must exceed min".into())),
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in &mf.data {
                if v != 0.0 {
                    lo = lo.min(v);
                }
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                // All-zero matrix: every cell is blank; any scale works.
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        }
    };
    let c = spec.cell;
    let margin = 2.0 * c;
    let side = margin + t as f64 * c + c;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" \
         viewBox=\"0 0 {side} {side}\">"
    );
    let _ = writeln!(
        svg,
        "<title>head {} (T={t})</title>",
        m.head
    );
    // Frame around the full grid.
    let _ = writeln!(
        svg,
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" \
         fill=\"white\" stroke=\"#888\" stroke-width=\"0.5\"/>",
        t as f64 * c,
        t as f64 * c
    );
    for i in 0..t {
        for j in 0..t {
            let v = mf.entry(i, j);
            if v == 0.0 {
                continue; // exact zeros stay blank
            }
            let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            // Linear white→dark-blue ramp.
            let shade = (235.0 * (1.0 - u)) as u8;
            let x = margin + j as f64 * c;
            let y = margin + i as f64 * c;
            let _ = writeln!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{c}\" height=\"{c}\" \
                 fill=\"rgb({shade},{shade},{})\"/>",
                120 + (shade as u16 * 135 / 235) as u8
            );
        }
    }
    if let Some(sm) = &spec.segmap {
        for seg in &sm.segments {
            if seg.summary >= t {
                continue;
            }
            // Vertical tick at the summary column, horizontal at its row.
            let x = margin + seg.summary as f64 * c + 0.5 * c;
            let _ = writeln!(
                svg,
                "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{margin}\" \
                 stroke=\"#d62728\" stroke-width=\"1\"/>",
                margin - 0.8 * c
            );
        }
        if sm.q < t {
            let y = margin + sm.q as f64 * c + 0.5 * c;
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{y}\" x2=\"{margin}\" y2=\"{y}\" \
                 stroke=\"#2ca02c\" stroke-width=\"1\"/>",
                margin - 0.8 * c
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One file destined for a report bundle, tagged with the model fingerprint
/// it was produced from.
#[derive(Debug, Clone)]
pub struct ReportArtifact {
    /// Relative file name inside the bundle directory.
    pub name: String,
    /// Model parameter hash (or run fingerprint) this artifact derives from.
    pub fingerprint: String,
    pub bytes: Vec<u8>,
}

impl ReportArtifact {
    pub fn text(name: &str, fingerprint: &str, content: &str) -> Self {
        ReportArtifact {
            name: name.to_string(),
            fingerprint: fingerprint.to_string(),
            bytes: content.as_bytes().to_vec(),
        }
    }
}

/// Write every artifact into `out_dir` plus a `manifest.txt` listing each
/// file with its SHA-256. All artifacts must share one fingerprint; the
/// manifest records it. Returns the manifest text.
pub fn emit_report_bundle(artifacts: &[ReportArtifact], out_dir: &Path) -> Result<String> {
    if let Some(first) = artifacts.first() {
        if let Some(bad) = artifacts.iter().find(|a| a.fingerprint != first.fingerprint) {
            return Err(Error::Invalid(format!(
                "bundle: fingerprint mismatch between {} and {}",
                first.name, bad.name
            )));
        }
    }
    let mut names: Vec<&str> = artifacts.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("bundle: duplicate artifact name".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    let _ = writeln!(
        manifest,
        "fingerprint {}",
        artifacts.first().map(|a| a.fingerprint.as_str()).unwrap_or("-")
    );
    let mut sorted: Vec<&ReportArtifact> = artifacts.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for a in sorted {
        if a.name.contains('/') || a.name.contains("..") {
            return Err(Error::Invalid(format!(
                "bundle: artifact name {} must be a plain file name",
                a.name
            )));
        }
        std::fs::write(out_dir.join(&a.name), &a.bytes)?;
        let _ = writeln!(manifest, "{}  {}", sha256_hex(&a.bytes), a.name);
    }
    std::fs::write(out_dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{CurvePoint, GridRow, SweepStep};
    use crate::harness::BenchmarkResult;
    use crate::mixers::HeadId;
    use crate::tasks::Segment;
    use std::collections::BTreeMap;

    fn bench(suite: &str, acc: f64) -> BenchmarkResult {
        BenchmarkResult {
            suite: suite.into(),
            n: 10,
            accuracy: acc,
            chance: 0.25,
            records: vec![],
            fingerprint: "f".into(),
        }
    }

    #[test]
    fn sweep_csv_schema_and_rows() {
        let mut results = BTreeMap::new();
        results.insert("kv".to_string(), bench("kv", 0.9));
        results.insert("mc".to_string(), bench("mc", 0.8));
        let rep = SweepReport {
            kind: "cumulative-prune".into(),
            steps: vec![SweepStep {
                step: 0,
                layers_kept: 4,
                label: "full".into(),
                results,
            }],
        };
        let csv = sweep_csv(&rep);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,layers_kept,suite,accuracy,chance");
        assert_eq!(lines[1], "0,4,kv,0.900000,0.250000");
        assert_eq!(lines[2], "0,4,mc,0.800000,0.250000");
    }

    #[test]
    fn ranking_csv_keeps_rank_order() {
        let r = HeadRanking {
            baseline: 0.95,
            entries: vec![
                (HeadId::new(1, 3), 0.30),
                (HeadId::new(0, 1), 0.92),
            ],
        };
        let csv = ranking_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,head,accuracy");
        assert_eq!(lines[1], "1,3,0.300000");
        assert_eq!(lines[2], "0,1,0.920000");
    }

    #[test]
    fn grid_and_curve_csv_schemas() {
        let grid = GridResult {
            rows: vec![GridRow {
                config: "keep-both".into(),
                label: bench("mc", 0.85),
                knowledge: bench("lk", 0.7),
            }],
        };
        let g = grid_csv(&grid);
        assert!(g.starts_with("config,label_acc,knowledge_acc\n"));
        assert!(g.contains("keep-both,0.850000,0.700000"));

        let mut scores = BTreeMap::new();
        scores.insert("mc".to_string(), (0.8, -0.2));
        let curve = RedundancyCurve {
            points: vec![CurvePoint { k: 2, scores }],
        };
        let c = curve_csv(&curve);
        assert!(c.starts_with("k,suite,accuracy,rel_delta\n"));
        assert!(c.contains("2,mc,0.800000,-0.200000"));
    }

    #[test]
    fn heatmap_identity_renders_diagonal_only() {
        let t = 4;
        let mut data = vec![0.0f64; t * t];
        for i in 0..t {
            data[i * t + i] = 1.0;
        }
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t,
            data,
        };
        let svg = heatmap_svg(&m, &HeatmapSpec::default()).unwrap();
        // One frame rect + exactly t cell rects.
        let cells = svg.matches("<rect").count();
        assert_eq!(cells, 1 + t);
    }

    #[test]
    fn heatmap_blank_cells_match_exact_zeros() {
        let m = MixingMatrix {
            head: HeadId::new(1, 2),
            t: 3,
            data: vec![0.5, 0.0, 0.0, 1e-30, 0.5, 0.0, 0.0, 0.25, 0.25],
        };
        let svg = heatmap_svg(&m, &HeatmapSpec::default()).unwrap();
        let nonzero = m.data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(svg.matches("<rect").count(), 1 + nonzero);
    }

    #[test]
    fn heatmap_annotates_segments_and_query() {
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t: 5,
            data: vec![1.0; 25],
        };
        let spec = HeatmapSpec {
            segmap: Some(SegmentMap {
                segments: vec![Segment {
                    start: 0,
                    end: 2,
                    summary: 2,
                }],
                q: 4,
            }),
            ..Default::default()
        };
        let svg = heatmap_svg(&m, &spec).unwrap();
        assert_eq!(svg.matches("<line").count(), 2);
    }

    #[test]
    fn heatmap_rejects_bad_scale() {
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t: 1,
            data: vec![1.0],
        };
        let spec = HeatmapSpec {
            scale: Some((1.0, 1.0)),
            ..Default::default()
        };
        assert!(heatmap_svg(&m, &spec).is_err());
    }

    #[test]
    fn bundle_writes_manifest_and_is_deterministic() {
        let dir = std::env::temp_dir().join("mixlab-bundle-test");
        let _ = std::fs::remove_dir_all(&dir);
        let arts = vec![
            ReportArtifact::text("b.csv", "fp", "x,y\n1,2\n"),
            ReportArtifact::text("a.csv", "fp", "p,q\n3,4\n"),
        ];
        let m1 = emit_report_bundle(&arts, &dir).unwrap();
        let m2 = emit_report_bundle(&arts, &dir).unwrap();
        assert_eq!(m1, m2);
        let on_disk = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert_eq!(on_disk, m1);
        let lines: Vec<&str> = m1.lines().collect();
        assert_eq!(lines[0], "fingerprint fp");
        // Sorted by name after the header.
        assert!(lines[1].ends_with("  a.csv"));
        assert!(lines[2].ends_with("  b.csv"));
        assert_eq!(
            lines[1].split_whitespace().next().unwrap(),
            sha256_hex(b"p,q\n3,4\n")
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn bundle_rejects_fingerprint_mismatch_and_empty_ok() {
        let dir = std::env::temp_dir().join("mixlab-bundle-test2");
        let _ = std::fs::remove_dir_all(&dir);
        let arts = vec![
            ReportArtifact::text("a.csv", "fp1", "1"),
            ReportArtifact::text("b.csv", "fp2", "2"),
        ];
        assert!(emit_report_bundle(&arts, &dir).is_err());
        let m = emit_report_bundle(&[], &dir).unwrap();
        assert_eq!(m.lines().count(), 1, "empty bundle: header only");
        let _ = std::fs::remove_dir_all(&dir);
    }
}
