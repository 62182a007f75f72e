// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: pruning sweeps, critical-layer and -head
//! discovery, the four-configuration head grid, redundancy curves, masking
//! sufficiency checks, and hybrid layer-replacement sweeps.
//!
//! Every operation here evaluates an immutable base model under a sequence
//! of [`InterventionSet`]s and restores nothing because nothing is ever
//! mutated; all state lives in the returned reports.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{run_benchmark_suite, BenchmarkResult, EvalRegime};
use crate::interventions::{Donor, InterventionSet, MaskSpec};
use crate::mixers::HeadId;
use crate::model::{Model, ModelSpec, PruneScope};
use crate::tasks::EvalItem;
use crate::tensor::Scalar;

/// One named evaluation suite plus the regime it is scored under.
pub struct Suite<'a> {
    pub name: String,
    pub items: &'a [EvalItem],
    pub regime: EvalRegime,
}

impl<'a> Suite<'a> {
    pub fn new(name: &str, items: &'a [EvalItem], regime: EvalRegime) -> Self {
        Suite {
            name: name.to_string(),
            items,
            regime,
        }
    }
}

/// One evaluated configuration within a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepStep {
    /// Ordinal position within the sweep.
    pub step: usize,
    /// Number of layers still active at this step.
    pub layers_kept: usize,
    /// Human-readable description ("full", "keep 3", "drop L2", "swap L1").
    pub label: String,
    /// Per-suite results, keyed by suite name.
    pub results: BTreeMap<String, BenchmarkResult>,
}

impl SweepStep {
    pub fn accuracy(&self, suite: &str) -> Option<f64> {
        self.results.get(suite).map(|r| r.accuracy)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    /// What varied across steps ("cumulative-prune", "leave-one-out",
    /// "hybrid-swap", "head-swap").
    pub kind: String,
    pub steps: Vec<SweepStep>,
}

impl SweepReport {
    /// Accuracy trajectory for one suite, in step order.
    pub fn trajectory(&self, suite: &str) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.accuracy(suite))
            .collect()
    }
}

/// Outcome of [`detect_critical_layer`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CriticalLayer {
    /// Index of the layer whose removal caused the largest single-step drop.
    pub layer: usize,
    /// Size of that drop in accuracy points (0..1 scale).
    pub drop: f64,
    /// True iff drop ≥ 0.5 × (baseline − chance).
    pub sharp: bool,
}

/// Per-head knockout accuracies, sorted ascending (most damaging first).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadRanking {
    pub baseline: f64,
    /// (head, suite accuracy with only that head ablated), ascending by
    /// accuracy with HeadId tiebreak.
    pub entries: Vec<(HeadId, f64)>,
}

impl HeadRanking {
    /// Heads whose individual knockout costs at least `points` accuracy.
    pub fn heads_with_drop_at_least(&self, points: f64) -> Vec<HeadId> {
        self.entries
            .iter()
            .filter(|(_, acc)| self.baseline - acc >= points)
            .map(|(h, _)| *h)
            .collect()
    }
}

/// One of the four retained/removed configurations of the head grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub config: String,
    pub label: BenchmarkResult,
    pub knowledge: BenchmarkResult,
}

/// Exactly four rows: keep both, drop gather, drop aggregate, drop both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn row(&self, config: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.config == config)
    }
}

/// One k-value of an incremental-disable curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    /// Per-suite (accuracy, relative delta vs. the k=0 row).
    pub scores: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedundancyCurve {
    pub points: Vec<CurvePoint>,
}

impl RedundancyCurve {
    pub fn accuracy_at(&self, k: usize, suite: &str) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.k == k)
            .and_then(|p| p.scores.get(suite).map(|&(a, _)| a))
    }
}

/// Outcome of [`mask_sufficiency_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSufficiency {
    /// Un-intervened accuracy of the (minimal) model on the suite.
    pub minimal_accuracy: f64,
    /// Accuracy with non-G&A heads ablated and G&A masks applied.
    pub masked_accuracy: f64,
    /// masked / minimal (0 when minimal is 0).
    pub ratio: f64,
    pub masked: BenchmarkResult,
    pub baseline: BenchmarkResult,
}

fn eval_suites<E: Scalar>(
    model: &Model<E>,
    suites: &[Suite<'_>],
    set: &InterventionSet<E>,
    threads: usize,
) -> Result<BTreeMap<String, BenchmarkResult>> {
    let mut out = BTreeMap::new();
    for s in suites {
        let r = run_benchmark_suite(model, s.items, set, s.regime, &s.name, threads)?;
        out.insert(s.name.clone(), r);
    }
    Ok(out)
}

/// Evaluate the full model, then keep layers `[0..ℓ]` for ℓ = n−1 … 0,
/// pruning the tail with `scope` — n+1 steps for an n-layer model.
pub fn cumulative_prune_sweep<E: Scalar>(
    model: &Model<E>,
    suites: &[Suite<'_>],
    scope: PruneScope,
    threads: usize,
) -> Result<SweepReport> {
    if suites.is_empty() {
        return Err(Error::Invalid("sweep: no suites".into()));
    }
    let n = model.spec.layers.len();
    let mut steps = Vec::with_capacity(n + 1);
    for (step, kept) in (0..=n).rev().enumerate() {
        let mut set = InterventionSet::new();
        for l in kept..n {
            set = set.prune_layer(l, scope)?;
        }
        let label = if kept == n {
            "full".to_string()
        } else {
            format!("keep {kept}")
        };
        steps.push(SweepStep {
            step,
            layers_kept: kept,
            label,
            results: eval_suites(model, suites, &set, threads)?,
        });
    }
    Ok(SweepReport {
        kind: "cumulative-prune".into(),
        steps,
    })
}

/// Find the largest single-step accuracy drop on `suite` in a cumulative
/// prune sweep and report the layer whose removal caused it. The drop is
/// flagged sharp iff it reaches half of the baseline-over-chance span.
pub fn detect_critical_layer(report: &SweepReport, suite: &str) -> Result<CriticalLayer> {
    if report.steps.len() < 2 {
        return Err(Error::Invalid("detect: sweep has < 2 steps".into()));
    }
    let get = |s: &SweepStep| -> Result<(f64, f64)> {
        s.results
            .get(suite)
            .map(|r| (r.accuracy, r.chance))
            .ok_or_else(|| Error::Invalid(format!("detect: suite {suite} missing from sweep")))
    };
    let (baseline, chance) = get(&report.steps[0])?;
    let mut best: Option<CriticalLayer> = None;
    for w in report.steps.windows(2) {
        let (before, _) = get(&w[0])?;
        let (after, _) = get(&w[1])?;
        let drop = before - after;
        // The step keeping k layers removed layer index k (0-based).
        let layer = w[1].layers_kept;
        if best.map_or(true, |b| drop > b.drop) {
            best = Some(CriticalLayer {
                layer,
                drop,
                sharp: false,
            });
        }
    }
    let mut c = best.expect("≥2 steps imply ≥1 window");
    // A degenerate suite (baseline at or below chance) has no span to drop
    // across and can never be sharp.
    let span = baseline - chance;
    c.sharp = span > 0.0 && c.drop >= 0.5 * span;
    Ok(c)
}

/// Keep layers `[0..=critical]` of the sweep's sharp critical layer: returns
/// the pruning InterventionSet plus the spec of the retained prefix.
pub fn build_minimal_model<E: Scalar>(
    model: &Model<E>,
    report: &SweepReport,
    suite: &str,
) -> Result<(InterventionSet<E>, ModelSpec)> {
    let c = detect_critical_layer(report, suite)?;
    if !c.sharp {
        return Err(Error::Invalid(format!(
            "minimal model: no sharp critical layer on {suite} (max drop {:.3} at L{}); \
             analyze the full model instead",
            c.drop, c.layer
        )));
    }
    let n = model.spec.layers.len();
    let mut set = InterventionSet::new();
    for l in (c.layer + 1)..n {
        set = set.prune_layer(l, PruneScope::Both)?;
    }
    let mut spec = model.spec.clone();
    spec.layers.truncate(c.layer + 1);
    Ok((set, spec))
}

/// For each layer: prune it alone (scope `Both`), evaluate, move on. A
/// baseline step (nothing pruned) is prepended so deltas are recomputable.
pub fn leave_one_out_layer_sweep<E: Scalar>(
    model: &Model<E>,
    suites: &[Suite<'_>],
    threads: usize,
) -> Result<SweepReport> {
    let n = model.spec.layers.len();
    let mut steps = Vec::with_capacity(n + 1);
    steps.push(SweepStep {
        step: 0,
        layers_kept: n,
        label: "baseline".into(),
        results: eval_suites(model, suites, &InterventionSet::new(), threads)?,
    });
    for l in 0..n {
        let set = InterventionSet::new().prune_layer(l, PruneScope::Both)?;
        steps.push(SweepStep {
            step: l + 1,
            layers_kept: n - 1,
            label: format!("drop L{l}"),
            results: eval_suites(model, suites, &set, threads)?,
        });
    }
    Ok(SweepReport {
        kind: "leave-one-out".into(),
        steps,
    })
}

/// Knock out each head in `universe` one at a time (answer scoring on a KV
/// suite) and rank ascending by remaining accuracy.
pub fn rank_heads_by_kv_drop<E: Scalar>(
    model: &Model<E>,
    kv_items: &[EvalItem],
    universe: &[HeadId],
    threads: usize,
) -> Result<HeadRanking> {
    if universe.is_empty() {
        return Err(Error::Invalid("ranking: empty head universe".into()));
    }
    let base = run_benchmark_suite(
        model,
        kv_items,
        &InterventionSet::new(),
        EvalRegime::AnswerScoring,
        "kv-baseline",
        threads,
    )?;
    let mut entries = Vec::with_capacity(universe.len());
    for &h in universe {
        let set = InterventionSet::new().ablate_head(h)?;
        let r = run_benchmark_suite(
            model,
            kv_items,
            &set,
            EvalRegime::AnswerScoring,
            "kv-knockout",
            threads,
        )?;
        entries.push((h, r.accuracy));
    }
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(HeadRanking {
        baseline: base.accuracy,
        entries,
    })
}

fn heads_in_layer(spec: &ModelSpec, layer: usize) -> Vec<HeadId> {
    (0..spec.layers[layer].n_heads)
        .map(|h| HeadId::new(layer, h))
        .collect()
}

/// The four-configuration grid: within `layer_pair`, ablate every head
/// outside G∪A, then additionally drop G, A, or both, scoring a label suite
/// and a knowledge suite each time.
pub fn critical_head_grid<E: Scalar>(
    model: &Model<E>,
    gather: &[HeadId],
    aggregate: &[HeadId],
    layer_pair: (usize, usize),
    label_suite: &Suite<'_>,
    knowledge_suite: &Suite<'_>,
    threads: usize,
) -> Result<GridResult> {
    if gather.is_empty() || aggregate.is_empty() {
        return Err(Error::Invalid("grid: gather and aggregate sets must be nonempty".into()));
    }
    if layer_pair.0 == layer_pair.1 {
        return Err(Error::Invalid("grid: layer pair must be distinct".into()));
    }
    if let Some(h) = gather.iter().find(|h| aggregate.contains(h)) {
        return Err(Error::Invalid(format!("grid: head {h} in both G and A")));
    }
    let n = model.spec.layers.len();
    for &l in [layer_pair.0, layer_pair.1].iter() {
        if l >= n {
            return Err(Error::Invalid(format!("grid: layer {l} out of range")));
        }
    }
    for h in gather.iter().chain(aggregate) {
        if h.layer != layer_pair.0 && h.layer != layer_pair.1 {
            return Err(Error::Invalid(format!(
                "grid: head {h} outside the layer pair"
            )));
        }
    }
    let others: Vec<HeadId> = heads_in_layer(&model.spec, layer_pair.0)
        .into_iter()
        .chain(heads_in_layer(&model.spec, layer_pair.1))
        .filter(|h| !gather.contains(h) && !aggregate.contains(h))
        .collect();
    let configs: [(&str, Vec<HeadId>); 4] = [
        ("keep-both", vec![]),
        ("drop-gather", gather.to_vec()),
        ("drop-aggregate", aggregate.to_vec()),
        ("drop-both", gather.iter().chain(aggregate).copied().collect()),
    ];
    let mut rows = Vec::with_capacity(4);
    for (name, extra) in configs {
        let mut set = InterventionSet::new();
        for &h in others.iter().chain(&extra) {
            set = set.ablate_head(h)?;
        }
        let label = run_benchmark_suite(
            model,
            label_suite.items,
            &set,
            label_suite.regime,
            &label_suite.name,
            threads,
        )?;
        let knowledge = run_benchmark_suite(
            model,
            knowledge_suite.items,
            &set,
            knowledge_suite.regime,
            &knowledge_suite.name,
            threads,
        )?;
        rows.push(GridRow {
            config: name.to_string(),
            label,
            knowledge,
        });
    }
    Ok(GridResult { rows })
}

/// Disable the top-k ranked heads cumulatively for each k in `k_list` and
/// evaluate every suite; relative deltas are against the k=0 row.
pub fn incremental_disable_curve<E: Scalar>(
    model: &Model<E>,
    ranking: &HeadRanking,
    k_list: &[usize],
    suites: &[Suite<'_>],
    threads: usize,
) -> Result<RedundancyCurve> {
    if k_list.first() != Some(&0) {
        return Err(Error::Invalid("curve: k_list must start at 0".into()));
    }
    if k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("curve: k_list must be strictly ascending".into()));
    }
    let max_k = *k_list.last().unwrap();
    if max_k > ranking.entries.len() {
        return Err(Error::Invalid(format!(
            "curve: k {max_k} exceeds head universe {}",
            ranking.entries.len()
        )));
    }
    let mut points = Vec::with_capacity(k_list.len());
    let mut base: BTreeMap<String, f64> = BTreeMap::new();
    for &k in k_list {
        let mut set = InterventionSet::new();
        for (h, _) in ranking.entries.iter().take(k) {
            set = set.ablate_head(*h)?;
        }
        let results = eval_suites(model, suites, &set, threads)?;
        let mut scores = BTreeMap::new();
        for (name, r) in &results {
            if k == 0 {
                base.insert(name.clone(), r.accuracy);
            }
            let b = base[name];
            let rel = if b == 0.0 { 0.0 } else { (r.accuracy - b) / b };
            scores.insert(name.clone(), (r.accuracy, rel));
        }
        points.push(CurvePoint { k, scores });
    }
    Ok(RedundancyCurve { points })
}

/// Ablate all non-G&A heads in `layer_pair`, restrict G to gather masks and
/// A to aggregate masks (segment maps taken per instance), and compare suite
/// accuracy against the un-intervened model.
pub fn mask_sufficiency_check<E: Scalar>(
    model: &Model<E>,
    gather: &[HeadId],
    aggregate: &[HeadId],
    layer_pair: (usize, usize),
    suite: &Suite<'_>,
    threads: usize,
) -> Result<MaskSufficiency> {
    if suite.items.iter().any(|i| i.segmap.is_none()) {
        return Err(Error::Invalid(
            "mask check: suite items lack segment maps".into(),
        ));
    }
    let baseline = run_benchmark_suite(
        model,
        suite.items,
        &InterventionSet::new(),
        suite.regime,
        &suite.name,
        threads,
    )?;
    let mut set = InterventionSet::new();
    for h in heads_in_layer(&model.spec, layer_pair.0)
        .into_iter()
        .chain(heads_in_layer(&model.spec, layer_pair.1))
    {
        if !gather.contains(&h) && !aggregate.contains(&h) {
            set = set.ablate_head(h)?;
        }
    }
    for &h in gather {
        set = set.mask_gather(h, MaskSpec::Auto)?;
    }
    for &h in aggregate {
        set = set.mask_aggregate(h, MaskSpec::Auto)?;
    }
    let masked = run_benchmark_suite(model, suite.items, &set, suite.regime, &suite.name, threads)?;
    let ratio = if baseline.accuracy == 0.0 {
        0.0
    } else {
        masked.accuracy / baseline.accuracy
    };
    Ok(MaskSufficiency {
        minimal_accuracy: baseline.accuracy,
        masked_accuracy: masked.accuracy,
        ratio,
        masked,
        baseline,
    })
}

/// Swap each donor layer into the base model one at a time (baseline step
/// first) and record per-layer scores.
pub fn hybrid_replacement_sweep<E: Scalar>(
    base: &Model<E>,
    donor: &Arc<Model<E>>,
    donor_name: &str,
    suites: &[Suite<'_>],
    threads: usize,
) -> Result<SweepReport> {
    if base.spec.d_model != donor.spec.d_model {
        return Err(Error::Invalid(format!(
            "swap sweep: d_model mismatch {} vs {}",
            base.spec.d_model, donor.spec.d_model
        )));
    }
    let n = base.spec.layers.len().min(donor.spec.layers.len());
    let mut steps = Vec::with_capacity(n + 1);
    steps.push(SweepStep {
        step: 0,
        layers_kept: base.spec.layers.len(),
        label: "baseline".into(),
        results: eval_suites(base, suites, &InterventionSet::new(), threads)?,
    });
    for l in 0..n {
        let set = InterventionSet::new().swap_layer(
            l,
            Donor {
                source: donor_name.to_string(),
                model: Arc::clone(donor),
            },
        )?;
        steps.push(SweepStep {
            step: l + 1,
            layers_kept: base.spec.layers.len(),
            label: format!("swap L{l}"),
            results: eval_suites(base, suites, &set, threads)?,
        });
    }
    Ok(SweepReport {
        kind: "hybrid-swap".into(),
        steps,
    })
}

/// Head-granular variant of the replacement sweep for one layer; both the
/// base and donor layer must be attention-kind with matching head shapes.
pub fn head_swap_sweep<E: Scalar>(
    base: &Model<E>,
    donor: &Arc<Model<E>>,
    donor_name: &str,
    layer: usize,
    suites: &[Suite<'_>],
    threads: usize,
) -> Result<SweepReport> {
    let n_heads = base
        .spec
        .layers
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("head swap sweep: layer {layer} out of range")))?
        .n_heads;
    let mut steps = Vec::with_capacity(n_heads + 1);
    steps.push(SweepStep {
        step: 0,
        layers_kept: base.spec.layers.len(),
        label: "baseline".into(),
        results: eval_suites(base, suites, &InterventionSet::new(), threads)?,
    });
    for h in 0..n_heads {
        let set = InterventionSet::new().swap_head(
            HeadId::new(layer, h),
            Donor {
                source: donor_name.to_string(),
                model: Arc::clone(donor),
            },
        )?;
        steps.push(SweepStep {
            step: h + 1,
            layers_kept: base.spec.layers.len(),
            label: format!("swap L{layer}H{h}"),
            results: eval_suites(base, suites, &set, threads)?,
        });
    }
    Ok(SweepReport {
        kind: "head-swap".into(),
        steps,
    })
}
