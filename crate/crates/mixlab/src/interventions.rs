// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative, composable model surgeries: head ablation, layer pruning,
//! gather/aggregate masks, query-row zeroing, and cross-model layer swaps.
//!
//! An [`InterventionSet`] is an immutable value validated eagerly at
//! construction. Applying one never mutates model parameters; it lowers to
//! a [`ForwardPlan`] for a specific prompt length and segment map.
//!
//! Precedence when directives overlap: prune > swap > ablate >
//! masks/row-zero. Combinations outside this order (ablate + mask on one
//! head, prune + swap on one layer, aggregate-mask + row-zero on one head)
//! are rejected as conflicts. Masked rows are *not* renormalized by
//! default: masks restrict interactions, they do not redistribute weight.
//! A `renormalize` flag exists for sensitivity studies only.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mixers::{HeadDirective, HeadId};
use crate::model::{ForwardPlan, Model, ModelSpec, PruneScope};
use crate::tasks::SegmentMap;
use crate::tensor::Scalar;

/// How a mask's segment geometry is obtained at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSpec {
    /// Derive the segment map from each evaluated instance's prompt.
    Auto,
    /// Use one fixed geometry (must fit every evaluated prompt).
    Fixed(SegmentMap),
}

/// A swap donor plus the label it is serialized under.
#[derive(Clone)]
pub struct Donor<E: Scalar> {
    pub source: String,
    pub model: Arc<Model<E>>,
}

impl<E: Scalar> std::fmt::Debug for Donor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Donor({})", self.source)
    }
}

#[derive(Debug, Clone)]
pub struct InterventionSet<E: Scalar> {
    pub ablated: BTreeSet<HeadId>,
    pub pruned: BTreeMap<usize, PruneScope>,
    pub gather_masks: BTreeMap<HeadId, MaskSpec>,
    pub aggregate_masks: BTreeMap<HeadId, MaskSpec>,
    pub row_zeroes: BTreeSet<HeadId>,
    pub swaps: BTreeMap<usize, Donor<E>>,
    pub head_swaps: BTreeMap<HeadId, Donor<E>>,
    pub renormalize_masks: bool,
}

impl<E: Scalar> Default for InterventionSet<E> {
    fn default() -> Self {
        InterventionSet {
            ablated: BTreeSet::new(),
            pruned: BTreeMap::new(),
            gather_masks: BTreeMap::new(),
            aggregate_masks: BTreeMap::new(),
            row_zeroes: BTreeSet::new(),
            swaps: BTreeMap::new(),
            head_swaps: BTreeMap::new(),
            renormalize_masks: false,
        }
    }
}

impl<E: Scalar> InterventionSet<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.ablated.is_empty()
            && self.pruned.is_empty()
            && self.gather_masks.is_empty()
            && self.aggregate_masks.is_empty()
            && self.row_zeroes.is_empty()
            && self.swaps.is_empty()
            && self.head_swaps.is_empty()
    }

    pub fn ablate_head(mut self, head: HeadId) -> Result<Self> {
        if self.gather_masks.contains_key(&head) || self.aggregate_masks.contains_key(&head) {
            return Err(Error::Intervention(format!(
                "head {head} is masked; ablation conflicts"
            )));
        }
        self.ablated.insert(head);
        Ok(self)
    }

    pub fn prune_layer(mut self, layer: usize, scope: PruneScope) -> Result<Self> {
        if self.swaps.contains_key(&layer) {
            return Err(Error::Intervention(format!(
                "layer {layer} is swapped; pruning conflicts"
            )));
        }
        self.pruned.insert(layer, scope);
        Ok(self)
    }

    pub fn mask_gather(mut self, head: HeadId, spec: MaskSpec) -> Result<Self> {
        if self.ablated.contains(&head) {
            return Err(Error::Intervention(format!(
                "head {head} is ablated; gather mask conflicts"
            )));
        }
        self.gather_masks.insert(head, spec);
        Ok(self)
    }

    pub fn mask_aggregate(mut self, head: HeadId, spec: MaskSpec) -> Result<Self> {
        if self.ablated.contains(&head) {
            return Err(Error::Intervention(format!(
                "head {head} is ablated; aggregate mask conflicts"
            )));
        }
        if self.row_zeroes.contains(&head) {
            return Err(Error::Intervention(format!(
                "head {head} has a query-row zero; aggregate mask conflicts"
            )));
        }
        self.aggregate_masks.insert(head, spec);
        Ok(self)
    }

    pub fn zero_query_row(mut self, head: HeadId) -> Result<Self> {
        if self.aggregate_masks.contains_key(&head) {
            return Err(Error::Intervention(format!(
                "head {head} has an aggregate mask; query-row zero conflicts"
            )));
        }
        self.row_zeroes.insert(head);
        Ok(self)
    }

    pub fn swap_layer(mut self, layer: usize, donor: Donor<E>) -> Result<Self> {
        if self.pruned.contains_key(&layer) {
            return Err(Error::Intervention(format!(
                "layer {layer} is pruned; swap conflicts"
            )));
        }
        self.swaps.insert(layer, donor);
        Ok(self)
    }

    pub fn swap_head(mut self, head: HeadId, donor: Donor<E>) -> Result<Self> {
        if self.pruned.contains_key(&head.layer) {
            return Err(Error::Intervention(format!(
                "layer {} is pruned; head swap conflicts",
                head.layer
            )));
        }
        if self.swaps.contains_key(&head.layer) {
            return Err(Error::Intervention(format!(
                "layer {} already has a whole-layer swap",
                head.layer
            )));
        }
        self.head_swaps.insert(head, donor);
        Ok(self)
    }

    pub fn with_renormalized_masks(mut self, on: bool) -> Self {
        self.renormalize_masks = on;
        self
    }

    /// Union of several sets. Validation is eager: every conflict is
    /// reported, not just the first.
    pub fn compose(sets: &[InterventionSet<E>]) -> Result<InterventionSet<E>> {
        let mut out = InterventionSet::new();
        for s in sets {
            out.ablated.extend(s.ablated.iter().copied());
            out.pruned.extend(s.pruned.iter().map(|(&l, &sc)| (l, sc)));
            out.gather_masks
                .extend(s.gather_masks.iter().map(|(&h, m)| (h, m.clone())));
            out.aggregate_masks
                .extend(s.aggregate_masks.iter().map(|(&h, m)| (h, m.clone())));
            out.row_zeroes.extend(s.row_zeroes.iter().copied());
            out.swaps
                .extend(s.swaps.iter().map(|(&l, d)| (l, d.clone())));
            out.head_swaps
                .extend(s.head_swaps.iter().map(|(&h, d)| (h, d.clone())));
            out.renormalize_masks |= s.renormalize_masks;
        }
        let mut conflicts = Vec::new();
        for h in &out.ablated {
            if out.gather_masks.contains_key(h) || out.aggregate_masks.contains_key(h) {
                conflicts.push(format!("head {h}: ablate vs mask"));
            }
        }
        for h in &out.row_zeroes {
            if out.aggregate_masks.contains_key(h) {
                conflicts.push(format!("head {h}: zero-row vs aggregate mask"));
            }
        }
        for l in out.pruned.keys() {
            if out.swaps.contains_key(l) {
                conflicts.push(format!("layer {l}: prune vs swap"));
            }
            if out.head_swaps.keys().any(|h| h.layer == *l) {
                conflicts.push(format!("layer {l}: prune vs head swap"));
            }
        }
        for h in out.head_swaps.keys() {
            if out.swaps.contains_key(&h.layer) {
                conflicts.push(format!("layer {}: layer swap vs head swap", h.layer));
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::Intervention(format!(
                "conflicting directives: {}",
                conflicts.join("; ")
            )));
        }
        Ok(out)
    }

    /// Range-check every directive against a model spec.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let n_layers = spec.layers.len();
        let check_head = |h: &HeadId| -> Result<()> {
            if h.layer >= n_layers || h.head >= spec.layers[h.layer].n_heads {
                return Err(Error::Intervention(format!(
                    "head {h} out of range for model ({n_layers} layers)"
                )));
            }
            Ok(())
        };
        for h in &self.ablated {
            check_head(h)?;
        }
        for h in self.gather_masks.keys() {
            check_head(h)?;
        }
        for h in self.aggregate_masks.keys() {
            check_head(h)?;
        }
        for h in &self.row_zeroes {
            check_head(h)?;
        }
        for h in self.head_swaps.keys() {
            check_head(h)?;
        }
        for &l in self.pruned.keys() {
            if l >= n_layers {
                return Err(Error::Intervention(format!("pruned layer {l} out of range")));
            }
        }
        for &l in self.swaps.keys() {
            if l >= n_layers {
                return Err(Error::Intervention(format!("swapped layer {l} out of range")));
            }
        }
        Ok(())
    }

    /// Lower to a per-prompt forward plan. `segmap` supplies the geometry
    /// for `MaskSpec::Auto` masks; prompts without one reject auto masks.
    pub fn plan_for<'a>(
        &'a self,
        model: &Model<E>,
        t: usize,
        segmap: Option<&SegmentMap>,
    ) -> Result<ForwardPlan<'a, E>> {
        self.validate(&model.spec)?;
        let mut plan: ForwardPlan<'a, E> = ForwardPlan::identity();
        for (&l, &scope) in &self.pruned {
            plan.layers.entry(l).or_default().prune = Some(scope);
        }
        for (&l, donor) in &self.swaps {
            // Precedence: a pruned layer ignores everything else; the
            // builder rejects prune+swap so this is plain assignment.
            plan.layers.entry(l).or_default().donor = Some(&*donor.model);
        }
        for (&h, donor) in &self.head_swaps {
            plan.layers
                .entry(h.layer)
                .or_default()
                .head_donors
                .insert(h.head, &*donor.model);
        }

        let resolve = |spec: &MaskSpec| -> Result<SegmentMap> {
            match spec {
                MaskSpec::Fixed(sm) => Ok(sm.clone()),
                MaskSpec::Auto => segmap.cloned().ok_or_else(|| {
                    Error::Intervention(
                        "auto mask requested but the instance carries no segment map".into(),
                    )
                }),
            }
        };

        // Per-head directive construction.
        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for h in &self.ablated {
            touched.insert(h.layer);
        }
        for h in self.gather_masks.keys() {
            touched.insert(h.layer);
        }
        for h in self.aggregate_masks.keys() {
            touched.insert(h.layer);
        }
        for h in &self.row_zeroes {
            touched.insert(h.layer);
        }
        for &l in &touched {
            if self.pruned.get(&l) == Some(&PruneScope::Both)
                || self.pruned.get(&l) == Some(&PruneScope::Mixer)
            {
                continue; // prune dominates head-level directives
            }
            let n_heads = model.spec.layers[l].n_heads;
            let mut dirs: Vec<HeadDirective<E>> =
                vec![HeadDirective::default(); n_heads];
            for (h, dir) in dirs.iter_mut().enumerate() {
                let id = HeadId::new(l, h);
                if self.ablated.contains(&id) {
                    dir.ablate = true;
                    continue;
                }
                let mut mask: Option<Vec<E>> = None;
                let mut mul = |buf: Vec<E>| match &mut mask {
                    Some(m) => {
                        for (a, b) in m.iter_mut().zip(&buf) {
                            *a *= *b;
                        }
                    }
                    None => mask = Some(buf),
                };
                if let Some(spec) = self.gather_masks.get(&id) {
                    mul(gather_mask_buf(&resolve(spec)?, t)?);
                }
                if let Some(spec) = self.aggregate_masks.get(&id) {
                    mul(aggregate_mask_buf(&resolve(spec)?, t)?);
                }
                if self.row_zeroes.contains(&id) {
                    mul(row_zero_buf(t));
                }
                dir.mask = mask;
                dir.renormalize = self.renormalize_masks;
            }
            plan.layers.entry(l).or_default().directives = Some(dirs);
        }
        Ok(plan)
    }

    /// Serialize to the directive text format. Fixed masks have no textual
    /// form and are rejected.
    pub fn to_text(&self) -> Result<String> {
        let mut lines = Vec::new();
        for (&l, scope) in &self.pruned {
            let s = match scope {
                PruneScope::Mixer => "mixer",
                PruneScope::Mlp => "mlp",
                PruneScope::Both => "both",
            };
            lines.push(format!("prune L{l} {s}"));
        }
        for (&l, d) in &self.swaps {
            lines.push(format!("swap L{l} {}", d.source));
        }
        for (h, d) in &self.head_swaps {
            lines.push(format!("swap-head {h} {}", d.source));
        }
        for h in &self.ablated {
            lines.push(format!("ablate {h}"));
        }
        for (h, spec) in &self.gather_masks {
            match spec {
                MaskSpec::Auto => lines.push(format!("mask-gather {h} auto")),
                MaskSpec::Fixed(_) => {
                    return Err(Error::Intervention(
                        "fixed masks have no text form; use auto".into(),
                    ))
                }
            }
        }
        for (h, spec) in &self.aggregate_masks {
            match spec {
                MaskSpec::Auto => lines.push(format!("mask-aggregate {h} auto")),
                MaskSpec::Fixed(_) => {
                    return Err(Error::Intervention(
                        "fixed masks have no text form; use auto".into(),
                    ))
                }
            }
        }
        for h in &self.row_zeroes {
            lines.push(format!("zero-row {h}"));
        }
        if self.renormalize_masks {
            lines.push("renormalize on".into());
        }
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse the directive text format. `load_donor` maps a donor label
    /// (e.g. a checkpoint path) to a model.
    pub fn from_text(
        text: &str,
        load_donor: &mut dyn FnMut(&str) -> Result<Arc<Model<E>>>,
    ) -> Result<InterventionSet<E>> {
        let mut set = InterventionSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let op = parts.next().unwrap();
            let bad = |what: &str| {
                Error::Intervention(format!("line {}: {what}: '{line}'", ln + 1))
            };
            set = match op {
                "ablate" => {
                    let h: HeadId = parts.next().ok_or_else(|| bad("missing head"))?.parse()?;
                    set.ablate_head(h)?
                }
                "prune" => {
                    let l = parse_layer(parts.next().ok_or_else(|| bad("missing layer"))?)?;
                    let scope = match parts.next().ok_or_else(|| bad("missing scope"))? {
                        "mixer" => PruneScope::Mixer,
                        "mlp" => PruneScope::Mlp,
                        "both" => PruneScope::Both,
                        other => {
                            return Err(bad(&format!("unknown prune scope '{other}'")));
                        }
                    };
                    set.prune_layer(l, scope)?
                }
                "mask-gather" | "mask-aggregate" => {
                    let h: HeadId = parts.next().ok_or_else(|| bad("missing head"))?.parse()?;
                    match parts.next().ok_or_else(|| bad("missing mask spec"))? {
                        "auto" => {}
                        other => return Err(bad(&format!("unknown mask spec '{other}'"))),
                    }
                    if op == "mask-gather" {
                        set.mask_gather(h, MaskSpec::Auto)?
                    } else {
                        set.mask_aggregate(h, MaskSpec::Auto)?
                    }
                }
                "zero-row" => {
                    let h: HeadId = parts.next().ok_or_else(|| bad("missing head"))?.parse()?;
                    set.zero_query_row(h)?
                }
                "swap" => {
                    let l = parse_layer(parts.next().ok_or_else(|| bad("missing layer"))?)?;
                    let source = parts.next().ok_or_else(|| bad("missing donor"))?;
                    let model = load_donor(source)?;
                    set.swap_layer(
                        l,
                        Donor {
                            source: source.into(),
                            model,
                        },
                    )?
                }
                "swap-head" => {
                    let h: HeadId = parts.next().ok_or_else(|| bad("missing head"))?.parse()?;
                    let source = parts.next().ok_or_else(|| bad("missing donor"))?;
                    let model = load_donor(source)?;
                    set.swap_head(
                        h,
                        Donor {
                            source: source.into(),
                            model,
                        },
                    )?
                }
                "renormalize" => {
                    match parts.next().ok_or_else(|| bad("missing on/off"))? {
                        "on" => set.renormalize_masks = true,
                        "off" => set.renormalize_masks = false,
                        other => return Err(bad(&format!("expected on/off, got '{other}'"))),
                    }
                    set
                }
                other => return Err(bad(&format!("unknown directive '{other}'"))),
            };
            if parts.next().is_some() {
                return Err(bad("trailing tokens"));
            }
        }
        Ok(set)
    }
}

fn parse_layer(s: &str) -> Result<usize> {
    s.strip_prefix('L')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Intervention(format!("bad layer '{s}': expected L<index>")))
}

fn check_segmap(sm: &SegmentMap, t: usize) -> Result<()> {
    if sm.q >= t {
        return Err(Error::Intervention(format!(
            "segment map q={} does not fit prompt length {t}",
            sm.q
        )));
    }
    for s in &sm.segments {
        if s.start > s.end || s.end != s.summary || s.summary >= t {
            return Err(Error::Intervention(format!(
                "segment ({}, {}, summary {}) invalid for prompt length {t}",
                s.start, s.end, s.summary
            )));
        }
    }
    Ok(())
}

/// Gather geometry: entry (i, j) survives iff i is a segment's summary
/// index and j lies inside that segment. No renormalization.
pub fn gather_mask_buf<E: Scalar>(sm: &SegmentMap, t: usize) -> Result<Vec<E>> {
    check_segmap(sm, t)?;
    let mut buf = vec![E::ZERO; t * t];
    for s in &sm.segments {
        for j in s.start..=s.end {
            buf[s.summary * t + j] = E::ONE;
        }
    }
    Ok(buf)
}

/// Aggregate geometry: entry (i, j) survives iff i is the final query
/// position and j is a summary index. No renormalization.
pub fn aggregate_mask_buf<E: Scalar>(sm: &SegmentMap, t: usize) -> Result<Vec<E>> {
    check_segmap(sm, t)?;
    let mut buf = vec![E::ZERO; t * t];
    for s in &sm.segments {
        buf[sm.q * t + s.summary] = E::ONE;
    }
    Ok(buf)
}

/// All rows pass except the final one.
pub fn row_zero_buf<E: Scalar>(t: usize) -> Vec<E> {
    let mut buf = vec![E::ONE; t * t];
    for j in 0..t {
        buf[(t - 1) * t + j] = E::ZERO;
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerPlan, MixerKind};
    use crate::tasks::Segment;

    type Set = InterventionSet<f32>;

    fn segmap_one() -> SegmentMap {
        SegmentMap {
            segments: vec![Segment {
                start: 0,
                end: 2,
                summary: 2,
            }],
            q: 2,
        }
    }

    #[test]
    fn empty_set_is_empty_plan() {
        let m = Model::<f32>::init(
            crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
            1,
        )
        .unwrap();
        let set = Set::new();
        assert!(set.is_empty());
        let plan = set.plan_for(&m, 4, None).unwrap();
        assert!(plan.layers.is_empty());
    }

    #[test]
    fn conflicts_are_rejected_in_both_orders() {
        let h = HeadId::new(0, 0);
        assert!(Set::new()
            .ablate_head(h)
            .unwrap()
            .mask_gather(h, MaskSpec::Auto)
            .is_err());
        assert!(Set::new()
            .mask_gather(h, MaskSpec::Auto)
            .unwrap()
            .ablate_head(h)
            .is_err());
        assert!(Set::new()
            .zero_query_row(h)
            .unwrap()
            .mask_aggregate(h, MaskSpec::Auto)
            .is_err());
        assert!(Set::new()
            .mask_aggregate(h, MaskSpec::Auto)
            .unwrap()
            .zero_query_row(h)
            .is_err());
    }

    #[test]
    fn compose_unions_and_reports_all_conflicts() {
        let h = HeadId::new(1, 0);
        let a = Set::new().ablate_head(h).unwrap();
        let b = Set::new().mask_gather(h, MaskSpec::Auto).unwrap();
        let c = Set::new()
            .prune_layer(0, PruneScope::Both)
            .unwrap()
            .ablate_head(HeadId::new(2, 1))
            .unwrap();
        // compose(empty, empty) -> empty
        assert!(Set::compose(&[Set::new(), Set::new()]).unwrap().is_empty());
        // disjoint sets union
        let u = Set::compose(&[a.clone(), c.clone()]).unwrap();
        assert_eq!(u.ablated.len(), 2);
        assert_eq!(u.pruned.len(), 1);
        // conflicting sets error and name the conflict
        let err = Set::compose(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("ablate vs mask"), "{err}");
    }

    #[test]
    fn prune_of_ablated_layer_is_allowed_and_dominates() {
        let m = Model::<f32>::init(
            crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
            1,
        )
        .unwrap();
        let set = Set::new()
            .ablate_head(HeadId::new(0, 1))
            .unwrap()
            .prune_layer(0, PruneScope::Both)
            .unwrap();
        let plan = set.plan_for(&m, 4, None).unwrap();
        let lp = &plan.layers[&0];
        assert_eq!(lp.prune, Some(PruneScope::Both));
        assert!(lp.directives.is_none(), "prune dominates head directives");
    }

    #[test]
    fn gather_mask_matches_three_by_three_example() {
        // Single segment [0..2] with summary 2: only row 2, columns 0..2
        // survive.
        let buf: Vec<f64> = gather_mask_buf(&segmap_one(), 3).unwrap();
        #[rustfmt::skip]
        let expect = vec![
            0.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
            1.0, 1.0, 1.0,
        ];
        assert_eq!(buf, expect);
        // Applied to the identity matrix only (2,2) survives.
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let masked: Vec<f64> = eye.iter().zip(&buf).map(|(a, b)| a * b).collect();
        assert_eq!(masked, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn aggregate_mask_keeps_summary_columns_of_final_row() {
        // Four segments -> row q has exactly 4 surviving entries.
        let sm = SegmentMap {
            segments: (0..4)
                .map(|s| Segment {
                    start: 3 * s + 1,
                    end: 3 * s + 3,
                    summary: 3 * s + 3,
                })
                .collect(),
            q: 14,
        };
        let buf: Vec<f64> = aggregate_mask_buf(&sm, 15).unwrap();
        let row_q: f64 = buf[14 * 15..].iter().sum();
        assert_eq!(row_q, 4.0);
        let rest: f64 = buf[..14 * 15].iter().sum();
        assert_eq!(rest, 0.0);
        for s in &sm.segments {
            assert_eq!(buf[14 * 15 + s.summary], 1.0);
        }
    }

    #[test]
    fn aggregate_mask_with_zero_segments_is_full_zero() {
        let sm = SegmentMap {
            segments: vec![],
            q: 3,
        };
        let buf: Vec<f64> = aggregate_mask_buf(&sm, 4).unwrap();
        assert!(buf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_then_row_zero_equals_ablation_at_q() {
        // The two directives conflict as a composed set, but their matrix
        // semantics compose: the product of the aggregate mask (only row q
        // survives) and the row-zero mask (row q removed) is the zero
        // matrix — exactly the head's ablation at q and everywhere else.
        let sm = segmap_one();
        let agg: Vec<f64> = aggregate_mask_buf(&sm, 3).unwrap();
        let rz: Vec<f64> = row_zero_buf(3);
        let prod: Vec<f64> = agg.iter().zip(&rz).map(|(a, b)| a * b).collect();
        assert!(prod.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmap_length_mismatch_is_error() {
        let sm = segmap_one(); // q = 2
        assert!(gather_mask_buf::<f64>(&sm, 2).is_err());
        assert!(aggregate_mask_buf::<f64>(&sm, 1).is_err());
    }

    #[test]
    fn all_permissive_mask_equals_no_mask() {
        let m = Model::<f32>::init(
            crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
            5,
        )
        .unwrap();
        let toks = [1usize, 2, 3, 4];
        let base = m.logits(&toks, &ForwardPlan::identity()).unwrap();
        let mut plan = ForwardPlan::identity();
        plan.layers.insert(
            0,
            LayerPlan {
                directives: Some(vec![
                    HeadDirective {
                        mask: Some(vec![1.0f32; 16]),
                        ..Default::default()
                    };
                    2
                ]),
                ..Default::default()
            },
        );
        let masked = m.logits(&toks, &plan).unwrap();
        assert_eq!(base, masked, "all-ones mask must be bitwise identity");
    }

    #[test]
    fn auto_mask_without_segmap_is_error() {
        let m = Model::<f32>::init(
            crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
            1,
        )
        .unwrap();
        let set = Set::new()
            .mask_gather(HeadId::new(0, 0), MaskSpec::Auto)
            .unwrap();
        assert!(set.plan_for(&m, 4, None).is_err());
    }

    #[test]
    fn out_of_range_directives_rejected() {
        let m = Model::<f32>::init(
            crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
            1,
        )
        .unwrap();
        let set = Set::new().ablate_head(HeadId::new(9, 0)).unwrap();
        assert!(set.plan_for(&m, 4, None).is_err());
        let set = Set::new().prune_layer(7, PruneScope::Both).unwrap();
        assert!(set.plan_for(&m, 4, None).is_err());
    }

    #[test]
    fn text_format_round_trips() {
        let text = "\
# comment
ablate L1H0
prune L0 mixer
mask-gather L1H1 auto
zero-row L1H1
";
        let mut loader = |_: &str| -> Result<Arc<Model<f32>>> {
            unreachable!("no swaps in this fixture")
        };
        let set = Set::from_text(text, &mut loader).unwrap();
        assert!(set.ablated.contains(&HeadId::new(1, 0)));
        assert_eq!(set.pruned[&0], PruneScope::Mixer);
        assert!(set.gather_masks.contains_key(&HeadId::new(1, 1)));
        assert!(set.row_zeroes.contains(&HeadId::new(1, 1)));
        let round = set.to_text().unwrap();
        let set2 = Set::from_text(&round, &mut loader).unwrap();
        assert_eq!(set2.to_text().unwrap(), round);
    }

    #[test]
    fn text_format_swap_invokes_loader() {
        let donor = Arc::new(
            Model::<f32>::init(
                crate::model::ModelSpec::uniform(MixerKind::Attention, 2, 16, 2, 0, 24, 8),
                3,
            )
            .unwrap(),
        );
        let mut calls = Vec::new();
        let d2 = donor.clone();
        let mut loader = move |s: &str| {
            calls.push(s.to_string());
            Ok(d2.clone())
        };
        let set = Set::from_text("swap L1 twin.ckpt\n", &mut loader).unwrap();
        assert_eq!(set.swaps[&1].source, "twin.ckpt");
        assert_eq!(set.to_text().unwrap(), "swap L1 twin.ckpt\n");
    }

    #[test]
    fn text_format_rejects_garbage() {
        let mut loader = |_: &str| -> Result<Arc<Model<f32>>> { unreachable!() };
        assert!(Set::from_text("explode L1H0\n", &mut loader).is_err());
        assert!(Set::from_text("prune L0 sideways\n", &mut loader).is_err());
        assert!(Set::from_text("ablate L1H0 extra\n", &mut loader).is_err());
        assert!(Set::from_text("mask-gather L0H0 fixed\n", &mut loader).is_err());
    }
}
