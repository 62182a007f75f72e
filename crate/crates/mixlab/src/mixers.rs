// SPDX-License-Identifier: MIT OR Apache-2.0

//! Temporal mixing heads: attention and scalar-gated state-space (SSD)
//! heads, both expressed as materialized lower-triangular T×T mixing
//! matrices.
//!
//! An attention head's matrix is the causal softmax of its query-key
//! scores; an SSD head's matrix is the 1-semiseparable operator
//! `M[i][j] = cᵢᵀ (∏_{k=j+1..i} aₖ) bⱼ` induced by the scalar-gated
//! recurrence `h_t = a_t h_{t-1} + b_t v_t`, `y_t = c_tᵀ h_t`. Applying
//! either matrix to the head's value stream yields the head output, so
//! ablation, masking, and row-zero interventions act on one shared
//! representation for both families.
//!
//! SSD matrices are deliberately not row-normalized: they are raw mixing
//! weights, and the smoothness contrast against attention is part of what
//! the lab studies. Cumulative gate products run in log space whenever all
//! gates are positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// Address of one head: layer index and head index within that layer.
/// Renders as `L{layer}H{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix('L')
            .ok_or_else(|| Error::Invalid(format!("head id '{s}': expected L<layer>H<head>")))?;
        let (layer, head) = rest
            .split_once('H')
            .ok_or_else(|| Error::Invalid(format!("head id '{s}': expected L<layer>H<head>")))?;
        Ok(HeadId {
            layer: layer
                .parse()
                .map_err(|_| Error::Invalid(format!("head id '{s}': bad layer index")))?,
            head: head
                .parse()
                .map_err(|_| Error::Invalid(format!("head id '{s}': bad head index")))?,
        })
    }
}

/// A per-head T×T lower-triangular mixing matrix. Query index i on rows,
/// source index j on columns; entries above the diagonal are exact zeros.
#[derive(Debug, Clone)]
pub struct MixingMatrix<E: Scalar> {
    pub head: HeadId,
    pub t: usize,
    /// Row-major T×T entries.
    pub data: Vec<E>,
}

impl<E: Scalar> MixingMatrix<E> {
    pub fn entry(&self, i: usize, j: usize) -> E {
        self.data[i * self.t + j]
    }

    pub fn is_causal(&self) -> bool {
        for i in 0..self.t {
            for j in (i + 1)..self.t {
                if self.entry(i, j) != E::ZERO {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_f64(&self) -> MixingMatrix<f64> {
        MixingMatrix {
            head: self.head,
            t: self.t,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

/// Attention head projections. `d_head × n_heads == d_model` at the layer
/// level; the scale is always `1/sqrt(d_head)`.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams<E: Scalar> {
    pub d_model: usize,
    pub d_head: usize,
    /// d_model × d_head, row-major.
    pub w_q: Vec<E>,
    pub w_k: Vec<E>,
    pub w_v: Vec<E>,
    /// d_head × d_model, row-major.
    pub w_o: Vec<E>,
}

/// Scalar-gated SSD head. The gate projection produces one scalar
/// `a_t ∈ (0,1)` per timestep via a sigmoid of a learned linear map.
#[derive(Debug, Clone)]
pub struct SSDHeadParams<E: Scalar> {
    pub d_model: usize,
    pub d_head: usize,
    pub d_state: usize,
    /// d_model × 1 gate projection.
    pub w_gate: Vec<E>,
    pub gate_bias: E,
    /// d_model × d_state input map (produces b_t).
    pub w_b: Vec<E>,
    /// d_model × d_state readout map (produces c_t).
    pub w_c: Vec<E>,
    /// d_model × d_head value map.
    pub w_v: Vec<E>,
    /// d_head × d_model output map.
    pub w_o: Vec<E>,
}

#[derive(Debug, Clone)]
pub enum HeadParams<E: Scalar> {
    Attention(AttentionHeadParams<E>),
    Ssd(SSDHeadParams<E>),
}

impl<E: Scalar> HeadParams<E> {
    pub fn d_head(&self) -> usize {
        match self {
            HeadParams::Attention(p) => p.d_head,
            HeadParams::Ssd(p) => p.d_head,
        }
    }
}

fn plain_matmul<E: Scalar>(a: &[E], m: usize, k: usize, b: &[E], n: usize, tb: bool) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            rsb,
            csb,
            E::ZERO,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Materialize an attention head's mixing matrix from the sequence of
/// (already normalized, position-augmented) inputs `x` of shape T×d_model.
pub fn materialize_attention<E: Scalar>(
    params: &AttentionHeadParams<E>,
    x: &[E],
    t: usize,
) -> Result<MixingMatrix<E>> {
    if x.len() != t * params.d_model {
        return Err(Error::Shape(format!(
            "materialize_attention: x length {} vs {t}×{}",
            x.len(),
            params.d_model
        )));
    }
    if t == 0 {
        return Err(Error::Invalid("materialize_attention: T must be >= 1".into()));
    }
    let d = params.d_model;
    let dh = params.d_head;
    let q = plain_matmul(x, t, d, &params.w_q, dh, false);
    let k = plain_matmul(x, t, d, &params.w_k, dh, false);
    let mut scores = plain_matmul(&q, t, dh, &k, t, true);
    let scale = E::ONE / E::from_f64(dh as f64).sqrt();
    for s in scores.iter_mut() {
        if !s.is_finite() {
            return Err(Error::NonFinite("materialize_attention scores"));
        }
        *s *= scale;
    }
    let data = crate::tensor::softmax_rows(&scores, t, t, true)?;
    Ok(MixingMatrix {
        head: HeadId::new(0, 0),
        t,
        data,
    })
}

/// Materialize an SSD head's mixing matrix with gates supplied directly.
/// Gates must lie in [0, 1]; the public path derives them from a sigmoid
/// and so always satisfies the open-interval invariant.
pub fn materialize_ssd_with_gates<E: Scalar>(
    gates: &[E],
    b_proj: &[E],
    c_proj: &[E],
    t: usize,
    d_state: usize,
) -> Result<MixingMatrix<E>> {
    if gates.len() != t || b_proj.len() != t * d_state || c_proj.len() != t * d_state {
        return Err(Error::Shape("materialize_ssd: projection shape mismatch".into()));
    }
    for &a in gates {
        if !a.is_finite() || a < E::ZERO || a > E::ONE {
            return Err(Error::Invalid(format!(
                "ssd gate outside [0,1]: {:?}",
                a.to_f64()
            )));
        }
    }
    let mut data = vec![E::ZERO; t * t];
    let all_positive = gates.iter().all(|&a| a > E::ZERO);
    // cb[i][j] = c_i . b_j
    let cb = plain_matmul(c_proj, t, d_state, b_proj, t, true);
    if all_positive {
        // Log-space cumulative products: prod_{k=j+1..i} a_k = exp(s_i - s_j).
        let mut s = vec![E::ZERO; t];
        let mut acc = E::ZERO;
        for i in 0..t {
            acc += gates[i].ln();
            s[i] = acc;
        }
        for i in 0..t {
            for j in 0..=i {
                let decay = if i == j { E::ONE } else { (s[i] - s[j]).exp() };
                data[i * t + j] = cb[i * t + j] * decay;
            }
        }
    } else {
        for j in 0..t {
            let mut p = E::ONE;
            for i in j..t {
                if i > j {
                    p *= gates[i];
                }
                data[i * t + j] = cb[i * t + j] * p;
            }
        }
    }
    Ok(MixingMatrix {
        head: HeadId::new(0, 0),
        t,
        data,
    })
}

/// Materialize an SSD head's mixing matrix from inputs `x` (T×d_model).
pub fn materialize_ssd<E: Scalar>(
    params: &SSDHeadParams<E>,
    x: &[E],
    t: usize,
) -> Result<MixingMatrix<E>> {
    if x.len() != t * params.d_model {
        return Err(Error::Shape(format!(
            "materialize_ssd: x length {} vs {t}×{}",
            x.len(),
            params.d_model
        )));
    }
    if t == 0 {
        return Err(Error::Invalid("materialize_ssd: T must be >= 1".into()));
    }
    let (gates, b_proj, c_proj) = ssd_projections(params, x, t);
    materialize_ssd_with_gates(&gates, &b_proj, &c_proj, t, params.d_state)
}

fn ssd_projections<E: Scalar>(
    params: &SSDHeadParams<E>,
    x: &[E],
    t: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let d = params.d_model;
    let z = plain_matmul(x, t, d, &params.w_gate, 1, false);
    let gates: Vec<E> = z
        .iter()
        .map(|&v| E::ONE / (E::ONE + (-(v + params.gate_bias)).exp()))
        .collect();
    let b_proj = plain_matmul(x, t, d, &params.w_b, params.d_state, false);
    let c_proj = plain_matmul(x, t, d, &params.w_c, params.d_state, false);
    (gates, b_proj, c_proj)
}

/// Literal sequential recurrence `h_t = a_t h_{t-1} + b_t v_t`,
/// `y_t = c_tᵀ h_t`, with gates supplied directly. Reference path for
/// equivalence testing only.
pub fn ssd_scan_with_gates<E: Scalar>(
    gates: &[E],
    b_proj: &[E],
    c_proj: &[E],
    values: &[E],
    t: usize,
    d_state: usize,
    d_head: usize,
) -> Result<Vec<E>> {
    if gates.len() != t
        || b_proj.len() != t * d_state
        || c_proj.len() != t * d_state
        || values.len() != t * d_head
    {
        return Err(Error::Shape("ssd_scan: shape mismatch".into()));
    }
    let mut h = vec![E::ZERO; d_state * d_head];
    let mut out = vec![E::ZERO; t * d_head];
    for step in 0..t {
        let a = gates[step];
        let b = &b_proj[step * d_state..(step + 1) * d_state];
        let c = &c_proj[step * d_state..(step + 1) * d_state];
        let v = &values[step * d_head..(step + 1) * d_head];
        for s in 0..d_state {
            for dd in 0..d_head {
                h[s * d_head + dd] = a * h[s * d_head + dd] + b[s] * v[dd];
            }
        }
        for dd in 0..d_head {
            let mut y = E::ZERO;
            for s in 0..d_state {
                y += c[s] * h[s * d_head + dd];
            }
            out[step * d_head + dd] = y;
        }
    }
    Ok(out)
}

/// Recurrence oracle from full head params and inputs `x`, applied to an
/// explicit value stream `v` (T×d_head).
pub fn ssd_scan_oracle<E: Scalar>(
    params: &SSDHeadParams<E>,
    x: &[E],
    values: &[E],
    t: usize,
) -> Result<Vec<E>> {
    if x.len() != t * params.d_model {
        return Err(Error::Shape("ssd_scan_oracle: x shape mismatch".into()));
    }
    let (gates, b_proj, c_proj) = ssd_projections(params, x, t);
    ssd_scan_with_gates(
        &gates,
        &b_proj,
        &c_proj,
        values,
        t,
        params.d_state,
        params.d_head,
    )
}

/// `output = M · values`, values of shape T×d_head.
pub fn apply_mixing<E: Scalar>(m: &MixingMatrix<E>, values: &[E], d_head: usize) -> Result<Vec<E>> {
    if values.len() != m.t * d_head {
        return Err(Error::Shape(format!(
            "apply_mixing: values length {} vs {}×{d_head}",
            values.len(),
            m.t
        )));
    }
    Ok(plain_matmul(&m.data, m.t, m.t, values, d_head, false))
}

// ---------------------------------------------------------------------------
// Tape-based layer forward
// ---------------------------------------------------------------------------

/// Tape ids of one head's parameter leaves.
#[derive(Debug, Clone)]
pub enum HeadLeaves {
    Attention {
        w_q: TensorId,
        w_k: TensorId,
        w_v: TensorId,
        w_o: TensorId,
        /// Learned absolute positional table feeding this head's queries
        /// and keys. Carried per head so cross-model head swaps bring their
        /// own positional geometry along.
        pos: Option<TensorId>,
        d_head: usize,
    },
    Ssd {
        w_gate: TensorId,
        gate_bias: TensorId,
        w_b: TensorId,
        w_c: TensorId,
        w_v: TensorId,
        w_o: TensorId,
    },
}

/// Tape ids for one mixer layer. SSD heads carry position inherently
/// through their recurrence, so only attention heads reference a
/// positional table.
#[derive(Debug, Clone)]
pub struct MixerLeaves {
    pub heads: Vec<HeadLeaves>,
}

/// Per-head runtime directive, already resolved against the prompt.
#[derive(Debug, Clone)]
pub struct HeadDirective<E: Scalar> {
    /// Head contributes exactly zero; nothing is materialized.
    pub ablate: bool,
    /// 0/1 multiplicative mask over the T×T matrix (gather/aggregate masks
    /// and query-row zeroes all lower to this).
    pub mask: Option<Vec<E>>,
    /// Renormalize surviving attention rows after masking (sensitivity
    /// mode; off by default — masks restrict interactions, they do not
    /// redistribute weight).
    pub renormalize: bool,
}

impl<E: Scalar> Default for HeadDirective<E> {
    fn default() -> Self {
        HeadDirective {
            ablate: false,
            mask: None,
            renormalize: false,
        }
    }
}

/// One mixer layer on the tape: materialize each head, apply directives,
/// mix values, project out, and sum head contributions. Returns the summed
/// contribution (None when every head is ablated) and each surviving
/// head's post-intervention matrix id.
pub fn mixer_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x_norm: TensorId,
    leaves: &MixerLeaves,
    t: usize,
    directives: &[HeadDirective<E>],
) -> Result<(Option<TensorId>, Vec<(usize, Option<TensorId>)>)> {
    if directives.len() != leaves.heads.len() {
        return Err(Error::Intervention(format!(
            "directives for {} heads, layer has {}",
            directives.len(),
            leaves.heads.len()
        )));
    }
    let mut total: Option<TensorId> = None;
    let mut captured = Vec::with_capacity(leaves.heads.len());
    for (h, head) in leaves.heads.iter().enumerate() {
        let dir = &directives[h];
        if dir.ablate {
            captured.push((h, None));
            continue;
        }
        let (mut m, w_v, w_o) = match head {
            HeadLeaves::Attention {
                w_q,
                w_k,
                w_v,
                w_o,
                pos,
                d_head,
            } => {
                // Positional information feeds queries and keys only.
                let xq = match pos {
                    Some(pos_table) => {
                        let ids: Vec<usize> = (0..t).collect();
                        let p = tape.embed(*pos_table, &ids)?;
                        tape.add(x_norm, p)?
                    }
                    None => x_norm,
                };
                let q = tape.matmul(xq, *w_q, false, false)?;
                let k = tape.matmul(xq, *w_k, false, false)?;
                let scores = tape.matmul(q, k, false, true)?;
                let scale = E::ONE / E::from_f64(*d_head as f64).sqrt();
                let scaled = tape.scale(scores, scale)?;
                (tape.softmax_rows(scaled, true)?, *w_v, *w_o)
            }
            HeadLeaves::Ssd {
                w_gate,
                gate_bias,
                w_b,
                w_c,
                w_v,
                w_o,
            } => {
                let z0 = tape.matmul(x_norm, *w_gate, false, false)?;
                let z = tape.add_scalar(z0, *gate_bias)?;
                let la = tape.ln_sigmoid(z)?;
                // s_t = sum_{k<=t} ln a_k via lower-triangular ones.
                let mut ones = vec![E::ZERO; t * t];
                for i in 0..t {
                    for j in 0..=i {
                        ones[i * t + j] = E::ONE;
                    }
                }
                let ltri = tape.constant(&[t, t], ones)?;
                let s = tape.matmul(ltri, la, false, false)?;
                let d = tape.outer_diff(s)?;
                // Push entries above the diagonal to -inf-like before exp so
                // they come back as exact zeros.
                let mut maskbuf = vec![E::ZERO; t * t];
                for i in 0..t {
                    for j in (i + 1)..t {
                        maskbuf[i * t + j] = E::from_f64(-1e30);
                    }
                }
                let dm = tape.add_buf(d, maskbuf)?;
                let decay = tape.exp(dm)?;
                let bp = tape.matmul(x_norm, *w_b, false, false)?;
                let cp = tape.matmul(x_norm, *w_c, false, false)?;
                let cb = tape.matmul(cp, bp, false, true)?;
                (tape.mul(cb, decay)?, *w_v, *w_o)
            }
        };
        if let Some(mask) = &dir.mask {
            if mask.len() != t * t {
                return Err(Error::Intervention(format!(
                    "mask length {} does not fit T={t}",
                    mask.len()
                )));
            }
            m = tape.mul_buf(m, mask.clone())?;
            if dir.renormalize {
                // Evaluation-only rescaling of surviving rows; factors are
                // treated as constants by the tape.
                let md = tape.data(m);
                let mut factors = vec![E::ONE; t * t];
                for i in 0..t {
                    let sum: E = md[i * t..(i + 1) * t].iter().copied().sum();
                    if sum > E::ZERO {
                        let f = E::ONE / sum;
                        for j in 0..t {
                            factors[i * t + j] = f;
                        }
                    }
                }
                m = tape.mul_buf(m, factors)?;
            }
        }
        let v = tape.matmul(x_norm, w_v, false, false)?;
        let y = tape.matmul(m, v, false, false)?;
        let contrib = tape.matmul(y, w_o, false, false)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
        captured.push((h, Some(m)));
    }
    Ok((total, captured))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros<E: Scalar>(n: usize) -> Vec<E> {
        vec![E::ZERO; n]
    }

    #[test]
    fn head_id_round_trip() {
        let id: HeadId = "L16H22".parse().unwrap();
        assert_eq!(id, HeadId::new(16, 22));
        assert_eq!(id.to_string(), "L16H22");
        assert!("H3L2".parse::<HeadId>().is_err());
        assert!("L1".parse::<HeadId>().is_err());
    }

    #[test]
    fn zero_projections_give_uniform_causal_rows() {
        let d = 4;
        let p = AttentionHeadParams::<f64> {
            d_model: d,
            d_head: 2,
            w_q: zeros(d * 2),
            w_k: zeros(d * 2),
            w_v: zeros(d * 2),
            w_o: zeros(2 * d),
        };
        let x: Vec<f64> = (0..3 * d).map(|i| (i as f64).sin()).collect();
        let m = materialize_attention(&p, &x, 3).unwrap();
        for i in 0..3 {
            for j in 0..=i {
                assert!((m.entry(i, j) - 1.0 / (i as f64 + 1.0)).abs() < 1e-12);
            }
            for j in (i + 1)..3 {
                assert_eq!(m.entry(i, j), 0.0);
            }
        }
    }

    #[test]
    fn attention_t1_is_one() {
        let p = AttentionHeadParams::<f64> {
            d_model: 2,
            d_head: 2,
            w_q: vec![1.0, 0.5, -0.3, 0.2],
            w_k: vec![0.1, 0.2, 0.3, 0.4],
            w_v: zeros(4),
            w_o: zeros(4),
        };
        let m = materialize_attention(&p, &[1.0, -1.0], 1).unwrap();
        assert_eq!(m.data, vec![1.0]);
    }

    #[test]
    fn attention_matches_direct_softmax_oracle() {
        // random-ish x, T=3, d=4: entrywise < 1e-6 against an independent
        // exp-normalize evaluation.
        let d = 4;
        let dh = 2;
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..8).map(|i| ((i * 5 + 1) as f64 * 0.21).cos()).collect();
        let p = AttentionHeadParams::<f64> {
            d_model: d,
            d_head: dh,
            w_q: w.clone(),
            w_k: w.iter().map(|v| v * 0.5).collect(),
            w_v: zeros(d * dh),
            w_o: zeros(dh * d),
        };
        let m = materialize_attention(&p, &x, 3).unwrap();

        // Independent oracle: explicit loops, no shared helpers.
        let mut q = [[0.0f64; 2]; 3];
        let mut k = [[0.0f64; 2]; 3];
        for t in 0..3 {
            for j in 0..2 {
                for i in 0..4 {
                    q[t][j] += x[t * 4 + i] * p.w_q[i * 2 + j];
                    k[t][j] += x[t * 4 + i] * p.w_k[i * 2 + j];
                }
            }
        }
        for i in 0..3 {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / (2.0f64).sqrt())
                .collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..=i {
                assert!((m.entry(i, j) - scores[j].exp() / denom).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ssd_ungated_accumulation_is_prefix_sum() {
        // d_state=1, a=1, b=1, c=1 -> all-ones lower triangle.
        let t = 4;
        let m = materialize_ssd_with_gates::<f64>(&vec![1.0; t], &vec![1.0; t], &vec![1.0; t], t, 1)
            .unwrap();
        for i in 0..t {
            for j in 0..t {
                let expect = if j <= i { 1.0 } else { 0.0 };
                assert_eq!(m.entry(i, j), expect);
            }
        }
    }

    #[test]
    fn ssd_memoryless_gates_give_diagonal() {
        // a=0 -> M diagonal with c_i . b_i.
        let t = 3;
        let b = vec![1.0, 2.0, 3.0];
        let c = vec![0.5, 0.5, 2.0];
        let m = materialize_ssd_with_gates::<f64>(&vec![0.0; t], &b, &c, t, 1).unwrap();
        for i in 0..t {
            for j in 0..t {
                let expect = if i == j { b[i] * c[i] } else { 0.0 };
                assert_eq!(m.entry(i, j), expect);
            }
        }
    }

    #[test]
    fn ssd_gate_out_of_range_is_error() {
        assert!(materialize_ssd_with_gates::<f64>(&[1.5], &[1.0], &[1.0], 1, 1).is_err());
        assert!(materialize_ssd_with_gates::<f64>(&[-0.1], &[1.0], &[1.0], 1, 1).is_err());
        assert!(materialize_ssd_with_gates::<f64>(&[f64::NAN], &[1.0], &[1.0], 1, 1).is_err());
    }

    #[test]
    fn scan_t1_is_cb_times_v() {
        let y = ssd_scan_with_gates::<f64>(&[0.7], &[2.0], &[3.0], &[5.0], 1, 1, 1).unwrap();
        assert_eq!(y, vec![30.0]);
    }

    #[test]
    fn scan_ungated_is_cumulative_sum() {
        let t = 5;
        let v: Vec<f64> = (1..=t).map(|i| i as f64).collect();
        let y = ssd_scan_with_gates(&vec![1.0; t], &vec![1.0; t], &vec![1.0; t], &v, t, 1, 1)
            .unwrap();
        let mut acc = 0.0;
        for i in 0..t {
            acc += v[i];
            assert_eq!(y[i], acc);
        }
    }

    #[test]
    fn apply_identity_preserves_values() {
        let t = 3;
        let mut data = vec![0.0f64; 9];
        for i in 0..3 {
            data[i * 3 + i] = 1.0;
        }
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t,
            data,
        };
        let values: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(apply_mixing(&m, &values, 2).unwrap(), values);
    }

    #[test]
    fn apply_zero_row_zeroes_position() {
        let t = 3;
        let mut data = vec![1.0f64; 9];
        for j in 0..3 {
            data[3 + j] = 0.0; // row 1 zeroed
        }
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t,
            data,
        };
        let out = apply_mixing(&m, &[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn apply_uniform_causal_gives_running_averages() {
        // Hand matrix multiply: rows [1], [1/2,1/2], [1/3,1/3,1/3] applied
        // to values 1,2,3 give 1, 1.5, 2.
        let t = 3;
        let mut data = vec![0.0f64; 9];
        for i in 0..3 {
            for j in 0..=i {
                data[i * 3 + j] = 1.0 / (i as f64 + 1.0);
            }
        }
        let m = MixingMatrix {
            head: HeadId::new(0, 0),
            t,
            data,
        };
        let out = apply_mixing(&m, &[1.0, 2.0, 3.0], 1).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 1.5).abs() < 1e-12);
        assert!((out[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ssd_materialization_matches_scan_oracle() {
        // The defining duality check on a deterministic pseudo-random case.
        let t = 8;
        let d_state = 3;
        let d_head = 2;
        let lcg = |seed: u64| {
            let mut s = seed;
            move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            }
        };
        let mut r = lcg(42);
        let gates: Vec<f64> = (0..t).map(|_| 0.5 + 0.49 * r()).collect();
        let b: Vec<f64> = (0..t * d_state).map(|_| r()).collect();
        let c: Vec<f64> = (0..t * d_state).map(|_| r()).collect();
        let v: Vec<f64> = (0..t * d_head).map(|_| r()).collect();
        let m = materialize_ssd_with_gates(&gates, &b, &c, t, d_state).unwrap();
        let via_matrix = apply_mixing(&m, &v, d_head).unwrap();
        let via_scan = ssd_scan_with_gates(&gates, &b, &c, &v, t, d_state, d_head).unwrap();
        for (a, b) in via_matrix.iter().zip(&via_scan) {
            assert!((a - b).abs() < 1e-10, "duality violated: {a} vs {b}");
        }
    }
}
