// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer stacks: specs, parameter storage, the intervention-aware forward
//! pass, and the `MXL1` checkpoint format.
//!
//! Architecture: token embedding, then per layer a pre-norm mixer sublayer
//! (attention or SSD heads summed into the residual stream) and an optional
//! pre-norm SiLU MLP sublayer, then a final RMS norm and an unembedding
//! (optionally tied to the token embedding). Attention layers own a learned
//! absolute positional table that is added to the *query/key input only*,
//! which keeps each layer positionally self-contained — a prerequisite for
//! meaningful cross-model layer swaps.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixers::{
    mixer_forward, AttentionHeadParams, HeadDirective, HeadId, HeadLeaves, HeadParams,
    MixerLeaves, MixingMatrix, SSDHeadParams,
};
use crate::tensor::{Scalar, Tape, TensorId};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Attention,
    Ssd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: MixerKind,
    pub n_heads: usize,
    pub d_head: usize,
    /// State dimension per SSD head; ignored for attention.
    #[serde(default)]
    pub d_state: usize,
    pub mlp: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub vocab: usize,
    pub max_t: usize,
    pub mlp_hidden_mult: usize,
    pub tie_embeddings: bool,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab < 2 || self.max_t == 0 {
            return Err(Error::Config(format!(
                "model spec: d_model {} vocab {} max_t {}",
                self.d_model, self.vocab, self.max_t
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model spec: no layers".into()));
        }
        for (l, ls) in self.layers.iter().enumerate() {
            if ls.n_heads == 0 || ls.d_head == 0 {
                return Err(Error::Config(format!("layer {l}: zero heads or head dim")));
            }
            if ls.kind == MixerKind::Ssd && ls.d_state == 0 {
                return Err(Error::Config(format!("layer {l}: SSD head needs d_state >= 1")));
            }
            if ls.mlp && self.mlp_hidden_mult == 0 {
                return Err(Error::Config(format!("layer {l}: mlp enabled with zero hidden mult")));
            }
        }
        Ok(())
    }

    /// Uniform helper: every layer identical.
    pub fn uniform(
        kind: MixerKind,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_state: usize,
        vocab: usize,
        max_t: usize,
    ) -> Self {
        ModelSpec {
            d_model,
            vocab,
            max_t,
            mlp_hidden_mult: 2,
            tie_embeddings: false,
            layers: vec![
                LayerSpec {
                    kind,
                    n_heads,
                    d_head: d_model / n_heads,
                    d_state,
                    mlp: true,
                };
                n_layers
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams<E: Scalar> {
    /// d_model × hidden.
    pub w1: Vec<E>,
    /// hidden × d_model.
    pub w2: Vec<E>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<E: Scalar> {
    pub heads: Vec<HeadParams<E>>,
    /// max_t × d_model positional table (attention layers only).
    pub pos: Option<Vec<E>>,
    pub norm1: Vec<E>,
    pub norm2: Option<Vec<E>>,
    pub mlp: Option<MlpParams<E>>,
}

#[derive(Debug, Clone)]
pub struct Model<E: Scalar> {
    pub spec: ModelSpec,
    /// vocab × d_model token embedding.
    pub embed: Vec<E>,
    pub layers: Vec<LayerParams<E>>,
    pub norm_f: Vec<E>,
    /// d_model × vocab; None when tied to the embedding.
    pub unembed: Option<Vec<E>>,
}

fn normal_vec<E: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<E> {
    // Box-Muller over the crate's seeded stream; two draws per sample keeps
    // the stream layout independent of pair parity.
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            E::from_f64(z * std)
        })
        .collect()
}

impl<E: Scalar> Model<E> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let std = 0.02;
        // Output projections are damped by depth so the residual stream
        // starts near the embedding scale.
        let o_scale = 1.0 / (2.0 * spec.layers.len() as f64).sqrt();

        let embed = normal_vec(&mut rng, spec.vocab * d, std);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let mut heads = Vec::with_capacity(ls.n_heads);
            for _ in 0..ls.n_heads {
                match ls.kind {
                    MixerKind::Attention => {
                        let mut w_o: Vec<E> = normal_vec(&mut rng, ls.d_head * d, std);
                        for v in w_o.iter_mut() {
                            *v *= E::from_f64(o_scale);
                        }
                        heads.push(HeadParams::Attention(AttentionHeadParams {
                            d_model: d,
                            d_head: ls.d_head,
                            w_q: normal_vec(&mut rng, d * ls.d_head, std),
                            w_k: normal_vec(&mut rng, d * ls.d_head, std),
                            w_v: normal_vec(&mut rng, d * ls.d_head, std),
                            w_o,
                        }));
                    }
                    MixerKind::Ssd => {
                        let mut w_o: Vec<E> = normal_vec(&mut rng, ls.d_head * d, std);
                        for v in w_o.iter_mut() {
                            *v *= E::from_f64(o_scale);
                        }
                        // Gate bias spread over [0.5, 3.0] so heads start at
                        // different memory horizons.
                        let gb = 0.5 + 2.5 * rng.gen::<f64>();
                        heads.push(HeadParams::Ssd(SSDHeadParams {
                            d_model: d,
                            d_head: ls.d_head,
                            d_state: ls.d_state,
                            w_gate: normal_vec(&mut rng, d, std),
                            gate_bias: E::from_f64(gb),
                            w_b: normal_vec(&mut rng, d * ls.d_state, std),
                            w_c: normal_vec(&mut rng, d * ls.d_state, std),
                            w_v: normal_vec(&mut rng, d * ls.d_head, std),
                            w_o,
                        }));
                    }
                }
            }
            let pos = match ls.kind {
                MixerKind::Attention => Some(normal_vec(&mut rng, spec.max_t * d, std)),
                MixerKind::Ssd => None,
            };
            let (norm2, mlp) = if ls.mlp {
                let hidden = d * spec.mlp_hidden_mult;
                let mut w2: Vec<E> = normal_vec(&mut rng, hidden * d, std);
                for v in w2.iter_mut() {
                    *v *= E::from_f64(o_scale);
                }
                (
                    Some(vec![E::ONE; d]),
                    Some(MlpParams {
                        w1: normal_vec(&mut rng, d * hidden, std),
                        w2,
                    }),
                )
            } else {
                (None, None)
            };
            layers.push(LayerParams {
                heads,
                pos,
                norm1: vec![E::ONE; d],
                norm2,
                mlp,
            });
        }
        let unembed = if spec.tie_embeddings {
            None
        } else {
            Some(normal_vec(&mut rng, d * spec.vocab, std))
        };
        Ok(Model {
            spec,
            embed,
            layers,
            norm_f: vec![E::ONE; d],
            unembed,
        })
    }

    /// All parameters with stable names, in a fixed structural order. The
    /// same order everywhere: optimizer state, checkpoints, hashing.
    pub fn named_params(&self) -> Vec<(String, &Vec<E>)> {
        let mut out: Vec<(String, &Vec<E>)> = vec![("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                match head {
                    HeadParams::Attention(p) => {
                        out.push((format!("l{l}.h{h}.w_q"), &p.w_q));
                        out.push((format!("l{l}.h{h}.w_k"), &p.w_k));
                        out.push((format!("l{l}.h{h}.w_v"), &p.w_v));
                        out.push((format!("l{l}.h{h}.w_o"), &p.w_o));
                    }
                    HeadParams::Ssd(p) => {
                        out.push((format!("l{l}.h{h}.w_gate"), &p.w_gate));
                        out.push((format!("l{l}.h{h}.w_b"), &p.w_b));
                        out.push((format!("l{l}.h{h}.w_c"), &p.w_c));
                        out.push((format!("l{l}.h{h}.w_v"), &p.w_v));
                        out.push((format!("l{l}.h{h}.w_o"), &p.w_o));
                    }
                }
            }
            if let Some(pos) = &layer.pos {
                out.push((format!("l{l}.pos"), pos));
            }
            out.push((format!("l{l}.norm1"), &layer.norm1));
            if let Some(n2) = &layer.norm2 {
                out.push((format!("l{l}.norm2"), n2));
            }
            if let Some(mlp) = &layer.mlp {
                out.push((format!("l{l}.mlp.w1"), &mlp.w1));
                out.push((format!("l{l}.mlp.w2"), &mlp.w2));
            }
        }
        out.push(("norm_f".into(), &self.norm_f));
        if let Some(u) = &self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    /// Gate biases are scalars stored outside the vector table; expose them
    /// alongside for optimizers (same structural order as `named_params`
    /// interleaving is not required — they form their own namespace).
    pub fn gate_biases_mut(&mut self) -> Vec<(String, &mut E)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                if let HeadParams::Ssd(p) = head {
                    out.push((format!("l{l}.h{h}.gate_bias"), &mut p.gate_bias));
                }
            }
        }
        out
    }

    pub fn gate_biases(&self) -> Vec<(String, E)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                if let HeadParams::Ssd(p) = head {
                    out.push((format!("l{l}.h{h}.gate_bias"), p.gate_bias));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        let mut out: Vec<(String, &mut Vec<E>)> = Vec::new();
        out.push(("embed".into(), &mut self.embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                match head {
                    HeadParams::Attention(p) => {
                        out.push((format!("l{l}.h{h}.w_q"), &mut p.w_q));
                        out.push((format!("l{l}.h{h}.w_k"), &mut p.w_k));
                        out.push((format!("l{l}.h{h}.w_v"), &mut p.w_v));
                        out.push((format!("l{l}.h{h}.w_o"), &mut p.w_o));
                    }
                    HeadParams::Ssd(p) => {
                        out.push((format!("l{l}.h{h}.w_gate"), &mut p.w_gate));
                        out.push((format!("l{l}.h{h}.w_b"), &mut p.w_b));
                        out.push((format!("l{l}.h{h}.w_c"), &mut p.w_c));
                        out.push((format!("l{l}.h{h}.w_v"), &mut p.w_v));
                        out.push((format!("l{l}.h{h}.w_o"), &mut p.w_o));
                    }
                }
            }
            if let Some(pos) = &mut layer.pos {
                out.push((format!("l{l}.pos"), pos));
            }
            out.push((format!("l{l}.norm1"), &mut layer.norm1));
            if let Some(n2) = &mut layer.norm2 {
                out.push((format!("l{l}.norm2"), n2));
            }
            if let Some(mlp) = &mut layer.mlp {
                out.push((format!("l{l}.mlp.w1"), &mut mlp.w1));
                out.push((format!("l{l}.mlp.w2"), &mut mlp.w2));
            }
        }
        out.push(("norm_f".into(), &mut self.norm_f));
        if let Some(u) = &mut self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum::<usize>()
            + self.gate_biases().len()
    }

    /// SHA-256 over the little-endian bytes of every parameter, in the
    /// canonical order. Stable across runs and platforms.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, data) in self.named_params() {
            hasher.update(name.as_bytes());
            for &v in data {
                hasher.update(v.to_le_bytes_vec());
            }
        }
        for (name, v) in self.gate_biases() {
            hasher.update(name.as_bytes());
            hasher.update(v.to_le_bytes_vec());
        }
        hex(&hasher.finalize())
    }

    /// Bind every parameter as a tape leaf. One bind per tape; multiple
    /// samples may then be forwarded through the same leaves so a whole
    /// batch accumulates into one gradient.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Result<ModelLeaves> {
        let d = self.spec.d_model;
        let embed = tape.leaf(&[self.spec.vocab, d], self.embed.clone(), requires_grad)?;
        let mut named: Vec<(String, TensorId)> = vec![("embed".into(), embed)];
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let pos = match &layer.pos {
                Some(p) => {
                    let id = tape.leaf(&[self.spec.max_t, d], p.clone(), requires_grad)?;
                    named.push((format!("l{l}.pos"), id));
                    Some(id)
                }
                None => None,
            };
            let mut heads = Vec::with_capacity(layer.heads.len());
            for (h, head) in layer.heads.iter().enumerate() {
                match head {
                    HeadParams::Attention(p) => {
                        let w_q = tape.leaf(&[d, p.d_head], p.w_q.clone(), requires_grad)?;
                        let w_k = tape.leaf(&[d, p.d_head], p.w_k.clone(), requires_grad)?;
                        let w_v = tape.leaf(&[d, p.d_head], p.w_v.clone(), requires_grad)?;
                        let w_o = tape.leaf(&[p.d_head, d], p.w_o.clone(), requires_grad)?;
                        named.push((format!("l{l}.h{h}.w_q"), w_q));
                        named.push((format!("l{l}.h{h}.w_k"), w_k));
                        named.push((format!("l{l}.h{h}.w_v"), w_v));
                        named.push((format!("l{l}.h{h}.w_o"), w_o));
                        heads.push(HeadLeaves::Attention {
                            w_q,
                            w_k,
                            w_v,
                            w_o,
                            pos,
                            d_head: p.d_head,
                        });
                    }
                    HeadParams::Ssd(p) => {
                        let w_gate = tape.leaf(&[d, 1], p.w_gate.clone(), requires_grad)?;
                        let gate_bias = tape.leaf(&[1], vec![p.gate_bias], requires_grad)?;
                        let w_b = tape.leaf(&[d, p.d_state], p.w_b.clone(), requires_grad)?;
                        let w_c = tape.leaf(&[d, p.d_state], p.w_c.clone(), requires_grad)?;
                        let w_v = tape.leaf(&[d, p.d_head], p.w_v.clone(), requires_grad)?;
                        let w_o = tape.leaf(&[p.d_head, d], p.w_o.clone(), requires_grad)?;
                        named.push((format!("l{l}.h{h}.w_gate"), w_gate));
                        named.push((format!("l{l}.h{h}.gate_bias"), gate_bias));
                        named.push((format!("l{l}.h{h}.w_b"), w_b));
                        named.push((format!("l{l}.h{h}.w_c"), w_c));
                        named.push((format!("l{l}.h{h}.w_v"), w_v));
                        named.push((format!("l{l}.h{h}.w_o"), w_o));
                        heads.push(HeadLeaves::Ssd {
                            w_gate,
                            gate_bias,
                            w_b,
                            w_c,
                            w_v,
                            w_o,
                        });
                    }
                }
            }
            let norm1 = tape.leaf(&[d], layer.norm1.clone(), requires_grad)?;
            named.push((format!("l{l}.norm1"), norm1));
            let norm2 = match &layer.norm2 {
                Some(n2) => {
                    let id = tape.leaf(&[d], n2.clone(), requires_grad)?;
                    named.push((format!("l{l}.norm2"), id));
                    Some(id)
                }
                None => None,
            };
            let mlp = match &layer.mlp {
                Some(m) => {
                    let hidden = d * self.spec.mlp_hidden_mult;
                    let w1 = tape.leaf(&[d, hidden], m.w1.clone(), requires_grad)?;
                    let w2 = tape.leaf(&[hidden, d], m.w2.clone(), requires_grad)?;
                    named.push((format!("l{l}.mlp.w1"), w1));
                    named.push((format!("l{l}.mlp.w2"), w2));
                    Some((w1, w2))
                }
                None => None,
            };
            layers.push(LayerLeaves {
                mixer: MixerLeaves { heads },
                norm1,
                norm2,
                mlp,
            });
        }
        let norm_f = tape.leaf(&[d], self.norm_f.clone(), requires_grad)?;
        named.push(("norm_f".into(), norm_f));
        let unembed = match &self.unembed {
            Some(u) => {
                let id = tape.leaf(&[d, self.spec.vocab], u.clone(), requires_grad)?;
                named.push(("unembed".into(), id));
                Some(id)
            }
            None => None,
        };
        Ok(ModelLeaves {
            embed,
            layers,
            norm_f,
            unembed,
            named,
        })
    }

    /// Forward through already-bound leaves; returns next-token logits
    /// (T × vocab) plus any captured mixing matrices.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<E>,
        leaves: &ModelLeaves,
        tokens: &[usize],
        plan: &ForwardPlan<'_, E>,
    ) -> Result<ForwardResult<E>> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Invalid("forward: empty token sequence".into()));
        }
        if t > self.spec.max_t {
            return Err(Error::Invalid(format!(
                "forward: T={t} exceeds max_t={}",
                self.spec.max_t
            )));
        }
        for &tok in tokens {
            if tok >= self.spec.vocab {
                return Err(Error::Invalid(format!(
                    "forward: token {tok} out of vocab {}",
                    self.spec.vocab
                )));
            }
        }
        plan.validate(self)?;

        let mut x = tape.embed(leaves.embed, tokens)?;
        let mut captured: Vec<(HeadId, MixingMatrix<E>)> = Vec::new();

        for (l, layer) in leaves.layers.iter().enumerate() {
            let lp = plan.layers.get(&l);
            let prune = lp.and_then(|p| p.prune);
            if prune == Some(PruneScope::Both) {
                continue; // residual identity
            }

            // Mixer sublayer.
            if prune != Some(PruneScope::Mixer) {
                // Resolve effective head leaves: whole-layer donor, per-head
                // donors, or the host layer.
                let donor_layer_leaves;
                let mixed_leaves;
                let eff_mixer: &MixerLeaves = if let Some(donor) = lp.and_then(|p| p.donor) {
                    donor_layer_leaves = donor.bind_layer(tape, l)?;
                    &donor_layer_leaves
                } else if let Some(p) = lp.filter(|p| !p.head_donors.is_empty()) {
                    let mut heads = layer.mixer.heads.clone();
                    for (&h, donor) in &p.head_donors {
                        let donor_leaves = donor.bind_layer(tape, l)?;
                        heads[h] = donor_leaves.heads[h].clone();
                    }
                    mixed_leaves = MixerLeaves { heads };
                    &mixed_leaves
                } else {
                    &layer.mixer
                };

                let n_heads = eff_mixer.heads.len();
                let default_dirs;
                let dirs: &[HeadDirective<E>] = match lp.and_then(|p| p.directives.as_deref()) {
                    Some(d) => d,
                    None => {
                        default_dirs = vec![HeadDirective::default(); n_heads];
                        &default_dirs
                    }
                };
                let xn = tape.rms_norm(x, layer.norm1)?;
                let (contrib, mats) = mixer_forward(tape, xn, eff_mixer, t, dirs)?;
                if let Some(c) = contrib {
                    x = tape.add(x, c)?;
                }
                if let Some(p) = lp {
                    for &h in &p.capture {
                        let id = HeadId::new(l, h);
                        let m = match mats.iter().find(|(hh, _)| *hh == h) {
                            Some((_, Some(mid))) => MixingMatrix {
                                head: id,
                                t,
                                data: tape.data(*mid).to_vec(),
                            },
                            // Ablated head: captured as the all-zero matrix.
                            _ => MixingMatrix {
                                head: id,
                                t,
                                data: vec![E::ZERO; t * t],
                            },
                        };
                        captured.push((id, m));
                    }
                }
            }

            // MLP sublayer.
            if prune != Some(PruneScope::Mlp) {
                if let (Some(norm2), Some((w1, w2))) = (layer.norm2, layer.mlp) {
                    let xn = tape.rms_norm(x, norm2)?;
                    let h1 = tape.matmul(xn, w1, false, false)?;
                    let h2 = tape.silu(h1)?;
                    let y = tape.matmul(h2, w2, false, false)?;
                    x = tape.add(x, y)?;
                }
            }
        }

        let xf = tape.rms_norm(x, leaves.norm_f)?;
        let logits = match leaves.unembed {
            Some(u) => tape.matmul(xf, u, false, false)?,
            None => tape.matmul(xf, leaves.embed, false, true)?,
        };
        Ok(ForwardResult { logits, captured })
    }

    /// Bind only layer `l` of this model (used as a swap donor). Donor
    /// parameters never require gradients.
    fn bind_layer(&self, tape: &mut Tape<E>, l: usize) -> Result<MixerLeaves> {
        let d = self.spec.d_model;
        let layer = &self.layers[l];
        let pos = match &layer.pos {
            Some(p) => Some(tape.leaf(&[self.spec.max_t, d], p.clone(), false)?),
            None => None,
        };
        let mut heads = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            match head {
                HeadParams::Attention(p) => {
                    heads.push(HeadLeaves::Attention {
                        w_q: tape.leaf(&[d, p.d_head], p.w_q.clone(), false)?,
                        w_k: tape.leaf(&[d, p.d_head], p.w_k.clone(), false)?,
                        w_v: tape.leaf(&[d, p.d_head], p.w_v.clone(), false)?,
                        w_o: tape.leaf(&[p.d_head, d], p.w_o.clone(), false)?,
                        pos,
                        d_head: p.d_head,
                    });
                }
                HeadParams::Ssd(p) => {
                    heads.push(HeadLeaves::Ssd {
                        w_gate: tape.leaf(&[d, 1], p.w_gate.clone(), false)?,
                        gate_bias: tape.leaf(&[1], vec![p.gate_bias], false)?,
                        w_b: tape.leaf(&[d, p.d_state], p.w_b.clone(), false)?,
                        w_c: tape.leaf(&[d, p.d_state], p.w_c.clone(), false)?,
                        w_v: tape.leaf(&[d, p.d_head], p.w_v.clone(), false)?,
                        w_o: tape.leaf(&[p.d_head, d], p.w_o.clone(), false)?,
                    });
                }
            }
        }
        Ok(MixerLeaves { heads })
    }

    /// Convenience: fresh no-grad tape, plain forward, return logits data.
    pub fn logits(&self, tokens: &[usize], plan: &ForwardPlan<'_, E>) -> Result<Vec<E>> {
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape, false)?;
        let out = self.forward_bound(&mut tape, &leaves, tokens, plan)?;
        Ok(tape.data(out.logits).to_vec())
    }

    /// Materialize the post-intervention mixing matrices of the requested
    /// heads on a prompt.
    pub fn capture_matrices(
        &self,
        tokens: &[usize],
        heads: &[HeadId],
        plan: &ForwardPlan<'_, E>,
    ) -> Result<Vec<MixingMatrix<E>>> {
        let mut plan2 = plan.clone();
        for id in heads {
            plan2
                .layers
                .entry(id.layer)
                .or_default()
                .capture
                .push(id.head);
        }
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape, false)?;
        let out = self.forward_bound(&mut tape, &leaves, tokens, &plan2)?;
        let mut mats = Vec::with_capacity(heads.len());
        for id in heads {
            let m = out
                .captured
                .iter()
                .find(|(hid, _)| hid == id)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Intervention(format!("capture: head {id} not found")))?;
            mats.push(m);
        }
        Ok(mats)
    }

    // --- checkpoint format ------------------------------------------------

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let width = E::byte_width() as u64;
        for (name, data) in self.named_params() {
            tensors.push(TensorEntry {
                name,
                offset,
                len: data.len() as u64,
            });
            offset += data.len() as u64 * width;
        }
        for (name, _) in self.gate_biases() {
            tensors.push(TensorEntry {
                name,
                offset,
                len: 1,
            });
            offset += width;
        }
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            dtype: E::DTYPE.to_string(),
            seed,
            tensors,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        for (_, data) in self.named_params() {
            for &v in data {
                f.write_all(&v.to_le_bytes_vec())?;
            }
        }
        for (_, v) in self.gate_biases() {
            f.write_all(&v.to_le_bytes_vec())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let (manifest, payload) = read_checkpoint(path)?;
        if manifest.dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype mismatch: checkpoint holds {}, requested {}",
                manifest.dtype,
                E::DTYPE
            )));
        }
        let width = E::byte_width();
        let mut model = Model::init(manifest.spec.clone(), 0)?;
        let table: BTreeMap<&str, &TensorEntry> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let read_tensor = |name: &str, expect_len: usize| -> Result<Vec<E>> {
            let e = table.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}' missing from checkpoint"))
            })?;
            if e.len as usize != expect_len {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': length {} vs expected {expect_len}",
                    e.len
                )));
            }
            let start = e.offset as usize;
            let end = start + expect_len * width;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor '{name}': payload overrun")));
            }
            Ok(payload[start..end]
                .chunks_exact(width)
                .map(E::from_le_slice)
                .collect())
        };
        for (name, data) in model.named_params_mut() {
            *data = read_tensor(&name, data.len())?;
        }
        for (name, v) in model.gate_biases_mut() {
            *v = read_tensor(&name, 1)?[0];
        }
        Ok((model, manifest.seed))
    }
}

/// Read a checkpoint's dtype without committing to an element type.
pub fn peek_dtype(path: &Path) -> Result<String> {
    let (manifest, _) = read_checkpoint(path)?;
    Ok(manifest.dtype)
}

/// Read a checkpoint's model spec without loading parameters.
pub fn peek_spec(path: &Path) -> Result<ModelSpec> {
    let (manifest, _) = read_checkpoint(path)?;
    Ok(manifest.spec)
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<u8>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}: not a model checkpoint",
            magic
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    f.read_exact(&mut buf4)?;
    let mlen = u32::from_le_bytes(buf4) as usize;
    let mut mbytes = vec![0u8; mlen];
    f.read_exact(&mut mbytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    Ok((manifest, payload))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    dtype: String,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape leaves of one layer.
pub struct LayerLeaves {
    pub mixer: MixerLeaves,
    pub norm1: TensorId,
    pub norm2: Option<TensorId>,
    pub mlp: Option<(TensorId, TensorId)>,
}

/// All bound parameter leaves plus a name → id table matching
/// `named_params` order (gate biases included).
pub struct ModelLeaves {
    pub embed: TensorId,
    pub layers: Vec<LayerLeaves>,
    pub norm_f: TensorId,
    pub unembed: Option<TensorId>,
    pub named: Vec<(String, TensorId)>,
}

/// Which parts of a layer a prune removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    Mixer,
    Mlp,
    Both,
}

/// Resolved per-layer execution overrides for one forward pass.
#[derive(Clone)]
pub struct LayerPlan<'a, E: Scalar> {
    pub prune: Option<PruneScope>,
    /// Replace this entire layer's mixer with the donor's layer at the same
    /// index (same-shape layers only).
    pub donor: Option<&'a Model<E>>,
    /// Replace individual heads with the donor's corresponding heads.
    pub head_donors: BTreeMap<usize, &'a Model<E>>,
    pub directives: Option<Vec<HeadDirective<E>>>,
    /// Head indices whose post-intervention matrices to capture.
    pub capture: Vec<usize>,
}

impl<E: Scalar> Default for LayerPlan<'_, E> {
    fn default() -> Self {
        LayerPlan {
            prune: None,
            donor: None,
            head_donors: BTreeMap::new(),
            directives: None,
            capture: Vec::new(),
        }
    }
}

#[derive(Clone)]
pub struct ForwardPlan<'a, E: Scalar> {
    pub layers: BTreeMap<usize, LayerPlan<'a, E>>,
}

impl<E: Scalar> Default for ForwardPlan<'_, E> {
    fn default() -> Self {
        ForwardPlan {
            layers: BTreeMap::new(),
        }
    }
}

impl<'a, E: Scalar> ForwardPlan<'a, E> {
    pub fn identity() -> Self {
        Self::default()
    }

    fn validate(&self, model: &Model<E>) -> Result<()> {
        for (&l, lp) in &self.layers {
            if l >= model.spec.layers.len() {
                return Err(Error::Intervention(format!(
                    "plan references layer {l}, model has {}",
                    model.spec.layers.len()
                )));
            }
            let ls = model.spec.layers[l];
            let check_donor = |donor: &Model<E>| -> Result<()> {
                if donor.spec.d_model != model.spec.d_model
                    || donor.spec.layers.len() <= l
                    || donor.spec.layers[l] != ls
                {
                    return Err(Error::Intervention(format!(
                        "donor layer {l} incompatible with host layer shape"
                    )));
                }
                Ok(())
            };
            if let Some(d) = lp.donor {
                check_donor(d)?;
                if !lp.head_donors.is_empty() {
                    return Err(Error::Intervention(format!(
                        "layer {l}: whole-layer donor and per-head donors conflict"
                    )));
                }
            }
            for (&h, d) in &lp.head_donors {
                if h >= ls.n_heads {
                    return Err(Error::Intervention(format!(
                        "head donor for L{l}H{h}: layer has {} heads",
                        ls.n_heads
                    )));
                }
                check_donor(d)?;
            }
            if let Some(dirs) = &lp.directives {
                if dirs.len() != ls.n_heads {
                    return Err(Error::Intervention(format!(
                        "layer {l}: {} directives for {} heads",
                        dirs.len(),
                        ls.n_heads
                    )));
                }
            }
            for &h in &lp.capture {
                if h >= ls.n_heads {
                    return Err(Error::Intervention(format!(
                        "capture L{l}H{h}: layer has {} heads",
                        ls.n_heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Output of one forward pass.
pub struct ForwardResult<E: Scalar> {
    /// T × vocab next-token logits (tape id).
    pub logits: TensorId,
    pub captured: Vec<(HeadId, MixingMatrix<E>)>,
}
