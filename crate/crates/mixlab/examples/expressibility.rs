// SPDX-License-Identifier: MIT OR Apache-2.0
// Scratch diagnostic: hand-construct a 2-layer attention model that solves
// KV retrieval by design, to verify the forward path can express the
// gather-and-aggregate circuit. Residual subspaces:
//   dims  0..32  token content (values + template words)
//   dims 32..48  key identity (one-hot key embeddings, n_keys <= 16)
//   dims 48..64  match channel: positional code in scores, key copies in
//                the residual (position tables never enter the residual)
// Layer 0, head A: attend offset -3 (query position "is" -> quoted key);
// Layer 0, head B: attend offset -2 (value position -> its key);
// both copy key identity (dims 32..48) into the match channel 48..64.
// Layer 1: attend from q to positions whose match channel equals q's
// (the target value and a few harmless template positions) and copy
// content dims 0..32 back into the residual; tied unembedding reads it out.

use mixlab::interventions::InterventionSet;
use mixlab::harness::{run_benchmark_suite, EvalRegime};
use mixlab::mixers::{AttentionHeadParams, HeadId, HeadParams};
use mixlab::model::{
    ForwardPlan, LayerParams, LayerSpec, MixerKind, Model, ModelSpec,
};
use mixlab::tasks::{build_suite, FactBase, KvVariant, SuiteKind, SuiteSpec, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 64;
const MAX_T: usize = 96;
const N_KEYS: usize = 16;

/// Positional code frequencies: a 7-term odd-harmonic comb (Dirichlet kernel
/// with exact zeros at every nonzero integer offset mod 32) plus one slow
/// pair to suppress the +-32 alias.
fn freqs() -> Vec<f64> {
    let mut w: Vec<f64> = (1..=7)
        .map(|m| (2 * m - 1) as f64 * std::f64::consts::PI / 16.0)
        .collect();
    w.push(std::f64::consts::PI / 32.0);
    w
}

/// Offset head: W_q = a * I on pos dims, W_k = a * (per-pair rotation by
/// -w*delta), so q_i . k_j ~ a^2 * sum_m cos(w_m (i - j - delta)).
fn offset_head(delta: f64, a: f32, mu: f32) -> AttentionHeadParams<f32> {
    let dh = 16;
    let mut w_q = vec![0f32; D * dh];
    let mut w_k = vec![0f32; D * dh];
    for (m, &w) in freqs().iter().enumerate() {
        let (c, s) = ((w * delta).cos() as f32, (w * delta).sin() as f32);
        let (r0, r1) = (48 + 2 * m, 48 + 2 * m + 1); // residual/pos dims
        let (c0, c1) = (2 * m, 2 * m + 1); // head dims
        w_q[r0 * dh + c0] = a;
        w_q[r1 * dh + c1] = a;
        // rotation by -w*delta applied to (cos w j, sin w j)
        w_k[r0 * dh + c0] = a * c;
        w_k[r0 * dh + c1] = -a * s;
        w_k[r1 * dh + c0] = a * s;
        w_k[r1 * dh + c1] = a * c;
    }
    // Copy key-identity dims 32..48 into match-channel dims 48..64.
    let mut w_v = vec![0f32; D * dh];
    let mut w_o = vec![0f32; dh * D];
    for i in 0..16 {
        w_v[(32 + i) * dh + i] = 1.0;
        w_o[i * D + (48 + i)] = mu;
    }
    AttentionHeadParams { d_model: D, d_head: dh, w_q, w_k, w_v, w_o }
}

/// Match head: score = s1^2 * <match channel at i, match channel at j>;
/// value path copies content dims 0..32, scaled by lambda.
fn match_head(s1: f32, lambda: f32) -> AttentionHeadParams<f32> {
    let dh = 32;
    let mut w_q = vec![0f32; D * dh];
    let mut w_k = vec![0f32; D * dh];
    for i in 0..16 {
        w_q[(48 + i) * dh + i] = s1;
        w_k[(48 + i) * dh + i] = s1;
    }
    let mut w_v = vec![0f32; D * dh];
    let mut w_o = vec![0f32; dh * D];
    for i in 0..32 {
        w_v[i * dh + i] = 1.0;
        w_o[i * D + i] = lambda;
    }
    AttentionHeadParams { d_model: D, d_head: dh, w_q, w_k, w_v, w_o }
}

fn main() -> mixlab::Result<()> {
    let vocab = Vocab::build(N_KEYS, 32)?;
    let facts = FactBase::build(32, 4, 0)?;
    let v_len = vocab.len();

    let spec = ModelSpec {
        d_model: D,
        vocab: v_len,
        max_t: MAX_T,
        mlp_hidden_mult: 2,
        tie_embeddings: true,
        layers: vec![
            LayerSpec { kind: MixerKind::Attention, n_heads: 2, d_head: 16, d_state: 0, mlp: false },
            LayerSpec { kind: MixerKind::Attention, n_heads: 1, d_head: 32, d_state: 0, mlp: false },
        ],
    };

    // Embeddings: every token gets a faint random content vector (keeps
    // RMSNorm away from zero); values get strong random units in dims
    // 0..32; keys get strong one-hot rows in dims 32..48.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut embed = vec![0f32; v_len * D];
    for tok in 0..v_len {
        for j in 0..32 {
            embed[tok * D + j] = rng.gen_range(-0.1..0.1);
        }
    }
    let vb = vocab.value(0);
    for val in 0..100 {
        let mut dir: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let n = dir.iter().map(|x| x * x).sum::<f32>().sqrt();
        for (j, d) in dir.iter_mut().enumerate() {
            *d *= 8.0 / n;
            embed[(vb + val) * D + j] = *d;
        }
    }
    for k in 0..N_KEYS {
        let row = (vocab.key(k)) * D;
        for j in 0..D {
            embed[row + j] = 0.0;
        }
        embed[row + 32 + k] = 8.0;
    }

    // Positional table for layer 0 (layer 1 gets zeros).
    let mut pos0 = vec![0f32; MAX_T * D];
    for i in 0..MAX_T {
        for (m, &w) in freqs().iter().enumerate() {
            pos0[i * D + 48 + 2 * m] = (w * i as f64).cos() as f32;
            pos0[i * D + 48 + 2 * m + 1] = (w * i as f64).sin() as f32;
        }
    }

    let (a, mu, s1, lambda) = (2.0f32, 8.0f32, 1.5f32, 4.0f32);
    let layers = vec![
        LayerParams {
            heads: vec![
                HeadParams::Attention(offset_head(-3.0, a, mu)),
                HeadParams::Attention(offset_head(-2.0, a, mu)),
            ],
            pos: Some(pos0),
            norm1: vec![1.0; D],
            norm2: None,
            mlp: None,
        },
        LayerParams {
            heads: vec![HeadParams::Attention(match_head(s1, lambda))],
            pos: Some(vec![0f32; MAX_T * D]),
            norm1: vec![1.0; D],
            norm2: None,
            mlp: None,
        },
    ];
    let model = Model { spec, embed, layers, norm_f: vec![1.0; D], unembed: None };

    // Inspect attention rows on one 4-pair item.
    let suite = build_suite(&vocab, &facts, &SuiteSpec {
        kind: SuiteKind::Kv { n_pairs: 4, variant: KvVariant::NoTrailingSpace },
        n_items: 1,
        seed: 1,
    })?;
    let item = &suite[0];
    let q = item.prompt.len() - 1;
    println!("prompt: {}", vocab.detokenize(&item.prompt).escape_debug());
    let heads = vec![HeadId::new(0, 0), HeadId::new(0, 1), HeadId::new(1, 0)];
    let caps = model.capture_matrices(&item.prompt, &heads, &ForwardPlan::identity())?;
    for m in &caps {
        print!("{} row q={q}:", m.head);
        for j in 0..=q {
            print!(" {:.2}", m.entry(q, j));
        }
        println!();
    }
    let logits = model.logits(&item.prompt, &ForwardPlan::identity())?;
    let row = &logits[q * v_len..(q + 1) * v_len];
    for (ci, cand) in item.candidates.iter().enumerate() {
        println!(
            "cand {ci} ({}) logit {:.3}{}",
            vocab.detokenize(cand),
            row[cand[0]],
            if ci == item.gold { "  <- gold" } else { "" }
        );
    }

    // Accuracy across suites.
    let set = InterventionSet::new();
    for n_pairs in [2usize, 4, 8] {
        let suite = build_suite(&vocab, &facts, &SuiteSpec {
            kind: SuiteKind::Kv { n_pairs, variant: KvVariant::NoTrailingSpace },
            n_items: 200,
            seed: 999,
        })?;
        let r = run_benchmark_suite(&model, &suite, &set, EvalRegime::AnswerScoring,
            &format!("kv{n_pairs}"), 1)?;
        println!("kv{n_pairs}: acc {:.3} chance {:.3}", r.accuracy, r.chance);
    }
    Ok(())
}
