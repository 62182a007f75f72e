// SPDX-License-Identifier: MIT OR Apache-2.0
// Scratch diagnostic: print mixing-matrix rows for a trained checkpoint.

use mixlab::mixers::HeadId;
use mixlab::model::{ForwardPlan, Model};
use mixlab::tasks::{build_suite, FactBase, KvVariant, SuiteKind, SuiteSpec, Vocab};

fn main() -> mixlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let n_keys: usize = args[2].parse().unwrap();
    let (model, _) = Model::<f32>::load(std::path::Path::new(ckpt))?;
    let vocab = Vocab::build(n_keys, 8)?;
    let facts = FactBase::build(8, 2, 0)?;
    let suite = build_suite(
        &vocab,
        &facts,
        &SuiteSpec {
            kind: SuiteKind::Kv {
                n_pairs: 2,
                variant: KvVariant::NoTrailingSpace,
            },
            n_items: 1,
            seed: 1,
        },
    )?;
    let item = &suite[0];
    println!("prompt: {}", vocab.detokenize(&item.prompt));
    for (i, &tok) in item.prompt.iter().enumerate() {
        println!("  {i:2} {}", vocab.detokenize(&[tok]).escape_debug());
    }
    println!(
        "gold candidate {} of {:?}",
        item.gold,
        item.candidates
            .iter()
            .map(|c| vocab.detokenize(c))
            .collect::<Vec<_>>()
    );
    let n_layers = model.spec.layers.len();
    let n_heads = model.spec.layers[0].n_heads;
    let mut heads = Vec::new();
    for l in 0..n_layers {
        for h in 0..n_heads {
            heads.push(HeadId::new(l, h));
        }
    }
    let caps = model.capture_matrices(&item.prompt, &heads, &ForwardPlan::identity())?;
    let q = item.prompt.len() - 1;
    for m in &caps {
        print!("{} row q={q}: ", m.head);
        for j in 0..=q {
            print!("{:.2} ", m.entry(q, j));
        }
        println!();
    }
    // Final logits over candidates.
    let logits = model.logits(&item.prompt, &ForwardPlan::identity())?;
    let v = model.spec.vocab;
    // Top-3 next-token predictions at the quote (predicting the query key)
    // and at q (predicting the answer).
    for pos in [q - 4, q] {
        let r = &logits[pos * v..(pos + 1) * v];
        let mut idx: Vec<usize> = (0..v).collect();
        idx.sort_by(|&a, &b| r[b].partial_cmp(&r[a]).unwrap());
        print!("pos {pos} ({}) top3:", vocab.detokenize(&[item.prompt[pos]]).escape_debug());
        for &i in &idx[..3] {
            print!(" {}({:.2})", vocab.detokenize(&[i]).escape_debug(), r[i]);
        }
        println!();
    }
    let row = &logits[q * v..(q + 1) * v];
    for (ci, cand) in item.candidates.iter().enumerate() {
        println!(
            "cand {ci} ({}) logit {:.3}",
            vocab.detokenize(cand),
            row[cand[0]]
        );
    }
    Ok(())
}
