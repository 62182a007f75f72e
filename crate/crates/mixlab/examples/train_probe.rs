// SPDX-License-Identifier: MIT OR Apache-2.0
// Scratch driver for hyperparameter probes:
// train_probe <seed> <n_layers> <d_model> <n_heads> <mlp:0|1> <steps> <batch>
//             <t> <lr> <n_keys> <kv_min> <kv_max> <kv> <fact> <mc> [out.ckpt]

use mixlab::harness::{run_benchmark_suite, train_model, EvalRegime, TrainConfig};
use mixlab::interventions::InterventionSet;
use mixlab::model::{LayerSpec, MixerKind, ModelSpec};
use mixlab::tasks::{
    build_suite, gen_pretraining_corpus, FactBase, KvVariant, MixConfig, SuiteKind, SuiteSpec,
    Vocab,
};

fn main() -> mixlab::Result<()> {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let f = |i: usize| -> f64 { a[i].parse().unwrap() };
    let u = |i: usize| -> usize { a[i].parse().unwrap() };
    let (seed, n_layers, d_model, n_heads, mlp) =
        (a[0].parse::<u64>().unwrap(), u(1), u(2), u(3), u(4) == 1);
    let (steps, batch, t, lr) = (u(5), u(6), u(7), f(8));
    let (n_keys, kv_min, kv_max) = (u(9), u(10), u(11));
    let (kv, fact, mc) = (f(12), f(13), f(14));

    let vocab = Vocab::build(n_keys, 32)?;
    let facts = FactBase::build(32, 4, 0)?;
    let mix = MixConfig {
        kv,
        fact,
        mc,
        kv_pairs_min: kv_min,
        kv_pairs_max: kv_max,
    };
    let corpus = gen_pretraining_corpus(&vocab, &facts, &mix, 8000, 7)?;

    let max_t = 96;
    let spec = ModelSpec {
        d_model,
        vocab: vocab.len(),
        max_t,
        mlp_hidden_mult: 2,
        tie_embeddings: false,
        layers: (0..n_layers)
            .map(|_| LayerSpec {
                kind: MixerKind::Attention,
                n_heads,
                d_head: d_model / n_heads,
                d_state: 0,
                mlp,
            })
            .collect(),
    };
    let cfg = TrainConfig {
        steps,
        batch,
        t,
        lr,
        warmup: 300,
        seed,
        eval_every: 200,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let out = train_model::<f32>(spec, &corpus, &cfg)?;
    for (i, chunk) in out.loss_curve.chunks(2000).enumerate() {
        let m: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:6}..{:6}: mean loss {m:.4}", i * 2000, i * 2000 + chunk.len());
    }
    let late: f64 = out.loss_curve[out.loss_curve.len().saturating_sub(300)..]
        .iter()
        .sum::<f64>()
        / 300.0;
    println!(
        "trained {} steps in {:.0}s, late loss {:.4}",
        steps,
        start.elapsed().as_secs_f64(),
        late
    );

    let set = InterventionSet::new();
    for n_pairs in [2usize, 4, 8] {
        if n_pairs > n_keys {
            continue;
        }
        let suite = build_suite(
            &vocab,
            &facts,
            &SuiteSpec {
                kind: SuiteKind::Kv {
                    n_pairs,
                    variant: KvVariant::NoTrailingSpace,
                },
                n_items: 200,
                seed: 999,
            },
        )?;
        let r = run_benchmark_suite(
            &out.model,
            &suite,
            &set,
            EvalRegime::AnswerScoring,
            &format!("kv{n_pairs}"),
            1,
        )?;
        println!("kv{n_pairs}: acc {:.3} chance {:.3}", r.accuracy, r.chance);
    }
    if mc > 0.0 {
        let suite = build_suite(
            &vocab,
            &facts,
            &SuiteSpec {
                kind: SuiteKind::McLabel,
                n_items: 200,
                seed: 999,
            },
        )?;
        let r = run_benchmark_suite(
            &out.model,
            &suite,
            &set,
            EvalRegime::AnswerScoring,
            "label",
            1,
        )?;
        println!("label: acc {:.3}", r.accuracy);
    }
    if let Some(path) = a.get(15) {
        out.model.save(std::path::Path::new(path), seed)?;
        println!("saved {path}");
    }
    Ok(())
}
