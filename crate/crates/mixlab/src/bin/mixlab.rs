// SPDX-License-Identifier: MIT OR Apache-2.0

//! `mixlab` command-line front end.
//!
//! Every experiment is described by a TOML run configuration; command-line
//! flags override individual values. All artifacts are written through the
//! report bundle (CSV + SVG + `manifest.txt` with content hashes), so a
//! rerun from the same configuration and checkpoints is byte-identical.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mixlab::analysis::{
    critical_head_grid, cumulative_prune_sweep, detect_critical_layer, head_swap_sweep,
    hybrid_replacement_sweep, incremental_disable_curve, leave_one_out_layer_sweep,
    mask_sufficiency_check, rank_heads_by_kv_drop, Suite,
};
use mixlab::harness::{run_benchmark_suite, train_model, EvalRegime, TrainConfig};
use mixlab::interventions::InterventionSet;
use mixlab::mixers::HeadId;
use mixlab::model::{peek_dtype, MixerKind, Model, ModelSpec, PruneScope};
use mixlab::report::{
    curve_csv, emit_report_bundle, grid_csv, heatmap_svg, ranking_csv, sweep_csv, HeatmapSpec,
    ReportArtifact,
};
use mixlab::tasks::{
    build_suite, gen_pretraining_corpus, EvalItem, FactBase, KvVariant, MixConfig, SuiteKind,
    SuiteSpec, Vocab,
};
use mixlab::tensor::Scalar;
use mixlab::{Error, Result};

// ---------------------------------------------------------------------------
// Run configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    vocab: VocabSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    out_dir: PathBuf,
    threads: usize,
    dtype: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("out"),
            threads: 1,
            dtype: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabSection {
    n_keys: usize,
    n_facts: usize,
    held_out: usize,
    fact_seed: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            n_keys: 32,
            n_facts: 16,
            held_out: 4,
            fact_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: String,
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_state: usize,
    max_t: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: "attention".into(),
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_state: 4,
            max_t: 96,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: usize,
    batch: usize,
    t: usize,
    lr: f64,
    warmup: usize,
    seed: u64,
    eval_every: usize,
    episodes: usize,
    corpus_seed: u64,
    #[serde(default)]
    mix: MixSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch: 8,
            t: 64,
            lr: 3e-3,
            warmup: 100,
            seed: 0,
            eval_every: 100,
            episodes: 2000,
            corpus_seed: 0,
            mix: MixSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixSection {
    kv: f64,
    fact: f64,
    mc: f64,
    kv_pairs_min: usize,
    kv_pairs_max: usize,
}

impl Default for MixSection {
    fn default() -> Self {
        let m = MixConfig::default();
        MixSection {
            kv: m.kv,
            fact: m.fact,
            mc: m.mc,
            kv_pairs_min: m.kv_pairs_min,
            kv_pairs_max: m.kv_pairs_max,
        }
    }
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    fn vocab(&self) -> Result<Vocab> {
        Vocab::build(self.vocab.n_keys, self.vocab.n_facts)
    }

    fn facts(&self) -> Result<FactBase> {
        FactBase::build(self.vocab.n_facts, self.vocab.held_out, self.vocab.fact_seed)
    }

    fn model_spec(&self, vocab_len: usize) -> Result<ModelSpec> {
        let kind = match self.model.kind.as_str() {
            "attention" => MixerKind::Attention,
            "ssd" => MixerKind::Ssd,
            other => return Err(Error::Config(format!("unknown mixer kind '{other}'"))),
        };
        Ok(ModelSpec::uniform(
            kind,
            self.model.n_layers,
            self.model.d_model,
            self.model.n_heads,
            self.model.d_state,
            vocab_len,
            self.model.max_t,
        ))
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "mixlab",
    about = "Train tiny mixers and dissect their retrieval circuits",
    version
)]
struct Cli {
    /// Run configuration file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides [run].out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation thread count (overrides [run].threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the synthetic corpus and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more suites.
    Eval(EvalArgs),
    /// Cumulative prune-from-the-end sweep with critical-layer detection.
    Sweep(SweepArgs),
    /// Leave-one-out layer sweep (prune each layer alone, restore, repeat).
    RestoreSweep(RestoreSweepArgs),
    /// Rank heads by one-at-a-time knockout on a KV suite.
    RankHeads(RankArgs),
    /// Four-configuration gather/aggregate head grid.
    Grid(GridArgs),
    /// Incremental head-disable redundancy curve.
    Curve(CurveArgs),
    /// Gather/aggregate masking sufficiency check.
    MaskCheck(MaskCheckArgs),
    /// Per-layer (or per-head) donor replacement sweep.
    SwapSweep(SwapArgs),
    /// Render a head's mixing matrix on one suite instance as SVG.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Override [train].steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override [train].lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Override [train].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file name within the output directory.
    #[arg(long, default_value = "model.ckpt")]
    ckpt_name: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Suite spec like kv:8:200, label:200, chat:200, likelihood:200
    /// (optionally :seed; kv+sp for the trailing-space variant).
    #[arg(long, required = true)]
    suite: Vec<String>,
    /// Intervention directive file, or "none".
    #[arg(long, default_value = "none")]
    interventions: String,
    /// auto | score | gen:<k>  (auto = score, except generation for chat).
    #[arg(long, default_value = "auto")]
    regime: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    suite: Vec<String>,
    /// mixer | mlp | both
    #[arg(long, default_value = "both")]
    scope: String,
    /// Suite name to run critical-layer detection on (defaults to the
    /// first suite).
    #[arg(long)]
    detect_on: Option<String>,
}

#[derive(Args)]
struct RestoreSweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    suite: Vec<String>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// KV suite spec (answer scoring).
    #[arg(long)]
    suite: String,
    /// Restrict the universe to these heads (comma-separated LxHy);
    /// default all heads.
    #[arg(long)]
    heads: Option<String>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Gather heads, comma-separated LxHy.
    #[arg(long)]
    gather: String,
    /// Aggregate heads, comma-separated LxHy.
    #[arg(long)]
    aggregate: String,
    /// The two layers under test, e.g. 1,2.
    #[arg(long)]
    layers: String,
    #[arg(long)]
    label_suite: String,
    #[arg(long)]
    knowledge_suite: String,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// KV suite used to rank heads before disabling them.
    #[arg(long)]
    rank_suite: String,
    /// Suites evaluated at each k.
    #[arg(long, required = true)]
    suite: Vec<String>,
    /// Comma-separated k values, ascending from 0 (e.g. 0,1,2,4).
    #[arg(long)]
    ks: String,
}

#[derive(Args)]
struct MaskCheckArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    gather: String,
    #[arg(long)]
    aggregate: String,
    #[arg(long)]
    layers: String,
    #[arg(long)]
    suite: String,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    donor: PathBuf,
    /// Sweep donor heads within this single layer instead of whole layers.
    #[arg(long)]
    head_layer: Option<usize>,
    #[arg(long, required = true)]
    suite: Vec<String>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    suite: String,
    /// Instance index within the suite.
    #[arg(long, default_value_t = 0)]
    item: usize,
    /// Head to capture, LxHy.
    #[arg(long)]
    head: String,
    #[arg(long, default_value = "none")]
    interventions: String,
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Parse "kv:8:200[:seed]", "kv+sp:8:200", "label:200[:seed]",
/// "chat:200[:seed]", "likelihood:200[:seed]".
fn parse_suite_spec(s: &str) -> Result<SuiteSpec> {
    let bad = || Error::Invalid(format!("bad suite spec '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
    let (kind, rest) = match parts[0] {
        "kv" | "kv+sp" => {
            if parts.len() < 3 || parts.len() > 4 {
                return Err(bad());
            }
            let variant = if parts[0] == "kv" {
                KvVariant::NoTrailingSpace
            } else {
                KvVariant::TrailingSpace
            };
            (
                SuiteKind::Kv {
                    n_pairs: num(parts[1])?,
                    variant,
                },
                &parts[2..],
            )
        }
        "label" | "chat" | "likelihood" => {
            if parts.len() < 2 || parts.len() > 3 {
                return Err(bad());
            }
            let kind = match parts[0] {
                "label" => SuiteKind::McLabel,
                "chat" => SuiteKind::McChat,
                _ => SuiteKind::McLikelihood,
            };
            (kind, &parts[1..])
        }
        _ => return Err(bad()),
    };
    let n_items = num(rest[0])?;
    let seed = if rest.len() == 2 {
        rest[1].parse::<u64>().map_err(|_| bad())?
    } else {
        0
    };
    Ok(SuiteSpec {
        kind,
        n_items,
        seed,
    })
}

/// Default regime per suite kind: answer scoring everywhere except chat,
/// which is generated greedily (k = 10) and exact-matched.
fn default_regime(kind: &SuiteKind) -> EvalRegime {
    match kind {
        SuiteKind::McChat => EvalRegime::Generation { k: 10 },
        _ => EvalRegime::AnswerScoring,
    }
}

fn parse_regime(s: &str, kind: &SuiteKind) -> Result<EvalRegime> {
    match s {
        "auto" => Ok(default_regime(kind)),
        "score" => Ok(EvalRegime::AnswerScoring),
        _ => match s.strip_prefix("gen:") {
            Some(k) => Ok(EvalRegime::Generation {
                k: k.parse()
                    .map_err(|_| Error::Invalid(format!("bad regime '{s}'")))?,
            }),
            None => Err(Error::Invalid(format!("bad regime '{s}'"))),
        },
    }
}

fn parse_heads(s: &str) -> Result<Vec<HeadId>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| p.trim().parse())
        .collect()
}

fn parse_layer_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("bad layer pair '{s}' (want e.g. 1,2)"));
    let mut it = s.split(',');
    let a = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let b = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok((a, b))
}

fn parse_scope(s: &str) -> Result<PruneScope> {
    match s {
        "mixer" => Ok(PruneScope::Mixer),
        "mlp" => Ok(PruneScope::Mlp),
        "both" => Ok(PruneScope::Both),
        _ => Err(Error::Invalid(format!("unknown prune scope '{s}'"))),
    }
}

struct Ctx {
    cfg: FileConfig,
    out_dir: PathBuf,
    threads: usize,
}

impl Ctx {
    fn vocab_and_facts(&self) -> Result<(Vocab, FactBase)> {
        Ok((self.cfg.vocab()?, self.cfg.facts()?))
    }

    fn load_model<E: Scalar>(&self, path: &Path) -> Result<(Model<E>, Vocab, FactBase)> {
        let (model, _seed) = Model::<E>::load(path)?;
        let (vocab, facts) = self.vocab_and_facts()?;
        if vocab.len() != model.spec.vocab {
            return Err(Error::Invalid(format!(
                "vocab size {} from [vocab] config does not match checkpoint vocab {}",
                vocab.len(),
                model.spec.vocab
            )));
        }
        Ok((model, vocab, facts))
    }

    fn build_items(&self, vocab: &Vocab, facts: &FactBase, spec: &str) -> Result<(String, Vec<EvalItem>, SuiteKind)> {
        let ss = parse_suite_spec(spec)?;
        let items = build_suite(vocab, facts, &ss)?;
        Ok((ss.name(), items, ss.kind))
    }

    fn emit(&self, fingerprint: &str, artifacts: Vec<(String, String)>) -> Result<()> {
        let arts: Vec<ReportArtifact> = artifacts
            .iter()
            .map(|(name, content)| ReportArtifact::text(name, fingerprint, content))
            .collect();
        let manifest = emit_report_bundle(&arts, &self.out_dir)?;
        print!("{manifest}");
        Ok(())
    }
}

fn load_interventions<E: Scalar>(spec: &str, model: &Model<E>) -> Result<InterventionSet<E>> {
    if spec == "none" {
        return Ok(InterventionSet::new());
    }
    let text = std::fs::read_to_string(spec)?;
    let mut cache: BTreeMap<String, Arc<Model<E>>> = BTreeMap::new();
    let set = InterventionSet::from_text(&text, &mut |source| {
        if let Some(m) = cache.get(source) {
            return Ok(Arc::clone(m));
        }
        let (m, _) = Model::<E>::load(Path::new(source))?;
        let m = Arc::new(m);
        cache.insert(source.to_string(), Arc::clone(&m));
        Ok(m)
    })?;
    set.validate(&model.spec)?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Subcommand bodies (generic over scalar type)
// ---------------------------------------------------------------------------

fn cmd_train<E: Scalar>(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let (vocab, facts) = ctx.vocab_and_facts()?;
    let t = &ctx.cfg.train;
    let mix = MixConfig {
        kv: t.mix.kv,
        fact: t.mix.fact,
        mc: t.mix.mc,
        kv_pairs_min: t.mix.kv_pairs_min,
        kv_pairs_max: t.mix.kv_pairs_max,
    };
    let corpus = gen_pretraining_corpus(&vocab, &facts, &mix, t.episodes, t.corpus_seed)?;
    let spec = ctx.cfg.model_spec(vocab.len())?;
    let cfg = TrainConfig {
        steps: args.steps.unwrap_or(t.steps),
        batch: t.batch,
        t: t.t,
        lr: args.lr.unwrap_or(t.lr),
        warmup: t.warmup,
        seed: args.seed.unwrap_or(t.seed),
        eval_every: t.eval_every,
        bos_token: Some(vocab.bos),
        ..Default::default()
    };
    let out = train_model::<E>(spec, &corpus, &cfg)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let ckpt = ctx.out_dir.join(&args.ckpt_name);
    out.best.save(&ckpt, cfg.seed)?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in out.loss_curve.iter().enumerate() {
        loss.push_str(&format!("{i},{l:.6}\n"));
    }
    eprintln!(
        "trained {} steps; final loss {:.4}; checkpoint {}",
        cfg.steps,
        out.loss_curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    ctx.emit(&out.best.param_hash(), vec![("loss.csv".into(), loss)])
}

fn eval_csv_row(out: &mut String, r: &mixlab::harness::BenchmarkResult) {
    out.push_str(&format!(
        "{},{},{:.6},{:.6},{}\n",
        r.suite, r.n, r.accuracy, r.chance, r.fingerprint
    ));
}

fn cmd_eval<E: Scalar>(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let set = load_interventions(&args.interventions, &model)?;
    let mut csv = String::from("suite,n,accuracy,chance,fingerprint\n");
    for spec in &args.suite {
        let (name, items, kind) = ctx.build_items(&vocab, &facts, spec)?;
        let regime = parse_regime(&args.regime, &kind)?;
        let r = run_benchmark_suite(&model, &items, &set, regime, &name, ctx.threads)?;
        eprintln!("{name}: accuracy {:.4} (chance {:.4}, n {})", r.accuracy, r.chance, r.n);
        eval_csv_row(&mut csv, &r);
    }
    ctx.emit(&model.param_hash(), vec![("eval.csv".into(), csv)])
}

fn build_suites<'a>(
    ctx: &Ctx,
    vocab: &Vocab,
    facts: &FactBase,
    specs: &[String],
    store: &'a mut Vec<(String, Vec<EvalItem>, SuiteKind)>,
) -> Result<Vec<Suite<'a>>> {
    for s in specs {
        store.push(ctx.build_items(vocab, facts, s)?);
    }
    Ok(store
        .iter()
        .map(|(name, items, kind)| Suite::new(name, items, default_regime(kind)))
        .collect())
}

fn cmd_sweep<E: Scalar>(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let mut store = Vec::new();
    let suites = build_suites(ctx, &vocab, &facts, &args.suite, &mut store)?;
    let scope = parse_scope(&args.scope)?;
    let rep = cumulative_prune_sweep(&model, &suites, scope, ctx.threads)?;
    let detect_on = args
        .detect_on
        .clone()
        .unwrap_or_else(|| suites[0].name.clone());
    let c = detect_critical_layer(&rep, &detect_on)?;
    let detail = format!(
        "suite,critical_layer,drop,sharp\n{},{},{:.6},{}\n",
        detect_on, c.layer, c.drop, c.sharp
    );
    eprintln!(
        "critical layer on {detect_on}: L{} (drop {:.3}, sharp {})",
        c.layer, c.drop, c.sharp
    );
    ctx.emit(
        &model.param_hash(),
        vec![
            ("sweep.csv".into(), sweep_csv(&rep)),
            ("critical.csv".into(), detail),
        ],
    )
}

fn cmd_restore_sweep<E: Scalar>(ctx: &Ctx, args: &RestoreSweepArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let mut store = Vec::new();
    let suites = build_suites(ctx, &vocab, &facts, &args.suite, &mut store)?;
    let rep = leave_one_out_layer_sweep(&model, &suites, ctx.threads)?;
    ctx.emit(
        &model.param_hash(),
        vec![("restore_sweep.csv".into(), sweep_csv(&rep))],
    )
}

fn all_heads(spec: &ModelSpec) -> Vec<HeadId> {
    spec.layers
        .iter()
        .enumerate()
        .flat_map(|(l, ls)| (0..ls.n_heads).map(move |h| HeadId::new(l, h)))
        .collect()
}

fn cmd_rank<E: Scalar>(ctx: &Ctx, args: &RankArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let (_, items, kind) = ctx.build_items(&vocab, &facts, &args.suite)?;
    if !matches!(kind, SuiteKind::Kv { .. }) {
        return Err(Error::Invalid("rank-heads expects a kv suite".into()));
    }
    let universe = match &args.heads {
        Some(s) => parse_heads(s)?,
        None => all_heads(&model.spec),
    };
    let ranking = rank_heads_by_kv_drop(&model, &items, &universe, ctx.threads)?;
    eprintln!("baseline {:.4}", ranking.baseline);
    for (h, acc) in ranking.entries.iter().take(5) {
        eprintln!("{h}: {:.4} (drop {:.4})", acc, ranking.baseline - acc);
    }
    ctx.emit(
        &model.param_hash(),
        vec![("ranking.csv".into(), ranking_csv(&ranking))],
    )
}

fn cmd_grid<E: Scalar>(ctx: &Ctx, args: &GridArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let gather = parse_heads(&args.gather)?;
    let aggregate = parse_heads(&args.aggregate)?;
    let layers = parse_layer_pair(&args.layers)?;
    let (ln, li, lk) = ctx.build_items(&vocab, &facts, &args.label_suite)?;
    let (kn, ki, kk) = ctx.build_items(&vocab, &facts, &args.knowledge_suite)?;
    let label = Suite::new(&ln, &li, default_regime(&lk));
    let knowledge = Suite::new(&kn, &ki, default_regime(&kk));
    let grid = critical_head_grid(
        &model, &gather, &aggregate, layers, &label, &knowledge, ctx.threads,
    )?;
    for row in &grid.rows {
        eprintln!(
            "{}: label {:.4}, knowledge {:.4}",
            row.config, row.label.accuracy, row.knowledge.accuracy
        );
    }
    ctx.emit(&model.param_hash(), vec![("grid.csv".into(), grid_csv(&grid))])
}

fn cmd_curve<E: Scalar>(ctx: &Ctx, args: &CurveArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let (_, rank_items, kind) = ctx.build_items(&vocab, &facts, &args.rank_suite)?;
    if !matches!(kind, SuiteKind::Kv { .. }) {
        return Err(Error::Invalid("curve: rank suite must be kv".into()));
    }
    let ranking = rank_heads_by_kv_drop(&model, &rank_items, &all_heads(&model.spec), ctx.threads)?;
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad k '{p}'")))
        })
        .collect::<Result<_>>()?;
    let mut store = Vec::new();
    let suites = build_suites(ctx, &vocab, &facts, &args.suite, &mut store)?;
    let curve = incremental_disable_curve(&model, &ranking, &ks, &suites, ctx.threads)?;
    ctx.emit(
        &model.param_hash(),
        vec![
            ("ranking.csv".into(), ranking_csv(&ranking)),
            ("curve.csv".into(), curve_csv(&curve)),
        ],
    )
}

fn cmd_mask_check<E: Scalar>(ctx: &Ctx, args: &MaskCheckArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let gather = parse_heads(&args.gather)?;
    let aggregate = parse_heads(&args.aggregate)?;
    let layers = parse_layer_pair(&args.layers)?;
    let (name, items, kind) = ctx.build_items(&vocab, &facts, &args.suite)?;
    let suite = Suite::new(&name, &items, default_regime(&kind));
    let rep = mask_sufficiency_check(&model, &gather, &aggregate, layers, &suite, ctx.threads)?;
    eprintln!(
        "minimal {:.4}, masked {:.4}, ratio {:.4}",
        rep.minimal_accuracy, rep.masked_accuracy, rep.ratio
    );
    let csv = format!(
        "suite,minimal_accuracy,masked_accuracy,ratio\n{},{:.6},{:.6},{:.6}\n",
        name, rep.minimal_accuracy, rep.masked_accuracy, rep.ratio
    );
    ctx.emit(&model.param_hash(), vec![("mask_check.csv".into(), csv)])
}

fn cmd_swap_sweep<E: Scalar>(ctx: &Ctx, args: &SwapArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let (donor, _) = Model::<E>::load(&args.donor)?;
    let donor = Arc::new(donor);
    let donor_name = args.donor.display().to_string();
    let mut store = Vec::new();
    let suites = build_suites(ctx, &vocab, &facts, &args.suite, &mut store)?;
    let rep = match args.head_layer {
        None => hybrid_replacement_sweep(&model, &donor, &donor_name, &suites, ctx.threads)?,
        Some(l) => head_swap_sweep(&model, &donor, &donor_name, l, &suites, ctx.threads)?,
    };
    for s in &rep.steps {
        let line: Vec<String> = s
            .results
            .iter()
            .map(|(n, r)| format!("{n} {:.4}", r.accuracy))
            .collect();
        eprintln!("{}: {}", s.label, line.join(", "));
    }
    ctx.emit(
        &model.param_hash(),
        vec![("swap_sweep.csv".into(), sweep_csv(&rep))],
    )
}

fn cmd_heatmap<E: Scalar>(ctx: &Ctx, args: &HeatmapArgs) -> Result<()> {
    let (model, vocab, facts) = ctx.load_model::<E>(&args.ckpt)?;
    let (name, items, _) = ctx.build_items(&vocab, &facts, &args.suite)?;
    let item = items
        .get(args.item)
        .ok_or_else(|| Error::Invalid(format!("item {} outside suite of {}", args.item, items.len())))?;
    let head: HeadId = args.head.parse()?;
    let set = load_interventions(&args.interventions, &model)?;
    let plan = set.plan_for(&model, item.prompt.len(), item.segmap.as_ref())?;
    let mats = model.capture_matrices(&item.prompt, &[head], &plan)?;
    let spec = HeatmapSpec {
        segmap: item.segmap.clone(),
        ..Default::default()
    };
    let svg = heatmap_svg(&mats[0], &spec)?;
    let file = format!("heatmap_{}_{}_{}.svg", name, args.item, head);
    ctx.emit(&model.param_hash(), vec![(file, svg)])
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        out_dir: cli.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone()),
        threads: cli.threads.unwrap_or(cfg.run.threads),
        cfg,
    };
    // Training takes its scalar type from the config; every other command
    // follows the checkpoint's stored dtype.
    let dtype = match &cli.cmd {
        Cmd::Train(_) => ctx.cfg.run.dtype.clone(),
        Cmd::Eval(a) => peek_dtype(&a.ckpt)?,
        Cmd::Sweep(a) => peek_dtype(&a.ckpt)?,
        Cmd::RestoreSweep(a) => peek_dtype(&a.ckpt)?,
        Cmd::RankHeads(a) => peek_dtype(&a.ckpt)?,
        Cmd::Grid(a) => peek_dtype(&a.ckpt)?,
        Cmd::Curve(a) => peek_dtype(&a.ckpt)?,
        Cmd::MaskCheck(a) => peek_dtype(&a.ckpt)?,
        Cmd::SwapSweep(a) => peek_dtype(&a.ckpt)?,
        Cmd::Heatmap(a) => peek_dtype(&a.ckpt)?,
    };
    match dtype.as_str() {
        "f32" => dispatch_typed::<f32>(&ctx, &cli.cmd),
        "f64" => dispatch_typed::<f64>(&ctx, &cli.cmd),
        other => Err(Error::Config(format!("unknown dtype '{other}'"))),
    }
}

fn dispatch_typed<E: Scalar>(ctx: &Ctx, cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train::<E>(ctx, a),
        Cmd::Eval(a) => cmd_eval::<E>(ctx, a),
        Cmd::Sweep(a) => cmd_sweep::<E>(ctx, a),
        Cmd::RestoreSweep(a) => cmd_restore_sweep::<E>(ctx, a),
        Cmd::RankHeads(a) => cmd_rank::<E>(ctx, a),
        Cmd::Grid(a) => cmd_grid::<E>(ctx, a),
        Cmd::Curve(a) => cmd_curve::<E>(ctx, a),
        Cmd::MaskCheck(a) => cmd_mask_check::<E>(ctx, a),
        Cmd::SwapSweep(a) => cmd_swap_sweep::<E>(ctx, a),
        Cmd::Heatmap(a) => cmd_heatmap::<E>(ctx, a),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Invalid(_)
        | Error::Config(_)
        | Error::Intervention(_)
        | Error::Task(_)
        | Error::Shape(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help/--version are successes; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
