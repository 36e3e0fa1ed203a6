//! Command-line pipeline: corpus generation, reference training,
//! debiasing, evaluation, alpha sweeps, and text generation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fairlm::corpus::{generate_synthetic_corpus, BiasSpec, Corpus};
use fairlm::eval;
use fairlm::lexicon::DemographicLexicon;
use fairlm::model::{self, checkpoint, DebiasAdapter, ModelConfig, ReferenceLM};
use fairlm::training::{self, DistillMode, TrainConfig};

const DEFAULT_PROMPT_PAIRS: &str = include_str!("../assets/prompt_pairs.txt");
const DEFAULT_GEN_PROMPTS: &str = include_str!("../assets/gen_prompts.txt");

#[derive(Parser)]
#[command(name = "fairlm", about = "Debias a small language model by minimizing demographic mutual information", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a controllable stereotype strength.
    GenCorpus(GenCorpusArgs),
    /// Train the reference language model on a corpus.
    TrainRef(TrainRefArgs),
    /// Train the debias adapter against a frozen reference.
    Debias(DebiasArgs),
    /// Measure fairness and fluency metrics for a checkpoint.
    Eval(EvalArgs),
    /// Run debias + eval across a grid of alpha settings.
    Sweep(SweepArgs),
    /// Sample completions from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Lexicon file: one `group: word, word, ...` line per group.
    #[arg(long)]
    lexicon: PathBuf,
    /// Stereotype strength beta in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    bias: f64,
    /// Number of sentences.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Bias spec file (key = value); overrides --bias/--n.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    adapter_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    ctx: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            adapter_dim: self.adapter_dim,
            layers: self.layers,
            heads: self.heads,
            ctx: self.ctx,
        }
    }
}

#[derive(Args)]
struct TrainRefArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DebiasArgs {
    /// Reference checkpoint (required).
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Adapter checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV output.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    alpha1: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha2: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    q_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Treat importance weights as constants during the adapter update.
    #[arg(long)]
    stop_grad_weights: bool,
    /// Distillation vocabulary: sensitive words only, or the full vocabulary.
    #[arg(long, default_value = "sensitive", value_parser = ["sensitive", "full"])]
    distill_mode: String,
    /// Average the fairness loss over all hidden positions.
    #[arg(long)]
    all_positions: bool,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Held-out corpus for perplexity.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Prompt-pair file (two tab-separated prefixes per line); built-in
    /// defaults when omitted.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Generation prompts, one per line; built-in defaults when omitted.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Completions per prompt.
    #[arg(long, default_value_t = 50)]
    gens: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Comma list from {f_ngram,f_max,kl,ppl,inconsistency}; default all.
    #[arg(long, default_value = "f_ngram,f_max,kl,ppl,inconsistency")]
    metrics: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 15)]
    window: usize,
    /// Report CSV output; stdout summary always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Comma list of alpha1 values.
    #[arg(long, default_value = "0,1,2,4,6,8")]
    alpha1: String,
    /// Comma list of alpha2 values.
    #[arg(long, default_value = "2")]
    alpha2: String,
    #[arg(long, default_value = "sensitive", value_parser = ["sensitive", "full"])]
    distill_mode: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Every k-th sentence goes to the held-out perplexity split.
    #[arg(long, default_value_t = 5)]
    held_out_every: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    /// 0 means greedy decoding.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a).context("corpus"),
        Command::TrainRef(a) => train_ref(a).context("model"),
        Command::Debias(a) => debias(a).context("training"),
        Command::Eval(a) => eval_cmd(a).context("evaluation"),
        Command::Sweep(a) => sweep(a).context("sweep"),
        Command::Generate(a) => generate(a).context("generation"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Write via a temporary file in the same directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().unwrap_or_default().to_string_lossy()
        )),
        None => PathBuf::from(format!(
            ".{}.tmp",
            path.file_name().unwrap_or_default().to_string_lossy()
        )),
    };
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_lexicon(path: &Path) -> Result<DemographicLexicon> {
    Ok(DemographicLexicon::parse(&read(path)?)?)
}

fn load_reference(path: &Path) -> Result<ReferenceLM> {
    Ok(checkpoint::load_reference(&read(path)?)?)
}

fn load_adapter(path: &Path, reference: &ReferenceLM) -> Result<DebiasAdapter> {
    let (adapter, _q) = checkpoint::load_adapter(&read(path)?, reference.config())?;
    Ok(adapter)
}

fn load_corpus_for(path: &Path, reference: &ReferenceLM) -> Result<Corpus> {
    Ok(Corpus::parse_with_vocab(&read(path)?, reference.vocab())?)
}

fn gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let lexicon = load_lexicon(&args.lexicon)?;
    let (spec, file_seed) = match &args.spec {
        Some(p) => BiasSpec::parse(&read(p)?, lexicon)?,
        None => (BiasSpec::default_for(lexicon, args.bias, args.n)?, None),
    };
    let corpus = generate_synthetic_corpus(&spec, file_seed.unwrap_or(args.seed))?;
    write_atomic(&args.out, &corpus.to_file_format())?;
    println!(
        "wrote {} sentences ({} word vocabulary) to {}",
        corpus.len(),
        corpus.vocab().len(),
        args.out.display()
    );
    Ok(())
}

fn train_ref(args: TrainRefArgs) -> Result<()> {
    let corpus = Corpus::parse(&read(&args.corpus)?)?;
    let hyper = model::ReferenceTrainConfig {
        model: args.model.config(),
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
    };
    let reference = model::train_reference(&corpus, &hyper, args.seed)?;
    write_atomic(&args.out, &checkpoint::save_reference(&reference))?;
    let ppl = eval::perplexity(&reference, None, &corpus)?;
    println!(
        "trained reference ({} steps); training-set perplexity {ppl:.3}; checkpoint {}",
        args.steps,
        args.out.display()
    );
    Ok(())
}

fn debias(args: DebiasArgs) -> Result<()> {
    let reference = load_reference(&args.reference)?;
    let corpus = load_corpus_for(&args.corpus, &reference)?;
    let lexicon = load_lexicon(&args.lexicon)?;
    let config = TrainConfig {
        alpha1: args.alpha1,
        alpha2: args.alpha2,
        lr: args.lr,
        q_lr: args.q_lr,
        batch_size: args.batch,
        steps: args.steps,
        seed: args.seed,
        stop_grad_weights: args.stop_grad_weights,
        distill_mode: if args.distill_mode == "full" {
            DistillMode::Full
        } else {
            DistillMode::Sensitive
        },
        all_positions: args.all_positions,
        checkpoint_interval: args.checkpoint_interval,
    };
    let run = training::run_debias(&reference, &corpus, &lexicon, &config)?;
    write_atomic(
        &args.out,
        &checkpoint::save_adapter(reference.config(), &run.adapter, &run.q.params),
    )?;
    for (step, text) in &run.checkpoints {
        let p = args.out.with_extension(format!("step{step}.ckpt"));
        write_atomic(&p, text)?;
    }
    if let Some(metrics) = &args.metrics_out {
        write_atomic(metrics, &training::metrics_csv(&run.records))?;
    }
    if let Some(last) = run.records.last() {
        println!(
            "debias finished after {} steps: loss {:.4} (fair {:.4}, lm {:.4}, vg {:.4}); adapter {}",
            args.steps,
            last.total,
            last.fair,
            last.lm,
            last.vg,
            args.out.display()
        );
    } else {
        println!("debias finished (0 steps); adapter {}", args.out.display());
    }
    Ok(())
}

fn parse_prompts(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(fairlm::corpus::tokenize)
        .collect()
}

/// Seeded completions for each prompt: one RNG stream per sentence so the
/// outputs are order-independent.
fn generate_sets(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    prompts: &[Vec<String>],
    per_prompt: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut sets = Vec::with_capacity(prompts.len());
    for (pi, prompt) in prompts.iter().enumerate() {
        let words: Vec<&str> = prompt.iter().map(String::as_str).collect();
        let ids = reference.token_ids(&words)?;
        let mut set = Vec::with_capacity(per_prompt);
        for gi in 0..per_prompt {
            let mut rng =
                training::seeded_rng(seed ^ ((pi as u64) << 32) ^ gi as u64);
            set.push(model::sample_sentence(
                reference,
                adapter,
                &ids,
                &mut rng,
                max_len,
                temperature,
            )?);
        }
        sets.push(set);
    }
    Ok(sets)
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let reference = load_reference(&args.reference)?;
    let adapter = match &args.adapter {
        Some(p) => Some(load_adapter(p, &reference)?),
        None => None,
    };
    let lexicon = load_lexicon(&args.lexicon)?;
    let metrics: BTreeSet<&str> = args.metrics.split(',').map(str::trim).collect();
    for m in &metrics {
        if !["f_ngram", "f_max", "kl", "ppl", "inconsistency"].contains(m) {
            bail!("unknown metric '{m}'");
        }
    }
    let needs_generation = ["f_ngram", "f_max", "inconsistency"]
        .iter()
        .any(|m| metrics.contains(m));

    let mut rows: Vec<(String, String)> = Vec::new();
    let mut summary = String::new();
    if needs_generation {
        let prompt_text = match &args.prompts {
            Some(p) => read(p)?,
            None => DEFAULT_GEN_PROMPTS.to_string(),
        };
        let prompts = parse_prompts(&prompt_text);
        if prompts.is_empty() {
            bail!("no generation prompts");
        }
        let sets = generate_sets(
            &reference,
            adapter.as_ref(),
            &prompts,
            args.gens,
            args.max_len,
            args.temperature,
            args.seed,
        )?;
        let all: Vec<Vec<usize>> = sets.iter().flatten().cloned().collect();
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        if metrics.contains("f_ngram") {
            let per_set: Vec<Option<f64>> = sets
                .iter()
                .map(|s| eval::f_ngram(s, reference.vocab(), &lexicon))
                .collect::<fairlm::Result<_>>()?;
            for (i, v) in per_set.iter().enumerate() {
                rows.push((format!("f_ngram_set{i}"), fmt(*v)));
            }
            let avg = average(&per_set);
            summary.push_str(&format!("F_ngram (avg): {}\n", fmt(avg)));
            rows.push(("f_ngram_avg".into(), fmt(avg)));
        }
        if metrics.contains("f_max") {
            let per_set: Vec<Option<f64>> = sets
                .iter()
                .map(|s| eval::f_max(s, &reference, &lexicon, args.threshold))
                .collect::<fairlm::Result<_>>()?;
            for (i, v) in per_set.iter().enumerate() {
                rows.push((format!("f_max_set{i}"), fmt(*v)));
            }
            let avg = average(&per_set);
            summary.push_str(&format!("F_max   (avg): {}\n", fmt(avg)));
            rows.push(("f_max_avg".into(), fmt(avg)));
        }
        if metrics.contains("inconsistency") {
            let r = eval::inconsistency_rate(&all, reference.vocab(), &lexicon, args.window)?;
            summary.push_str(&format!("Inconsistency rate: {r}\n"));
            rows.push(("inconsistency_rate".into(), r.to_string()));
        }
    }
    if metrics.contains("kl") {
        let pair_text = match &args.pairs {
            Some(p) => read(p)?,
            None => DEFAULT_PROMPT_PAIRS.to_string(),
        };
        let pairs = eval::parse_prompt_pairs(&pair_text)?;
        let kl = eval::counterfactual_kl(&reference, adapter.as_ref(), &pairs, &lexicon)?;
        summary.push_str(&format!("Counterfactual KL: {kl}\n"));
        rows.push(("counterfactual_kl".into(), kl.to_string()));
    }
    if metrics.contains("ppl") {
        let corpus = load_corpus_for(&args.corpus, &reference)?;
        let ppl = eval::perplexity(&reference, adapter.as_ref(), &corpus)?;
        summary.push_str(&format!("Perplexity: {ppl}\n"));
        rows.push(("perplexity".into(), ppl.to_string()));
    }
    print!("{summary}");
    if let Some(out) = &args.out {
        let mut csv = String::from("metric,value\n");
        for (k, v) in &rows {
            csv.push_str(&format!("{k},{v}\n"));
        }
        write_atomic(out, &csv)?;
    }
    Ok(())
}

fn average(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad alpha value '{v}'"))
        })
        .collect()
}

fn sweep(args: SweepArgs) -> Result<()> {
    let reference = load_reference(&args.reference)?;
    let corpus = load_corpus_for(&args.corpus, &reference)?;
    let lexicon = load_lexicon(&args.lexicon)?;
    let pair_text = match &args.pairs {
        Some(p) => read(p)?,
        None => DEFAULT_PROMPT_PAIRS.to_string(),
    };
    let pairs = eval::parse_prompt_pairs(&pair_text)?;
    let alpha1 = parse_list(&args.alpha1)?;
    let alpha2 = parse_list(&args.alpha2)?;
    let (train, held) = corpus.split_held_out(args.held_out_every);
    let mode = if args.distill_mode == "full" {
        DistillMode::Full
    } else {
        DistillMode::Sensitive
    };
    // baseline: the bare reference
    let mut entries: Vec<(f64, f64, String, Option<DebiasAdapter>)> =
        vec![(0.0, 0.0, "reference".to_string(), None)];
    let mut run_index = 0u64;
    for &a1 in &alpha1 {
        for &a2 in &alpha2 {
            run_index += 1;
            let config = TrainConfig {
                alpha1: a1,
                alpha2: a2,
                lr: args.lr,
                batch_size: args.batch,
                steps: args.steps,
                seed: args.seed.wrapping_add(run_index),
                distill_mode: mode,
                ..TrainConfig::default()
            };
            eprintln!("sweep: alpha1={a1} alpha2={a2} ({} steps)", args.steps);
            let run = training::run_debias(&reference, &train, &lexicon, &config)?;
            entries.push((a1, a2, args.distill_mode.clone(), Some(run.adapter)));
        }
    }
    let rows = eval::tradeoff_table(&reference, &entries, &pairs, &held, &lexicon)?;
    write_atomic(&args.out, &eval::tradeoff_csv(&rows))?;
    println!("wrote {} tradeoff rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let reference = load_reference(&args.reference)?;
    let adapter = match &args.adapter {
        Some(p) => Some(load_adapter(p, &reference)?),
        None => None,
    };
    let prompt = fairlm::corpus::tokenize(&args.prompt);
    if prompt.is_empty() {
        bail!("empty prompt");
    }
    let words: Vec<&str> = prompt.iter().map(String::as_str).collect();
    let ids = reference.token_ids(&words)?;
    for i in 0..args.n {
        let mut rng = training::seeded_rng(args.seed ^ i as u64);
        let tokens = model::sample_sentence(
            &reference,
            adapter.as_ref(),
            &ids,
            &mut rng,
            args.max_len,
            args.temperature,
        )?;
        let text: Vec<&str> = tokens
            .iter()
            .filter(|&&id| id != 0)
            .map(|&id| reference.vocab().token(id))
            .collect();
        println!("{}", text.join(" "));
    }
    Ok(())
}
