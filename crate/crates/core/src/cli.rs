use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use convstruct::corpus::{
    filter_reddit_large, parse_conversations, split_corpus, target_window, targets, truncate_to_first,
    write_conversations, FilterRules, Labeled,
};
use convstruct::decode::{predict_first_baseline, probabilities_csv, reconstruct_corpus, DecodeRule};
use convstruct::encoder::EncoderKind;
use convstruct::experiment::{ablation_csv, model_grad_check, run_ablation};
use convstruct::fsutil::atomic_write;
use convstruct::graph::{multi_parent_stats, tree_stats, Mode};
use convstruct::masking::MaskKind;
use convstruct::metrics::evaluate;
use convstruct::model::{LossKind, ModelConfig, TrainedModel};
use convstruct::synth::{generate_corpus, SynthConfig};
use convstruct::train::{train_two_stage, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "convstruct", version, about = "Recover reply-to structure in threaded conversations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import, filter, truncate and split a JSONL corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Generate a synthetic threaded corpus.
    Synth(SynthArgs),
    /// Two-stage training.
    Train(TrainArgs),
    /// Reconstruct structures with a trained model.
    Decode(DecodeArgs),
    /// Score predicted structures against gold.
    Eval(EvalArgs),
    /// Train one model per mask variant and compare them.
    Ablate(AblateArgs),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Apply the large-Reddit filters (length, ASCII, deleted, depth).
    #[arg(long)]
    pub filter: bool,
    /// Keep only the first N comments of each tree.
    #[arg(long)]
    pub first: Option<usize>,
    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Also write the statistics as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_conversations: Option<usize>,
    #[arg(long)]
    pub n_utterances: Option<usize>,
    #[arg(long)]
    pub n_topics: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub ambiguity: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and optimiser settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML or JSON file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `desk` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
    /// `transformer` or `mean_pool`.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub max_window: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-epoch log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// `ancestor`, `none`, `depth:D` or `temporal:T`.
    #[arg(long)]
    pub mask: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, required_unless_present = "predict_first")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Build windows and masks from the gold structure.
    #[arg(long)]
    pub teacher_forced: bool,
    /// Keep every candidate above this probability (BCE models).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write candidate probabilities as CSV.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Ignore the model and attach every comment to the root.
    #[arg(long)]
    pub predict_first: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Expected corpus mode; checked against the gold file.
    #[arg(long)]
    pub mode: Option<String>,
    /// Metrics report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ancestor,none")]
    pub masks: Vec<String>,
    /// Depth limits, each added as a `depth:D` variant.
    #[arg(long, value_delimiter = ',')]
    pub depths: Vec<usize>,
    /// Temporal windows, each added as a `temporal:T` variant.
    #[arg(long, value_delimiter = ',')]
    pub temporals: Vec<usize>,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Append a predict-first baseline row.
    #[arg(long)]
    pub predict_first: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `rank`, `bce` or `both`.
    #[arg(long, default_value = "both")]
    pub loss: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings for `train` and `ablate`; unset model fields take the preset
/// value and unset optimiser fields the per-mode defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub preset: String,
    pub mask: String,
    pub encoder: Option<EncoderKind>,
    pub max_tokens: Option<usize>,
    pub max_window: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub feature_mode: Option<bool>,
    pub stage1_lr: Option<f64>,
    pub stage1_batch: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_lr: Option<f64>,
    pub stage2_batch: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub early_stopping_patience: Option<usize>,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            preset: "desk".into(),
            mask: "ancestor".into(),
            encoder: None,
            max_tokens: None,
            max_window: None,
            embed_dim: None,
            hidden: None,
            layers: None,
            heads: None,
            dropout: None,
            feature_mode: None,
            stage1_lr: None,
            stage1_batch: None,
            stage1_epochs: None,
            stage2_lr: None,
            stage2_batch: None,
            stage2_epochs: None,
            early_stopping_patience: None,
            seed: 0,
        }
    }
}

impl RunSettings {
    pub fn model_config(&self, mode: Mode) -> convstruct::Result<ModelConfig> {
        let mut mc = match self.preset.as_str() {
            "desk" => ModelConfig::desk(mode, 0),
            "full" => ModelConfig::full(mode, 0),
            other => {
                return Err(convstruct::Error::InvalidConfig(format!("unknown preset `{other}`")));
            }
        };
        mc.mask = self.mask.parse()?;
        if let Some(k) = self.encoder {
            mc.encoder.kind = k;
        }
        if let Some(t) = self.max_tokens {
            mc.encoder.max_tokens = t;
        }
        if let Some(w) = self.max_window {
            mc.max_window = w;
        }
        if let Some(d) = self.embed_dim {
            mc.encoder.embed_dim = d;
            mc.encoder.output_dim = d;
        }
        if let Some(h) = self.hidden {
            mc.hidden = h;
            mc.intermediate = 2 * h;
        }
        if let Some(l) = self.layers {
            mc.layers = l;
        }
        if let Some(h) = self.heads {
            mc.heads = h;
        }
        if let Some(p) = self.dropout {
            mc.dropout = p;
            mc.encoder.dropout = p;
        }
        if let Some(f) = self.feature_mode {
            mc.feature_mode = f;
        }
        Ok(mc)
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let base = TrainConfig::for_mode(mode);
        TrainConfig {
            stage1_lr: self.stage1_lr.unwrap_or(base.stage1_lr),
            stage1_batch: self.stage1_batch.unwrap_or(base.stage1_batch),
            stage1_epochs: self.stage1_epochs.unwrap_or(base.stage1_epochs),
            stage2_lr: self.stage2_lr.unwrap_or(base.stage2_lr),
            stage2_batch: self.stage2_batch.unwrap_or(base.stage2_batch),
            stage2_epochs: self.stage2_epochs.unwrap_or(base.stage2_epochs),
            early_stopping_patience: self.early_stopping_patience.unwrap_or(base.early_stopping_patience),
            seed: self.seed,
        }
    }
}

fn read_config_file(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| convstruct::Error::InvalidConfig(e.to_string()))?
    } else {
        let t: toml::Table = toml::from_str(&text).map_err(|e| convstruct::Error::InvalidConfig(e.to_string()))?;
        serde_json::to_value(t)?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(convstruct::Error::InvalidConfig(format!("{} is not a table", path.display())).into()),
    }
}

/// Layers built-in defaults, the config file and explicit flags (in
/// increasing priority) and logs where each setting came from.
pub fn resolve<T>(file: Option<&Path>, flags: Map<String, Value>) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = serde_json::to_value(T::default())? else {
        bail!("settings must serialize to a table");
    };
    let mut source: Vec<(String, &str)> = merged.keys().map(|k| (k.clone(), "default")).collect();
    let mut apply = |layer: Map<String, Value>, name: &'static str, merged: &mut Map<String, Value>| {
        for (k, v) in layer {
            match source.iter_mut().find(|(key, _)| *key == k) {
                Some(entry) => entry.1 = name,
                None => source.push((k.clone(), name)),
            }
            merged.insert(k, v);
        }
    };
    if let Some(path) = file {
        apply(read_config_file(path)?, "file", &mut merged);
    }
    apply(flags, "flag", &mut merged);
    let settings: T = serde_json::from_value(Value::Object(merged.clone()))
        .map_err(|e| convstruct::Error::InvalidConfig(e.to_string()))?;
    for (k, from) in &source {
        let v = merged.get(k).unwrap_or(&Value::Null);
        eprintln!("config {k} = {v} ({from})");
    }
    Ok(settings)
}

fn flag_map(pairs: Vec<(&str, Option<Value>)>) -> Map<String, Value> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
}

fn model_flags(m: &ModelArgs, mask: Option<&String>) -> Map<String, Value> {
    flag_map(vec![
        ("preset", m.preset.clone().map(Value::from)),
        ("mask", mask.cloned().map(Value::from)),
        ("encoder", m.encoder.clone().map(Value::from)),
        ("max_tokens", m.max_tokens.map(Value::from)),
        ("max_window", m.max_window.map(Value::from)),
        ("dropout", m.dropout.map(Value::from)),
        ("stage1_lr", m.stage1_lr.map(Value::from)),
        ("stage2_lr", m.stage2_lr.map(Value::from)),
        ("stage1_epochs", m.stage1_epochs.map(Value::from)),
        ("stage2_epochs", m.stage2_epochs.map(Value::from)),
        ("early_stopping_patience", m.patience.map(Value::from)),
        ("seed", m.seed.map(Value::from)),
    ])
}

fn load(path: &Path) -> anyhow::Result<Vec<Labeled>> {
    parse_conversations(path).with_context(|| format!("reading {}", path.display()))
}

fn corpus_mode(corpus: &[Labeled]) -> convstruct::Result<Mode> {
    corpus.first().map(|(c, _)| c.mode).ok_or(convstruct::Error::EmptyCorpus)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    atomic_write(path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildCorpus(a) => build_corpus(a),
        Command::Stats(a) => stats(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn build_corpus(a: BuildCorpusArgs) -> anyhow::Result<()> {
    let [tr, dv, te] = a.split[..] else {
        return Err(convstruct::Error::InvalidConfig("--split takes three fractions".into()).into());
    };
    let mut corpus = load(&a.input)?;
    let read = corpus.len();
    if a.filter {
        corpus = filter_reddit_large(&corpus, &FilterRules::default());
    }
    if let Some(n) = a.first {
        corpus = corpus.iter().map(|(c, g)| truncate_to_first(c, g, n)).collect();
    }
    let kept = corpus.len();
    let (train, dev, test) = split_corpus(corpus, (tr, dv, te), a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write_conversations(&a.out_dir.join(format!("{name}.jsonl")), part)?;
    }
    println!(
        "read {read}, kept {kept}: train {}, dev {}, test {}",
        train.len(),
        dev.len(),
        test.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct WindowStats {
    targets: usize,
    oversize_windows: usize,
    average_window: f64,
}

fn stats(a: StatsArgs) -> anyhow::Result<()> {
    let corpus = load(&a.input)?;
    let mode = corpus_mode(&corpus)?;
    let max_window = ModelConfig::desk(mode, 0).max_window;
    let (mut n, mut oversize, mut total) = (0usize, 0usize, 0usize);
    for (conv, graph) in &corpus {
        for t in targets(conv) {
            let w = target_window(conv, graph, t, max_window)?;
            n += 1;
            total += w.len();
            oversize += usize::from(w.oversize);
        }
    }
    let windows = WindowStats {
        targets: n,
        oversize_windows: oversize,
        average_window: if n == 0 { 0.0 } else { total as f64 / n as f64 },
    };
    let body = match mode {
        Mode::RedditTree => {
            let s = tree_stats(&corpus)?;
            println!("conversations     {}", s.count);
            println!("comments          {}", s.comment_count);
            println!("average depth     {:.2}", s.average_depth);
            println!("max depth         {}", s.max_depth);
            serde_json::to_value(&s)?
        }
        Mode::IrcMultiParent => {
            let s = multi_parent_stats(&corpus)?;
            println!("conversations     {}", s.count);
            println!("annotated         {}", s.annotated_messages);
            println!("average parents   {:.3}", s.average_parents);
            serde_json::to_value(&s)?
        }
    };
    println!("targets           {}", windows.targets);
    println!("average window    {:.2}", windows.average_window);
    println!("oversize windows  {}", windows.oversize_windows);
    if let Some(path) = a.json {
        let all = serde_json::json!({ "mode": mode, "corpus": body, "windows": windows, "max_window": max_window });
        write(&path, &(serde_json::to_string_pretty(&all)? + "\n"))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let flags = flag_map(vec![
        ("n_conversations", a.n_conversations.map(Value::from)),
        ("n_utterances", a.n_utterances.map(Value::from)),
        ("n_topics", a.n_topics.map(Value::from)),
        ("vocab_size", a.vocab_size.map(Value::from)),
        ("ambiguity", a.ambiguity.map(Value::from)),
        ("seed", a.seed.map(Value::from)),
    ]);
    let cfg: SynthConfig = resolve(a.config.as_deref(), flags)?;
    let corpus = generate_corpus(&cfg)?;
    write_conversations(&a.out, &corpus)?;
    println!("wrote {} conversations to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let settings: RunSettings = resolve(a.model.config.as_deref(), model_flags(&a.model, a.mask.as_ref()))?;
    let train = load(&a.train)?;
    let dev = load(&a.dev)?;
    let mode = corpus_mode(&train)?;
    let mc = settings.model_config(mode)?;
    let tc = settings.train_config(mode);
    let (tm, report) = train_two_stage(&train, &dev, &mc, &tc, None)?;
    tm.save(&a.out)?;
    if let Some(path) = a.report {
        write(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if let Some(path) = a.log {
        write(&path, &report.to_csv())?;
    }
    println!(
        "best dev graph accuracy {:.4} (stage {}, epoch {})",
        report.best_dev_graph_acc, report.best_stage, report.best_epoch
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let corpus = load(&a.input)?;
    if a.predict_first {
        if corpus.iter().any(|(c, _)| c.mode != Mode::RedditTree) {
            return Err(convstruct::Error::InvalidConfig("predict-first applies to tree corpora only".into()).into());
        }
        let preds: Vec<Labeled> = corpus.iter().map(|(c, _)| (c.clone(), predict_first_baseline(c).graph)).collect();
        write_conversations(&a.out, &preds)?;
        return Ok(());
    }
    let path = a.checkpoint.context("--checkpoint is required")?;
    let tm = TrainedModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let rule = match a.threshold {
        Some(t) if tm.model.config().loss == LossKind::Bce => DecodeRule::Threshold(t),
        Some(_) => return Err(convstruct::Error::InvalidConfig("--threshold needs a BCE model".into()).into()),
        None => DecodeRule::Top1,
    };
    let decoded = reconstruct_corpus(&tm, &corpus, a.teacher_forced, rule)?;
    let oversize: usize = decoded.iter().map(|(_, d)| d.oversize.len()).sum();
    if oversize > 0 {
        log::warn!("{oversize} windows exceeded the size limit after pruning");
    }
    let preds: Vec<Labeled> = decoded.iter().map(|(l, _)| l.clone()).collect();
    write_conversations(&a.out, &preds)?;
    if let Some(p) = a.probs {
        write(&p, &probabilities_csv(&decoded))?;
    }
    println!("decoded {} conversations", preds.len());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let pred = load(&a.pred)?;
    let gold = load(&a.gold)?;
    if let Some(m) = &a.mode {
        let expected: Mode = m.parse()?;
        if gold.iter().any(|(c, _)| c.mode != expected) {
            return Err(convstruct::Error::Mismatch(format!("gold corpus is not all `{m}`")).into());
        }
    }
    let report = evaluate(&pred, &gold)?;
    print!("{}", report.to_table());
    if let Some(path) = a.out {
        write(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let settings: RunSettings = resolve(a.model.config.as_deref(), model_flags(&a.model, None))?;
    let mut masks: Vec<MaskKind> = a.masks.iter().map(|m| m.parse()).collect::<convstruct::Result<_>>()?;
    masks.extend(a.depths.iter().map(|&d| MaskKind::Depth(d)));
    masks.extend(a.temporals.iter().map(|&t| MaskKind::Temporal(t)));
    let train = load(&a.train)?;
    let dev = load(&a.dev)?;
    let test = load(&a.test)?;
    let mode = corpus_mode(&train)?;
    if mode != Mode::RedditTree {
        return Err(convstruct::Error::InvalidConfig("ablation sweeps run on tree corpora".into()).into());
    }
    let rows = run_ablation(&train, &dev, &test, &settings.model_config(mode)?, &settings.train_config(mode), &masks, a.predict_first)?;
    let csv = ablation_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let losses = match a.loss.as_str() {
        "rank" => vec![LossKind::Rank],
        "bce" => vec![LossKind::Bce],
        "both" => vec![LossKind::Rank, LossKind::Bce],
        other => return Err(convstruct::Error::InvalidConfig(format!("unknown loss `{other}`")).into()),
    };
    let mut reports = Vec::new();
    for loss in losses {
        let r = model_grad_check(loss, a.seed)?;
        println!(
            "{loss:?}: {} entries, max relative error {:.3e} at {}[{}], {}",
            r.checked,
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            if r.passed { "pass" } else { "FAIL" }
        );
        reports.push(serde_json::json!({ "loss": format!("{loss:?}"), "report": r }));
    }
    if let Some(path) = a.out {
        write(&path, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    if reports.iter().any(|r| r["report"]["passed"] == false) {
        bail!("gradient check failed");
    }
    Ok(())
}
