//! Implementations of the five pipeline commands. Each one is reproducible
//! from its config + seed, and each embeds the effective config snapshot in
//! what it writes.

use crate::config::CliConfig;
use crate::{EvaluateArgs, GenerateArgs, PrepareArgs, SynthArgs, TrainArgs};
use p2net::config::{CorpusConfig, DecodingConfig, Strategy};
use p2net::corpus::{
    build_paraphrase_sets, build_splits, load_dialogues, read_records_jsonl, sampling_weight,
    write_records_jsonl, CorpusRecord, CorpusSplits, IngestStats, ParaphraseSet, SplitManifest,
};
use p2net::embedding::{SlotTypeVocab, Vocabulary};
use p2net::error::{Error, Result};
use p2net::inference::{generation_records, relexicalize, run_strategy, GenerationRecord};
use p2net::metrics::{diversity_report, evaluate_model, EvalReport, MetricToken};
use p2net::model::load_checkpoint;
use p2net::synth::{write_corpus, SynthConfig};
use p2net::tape::ParamStore;
use p2net::training::{train as run_training, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn load_prepared(dir: &Path) -> Result<(Vec<CorpusRecord>, CorpusSplits)> {
    let corpus_path = dir.join("corpus.jsonl");
    let records = read_records_jsonl(&corpus_path)
        .map_err(|e| Error::corpus(format!("{}: {e}", corpus_path.display())))?;
    let manifest_path = dir.join("splits.json");
    let manifest = SplitManifest::read(&manifest_path)
        .map_err(|e| Error::corpus(format!("{}: {e}", manifest_path.display())))?;
    let splits = manifest.resolve(&records)?;
    Ok((records, splits))
}

pub fn synth(cfg: &CliConfig, args: &SynthArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.raw_dir());
    let mut scfg = SynthConfig::default();
    scfg.dialogues = args.dialogues;
    if let Some(seed) = args.seed {
        scfg.seed = seed;
    }
    write_corpus(&out, &scfg)?;
    write_json_pretty(&out.join("synth_config.json"), &scfg)?;
    println!(
        "wrote {} synthetic dialogues to {}",
        scfg.dialogues,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    sets: usize,
    members: usize,
}

#[derive(Serialize)]
struct DominantAction {
    action: String,
    /// Fraction of corpus records carrying the action.
    raw_frequency: f64,
    /// The action's share of the size-balanced sampling weight over
    /// training sets.
    balanced_frequency: f64,
}

#[derive(Serialize)]
struct PrepareStats {
    config: CorpusConfig,
    ingest: IngestStats,
    records: usize,
    sets: usize,
    /// (set size, number of sets of that size), ascending.
    set_size_histogram: Vec<(usize, usize)>,
    splits: BTreeMap<String, SplitSummary>,
    dominant_action: DominantAction,
}

fn dominant_action(records: &[CorpusRecord], splits: &CorpusSplits, weight_cap: f64) -> DominantAction {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(&r.response.dialogue_action).or_default() += 1;
    }
    let (action, count) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .unwrap_or(("", 0));
    let mut total_weight = 0.0;
    let mut action_weight = 0.0;
    for set in &splits.train {
        let w = sampling_weight(set.len(), weight_cap);
        total_weight += w;
        if set.key.action == action {
            action_weight += w;
        }
    }
    DominantAction {
        action: action.to_string(),
        raw_frequency: count as f64 / records.len().max(1) as f64,
        balanced_frequency: if total_weight > 0.0 {
            action_weight / total_weight
        } else {
            0.0
        },
    }
}

pub fn prepare(cfg: &CliConfig, args: &PrepareArgs) -> Result<()> {
    let input = args.input.clone().unwrap_or_else(|| cfg.paths.raw_dir());
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.prepared_dir());
    let mut ccfg = cfg.run.corpus.clone();
    if let Some(seed) = args.seed {
        ccfg.seed = seed;
    }
    ccfg.validate()?;
    if !input.is_dir() {
        return Err(Error::corpus(format!(
            "input directory {} does not exist",
            input.display()
        )));
    }

    let (records, ingest) = load_dialogues(&input, &ccfg)?;
    if records.is_empty() {
        return Err(Error::corpus("no usable system turns found in the input"));
    }
    let sets = build_paraphrase_sets(records.clone());
    let n_sets = sets.len();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &sets {
        *histogram.entry(s.len()).or_default() += 1;
    }
    let splits = build_splits(sets, &ccfg)?;

    fs::create_dir_all(&out)?;
    write_records_jsonl(&out.join("corpus.jsonl"), &records)?;
    SplitManifest::from_splits(&splits, ccfg.seed).write(&out.join("splits.json"))?;

    let split_summaries: BTreeMap<String, SplitSummary> = splits
        .iter_named()
        .map(|(name, sets)| {
            let summary = SplitSummary {
                sets: sets.len(),
                members: sets.iter().map(|s| s.len()).sum(),
            };
            (name.to_string(), summary)
        })
        .collect();
    let dominant = dominant_action(&records, &splits, cfg.run.training.weight_cap);
    let stats = PrepareStats {
        config: ccfg,
        ingest,
        records: records.len(),
        sets: n_sets,
        set_size_histogram: histogram.into_iter().collect(),
        splits: split_summaries,
        dominant_action: dominant,
    };
    write_json_pretty(&out.join("stats.json"), &stats)?;

    println!(
        "ingested {} dialogues: {} records from {} system turns \
         ({} unannotated, {} unlocatable)",
        stats.ingest.dialogues,
        stats.records,
        stats.ingest.system_turns,
        stats.ingest.skipped_no_annotation,
        stats.ingest.dropped_unlocatable
    );
    let split_line: Vec<String> = splits
        .iter_named()
        .map(|(name, sets)| {
            let members: usize = sets.iter().map(|s| s.len()).sum();
            format!("{name} {} sets / {members} members", sets.len())
        })
        .collect();
    println!("{} paraphrase sets; {}", stats.sets, split_line.join(", "));
    println!(
        "dominant action {}: raw {:.1}%, balanced {:.1}%",
        stats.dominant_action.action,
        100.0 * stats.dominant_action.raw_frequency,
        100.0 * stats.dominant_action.balanced_frequency
    );
    println!("prepared corpus written to {}", out.display());
    Ok(())
}

/// Pretrained word vectors in the plain text format: one word followed by
/// its components per line, whitespace separated.
fn read_word_vectors(path: &Path, d_word: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot read word vectors {}: {e}", path.display())))?;
    let mut vectors = HashMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                Error::invalid(format!(
                    "{}:{}: bad vector component: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
        if values.len() != d_word {
            return Err(Error::invalid(format!(
                "{}:{}: vector for {word:?} has {} components, expected {d_word}",
                path.display(),
                lineno + 1,
                values.len()
            )));
        }
        vectors.insert(word.to_string(), values);
    }
    Ok(vectors)
}

pub fn train(cfg: &CliConfig, args: &TrainArgs) -> Result<()> {
    let corpus_dir = args.corpus.clone().unwrap_or_else(|| cfg.paths.prepared_dir());
    let (_, splits) = load_prepared(&corpus_dir)?;

    let mut run = cfg.run.clone();
    if let Some(v) = &args.variant {
        run.model.variant = v.parse()?;
    }
    if let Some(n) = args.max_iters {
        run.training.max_iterations = n;
    }
    if let Some(seed) = args.seed {
        run.training.seed = seed;
    }
    run.validate()?;

    let mut train_sets = splits.train.clone();
    if let Some(key) = &args.overfit_set {
        train_sets.retain(|s| s.key.to_string() == *key);
        if train_sets.is_empty() {
            return Err(Error::invalid(format!(
                "no training set has the key {key:?}"
            )));
        }
    }
    if train_sets.is_empty() {
        return Err(Error::corpus("the training split is empty"));
    }

    let members = || train_sets.iter().flat_map(|s| s.members.iter());
    let vocab = Vocabulary::from_records(members(), run.corpus.min_word_freq);
    let slot_types = SlotTypeVocab::from_records(members());
    let pretrained = match cfg.paths.vectors_path() {
        Some(p) => Some(read_word_vectors(&p, run.model.d_word)?),
        None => None,
    };

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoints_dir().join(run.model.variant.name()));
    fs::create_dir_all(&out)?;
    write_json_pretty(&out.join("run_config.json"), &run)?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(run.training.seed);
    let model = p2net::model::P2Net::new(
        &mut store,
        &run.model,
        &vocab,
        &slot_types,
        pretrained.as_ref(),
        &mut rng,
    )?;
    println!(
        "training {} on {} sets ({} members, vocab {}, {} slot types) for {} iterations",
        run.model.variant.name(),
        train_sets.len(),
        members().count(),
        vocab.len(),
        slot_types.len(),
        run.training.max_iterations
    );

    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let opts = TrainOptions {
        out_dir: Some(&out),
        log: Some(&mut log),
        val: (!splits.val_seen.is_empty()).then_some(&splits.val_seen[..]),
    };
    let outcome = run_training(&mut store, &model, &train_sets, &run.training, opts)?;
    log.flush()?;

    if let Some(last) = outcome.losses.last() {
        println!(
            "finished: L_gen {:.4}, L_word {:.4}, L_final {:.4}",
            last.l_gen, last.l_word, last.l_final
        );
    }
    if let Some(best) = &outcome.best {
        println!(
            "best validation BLEU {:.2} at iteration {}",
            best.bleu, best.iteration
        );
    }
    if let Some(path) = &outcome.final_path {
        println!("final checkpoint: {}", path.display());
    }
    Ok(())
}

struct DecodingOverrides<'a> {
    strategy: Option<&'a str>,
    n: Option<usize>,
    beam: Option<usize>,
    groups: Option<usize>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    delta: Option<f64>,
    seed: Option<u64>,
    zero_noise: bool,
}

fn apply_overrides(dec: &mut DecodingConfig, ov: &DecodingOverrides<'_>) -> Result<()> {
    if let Some(s) = ov.strategy {
        dec.strategy = s.parse()?;
    }
    if let Some(n) = ov.n {
        dec.n_samples = n;
    }
    if let Some(b) = ov.beam {
        dec.beam_width = b;
    }
    if let Some(g) = ov.groups {
        dec.groups = g;
    }
    if let Some(g) = ov.gamma {
        dec.gamma = g;
    }
    if let Some(a) = ov.alpha {
        dec.alpha = a;
    }
    if let Some(d) = ov.delta {
        dec.delta = d;
    }
    if let Some(s) = ov.seed {
        dec.seed = s;
    }
    if ov.zero_noise {
        dec.zero_noise = true;
    }
    dec.validate()
}

/// Within each set, every member is an instance: its context stays, and its
/// in-set successor (cyclically) provides the template to paraphrase.
fn split_instances(sets: &[&ParaphraseSet]) -> Vec<CorpusRecord> {
    let mut instances = Vec::new();
    for set in sets {
        if set.members.len() < 2 {
            continue;
        }
        for (j, member) in set.members.iter().enumerate() {
            let template = &set.members[(j + 1) % set.members.len()];
            instances.push(CorpusRecord {
                context: member.context.clone(),
                response: template.response.clone(),
            });
        }
    }
    instances
}

fn load_checkpoint_at(path: &Path) -> Result<p2net::model::LoadedCheckpoint> {
    load_checkpoint(path)
        .map_err(|e| Error::checkpoint(format!("cannot load {}: {e}", path.display())))
}

pub fn generate(cfg: &CliConfig, args: &GenerateArgs) -> Result<()> {
    let loaded = load_checkpoint_at(&args.checkpoint)?;
    let mut dec = cfg.run.decoding.clone();
    apply_overrides(
        &mut dec,
        &DecodingOverrides {
            strategy: args.strategy.as_deref(),
            n: args.n,
            beam: args.beam,
            groups: args.groups,
            gamma: args.gamma,
            alpha: args.alpha,
            delta: args.delta,
            seed: args.seed,
            zero_noise: args.zero_noise,
        },
    )?;
    if dec.strategy == Strategy::SampleProtos && loaded.model.noise.is_none() {
        return Err(Error::config(format!(
            "strategy sample_prototypes needs a noise encoder, but variant {} has none; \
             pick a gt_* checkpoint or another strategy",
            loaded.model.cfg.variant
        )));
    }

    if args.interactive {
        let stdin = std::io::stdin();
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for line in stdin.lock().lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let instance: CorpusRecord = serde_json::from_str(&line)?;
            instance.response.validate()?;
            let batch = run_strategy(&loaded.store, &loaded.model, &instance, &dec)?;
            for sample in &batch.samples {
                writeln!(out, "{}", relexicalize(&sample.response)?)?;
            }
        }
        return Ok(());
    }

    let corpus_dir = args.corpus.clone().unwrap_or_else(|| cfg.paths.prepared_dir());
    let (_, splits) = load_prepared(&corpus_dir)?;
    let sets = splits.eval_sets(&args.split)?;
    let mut instances = split_instances(&sets);
    if let Some(cap) = args.max_instances {
        instances.truncate(cap);
    }
    if instances.is_empty() {
        return Err(Error::invalid(format!(
            "split {:?} has no sets with at least two members",
            args.split
        )));
    }

    // Each instance gets its own seed stream so samples differ across
    // instances while the whole run stays reproducible.
    let batches: Vec<Vec<GenerationRecord>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, instance)| {
            let mut icfg = dec.clone();
            icfg.seed = dec.seed.wrapping_add(i as u64);
            let batch = run_strategy(&loaded.store, &loaded.model, instance, &icfg)?;
            generation_records(&batch, icfg.strategy)
        })
        .collect::<Result<Vec<_>>>()?;

    let out_path = args.out.clone().unwrap_or_else(|| {
        cfg.paths
            .reports_dir()
            .join(format!("generations_{}_{}.jsonl", dec.strategy.name(), args.split))
    });
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(&out_path)?);
    let header = serde_json::json!({
        "run_config": {
            "checkpoint": args.checkpoint.display().to_string(),
            "iteration": loaded.iteration,
            "variant": loaded.model.cfg.variant.name(),
            "split": args.split,
            "decoding": dec,
        }
    });
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    let mut written = 0usize;
    for records in &batches {
        for record in records {
            serde_json::to_writer(&mut w, record)?;
            writeln!(w)?;
            written += 1;
        }
    }
    w.flush()?;
    println!(
        "decoded {} instances with {} ({} records) to {}",
        instances.len(),
        dec.strategy.name(),
        written,
        out_path.display()
    );
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("{:<28}{}", "variant", report.variant);
    println!("{:<28}{}", "instances", report.n_instances);
    println!("{:<28}{:.2}", "BLEU (zero noise)", report.bleu_zeroed);
    println!("{:<28}{:.2}", "BLEU (ground-truth guided)", report.bleu_guided);
    println!(
        "{:<28}{:.3}   stochastic beam {:.3}",
        "Distinct-1 (sampled)", report.distinct1, report.baseline_distinct1
    );
    println!(
        "{:<28}{:.3}   stochastic beam {:.3}",
        "Distinct-2 (sampled)", report.distinct2, report.baseline_distinct2
    );
    println!(
        "{:<28}{:.2}%",
        "semantic failure rate",
        100.0 * report.semantic_failure_rate
    );
}

fn evaluate_generations(cfg: &CliConfig, args: &EvaluateArgs, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut by_instance: BTreeMap<String, Vec<Vec<MetricToken>>> = BTreeMap::new();
    let mut total = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("run_config").is_some() {
            continue;
        }
        let record: GenerationRecord = serde_json::from_value(value)?;
        let stream = record
            .surface
            .split_whitespace()
            .map(|w| MetricToken::Word(w.to_string()))
            .collect();
        by_instance.entry(record.instance_id).or_default().push(stream);
        total += 1;
    }
    if by_instance.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no generation records",
            path.display()
        )));
    }
    let instances: Vec<Vec<Vec<MetricToken>>> = by_instance.into_values().collect();
    let report = diversity_report(&instances);
    println!("{:<28}{}", "instances", instances.len());
    println!("{:<28}{}", "generations", total);
    println!("{:<28}{:.3}", "Distinct-1", report.distinct1);
    println!("{:<28}{:.3}", "Distinct-2", report.distinct2);

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("generations");
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.reports_dir().join(format!("eval_{stem}.json")));
    let value = serde_json::json!({
        "distinct1": report.distinct1,
        "distinct2": report.distinct2,
        "n_instances": instances.len(),
        "n_generations": total,
        "config": {"generations": path.display().to_string()},
    });
    write_json_pretty(&out_path, &value)?;
    println!("report written to {}", out_path.display());
    Ok(())
}

pub fn evaluate(cfg: &CliConfig, args: &EvaluateArgs) -> Result<()> {
    if let Some(path) = &args.generations {
        return evaluate_generations(cfg, args, path);
    }
    let ckpt = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("either --checkpoint or --generations is required"))?;
    let loaded = load_checkpoint_at(ckpt)?;
    let corpus_dir = args.corpus.clone().unwrap_or_else(|| cfg.paths.prepared_dir());
    let (_, splits) = load_prepared(&corpus_dir)?;
    let sets: Vec<ParaphraseSet> = splits
        .eval_sets(&args.split)?
        .into_iter()
        .cloned()
        .collect();

    let mut dec = cfg.run.decoding.clone();
    apply_overrides(
        &mut dec,
        &DecodingOverrides {
            strategy: None,
            n: args.n,
            beam: args.beam,
            groups: args.groups,
            gamma: args.gamma,
            alpha: args.alpha,
            delta: args.delta,
            seed: args.seed,
            zero_noise: false,
        },
    )?;
    let report = evaluate_model(&loaded.store, &loaded.model, &sets, &dec, args.max_instances)?;
    print_report(&report);

    let out_path = args.out.clone().unwrap_or_else(|| {
        cfg.paths
            .reports_dir()
            .join(format!("eval_{}_{}.json", report.variant, args.split))
    });
    let mut value = serde_json::to_value(&report)?;
    value["config"] = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "iteration": loaded.iteration,
        "split": args.split,
        "decoding": dec,
        "max_instances": args.max_instances,
    });
    write_json_pretty(&out_path, &value)?;
    println!("report written to {}", out_path.display());
    Ok(())
}
