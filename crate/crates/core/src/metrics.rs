//! Distinct-n diversity and slot-aware corpus BLEU.
//!
//! Both metrics run over [`MetricToken`] streams in which a slot is one
//! symbolic token identified by its type and type position — the value it
//! carries is deliberately invisible, so "the phone number is <phone>" scores
//! the same no matter which number fills the slot.

use crate::config::{DecodingConfig, Strategy};
use crate::corpus::{AnnotatedResponse, CorpusRecord, ParaphraseSet, SlotFill, Token, EOS_TOKEN};
use crate::decoder::{GenerationSettings, SelectionMode};
use crate::error::{Error, Result};
use crate::inference::{generate_diverse, stochastic_beam_search};
use crate::model::{NoiseSource, P2Net};
use crate::tape::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// A token as the metrics see it: words by surface form, slots by identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricToken {
    Word(String),
    Slot(String, usize),
}

/// Convert a token sequence for scoring: slots become (type, position)
/// symbols and a trailing end-of-sequence marker is dropped (both sides of
/// every comparison carry one, so it would only inflate match counts).
pub fn metric_tokens(tokens: &[Token], slots: &[SlotFill]) -> Result<Vec<MetricToken>> {
    let mut out = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        match t {
            Token::Word(w) => {
                if w == EOS_TOKEN && i + 1 == tokens.len() {
                    break;
                }
                out.push(MetricToken::Word(w.clone()));
            }
            Token::Slot { slot } => {
                let fill = slots.get(*slot).ok_or_else(|| {
                    Error::invalid(format!("token references slot {slot}, but only {} exist", slots.len()))
                })?;
                out.push(MetricToken::Slot(fill.slot_type.clone(), fill.type_position));
            }
        }
    }
    Ok(out)
}

/// Scoring stream of a corpus response.
pub fn response_metric_tokens(r: &AnnotatedResponse) -> Result<Vec<MetricToken>> {
    metric_tokens(&r.tokens, &r.slots)
}

/// Distinct-n over one instance's N samples: the number of unique n-grams
/// across all samples divided by the total n-gram count. Samples shorter
/// than n contribute nothing; if every sample is too short the score is 0.
pub fn distinct_n(samples: &[Vec<MetricToken>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut union: HashSet<&[MetricToken]> = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        total += s.len().saturating_sub(n - 1);
        for w in s.windows(n) {
            union.insert(w);
        }
    }
    if total == 0 {
        0.0
    } else {
        union.len() as f64 / total as f64
    }
}

/// Distinct-1 and Distinct-2 macro-averaged over instances, with the
/// per-instance values kept for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub distinct1: f64,
    pub distinct2: f64,
    pub per_instance: Vec<[f64; 2]>,
}

pub fn diversity_report(instances: &[Vec<Vec<MetricToken>>]) -> DiversityReport {
    let per_instance: Vec<[f64; 2]> = instances
        .iter()
        .map(|samples| [distinct_n(samples, 1), distinct_n(samples, 2)])
        .collect();
    let n = per_instance.len().max(1) as f64;
    DiversityReport {
        distinct1: per_instance.iter().map(|d| d[0]).sum::<f64>() / n,
        distinct2: per_instance.iter().map(|d| d[1]).sum::<f64>() / n,
        per_instance,
    }
}

const BLEU_MAX_ORDER: usize = 4;
const BLEU_SMOOTH_EPS: f64 = 0.1;

fn ngram_counts(tokens: &[MetricToken], n: usize) -> HashMap<&[MetricToken], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level 4-gram BLEU (percentage) with brevity penalty. Zero-match
/// orders are smoothed by substituting an ε numerator; a corpus with no
/// unigram matches at all scores exactly 0. Per-pair n-gram denominators are
/// floored at 1, so hypotheses shorter than an order still contribute — both
/// conventions follow the widely used reference implementation this module
/// is validated against.
pub fn corpus_bleu(pairs: &[(Vec<MetricToken>, Vec<Vec<MetricToken>>)]) -> f64 {
    let mut numerators = [0usize; BLEU_MAX_ORDER];
    let mut denominators = [0usize; BLEU_MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, refs) in pairs {
        hyp_len += hyp.len();
        // Reference length closest to the hypothesis; ties go to the shorter.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=BLEU_MAX_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[MetricToken], usize> = HashMap::new();
            for r in refs {
                for (gram, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (gram, c) in &hyp_counts {
                let clip = max_ref.get(gram).copied().unwrap_or(0);
                numerators[n - 1] += (*c).min(clip);
            }
            denominators[n - 1] += hyp.len().saturating_sub(n - 1).max(1);
        }
    }

    if hyp_len == 0 || numerators[0] == 0 {
        return 0.0;
    }
    let mut log_precision_sum = 0.0;
    for n in 0..BLEU_MAX_ORDER {
        let p = if numerators[n] == 0 {
            BLEU_SMOOTH_EPS / denominators[n] as f64
        } else {
            numerators[n] as f64 / denominators[n] as f64
        };
        log_precision_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_precision_sum / BLEU_MAX_ORDER as f64).exp() * 100.0
}

/// Full evaluation summary for one checkpoint, ready for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub bleu_zeroed: f64,
    pub bleu_guided: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub baseline_distinct1: f64,
    pub baseline_distinct2: f64,
    pub semantic_failure_rate: f64,
    pub n_instances: usize,
}

/// Evaluate a model over paraphrase sets. Each member is an instance: its
/// in-set successor provides the template, its own ground truth the single
/// reference.
///
/// - BLEU is computed twice from greedy decodes: with the noise vector
///   zeroed and with it encoded from the ground truth (the guided protocol).
/// - Distinct-1/2 come from `n_samples` prototype-weight-sampled decodes per
///   instance, macro-averaged; `baseline_distinct*` repeat the measurement
///   on a stochastic beam of `beam_width` over the same instances.
/// - `semantic_failure_rate` is the fraction of the sampled generations that
///   left a slot unplaced or hit the length cap without a natural close.
///
/// Sets with fewer than two members cannot form pairs and are skipped;
/// `max_instances` caps the evaluation for quick validation passes.
pub fn evaluate_model(
    store: &ParamStore,
    model: &P2Net,
    test: &[ParaphraseSet],
    cfg: &DecodingConfig,
    max_instances: Option<usize>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let cap = max_instances.unwrap_or(usize::MAX);
    let settings = GenerationSettings {
        delta: cfg.delta,
        max_len: cfg.max_len,
        mode: SelectionMode::Greedy,
    };
    // Greedy decoding never consults the RNG.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut zeroed_pairs = Vec::new();
    let mut guided_pairs = Vec::new();
    let mut sampled_instances: Vec<Vec<Vec<MetricToken>>> = Vec::new();
    let mut baseline_instances: Vec<Vec<Vec<MetricToken>>> = Vec::new();
    let mut failures = 0usize;
    let mut generations = 0usize;
    'sets: for set in test {
        if set.members.len() < 2 {
            continue;
        }
        for (j, gt) in set.members.iter().enumerate() {
            if zeroed_pairs.len() >= cap {
                break 'sets;
            }
            let template = &set.members[(j + 1) % set.members.len()];
            let refs = vec![response_metric_tokens(&gt.response)?];

            let mut tape = Tape::new(store);
            let gen = model.generate_one(
                &mut tape,
                &template.response,
                &gt.context,
                NoiseSource::Zero,
                &settings,
                &mut rng,
            )?;
            let hyp = metric_tokens(&gen.tokens, &template.response.slots)?;
            zeroed_pairs.push((hyp, refs.clone()));

            let mut tape = Tape::new(store);
            let gen = model.generate_one(
                &mut tape,
                &template.response,
                &gt.context,
                NoiseSource::GroundTruth(&gt.response),
                &settings,
                &mut rng,
            )?;
            let hyp = metric_tokens(&gen.tokens, &template.response.slots)?;
            guided_pairs.push((hyp, refs));

            // The diversity protocols decode the template against the
            // instance's context; each instance gets its own seed stream.
            let instance = CorpusRecord {
                context: gt.context.clone(),
                response: template.response.clone(),
            };
            let index = zeroed_pairs.len() as u64;
            let mut sample_cfg = cfg.clone();
            sample_cfg.strategy = Strategy::SampleProtos;
            sample_cfg.seed = cfg.seed.wrapping_add(index);
            let batch = generate_diverse(store, model, &instance, &sample_cfg)?;
            let mut streams = Vec::with_capacity(batch.samples.len());
            for s in &batch.samples {
                generations += 1;
                if s.semantic_failure || s.response.tokens.len() > cfg.max_len {
                    failures += 1;
                }
                streams.push(response_metric_tokens(&s.response)?);
            }
            sampled_instances.push(streams);

            let mut beam_cfg = cfg.clone();
            beam_cfg.strategy = Strategy::StochasticBeam;
            beam_cfg.seed = cfg.seed.wrapping_add(index);
            let hyps = stochastic_beam_search(store, model, &instance, &beam_cfg)?;
            let streams = hyps
                .iter()
                .map(|h| metric_tokens(&h.tokens, &template.response.slots))
                .collect::<Result<Vec<_>>>()?;
            baseline_instances.push(streams);
        }
    }
    if zeroed_pairs.is_empty() {
        return Err(Error::invalid(
            "evaluation needs at least one set with two members",
        ));
    }
    let diversity = diversity_report(&sampled_instances);
    let baseline = diversity_report(&baseline_instances);
    Ok(EvalReport {
        variant: model.cfg.variant.name().to_string(),
        bleu_zeroed: corpus_bleu(&zeroed_pairs),
        bleu_guided: corpus_bleu(&guided_pairs),
        distinct1: diversity.distinct1,
        distinct2: diversity.distinct2,
        baseline_distinct1: baseline.distinct1,
        baseline_distinct2: baseline.distinct2,
        semantic_failure_rate: failures as f64 / generations.max(1) as f64,
        n_instances: zeroed_pairs.len(),
    })
}
