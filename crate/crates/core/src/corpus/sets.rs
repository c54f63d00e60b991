//! Paraphrase-set grouping, split carving, and balanced instance sampling.

use super::{CorpusRecord, CorpusSplits, ParaphraseSet, SetKey};
use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::collections::{BTreeMap, HashMap};

/// Group records by (dialogue_action, slot signature). Every record lands in
/// exactly one set; no size filtering happens here (the split carver applies
/// the training minimum).
pub fn build_paraphrase_sets(records: Vec<CorpusRecord>) -> Vec<ParaphraseSet> {
    let mut groups: BTreeMap<SetKey, Vec<CorpusRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry(record.response.set_key())
            .or_default()
            .push(record);
    }
    groups
        .into_iter()
        .map(|(key, members)| ParaphraseSet { key, members })
        .collect()
}

/// Pre-normalization sampling weight of a set: sqrt of its size, capped.
pub fn sampling_weight(set_size: usize, cap: f64) -> f64 {
    (set_size as f64).sqrt().min(cap)
}

/// Normalized per-set sampling distribution over the training pool.
#[derive(Debug, Clone)]
pub struct SamplingSchedule {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplingSchedule {
    pub fn new(sets: &[ParaphraseSet], cap: f64) -> Result<SamplingSchedule> {
        if sets.is_empty() {
            return Err(Error::invalid("cannot build a schedule over zero sets"));
        }
        let raw: Vec<f64> = sets.iter().map(|s| sampling_weight(s.len(), cap)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(SamplingSchedule { weights, cumulative })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draw a set index from the schedule.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) | Err(i) => i.min(self.cumulative.len() - 1),
        }
    }
}

/// One training draw: a ground-truth response and a sibling paraphrase
/// standing in as the template. Slots and context always come from the
/// ground truth side.
#[derive(Debug, Clone, Copy)]
pub struct TrainingInstance<'a> {
    pub set_index: usize,
    pub template: &'a CorpusRecord,
    pub ground_truth: &'a CorpusRecord,
}

/// Draw (set, ground truth, template≠ground truth). Sets with fewer than two
/// members are resampled; if that keeps failing the pool is unusable.
pub fn sample_training_instance<'a>(
    sets: &'a [ParaphraseSet],
    schedule: &SamplingSchedule,
    rng: &mut impl Rng,
) -> Result<TrainingInstance<'a>> {
    for _ in 0..1000 {
        let set_index = schedule.sample(rng);
        let set = &sets[set_index];
        if set.len() < 2 {
            continue;
        }
        let gt = rng.gen_range(0..set.len());
        let mut tpl = rng.gen_range(0..set.len() - 1);
        if tpl >= gt {
            tpl += 1;
        }
        return Ok(TrainingInstance {
            set_index,
            template: &set.members[tpl],
            ground_truth: &set.members[gt],
        });
    }
    Err(Error::invalid(
        "sampling kept hitting sets with <2 members; training pool is unusable",
    ))
}

/// Deterministically carve train / val_seen / val_unseen / test_seen /
/// test_unseen from grouped sets.
///
/// Unseen halves take whole dialogue actions out of the training pool,
/// cheapest removal first: actions are consumed in ascending order of total
/// record count, so the carve trims the corpus's long tail of rare actions
/// instead of gutting a dominant one. Seen halves hold out 5–7 members from
/// large training sets, leaving at least `min_train_members` behind. To
/// keep the (dialogue_id, turn_index) disjointness invariant checkable,
/// only "solo" records — the only record of their original turn — are
/// eligible for evaluation membership; sibling sentences of one turn
/// otherwise end up on both sides of a split.
pub fn build_splits(sets: Vec<ParaphraseSet>, cfg: &CorpusConfig) -> Result<CorpusSplits> {
    let quota = cfg.eval_sets_per_split;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Count records per original turn to find solo records.
    let mut turn_counts: HashMap<(String, usize), usize> = HashMap::new();
    for set in &sets {
        for m in &set.members {
            *turn_counts.entry(m.turn_key()).or_default() += 1;
        }
    }
    let is_solo = |r: &CorpusRecord| turn_counts[&r.turn_key()] == 1;

    // Sets are already key-sorted (BTreeMap grouping); keep an explicit sort
    // so pre-grouped inputs behave identically.
    let mut sets = sets;
    sets.sort_by(|a, b| a.key.cmp(&b.key));

    // ---- Unseen halves: whole actions leave the pool, cheapest first.
    let mut action_cost: BTreeMap<String, usize> = BTreeMap::new();
    for s in &sets {
        *action_cost.entry(s.key.action.clone()).or_default() += s.len();
    }
    let mut costed: Vec<(usize, String)> = action_cost
        .into_iter()
        .map(|(action, cost)| (cost, action))
        .collect();
    costed.sort();
    let actions: Vec<String> = costed.into_iter().map(|(_, a)| a).collect();

    let carve_set = |set: &ParaphraseSet, rng: &mut ChaCha8Rng| -> Option<ParaphraseSet> {
        let mut solo: Vec<usize> = (0..set.len())
            .filter(|&i| is_solo(&set.members[i]))
            .collect();
        if solo.len() < cfg.eval_min_members {
            return None;
        }
        solo.shuffle(rng);
        let take = solo.len().min(cfg.eval_max_members);
        let mut chosen: Vec<usize> = solo[..take].to_vec();
        chosen.sort_unstable();
        Some(ParaphraseSet {
            key: set.key.clone(),
            members: chosen.iter().map(|&i| set.members[i].clone()).collect(),
        })
    };

    let mut val_unseen = Vec::new();
    let mut test_unseen = Vec::new();
    let mut removed_actions: Vec<String> = Vec::new();
    for action in &actions {
        let (target, filled) = if val_unseen.len() < quota {
            (&mut val_unseen, false)
        } else if test_unseen.len() < quota {
            (&mut test_unseen, false)
        } else {
            (&mut test_unseen, true)
        };
        if filled {
            break;
        }
        let carved: Vec<ParaphraseSet> = sets
            .iter()
            .filter(|s| &s.key.action == action)
            .filter_map(|s| carve_set(s, &mut rng))
            .collect();
        if carved.is_empty() {
            continue; // action stays in the training pool
        }
        let room = quota - target.len();
        // Overflow sets are dropped rather than spilled into the other
        // split, so no action appears in both unseen halves.
        target.extend(carved.into_iter().take(room));
        removed_actions.push(action.clone());
    }
    if val_unseen.len() < quota || test_unseen.len() < quota {
        return Err(Error::corpus(format!(
            "not enough unseen-eligible actions: wanted {quota}+{quota} sets, \
             carved {} val / {} test from {} actions",
            val_unseen.len(),
            test_unseen.len(),
            actions.len()
        )));
    }

    let mut pool: Vec<ParaphraseSet> = sets
        .into_iter()
        .filter(|s| !removed_actions.contains(&s.key.action))
        .collect();

    // ---- Seen halves: hold members out of big training sets.
    let mut donor_order: Vec<usize> = (0..pool.len()).collect();
    donor_order.shuffle(&mut rng);
    let mut val_seen = Vec::new();
    let mut test_seen = Vec::new();
    for &si in &donor_order {
        let target = if val_seen.len() < quota {
            &mut val_seen
        } else if test_seen.len() < quota {
            &mut test_seen
        } else {
            break;
        };
        let set = &pool[si];
        if set.len() < cfg.min_train_members + cfg.eval_min_members {
            continue;
        }
        let budget = (set.len() - cfg.min_train_members).min(cfg.eval_max_members);
        let mut solo: Vec<usize> = (0..set.len())
            .filter(|&i| is_solo(&set.members[i]))
            .collect();
        if solo.len() < cfg.eval_min_members {
            continue;
        }
        solo.shuffle(&mut rng);
        let mut chosen: Vec<usize> = solo[..budget.min(solo.len())].to_vec();
        if chosen.len() < cfg.eval_min_members {
            continue;
        }
        chosen.sort_unstable();
        let set = &mut pool[si];
        // Remove from the back so earlier indices stay valid.
        let mut held: Vec<CorpusRecord> = chosen
            .iter()
            .rev()
            .map(|&i| set.members.remove(i))
            .collect();
        held.reverse();
        target.push(ParaphraseSet {
            key: set.key.clone(),
            members: held,
        });
    }
    if val_seen.len() < quota || test_seen.len() < quota {
        return Err(Error::corpus(format!(
            "not enough large training sets for seen evaluation: wanted {quota}+{quota}, \
             carved {} val / {} test from a pool of {}",
            val_seen.len(),
            test_seen.len(),
            pool.len()
        )));
    }

    let train: Vec<ParaphraseSet> = pool
        .into_iter()
        .filter(|s| s.len() >= cfg.min_train_members)
        .collect();
    if train.is_empty() {
        return Err(Error::corpus("no sets left for training after carving"));
    }

    let mut splits = CorpusSplits {
        train,
        val_seen,
        val_unseen,
        test_seen,
        test_unseen,
    };
    // Canonical order: key string, matching the manifest's map order, so a
    // manifest round trip reproduces the structure exactly.
    for split in [
        &mut splits.train,
        &mut splits.val_seen,
        &mut splits.val_unseen,
        &mut splits.test_seen,
        &mut splits.test_unseen,
    ] {
        split.sort_by_key(|s| s.key.to_string());
    }
    check_disjoint(&splits)?;
    Ok(splits)
}

/// Verify no (dialogue_id, turn_index) appears in more than one split.
fn check_disjoint(splits: &CorpusSplits) -> Result<()> {
    let mut owner: HashMap<(String, usize), &'static str> = HashMap::new();
    for (name, sets) in splits.iter_named() {
        for set in sets {
            for m in &set.members {
                match owner.insert(m.turn_key(), name) {
                    Some(prev) if prev != name => {
                        return Err(Error::corpus(format!(
                            "turn {:?} appears in both {prev} and {name}",
                            m.turn_key()
                        )));
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}
