//! The evolutionary search loop.
//!
//! Epoch `e` (1-based) derives its own RNG stream from `(seed, e)`, so a run
//! resumed from the epoch-`k` checkpoint replays epochs `k+1..` exactly as an
//! uninterrupted run would: epoch 1 scores the seed pool, and every later
//! epoch first evolves the previous scored pool (elites + softmax-sampled
//! parents → crossover → polish), then scores and probes the result.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::context::AdversarialPromptContext;
use super::crossover::crossover;
use super::{
    CandidateScore, EpochTrace, ForgeError, Lineage, SearchConfig, SearchOutcome, TriggerCandidate,
};
use crate::agents::{recommend, AgentSettings, TemplateSet, VictimError, VictimFlavor};
use crate::gateway::{ChatExchange, GatewayError, LlmBackend};
use crate::textutil;

/// Asks the auxiliary model for `pool_size` distinct seed descriptions of
/// the target. Duplicates are retried with fresh variation indices; an
/// auxiliary that cannot produce enough distinct texts is an error rather
/// than a degenerate pool.
pub fn init_candidates(
    target_title: &str,
    cfg: &SearchConfig,
    auxiliary: &dyn LlmBackend,
    templates: &TemplateSet,
) -> Result<Vec<TriggerCandidate>, ForgeError> {
    cfg.validate()?;
    let limit = cfg.length_limit_words.to_string();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.pool_size);
    let mut index = 0usize;
    while out.len() < cfg.pool_size {
        if index > cfg.pool_size * 10 {
            return Err(ForgeError::InvalidConfig(format!(
                "auxiliary model produced only {} distinct seeds after {index} attempts",
                out.len()
            )));
        }
        let prompt = templates.render(
            "trigger_seed",
            &[
                ("target_item_title", target_title),
                ("length_limit", limit.as_str()),
                ("index", index.to_string().as_str()),
            ],
        )?;
        index += 1;
        let text = auxiliary.generate(&ChatExchange::system(prompt))?;
        let text = textutil::truncate_at_sentence(&text, cfg.length_limit_words);
        if text.is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        out.push(TriggerCandidate {
            id: out.len() as u64,
            text,
            score: CandidateScore::Pending,
            epoch_created: 1,
            lineage: Lineage::Seed,
            parent_ids: Vec::new(),
        });
    }
    Ok(out)
}

/// Scores one trigger: negated teacher-forced NLL of the target output given
/// the rendered context. A context-overflowing candidate is disqualified
/// (reported, sampled with probability zero) instead of killing the epoch.
pub fn score_candidate(
    ctx: &AdversarialPromptContext,
    trigger: &str,
    surrogate: &dyn LlmBackend,
    target_output: &str,
) -> Result<CandidateScore, ForgeError> {
    let prompt = ctx.render(trigger);
    match surrogate.score_sequence(&prompt, target_output) {
        Ok(scored) => Ok(CandidateScore::Value(scored.score())),
        Err(GatewayError::ContextOverflow { tokens, budget }) => {
            log::warn!("candidate disqualified: {tokens} tokens over budget {budget}");
            Ok(CandidateScore::Disqualified)
        }
        Err(other) => Err(other.into()),
    }
}

/// Scores every pending candidate (concurrently; assignment back into the
/// pool is by index, so the result does not depend on scheduling).
fn score_pool(
    pool: &mut [TriggerCandidate],
    ctx: &AdversarialPromptContext,
    surrogate: &dyn LlmBackend,
    target_output: &str,
) -> Result<(), ForgeError> {
    let scored: Vec<(usize, Result<CandidateScore, ForgeError>)> = pool
        .par_iter()
        .enumerate()
        .filter(|(_, c)| matches!(c.score, CandidateScore::Pending))
        .map(|(i, c)| (i, score_candidate(ctx, &c.text, surrogate, target_output)))
        .collect();
    for (i, result) in scored {
        pool[i].score = result?;
    }
    Ok(())
}

fn ordering_value(score: CandidateScore) -> Result<f64, ForgeError> {
    match score {
        CandidateScore::Value(v) => Ok(v),
        CandidateScore::Disqualified => Ok(f64::NEG_INFINITY),
        CandidateScore::Pending => Err(ForgeError::UnscoredCandidate(0)),
    }
}

/// Indices of the `n` best-scoring candidates, ties resolved toward the
/// lower index. Requires a fully scored pool.
pub fn select_elites(pool: &[TriggerCandidate], n: usize) -> Result<Vec<usize>, ForgeError> {
    for candidate in pool {
        if matches!(candidate.score, CandidateScore::Pending) {
            return Err(ForgeError::UnscoredCandidate(candidate.id));
        }
    }
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.sort_by(|&a, &b| {
        let va = ordering_value(pool[a].score).expect("checked above");
        let vb = ordering_value(pool[b].score).expect("checked above");
        vb.partial_cmp(&va).expect("no NaN scores").then(a.cmp(&b))
    });
    indices.truncate(n);
    Ok(indices)
}

/// Softmax selection probabilities over the pool: `exp(sᵢ − max)` for finite
/// scores, exactly zero for disqualified ones.
pub fn softmax_probs(pool: &[TriggerCandidate]) -> Result<Vec<f64>, ForgeError> {
    let mut max_finite = f64::NEG_INFINITY;
    for candidate in pool {
        match candidate.score {
            CandidateScore::Pending => return Err(ForgeError::UnscoredCandidate(candidate.id)),
            CandidateScore::Value(v) => max_finite = max_finite.max(v),
            CandidateScore::Disqualified => {}
        }
    }
    if max_finite == f64::NEG_INFINITY {
        return Err(ForgeError::PoolExhausted);
    }
    let weights: Vec<f64> = pool
        .iter()
        .map(|c| match c.score {
            CandidateScore::Value(v) => (v - max_finite).exp(),
            _ => 0.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws `count` distinct candidate indices with softmax weights, without
/// replacement. Disqualified candidates can never be drawn; asking for more
/// draws than there are viable candidates is an error.
pub fn softmax_sample(
    pool: &[TriggerCandidate],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, ForgeError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if count > pool.len() {
        return Err(ForgeError::InvalidConfig(format!(
            "cannot draw {count} parents from a pool of {}",
            pool.len()
        )));
    }
    let probs = softmax_probs(pool)?;
    let mut weights = probs;
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(ForgeError::PoolExhausted);
        }
        let roll = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (idx, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            if roll < acc {
                chosen = Some(idx);
                break;
            }
        }
        // Guard against accumulated floating-point shortfall on the last
        // positive weight.
        let idx = chosen.unwrap_or_else(|| {
            weights.iter().rposition(|&w| w > 0.0).expect("total was positive")
        });
        picked.push(idx);
        weights[idx] = 0.0;
    }
    Ok(picked)
}

/// Polishes a recombined text with the auxiliary model and enforces the word
/// budget locally — the budget is never trusted to the model. A transport
/// failure falls back to truncating the unpolished text, so one flaky call
/// cannot kill an epoch.
pub fn polish(
    text: &str,
    auxiliary: &dyn LlmBackend,
    templates: &TemplateSet,
    length_limit_words: usize,
) -> Result<String, ForgeError> {
    let limit = length_limit_words.to_string();
    let prompt = templates
        .render("trigger_polish", &[("length_limit", limit.as_str()), ("payload", text)])?;
    match auxiliary.generate(&ChatExchange::system(prompt)) {
        Ok(out) => {
            let trimmed = out.trim();
            let base = if trimmed.is_empty() { text } else { trimmed };
            Ok(textutil::truncate_at_sentence(base, length_limit_words))
        }
        Err(GatewayError::Transport(err)) => {
            log::warn!("polish fell back to truncation after transport failure: {err}");
            Ok(textutil::truncate_at_sentence(text, length_limit_words))
        }
        Err(other) => Err(other.into()),
    }
}

/// Whether `trigger` puts the target at rank 1 on every probe context. A
/// probe whose ranking cannot be parsed counts as a miss, not an error.
fn probes_rank_first(
    trigger: &str,
    probes: &[AdversarialPromptContext],
    surrogate: &dyn LlmBackend,
    templates: &TemplateSet,
    settings: &AgentSettings,
) -> Result<bool, ForgeError> {
    for probe in probes {
        let request = probe.ranking_request(trigger);
        let target_index = request.candidates.len() - 1;
        match recommend(VictimFlavor::Cf, &request, surrogate, templates, settings) {
            Ok(ranked) => {
                if ranked.rank_of_index(target_index) != Some(1) {
                    return Ok(false);
                }
            }
            Err(VictimError::ParseFailure { reason }) => {
                log::debug!("probe ranking unparseable: {reason}");
                return Ok(false);
            }
            Err(other) => return Err(other.into()),
        }
    }
    Ok(true)
}

const CHECKPOINT_SCHEMA: u32 = 1;

/// On-disk state after an epoch: the scored pool plus everything needed to
/// evolve into the next epoch.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    fingerprint: String,
    epoch: usize,
    streak: usize,
    next_id: u64,
    converged: bool,
    pool: Vec<TriggerCandidate>,
    trace: Vec<EpochTrace>,
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.json"))
}

fn write_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<(), ForgeError> {
    let io = |source: std::io::Error, path: &Path| ForgeError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let path = checkpoint_path(dir, checkpoint.epoch);
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(checkpoint).expect("checkpoint serialises");
    std::fs::write(&tmp, body).map_err(|e| io(e, &tmp))?;
    std::fs::rename(&tmp, &path).map_err(|e| io(e, &path))?;
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Result<Option<Checkpoint>, ForgeError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).map_err(|e| ForgeError::CheckpointIo {
        path: dir.display().to_string(),
        source: e,
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| ForgeError::CheckpointIo {
            path: dir.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(number) = name.strip_prefix("epoch_").and_then(|n| n.strip_suffix(".json")) else {
            continue;
        };
        let Ok(epoch) = number.parse::<usize>() else { continue };
        if best.as_ref().map_or(true, |(e, _)| epoch > *e) {
            best = Some((epoch, entry.path()));
        }
    }
    let Some((_, path)) = best else { return Ok(None) };
    let text = std::fs::read_to_string(&path).map_err(|e| ForgeError::CheckpointIo {
        path: path.display().to_string(),
        source: e,
    })?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| ForgeError::BadCheckpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if checkpoint.schema_version != CHECKPOINT_SCHEMA {
        return Err(ForgeError::BadCheckpoint {
            path: path.display().to_string(),
            reason: format!(
                "schema {} (this build reads {CHECKPOINT_SCHEMA})",
                checkpoint.schema_version
            ),
        });
    }
    Ok(Some(checkpoint))
}

fn winner_index(pool: &[TriggerCandidate]) -> Result<usize, ForgeError> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, candidate) in pool.iter().enumerate() {
        match candidate.score {
            CandidateScore::Pending => return Err(ForgeError::UnscoredCandidate(candidate.id)),
            CandidateScore::Value(v) => {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((idx, v));
                }
            }
            CandidateScore::Disqualified => {}
        }
    }
    best.map(|(idx, _)| idx).ok_or(ForgeError::PoolExhausted)
}

/// Evolves a scored pool into the next epoch's pool: elites carried (and
/// rescored next epoch), the remaining slots filled by polished crossover
/// children of softmax-sampled parents. An odd final parent is polished solo.
fn evolve_pool(
    scored: &[TriggerCandidate],
    cfg: &SearchConfig,
    epoch: usize,
    rng: &mut impl Rng,
    auxiliary: &dyn LlmBackend,
    templates: &TemplateSet,
    next_id: &mut u64,
) -> Result<Vec<TriggerCandidate>, ForgeError> {
    let elite_indices = select_elites(scored, cfg.elite_count)?;
    let parent_indices = softmax_sample(scored, cfg.pool_size - cfg.elite_count, rng)?;
    let mut next = Vec::with_capacity(cfg.pool_size);
    for &idx in &elite_indices {
        let mut elite = scored[idx].clone();
        elite.lineage = Lineage::Elite;
        elite.score = CandidateScore::Pending;
        next.push(elite);
    }
    let mut children: Vec<(String, Vec<u64>)> = Vec::new();
    for pair in parent_indices.chunks(2) {
        if let [a, b] = *pair {
            let (one, two) = crossover(&scored[a].text, &scored[b].text, rng);
            let parents = vec![scored[a].id, scored[b].id];
            children.push((one, parents.clone()));
            children.push((two, parents));
        } else {
            children.push((scored[pair[0]].text.clone(), vec![scored[pair[0]].id]));
        }
    }
    for (text, parent_ids) in children {
        let polished = polish(&text, auxiliary, templates, cfg.length_limit_words)?;
        next.push(TriggerCandidate {
            id: *next_id,
            text: polished,
            score: CandidateScore::Pending,
            epoch_created: epoch,
            lineage: Lineage::CrossoverPolish,
            parent_ids,
        });
        *next_id += 1;
    }
    debug_assert_eq!(next.len(), cfg.pool_size);
    Ok(next)
}

/// Runs the full search. `probes` are the contexts used for the convergence
/// check (typically the scoring context plus paraphrased-user variants).
/// With a checkpoint directory the search resumes from the newest epoch file
/// when one exists and checkpoints every epoch it completes.
pub fn run_search(
    ctx: &AdversarialPromptContext,
    probes: &[AdversarialPromptContext],
    cfg: &SearchConfig,
    surrogate: &dyn LlmBackend,
    auxiliary: &dyn LlmBackend,
    templates: &TemplateSet,
    checkpoint_dir: Option<&Path>,
) -> Result<SearchOutcome, ForgeError> {
    cfg.validate()?;
    if probes.is_empty() {
        return Err(ForgeError::InvalidConfig("at least one probe context is required".into()));
    }
    let settings = AgentSettings {
        candidate_count: ctx.popular.len() + 1,
        ..AgentSettings::default()
    };
    let fingerprint = cfg.fingerprint();

    let mut previous_pool: Option<Vec<TriggerCandidate>> = None;
    let mut start_epoch = 1usize;
    let mut streak = 0usize;
    let mut next_id;
    let mut trace: Vec<EpochTrace> = Vec::new();

    let restored = match checkpoint_dir {
        Some(dir) => latest_checkpoint(dir)?,
        None => None,
    };
    match restored {
        Some(checkpoint) => {
            if checkpoint.fingerprint != fingerprint {
                return Err(ForgeError::ResumeMismatch(
                    "search parameters differ from the checkpointed run".into(),
                ));
            }
            if checkpoint.converged || checkpoint.epoch >= cfg.epochs {
                let winner = checkpoint.pool[winner_index(&checkpoint.pool)?].clone();
                log::info!("search already terminal at epoch {}", checkpoint.epoch);
                return Ok(SearchOutcome {
                    winner,
                    epochs_run: checkpoint.epoch,
                    converged: checkpoint.converged,
                    trace: checkpoint.trace,
                });
            }
            start_epoch = checkpoint.epoch + 1;
            streak = checkpoint.streak;
            next_id = checkpoint.next_id;
            trace = checkpoint.trace;
            previous_pool = Some(checkpoint.pool);
            log::info!("resuming search at epoch {start_epoch}");
        }
        None => {
            next_id = 0; // assigned after seeding below
        }
    }

    for epoch in start_epoch..=cfg.epochs {
        let mut rng =
            ChaCha20Rng::seed_from_u64(textutil::derive_seed(cfg.rng_seed, &format!("epoch:{epoch}")));
        let mut pool = match previous_pool.take() {
            None => {
                let seeds = init_candidates(&ctx.target_title, cfg, auxiliary, templates)?;
                next_id = seeds.len() as u64;
                seeds
            }
            Some(scored) => {
                evolve_pool(&scored, cfg, epoch, &mut rng, auxiliary, templates, &mut next_id)?
            }
        };
        score_pool(&mut pool, ctx, surrogate, &cfg.target_output)?;

        let finite: Vec<f64> = pool.iter().filter_map(|c| c.score.as_finite()).collect();
        let disqualified = pool.len() - finite.len();
        let best_idx = winner_index(&pool)?;
        let probes_ok =
            probes_rank_first(&pool[best_idx].text, probes, surrogate, templates, &settings)?;
        streak = if probes_ok { streak + 1 } else { 0 };
        let converged = streak >= cfg.convergence_patience;
        trace.push(EpochTrace {
            epoch,
            best_score: pool[best_idx].score.as_finite(),
            mean_score: if finite.is_empty() {
                None
            } else {
                Some(finite.iter().sum::<f64>() / finite.len() as f64)
            },
            disqualified,
            probes_rank1: probes_ok,
            streak,
        });
        log::debug!(
            "epoch {epoch}: best {:?}, probes rank-1 {probes_ok}, streak {streak}",
            pool[best_idx].score
        );

        if let Some(dir) = checkpoint_dir {
            write_checkpoint(
                dir,
                &Checkpoint {
                    schema_version: CHECKPOINT_SCHEMA,
                    fingerprint: fingerprint.clone(),
                    epoch,
                    streak,
                    next_id,
                    converged,
                    pool: pool.clone(),
                    trace: trace.clone(),
                },
            )?;
        }

        if converged || epoch == cfg.epochs {
            let winner = pool[best_idx].clone();
            return Ok(SearchOutcome { winner, epochs_run: epoch, converged, trace });
        }
        previous_pool = Some(pool);
    }
    unreachable!("the loop always returns on its terminal epoch")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidate(id: u64, score: CandidateScore) -> TriggerCandidate {
        TriggerCandidate {
            id,
            text: format!("candidate {id}."),
            score,
            epoch_created: 1,
            lineage: Lineage::Seed,
            parent_ids: Vec::new(),
        }
    }

    #[test]
    fn elites_rank_by_score_with_index_ties() {
        let pool = vec![
            candidate(0, CandidateScore::Value(-2.0)),
            candidate(1, CandidateScore::Value(-1.0)),
            candidate(2, CandidateScore::Value(-1.0)),
            candidate(3, CandidateScore::Disqualified),
        ];
        assert_eq!(select_elites(&pool, 3).unwrap(), vec![1, 2, 0]);
        let mut with_pending = pool;
        with_pending[0].score = CandidateScore::Pending;
        assert!(matches!(
            select_elites(&with_pending, 2),
            Err(ForgeError::UnscoredCandidate(0))
        ));
    }

    #[test]
    fn softmax_probabilities_match_the_closed_form() {
        // Scores 0 and ln 3 → probabilities 1/4 and 3/4.
        let pool = vec![
            candidate(0, CandidateScore::Value(0.0)),
            candidate(1, CandidateScore::Value(3.0_f64.ln())),
        ];
        let probs = softmax_probs(&pool).unwrap();
        assert!((probs[0] - 0.25).abs() < 1e-12);
        assert!((probs[1] - 0.75).abs() < 1e-12);
        // Equal scores → uniform.
        let pool = vec![
            candidate(0, CandidateScore::Value(-1.5)),
            candidate(1, CandidateScore::Value(-1.5)),
        ];
        let probs = softmax_probs(&pool).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disqualified_candidates_are_never_sampled() {
        let pool = vec![
            candidate(0, CandidateScore::Value(0.0)),
            candidate(1, CandidateScore::Disqualified),
            candidate(2, CandidateScore::Value(1.0)),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let picked = softmax_sample(&pool, 2, &mut rng).unwrap();
            assert!(!picked.contains(&1));
            assert_eq!(picked.len(), 2);
            assert_ne!(picked[0], picked[1], "sampling is without replacement");
        }
        // Two draws wanted, one viable candidate: the pool is exhausted.
        let starved = vec![
            candidate(0, CandidateScore::Value(0.0)),
            candidate(1, CandidateScore::Disqualified),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!(matches!(
            softmax_sample(&starved, 2, &mut rng),
            Err(ForgeError::PoolExhausted)
        ));
    }

    #[test]
    fn all_disqualified_pool_is_reported() {
        let pool = vec![candidate(0, CandidateScore::Disqualified)];
        assert!(matches!(softmax_probs(&pool), Err(ForgeError::PoolExhausted)));
        assert!(matches!(winner_index(&pool), Err(ForgeError::PoolExhausted)));
    }

    #[test]
    fn winner_prefers_the_lowest_index_on_ties() {
        let pool = vec![
            candidate(0, CandidateScore::Value(1.0)),
            candidate(1, CandidateScore::Value(1.0)),
        ];
        assert_eq!(winner_index(&pool).unwrap(), 0);
    }
}
