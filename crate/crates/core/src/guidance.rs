//! Best-of-N guidance: candidate (pose, wrench) pairs are drawn from
//! demonstrated experience within a bound of the current state and scored by
//! the quality model against the current image.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::model::{ModelError, QualityModel};
use crate::phantom::{self, mix64, PhantomConfig, PhantomError, ProbeState};
use crate::quat::{quat_distance, Quat};

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("experience is empty after the {0:?} filter")]
    EmptyExperience(SourceFilter),
    #[error("invalid guidance configuration: {0}")]
    Config(String),
    #[error("no feasible candidate among {entries} experience entries; {nearest}")]
    Infeasible { entries: usize, nearest: Diagnostics },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// Nearest experience entry to an infeasible query, by pose distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub entry: usize,
    pub pose_distance: f64,
    /// Largest `|F'_i - F_i| / bound_i` over the six components.
    pub worst_force_ratio: f64,
    pub violations: Vec<String>,
}

impl std::fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "nearest entry {} at {:.3} rad, force ratio {:.2} ({})",
            self.entry,
            self.pose_distance,
            self.worst_force_ratio,
            self.violations.join(", ")
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFilter {
    #[default]
    All,
    PositivesOnly,
}

impl std::str::FromStr for SourceFilter {
    type Err = GuidanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(SourceFilter::All),
            "positives_only" | "positives" => Ok(SourceFilter::PositivesOnly),
            other => Err(GuidanceError::Config(format!("unknown source filter '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Candidates are recorded (pose, wrench) pairs.
    #[default]
    Joint,
    /// Pose and wrench drawn independently from `D_P x D_F`.
    Independent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    entries: Vec<(Quat, [f64; 6])>,
    pub filter: SourceFilter,
    pub pairing: Pairing,
}

impl Experience {
    /// Collects the recorded (pose, wrench) pairs of `dataset`, duplicates kept.
    pub fn harvest(dataset: &Dataset, filter: SourceFilter) -> Result<Self, GuidanceError> {
        let entries: Vec<_> = dataset
            .samples
            .iter()
            .filter(|s| filter == SourceFilter::All || s.label == 1)
            .map(|s| (s.state.pose(), s.state.wrench()))
            .collect();
        Self::from_entries(entries, filter)
    }

    pub fn from_entries(entries: Vec<(Quat, [f64; 6])>, filter: SourceFilter) -> Result<Self, GuidanceError> {
        if entries.is_empty() {
            return Err(GuidanceError::EmptyExperience(filter));
        }
        for (q, w) in &entries {
            // validates unit pose and finite values
            ProbeState::new(*q, *w)?.require_contact()?;
        }
        Ok(Self {
            entries: entries.into_iter().map(|(q, w)| (q.canonical(), w)).collect(),
            filter,
            pairing: Pairing::Joint,
        })
    }

    pub fn with_pairing(mut self, pairing: Pairing) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Quat, [f64; 6])] {
        &self.entries
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub n_samples: usize,
    /// Largest pose change per suggestion (rad), inclusive.
    pub pose_bound: f64,
    /// Largest change per wrench component, `(Fx, Fy, Fz)` in N and `(Tx, Ty, Tz)` in N·mm, inclusive.
    pub force_bound: [f64; 6],
    pub accept_threshold: f64,
    /// Return the first candidate scoring at least `accept_threshold`.
    pub early_exit: bool,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            pose_bound: 0.2,
            force_bound: [2.0, 2.0, 2.0, 20.0, 20.0, 20.0],
            accept_threshold: 0.5,
            early_exit: false,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.n_samples == 0 {
            return Err(GuidanceError::Config("n_samples must be >= 1".into()));
        }
        if !(self.pose_bound.is_finite() && self.pose_bound > 0.0) {
            return Err(GuidanceError::Config(format!(
                "pose bound {} must be > 0",
                self.pose_bound
            )));
        }
        if !self.force_bound.iter().all(|b| b.is_finite() && *b > 0.0) {
            return Err(GuidanceError::Config(format!(
                "force bounds {:?} must be > 0",
                self.force_bound
            )));
        }
        if !(self.accept_threshold > 0.0 && self.accept_threshold <= 1.0) {
            return Err(GuidanceError::Config(format!(
                "accept threshold {} not in (0, 1]",
                self.accept_threshold
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn pose_ok(candidate: Quat, current: Quat, cfg: &GuidanceConfig) -> bool {
    quat_distance(candidate, current).is_ok_and(|d| d <= cfg.pose_bound)
}

fn wrench_ok(candidate: &[f64; 6], current: &[f64; 6], cfg: &GuidanceConfig) -> bool {
    candidate[2] >= 0.0 && (0..6).all(|i| (candidate[i] - current[i]).abs() <= cfg.force_bound[i])
}

/// Closed bounds on pose distance and every wrench component, plus `Fz' >= 0`.
pub fn feasible(candidate: (Quat, [f64; 6]), current: &ProbeState, cfg: &GuidanceConfig) -> bool {
    pose_ok(candidate.0, current.pose(), cfg) && wrench_ok(&candidate.1, &current.wrench(), cfg)
}

/// One sampled candidate: which experience entries it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Candidate {
    pub pose_entry: usize,
    pub wrench_entry: usize,
}

impl Candidate {
    pub fn state(&self, experience: &Experience) -> ProbeState {
        let e = experience.entries();
        ProbeState::new(e[self.pose_entry].0, e[self.wrench_entry].1).expect("experience entries are valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Size of the feasible population draws were made from.
    pub n_feasible: usize,
}

fn nearest(experience: &Experience, current: &ProbeState, cfg: &GuidanceConfig) -> Diagnostics {
    let (entry, pose_distance) = experience
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (q, _))| (i, quat_distance(*q, current.pose()).unwrap_or(f64::INFINITY)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("experience is nonempty");
    let w = experience.entries()[entry].1;
    let cur = current.wrench();
    let worst_force_ratio = (0..6)
        .map(|i| (w[i] - cur[i]).abs() / cfg.force_bound[i])
        .fold(0.0, f64::max);
    let mut violations = Vec::new();
    if pose_distance > cfg.pose_bound {
        violations.push(format!("pose {pose_distance:.3} > {}", cfg.pose_bound));
    }
    const NAMES: [&str; 6] = ["Fx", "Fy", "Fz", "Tx", "Ty", "Tz"];
    for i in 0..6 {
        if (w[i] - cur[i]).abs() > cfg.force_bound[i] {
            violations.push(format!(
                "|d{}| {:.2} > {}",
                NAMES[i],
                (w[i] - cur[i]).abs(),
                cfg.force_bound[i]
            ));
        }
    }
    if w[2] < 0.0 {
        violations.push("Fz < 0".into());
    }
    Diagnostics {
        entry,
        pose_distance,
        worst_force_ratio,
        violations,
    }
}

/// Draws `cfg.n_samples` candidates uniformly, with replacement, from the
/// experience entries feasible for `current`. The stream for a given seed is
/// a prefix of the stream for any larger `n_samples`.
pub fn sample_candidates(
    experience: &Experience,
    current: &ProbeState,
    cfg: &GuidanceConfig,
) -> Result<CandidateSet, GuidanceError> {
    cfg.validate()?;
    let e = experience.entries();
    let cur = current.wrench();
    let infeasible = || GuidanceError::Infeasible {
        entries: e.len(),
        nearest: nearest(experience, current, cfg),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match experience.pairing {
        Pairing::Joint => {
            let pop: Vec<usize> = (0..e.len()).filter(|&i| feasible(e[i], current, cfg)).collect();
            if pop.is_empty() {
                return Err(infeasible());
            }
            let candidates = (0..cfg.n_samples)
                .map(|_| {
                    let i = pop[rng.random_range(0..pop.len())];
                    Candidate {
                        pose_entry: i,
                        wrench_entry: i,
                    }
                })
                .collect();
            Ok(CandidateSet {
                candidates,
                n_feasible: pop.len(),
            })
        }
        Pairing::Independent => {
            let poses: Vec<usize> = (0..e.len()).filter(|&i| pose_ok(e[i].0, current.pose(), cfg)).collect();
            let wrenches: Vec<usize> = (0..e.len()).filter(|&i| wrench_ok(&e[i].1, &cur, cfg)).collect();
            if poses.is_empty() || wrenches.is_empty() {
                return Err(infeasible());
            }
            let candidates = (0..cfg.n_samples)
                .map(|_| Candidate {
                    pose_entry: poses[rng.random_range(0..poses.len())],
                    wrench_entry: wrenches[rng.random_range(0..wrenches.len())],
                })
                .collect();
            Ok(CandidateSet {
                candidates,
                n_feasible: poses.len() * wrenches.len(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSuggestion {
    pub pose: Quat,
    pub wrench: [f64; 6],
    pub q_best: f64,
    /// Position of the winner in the sampled candidate stream.
    pub candidate_index: usize,
    pub n_evaluated: usize,
    pub n_feasible: usize,
    pub elapsed_ms: f64,
}

impl GuidanceSuggestion {
    pub fn state(&self) -> ProbeState {
        ProbeState::new(self.pose, self.wrench).expect("suggestions come from valid entries")
    }
}

/// Scores sampled candidates against the current frame and returns the best
/// one, ties going to the lowest candidate index. With `early_exit`, the
/// first candidate reaching `accept_threshold` wins instead.
pub fn suggest(
    model: &QualityModel,
    experience: &Experience,
    frame: &phantom::UltrasoundFrame,
    current: &ProbeState,
    cfg: &GuidanceConfig,
) -> Result<GuidanceSuggestion, GuidanceError> {
    let start = Instant::now();
    current.require_contact()?;
    let set = sample_candidates(experience, current, cfg)?;

    // score each distinct candidate once, in first-seen order
    let mut slot: HashMap<Candidate, usize> = HashMap::new();
    let mut unique = Vec::new();
    let slots: Vec<usize> = set
        .candidates
        .iter()
        .map(|c| {
            *slot.entry(*c).or_insert_with(|| {
                unique.push(*c);
                unique.len() - 1
            })
        })
        .collect();

    let mut scores: Vec<Option<f32>> = vec![None; unique.len()];
    let mut best: Option<(f32, usize)> = None;
    let mut evaluated = 0;
    const CHUNK: usize = 250;
    for (chunk_no, chunk) in slots.chunks(CHUNK).enumerate() {
        let missing: Vec<usize> = {
            let mut m: Vec<usize> = chunk.iter().copied().filter(|&s| scores[s].is_none()).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let states: Vec<ProbeState> = missing.iter().map(|&s| unique[s].state(experience)).collect();
            for (s, q) in missing.iter().zip(model.score_states(frame, &states)?) {
                scores[*s] = Some(q);
            }
        }
        for (j, &s) in chunk.iter().enumerate() {
            let k = chunk_no * CHUNK + j;
            let q = scores[s].expect("scored above");
            evaluated = k + 1;
            if best.is_none_or(|(bq, _)| q > bq) {
                best = Some((q, k));
            }
            if cfg.early_exit && q as f64 >= cfg.accept_threshold {
                best = Some((q, k));
                break;
            }
        }
        if cfg.early_exit && best.is_some_and(|(q, _)| q as f64 >= cfg.accept_threshold) {
            break;
        }
    }
    let (q, k) = best.expect("n_samples >= 1");
    let state = set.candidates[k].state(experience);
    Ok(GuidanceSuggestion {
        pose: state.pose(),
        wrench: state.wrench(),
        q_best: q as f64,
        candidate_index: k,
        n_evaluated: evaluated,
        n_feasible: set.n_feasible,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub step: usize,
    pub pose: Quat,
    pub wrench: [f64; 6],
    pub model_confidence: f64,
    pub oracle_score: f64,
    /// Feasible population of the suggestion that led here (0 at the start).
    pub n_feasible: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// The start state followed by one record per completed step.
    pub steps: Vec<RolloutStep>,
    /// Why the episode stopped early, if it did.
    pub halted: Option<String>,
}

impl Rollout {
    pub fn start_score(&self) -> f64 {
        self.steps.first().map_or(0.0, |s| s.oracle_score)
    }

    pub fn final_score(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.oracle_score)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,qw,qx,qy,qz,fx,fy,fz,tx,ty,tz,model_confidence,oracle_score,n_feasible,elapsed_ms\n");
        for s in &self.steps {
            let p = s.pose.to_array();
            let cols: Vec<String> = p.iter().chain(s.wrench.iter()).map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{:.3}\n",
                s.step,
                cols.join(","),
                s.model_confidence,
                s.oracle_score,
                s.n_feasible,
                s.elapsed_ms
            ));
        }
        out
    }
}

/// Render seed of rollout step `step`.
pub fn rollout_frame_seed(seed: u64, step: usize) -> u64 {
    mix64(seed ^ mix64(0x726f_6c6c ^ step as u64))
}

/// Simulated closed loop: render the current state, ask for a suggestion,
/// move there, repeat. Guidance failures end the episode with the partial log.
pub fn rollout(
    model: &QualityModel,
    phantom_cfg: &PhantomConfig,
    experience: &Experience,
    start: &ProbeState,
    steps: usize,
    cfg: &GuidanceConfig,
) -> Result<Rollout, GuidanceError> {
    if steps == 0 {
        return Err(GuidanceError::Config("steps must be >= 1".into()));
    }
    cfg.validate()?;
    start.require_contact()?;
    let observe = |state: &ProbeState, step: usize| -> Result<(phantom::UltrasoundFrame, f64, f64), GuidanceError> {
        let frame = phantom::render(state, phantom_cfg, rollout_frame_seed(cfg.seed, step))?;
        let conf = model.forward(&frame, state)?.confidence as f64;
        Ok((frame, conf, phantom::oracle_quality(state, phantom_cfg).score))
    };
    let mut current = *start;
    let (mut frame, conf, score) = observe(&current, 0)?;
    let mut log = vec![RolloutStep {
        step: 0,
        pose: current.pose(),
        wrench: current.wrench(),
        model_confidence: conf,
        oracle_score: score,
        n_feasible: 0,
        elapsed_ms: 0.0,
    }];
    for step in 1..=steps {
        let step_cfg = cfg.with_seed(mix64(cfg.seed.wrapping_add(step as u64)));
        let s = match suggest(model, experience, &frame, &current, &step_cfg) {
            Ok(s) => s,
            Err(e @ GuidanceError::Infeasible { .. }) => {
                return Ok(Rollout {
                    steps: log,
                    halted: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        };
        current = s.state();
        let (f, conf, score) = observe(&current, step)?;
        frame = f;
        log.push(RolloutStep {
            step,
            pose: current.pose(),
            wrench: current.wrench(),
            model_confidence: conf,
            oracle_score: score,
            n_feasible: s.n_feasible,
            elapsed_ms: s.elapsed_ms,
        });
    }
    Ok(Rollout {
        steps: log,
        halted: None,
    })
}

/// `count` distinct label-0 dataset states with `Fz >= 0`, drawn without replacement.
pub fn poor_starts(dataset: &Dataset, count: usize, seed: u64) -> Result<Vec<ProbeState>, GuidanceError> {
    let pool: Vec<ProbeState> = dataset
        .samples
        .iter()
        .filter(|s| s.label == 0 && s.state.fz() >= 0.0)
        .map(|s| s.state)
        .collect();
    if pool.len() < count {
        return Err(GuidanceError::Config(format!(
            "asked for {count} poor starts, dataset has {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episodes: usize,
    /// Episodes whose final oracle score is strictly above the start.
    pub improved: usize,
    pub success_rate: f64,
    pub mean_start_score: f64,
    pub mean_final_score: f64,
    pub halted: usize,
}

/// One rollout per start; episode `i` runs with seed `mix64(cfg.seed ^ (i + 1))`.
pub fn run_episodes(
    model: &QualityModel,
    phantom_cfg: &PhantomConfig,
    experience: &Experience,
    starts: &[ProbeState],
    steps: usize,
    cfg: &GuidanceConfig,
) -> Result<(Vec<Rollout>, EpisodeSummary), GuidanceError> {
    if starts.is_empty() {
        return Err(GuidanceError::Config("no start states".into()));
    }
    let mut logs = Vec::with_capacity(starts.len());
    for (i, start) in starts.iter().enumerate() {
        let ep_cfg = cfg.with_seed(mix64(cfg.seed ^ (i as u64 + 1)));
        let r = rollout(model, phantom_cfg, experience, start, steps, &ep_cfg)?;
        tracing::debug!(episode = i, start = r.start_score(), end = r.final_score(), "episode");
        logs.push(r);
    }
    let n = logs.len() as f64;
    let improved = logs.iter().filter(|r| r.final_score() > r.start_score()).count();
    let summary = EpisodeSummary {
        episodes: logs.len(),
        improved,
        success_rate: improved as f64 / n,
        mean_start_score: logs.iter().map(Rollout::start_score).sum::<f64>() / n,
        mean_final_score: logs.iter().map(Rollout::final_score).sum::<f64>() / n,
        halted: logs.iter().filter(|r| r.halted.is_some()).count(),
    };
    Ok((logs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_of(states: &[ProbeState]) -> Experience {
        Experience::from_entries(
            states.iter().map(|s| (s.pose(), s.wrench())).collect(),
            SourceFilter::All,
        )
        .unwrap()
    }

    #[test]
    fn feasibility_edges() {
        let cfg = GuidanceConfig::default();
        let cur = ProbeState::upright(1.0);
        assert!(feasible((cur.pose(), cur.wrench()), &cur, &cfg));
        let mut w = cur.wrench();
        w[2] = -0.01;
        assert!(!feasible((cur.pose(), w), &cur, &cfg));
        let at_bound = Quat::from_axis_angle([0.0, 1.0, 0.0], cfg.pose_bound);
        let d = quat_distance(at_bound, cur.pose()).unwrap();
        let exact = GuidanceConfig { pose_bound: d, ..cfg };
        assert!(feasible((at_bound, cur.wrench()), &cur, &exact));
        let mut w = cur.wrench();
        w[2] += 2.0;
        assert!(feasible((cur.pose(), w), &cur, &cfg));
        w[3] += 20.0 + 1e-9;
        assert!(!feasible((cur.pose(), w), &cur, &cfg));
    }

    #[test]
    fn infeasible_queries_report_the_nearest_entry() {
        let e = exp_of(&[ProbeState::upright(10.0), ProbeState::upright(20.0)]);
        let cur = ProbeState::upright(1.0);
        match sample_candidates(&e, &cur, &GuidanceConfig::default()) {
            Err(GuidanceError::Infeasible { entries, nearest }) => {
                assert_eq!(entries, 2);
                assert_eq!(nearest.entry, 0);
                assert!(nearest.violations.iter().any(|v| v.contains("dFz")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn streams_are_prefixes() {
        let states: Vec<_> = (0..20).map(|i| ProbeState::upright(5.0 + 0.1 * i as f64)).collect();
        let e = exp_of(&states);
        let cur = ProbeState::upright(5.5);
        let short = sample_candidates(
            &e,
            &cur,
            &GuidanceConfig {
                n_samples: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let long = sample_candidates(
            &e,
            &cur,
            &GuidanceConfig {
                n_samples: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(short.candidates[..], long.candidates[..10]);
    }

    #[test]
    fn independent_pairing_mixes_entries() {
        let states: Vec<_> = (0..10).map(|i| ProbeState::upright(5.0 + 0.1 * i as f64)).collect();
        let e = exp_of(&states).with_pairing(Pairing::Independent);
        let set = sample_candidates(&e, &ProbeState::upright(5.5), &GuidanceConfig::default()).unwrap();
        assert_eq!(set.n_feasible, 100);
        assert!(set.candidates.iter().any(|c| c.pose_entry != c.wrench_entry));
    }

    #[test]
    fn empty_or_bad_configs_are_rejected() {
        assert!(matches!(
            Experience::from_entries(Vec::new(), SourceFilter::PositivesOnly),
            Err(GuidanceError::EmptyExperience(SourceFilter::PositivesOnly))
        ));
        assert!(GuidanceConfig {
            n_samples: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GuidanceConfig {
            accept_threshold: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
