//! Per-example store of high-reward trajectories and the in/out-of-memory
//! sample drawn from it.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{trajectory_key, LatentError, Trajectory};

pub const REWARD_THRESHOLD: f64 = 0.8;
pub const DEFAULT_CAPACITY: usize = 16;
pub const MAX_IN_MEMORY: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    store: BTreeMap<String, Vec<Trajectory>>,
    capacity: usize,
    threshold: f64,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

/// One line of a buffer snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferRecord {
    pub example_id: String,
    pub sub_answers: Vec<String>,
    pub reward: f64,
    pub loglik: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self::with_threshold(capacity, REWARD_THRESHOLD)
    }

    pub fn with_threshold(capacity: usize, threshold: f64) -> Self {
        assert!(capacity >= 1, "buffer capacity must be positive");
        assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
        Self {
            store: BTreeMap::new(),
            capacity,
            threshold,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn get(&self, example_id: &str) -> &[Trajectory] {
        self.store.get(example_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_entries(&self, example_id: &str) -> bool {
        !self.get(example_id).is_empty()
    }

    pub fn contains(&self, example_id: &str, sub_answers: &[String]) -> bool {
        let key = trajectory_key(sub_answers);
        self.get(example_id).iter().any(|t| t.key() == key)
    }

    /// Number of examples with at least one stored trajectory.
    pub fn example_count(&self) -> usize {
        self.store.values().filter(|v| !v.is_empty()).count()
    }

    pub fn trajectory_count(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Trajectory])> {
        self.store.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn records(&self) -> Vec<BufferRecord> {
        self.iter()
            .flat_map(|(id, ts)| {
                ts.iter().map(move |t| BufferRecord {
                    example_id: id.to_string(),
                    sub_answers: t.sub_answers.clone(),
                    reward: t.reward,
                    loglik: t.loglik,
                })
            })
            .collect()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), LatentError> {
        let snapshot = |e: std::io::Error| LatentError::Snapshot(e.to_string());
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(snapshot)?;
        for r in self.records() {
            let line = serde_json::to_string(&r).map_err(|e| LatentError::Snapshot(e.to_string()))?;
            writeln!(tmp, "{line}").map_err(snapshot)?;
        }
        tmp.persist(path).map_err(|e| snapshot(e.error))?;
        Ok(())
    }

    /// Reloads a snapshot through the admission rule, so invalid lines are
    /// dropped rather than trusted.
    pub fn load_jsonl(path: &Path, capacity: usize) -> Result<Self, LatentError> {
        let file = std::fs::File::open(path).map_err(|e| LatentError::Snapshot(e.to_string()))?;
        let mut buffer = Self::new(capacity);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LatentError::Snapshot(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: BufferRecord = serde_json::from_str(&line)
                .map_err(|e| LatentError::Snapshot(format!("line {}: {e}", i + 1)))?;
            let t = Trajectory {
                step_logprobs: Vec::new(),
                sub_answers: r.sub_answers,
                loglik: r.loglik,
                reward: r.reward,
            };
            buffer_admit(&mut buffer, &r.example_id, &t);
        }
        Ok(buffer)
    }
}

/// Stores the trajectory iff its reward exceeds the threshold and its
/// normalized sub-answers are new for this example. A full slot list evicts
/// its lowest-reward entry (earliest on ties) when the newcomer is better,
/// and rejects the newcomer otherwise.
pub fn buffer_admit(buffer: &mut ReplayBuffer, example_id: &str, trajectory: &Trajectory) -> bool {
    if !(trajectory.reward > buffer.threshold) || buffer.contains(example_id, &trajectory.sub_answers) {
        return false;
    }
    let capacity = buffer.capacity;
    let slot = buffer.store.entry(example_id.to_string()).or_default();
    if slot.len() >= capacity {
        let (worst, worst_reward) = slot
            .iter()
            .enumerate()
            .map(|(i, t)| (i, t.reward))
            .fold((0, f64::INFINITY), |acc, (i, r)| if r < acc.1 { (i, r) } else { acc });
        if trajectory.reward <= worst_reward {
            return false;
        }
        slot.remove(worst);
    }
    slot.push(trajectory.clone());
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub in_memory: Vec<Trajectory>,
    pub out_of_memory: Vec<Trajectory>,
    pub m: usize,
    pub r_b: f64,
}

/// Out-of-memory trajectories are the beam entries absent from the buffer;
/// in-memory ones are a uniform draw without replacement of
/// `min(5, |buffer|)` stored trajectories, kept in storage order.
pub fn assemble_training_sample<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    example_id: &str,
    beam_top: &[Trajectory],
    rng: &mut R,
) -> Result<TrainingSample, LatentError> {
    assemble_with_limit(buffer, example_id, beam_top, MAX_IN_MEMORY, rng)
}

/// [`assemble_training_sample`] with a configurable in-memory count.
pub fn assemble_with_limit<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    example_id: &str,
    beam_top: &[Trajectory],
    max_in_memory: usize,
    rng: &mut R,
) -> Result<TrainingSample, LatentError> {
    let stored = buffer.get(example_id);
    let stored_keys: HashSet<Vec<String>> = stored.iter().map(Trajectory::key).collect();
    let out_of_memory: Vec<Trajectory> = beam_top
        .iter()
        .filter(|t| !stored_keys.contains(&t.key()))
        .cloned()
        .collect();
    let amount = stored.len().min(max_in_memory);
    let mut picks = index::sample(rng, stored.len(), amount).into_vec();
    picks.sort_unstable();
    let in_memory: Vec<Trajectory> = picks.into_iter().map(|i| stored[i].clone()).collect();
    let m = in_memory.len() + out_of_memory.len();
    if m == 0 {
        return Err(LatentError::Degenerate);
    }
    Ok(TrainingSample {
        r_b: in_memory.len() as f64 / m as f64,
        in_memory,
        out_of_memory,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(answers: &[&str], reward: f64) -> Trajectory {
        Trajectory {
            sub_answers: answers.iter().map(|s| s.to_string()).collect(),
            step_logprobs: Vec::new(),
            loglik: -1.0,
            reward,
        }
    }

    #[test]
    fn admission_threshold_is_strict() {
        let mut b = ReplayBuffer::default();
        assert!(buffer_admit(&mut b, "e", &traj(&["x"], 0.81)));
        assert!(!buffer_admit(&mut b, "e", &traj(&["y"], 0.8)));
        assert!(!buffer_admit(&mut b, "e", &traj(&["x"], 1.0)));
        // normalized duplicates are duplicates
        assert!(!buffer_admit(&mut b, "e", &traj(&["The X."], 1.0)));
        assert_eq!(b.trajectory_count(), 1);
    }

    #[test]
    fn eviction_keeps_the_best() {
        let mut b = ReplayBuffer::new(2);
        assert!(buffer_admit(&mut b, "e", &traj(&["a"], 0.9)));
        assert!(buffer_admit(&mut b, "e", &traj(&["b"], 0.85)));
        assert!(!buffer_admit(&mut b, "e", &traj(&["c"], 0.85)));
        assert!(buffer_admit(&mut b, "e", &traj(&["d"], 1.0)));
        let kept: Vec<&str> = b.get("e").iter().map(|t| t.final_answer()).collect();
        assert_eq!(kept, vec!["a", "d"]);
    }

    #[test]
    fn sample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let beam: Vec<Trajectory> = (0..5).map(|i| traj(&[&format!("b{i}")], 1.0)).collect();

        let empty = ReplayBuffer::default();
        let s = assemble_training_sample(&empty, "e", &beam, &mut rng).unwrap();
        assert_eq!((s.in_memory.len(), s.out_of_memory.len(), s.m, s.r_b), (0, 5, 5, 0.0));

        let mut same = ReplayBuffer::default();
        for t in &beam {
            buffer_admit(&mut same, "e", t);
        }
        let s = assemble_training_sample(&same, "e", &beam, &mut rng).unwrap();
        assert_eq!((s.in_memory.len(), s.out_of_memory.len(), s.m, s.r_b), (5, 0, 5, 1.0));

        let mut disjoint = ReplayBuffer::default();
        for i in 0..7 {
            buffer_admit(&mut disjoint, "e", &traj(&[&format!("m{i}")], 0.9));
        }
        let s = assemble_training_sample(&disjoint, "e", &beam, &mut rng).unwrap();
        assert_eq!((s.m, s.r_b), (10, 0.5));

        assert!(matches!(
            assemble_training_sample(&empty, "e", &[], &mut rng),
            Err(LatentError::Degenerate)
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.jsonl");
        let mut b = ReplayBuffer::default();
        buffer_admit(&mut b, "e1", &traj(&["1", "2"], 0.9));
        buffer_admit(&mut b, "e0", &traj(&["z"], 1.0));
        b.save_jsonl(&path).unwrap();
        let back = ReplayBuffer::load_jsonl(&path, DEFAULT_CAPACITY).unwrap();
        assert_eq!(back.records(), b.records());
    }
}
