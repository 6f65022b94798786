//! The sampled safe set: states visited by successful prior iterations, the
//! minimum cost-to-go map over them, and the bound-based restriction set used
//! to prune terminal candidates.
//!
//! States are keyed by exact floating-point equality. Distinct trajectories
//! essentially never revisit bit-identical states except the canonical
//! target, which every converged run terminates on; approximate keying would
//! silently merge distinct states and break the cost-to-go recursion.

use std::collections::HashMap;

use crate::model::{InputVec, StateVec};
use crate::trajectory::{IterationRecord, Trajectory};

/// Slack added to the restriction-set bound to protect the pruning guarantee
/// against solver round-off.
pub const RESTRICTION_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SafeSetError {
    #[error("iteration {0} did not converge to the target; storing it would void the safe-set guarantee")]
    NonConvergentRecord(usize),
    #[error("state dimension {got} does not match the stored dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// One stored state with its provenance and realized cost-to-go.
#[derive(Clone, Debug)]
pub struct SafePoint {
    pub state: StateVec,
    pub iteration: usize,
    pub time: usize,
    pub cost_to_go: f64,
}

/// Bit-exact hash key over a state vector. Negative zero is normalized so a
/// computed `-0.0` coordinate still matches the canonical target.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct StateKey(Vec<u64>);

fn state_key(x: &StateVec) -> StateKey {
    StateKey(
        x.iter()
            .map(|v| if *v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() })
            .collect(),
    )
}

/// Points of one stored trajectory, kept contiguous so successor lookups are
/// index arithmetic.
#[derive(Clone, Debug)]
struct StoredSegment {
    start: usize,
    /// Number of points including the appended terminal.
    len: usize,
    inputs: Vec<InputVec>,
}

/// The sampled safe set together with its cost-to-go map.
///
/// Read-only during an iteration's closed-loop run; trajectories are added
/// only between iterations under exclusive access.
#[derive(Clone, Debug, Default)]
pub struct SampledSafeSet {
    points: Vec<SafePoint>,
    segments: Vec<StoredSegment>,
    index: HashMap<StateKey, Vec<usize>>,
    q: HashMap<StateKey, f64>,
    input_dim: usize,
}

/// Indices of the safe-set points surviving the upper-bound pruning.
#[derive(Clone, Debug)]
pub struct RestrictionSet {
    pub indices: Vec<usize>,
}

impl RestrictionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Suffix sums of a trajectory's stage costs, summed backward so the
/// recursion `J_t = h_t + J_{t+1}` holds exactly in floating point.
pub fn cost_to_go_tails(traj: &Trajectory) -> Vec<f64> {
    let mut tails = vec![0.0; traj.steps.len()];
    let mut acc = 0.0;
    for (t, step) in traj.steps.iter().enumerate().rev() {
        acc += step.stage_cost;
        tails[t] = acc;
    }
    tails
}

impl SampledSafeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total number of stored point entries (duplicate states from different
    /// iterations count separately, mirroring the per-iteration growth of
    /// the set).
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[SafePoint] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &SafePoint {
        &self.points[idx]
    }

    /// Append a converged iteration's trajectory: every visited state with
    /// its backward-accumulated tail cost, plus the terminal target with
    /// cost-to-go exactly 0. The cost-to-go map keeps the pointwise minimum.
    pub fn add_trajectory(&mut self, rec: &IterationRecord) -> Result<(), SafeSetError> {
        if !rec.converged {
            return Err(SafeSetError::NonConvergentRecord(rec.trajectory.iteration));
        }
        let traj = &rec.trajectory;
        if let Some(first) = traj.steps.first() {
            if self.input_dim != 0 && first.input.len() != self.input_dim {
                return Err(SafeSetError::DimensionMismatch {
                    expected: self.input_dim,
                    got: first.input.len(),
                });
            }
            self.input_dim = first.input.len();
        }
        let tails = cost_to_go_tails(traj);
        let start = self.points.len();
        for (t, step) in traj.steps.iter().enumerate() {
            self.push_point(SafePoint {
                state: step.state.clone(),
                iteration: traj.iteration,
                time: t,
                cost_to_go: tails[t],
            });
        }
        self.push_point(SafePoint {
            state: traj.terminal.clone(),
            iteration: traj.iteration,
            time: traj.steps.len(),
            cost_to_go: 0.0,
        });
        self.segments.push(StoredSegment {
            start,
            len: traj.steps.len() + 1,
            inputs: traj.steps.iter().map(|s| s.input.clone()).collect(),
        });
        Ok(())
    }

    fn push_point(&mut self, point: SafePoint) {
        let key = state_key(&point.state);
        let idx = self.points.len();
        self.index.entry(key.clone()).or_default().push(idx);
        self.q
            .entry(key)
            .and_modify(|q| {
                if point.cost_to_go < *q {
                    *q = point.cost_to_go;
                }
            })
            .or_insert(point.cost_to_go);
        self.points.push(point);
    }

    /// Minimum stored cost-to-go at `x` under exact state keying; `None`
    /// encodes the +infinity of states outside the set.
    pub fn q_value(&self, x: &StateVec) -> Option<f64> {
        self.q.get(&state_key(x)).copied()
    }

    /// Stored point indices whose state equals `x` exactly.
    pub fn points_at(&self, x: &StateVec) -> &[usize] {
        self.index.get(&state_key(x)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Points whose cost-to-go is within the previous step's optimal cost
    /// (plus slack). Callers must use the full set at the first time step.
    pub fn restriction_set(&self, prev_step_cost: f64) -> RestrictionSet {
        let bound = prev_step_cost + RESTRICTION_SLACK;
        RestrictionSet {
            indices: (0..self.points.len())
                .filter(|&i| self.points[i].cost_to_go <= bound)
                .collect(),
        }
    }

    pub fn full_set(&self) -> RestrictionSet {
        RestrictionSet { indices: (0..self.points.len()).collect() }
    }

    /// Collapse a candidate list to one representative per distinct state:
    /// the entry with the lowest cost-to-go, ties to the earliest
    /// (iteration, time). Returned in ascending index order.
    pub fn dedup_candidates(&self, rs: &RestrictionSet) -> Vec<usize> {
        let mut best: HashMap<StateKey, usize> = HashMap::new();
        for &idx in &rs.indices {
            let key = state_key(&self.points[idx].state);
            match best.get_mut(&key) {
                None => {
                    best.insert(key, idx);
                }
                Some(cur) => {
                    if self.points[idx].cost_to_go < self.points[*cur].cost_to_go {
                        *cur = idx;
                    }
                }
            }
        }
        let mut out: Vec<usize> = best.into_values().collect();
        out.sort_unstable();
        out
    }

    /// Representative stored point for the state `x`: the entry with the
    /// lowest cost-to-go, ties to the earliest index. Mirrors the selection
    /// of [`Self::dedup_candidates`].
    pub fn rep_index_of(&self, x: &StateVec) -> Option<usize> {
        self.points_at(x)
            .iter()
            .copied()
            .min_by(|&a, &b| {
                self.points[a]
                    .cost_to_go
                    .partial_cmp(&self.points[b].cost_to_go)
                    .unwrap()
                    .then(a.cmp(&b))
            })
    }

    /// Stored input applied at a point and the index of its successor within
    /// the same trajectory. The terminal point is an equilibrium: it maps to
    /// itself under the zero input.
    pub fn successor(&self, idx: usize) -> (InputVec, usize) {
        let seg = self
            .segments
            .iter()
            .find(|s| idx >= s.start && idx < s.start + s.len)
            .expect("point index out of range");
        let offset = idx - seg.start;
        if offset + 1 < seg.len {
            (seg.inputs[offset].clone(), idx + 1)
        } else {
            (InputVec::zeros(self.input_dim), idx)
        }
    }

    /// Stored input segment of length `len` ending at point `idx`, if the
    /// point is at least `len` steps into its trajectory. Used to warm-start
    /// candidate solves with the trajectory that produced the candidate.
    pub fn segment_inputs_ending_at(&self, idx: usize, len: usize) -> Option<Vec<InputVec>> {
        let seg = self
            .segments
            .iter()
            .find(|s| idx >= s.start && idx < s.start + s.len)?;
        let offset = idx - seg.start;
        if offset < len {
            return None;
        }
        Some(seg.inputs[offset - len..offset].to_vec())
    }

    /// State of the point `len` steps before `idx` on its own trajectory.
    pub fn segment_start_state(&self, idx: usize, len: usize) -> Option<&StateVec> {
        let seg = self
            .segments
            .iter()
            .find(|s| idx >= s.start && idx < s.start + s.len)?;
        let offset = idx - seg.start;
        if offset < len {
            return None;
        }
        Some(&self.points[idx - len].state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajectoryStep;
    use nalgebra::dvector;

    /// Exhaustive-scan cost-to-go, the oracle `q_value` is checked against.
    fn brute_force_q(set: &SampledSafeSet, x: &StateVec) -> Option<f64> {
        let mut best: Option<f64> = None;
        for p in set.points() {
            if p.state.len() == x.len()
                && p.state.iter().zip(x.iter()).all(|(a, b)| a == b)
            {
                best = Some(match best {
                    None => p.cost_to_go,
                    Some(b) => b.min(p.cost_to_go),
                });
            }
        }
        best
    }

    fn line_record(iteration: usize, n_steps: usize, step_cost: f64) -> IterationRecord {
        let steps = (0..n_steps)
            .map(|t| TrajectoryStep {
                state: dvector![(n_steps - t) as f64, 1.0],
                input: dvector![-1.0],
                stage_cost: step_cost,
            })
            .collect();
        IterationRecord::from_trajectory(
            Trajectory { iteration, steps, terminal: dvector![0.0, 0.0] },
            true,
            vec![],
        )
    }

    #[test]
    fn tails_examples() {
        let rec = line_record(0, 4, 1.0);
        assert_eq!(cost_to_go_tails(&rec.trajectory), vec![4.0, 3.0, 2.0, 1.0]);
        let empty = Trajectory { iteration: 0, steps: vec![], terminal: dvector![0.0, 0.0] };
        assert!(cost_to_go_tails(&empty).is_empty());
    }

    #[test]
    fn add_trajectory_grows_by_steps_plus_one() {
        let mut ss = SampledSafeSet::new();
        ss.add_trajectory(&line_record(0, 15, 1.0)).unwrap();
        assert_eq!(ss.len(), 16);
        ss.add_trajectory(&line_record(1, 15, 1.0)).unwrap();
        assert_eq!(ss.len(), 32);
        assert_eq!(ss.q_value(&dvector![0.0, 0.0]), Some(0.0));
    }

    #[test]
    fn add_trajectory_rejects_nonconvergent() {
        let mut ss = SampledSafeSet::new();
        let mut rec = line_record(0, 3, 1.0);
        rec.converged = false;
        assert!(matches!(
            ss.add_trajectory(&rec),
            Err(SafeSetError::NonConvergentRecord(0))
        ));
        assert!(ss.is_empty());
    }

    #[test]
    fn readding_identical_trajectory_leaves_q_unchanged() {
        let mut ss = SampledSafeSet::new();
        let rec = line_record(0, 5, 2.0);
        ss.add_trajectory(&rec).unwrap();
        let before: Vec<Option<f64>> = rec
            .trajectory
            .steps
            .iter()
            .map(|s| ss.q_value(&s.state))
            .collect();
        let mut again = rec.clone();
        again.trajectory.iteration = 1;
        ss.add_trajectory(&again).unwrap();
        let after: Vec<Option<f64>> = rec
            .trajectory
            .steps
            .iter()
            .map(|s| ss.q_value(&s.state))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn shared_state_takes_minimum_tail() {
        let mut ss = SampledSafeSet::new();
        // Two trajectories pass through (2, 1) with tail costs 5.0 and 3.0.
        let a = IterationRecord::from_trajectory(
            Trajectory {
                iteration: 0,
                steps: vec![
                    TrajectoryStep { state: dvector![2.0, 1.0], input: dvector![0.0], stage_cost: 2.0 },
                    TrajectoryStep { state: dvector![1.0, 1.0], input: dvector![0.0], stage_cost: 3.0 },
                ],
                terminal: dvector![0.0, 0.0],
            },
            true,
            vec![],
        );
        let b = IterationRecord::from_trajectory(
            Trajectory {
                iteration: 1,
                steps: vec![
                    TrajectoryStep { state: dvector![2.0, 1.0], input: dvector![0.0], stage_cost: 3.0 },
                ],
                terminal: dvector![0.0, 0.0],
            },
            true,
            vec![],
        );
        ss.add_trajectory(&a).unwrap();
        ss.add_trajectory(&b).unwrap();
        let x = dvector![2.0, 1.0];
        assert_eq!(ss.q_value(&x), Some(3.0));
        assert_eq!(ss.q_value(&x), brute_force_q(&ss, &x));
    }

    #[test]
    fn q_value_examples() {
        let mut ss = SampledSafeSet::new();
        ss.add_trajectory(&line_record(0, 3, 2.5)).unwrap();
        assert_eq!(ss.q_value(&dvector![0.0, 0.0]), Some(0.0));
        assert_eq!(ss.q_value(&dvector![9.0, 9.0]), None);
        // Same state stored with tails 7.5 and 6.25.
        let cheaper = IterationRecord::from_trajectory(
            Trajectory {
                iteration: 1,
                steps: vec![
                    TrajectoryStep { state: dvector![3.0, 1.0], input: dvector![0.0], stage_cost: 6.25 },
                ],
                terminal: dvector![0.0, 0.0],
            },
            true,
            vec![],
        );
        ss.add_trajectory(&cheaper).unwrap();
        let x = dvector![3.0, 1.0];
        assert_eq!(ss.q_value(&x), Some(6.25));
        assert_eq!(brute_force_q(&ss, &x), Some(6.25));
    }

    #[test]
    fn q_recursion_holds_exactly() {
        let mut ss = SampledSafeSet::new();
        let rec = line_record(0, 7, 1.25);
        ss.add_trajectory(&rec).unwrap();
        let tails = cost_to_go_tails(&rec.trajectory);
        for t in 0..rec.trajectory.len() {
            let next_tail = if t + 1 < tails.len() { tails[t + 1] } else { 0.0 };
            assert_eq!(tails[t], rec.trajectory.steps[t].stage_cost + next_tail);
        }
    }

    #[test]
    fn restriction_set_examples() {
        let mut ss = SampledSafeSet::new();
        ss.add_trajectory(&line_record(0, 4, 1.0)).unwrap();
        assert_eq!(ss.restriction_set(f64::INFINITY).len(), ss.len());
        let zero = ss.restriction_set(0.0);
        assert_eq!(zero.len(), 1);
        assert_eq!(ss.point(zero.indices[0]).cost_to_go, 0.0);
    }

    #[test]
    fn monotone_nesting_under_additions() {
        let mut ss = SampledSafeSet::new();
        ss.add_trajectory(&line_record(0, 6, 2.0)).unwrap();
        let snapshot: Vec<SafePoint> = ss.points().to_vec();
        let qs: Vec<f64> = snapshot.iter().map(|p| ss.q_value(&p.state).unwrap()).collect();
        ss.add_trajectory(&line_record(1, 6, 1.0)).unwrap();
        for (p, q_before) in snapshot.iter().zip(qs.iter()) {
            let stored = ss.point(
                ss.points_at(&p.state)
                    .iter()
                    .copied()
                    .find(|&i| ss.point(i).iteration == p.iteration && ss.point(i).time == p.time)
                    .unwrap(),
            );
            assert_eq!(stored.cost_to_go, p.cost_to_go);
            assert!(ss.q_value(&p.state).unwrap() <= *q_before);
        }
    }

    #[test]
    fn brute_force_equivalence_on_small_sets() {
        let mut ss = SampledSafeSet::new();
        for j in 0..6 {
            ss.add_trajectory(&line_record(j, 10, 1.0 + j as f64 * 0.5)).unwrap();
        }
        assert!(ss.len() <= 200);
        for p in ss.points() {
            assert_eq!(ss.q_value(&p.state), brute_force_q(&ss, &p.state));
        }
    }

    #[test]
    fn successor_walks_the_segment() {
        let mut ss = SampledSafeSet::new();
        ss.add_trajectory(&line_record(0, 3, 1.0)).unwrap();
        let (u, next) = ss.successor(0);
        assert_eq!(u, dvector![-1.0]);
        assert_eq!(next, 1);
        // Terminal point self-loops under the zero input.
        let (u_term, next_term) = ss.successor(3);
        assert_eq!(u_term, dvector![0.0]);
        assert_eq!(next_term, 3);
    }
}
