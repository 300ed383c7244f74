//! Reward-free stochastic game abstraction shared by every other module.
//!
//! A [`GameSpec`] is a fully tabular description of a finite n-agent game:
//! dense state indices, per-agent action sets, a deterministic joint
//! transition table, absorbing terminal states and per-agent nonnegative
//! feature vectors. Rewards are linear in the features through a
//! [`RewardModel`] holding one concatenated weight vector with per-agent
//! blocks.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{dot, Table2};

/// One action per agent, ordered by agent index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn agent(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Scalar structure of a game, passed to [`GameSpec::new`].
#[derive(Clone, Debug)]
pub struct GameStructure {
    pub env_id: String,
    pub num_states: usize,
    pub action_counts: Vec<usize>,
    pub discount: f64,
    /// Sampling period in seconds, recorded on emitted trajectories.
    pub dt: f64,
    pub feature_dims: Vec<usize>,
    /// Designated action each agent takes when modeled as a stationary
    /// object by a least-sophisticated opponent.
    pub stationary_actions: Vec<usize>,
}

/// Tabular description of a finite stochastic game with deterministic
/// dynamics. Immutable after construction; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct GameSpec {
    structure: GameStructure,
    /// Joint-action strides; joint rank is lexicographic by agent index,
    /// agent 0 most significant.
    joint_strides: Vec<usize>,
    /// `successors[s * num_joint_actions + joint_rank]`.
    successors: Vec<u32>,
    terminal: Vec<bool>,
    /// Per agent, `|S| x m_i` row-major feature matrix.
    features: Vec<Vec<f64>>,
    /// Block offset of each agent in the concatenated weight vector,
    /// with a trailing total (length `n + 1`).
    weight_offsets: Vec<usize>,
}

impl GameSpec {
    /// Builds and validates a game from closures.
    ///
    /// `dynamics` must be total over (state, joint action) and absorbing on
    /// terminal states; `features` must return a nonnegative vector of
    /// length `feature_dims[agent]` for every state.
    pub fn new(
        structure: GameStructure,
        dynamics: impl Fn(usize, &[usize]) -> usize,
        terminal: impl Fn(usize) -> bool,
        features: impl Fn(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let num_agents = structure.action_counts.len();
        let num_states = structure.num_states;
        if num_agents == 0 || num_states == 0 {
            return Err(Error::InvalidInput(
                "game needs at least one agent and one state".into(),
            ));
        }
        if !(structure.discount > 0.0 && structure.discount < 1.0) {
            return Err(Error::InvalidInput(format!(
                "discount must lie in (0,1), got {}",
                structure.discount
            )));
        }
        if structure.dt <= 0.0 {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        if structure.feature_dims.len() != num_agents
            || structure.stationary_actions.len() != num_agents
        {
            return Err(Error::InvalidInput(
                "per-agent vectors must match the agent count".into(),
            ));
        }
        if structure.action_counts.iter().any(|&a| a == 0) {
            return Err(Error::InvalidInput("empty action set".into()));
        }
        for (i, (&stay, &na)) in structure
            .stationary_actions
            .iter()
            .zip(&structure.action_counts)
            .enumerate()
        {
            if stay >= na {
                return Err(Error::InvalidInput(format!(
                    "stationary action {stay} out of range for agent {i}"
                )));
            }
        }

        let mut joint_strides = vec![1usize; num_agents];
        for i in (0..num_agents.saturating_sub(1)).rev() {
            joint_strides[i] = joint_strides[i + 1] * structure.action_counts[i + 1];
        }
        let num_joint = joint_strides[0] * structure.action_counts[0];

        let mut terminal_v = Vec::with_capacity(num_states);
        for s in 0..num_states {
            terminal_v.push(terminal(s));
        }

        let mut successors = vec![0u32; num_states * num_joint];
        let mut actions = vec![0usize; num_agents];
        for s in 0..num_states {
            for rank in 0..num_joint {
                decompose_rank(rank, &structure.action_counts, &joint_strides, &mut actions);
                let next = dynamics(s, &actions);
                if next >= num_states {
                    return Err(Error::InvalidInput(format!(
                        "dynamics({s}, {actions:?}) returned invalid state {next}"
                    )));
                }
                if terminal_v[s] && next != s {
                    return Err(Error::InvalidInput(format!(
                        "terminal state {s} is not absorbing (maps to {next})"
                    )));
                }
                successors[s * num_joint + rank] = next as u32;
            }
        }

        let mut feature_mats = Vec::with_capacity(num_agents);
        for (i, &m) in structure.feature_dims.iter().enumerate() {
            let mut mat = Vec::with_capacity(num_states * m);
            for s in 0..num_states {
                let phi = features(i, s);
                if phi.len() != m {
                    return Err(Error::InvalidInput(format!(
                        "feature vector for agent {i} at state {s} has length {}, expected {m}",
                        phi.len()
                    )));
                }
                if phi.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "feature vector for agent {i} at state {s} has a negative or \
                         non-finite entry"
                    )));
                }
                mat.extend_from_slice(&phi);
            }
            feature_mats.push(mat);
        }

        let mut weight_offsets = Vec::with_capacity(num_agents + 1);
        let mut acc = 0;
        for &m in &structure.feature_dims {
            weight_offsets.push(acc);
            acc += m;
        }
        weight_offsets.push(acc);

        Ok(Self {
            structure,
            joint_strides,
            successors,
            terminal: terminal_v,
            features: feature_mats,
            weight_offsets,
        })
    }

    pub fn env_id(&self) -> &str {
        &self.structure.env_id
    }

    pub fn num_agents(&self) -> usize {
        self.structure.action_counts.len()
    }

    pub fn num_states(&self) -> usize {
        self.structure.num_states
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.structure.action_counts
    }

    pub fn num_actions(&self, agent: usize) -> usize {
        self.structure.action_counts[agent]
    }

    pub fn discount(&self) -> f64 {
        self.structure.discount
    }

    pub fn dt(&self) -> f64 {
        self.structure.dt
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.structure.feature_dims
    }

    pub fn stationary_actions(&self) -> &[usize] {
        &self.structure.stationary_actions
    }

    pub fn num_joint_actions(&self) -> usize {
        self.joint_strides[0] * self.structure.action_counts[0]
    }

    /// Lexicographic rank of a joint action, agent 0 most significant.
    pub fn joint_rank(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.num_agents());
        actions
            .iter()
            .zip(&self.joint_strides)
            .map(|(a, s)| a * s)
            .sum()
    }

    pub fn joint_stride(&self, agent: usize) -> usize {
        self.joint_strides[agent]
    }

    #[inline]
    pub fn successor_by_rank(&self, state: usize, rank: usize) -> usize {
        self.successors[state * self.num_joint_actions() + rank] as usize
    }

    pub fn next_state(&self, state: usize, joint: &JointAction) -> Result<usize> {
        self.check_joint(joint)?;
        if state >= self.num_states() {
            return Err(Error::InvalidInput(format!("state {state} out of range")));
        }
        Ok(self.successor_by_rank(state, self.joint_rank(&joint.0)))
    }

    #[inline]
    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn nonterminal_states(&self) -> Vec<usize> {
        (0..self.num_states())
            .filter(|&s| !self.terminal[s])
            .collect()
    }

    /// Feature vector of `agent` at `state` (length `m_agent`).
    #[inline]
    pub fn features(&self, agent: usize, state: usize) -> &[f64] {
        let m = self.structure.feature_dims[agent];
        &self.features[agent][state * m..(state + 1) * m]
    }

    /// Total weight dimension `M = sum_i m_i`.
    pub fn weight_dim(&self) -> usize {
        self.weight_offsets[self.num_agents()]
    }

    pub fn weight_offset(&self, agent: usize) -> usize {
        self.weight_offsets[agent]
    }

    /// Gradient of `agent`'s reward at `state` with respect to the full
    /// concatenated weight vector: the feature vector placed in the agent's
    /// block, zeros elsewhere.
    pub fn reward_gradient(&self, agent: usize, state: usize) -> Result<Vec<f64>> {
        self.check_agent_state(agent, state)?;
        let mut grad = vec![0.0; self.weight_dim()];
        let off = self.weight_offsets[agent];
        grad[off..off + self.structure.feature_dims[agent]]
            .copy_from_slice(self.features(agent, state));
        Ok(grad)
    }

    pub(crate) fn check_agent_state(&self, agent: usize, state: usize) -> Result<()> {
        if agent >= self.num_agents() {
            return Err(Error::InvalidInput(format!("agent {agent} out of range")));
        }
        if state >= self.num_states() {
            return Err(Error::InvalidInput(format!("state {state} out of range")));
        }
        Ok(())
    }

    pub(crate) fn check_joint(&self, joint: &JointAction) -> Result<()> {
        if joint.len() != self.num_agents() {
            return Err(Error::InvalidInput(format!(
                "joint action has {} entries, expected {}",
                joint.len(),
                self.num_agents()
            )));
        }
        for (i, &a) in joint.0.iter().enumerate() {
            if a >= self.structure.action_counts[i] {
                return Err(Error::InvalidInput(format!(
                    "action {a} out of range for agent {i}"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn decompose_rank(
    rank: usize,
    action_counts: &[usize],
    strides: &[usize],
    out: &mut [usize],
) {
    for i in 0..action_counts.len() {
        out[i] = rank / strides[i] % action_counts[i];
    }
}

/// Per-agent nonnegative feature weights stored as one concatenated vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    weights: Vec<f64>,
}

impl RewardModel {
    /// From per-agent weight vectors; lengths must match the spec's
    /// feature dimensions and every entry must be nonnegative.
    pub fn new(spec: &GameSpec, per_agent: &[Vec<f64>]) -> Result<Self> {
        if per_agent.len() != spec.num_agents() {
            return Err(Error::InvalidInput(format!(
                "got weights for {} agents, expected {}",
                per_agent.len(),
                spec.num_agents()
            )));
        }
        let mut flat = Vec::with_capacity(spec.weight_dim());
        for (i, w) in per_agent.iter().enumerate() {
            if w.len() != spec.feature_dims()[i] {
                return Err(Error::InvalidInput(format!(
                    "agent {i} weight vector has length {}, expected {}",
                    w.len(),
                    spec.feature_dims()[i]
                )));
            }
            flat.extend_from_slice(w);
        }
        Self::from_flat(spec, flat)
    }

    pub fn from_flat(spec: &GameSpec, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.weight_dim() {
            return Err(Error::InvalidInput(format!(
                "weight vector has length {}, expected {}",
                weights.len(),
                spec.weight_dim()
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidInput(
                "weights must be nonnegative and finite".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn agent_weights<'a>(&'a self, spec: &GameSpec, agent: usize) -> &'a [f64] {
        let off = spec.weight_offset(agent);
        &self.weights[off..off + spec.feature_dims()[agent]]
    }

    /// Per-agent view of the concatenated vector.
    pub fn split(&self, spec: &GameSpec) -> Vec<Vec<f64>> {
        (0..spec.num_agents())
            .map(|i| self.agent_weights(spec, i).to_vec())
            .collect()
    }

    /// Linear reward `omega_i . phi_i(state)`.
    pub fn reward(&self, spec: &GameSpec, agent: usize, state: usize) -> Result<f64> {
        spec.check_agent_state(agent, state)?;
        Ok(dot(
            self.agent_weights(spec, agent),
            spec.features(agent, state),
        ))
    }
}

/// One recorded interaction: equal-length state and joint-action sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "env")]
    pub env_id: String,
    pub dt: f64,
    pub states: Vec<usize>,
    #[serde(rename = "actions")]
    pub joint_actions: Vec<JointAction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_levels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_weights: Option<Vec<Vec<f64>>>,
    /// Set for trajectories imported from continuous recordings, whose
    /// transitions are not required to match the grid dynamics.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub imported: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks index bounds, equal lengths and (for non-imported data)
    /// dynamics consistency of consecutive steps.
    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.states.len() != self.joint_actions.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory has {} states but {} joint actions",
                self.states.len(),
                self.joint_actions.len()
            )));
        }
        for (&s, ja) in self.states.iter().zip(&self.joint_actions) {
            if s >= spec.num_states() {
                return Err(Error::InvalidInput(format!("state {s} out of range")));
            }
            spec.check_joint(ja)?;
        }
        if !self.imported {
            for t in 0..self.states.len().saturating_sub(1) {
                let expect = spec.next_state(self.states[t], &self.joint_actions[t])?;
                if expect != self.states[t + 1] {
                    return Err(Error::InvalidInput(format!(
                        "transition at step {t} violates the dynamics: \
                         got {}, expected {expect}",
                        self.states[t + 1]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Writes trajectories as one JSON object per line.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for traj in trajectories {
        serde_json::to_writer(&mut out, traj)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads the line-delimited JSON trajectory format.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Samples one trajectory by following per-agent stochastic policies from
/// `s0` until a terminal state is recorded or `max_steps` pairs have been
/// emitted. Deterministic for a fixed `rng_seed`.
pub fn rollout(
    spec: &GameSpec,
    policies: &[&Table2],
    s0: usize,
    max_steps: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    if policies.len() != spec.num_agents() {
        return Err(Error::InvalidInput(format!(
            "got {} policies, expected {}",
            policies.len(),
            spec.num_agents()
        )));
    }
    if s0 >= spec.num_states() {
        return Err(Error::InvalidInput(format!("state {s0} out of range")));
    }
    for (i, p) in policies.iter().enumerate() {
        if p.rows() != spec.num_states() || p.cols() != spec.num_actions(i) {
            return Err(Error::InvalidInput(format!(
                "policy {i} has shape {}x{}, expected {}x{}",
                p.rows(),
                p.cols(),
                spec.num_states(),
                spec.num_actions(i)
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut s = s0;
    for _ in 0..max_steps {
        let mut joint = Vec::with_capacity(spec.num_agents());
        for (i, policy) in policies.iter().enumerate() {
            joint.push(sample_action(policy.row(s), i, s, &mut rng)?);
        }
        let joint = JointAction(joint);
        let next = spec.next_state(s, &joint)?;
        states.push(s);
        actions.push(joint);
        if spec.is_terminal(s) {
            break;
        }
        s = next;
    }
    Ok(Trajectory {
        env_id: spec.env_id().to_string(),
        dt: spec.dt(),
        states,
        joint_actions: actions,
        gt_levels: None,
        gt_weights: None,
        imported: false,
    })
}

fn sample_action(row: &[f64], agent: usize, state: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "policy row for agent {agent} at state {state} sums to {sum}, not 1"
        )));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(a);
        }
    }
    Ok(row.len() - 1)
}
