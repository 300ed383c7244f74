//! Recursive Bayesian inference of each agent's latent reasoning level.
//!
//! Observing one joint action multiplies each level hypothesis by that
//! level's policy likelihood and renormalizes, independently per agent.
//! The posterior gradient with respect to the reward weights is carried
//! along by differentiating the Bayes ratio, so the learner can
//! differentiate through the whole inference chain.

use crate::error::{Error, Result};
use crate::game::{JointAction, Trajectory};
use crate::solver::LevelPolicySet;
use crate::tables::{axpy, Table2, Table3};

/// Per-agent distribution over candidate levels plus its weight gradient.
#[derive(Clone, Debug)]
pub struct LevelPosterior {
    /// Candidate levels, e.g. `[1, 2]`.
    levels: Vec<usize>,
    /// Number of observations folded in so far.
    step: usize,
    /// `num_agents x |levels|`, rows normalized.
    probs: Table2,
    /// `num_agents x |levels| x M`; per-agent column sums are zero.
    grad: Table3,
}

impl LevelPosterior {
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn num_agents(&self) -> usize {
        self.probs.rows()
    }

    pub fn weight_dim(&self) -> usize {
        self.grad.dims().2
    }

    /// Posterior probability that `agent` reasons at `level`.
    pub fn prob(&self, agent: usize, level: usize) -> f64 {
        let j = self.level_index(level);
        self.probs.get(agent, j)
    }

    pub fn probs_row(&self, agent: usize) -> &[f64] {
        self.probs.row(agent)
    }

    pub fn grad_row(&self, agent: usize, level: usize) -> &[f64] {
        self.grad.slab(agent, self.level_index(level))
    }

    /// Maximum a-posteriori level for one agent; earliest level wins ties.
    pub fn map_level(&self, agent: usize) -> usize {
        let row = self.probs.row(agent);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        self.levels[best]
    }

    fn level_index(&self, level: usize) -> usize {
        self.levels
            .iter()
            .position(|&k| k == level)
            .unwrap_or_else(|| panic!("level {level} not tracked by this posterior"))
    }
}

/// Uniform prior over levels `1..=k_max` with a zero gradient.
pub fn init_posterior(num_agents: usize, k_max: usize, weight_dim: usize) -> LevelPosterior {
    init_posterior_with_levels(num_agents, (1..=k_max).collect(), weight_dim)
}

/// Uniform prior over an explicit level set (may include level 0).
pub fn init_posterior_with_levels(
    num_agents: usize,
    levels: Vec<usize>,
    weight_dim: usize,
) -> LevelPosterior {
    assert!(!levels.is_empty(), "level set must be nonempty");
    let k = levels.len();
    let mut probs = Table2::zeros(num_agents, k);
    for i in 0..num_agents {
        probs.row_mut(i).fill(1.0 / k as f64);
    }
    LevelPosterior {
        levels,
        step: 0,
        probs,
        grad: Table3::zeros(num_agents, k, weight_dim),
    }
}

/// One Bayes step on an observed (state, joint action) pair.
///
/// Agents update independently. When `policies` carries gradients the
/// posterior gradient is updated by the quotient rule; otherwise it stays
/// zero.
pub fn update_posterior(
    post: &LevelPosterior,
    policies: &LevelPolicySet,
    state: usize,
    joint: &JointAction,
) -> Result<LevelPosterior> {
    let n = post.num_agents();
    if policies.num_agents() != n {
        return Err(Error::InvalidInput(format!(
            "posterior tracks {n} agents, policy set has {}",
            policies.num_agents()
        )));
    }
    if post.levels.iter().any(|&k| k > policies.k_max()) {
        return Err(Error::InvalidInput(format!(
            "posterior levels {:?} exceed the solved k_max {}",
            post.levels,
            policies.k_max()
        )));
    }
    let m = post.weight_dim();
    let nk = post.levels.len();
    let with_grads = policies.has_gradients();

    let mut next = post.clone();
    next.step += 1;
    let mut numer = vec![0.0f64; nk];
    let mut numer_grad = vec![0.0f64; nk * m];
    for agent in 0..n {
        let a = joint.agent(agent);
        numer_grad.fill(0.0);
        let mut denom = 0.0;
        for (j, &k) in post.levels.iter().enumerate() {
            let lik = policies.policy(agent, k).get(state, a);
            let prior = post.probs.get(agent, j);
            numer[j] = lik * prior;
            denom += numer[j];
            if with_grads {
                let g = &mut numer_grad[j * m..(j + 1) * m];
                axpy(g, prior, policies.policy_grad(agent, k).slab(state, a));
                axpy(g, lik, post.grad.slab(agent, j));
            }
        }
        if denom <= f64::MIN_POSITIVE {
            return Err(Error::Degeneracy(format!(
                "all level likelihoods vanished for agent {agent} at state {state}"
            )));
        }
        let mut denom_grad = vec![0.0f64; m];
        if with_grads {
            for j in 0..nk {
                axpy(&mut denom_grad, 1.0, &numer_grad[j * m..(j + 1) * m]);
            }
        }
        for j in 0..nk {
            let p = numer[j] / denom;
            next.probs.set(agent, j, p);
            if with_grads {
                let out = next.grad.slab_mut(agent, j);
                for (o, (&ng, &dg)) in out
                    .iter_mut()
                    .zip(numer_grad[j * m..(j + 1) * m].iter().zip(&denom_grad))
                {
                    *o = (ng - p * dg) / denom;
                }
            }
        }
    }
    Ok(next)
}

/// Folds the Bayes update over a whole trajectory and returns the final
/// posterior with its gradient. Requires a gradient-bearing policy set.
pub fn infer_trajectory(traj: &Trajectory, policies: &LevelPolicySet) -> Result<LevelPosterior> {
    if !policies.has_gradients() {
        return Err(Error::InvalidInput(
            "infer_trajectory needs policy gradients; use infer_trajectory_probs".into(),
        ));
    }
    fold_trajectory(traj, policies).map(|steps| steps.into_iter().last().unwrap())
}

/// Probability-only variant for policy sets solved without gradients.
pub fn infer_trajectory_probs(
    traj: &Trajectory,
    policies: &LevelPolicySet,
) -> Result<LevelPosterior> {
    fold_trajectory(traj, policies).map(|steps| steps.into_iter().last().unwrap())
}

/// Posterior after every prefix of the trajectory; index 0 is the prior.
pub fn infer_trajectory_steps(
    traj: &Trajectory,
    policies: &LevelPolicySet,
) -> Result<Vec<LevelPosterior>> {
    fold_trajectory(traj, policies)
}

fn fold_trajectory(traj: &Trajectory, policies: &LevelPolicySet) -> Result<Vec<LevelPosterior>> {
    let mut post = init_posterior(
        policies.num_agents(),
        policies.k_max(),
        policies.weight_dim(),
    );
    let mut steps = Vec::with_capacity(traj.len() + 1);
    steps.push(post.clone());
    for (&s, ja) in traj.states.iter().zip(&traj.joint_actions) {
        post = update_posterior(&post, policies, s, ja)?;
        steps.push(post.clone());
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{LevelPolicySet, LevelTable};

    /// Policy set over one state with fixed per-level action likelihoods;
    /// level 0 is a filler so that levels 1..=k_max are meaningful.
    fn toy_policies(per_level: &[Vec<f64>]) -> LevelPolicySet {
        let k_max = per_level.len() - 1;
        let mut tables = Vec::new();
        for _agent in 0..2 {
            for row in per_level {
                tables.push(LevelTable {
                    q: Table2::zeros(1, row.len()),
                    policy: Table2::from_rows(vec![row.clone()]),
                    q_grad: Table3::zeros(1, row.len(), 2),
                    policy_grad: Table3::zeros(1, row.len(), 2),
                });
            }
        }
        LevelPolicySet::from_parts(2, k_max, 2, tables).unwrap()
    }

    #[test]
    fn prior_is_uniform_with_zero_gradient() {
        let post = init_posterior(2, 2, 4);
        assert_eq!(post.levels(), &[1, 2]);
        for agent in 0..2 {
            assert_eq!(post.probs_row(agent), &[0.5, 0.5]);
            for level in [1, 2] {
                assert!(post.grad_row(agent, level).iter().all(|&g| g == 0.0));
            }
        }
        assert_eq!(post.step(), 0);
    }

    #[test]
    fn degenerate_level_set_stays_certain() {
        let pols = toy_policies(&[vec![0.5, 0.5], vec![0.8, 0.2]]);
        let mut post = init_posterior(2, 1, 2);
        assert_eq!(post.probs_row(0), &[1.0]);
        for _ in 0..5 {
            post = update_posterior(&post, &pols, 0, &JointAction(vec![0, 0])).unwrap();
            assert_eq!(post.prob(0, 1), 1.0);
        }
    }

    #[test]
    fn bayes_update_matches_hand_computation() {
        // prior (0.5, 0.5), likelihoods (0.8, 0.2) for action 0
        let pols = toy_policies(&[
            vec![0.5, 0.5],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
        ]);
        let post = init_posterior(2, 2, 2);
        let next = update_posterior(&post, &pols, 0, &JointAction(vec![0, 0])).unwrap();
        assert!((next.prob(0, 1) - 0.8).abs() < 1e-12);
        assert!((next.prob(0, 2) - 0.2).abs() < 1e-12);
        assert_eq!(next.step(), 1);
    }

    #[test]
    fn equal_likelihoods_leave_posterior_unchanged() {
        let pols = toy_policies(&[
            vec![0.5, 0.5],
            vec![0.6, 0.4],
            vec![0.6, 0.4],
        ]);
        let post = init_posterior(2, 2, 2);
        let next = update_posterior(&post, &pols, 0, &JointAction(vec![0, 1])).unwrap();
        assert!((next.prob(0, 1) - 0.5).abs() < 1e-12);
        assert!((next.prob(1, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn repeated_evidence_multiplies_posterior_odds() {
        // per-step likelihood ratio r = 0.8 / 0.4 = 2 for action 0
        let pols = toy_policies(&[
            vec![0.5, 0.5],
            vec![0.8, 0.2],
            vec![0.4, 0.6],
        ]);
        let mut post = init_posterior(2, 2, 2);
        let steps = 6;
        for _ in 0..steps {
            post = update_posterior(&post, &pols, 0, &JointAction(vec![0, 0])).unwrap();
        }
        let odds = post.prob(0, 1) / post.prob(0, 2);
        let expected = 2f64.powi(steps); // prior odds 1
        assert!((odds / expected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn monotone_evidence_gives_monotone_posterior() {
        let pols = toy_policies(&[
            vec![0.5, 0.5],
            vec![0.7, 0.3],
            vec![0.5, 0.5],
        ]);
        let mut post = init_posterior(2, 2, 2);
        let mut prev = post.prob(0, 1);
        for _ in 0..10 {
            post = update_posterior(&post, &pols, 0, &JointAction(vec![0, 0])).unwrap();
            let cur = post.prob(0, 1);
            assert!(cur > prev);
            prev = cur;
        }
    }
}
