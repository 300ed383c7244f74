//! Quantal level-k policy solver.
//!
//! For every agent and every reasoning level k = 0..k_max this module
//! computes a Q-table, the quantal (softmax) best-response policy, and the
//! analytic gradients of both with respect to the concatenated reward
//! weights. Level 0 is the non-strategic anchor: it evaluates the one-step
//! reward with all opponents held at their stationary action. A level-k
//! agent best-responds to opponents playing their level-(k-1) policies.
//!
//! The max over next-step actions is replaced by the smooth power
//! aggregate `(sum_a Q(s,a)^kappa)^(1/kappa)`, which upper-bounds the max
//! by at most a factor `|A|^(1/kappa)` and is differentiable on
//! nonnegative tables. Both the Q fixed point and its weight gradient are
//! found by synchronous value iteration from zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{decompose_rank, GameSpec, RewardModel};
use crate::tables::{axpy, Table2, Table3};

/// Solver parameters shared by every level solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Highest reasoning level to compute; inference runs over 1..=k_max.
    pub k_max: usize,
    /// Per-agent rationality coefficient in (0, 1].
    pub lambda: Vec<f64>,
    /// Smooth-max exponent, >= 1. Must satisfy
    /// `discount * |A|^(1/kappa) < 1` for the Bellman iteration to
    /// contract; see [`contraction_safe_kappa`].
    pub kappa: f64,
    /// Sup-norm tolerance for both value and gradient iteration.
    pub vi_tol: f64,
    /// Iteration cap; `None` derives a cap from the discount and tolerance.
    pub vi_max_iters: Option<usize>,
}

impl SolverConfig {
    pub fn for_agents(num_agents: usize) -> Self {
        Self {
            k_max: 2,
            lambda: vec![1.0; num_agents],
            kappa: 64.0,
            vi_tol: 1e-6,
            vi_max_iters: None,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_k_max(mut self, k_max: usize) -> Self {
        self.k_max = k_max;
        self
    }

    pub fn with_vi_tol(mut self, tol: f64) -> Self {
        self.vi_tol = tol;
        self
    }

    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::InvalidInput("k_max must be at least 1".into()));
        }
        if self.lambda.len() != spec.num_agents() {
            return Err(Error::InvalidInput(format!(
                "got {} lambda values, expected {}",
                self.lambda.len(),
                spec.num_agents()
            )));
        }
        if self.lambda.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::InvalidInput(
                "every lambda must lie in (0, 1]".into(),
            ));
        }
        if self.kappa < 1.0 {
            return Err(Error::InvalidInput("kappa must be >= 1".into()));
        }
        if self.vi_tol <= 0.0 {
            return Err(Error::InvalidInput("vi_tol must be positive".into()));
        }
        let max_a = *spec.action_counts().iter().max().unwrap() as f64;
        if spec.discount() * max_a.powf(1.0 / self.kappa) >= 1.0 {
            log::warn!(
                "kappa = {} is below the contraction bound {:.2} for discount {} and \
                 {} actions; value iteration may not converge",
                self.kappa,
                contraction_safe_kappa(spec.discount(), max_a as usize),
                spec.discount(),
                max_a
            );
        }
        Ok(())
    }

    pub fn max_iters(&self, spec: &GameSpec) -> usize {
        self.vi_max_iters.unwrap_or_else(|| {
            ((10.0 * (1.0 / self.vi_tol).ln()) / (1.0 - spec.discount())).ceil() as usize
        })
    }
}

/// Smallest exponent for which the smoothed Bellman operator is a
/// guaranteed sup-norm contraction: `kappa > ln|A| / ln(1/discount)`.
pub fn contraction_safe_kappa(discount: f64, num_actions: usize) -> f64 {
    (num_actions as f64).ln() / (1.0 / discount).ln()
}

/// Smooth aggregate of a nonnegative row: `(sum_a q_a^kappa)^(1/kappa)`,
/// computed against the row maximum so large exponents cannot overflow.
pub fn power_mean(row: &[f64], kappa: f64) -> f64 {
    let q_max = row.iter().fold(0.0f64, |m, &v| m.max(v));
    if q_max <= 0.0 {
        return 0.0;
    }
    let sum: f64 = row.iter().map(|&v| (v / q_max).powf(kappa)).sum();
    q_max * sum.powf(1.0 / kappa)
}

/// Partial derivatives of [`power_mean`] with respect to each row entry:
/// `(q_a / pm)^(kappa - 1)`, with the all-zero row mapped to zeros.
pub fn power_mean_weights(row: &[f64], pm: f64, kappa: f64, out: &mut [f64]) {
    debug_assert_eq!(row.len(), out.len());
    if pm <= 0.0 {
        out.fill(if kappa == 1.0 { 1.0 } else { 0.0 });
        return;
    }
    if kappa == 1.0 {
        out.fill(1.0);
        return;
    }
    for (o, &q) in out.iter_mut().zip(row) {
        *o = (q / pm).powf(kappa - 1.0);
    }
}

/// Softmax with rationality coefficient `lambda`, shifted by the row
/// maximum so the exponentials never overflow.
pub fn quantal_response(q_row: &[f64], lambda: f64, out: &mut [f64]) {
    debug_assert_eq!(q_row.len(), out.len());
    let q_max = q_row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &q) in out.iter_mut().zip(q_row) {
        let e = (lambda * (q - q_max)).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Q-table, quantal policy and their weight gradients for one
/// (agent, level) pair. Gradient tables are empty when the set was solved
/// policies-only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelTable {
    /// `|S| x |A_i|`.
    pub q: Table2,
    /// `|S| x |A_i|`, row-stochastic.
    pub policy: Table2,
    /// `|S| x |A_i| x M`.
    pub q_grad: Table3,
    /// `|S| x |A_i| x M`; rows sum to zero over actions.
    pub policy_grad: Table3,
}

/// Convergence record for one (agent, level) solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub agent: usize,
    pub level: usize,
    pub lambda: f64,
    pub q_iters: usize,
    pub q_residuals: Vec<f64>,
    pub grad_iters: usize,
    pub grad_residuals: Vec<f64>,
}

/// All (agent, level) tables for levels 0..=k_max.
#[derive(Clone, Debug)]
pub struct LevelPolicySet {
    num_agents: usize,
    k_max: usize,
    weight_dim: usize,
    has_gradients: bool,
    tables: Vec<LevelTable>,
    diagnostics: Vec<SolveDiagnostics>,
}

impl LevelPolicySet {
    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn weight_dim(&self) -> usize {
        self.weight_dim
    }

    pub fn has_gradients(&self) -> bool {
        self.has_gradients
    }

    fn index(&self, agent: usize, level: usize) -> usize {
        debug_assert!(agent < self.num_agents && level <= self.k_max);
        agent * (self.k_max + 1) + level
    }

    pub fn table(&self, agent: usize, level: usize) -> &LevelTable {
        &self.tables[self.index(agent, level)]
    }

    pub fn policy(&self, agent: usize, level: usize) -> &Table2 {
        &self.table(agent, level).policy
    }

    pub fn q_table(&self, agent: usize, level: usize) -> &Table2 {
        &self.table(agent, level).q
    }

    pub fn q_grad(&self, agent: usize, level: usize) -> &Table3 {
        &self.table(agent, level).q_grad
    }

    pub fn policy_grad(&self, agent: usize, level: usize) -> &Table3 {
        &self.table(agent, level).policy_grad
    }

    pub fn diagnostics(&self) -> &[SolveDiagnostics] {
        &self.diagnostics
    }

    /// Assembles a set from externally built tables (artifact loading and
    /// tests). Tables are indexed `agent * (k_max + 1) + level`.
    pub fn from_parts(
        num_agents: usize,
        k_max: usize,
        weight_dim: usize,
        tables: Vec<LevelTable>,
    ) -> Result<Self> {
        if tables.len() != num_agents * (k_max + 1) {
            return Err(Error::InvalidInput(format!(
                "expected {} tables, got {}",
                num_agents * (k_max + 1),
                tables.len()
            )));
        }
        let has_gradients = tables.iter().all(|t| !t.policy_grad.is_empty());
        Ok(Self {
            num_agents,
            k_max,
            weight_dim,
            has_gradients,
            tables,
            diagnostics: Vec::new(),
        })
    }

    pub fn into_tables(self) -> Vec<LevelTable> {
        self.tables
    }
}

/// Opponent artifacts from the previous level, one entry per agent `j != i`.
pub struct OpponentPrev<'a> {
    pub agent: usize,
    pub policy: &'a Table2,
    pub policy_grad: Option<&'a Table3>,
}

/// Solves the non-strategic anchor level for one agent: the Q-value of an
/// action is the reward of the state reached when every opponent takes its
/// stationary action.
pub fn solve_level0(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
    agent: usize,
) -> Result<LevelTable> {
    config.validate(spec)?;
    spec.check_agent_state(agent, 0)?;
    Ok(level0_table(spec, model, config.lambda[agent], agent, true))
}

/// Solves one agent's level-k tables given all opponents' level-(k-1)
/// policies (and, for gradient output, their policy gradients).
pub fn solve_level_k(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
    agent: usize,
    k: usize,
    opponents: &[OpponentPrev<'_>],
) -> Result<LevelTable> {
    config.validate(spec)?;
    spec.check_agent_state(agent, 0)?;
    if k == 0 {
        return Err(Error::InvalidInput(
            "solve_level_k requires k >= 1; use solve_level0 for the anchor".into(),
        ));
    }
    let mut sorted: Vec<&OpponentPrev> = opponents.iter().collect();
    sorted.sort_by_key(|o| o.agent);
    let expected: Vec<usize> = (0..spec.num_agents()).filter(|&j| j != agent).collect();
    let got: Vec<usize> = sorted.iter().map(|o| o.agent).collect();
    if got != expected {
        return Err(Error::InvalidInput(format!(
            "expected opponent artifacts for agents {expected:?}, got {got:?}"
        )));
    }
    let grads = sorted.iter().all(|o| o.policy_grad.is_some());
    let policies: Vec<&Table2> = sorted.iter().map(|o| o.policy).collect();
    let pol_grads: Vec<&Table3> = if grads {
        sorted.iter().map(|o| o.policy_grad.unwrap()).collect()
    } else {
        Vec::new()
    };
    let (table, _diag) = levelk_table(
        spec,
        model,
        config,
        config.lambda[agent],
        agent,
        k,
        &expected,
        &policies,
        if grads { Some(&pol_grads) } else { None },
    )?;
    Ok(table)
}

/// Solves every agent at every level 0..=k_max, with gradients.
///
/// A level-k agent models its opponents' lower-level policies with its own
/// rationality coefficient, so when lambdas differ per agent the full level
/// hierarchy is re-solved per distinct lambda and each agent publishes the
/// tables from its own hierarchy. Equal lambdas share one hierarchy.
pub fn solve_all(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
) -> Result<LevelPolicySet> {
    solve_set(spec, model, config, true)
}

/// Like [`solve_all`] but skips gradient computation; the returned set has
/// empty gradient tables. Used where only action likelihoods are needed
/// (demo generation, finite-difference probes, regeneration).
pub fn solve_policies(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
) -> Result<LevelPolicySet> {
    solve_set(spec, model, config, false)
}

fn solve_set(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
    grads: bool,
) -> Result<LevelPolicySet> {
    config.validate(spec)?;
    let n = spec.num_agents();
    let levels = config.k_max + 1;

    // One hierarchy per distinct lambda, keyed by bit pattern.
    let mut hierarchies: Vec<(u64, Vec<LevelTable>, Vec<SolveDiagnostics>)> = Vec::new();
    for &lam in &config.lambda {
        let key = lam.to_bits();
        if hierarchies.iter().any(|(k, _, _)| *k == key) {
            continue;
        }
        let (tables, diags) = solve_hierarchy(spec, model, config, lam, grads)?;
        hierarchies.push((key, tables, diags));
    }

    let mut tables = Vec::with_capacity(n * levels);
    let mut diagnostics = Vec::new();
    for agent in 0..n {
        let key = config.lambda[agent].to_bits();
        let (_, h_tables, h_diags) = hierarchies.iter().find(|(k, _, _)| *k == key).unwrap();
        for level in 0..levels {
            tables.push(h_tables[agent * levels + level].clone());
        }
        diagnostics.extend(
            h_diags
                .iter()
                .filter(|d| d.agent == agent)
                .cloned()
                .map(|mut d| {
                    d.lambda = config.lambda[agent];
                    d
                }),
        );
    }

    Ok(LevelPolicySet {
        num_agents: n,
        k_max: config.k_max,
        weight_dim: spec.weight_dim(),
        has_gradients: grads,
        tables,
        diagnostics,
    })
}

/// All agents and levels under one shared rationality coefficient.
fn solve_hierarchy(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
    lambda: f64,
    grads: bool,
) -> Result<(Vec<LevelTable>, Vec<SolveDiagnostics>)> {
    let n = spec.num_agents();
    let levels = config.k_max + 1;
    let mut tables: Vec<Option<LevelTable>> = vec![None; n * levels];
    let mut diags = Vec::new();

    for agent in 0..n {
        tables[agent * levels] = Some(level0_table(spec, model, lambda, agent, grads));
    }
    for k in 1..levels {
        // Agents at the same level are independent given level k-1.
        let results: Vec<Result<(LevelTable, SolveDiagnostics)>> = (0..n)
            .map(|agent| {
                let opp_agents: Vec<usize> = (0..n).filter(|&j| j != agent).collect();
                let policies: Vec<&Table2> = opp_agents
                    .iter()
                    .map(|&j| &tables[j * levels + k - 1].as_ref().unwrap().policy)
                    .collect();
                let pol_grads: Vec<&Table3> = opp_agents
                    .iter()
                    .map(|&j| &tables[j * levels + k - 1].as_ref().unwrap().policy_grad)
                    .collect();
                levelk_table(
                    spec,
                    model,
                    config,
                    lambda,
                    agent,
                    k,
                    &opp_agents,
                    &policies,
                    if grads { Some(&pol_grads) } else { None },
                )
            })
            .collect();
        for (agent, res) in results.into_iter().enumerate() {
            let (table, diag) = res?;
            tables[agent * levels + k] = Some(table);
            diags.push(diag);
        }
    }
    Ok((tables.into_iter().map(Option::unwrap).collect(), diags))
}

fn level0_table(
    spec: &GameSpec,
    model: &RewardModel,
    lambda: f64,
    agent: usize,
    grads: bool,
) -> LevelTable {
    let s_count = spec.num_states();
    let na = spec.num_actions(agent);
    let m = spec.weight_dim();
    let off = spec.weight_offset(agent);
    let m_i = spec.feature_dims()[agent];

    let mut base = spec.stationary_actions().to_vec();
    let mut q = Table2::zeros(s_count, na);
    let mut q_grad = if grads {
        Table3::zeros(s_count, na, m)
    } else {
        Table3::empty()
    };
    for s in 0..s_count {
        for a in 0..na {
            base[agent] = a;
            let s2 = spec.successor_by_rank(s, spec.joint_rank(&base));
            let phi = spec.features(agent, s2);
            q.set(s, a, crate::tables::dot(model.agent_weights(spec, agent), phi));
            if grads {
                q_grad.slab_mut(s, a)[off..off + m_i].copy_from_slice(phi);
            }
        }
    }
    let policy = policy_from_q(&q, lambda);
    let policy_grad = if grads {
        policy_grad_from(&q_grad, &policy, lambda)
    } else {
        Table3::empty()
    };
    LevelTable {
        q,
        policy,
        q_grad,
        policy_grad,
    }
}

#[allow(clippy::too_many_arguments)]
fn levelk_table(
    spec: &GameSpec,
    model: &RewardModel,
    config: &SolverConfig,
    lambda: f64,
    agent: usize,
    level: usize,
    opp_agents: &[usize],
    opp_policies: &[&Table2],
    opp_policy_grads: Option<&Vec<&Table3>>,
) -> Result<(LevelTable, SolveDiagnostics)> {
    let s_count = spec.num_states();
    let na = spec.num_actions(agent);
    let m = spec.weight_dim();
    let kappa = config.kappa;
    let gamma = spec.discount();
    let tol = config.vi_tol;
    let max_iters = config.max_iters(spec);

    // Opponent joint-action combinations, their joint-rank contribution and
    // mixed probabilities (and probability gradients) per state.
    let opp_counts: Vec<usize> = opp_agents.iter().map(|&j| spec.num_actions(j)).collect();
    let n_opp: usize = opp_counts.iter().product::<usize>().max(1);
    let mut opp_strides = vec![1usize; opp_agents.len()];
    for i in (0..opp_agents.len().saturating_sub(1)).rev() {
        opp_strides[i] = opp_strides[i + 1] * opp_counts[i + 1];
    }
    let mut opp_rank_offset = vec![0usize; n_opp];
    let mut combo = vec![0usize; opp_agents.len()];
    for (r, offset) in opp_rank_offset.iter_mut().enumerate() {
        decompose_rank(r, &opp_counts, &opp_strides, &mut combo);
        *offset = combo
            .iter()
            .zip(opp_agents)
            .map(|(&a, &j)| a * spec.joint_stride(j))
            .sum();
    }
    let own_stride = spec.joint_stride(agent);

    let mut opp_prob = Table2::zeros(s_count, n_opp);
    for s in 0..s_count {
        let row = opp_prob.row_mut(s);
        for (r, p) in row.iter_mut().enumerate() {
            decompose_rank(r, &opp_counts, &opp_strides, &mut combo);
            *p = combo
                .iter()
                .zip(opp_policies)
                .map(|(&a, pol)| pol.get(s, a))
                .product();
        }
    }
    let opp_prob_grad = opp_policy_grads.map(|grads| {
        let mut g = Table3::zeros(s_count, n_opp, m);
        let mut combo = vec![0usize; opp_agents.len()];
        for s in 0..s_count {
            for r in 0..n_opp {
                decompose_rank(r, &opp_counts, &opp_strides, &mut combo);
                let slab = g.slab_mut(s, r);
                for (jj, (&a_j, grad_j)) in combo.iter().zip(grads).enumerate() {
                    let others: f64 = combo
                        .iter()
                        .zip(opp_policies.iter())
                        .enumerate()
                        .filter(|(ee, _)| *ee != jj)
                        .map(|(_, (&a_e, pol_e))| pol_e.get(s, a_e))
                        .product();
                    axpy(slab, others, grad_j.slab(s, a_j));
                }
            }
        }
        g
    });

    let reward: Vec<f64> = (0..s_count)
        .map(|s| crate::tables::dot(model.agent_weights(spec, agent), spec.features(agent, s)))
        .collect();

    // Value iteration for Q.
    let mut q = Table2::zeros(s_count, na);
    let mut q_next = Table2::zeros(s_count, na);
    let mut target = vec![0.0f64; s_count];
    let mut q_residuals = Vec::new();
    let mut converged = false;
    let mut q_iters = 0;
    while q_iters < max_iters {
        target
            .par_iter_mut()
            .enumerate()
            .for_each(|(s, t)| *t = reward[s] + gamma * power_mean(q.row(s), kappa));
        {
            let target = &target;
            let opp_prob = &opp_prob;
            let opp_rank_offset = &opp_rank_offset;
            q_next
                .as_mut_slice()
                .par_chunks_mut(na)
                .enumerate()
                .for_each(|(s, row)| {
                    let probs = opp_prob.row(s);
                    for (a, out) in row.iter_mut().enumerate() {
                        let base = a * own_stride;
                        let mut acc = 0.0;
                        for (r, &p) in probs.iter().enumerate() {
                            let s2 = spec.successor_by_rank(s, base + opp_rank_offset[r]);
                            acc += p * target[s2];
                        }
                        *out = acc;
                    }
                });
        }
        let residual = q.max_abs_diff(&q_next);
        q_residuals.push(residual);
        std::mem::swap(&mut q, &mut q_next);
        q_iters += 1;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            agent,
            level,
            residual: *q_residuals.last().unwrap_or(&f64::INFINITY),
            iters: q_iters,
        });
    }

    let policy = policy_from_q(&q, lambda);

    // Gradient recursion with Q frozen: a linear fixed point driven by the
    // same transition mix, the reward-feature blocks and the power-mean
    // partials.
    let mut grad_residuals = Vec::new();
    let mut grad_iters = 0;
    let (q_grad, policy_grad) = if let Some(opg) = &opp_prob_grad {
        target
            .par_iter_mut()
            .enumerate()
            .for_each(|(s, t)| *t = reward[s] + gamma * power_mean(q.row(s), kappa));
        let mut pmw = Table2::zeros(s_count, na);
        pmw.as_mut_slice()
            .par_chunks_mut(na)
            .enumerate()
            .for_each(|(s, row)| {
                let pm = power_mean(q.row(s), kappa);
                power_mean_weights(q.row(s), pm, kappa, row);
            });

        let off = spec.weight_offset(agent);
        let m_i = spec.feature_dims()[agent];
        let mut g = Table3::zeros(s_count, na, m);
        let mut g_next = Table3::zeros(s_count, na, m);
        let mut gpm = vec![0.0f64; s_count * m];
        let mut g_converged = false;
        while grad_iters < max_iters {
            {
                let g = &g;
                let pmw = &pmw;
                gpm.par_chunks_mut(m).enumerate().for_each(|(s, out)| {
                    out.fill(0.0);
                    let w = pmw.row(s);
                    for (a, &wa) in w.iter().enumerate() {
                        if wa != 0.0 {
                            axpy(out, wa, g.slab(s, a));
                        }
                    }
                });
            }
            {
                let target = &target;
                let opp_prob = &opp_prob;
                let opp_rank_offset = &opp_rank_offset;
                let gpm = &gpm;
                g_next
                    .as_mut_slice()
                    .par_chunks_mut(na * m)
                    .enumerate()
                    .for_each(|(s, plane)| {
                        let probs = opp_prob.row(s);
                        for a in 0..na {
                            let out = &mut plane[a * m..(a + 1) * m];
                            out.fill(0.0);
                            let base = a * own_stride;
                            for (r, &p) in probs.iter().enumerate() {
                                let s2 = spec.successor_by_rank(s, base + opp_rank_offset[r]);
                                axpy(out, target[s2], opg.slab(s, r));
                                let phi = spec.features(agent, s2);
                                for (o, &f) in out[off..off + m_i].iter_mut().zip(phi) {
                                    *o += p * f;
                                }
                                axpy(out, p * gamma, &gpm[s2 * m..(s2 + 1) * m]);
                            }
                        }
                    });
            }
            let residual = g.max_abs_diff(&g_next);
            grad_residuals.push(residual);
            std::mem::swap(&mut g, &mut g_next);
            grad_iters += 1;
            if !residual.is_finite() {
                break;
            }
            if residual < tol {
                g_converged = true;
                break;
            }
        }
        if !g_converged {
            return Err(Error::NonConvergence {
                agent,
                level,
                residual: *grad_residuals.last().unwrap_or(&f64::INFINITY),
                iters: grad_iters,
            });
        }
        let pg = policy_grad_from(&g, &policy, lambda);
        (g, pg)
    } else {
        (Table3::empty(), Table3::empty())
    };

    Ok((
        LevelTable {
            q,
            policy,
            q_grad,
            policy_grad,
        },
        SolveDiagnostics {
            agent,
            level,
            lambda,
            q_iters,
            q_residuals,
            grad_iters,
            grad_residuals,
        },
    ))
}

fn policy_from_q(q: &Table2, lambda: f64) -> Table2 {
    let mut policy = Table2::zeros(q.rows(), q.cols());
    for s in 0..q.rows() {
        quantal_response(q.row(s), lambda, policy.row_mut(s));
    }
    policy
}

/// Differentiates the quantal response:
/// `d pi(s,a) = lambda * pi(s,a) * (dQ(s,a) - sum_a' pi(s,a') dQ(s,a'))`.
fn policy_grad_from(q_grad: &Table3, policy: &Table2, lambda: f64) -> Table3 {
    let (s_count, na, m) = q_grad.dims();
    let mut out = Table3::zeros(s_count, na, m);
    let mut mean = vec![0.0f64; m];
    for s in 0..s_count {
        mean.fill(0.0);
        for a in 0..na {
            axpy(&mut mean, policy.get(s, a), q_grad.slab(s, a));
        }
        for a in 0..na {
            let slab = out.slab_mut(s, a);
            let p = lambda * policy.get(s, a);
            for ((o, &g), &mn) in slab.iter_mut().zip(q_grad.slab(s, a)).zip(&mean) {
                *o = p * (g - mn);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameStructure;

    /// Single agent (plus a dummy one-action opponent) on a two-state
    /// chain. From state 0, action 0 stays and action 1 moves to the
    /// terminal state 1. Features chosen so R(0) = 1, R(1) = 0.
    fn toy_spec() -> GameSpec {
        GameSpec::new(
            GameStructure {
                env_id: "toy".into(),
                num_states: 2,
                action_counts: vec![2, 1],
                discount: 0.5,
                dt: 1.0,
                feature_dims: vec![1, 1],
                stationary_actions: vec![0, 0],
            },
            |s, a| if s == 1 || a[0] == 1 { 1 } else { 0 },
            |s| s == 1,
            |_, s| vec![if s == 0 { 1.0 } else { 0.0 }],
        )
        .unwrap()
    }

    #[test]
    fn power_mean_matches_hand_value() {
        // (2^10 + 1^10)^(1/10) = 1025^0.1
        let pm = power_mean(&[2.0, 1.0], 10.0);
        assert!((pm - 1025f64.powf(0.1)).abs() < 1e-12);
        assert!((pm - 2.0002).abs() < 1e-4);
    }

    #[test]
    fn power_mean_brackets_the_max() {
        let rows = [vec![3.0, 1.0, 2.0], vec![0.5, 0.5, 0.5], vec![0.0, 0.0, 0.0]];
        for row in &rows {
            let max = row.iter().cloned().fold(0.0f64, f64::max);
            let pm = power_mean(row, 8.0);
            assert!(pm >= max - 1e-12);
            assert!(pm <= 3f64.powf(1.0 / 8.0) * max + 1e-12);
        }
    }

    #[test]
    fn power_mean_weights_handle_zero_row() {
        let mut w = [9.0; 3];
        power_mean_weights(&[0.0, 0.0, 0.0], 0.0, 8.0, &mut w);
        assert_eq!(w, [0.0; 3]);
        power_mean_weights(&[0.0, 0.0, 0.0], 0.0, 1.0, &mut w);
        assert_eq!(w, [1.0; 3]);
    }

    #[test]
    fn quantal_response_matches_two_action_hand_value() {
        let mut out = [0.0; 2];
        quantal_response(&[1.0, 0.0], 1.0, &mut out);
        assert!((out[0] - 0.731_058_578_63).abs() < 1e-9);
        assert!((out[1] - 0.268_941_421_37).abs() < 1e-9);
    }

    #[test]
    fn quantal_response_is_shift_invariant() {
        let q = [3.0, 1.0, 2.5, 0.0, 2.0];
        let shifted: Vec<f64> = q.iter().map(|v| v + 7.3).collect();
        let mut a = [0.0; 5];
        let mut b = [0.0; 5];
        quantal_response(&q, 0.8, &mut a);
        quantal_response(&shifted, 0.8, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_lambda_lowers_entropy() {
        let q = [1.0, 0.4, 0.2];
        let entropy = |p: &[f64]| -> f64 { p.iter().map(|&x| -x * x.ln()).sum() };
        let mut prev = f64::INFINITY;
        for lam in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let mut p = [0.0; 3];
            quantal_response(&q, lam, &mut p);
            let h = entropy(&p);
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn zero_weights_give_zero_q_and_uniform_policies() {
        let spec = toy_spec();
        let model = RewardModel::new(&spec, &[vec![0.0], vec![0.0]]).unwrap();
        let config = SolverConfig::for_agents(2);
        let set = solve_all(&spec, &model, &config).unwrap();
        for agent in 0..2 {
            for level in 0..=config.k_max {
                let t = set.table(agent, level);
                assert!(t.q.as_slice().iter().all(|&v| v == 0.0));
                let na = spec.num_actions(agent) as f64;
                for s in 0..spec.num_states() {
                    for a in 0..spec.num_actions(agent) {
                        assert!((t.policy.get(s, a) - 1.0 / na).abs() < 1e-12);
                    }
                    // gradient rows of a distribution sum to zero
                    let m = spec.weight_dim();
                    let mut col_sum = vec![0.0; m];
                    for a in 0..spec.num_actions(agent) {
                        axpy(&mut col_sum, 1.0, t.policy_grad.slab(s, a));
                    }
                    assert!(col_sum.iter().all(|v| v.abs() < 1e-8));
                }
            }
        }
    }

    #[test]
    fn level0_is_uniform_when_successor_rewards_are_equal() {
        // both actions of the dummy opponent-facing agent land in states
        // with identical reward when weights weigh only a constant feature
        let spec = GameSpec::new(
            GameStructure {
                env_id: "const".into(),
                num_states: 2,
                action_counts: vec![2, 1],
                discount: 0.5,
                dt: 1.0,
                feature_dims: vec![1, 1],
                stationary_actions: vec![0, 0],
            },
            |_, a| if a[0] == 1 { 1 } else { 0 },
            |_| false,
            |_, _| vec![1.0],
        )
        .unwrap();
        let model = RewardModel::new(&spec, &[vec![0.7], vec![0.3]]).unwrap();
        let t = solve_level0(&spec, &model, &SolverConfig::for_agents(2), 0).unwrap();
        assert!((t.policy.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((t.policy.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn level0_quantal_response_on_unit_reward_gap() {
        let spec = toy_spec();
        let model = RewardModel::new(&spec, &[vec![1.0], vec![0.0]]).unwrap();
        let t = solve_level0(&spec, &model, &SolverConfig::for_agents(2), 0).unwrap();
        // action 0 lands in state 0 (reward 1), action 1 in state 1 (reward 0)
        assert!((t.policy.get(0, 0) - 0.731_058_578_63).abs() < 1e-9);
    }

    #[test]
    fn solve_all_produces_row_stochastic_tables_of_expected_shape() {
        let spec = toy_spec();
        let model = RewardModel::new(&spec, &[vec![1.0], vec![0.5]]).unwrap();
        let config = SolverConfig::for_agents(2);
        let set = solve_all(&spec, &model, &config).unwrap();
        assert_eq!(set.num_agents(), 2);
        assert_eq!(set.k_max(), 2);
        for agent in 0..2 {
            for level in 0..=2 {
                let pol = set.policy(agent, level);
                assert_eq!(pol.rows(), spec.num_states());
                assert_eq!(pol.cols(), spec.num_actions(agent));
                for s in 0..pol.rows() {
                    let sum: f64 = pol.row(s).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(pol.row(s).iter().all(|&p| p > 0.0));
                }
            }
        }
    }

    #[test]
    fn equal_lambdas_share_one_hierarchy() {
        let spec = toy_spec();
        let model = RewardModel::new(&spec, &[vec![1.0], vec![0.5]]).unwrap();
        let config = SolverConfig::for_agents(2);
        let set = solve_all(&spec, &model, &config).unwrap();
        // agent 0's model of its level-1 opponent must equal the opponent's
        // own published level-1 policy when lambdas are equal; verify via
        // the public tables by re-solving agent 0 level 2 against them.
        let opp = OpponentPrev {
            agent: 1,
            policy: set.policy(1, 1),
            policy_grad: Some(set.policy_grad(1, 1)),
        };
        let t = solve_level_k(&spec, &model, &config, 0, 2, &[opp]).unwrap();
        assert!(t.q.max_abs_diff(set.q_table(0, 2)) < 1e-12);
    }

    #[test]
    fn diverging_kappa_reports_non_convergence() {
        // kappa = 1 turns the smooth max into a sum over two own actions;
        // with discount 0.9 the fixed point does not exist.
        let spec = GameSpec::new(
            GameStructure {
                env_id: "loop".into(),
                num_states: 1,
                action_counts: vec![2, 1],
                discount: 0.9,
                dt: 1.0,
                feature_dims: vec![1, 1],
                stationary_actions: vec![0, 0],
            },
            |s, _| s,
            |_| false,
            |_, _| vec![1.0],
        )
        .unwrap();
        let model = RewardModel::new(&spec, &[vec![1.0], vec![1.0]]).unwrap();
        let config = SolverConfig::for_agents(2).with_kappa(1.0);
        match solve_all(&spec, &model, &config) {
            Err(Error::NonConvergence { agent: _, level, residual, .. }) => {
                assert_eq!(level, 1);
                assert!(residual > 1.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
