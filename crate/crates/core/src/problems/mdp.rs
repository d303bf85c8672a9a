//! Tabular discounted MDP under a softmax policy.
//!
//! The decision variable is the logit table `theta` (row major, `n_states x
//! n_actions`) and the minimized objective is `-J(theta)`. Level `eta` means a
//! trajectory of `eta` steps (horizon `T = eta - 1`).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, BoundFn, BoundModel, Objective, ProblemOracle};
use crate::rng::DrawRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    pub rho0: Vec<f64>,
}

impl TabularMdp {
    /// Random instance: transition rows from normalized exponentials, rewards uniform on `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        for row in transitions.iter_mut().flatten() {
            for p in row.iter_mut() {
                let u: f64 = rng.random();
                *p = -(1.0 - u).ln();
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
        }
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            rho0: vec![1.0 / n_states as f64; n_states],
        }
    }

    /// The shipped benchmark: 3 states, 2 actions, discount 0.9, seed 42.
    pub fn benchmark() -> Self {
        Self::random(3, 2, 0.9, 42)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::domain("MDP needs at least one state and one action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::domain(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        if self.transitions.len() != ns
            || self.rewards.len() != ns
            || self.rho0.len() != ns
            || self.rewards.iter().any(|r| r.len() != na)
        {
            return Err(Error::domain("MDP tables have inconsistent shapes"));
        }
        for (s, per_a) in self.transitions.iter().enumerate() {
            if per_a.len() != na {
                return Err(Error::domain("MDP tables have inconsistent shapes"));
            }
            for (a, row) in per_a.iter().enumerate() {
                if row.len() != ns || row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::domain(format!("invalid transition row ({s}, {a})")));
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::domain(format!("transition row ({s}, {a}) does not sum to 1")));
                }
            }
        }
        if self.rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::domain("rewards must be finite"));
        }
        if self.rho0.iter().any(|p| !(*p >= 0.0)) || (self.rho0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::domain("initial distribution must be a probability vector"));
        }
        Ok(())
    }

    /// `max |r(s, a)|`
    pub fn reward_bound(&self) -> f64 {
        self.rewards.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// `R C ((1 + T) gamma^(T+1) / (1 - gamma) + gamma^(T+1) / (1 - gamma)^2)`
pub fn lemma2_bound(t: u64, r: f64, c: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("discount must lie in (0, 1), got {gamma}")));
    }
    let g = gamma.powf(t as f64 + 1.0);
    let g1 = 1.0 - gamma;
    Ok(r * c * ((1.0 + t as f64) * g / g1 + g / (g1 * g1)))
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// One simulated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct MdpProblem {
    mdp: TabularMdp,
}

impl MdpProblem {
    pub fn new(mdp: TabularMdp) -> Result<Self> {
        mdp.validate()?;
        Ok(Self { mdp })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Row-wise softmax of the logit table.
    pub fn policy(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let na = self.mdp.n_actions;
        theta
            .chunks(na)
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    /// `max_{s,a} ||grad_theta log pi(a|s)||`
    pub fn score_bound(&self, theta: &[f64]) -> f64 {
        let pi = self.policy(theta);
        let mut c: f64 = 0.0;
        for row in &pi {
            for a in 0..row.len() {
                let n2: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(b, p)| if a == b { (1.0 - p).powi(2) } else { p * p })
                    .sum();
                c = c.max(n2.sqrt());
            }
        }
        c
    }

    fn policy_matrices(&self, pi: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
        let ns = self.mdp.n_states;
        let mut p = DMatrix::zeros(ns, ns);
        let mut r = DVector::zeros(ns);
        for s in 0..ns {
            for (a, pa) in pi[s].iter().enumerate() {
                r[s] += pa * self.mdp.rewards[s][a];
                for s2 in 0..ns {
                    p[(s, s2)] += pa * self.mdp.transitions[s][a][s2];
                }
            }
        }
        (p, r)
    }

    /// State values of the policy.
    pub fn values(&self, theta: &[f64]) -> Vec<f64> {
        let pi = self.policy(theta);
        let (p, r) = self.policy_matrices(&pi);
        let ns = self.mdp.n_states;
        let a = DMatrix::identity(ns, ns) - p * self.mdp.gamma;
        a.lu().solve(&r).expect("I - gamma P is nonsingular").as_slice().to_vec()
    }

    /// Unnormalized discounted visitation `d(s) = sum_t gamma^t Pr(s_t = s)`.
    pub fn discounted_visitation(&self, theta: &[f64]) -> Vec<f64> {
        let pi = self.policy(theta);
        let (p, _) = self.policy_matrices(&pi);
        let ns = self.mdp.n_states;
        let a = DMatrix::identity(ns, ns) - p.transpose() * self.mdp.gamma;
        let rho = DVector::from_column_slice(&self.mdp.rho0);
        a.lu().solve(&rho).expect("I - gamma P^T is nonsingular").as_slice().to_vec()
    }

    /// Expected discounted return `J(theta)` and its gradient.
    pub fn exact_policy_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (ns, na) = (self.mdp.n_states, self.mdp.n_actions);
        let pi = self.policy(theta);
        let v = self.values(theta);
        let d = self.discounted_visitation(theta);
        let mut grad = vec![0.0; ns * na];
        for s in 0..ns {
            for b in 0..na {
                let q: f64 = self.mdp.rewards[s][b]
                    + self.mdp.gamma
                        * (0..ns).map(|s2| self.mdp.transitions[s][b][s2] * v[s2]).sum::<f64>();
                grad[s * na + b] = d[s] * pi[s][b] * (q - v[s]);
            }
        }
        let j = self.mdp.rho0.iter().zip(&v).map(|(r, v)| r * v).sum();
        (j, grad)
    }

    /// Simulates `steps` steps. Each step consumes exactly two uniforms after
    /// the initial state, so shorter runs are prefixes of longer ones.
    pub fn simulate<R: Rng + ?Sized>(&self, pi: &[Vec<f64>], steps: usize, rng: &mut R) -> Vec<Step> {
        let mut out = Vec::with_capacity(steps);
        let mut s = sample_index(&self.mdp.rho0, rng.random());
        for _ in 0..steps {
            let a = sample_index(&pi[s], rng.random());
            out.push(Step {
                state: s,
                action: a,
                reward: self.mdp.rewards[s][a],
            });
            s = sample_index(&self.mdp.transitions[s][a], rng.random());
        }
        out
    }

    /// Truncated policy-gradient estimate of `grad J` (not negated) from one trajectory.
    pub fn truncated_gradient(&self, pi: &[Vec<f64>], traj: &[Step], out: &mut [f64]) {
        let na = self.mdp.n_actions;
        let gamma = self.mdp.gamma;
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut togo = 0.0;
        let mut disc = gamma.powi(traj.len() as i32 - 1);
        for step in traj.iter().rev() {
            togo = step.reward + gamma * togo;
            let w = disc * togo;
            let row = &mut out[step.state * na..(step.state + 1) * na];
            for (b, (o, p)) in row.iter_mut().zip(&pi[step.state]).enumerate() {
                let score = if b == step.action { 1.0 - p } else { -p };
                *o += w * score;
            }
            disc /= gamma;
        }
    }

    /// Bounds valid for every policy: the score norm never exceeds `sqrt(2)`.
    pub fn analytic_bounds(&self) -> BoundModel {
        let g = self.mdp.gamma;
        let rc = self.mdp.reward_bound() * 2f64.sqrt();
        let sigma = rc / ((1.0 - g) * (1.0 - g));
        BoundModel {
            hb: BoundFn::DiscountedTail { a: rc, gamma: g },
            hv: BoundFn::Constant { value: sigma },
            sigma,
            q: None,
            source: Default::default(),
        }
    }
}

impl ProblemOracle for MdpProblem {
    fn name(&self) -> &str {
        "mdp"
    }

    fn dimension(&self) -> usize {
        self.mdp.n_states * self.mdp.n_actions
    }

    fn cost(&self, eta: BiasLevel) -> u64 {
        eta.get()
    }

    fn draw_gradient(&self, x: &[f64], eta: BiasLevel, rng: &mut DrawRng, out: &mut [f64]) -> Result<()> {
        let pi = self.policy(x);
        let traj = self.simulate(&pi, eta.get() as usize, rng);
        self.truncated_gradient(&pi, &traj, out);
        out.iter_mut().for_each(|o| *o = -*o);
        Ok(())
    }

    fn exact_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.exact_policy_gradient(x).1.into_iter().map(|g| -g).collect())
    }

    fn objective(&self, x: &[f64]) -> Objective {
        Objective {
            value: -self.exact_policy_gradient(x).0,
            exact: true,
        }
    }
}
