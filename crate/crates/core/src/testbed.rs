//! Small closed-form test problems with brute-force answers: a two-agent
//! 3×3 matrix game learned by the fast-loop actor, and a two-timescale
//! quadratic used for gradient-norm trend and estimator checks.

use serde::{Deserialize, Serialize};

use crate::config::ControlConfig;
use crate::control::{fast_update, Actor, Critic, PolicyParams, SelectMode, Transition};
use crate::linalg::{dot, matvec, matvec_t};
use crate::rng::SimRng;

/// Stream ids used only by the test problems.
pub mod streams {
    pub const GAME_ACTIONS: u64 = 10_000;
    pub const QUADRATIC_NOISE: u64 = 11_000;
    pub const ESTIMATOR: u64 = 12_000;
}

/// Two-player game with three actions each. `payoff[a1][a2] = (r1, r2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    pub payoff: [[(f64, f64); 3]; 3],
}

impl MatrixGame {
    /// Fixed game with a unique pure equilibrium at (1, 2). Row 1 strictly
    /// dominates for player 1; player 2 must then best-respond, which differs
    /// from its best reply to a uniform opponent.
    pub fn reference() -> Self {
        let r1 = [[0.2, 0.5, 0.3], [0.4, 0.7, 0.5], [0.3, 0.6, 0.1]];
        let r2 = [[0.6, 0.2, 0.1], [0.1, 0.3, 0.8], [0.2, 0.9, 0.4]];
        let mut payoff = [[(0.0, 0.0); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                payoff[a][b] = (r1[a][b], r2[a][b]);
            }
        }
        Self { payoff }
    }

    /// All pure Nash equilibria, by enumeration of the 9 joint actions.
    pub fn pure_nash(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                let (r1, r2) = self.payoff[a][b];
                let best1 = (0..3).all(|x| self.payoff[x][b].0 <= r1);
                let best2 = (0..3).all(|y| self.payoff[a][y].1 <= r2);
                if best1 && best2 {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Learning settings for [`play_matrix_game`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSettings {
    pub slots: u64,
    /// Constant fast-loop step size.
    pub eta: f64,
    /// Slots per fast update.
    pub batch: usize,
    /// Trailing fraction of slots averaged for the converged payoff.
    pub tail_fraction: f64,
    pub control: ControlConfig,
}

impl Default for GameSettings {
    fn default() -> Self {
        Self {
            slots: 50_000,
            eta: 0.5,
            batch: 10,
            tail_fraction: 0.1,
            control: ControlConfig {
                entropy_weight: 1e-3,
                discount: 0.0,
                explore_floor: 0.0,
                ..ControlConfig::default()
            },
        }
    }
}

/// Result of one learning run on a matrix game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    /// Joint argmax of the final actors' logits.
    pub greedy: (usize, usize),
    /// Mean realized payoff per player over the trailing window.
    pub tail_payoff: (f64, f64),
}

/// Independent fast-loop learners on a stateless game: each slot both
/// actors sample an action, receive their payoff, and every `batch` slots
/// `fast_update` is applied to the two trajectories.
pub fn play_matrix_game(game: &MatrixGame, seed: u64, settings: &GameSettings) -> GameOutcome {
    let feature = vec![1.0];
    let mut params = PolicyParams {
        actors: vec![Actor::zeros(3, 1, settings.control.explore_floor); 2],
        critics: vec![Critic::zeros(1); 2],
        version: 0,
    };
    let mut rngs = [
        SimRng::for_agent(seed, streams::GAME_ACTIONS, 0),
        SimRng::for_agent(seed, streams::GAME_ACTIONS, 1),
    ];
    let tail_start = settings.slots - (settings.slots as f64 * settings.tail_fraction) as u64;
    let (mut sum, mut count) = ((0.0, 0.0), 0u64);
    let mut trajs: Vec<Vec<Transition>> = vec![Vec::new(), Vec::new()];
    for t in 0..settings.slots {
        let (a1, lp1) = params.actors[0].select(&feature, &mut rngs[0], SelectMode::Sample);
        let (a2, lp2) = params.actors[1].select(&feature, &mut rngs[1], SelectMode::Sample);
        let (r1, r2) = game.payoff[a1][a2];
        if t >= tail_start {
            sum.0 += r1;
            sum.1 += r2;
            count += 1;
        }
        for (i, (a, lp, r)) in [(a1, lp1, r1), (a2, lp2, r2)].into_iter().enumerate() {
            trajs[i].push(Transition {
                features: feature.clone(),
                action: a,
                logprob: lp,
                reward: r,
                summary: feature.clone(),
            });
        }
        if trajs[0].len() >= settings.batch {
            if let Ok(next) = fast_update(&params, &trajs, settings.eta, &settings.control) {
                params = next;
            }
            trajs.iter_mut().for_each(Vec::clear);
        }
    }
    let greedy = |i: usize| params.actors[i].select(&feature, &mut SimRng::new(0, 0), SelectMode::Greedy).0;
    let n = count.max(1) as f64;
    GameOutcome {
        greedy: (greedy(0), greedy(1)),
        tail_payoff: (sum.0 / n, sum.1 / n),
    }
}

/// Smooth two-timescale objective
/// `J(x, y) = ½ h_x ‖x − B y‖² + ½ h_y ‖y − y*‖²` with fast variable `x`,
/// slow variable `y`, and additive Gaussian gradient noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub h_x: f64,
    pub h_y: f64,
    /// `dim × dim`, row-major.
    pub b: Vec<f64>,
    pub y_star: Vec<f64>,
    pub noise_std: f64,
}

impl Quadratic {
    pub fn reference() -> Self {
        Self {
            h_x: 1.0,
            h_y: 0.5,
            b: vec![0.5, 0.2, -0.3, 0.4],
            y_star: vec![1.0, -1.0],
            noise_std: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.y_star.len()
    }

    pub fn optimum(&self) -> (Vec<f64>, Vec<f64>) {
        (matvec(&self.b, self.dim(), self.dim(), &self.y_star), self.y_star.clone())
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.residual(x, y);
        let e: Vec<f64> = y.iter().zip(&self.y_star).map(|(a, b)| a - b).collect();
        0.5 * self.h_x * dot(&r, &r) + 0.5 * self.h_y * dot(&e, &e)
    }

    fn residual(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let by = matvec(&self.b, self.dim(), self.dim(), y);
        x.iter().zip(&by).map(|(a, b)| a - b).collect()
    }

    /// Exact gradient, `x` block first.
    pub fn gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let r = self.residual(x, y);
        let mut g: Vec<f64> = r.iter().map(|v| self.h_x * v).collect();
        let bt = matvec_t(&self.b, d, d, &r);
        g.extend(
            (0..d).map(|i| -self.h_x * bt[i] + self.h_y * (y[i] - self.y_star[i])),
        );
        g
    }

    /// One noisy gradient sample.
    pub fn noisy_gradient(&self, x: &[f64], y: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let mut g = self.gradient(x, y);
        for v in &mut g {
            *v += self.noise_std * rng.normal();
        }
        g
    }
}

/// Unbiased estimate of `‖∇J‖²` from `m ≥ 2` noisy gradients:
/// `‖ḡ‖² − tr(S)/m` with `S` the sample covariance.
pub fn gradnorm_sq_estimate(problem: &Quadratic, x: &[f64], y: &[f64], m: usize, rng: &mut SimRng) -> f64 {
    assert!(m >= 2, "estimator needs at least two samples");
    let samples: Vec<Vec<f64>> = (0..m).map(|_| problem.noisy_gradient(x, y, rng)).collect();
    let dim = samples[0].len();
    let mean: Vec<f64> = (0..dim).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / m as f64).collect();
    let trace_s: f64 = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (m - 1) as f64;
    dot(&mean, &mean) - trace_s / m as f64
}

/// Settings for the two-timescale SGD trend experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSettings {
    pub eta0: f64,
    pub decay_p: f64,
    /// `γ_t / η_t`.
    pub c_ratio: f64,
    pub replicas: usize,
    /// Estimator sample count at each checkpoint.
    pub m: usize,
    /// Checkpoints per decade of `t`.
    pub per_decade: usize,
    pub horizon: u64,
}

impl Default for TrendSettings {
    fn default() -> Self {
        Self {
            eta0: 1.0,
            decay_p: 0.5,
            c_ratio: 0.1,
            replicas: 100,
            m: 2_000,
            per_decade: 8,
            horizon: 100_000,
        }
    }
}

/// Log-spaced checkpoints from 10 to `horizon` inclusive.
pub fn checkpoints(horizon: u64, per_decade: usize) -> Vec<u64> {
    let top = (horizon as f64).log10();
    let n = ((top - 1.0) * per_decade as f64).round() as usize;
    let mut out: Vec<u64> = (0..=n)
        .map(|i| 10f64.powf(1.0 + (top - 1.0) * i as f64 / n.max(1) as f64).round() as u64)
        .collect();
    out.dedup();
    out
}

/// Replica-averaged gradient-norm² estimates at each checkpoint of
/// two-timescale SGD (`x` with `η_t`, `y` with `γ_t = c η_t`) from the origin.
pub fn gradnorm_trend(problem: &Quadratic, seed: u64, s: &TrendSettings) -> Vec<(u64, f64)> {
    let cps = checkpoints(s.horizon, s.per_decade);
    let d = problem.dim();
    let mut sums = vec![0.0; cps.len()];
    for r in 0..s.replicas {
        let mut noise = SimRng::for_agent(seed, streams::QUADRATIC_NOISE, r);
        let mut probe = SimRng::for_agent(seed, streams::ESTIMATOR, r);
        let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
        let mut next = 0;
        for t in 0..s.horizon {
            let eta = s.eta0 / (1.0 + t as f64).powf(s.decay_p);
            let g = problem.noisy_gradient(&x, &y, &mut noise);
            for i in 0..d {
                x[i] -= eta * g[i];
                y[i] -= s.c_ratio * eta * g[d + i];
            }
            if next < cps.len() && t + 1 == cps[next] {
                sums[next] += gradnorm_sq_estimate(problem, &x, &y, s.m, &mut probe);
                next += 1;
            }
        }
    }
    cps.into_iter()
        .zip(sums)
        .map(|(t, v)| (t, v / s.replicas as f64))
        .collect()
}

/// Running minimum of a trend: entry `i` is the min over checkpoints `≤ i`.
pub fn running_min(trend: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let mut best = f64::INFINITY;
    trend
        .iter()
        .map(|&(t, v)| {
            best = best.min(v);
            (t, best)
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`. Non-positive `y` are skipped.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Sample variance of the estimator at a fixed point for each `m`.
pub fn estimator_variance(problem: &Quadratic, x: &[f64], y: &[f64], ms: &[usize], draws: usize, seed: u64) -> Vec<(usize, f64)> {
    ms.iter()
        .enumerate()
        .map(|(k, &m)| {
            let mut rng = SimRng::for_agent(seed, streams::ESTIMATOR, 100_000 + k);
            let v: Vec<f64> = (0..draws).map(|_| gradnorm_sq_estimate(problem, x, y, m, &mut rng)).collect();
            let mean = v.iter().sum::<f64>() / draws as f64;
            let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            (m, var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_game_has_unique_equilibrium() {
        assert_eq!(MatrixGame::reference().pure_nash(), vec![(1, 2)]);
    }

    #[test]
    fn matching_pennies_has_no_pure_equilibrium() {
        let mut payoff = [[(0.0, 0.0); 3]; 3];
        for (a, row) in payoff.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                let win = (a + 3 - b) % 3 == 1;
                let lose = (b + 3 - a) % 3 == 1;
                *cell = if win { (1.0, 0.0) } else if lose { (0.0, 1.0) } else { (0.5, 0.5) };
            }
        }
        assert!(MatrixGame { payoff }.pure_nash().is_empty());
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let q = Quadratic::reference();
        let (x, y) = (vec![0.3, -0.7], vec![1.4, 0.2]);
        let g = q.gradient(&x, &y);
        let h = 1e-6;
        let mut z: Vec<f64> = x.iter().chain(&y).copied().collect();
        for k in 0..4 {
            let orig = z[k];
            z[k] = orig + h;
            let fp = q.value(&z[..2], &z[2..]);
            z[k] = orig - h;
            let fm = q.value(&z[..2], &z[2..]);
            z[k] = orig;
            assert!(((fp - fm) / (2.0 * h) - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let q = Quadratic::reference();
        let (x, y) = q.optimum();
        assert!(q.gradient(&x, &y).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn estimator_shrinks_at_optimum() {
        let q = Quadratic::reference();
        let (x, y) = q.optimum();
        let mean_abs = |m: usize| {
            let mut rng = SimRng::new(3, streams::ESTIMATOR);
            (0..200).map(|_| gradnorm_sq_estimate(&q, &x, &y, m, &mut rng).abs()).sum::<f64>() / 200.0
        };
        let (a, b, c) = (mean_abs(10), mean_abs(100), mean_abs(1000));
        assert!(a > b && b > c && c < 0.01, "{a} {b} {c}");
    }

    #[test]
    fn estimator_is_unbiased_away_from_optimum() {
        let q = Quadratic::reference();
        let (x, y) = (vec![0.0; 2], vec![0.0; 2]);
        let truth = dot(&q.gradient(&x, &y), &q.gradient(&x, &y));
        let mut rng = SimRng::new(4, streams::ESTIMATOR);
        let n = 4000;
        let mean = (0..n).map(|_| gradnorm_sq_estimate(&q, &x, &y, 5, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - truth).abs() < 0.1 * truth, "{mean} vs {truth}");
    }

    #[test]
    fn checkpoints_are_log_spaced() {
        let c = checkpoints(100_000, 2);
        assert_eq!(c, vec![10, 32, 100, 316, 1000, 3162, 10_000, 31_623, 100_000]);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let pts: Vec<(f64, f64)> = (1..20).map(|i| (i as f64, 3.0 * (i as f64).powf(-0.7))).collect();
        assert!((loglog_slope(&pts).unwrap() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn running_min_is_monotone() {
        let r = running_min(&[(1, 3.0), (2, 1.0), (3, 2.0)]);
        assert_eq!(r, vec![(1, 3.0), (2, 1.0), (3, 1.0)]);
    }
}
