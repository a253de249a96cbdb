//! Rewards over the final state of a rollout.
//!
//! Each reward is recorded on a tape so it can be differentiated with respect to
//! the final state tensors and, for heightfield tasks, the field parameters.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::state_graph::{NodeType, ParticleState, StateAux, StateVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Mean normal density of the active fluid around `mu`.
    GaussianGoal { mu: [f64; 2], sigma: f64 },
    /// Mean progress along `direction` from `center`, minus the spread across it.
    Direction {
        direction: [f64; 2],
        center: [f64; 2],
        gamma_r: f64,
    },
    /// Mean density of removed fluid around the nearest pool centre.
    Pools {
        centers: Vec<[f64; 2]>,
        sigma: f64,
        gamma_r: f64,
    },
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            RewardSpec::GaussianGoal { mu, sigma } => {
                if !(*sigma > 0.0) || !finite(mu) {
                    return Err(Error::config(
                        "gaussian goal needs a finite centre and sigma > 0",
                    ));
                }
            }
            RewardSpec::Direction {
                direction,
                center,
                gamma_r,
            } => {
                let norm = direction[0].hypot(direction[1]);
                if (norm - 1.0).abs() > 1e-9 || !finite(center) || !(*gamma_r >= 0.0) {
                    return Err(Error::config(
                        "direction must be a unit vector and gamma_r non-negative",
                    ));
                }
            }
            RewardSpec::Pools {
                centers,
                sigma,
                gamma_r,
            } => {
                if centers.is_empty() || !(*sigma > 0.0) || !(*gamma_r >= 0.0) {
                    return Err(Error::config(
                        "pools need at least one centre, sigma > 0 and gamma_r >= 0",
                    ));
                }
            }
        }
        Ok(())
    }

    fn gamma_r(&self) -> f64 {
        match self {
            RewardSpec::GaussianGoal { .. } => 0.0,
            RewardSpec::Direction { gamma_r, .. } | RewardSpec::Pools { gamma_r, .. } => *gamma_r,
        }
    }
}

/// Peak of the isotropic 2D normal density with per-axis std `sigma`.
pub fn normal_peak(sigma: f64) -> f64 {
    1.0 / (2.0 * PI * sigma * sigma)
}

/// Tape handles of a reward and its terms. `total = main - spread - regularizer`.
#[derive(Clone, Copy, Debug)]
pub struct RewardVars {
    pub total: Var,
    pub main: Var,
    pub spread: Option<Var>,
    pub regularizer: Option<Var>,
    /// No particle contributed to the main term, which is then defined as 0.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub raw: f64,
    pub normalized: f64,
    pub main: f64,
    pub spread: f64,
    pub regularizer: f64,
    pub empty: bool,
}

impl RewardReport {
    pub fn from_vars(tape: &Tape, vars: &RewardVars, baseline: f64) -> Result<Self> {
        let opt = |v: Option<Var>| {
            v.map(|v| tape.scalar_value(v))
                .transpose()
                .map(|x| x.unwrap_or(0.0))
        };
        let raw = tape.scalar_value(vars.total)?;
        Ok(RewardReport {
            raw,
            normalized: normalized(raw, baseline),
            main: tape.scalar_value(vars.main)?,
            spread: opt(vars.spread)?,
            regularizer: opt(vars.regularizer)?,
            empty: vars.empty,
        })
    }
}

/// Raw reward relative to the raw reward of the initial design.
pub fn normalized(raw: f64, initial: f64) -> f64 {
    raw - initial
}

fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn active_fluid(aux: &StateAux) -> Vec<usize> {
    aux.node_types
        .iter()
        .zip(aux.removed.iter())
        .enumerate()
        .filter(|(_, (t, r))| **t == NodeType::Fluid && !**r)
        .map(|(i, _)| i)
        .collect()
}

fn removed_fluid(aux: &StateAux) -> Vec<usize> {
    aux.node_types
        .iter()
        .zip(aux.removed.iter())
        .enumerate()
        .filter(|(_, (t, r))| **t == NodeType::Fluid && **r)
        .map(|(i, _)| i)
        .collect()
}

/// Mean over rows of `points: [n, 2]` of the normal density around the matching rows of `centers: [n, 2]`.
fn mean_density(tape: &Tape, points: Var, centers: Var, sigma: f64) -> Result<Var> {
    let diff = tape.sub(points, centers)?;
    let r2 = tape.row_sum(tape.square(diff)?)?;
    let density = tape.scale(
        tape.exp(tape.scale(r2, -0.5 / (sigma * sigma))?)?,
        normal_peak(sigma),
    )?;
    tape.mean(density)
}

fn broadcast(tape: &Tape, row: [f64; 2], n: usize) -> Var {
    tape.constant(Tensor::from_parts(vec![n, 2], row.repeat(n)))
}

/// Gaussian goal reward on the rows `indices` of `positions`.
pub fn gaussian_goal_on_tape(
    tape: &Tape,
    positions: Var,
    indices: &[usize],
    mu: [f64; 2],
    sigma: f64,
) -> Result<(Var, bool)> {
    if indices.is_empty() {
        return Ok((zero(tape), true));
    }
    let pts = tape.gather(positions, Arc::from(indices))?;
    Ok((
        mean_density(tape, pts, broadcast(tape, mu, indices.len()), sigma)?,
        false,
    ))
}

/// Mean squared forward difference of a `[M]` or `[M, 1]` field.
pub fn smoothness_on_tape(tape: &Tape, field: Var) -> Result<Var> {
    let m = tape.shape(field).iter().product::<usize>();
    if m < 2 {
        return Ok(zero(tape));
    }
    let f = tape.reshape(field, vec![m, 1])?;
    let d = tape.sub(tape.slice(f, 0, 1, m)?, tape.slice(f, 0, 0, m - 1)?)?;
    tape.mean(tape.square(d)?)
}

/// Plain-value version of [`smoothness_on_tape`].
pub fn smoothness(field: &[f64]) -> f64 {
    if field.len() < 2 {
        return 0.0;
    }
    field.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (field.len() - 1) as f64
}

/// Records the reward of a final state on `tape`.
///
/// `state` holds the final `[positions, history, removed_positions]`; `field` is
/// the heightfield parameter vector for tasks with a regularizer.
pub fn reward_on_tape(
    tape: &Tape,
    spec: &RewardSpec,
    state: &[Var],
    aux: &StateAux,
    field: Option<Var>,
) -> Result<RewardVars> {
    spec.validate()?;
    let s = StateVars::from_slice(state)?;
    let regularizer = match field {
        Some(f) if spec.gamma_r() > 0.0 => {
            Some(tape.scale(smoothness_on_tape(tape, f)?, spec.gamma_r())?)
        }
        _ => None,
    };
    let (main, spread, empty) = match spec {
        RewardSpec::GaussianGoal { mu, sigma } => {
            let (main, empty) =
                gaussian_goal_on_tape(tape, s.positions, &active_fluid(aux), *mu, *sigma)?;
            (main, None, empty)
        }
        RewardSpec::Direction {
            direction, center, ..
        } => {
            let idx = active_fluid(aux);
            if idx.is_empty() {
                (zero(tape), None, true)
            } else {
                let n = idx.len();
                let pts = tape.gather(s.positions, Arc::from(idx))?;
                let rel = tape.sub(pts, broadcast(tape, *center, n))?;
                let [dx, dy] = *direction;
                let basis = tape.constant(Tensor::from_parts(vec![2, 2], vec![dx, -dy, dy, dx]));
                let proj = tape.matmul(rel, basis)?;
                let along = tape.mean(tape.slice(proj, 1, 0, 1)?)?;
                let spread = if n >= 2 {
                    tape.stddev(tape.slice(proj, 1, 1, 2)?)?
                } else {
                    zero(tape)
                };
                (along, Some(spread), false)
            }
        }
        RewardSpec::Pools { centers, sigma, .. } => {
            let idx = removed_fluid(aux);
            if idx.is_empty() {
                (zero(tape), None, true)
            } else {
                let pts = tape.gather(s.removed_positions, Arc::from(idx))?;
                let values = tape.value(pts).points();
                let assigned: Vec<f64> = values
                    .iter()
                    .flat_map(|p| nearest_pool(p, centers))
                    .collect();
                let targets = tape.constant(Tensor::from_parts(vec![values.len(), 2], assigned));
                (mean_density(tape, pts, targets, *sigma)?, None, false)
            }
        }
    };
    let mut total = main;
    if let Some(sp) = spread {
        total = tape.sub(total, sp)?;
    }
    if let Some(r) = regularizer {
        total = tape.sub(total, r)?;
    }
    Ok(RewardVars {
        total,
        main,
        spread,
        regularizer,
        empty,
    })
}

/// Centre of the closest pool; ties go to the lowest index.
pub fn nearest_pool(p: &[f64; 2], centers: &[[f64; 2]]) -> [f64; 2] {
    let d2 = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    let mut best = 0;
    for (k, c) in centers.iter().enumerate().skip(1) {
        if d2(c) < d2(&centers[best]) {
            best = k;
        }
    }
    centers[best]
}

/// Evaluates a reward on a plain state. The report is normalized against `baseline`.
pub fn evaluate_reward(
    spec: &RewardSpec,
    state: &ParticleState,
    field: Option<&[f64]>,
    baseline: f64,
) -> Result<RewardReport> {
    let tape = Tape::new();
    let vars: Vec<Var> = state
        .tensors()
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let field = field.map(|f| tape.constant(Tensor::vector(f.to_vec())));
    let aux = state.aux(Default::default());
    let r = reward_on_tape(&tape, spec, &vars, &aux, field)?;
    RewardReport::from_vars(&tape, &r, baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn state(points: &[[f64; 2]]) -> ParticleState {
        ParticleState::at_rest(
            Tensor::from_points(points),
            vec![NodeType::Fluid; points.len()],
        )
        .unwrap()
    }

    fn goal(sigma: f64) -> RewardSpec {
        RewardSpec::GaussianGoal {
            mu: [0.5, 0.2],
            sigma,
        }
    }

    #[test]
    fn peak_density_closed_form() {
        for (sigma, expect) in [(0.1, 15.915494309189533), (0.4, 0.9947183943243459)] {
            let r = evaluate_reward(&goal(sigma), &state(&[[0.5, 0.2]]), None, 0.0).unwrap();
            assert!((r.raw - expect).abs() < 1e-9);
            assert!((r.raw - normal_peak(sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_matches_single() {
        let one = evaluate_reward(&goal(0.1), &state(&[[0.55, 0.2]]), None, 0.0).unwrap();
        let two =
            evaluate_reward(&goal(0.1), &state(&[[0.55, 0.2], [0.45, 0.2]]), None, 0.0).unwrap();
        assert!((one.raw - two.raw).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_the_goal() {
        let tape = Tape::new();
        let s = state(&[[0.5, 0.2]]);
        let vars: Vec<Var> = s.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        let r = reward_on_tape(&tape, &goal(0.1), &vars, &s.aux(Default::default()), None).unwrap();
        let g = tape.backward(r.total).unwrap().wrt(vars[0]);
        assert!(g.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn no_fluid_gives_flagged_zero() {
        let s = ParticleState::at_rest(Tensor::from_points(&[[0.5, 0.2]]), vec![NodeType::Design])
            .unwrap();
        let r = evaluate_reward(&goal(0.1), &s, None, 0.0).unwrap();
        assert_eq!(r.raw, 0.0);
        assert!(r.empty);
    }

    fn direction() -> RewardSpec {
        let a = 40f64.to_radians();
        RewardSpec::Direction {
            direction: [a.cos(), -a.sin()],
            center: [0.5, 0.5],
            gamma_r: 300.0,
        }
    }

    #[test]
    fn collinear_stream_has_no_spread() {
        let a = 40f64.to_radians();
        let pts: Vec<[f64; 2]> = [0.1, 0.2, 0.35]
            .iter()
            .map(|t| [0.5 + t * a.cos(), 0.5 - t * a.sin()])
            .collect();
        let r = evaluate_reward(&direction(), &state(&pts), Some(&[0.2; 5]), 0.0).unwrap();
        assert_eq!(r.regularizer, 0.0);
        assert!(r.spread.abs() < 1e-15);
        assert!((r.main - 0.65 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_is_zero_only_when_flat() {
        assert_eq!(smoothness(&[0.7; 9]), 0.0);
        assert!(smoothness(&[0.7, 0.7, 0.71]) > 0.0);
        assert!((smoothness(&[0.0, 1.0, 0.0]) - 1.0).abs() < 1e-15);
        let r = evaluate_reward(
            &direction(),
            &state(&[[0.6, 0.4], [0.7, 0.3]]),
            Some(&[0.0, 0.1]),
            0.0,
        )
        .unwrap();
        assert!((r.regularizer - 3.0).abs() < 1e-12);
    }

    fn pools_state(removed_at: &[[f64; 2]]) -> ParticleState {
        let n = removed_at.len() + 1;
        let mut s = state(&vec![[0.5, 0.5]; n]);
        let mut removed = vec![false; n];
        let mut rp = vec![0.0; 2 * n];
        for (i, p) in removed_at.iter().enumerate() {
            removed[i] = true;
            rp[2 * i..2 * i + 2].copy_from_slice(p);
        }
        s.removed = removed.into();
        s.removed_positions = Tensor::from_parts(vec![n, 2], rp);
        s
    }

    #[test]
    fn pools_closed_form_and_ties() {
        let spec = RewardSpec::Pools {
            centers: vec![[0.2, 0.0], [0.8, 0.0]],
            sigma: 0.4,
            gamma_r: 300.0,
        };
        let r = evaluate_reward(&spec, &pools_state(&[[0.8, 0.0]]), None, 0.0).unwrap();
        assert!((r.main - 0.9947183943243459).abs() < 1e-12);
        assert_eq!(
            nearest_pool(&[0.5, 0.1], &[[0.2, 0.0], [0.8, 0.0]]),
            [0.2, 0.0]
        );
        let none = evaluate_reward(&spec, &pools_state(&[]), None, 0.0).unwrap();
        assert!(none.empty && none.raw == 0.0);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalized(1.25, 1.25), 0.0);
        assert_eq!(normalized(1.75, 1.25), 0.5);
        assert_eq!(normalized(1.25, 1.75), -normalized(1.75, 1.25));
        let r = evaluate_reward(&goal(0.1), &state(&[[0.5, 0.25]]), None, 2.0).unwrap();
        assert_eq!(r.normalized, r.raw - 2.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(RewardSpec::GaussianGoal {
            mu: [0.5, 0.5],
            sigma: 0.0
        }
        .validate()
        .is_err());
        assert!(RewardSpec::Direction {
            direction: [1.0, 1.0],
            center: [0.5, 0.5],
            gamma_r: 1.0
        }
        .validate()
        .is_err());
        assert!(RewardSpec::Pools {
            centers: vec![],
            sigma: 0.4,
            gamma_r: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let specs = [
            goal(0.1),
            direction(),
            RewardSpec::Pools {
                centers: vec![[0.1, 0.0]],
                sigma: 0.4,
                gamma_r: 300.0,
            },
        ];
        for s in specs {
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<RewardSpec>(&j).unwrap(), s);
        }
    }
}
