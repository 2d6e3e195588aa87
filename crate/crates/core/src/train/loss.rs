use candle_core::{DType, Tensor, D};

use super::LossMinMode;
use crate::dataset::Point;
use crate::error::{contract, Result};
use crate::goal::kld;
use crate::model::ForwardOutput;

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub goal: f64,
    pub traj: f64,
    pub kld: f64,
    pub total: f64,
    pub selected_k: usize,
}

fn sq(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn argmin(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-sample objective: the candidate is selected by goal distance (ties
/// to the smallest index), or by the summed loss in [`LossMinMode::Joint`];
/// the goal term is its squared endpoint error and the trajectory term its
/// mean squared step error.
pub fn best_of_k_loss(
    goal: Point,
    future: &[Point],
    goals: &[Point],
    trajectories: &[Vec<Point>],
    kld: f64,
    beta: f64,
    mode: LossMinMode,
) -> Result<LossBreakdown> {
    if goals.is_empty() || goals.len() != trajectories.len() {
        return Err(contract(format!(
            "{} goals for {} trajectories",
            goals.len(),
            trajectories.len()
        )));
    }
    let traj_err = |y: &Vec<Point>| y.iter().zip(future).map(|(a, b)| sq(*a, *b)).sum::<f64>() / future.len() as f64;
    let selected_k = match mode {
        LossMinMode::GoalFirst => argmin(goals.iter().map(|g| sq(*g, goal).sqrt())),
        LossMinMode::Joint => argmin(goals.iter().zip(trajectories).map(|(g, y)| sq(*g, goal) + traj_err(y))),
    };
    let g = sq(goals[selected_k], goal);
    let t = traj_err(&trajectories[selected_k]);
    Ok(LossBreakdown {
        goal: g,
        traj: t,
        kld,
        total: g + t + beta * kld,
        selected_k,
    })
}

pub struct BatchLoss {
    /// Differentiable batch-mean objective.
    pub total: Tensor,
    /// Batch means of each term; `selected_k` is unused (see `selected`).
    pub parts: LossBreakdown,
    pub selected: Vec<usize>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Batched objective over a training forward pass; `future: [B, T, 2]` in
/// the same relative frame as the outputs. Without the goal module only the
/// trajectory term of the single candidate is used.
pub fn batch_loss(
    out: &ForwardOutput,
    future: &Tensor,
    beta: f64,
    mode: LossMinMode,
    use_goal: bool,
) -> Result<BatchLoss> {
    let (b, k, t, _) = out.trajectories.dims4()?;
    let target_goal = future.narrow(1, t - 1, 1)?; // [B, 1, 2]
    let goal_err = out.goals.broadcast_sub(&target_goal)?.sqr()?.sum(D::Minus1)?; // [B, K]
    let traj_err = out
        .trajectories
        .broadcast_sub(&future.unsqueeze(1)?)?
        .sqr()?
        .sum(D::Minus1)?
        .mean(D::Minus1)?; // [B, K]
    let ge = goal_err.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let te = traj_err.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let selected: Vec<usize> = (0..b)
        .map(|i| {
            if !use_goal {
                0
            } else {
                match mode {
                    LossMinMode::GoalFirst => argmin(ge[i].iter().map(|v| v.sqrt())),
                    LossMinMode::Joint => argmin((0..k).map(|j| ge[i][j] + te[i][j])),
                }
            }
        })
        .collect();
    let idx: Vec<u32> = selected.iter().enumerate().map(|(i, s)| (i * k + s) as u32).collect();
    let idx = Tensor::from_vec(idx, b, future.device())?;
    let traj = traj_err.flatten_all()?.index_select(&idx, 0)?.mean_all()?;
    let (total, goal_v, kld_v) = if use_goal {
        let goal = goal_err.flatten_all()?.index_select(&idx, 0)?.mean_all()?;
        let (q, p) = match (&out.posterior, &out.prior) {
            (Some(q), Some(p)) => (q, p),
            _ => return Err(contract("training loss needs posterior and prior")),
        };
        let kl = kld(q, p)?.mean_all()?;
        let total = ((&goal + &traj)? + (&kl * beta)?)?;
        (total, scalar(&goal)?, scalar(&kl)?)
    } else {
        (traj.clone(), 0.0, 0.0)
    };
    let traj_v = scalar(&traj)?;
    Ok(BatchLoss {
        parts: LossBreakdown {
            goal: goal_v,
            traj: traj_v,
            kld: kld_v,
            total: scalar(&total)?,
            selected_k: 0,
        },
        total,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_candidate_is_plain_mse() {
        let fut = vec![[1.0, 0.0], [2.0, 1.0]];
        let pred = vec![vec![[1.5, 0.0], [2.0, 0.0]]];
        let l = best_of_k_loss([2.0, 1.0], &fut, &[[2.0, 2.0]], &pred, 0.3, 0.5, LossMinMode::GoalFirst).unwrap();
        assert_eq!(l.selected_k, 0);
        assert!((l.goal - 1.0).abs() < 1e-15);
        assert!((l.traj - (0.25 + 1.0) / 2.0).abs() < 1e-15);
        assert!((l.total - (l.goal + l.traj + 0.5 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn closest_goal_selected() {
        let fut = vec![[0.9, 1.1]];
        let preds = vec![vec![[0.0, 0.0]], vec![[1.0, 1.0]]];
        let l = best_of_k_loss([0.9, 1.1], &fut, &[[0.0, 0.0], [1.0, 1.0]], &preds, 0.0, 1.0, LossMinMode::GoalFirst)
            .unwrap();
        assert_eq!(l.selected_k, 1);
        let tie = best_of_k_loss([0.0, 0.0], &fut, &[[1.0, 0.0], [0.0, 1.0]], &preds, 0.0, 1.0, LossMinMode::GoalFirst)
            .unwrap();
        assert_eq!(tie.selected_k, 0);
    }

    #[test]
    fn perfect_candidate_leaves_kl_term() {
        let fut = vec![[1.0, 2.0], [3.0, 4.0]];
        let l = best_of_k_loss([3.0, 4.0], &fut, &[[3.0, 4.0]], &[fut.clone()], 0.7, 0.25, LossMinMode::GoalFirst).unwrap();
        assert_eq!((l.goal, l.traj), (0.0, 0.0));
        assert_eq!(l.total, 0.25 * 0.7);
    }

    fn points(n: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(a, b)| [a, b]), n)
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force_and_is_monotone(
            goals in points(6), extra in points(1), fut in points(3), kl in 0.0f64..2.0, beta in 0.0f64..1.0,
        ) {
            let trajs: Vec<Vec<Point>> = goals.iter().map(|g| vec![*g; 3]).collect();
            let g = fut[2];
            let l = best_of_k_loss(g, &fut, &goals, &trajs, kl, beta, LossMinMode::GoalFirst).unwrap();
            let mut best = 0;
            for k in 0..goals.len() {
                if sq(goals[k], g).sqrt() < sq(goals[best], g).sqrt() { best = k; }
            }
            prop_assert_eq!(l.selected_k, best);
            prop_assert!((l.total - (l.goal + l.traj + beta * kl)).abs() < 1e-7);
            let mut more = goals.clone();
            more.push(extra[0]);
            let mut more_t = trajs.clone();
            more_t.push(vec![extra[0]; 3]);
            let l2 = best_of_k_loss(g, &fut, &more, &more_t, kl, beta, LossMinMode::GoalFirst).unwrap();
            prop_assert!(l2.goal <= l.goal);
            let j = best_of_k_loss(g, &fut, &goals, &trajs, kl, beta, LossMinMode::Joint).unwrap();
            let joint_best = (0..goals.len())
                .map(|k| sq(goals[k], g) + trajs[k].iter().zip(&fut).map(|(a, b)| sq(*a, *b)).sum::<f64>() / 3.0)
                .fold(f64::INFINITY, f64::min);
            prop_assert!((j.goal + j.traj - joint_best).abs() < 1e-12);
        }
    }
}
