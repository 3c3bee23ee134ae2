//! Built-in cooperative tasks: small, exactly solvable Dec-MDPs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decmdp::{DecMdp, JointActionSpace};
use crate::error::{Error, Result};

pub const TASK_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Two agents on a corridor, rewarded for standing on the same cell.
    Meeting,
    /// Three agents must push a switch together to climb a chain.
    SwitchChain,
    /// Penalty-coordination matrix game whose payoffs rotate with the state.
    PenaltyGame,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Meeting, Task::SwitchChain, Task::PenaltyGame];

    pub fn name(self) -> &'static str {
        match self {
            Task::Meeting => "meeting",
            Task::SwitchChain => "switch_chain",
            Task::PenaltyGame => "penalty_game",
        }
    }

    pub fn build(self) -> DecMdp {
        match self {
            Task::Meeting => meeting_corridor(5, 0.1),
            Task::SwitchChain => switch_chain(3, 5, 0.9),
            Task::PenaltyGame => penalty_game(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }
}

struct Builder {
    n_states: usize,
    space: JointActionSpace,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

impl Builder {
    fn new(n_states: usize, action_counts: &[usize]) -> Self {
        let space = JointActionSpace::new(action_counts);
        let na = space.size();
        Self {
            n_states,
            transition: vec![0.0; n_states * na * n_states],
            reward: vec![0.0; n_states * na],
            space,
        }
    }

    fn add(&mut self, s: usize, a: usize, s2: usize, p: f64) {
        let na = self.space.size();
        self.transition[(s * na + a) * self.n_states + s2] += p;
    }

    fn set_reward(&mut self, s: usize, a: usize, r: f64) {
        self.reward[s * self.space.size() + a] = r;
    }

    fn finish(self, initial_dist: Vec<f64>) -> DecMdp {
        DecMdp::new(
            self.space.action_counts().to_vec(),
            self.n_states,
            self.transition,
            self.reward,
            TASK_GAMMA,
            initial_dist,
        )
        .expect("built-in task is valid")
    }
}

/// Positions `(x0, x1)` on a corridor of `len` cells, state `x0 + len·x1`.
/// Actions: 0 left, 1 stay, 2 right; each move fails (stays) with `slip`.
/// Reward 1 when both stand on the same cell, minus 0.05 per moving agent.
pub fn meeting_corridor(len: usize, slip: f64) -> DecMdp {
    let mut b = Builder::new(len * len, &[3, 3]);
    let step = |x: usize, act: usize| -> usize {
        match act {
            0 => x.saturating_sub(1),
            2 => (x + 1).min(len - 1),
            _ => x,
        }
    };
    for s in 0..len * len {
        let (x0, x1) = (s % len, s / len);
        for a in 0..9 {
            let (u0, u1) = (a % 3, a / 3);
            let moves = (u0 != 1) as usize + (u1 != 1) as usize;
            let meet = if x0 == x1 { 1.0 } else { 0.0 };
            b.set_reward(s, a, meet - 0.05 * moves as f64);
            for (ok0, p0) in [(true, 1.0 - slip), (false, slip)] {
                for (ok1, p1) in [(true, 1.0 - slip), (false, slip)] {
                    let n0 = if ok0 { step(x0, u0) } else { x0 };
                    let n1 = if ok1 { step(x1, u1) } else { x1 };
                    b.add(s, a, n0 + len * n1, p0 * p1);
                }
            }
        }
    }
    // Start apart, at the two ends.
    let mut d0 = vec![0.0; len * len];
    d0[len - 1] = 0.5;
    d0[(len - 1) * len] = 0.5;
    b.finish(d0)
}

/// Chain of `length` positions. All agents pressing (action 1) advance with
/// probability `advance`; nobody pressing stays; a split vote resets to the
/// start with reward -0.1. The last position pays 1 and resets.
pub fn switch_chain(n_agents: usize, length: usize, advance: f64) -> DecMdp {
    let counts = vec![2; n_agents];
    let mut b = Builder::new(length, &counts);
    let na = 1usize << n_agents;
    for s in 0..length {
        for a in 0..na {
            if s == length - 1 {
                b.set_reward(s, a, 1.0);
                b.add(s, a, 0, 1.0);
                continue;
            }
            let pressed = a.count_ones() as usize;
            if pressed == n_agents {
                b.add(s, a, s + 1, advance);
                b.add(s, a, s, 1.0 - advance);
            } else if pressed == 0 {
                b.add(s, a, s, 1.0);
            } else {
                b.set_reward(s, a, -0.1);
                b.add(s, a, 0, 1.0);
            }
        }
    }
    let mut d0 = vec![0.0; length];
    d0[0] = 1.0;
    b.finish(d0)
}

/// Three states, each a penalty game over 3×3 actions with payoffs
/// `[[1, 0, -1], [0, 0.2, 0], [-1, 0, 1]]` shifted by the state index.
/// The state advances cyclically with probability 0.8, else jumps uniformly.
pub fn penalty_game() -> DecMdp {
    const PAYOFF: [[f64; 3]; 3] = [[1.0, 0.0, -1.0], [0.0, 0.2, 0.0], [-1.0, 0.0, 1.0]];
    let ns = 3;
    let mut b = Builder::new(ns, &[3, 3]);
    for s in 0..ns {
        for a in 0..9 {
            let (a0, a1) = (a % 3, a / 3);
            b.set_reward(s, a, PAYOFF[(a0 + s) % 3][(a1 + s) % 3]);
            b.add(s, a, (s + 1) % ns, 0.8);
            for s2 in 0..ns {
                b.add(s, a, s2, 0.2 / ns as f64);
            }
        }
    }
    b.finish(vec![1.0 / 3.0; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decmdp::solve_q_star;

    #[test]
    fn tasks_are_valid_and_solvable() {
        for t in Task::ALL {
            let m = t.build();
            assert!(m.validate().is_empty(), "{t}");
            let q = solve_q_star(&m, 1e-9).unwrap();
            assert!(q.max_abs() <= 1.0 / (1.0 - TASK_GAMMA) + 1e-9);
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
    }

    #[test]
    fn task_shapes() {
        let m = Task::Meeting.build();
        assert_eq!((m.n_states, m.n_joint()), (25, 9));
        let m = Task::SwitchChain.build();
        assert_eq!((m.n_states, m.n_agents, m.n_joint()), (5, 3, 8));
        let m = Task::PenaltyGame.build();
        assert_eq!((m.n_states, m.n_joint()), (3, 9));
    }

    #[test]
    fn split_vote_resets_chain() {
        let m = switch_chain(3, 5, 0.9);
        assert_eq!(m.p(2, 0b011, 0), 1.0);
        assert_eq!(m.r(2, 0b011), -0.1);
        assert!((m.p(2, 0b111, 3) - 0.9).abs() < 1e-15);
    }
}
