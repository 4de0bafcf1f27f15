//! Time series of single-trajectory observables shared by both solvers.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Observables of one trajectory sampled on a common time grid.
///
/// `branch_left` is filled only for two-branch (cat) runs, `coherence` only
/// when requested, `norm_deviation` only by the grid solver (largest
/// per-step value since the previous sample).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory: u64,
    pub times: Vec<f64>,
    pub xbar: Vec<f64>,
    pub pbar: Vec<f64>,
    pub dx: Vec<f64>,
    pub kinetic: Vec<f64>,
    pub cov_xp: Vec<f64>,
    pub width: Vec<Complex64>,
    pub branch_left: Vec<f64>,
    pub coherence: Vec<Complex64>,
    pub norm_deviation: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Xbar,
    Pbar,
    Dx,
    Kinetic,
    CovXp,
    BranchLeft,
}

impl Observable {
    pub const ALL: [Observable; 6] = [
        Observable::Xbar,
        Observable::Pbar,
        Observable::Dx,
        Observable::Kinetic,
        Observable::CovXp,
        Observable::BranchLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::Xbar => "xbar",
            Observable::Pbar => "pbar",
            Observable::Dx => "dx",
            Observable::Kinetic => "kinetic",
            Observable::CovXp => "cov_xp",
            Observable::BranchLeft => "branch_left",
        }
    }
}

impl std::str::FromStr for Observable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Observable::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown observable `{s}`"))
    }
}

impl TrajectoryRecord {
    pub fn new(trajectory: u64) -> Self {
        Self { trajectory, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn series(&self, obs: Observable) -> &[f64] {
        match obs {
            Observable::Xbar => &self.xbar,
            Observable::Pbar => &self.pbar,
            Observable::Dx => &self.dx,
            Observable::Kinetic => &self.kinetic,
            Observable::CovXp => &self.cov_xp,
            Observable::BranchLeft => &self.branch_left,
        }
    }

    pub fn all_finite(&self) -> bool {
        let reals = [&self.times, &self.xbar, &self.pbar, &self.dx, &self.kinetic, &self.cov_xp, &self.branch_left];
        reals.iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.width.iter().chain(&self.coherence).all(|a| a.re.is_finite() && a.im.is_finite())
            && self.times.windows(2).all(|w| w[1] > w[0])
    }
}
