//! Scenario generation, the closed-loop episode runner, variant wiring,
//! allocator baselines, warm-start fitting and experiment matrices.

mod allocators;
mod config;
mod episode;
mod matrix;
mod scenario;
mod warmstart;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use allocators::{allocator_baseline, auction, hungarian, AllocatorKind};
pub use config::{apply_override, Config, ExecutionConfig, GateConfig, MatrixParams, ScenarioParams};
pub use episode::{run_episode, run_episode_detailed, EpisodeOutput, WarmSample};
pub use matrix::{coverage_curves_csv, default_workers, matrix_jobs, run_matrix, run_matrix_records, Job, WORKERS_ENV};
pub use scenario::{generate_scenario, repair_connectivity, sample_static_map, Scenario};
pub use warmstart::{batch_gradient, batch_loss, collect_warm_samples, samples_from_pairs, warm_start_fit, FitReport, MIN_WARM_SAMPLES};

/// Warm gate parameters shipped with the crate, produced by `fidex warmstart`.
pub const BUNDLED_WARM_GATE: &str = include_str!("../../assets/gate_warm.txt");

/// SplitMix64 finaliser; derives independent seeds from `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Method under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Coupled assignment and gated switching.
    Full,
    /// Neither link: fidelity-free assignment, fixed planner branch.
    Base,
    /// Coupled assignment only.
    CA,
    /// Gated switching only.
    CP,
    /// Planner branch always; infeasible steps hold position.
    VorlAstar,
    /// Reactive branch always.
    VorlRl,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Full, Method::Base, Method::CA, Method::CP, Method::VorlAstar, Method::VorlRl];

    /// Whether the fidelity reaches the assignment weights.
    pub fn couples_assignment(self) -> bool {
        !matches!(self, Method::Base | Method::CP)
    }

    pub fn switching(self) -> Switching {
        match self {
            Method::Full | Method::CP => Switching::Gated,
            Method::Base | Method::CA => Switching::PlannerWithFallback,
            Method::VorlAstar => Switching::PlannerOnly,
            Method::VorlRl => Switching::ReactiveOnly,
        }
    }
}

/// How the per-step branch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Switching {
    Gated,
    PlannerWithFallback,
    PlannerOnly,
    ReactiveOnly,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Full => "Full",
            Method::Base => "Base",
            Method::CA => "CA",
            Method::CP => "CP",
            Method::VorlAstar => "VORL-Astar",
            Method::VorlRl => "VORL-RL",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Allocator {
    Coupled,
    Greedy,
    Hungarian,
    Auction,
}

impl fmt::Display for Allocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Allocator::Coupled => "coupled",
            Allocator::Greedy => "greedy",
            Allocator::Hungarian => "hungarian",
            Allocator::Auction => "auction",
        })
    }
}

impl FromStr for Allocator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coupled" => Ok(Allocator::Coupled),
            "greedy" => Ok(Allocator::Greedy),
            "hungarian" => Ok(Allocator::Hungarian),
            "auction" => Ok(Allocator::Auction),
            _ => Err(Error::Config(format!("unknown allocator {s:?}"))),
        }
    }
}

/// Initial gate parameters and whether they are updated online.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateMode {
    pub warm: bool,
    pub adaptive: bool,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}",
            if self.warm { "warm" } else { "cold" },
            if self.adaptive { "adaptive" } else { "static" }
        )
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (start, update) =
            lower.split_once('-').ok_or_else(|| Error::Config(format!("gate mode {s:?} is not <warm|cold>-<static|adaptive>")))?;
        let warm = match start {
            "warm" => true,
            "cold" => false,
            _ => return Err(Error::Config(format!("unknown gate start {start:?}"))),
        };
        let adaptive = match update {
            "adaptive" => true,
            "static" => false,
            _ => return Err(Error::Config(format!("unknown gate update mode {update:?}"))),
        };
        Ok(GateMode { warm, adaptive })
    }
}

/// Method, allocator and gate mode of one run. Written as
/// `Method[/allocator[/gate-mode]]`; omitted parts default to the coupled
/// allocator and a warm, adaptive gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantTag {
    pub method: Method,
    pub allocator: Allocator,
    pub gate: GateMode,
}

impl VariantTag {
    pub fn new(method: Method) -> Self {
        VariantTag { method, allocator: Allocator::Coupled, gate: GateMode { warm: true, adaptive: true } }
    }

    pub fn with_allocator(mut self, allocator: Allocator) -> Self {
        self.allocator = allocator;
        self
    }

    pub fn with_gate(mut self, warm: bool, adaptive: bool) -> Self {
        self.gate = GateMode { warm, adaptive };
        self
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.method, self.allocator, self.gate)
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('/');
        let mut tag = VariantTag::new(parts.next().unwrap_or("").parse()?);
        if let Some(a) = parts.next() {
            tag.allocator = a.parse()?;
        }
        if let Some(g) = parts.next() {
            tag.gate = g.parse()?;
        }
        if parts.next().is_some() {
            return Err(Error::Config(format!("variant {s:?} has too many parts")));
        }
        Ok(tag)
    }
}
