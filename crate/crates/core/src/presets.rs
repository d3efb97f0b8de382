//! Built-in experiment configurations.
//!
//! `good2d` tunes on the plant the nominal model was derived from.
//! `poor2d` and `poor4d` swap in a pole of roughly double length while
//! still synthesizing gains from the short-pole model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy::AcquisitionConfig;
use crate::error::Error;
use crate::gp::{GammaPrior, HyperPriors};
use crate::plant::{EpisodeConfig, PoleParams, SafetyLimits};
use crate::tuner::{DesignWeightMap, TunerConfig};

/// Performance state weight diagonal.
pub const PERFORMANCE_Q: [f64; 4] = [1.0, 100.0, 10.0, 200.0];
/// Performance input weight.
pub const PERFORMANCE_R: [f64; 1] = [10.0];
/// Integrator gain on the end-effector position.
pub const DEFAULT_FZ: f64 = 0.3;
pub const J_UNSTABLE_2D: f64 = 3.0;
pub const J_UNSTABLE_4D: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Good2d,
    Poor2d,
    Poor4d,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Good2d, Preset::Poor2d, Preset::Poor4d];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Good2d => "good2d",
            Preset::Poor2d => "poor2d",
            Preset::Poor4d => "poor4d",
        }
    }

    pub fn plant(self) -> PoleParams {
        match self {
            Preset::Good2d => PoleParams::short_pole(),
            Preset::Poor2d | Preset::Poor4d => PoleParams::long_pole(),
        }
    }

    pub fn priors(self) -> HyperPriors {
        let g = |m, s| GammaPrior::new(m, s).expect("static prior");
        match self {
            Preset::Good2d | Preset::Poor2d => HyperPriors {
                lengthscale: g(2.5, 0.11),
                signal_std: g(0.2, 0.02),
                noise_std: g(0.033, 0.0033),
            },
            Preset::Poor4d => HyperPriors {
                lengthscale: g(2.0, 0.63),
                signal_std: g(0.75, 0.075),
                noise_std: g(0.033, 0.010),
            },
        }
    }

    pub fn config(self) -> TunerConfig {
        let (design_map, theta0, j_unstable, corners, acquisition) = match self {
            Preset::Good2d | Preset::Poor2d => (
                DesignWeightMap::two_d(),
                vec![2.0, 4.0],
                J_UNSTABLE_2D,
                true,
                AcquisitionConfig { n_representers: 400, n_samples: 2000, quadrature_order: 9, n_candidates: None, extra_candidates: 0 },
            ),
            Preset::Poor4d => (
                DesignWeightMap::four_d(),
                vec![1.0, 4.0, 1.0, 8.0],
                J_UNSTABLE_4D,
                false,
                AcquisitionConfig {
                    n_representers: 1000,
                    n_samples: 2000,
                    quadrature_order: 9,
                    n_candidates: Some(250),
                    extra_candidates: 0,
                },
            ),
        };
        TunerConfig {
            design_map,
            theta0,
            n_iterations: if self == Preset::Poor4d { 46 } else { 20 },
            init_corner_evals: corners,
            priors: self.priors(),
            plant: self.plant(),
            nominal: PoleParams::short_pole(),
            performance_q: PERFORMANCE_Q.to_vec(),
            performance_r: PERFORMANCE_R.to_vec(),
            fz: DEFAULT_FZ,
            episode: EpisodeConfig { j_unstable, ..EpisodeConfig::default() },
            safety: SafetyLimits::default(),
            acquisition,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown preset {s:?} (expected good2d, poor2d or poor4d)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            p.config().validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("custom".parse::<Preset>().is_err());
    }

    #[test]
    fn poor_presets_keep_short_pole_nominal() {
        for p in [Preset::Poor2d, Preset::Poor4d] {
            let c = p.config();
            assert_eq!(c.nominal, PoleParams::short_pole());
            assert_eq!(c.plant, PoleParams::long_pole());
        }
        let c = Preset::Good2d.config();
        assert_eq!(c.plant, c.nominal);
    }

    #[test]
    fn penalties() {
        assert_eq!(Preset::Poor2d.config().episode.j_unstable, 3.0);
        assert_eq!(Preset::Poor4d.config().episode.j_unstable, 5.0);
    }
}
