//! Preset scenarios: plant, barrier, priors, gains and reference controllers.
//!
//! The numeric part of a scenario lives in [`ScenarioParams`] and can be
//! overridden from TOML. Plant structure and the true parameters are fixed
//! per preset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{AdaptiveState, ConditionIv, Controller, ControllerError, GainConfig, KbfReport, NominalSelection};
use crate::model::{
    const_fn, vec_fn, Barrier, GMode, KnownDynamics, ModelError, Regressors, System, UncertaintyPrior,
    UncertaintyTruth,
};
use crate::parallel::Execution;
use crate::sim::{
    generate_dataset, run_closed_loop, summarize, ExplorationConfig, Integrator, Plant, Reference, SimAbort,
    SimConfig, SimRun, Summary,
};
use crate::tightening::{rebuild_prior, refine_system, Dataset, TightenedBounds, TighteningError, TighteningReport};

pub const PRESETS: &[&str] = &["example1", "example2", "example3", "example3-full"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario '{id}'; known presets: {}", PRESETS.join(", "))]
    Unknown { id: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Tightening(#[from] TighteningError),
    #[error("dataset generation failed: {0}")]
    Exploration(SimAbort),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.lo],
            c => (0..c)
                .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (c - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDrivenParams {
    pub exploration: ExplorationConfig,
    /// Adaptation gains used after tightening; the base gains when absent.
    pub gamma_theta: Option<Vec<f64>>,
    pub gamma_lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub theta_lo: Vec<Vec<f64>>,
    pub theta_hi: Vec<Vec<f64>>,
    pub lambda_lo: Vec<Vec<f64>>,
    pub lambda_hi: Vec<Vec<f64>>,
    /// Symmetric bound `|f_u,j| <= fu_bound_j` per state row.
    pub fu_bound: Vec<f64>,
    pub lipschitz: f64,
    pub theta0: Vec<Vec<f64>>,
    pub lambda0: Vec<Vec<f64>>,
    pub mu_bar: Option<Vec<f64>>,
    pub nu_bar: Option<Vec<f64>>,
    pub gains: GainConfig,
    pub mu_hat0: f64,
    pub nu_hat0: f64,
    pub x0: Vec<f64>,
    pub sim: SimConfig,
    /// Extended-barrier gain (second-order presets only).
    pub alpha: Option<f64>,
    pub reference: Reference,
    pub grid: Vec<GridAxis>,
    pub data_driven: DataDrivenParams,
}

/// Default numbers for a preset.
pub fn preset_params(id: &str) -> Result<ScenarioParams, ScenarioError> {
    let p = match id {
        "example1" => ScenarioParams {
            theta_lo: vec![vec![-10.0, -10.0]],
            theta_hi: vec![vec![10.0, 10.0]],
            lambda_lo: vec![vec![-10.0, -10.0]],
            lambda_hi: vec![vec![10.0, 10.0]],
            fu_bound: vec![2.0],
            lipschitz: 1.0,
            theta0: vec![vec![0.0, 0.0]],
            lambda0: vec![vec![0.5, 0.0]],
            mu_bar: Some(vec![15.0]),
            nu_bar: Some(vec![15.0]),
            gains: GainConfig {
                gamma: 800.0,
                eps1: 1e-3,
                eps2: 1e-3,
                gamma_theta: vec![550.0],
                gamma_lambda: vec![300.0],
                rho: vec![1.0],
                b: vec![0.5],
            },
            mu_hat0: 0.1,
            nu_hat0: 0.1,
            x0: vec![2.0],
            sim: SimConfig {
                dt: 1e-4,
                t_end: 4.0 * std::f64::consts::PI,
                integrator: Integrator::Rk4,
                log_stride: 10,
            },
            alpha: None,
            reference: Reference::FeedbackLin { k: 5.0, amplitude: 3.0 },
            grid: vec![GridAxis {
                lo: 1.0,
                hi: 10.0,
                count: 1001,
            }],
            data_driven: DataDrivenParams {
                exploration: ExplorationConfig {
                    samples: 10,
                    horizon: 2.0 * std::f64::consts::PI,
                    dt: 1e-3,
                    probe: 2.0,
                },
                gamma_theta: Some(vec![60.0]),
                gamma_lambda: Some(vec![30.0]),
            },
        },
        "example2" => ScenarioParams {
            theta_lo: vec![vec![-0.1, -0.5, -0.2]],
            theta_hi: vec![vec![0.0, 0.0, 0.0]],
            lambda_lo: vec![vec![0.00033]],
            lambda_hi: vec![vec![0.01]],
            fu_bound: vec![0.0; 3],
            lipschitz: 0.0,
            theta0: vec![vec![-0.05, -0.5, -0.2]],
            lambda0: vec![vec![1.0 / 3000.0]],
            mu_bar: None,
            nu_bar: None,
            gains: GainConfig {
                gamma: 300.0,
                eps1: 1e-3,
                eps2: 1e-3,
                gamma_theta: vec![0.01],
                gamma_lambda: vec![1e-4],
                rho: vec![1.0],
                b: vec![1.0 / 3000.0],
            },
            mu_hat0: 1e-3,
            nu_hat0: 1e-3,
            x0: vec![100.0, 20.0, 22.0],
            sim: SimConfig {
                dt: 1e-3,
                t_end: 30.0,
                integrator: Integrator::Rk4,
                log_stride: 10,
            },
            alpha: None,
            reference: Reference::VelocityRegulate { k_v: 0.5, v_des: 22.0 },
            grid: vec![
                GridAxis {
                    lo: 20.0,
                    hi: 200.0,
                    count: 37,
                },
                GridAxis {
                    lo: 20.0,
                    hi: 20.0,
                    count: 1,
                },
                GridAxis {
                    lo: 0.0,
                    hi: 40.0,
                    count: 41,
                },
            ],
            data_driven: DataDrivenParams {
                exploration: ExplorationConfig {
                    samples: 10,
                    horizon: 10.0,
                    dt: 1e-3,
                    probe: 1000.0,
                },
                gamma_theta: None,
                gamma_lambda: None,
            },
        },
        "example3" | "example3-full" => {
            let full = id == "example3-full";
            let (lambda_lo, lambda_hi, lambda0) = if full {
                (
                    vec![vec![2.0], vec![-1.0], vec![-1.0], vec![2.0]],
                    vec![vec![10.0], vec![1.0], vec![1.0], vec![10.0]],
                    vec![vec![6.0], vec![0.0], vec![0.0], vec![6.0]],
                )
            } else {
                (vec![vec![2.0]; 2], vec![vec![10.0]; 2], vec![vec![6.0]; 2])
            };
            let gains = if full {
                GainConfig {
                    gamma: 1000.0,
                    eps1: 1e-3,
                    eps2: 1e-3,
                    gamma_theta: vec![7000.0],
                    gamma_lambda: vec![70.0],
                    rho: vec![0.5, 0.5],
                    b: vec![1.0],
                }
            } else {
                GainConfig {
                    gamma: 300.0,
                    eps1: 1e-3,
                    eps2: 1e-3,
                    gamma_theta: vec![20000.0, 5000.0],
                    gamma_lambda: vec![200.0, 200.0],
                    rho: vec![0.5, 0.5],
                    b: vec![1.0, 1.0],
                }
            };
            let axis = |lo: f64, hi: f64| GridAxis { lo, hi, count: 9 };
            ScenarioParams {
                theta_lo: vec![vec![-100.0, 0.0], vec![0.0, -50.0]],
                theta_hi: vec![vec![0.0, 50.0], vec![50.0, 0.0]],
                lambda_lo,
                lambda_hi,
                fu_bound: vec![0.0; 4],
                lipschitz: 0.0,
                theta0: vec![vec![-50.0, 25.0], vec![25.0, -25.0]],
                lambda0,
                mu_bar: None,
                nu_bar: None,
                gains,
                mu_hat0: 0.1,
                nu_hat0: 0.1,
                x0: vec![0.0, 1.0, 0.0, 0.0],
                sim: SimConfig {
                    dt: 1e-3,
                    t_end: 4.0 * std::f64::consts::PI,
                    integrator: Integrator::Rk4,
                    log_stride: 1,
                },
                alpha: Some(10.0),
                reference: Reference::Pd {
                    kp: 10.0,
                    kd: 5.0,
                    center: vec![0.0, 1.0],
                    amplitude: vec![0.0, 1.0],
                },
                grid: vec![axis(-2.0, 2.0), axis(-2.0, 3.0), axis(-5.0, 5.0), axis(-5.0, 5.0)],
                data_driven: DataDrivenParams {
                    exploration: ExplorationConfig {
                        samples: 20,
                        horizon: 2.0 * std::f64::consts::PI,
                        dt: 1e-3,
                        probe: 5.0,
                    },
                    gamma_theta: None,
                    gamma_lambda: None,
                },
            }
        }
        other => return Err(ScenarioError::Unknown { id: other.to_string() }),
    };
    Ok(p)
}

/// Plant structure and true parameters for a preset.
fn structure(id: &str) -> Result<(System, UncertaintyTruth), ScenarioError> {
    let out = match id {
        "example1" => {
            let system = System {
                dynamics: KnownDynamics {
                    m: 0,
                    n: 1,
                    f: const_fn(vec![0.0]),
                    g: const_fn(vec![0.0]),
                    mode: GMode::Diagonal,
                },
                regressors: Regressors {
                    phi: vec![vec_fn(|x| vec![x[0].sin(), x[0] * x[0]])],
                    psi: vec![vec_fn(|x| vec![1.0, x[0] * x[0]])],
                    p: vec![2],
                    q: vec![2],
                },
            };
            let truth = UncertaintyTruth {
                theta: vec![vec![2.0, 2.0]],
                lambda: vec![vec![1.0, 2.0]],
                f_u: vec_fn(|x| vec![x[0].cos()]),
            };
            (system, truth)
        }
        "example2" => {
            let system = System {
                dynamics: KnownDynamics {
                    m: 2,
                    n: 1,
                    // (D, v_l, v_f) with a cruising leader.
                    f: vec_fn(|x| vec![x[1] - x[2], 0.0, 0.0]),
                    g: const_fn(vec![0.0]),
                    mode: GMode::Diagonal,
                },
                regressors: Regressors {
                    phi: vec![vec_fn(|x| vec![1.0, x[2], x[2] * x[2]])],
                    psi: vec![const_fn(vec![1.0])],
                    p: vec![3],
                    q: vec![1],
                },
            };
            let mass = 1650.0;
            let truth = UncertaintyTruth {
                theta: vec![vec![-0.1 / mass, -5.0 / mass, -0.25 / mass]],
                lambda: vec![vec![1.0 / mass]],
                f_u: const_fn(vec![0.0; 3]),
            };
            (system, truth)
        }
        "example3" | "example3-full" => {
            let full = id == "example3-full";
            let (mode, g, psi, q, lambda) = if full {
                (
                    GMode::Full,
                    const_fn(vec![0.0; 4]),
                    vec![const_fn(vec![1.0]); 4],
                    vec![1; 4],
                    vec![vec![5.0], vec![0.0], vec![0.0], vec![5.0]],
                )
            } else {
                (
                    GMode::Diagonal,
                    const_fn(vec![0.0; 2]),
                    vec![const_fn(vec![1.0]); 2],
                    vec![1; 2],
                    vec![vec![5.0]; 2],
                )
            };
            let pos = vec_fn(|x| vec![x[0], x[1]]);
            let system = System {
                dynamics: KnownDynamics {
                    m: 2,
                    n: 2,
                    f: vec_fn(|x| vec![x[2], x[3], 0.0, 0.0]),
                    g,
                    mode,
                },
                regressors: Regressors {
                    phi: vec![pos.clone(), pos],
                    psi,
                    p: vec![2, 2],
                    q,
                },
            };
            let truth = UncertaintyTruth {
                theta: vec![vec![-10.0, 5.0], vec![5.0, -5.0]],
                lambda,
                f_u: const_fn(vec![0.0; 4]),
            };
            (system, truth)
        }
        other => return Err(ScenarioError::Unknown { id: other.to_string() }),
    };
    Ok(out)
}

fn barrier_for(id: &str, params: &ScenarioParams) -> Result<Barrier, ScenarioError> {
    Ok(match id {
        "example1" => Barrier::affine(vec![1.0], -1.0),
        // D - 1.8 v_f
        "example2" => Barrier::affine(vec![1.0, 0.0, -1.8], 0.0),
        _ => {
            let alpha = params
                .alpha
                .ok_or_else(|| ScenarioError::Config("alpha is required for second-order presets".into()))?;
            Barrier::extended_linear(vec![-1.0, 1.0], -0.5, alpha)?
        }
    })
}

/// A fully assembled scenario. The truth record is only handed to the plant
/// side of a simulation and to certificate evaluation.
#[derive(Clone)]
pub struct Scenario {
    pub id: String,
    pub params: ScenarioParams,
    pub system: System,
    pub barrier: Barrier,
    pub truth: UncertaintyTruth,
    pub prior: UncertaintyPrior,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario").field("id", &self.id).field("params", &self.params).finish()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Audit {
    pub condition_iv: ConditionIv,
    pub kbf: KbfReport,
    pub nominal: NominalSelection,
    pub mode: GMode,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.condition_iv.holds && self.kbf.nonempty_everywhere()
    }
}

pub struct DataDrivenSetup {
    pub dataset: Dataset,
    pub bounds: Vec<TightenedBounds>,
    pub report: TighteningReport,
    pub controller: Controller,
}

impl Scenario {
    pub fn preset(id: &str) -> Result<Self, ScenarioError> {
        Self::from_params(id, preset_params(id)?)
    }

    pub fn from_params(id: &str, params: ScenarioParams) -> Result<Self, ScenarioError> {
        let (system, truth) = structure(id)?;
        system.validate()?;
        let barrier = barrier_for(id, &params)?;
        let dim = system.dim();
        if params.fu_bound.len() != dim {
            return Err(ScenarioError::Config(format!(
                "fu_bound has {} entries, state dimension is {dim}",
                params.fu_bound.len()
            )));
        }
        if params.x0.len() != dim {
            return Err(ScenarioError::Config(format!("x0 has {} entries, expected {dim}", params.x0.len())));
        }
        if params.grid.len() != dim {
            return Err(ScenarioError::Config(format!("grid has {} axes, expected {dim}", params.grid.len())));
        }
        if !(params.sim.dt > 0.0 && params.sim.t_end > 0.0) {
            return Err(ScenarioError::Config("dt and t_end must be positive".into()));
        }
        if params.fu_bound.iter().any(|v| !(*v >= 0.0)) || !(params.lipschitz >= 0.0) {
            return Err(ScenarioError::Config("fu_bound and lipschitz must be nonnegative".into()));
        }
        let hi = params.fu_bound.clone();
        let lo: Vec<f64> = hi.iter().map(|v| -v).collect();
        let prior = UncertaintyPrior {
            theta_lo: params.theta_lo.clone(),
            theta_hi: params.theta_hi.clone(),
            lambda_lo: params.lambda_lo.clone(),
            lambda_hi: params.lambda_hi.clone(),
            fu_lo: const_fn(lo),
            fu_hi: const_fn(hi),
            lipschitz: params.lipschitz,
        };
        system.check_params(&prior.theta_lo, &prior.lambda_lo)?;
        prior.check_ordered()?;
        prior.check_contains(&truth.theta, &truth.lambda, "truth")?;
        Ok(Self {
            id: id.to_string(),
            params,
            system,
            barrier,
            truth,
            prior,
        })
    }

    pub fn nominal(&self) -> Result<NominalSelection, ScenarioError> {
        Ok(NominalSelection::new(
            &self.prior,
            self.params.theta0.clone(),
            self.params.lambda0.clone(),
            self.system.mode(),
            self.params.mu_bar.clone(),
            self.params.nu_bar.clone(),
        )?)
    }

    pub fn controller(&self) -> Result<Controller, ScenarioError> {
        Ok(Controller::new(
            self.system.clone(),
            self.barrier.clone(),
            &self.prior,
            self.nominal()?,
            self.params.gains.clone(),
        )?)
    }

    pub fn estimates0(&self, ctrl: &Controller) -> AdaptiveState {
        let k = ctrl.estimate_len();
        AdaptiveState {
            mu_hat: vec![self.params.mu_hat0; k],
            nu_hat: vec![self.params.nu_hat0; k],
        }
    }

    /// Cartesian product of the grid axes.
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.params.grid {
            let vals = axis.points();
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    pub fn audit_with(&self, ctrl: &Controller, exec: Execution) -> Audit {
        Audit {
            condition_iv: ctrl.check_condition_iv(&self.params.x0, &self.estimates0(ctrl)),
            kbf: ctrl.check_kbf_sampled(&self.grid_points(), exec),
            nominal: ctrl.nominal.clone(),
            mode: ctrl.mode(),
        }
    }

    pub fn audit(&self, exec: Execution) -> Result<Audit, ScenarioError> {
        Ok(self.audit_with(&self.controller()?, exec))
    }

    /// Generates a dataset from an exploratory run, tightens the priors and
    /// rebuilds the controller around the tightened model.
    pub fn data_driven(&self, seed: u64) -> Result<DataDrivenSetup, ScenarioError> {
        let base = self.controller()?;
        let dataset = generate_dataset(
            &base,
            &self.truth,
            &self.params.x0,
            &self.params.reference,
            &self.params.data_driven.exploration,
            seed,
        )
        .map_err(ScenarioError::Exploration)?;
        self.from_dataset(dataset)
    }

    pub fn from_dataset(&self, dataset: Dataset) -> Result<DataDrivenSetup, ScenarioError> {
        let (bounds, report) = refine_system(&self.system, &self.prior, &dataset)?;
        let (prior, nominal) = rebuild_prior(&self.system, &self.prior, &bounds)?;
        let mut gains = self.params.gains.clone();
        if let Some(g) = &self.params.data_driven.gamma_theta {
            gains.gamma_theta = g.clone();
        }
        if let Some(g) = &self.params.data_driven.gamma_lambda {
            gains.gamma_lambda = g.clone();
        }
        let controller = Controller::new(self.system.clone(), self.barrier.clone(), &prior, nominal, gains)?;
        Ok(DataDrivenSetup {
            dataset,
            bounds,
            report,
            controller,
        })
    }

    pub fn simulate(&self, ctrl: &Controller) -> SimRun {
        self.simulate_with(ctrl, &self.params.sim)
    }

    pub fn simulate_with(&self, ctrl: &Controller, cfg: &SimConfig) -> SimRun {
        let est = self.estimates0(ctrl);
        let plant = Plant {
            truth: &self.truth,
            x0: &self.params.x0,
            estimates0: &est,
        };
        run_closed_loop(ctrl, &plant, &self.params.reference, cfg)
    }

    /// Summary with tracking error counted where the reference point is safe.
    pub fn summarize(&self, run: &SimRun) -> Summary {
        summarize(run, |_, xref| self.barrier.raw_value(xref) >= 0.0)
    }
}
