//! Synthetic car scenario: a 50-row, 10-group TLL whose active controller at
//! the counterexample `(0, 2.999, 0.2)` is the faulty affine law
//! `u = -0.1442 x1 - 0.5424 x2 - 0.425 x3 + 2.223`.
//!
//! Group 1 holds the faulty row and four rows with large offsets, so its
//! minimum is the faulty row near the counterexample. Groups 2 to 10 hold
//! heading regulators that sit below it there.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::bounds::{Polytope, SafetySpec};
use crate::dynamics::{car_model, BoxSet, DynamicsModel};
use crate::error::Result;
use crate::repair::RepairConfig;
use crate::tll::{ScalarTll, TllNetwork};

pub const SPEED: f64 = 0.3;
pub const SAMPLE_TIME: f64 = 0.01;
pub const FAULTY_W: [f64; 3] = [-0.1442, -0.5424, -0.425];
pub const FAULTY_B: f64 = 2.223;
pub const X_CE: [f64; 3] = [0.0, 2.999, 0.2];
pub const N_LINEAR: usize = 50;
pub const N_GROUPS: usize = 10;
const GROUP_SIZE: usize = N_LINEAR / N_GROUPS;

#[derive(Debug, Clone)]
pub struct CarScenario {
    pub model: DynamicsModel,
    pub spec: SafetySpec,
    pub network: TllNetwork,
    pub x_ce: Vec<f64>,
    /// Box searched for counterexamples, with the counterexample as its first
    /// violating grid point.
    pub search: BoxSet,
    pub search_grid: usize,
    pub config: RepairConfig,
    /// Steps of the closed-loop check after repair.
    pub check_steps: usize,
}

pub fn car_spec() -> Result<SafetySpec> {
    SafetySpec::new(
        BoxSet::new(vec![-3.0, -4.0, -PI], vec![3.0, 4.0, PI])?,
        BoxSet::new(vec![-0.25, -0.75, -PI / 8.0], vec![0.25, -0.25, PI / 8.0])?,
        Polytope::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
            DVector::from_element(1, 3.0),
        )?,
        7,
    )
}

pub fn car_network() -> Result<TllNetwork> {
    let mut w = DMatrix::zeros(N_LINEAR, 3);
    let mut b = DVector::zeros(N_LINEAR);
    w.row_mut(0).copy_from_slice(&FAULTY_W);
    b[0] = FAULTY_B;
    for i in 1..GROUP_SIZE {
        let s = i as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        w.row_mut(i).copy_from_slice(&[0.05 * s, 0.1 * sign, 0.1]);
        b[i] = 10.0 + 0.5 * s;
    }
    // u = -3 (x3 + 0.3) - 0.5 (x2 - 2.5) + offset, with small per-row variation
    for j in 1..N_GROUPS {
        for r in 0..GROUP_SIZE {
            let i = j * GROUP_SIZE + r;
            let (jf, rf) = (j as f64, r as f64);
            w.row_mut(i)
                .copy_from_slice(&[0.02 * (rf - 2.0), -0.5 - 0.01 * jf, -3.0 + 0.1 * (rf - 2.0)]);
            b[i] = 0.35 - 0.2 * jf - 0.1 * rf;
        }
    }
    let selectors = (0..N_GROUPS)
        .map(|j| (j * GROUP_SIZE..(j + 1) * GROUP_SIZE).collect())
        .collect();
    TllNetwork::new(vec![ScalarTll::new(w, b, selectors)?])
}

pub fn car_scenario() -> Result<CarScenario> {
    Ok(CarScenario {
        model: car_model(SPEED, SAMPLE_TIME)?,
        spec: car_spec()?,
        network: car_network()?,
        x_ce: X_CE.to_vec(),
        search: BoxSet::new(vec![0.0, 2.5, -0.2], vec![0.5, 2.999, 0.2])?,
        search_grid: 5,
        config: RepairConfig {
            margin_eps: 1e-4,
            repair_horizon: 2,
            ..RepairConfig::default()
        },
        check_steps: 50,
    })
}
