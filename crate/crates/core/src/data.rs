use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::operators::TimeGrid;

/// Noisy state measurements `y_j(t_i)` (m × n) with optional exogenous
/// inputs `u(t_i)` (p × n) on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    grid: TimeGrid,
    states: DMatrix<f64>,
    inputs: Option<DMatrix<f64>>,
}

impl ObservationSet {
    pub fn new(grid: TimeGrid, states: DMatrix<f64>, inputs: Option<DMatrix<f64>>) -> Result<Self> {
        if states.ncols() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} state columns for a grid of {} times",
                states.ncols(),
                grid.len()
            )));
        }
        if states.nrows() == 0 {
            return Err(Error::Dimension("no state rows".into()));
        }
        if let Some(u) = &inputs {
            if u.ncols() != grid.len() {
                return Err(Error::Dimension(format!(
                    "{} input columns for a grid of {} times",
                    u.ncols(),
                    grid.len()
                )));
            }
        }
        let all_finite = states.iter().all(|v| v.is_finite())
            && inputs
                .as_ref()
                .is_none_or(|u| u.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::InvalidParameter(
                "observations must be finite".into(),
            ));
        }
        Ok(Self {
            grid,
            states,
            inputs,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    pub fn n_states(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, j: usize) -> DVector<f64> {
        self.states.row(j).transpose()
    }
}
