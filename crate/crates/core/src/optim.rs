//! Stochastic coordinate ascent with backtracking.
//!
//! Each iteration draws one free coordinate uniformly at random and moves it
//! by its current step in the direction of the partial derivative. The step
//! is halved until the objective improves (at most `max_halvings` times); a
//! move is only kept if it increases the objective, so the objective never
//! decreases.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sparse_core::{Coord, Gradient, ModelParams};

/// Something to maximize over [`ModelParams`].
pub trait Objective {
    fn value(&mut self, params: &ModelParams) -> Result<f64>;
    fn gradient(&mut self, params: &ModelParams) -> Result<Gradient>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    /// Initial per-coordinate step (log space for kernel and noise parameters,
    /// input units for inducing coordinates).
    pub init_step: f64,
    pub max_halvings: u32,
    /// Factor applied to a coordinate's step after an accepted move.
    pub growth: f64,
    /// Factor applied after every halving failed.
    pub shrink: f64,
    pub max_step: f64,
    pub min_step: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            init_step: 0.05,
            max_halvings: 8,
            growth: 1.5,
            shrink: 0.25,
            max_step: 2.0,
            min_step: 1e-10,
        }
    }
}

/// Optimizer state (per-coordinate steps) kept across calls.
#[derive(Clone, Debug, Default)]
pub struct CoordinateAscent {
    pub config: AscentConfig,
    steps: HashMap<Coord, f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl CoordinateAscent {
    pub fn new(config: AscentConfig) -> Self {
        CoordinateAscent {
            config,
            ..Default::default()
        }
    }

    pub fn step_of(&self, c: Coord) -> f64 {
        self.steps.get(&c).copied().unwrap_or(self.config.init_step)
    }

    /// Runs `iters` iterations from `params` (whose objective value is
    /// `current`) and returns the final objective value.
    pub fn run<O: Objective, R: Rng>(
        &mut self,
        obj: &mut O,
        params: &mut ModelParams,
        coords: &[Coord],
        current: f64,
        iters: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut current = current;
        if coords.is_empty() {
            return Ok(current);
        }
        let mut grad: Option<Gradient> = None;
        for _ in 0..iters {
            let c = coords[rng.random_range(0..coords.len())];
            if grad.is_none() {
                grad = Some(obj.gradient(params)?);
            }
            let g = grad.as_ref().and_then(|g| g.get(c)).unwrap_or(0.0);
            if g == 0.0 || !g.is_finite() {
                continue;
            }
            let x0 = params.get(c)?;
            let mut h = self.step_of(c);
            let mut moved = false;
            for _ in 0..=self.config.max_halvings {
                params.set(c, x0 + g.signum() * h)?;
                // a failed factorization counts as a worse point
                if let Ok(v) = obj.value(params) {
                    if v > current {
                        current = v;
                        moved = true;
                        break;
                    }
                }
                h *= 0.5;
            }
            if moved {
                self.accepted += 1;
                self.steps
                    .insert(c, (h * self.config.growth).min(self.config.max_step));
                grad = None;
            } else {
                self.rejected += 1;
                params.set(c, x0)?;
                let s = (self.step_of(c) * self.config.shrink).max(self.config.min_step);
                self.steps.insert(c, s);
            }
        }
        Ok(current)
    }
}
