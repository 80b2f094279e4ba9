//! Angle schedules for the variance-preserving diffusion process.
//!
//! Diffusion time is an angle `δ ∈ [0, π/2]` with `α = cos δ` and
//! `σ = sin δ`. A schedule splits `π/2` into `T` step sizes `ω_t`; the
//! anchor angle visited at step `t` is `δ_t = ω_1 + … + ω_t`, so the
//! sampler walks `δ_T = π/2` down to `δ_1 − ω_1 = 0`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{DpdError, Result};

/// Tolerance on `Σ ω_t = π/2` accepted by [`deltas_from_omegas`].
pub const SUM_TOLERANCE: f64 = 1e-9;

fn check_angle(delta: f64) -> Result<()> {
    if !(0.0..=FRAC_PI_2).contains(&delta) {
        return Err(DpdError::Domain(format!("angle {delta} outside [0, π/2]")));
    }
    Ok(())
}

/// Signal coefficient `α_δ = cos δ`.
pub fn alpha(delta: f64) -> Result<f64> {
    check_angle(delta)?;
    Ok(delta.cos())
}

/// Noise coefficient `σ_δ = sin δ`.
pub fn sigma(delta: f64) -> Result<f64> {
    check_angle(delta)?;
    Ok(delta.sin())
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Uniform,
    Linear,
}

impl ScheduleKind {
    pub fn build(self, steps: usize) -> Result<AngleSchedule> {
        match self {
            ScheduleKind::Uniform => uniform_schedule(steps),
            ScheduleKind::Linear => linear_schedule(steps),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = DpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(DpdError::Argument(format!(
                "unknown schedule kind {other:?} (expected uniform or linear)"
            ))),
        }
    }
}

/// Step sizes `ω_1..ω_T` and anchor angles `δ_1..δ_T`, both in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSchedule {
    omegas: Vec<f64>,
    deltas: Vec<f64>,
}

impl AngleSchedule {
    /// Validates `omegas` and derives the anchor angles.
    pub fn from_omegas(omegas: Vec<f64>) -> Result<Self> {
        let deltas = deltas_from_omegas(&omegas)?;
        Ok(Self { omegas, deltas })
    }

    pub fn step_count(&self) -> usize {
        self.omegas.len()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// `(δ_t, ω_t)` pairs in sampling order, `t = T` down to `1`.
    pub fn sampling_steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.deltas
            .iter()
            .copied()
            .zip(self.omegas.iter().copied())
            .rev()
    }

    /// CSV with header `t,omega,delta`; reals carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,omega,delta\n");
        for (t, (w, d)) in self.omegas.iter().zip(&self.deltas).enumerate() {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", t + 1, w, d));
        }
        out
    }
}

/// `ω_t = π/(2T)` for every step.
pub fn uniform_schedule(steps: usize) -> Result<AngleSchedule> {
    if steps == 0 {
        return Err(DpdError::Argument("schedule needs at least one step".into()));
    }
    let omega = PI / (2.0 * steps as f64);
    AngleSchedule::from_omegas(vec![omega; steps])
}

/// `ω_t = π/(6T) + 2πt/(3T(T+1))`: small steps near `δ = 0`, large steps
/// near `δ = π/2` where sampling starts.
pub fn linear_schedule(steps: usize) -> Result<AngleSchedule> {
    if steps == 0 {
        return Err(DpdError::Argument("schedule needs at least one step".into()));
    }
    let t_total = steps as f64;
    let base = PI / (6.0 * t_total);
    let slope = 2.0 * PI / (3.0 * t_total * (t_total + 1.0));
    let omegas = (1..=steps).map(|t| base + slope * t as f64).collect();
    AngleSchedule::from_omegas(omegas)
}

/// Anchor angles from step sizes: `δ_t = ω_1 + … + ω_t`, with `δ_T` pinned
/// to `π/2`. Prefix sums avoid the cancellation of `π/2 − Σ_{i>t} ω_i` at
/// small angles.
pub fn deltas_from_omegas(omegas: &[f64]) -> Result<Vec<f64>> {
    if omegas.is_empty() {
        return Err(DpdError::Validation("empty step-size vector".into()));
    }
    if let Some((i, w)) = omegas
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        return Err(DpdError::Validation(format!(
            "step size ω_{} = {w} is not strictly positive",
            i + 1
        )));
    }
    let mut acc = CompensatedSum::default();
    let mut deltas: Vec<f64> = omegas
        .iter()
        .map(|&w| {
            acc.add(w);
            acc.value()
        })
        .collect();
    let total = acc.value();
    if (total - FRAC_PI_2).abs() > SUM_TOLERANCE {
        return Err(DpdError::Validation(format!(
            "step sizes sum to {total}, expected π/2"
        )));
    }
    *deltas.last_mut().expect("non-empty") = FRAC_PI_2;
    Ok(deltas)
}
