//! Closed-loop follower simulation, RMSE scoring and ring-road platoons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic_cf::CfState;
use crate::error::{Error, Result};
use crate::ingest::Trajectory;

/// Floor applied to the spacing after a simulated collision.
pub const COLLISION_FLOOR_M: f64 = 0.1;

/// Anything that maps a state history to the follower's next acceleration.
///
/// `history` holds every state visited so far in the rollout; the last entry is
/// the current state.
pub trait CarFollowing: Send + Sync {
    fn name(&self) -> String;
    fn accel(&self, history: &[CfState]) -> Result<f64>;
}

impl<T: CarFollowing + ?Sized> CarFollowing for &T {
    fn name(&self) -> String {
        (**self).name()
    }
    fn accel(&self, history: &[CfState]) -> Result<f64> {
        (**self).accel(history)
    }
}

impl<T: CarFollowing + ?Sized> CarFollowing for Box<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn accel(&self, history: &[CfState]) -> Result<f64> {
        (**self).accel(history)
    }
}

/// A model that never accelerates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Coasting;

impl CarFollowing for Coasting {
    fn name(&self) -> String {
        "coasting".into()
    }
    fn accel(&self, _: &[CfState]) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub clamp_speed_at_zero: bool,
    /// Bounds applied to every model output before integration.
    pub accel_bounds: Option<(f64, f64)>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            clamp_speed_at_zero: true,
            accel_bounds: Some((-5.0, 3.0)),
        }
    }
}

impl SimConfig {
    fn bound(&self, a: f64) -> f64 {
        match self.accel_bounds {
            Some((lo, hi)) => a.clamp(lo, hi),
            None => a,
        }
    }

    fn step(&self, st: &CfState, a: f64) -> (f64, f64) {
        let mut v = st.v + a * self.dt;
        if self.clamp_speed_at_zero {
            v = v.max(0.0);
        }
        (st.s + (st.v_l - st.v) * self.dt, v)
    }
}

/// The simulated part of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    pub v_l: Vec<f64>,
    /// Acceleration applied at each step, recorded before integration.
    pub a: Vec<f64>,
    /// Steps at which the spacing reached zero and was floored.
    pub collisions: Vec<usize>,
}

impl Rollout {
    pub fn to_trajectory(&self, dt: f64, t0: f64) -> Result<Trajectory> {
        Trajectory::new(dt, t0, self.v.clone(), self.v_l.clone(), self.s.clone(), self.a.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub rollout: Rollout,
    pub rmse_accel: f64,
    pub rmse_speed: f64,
    pub rmse_spacing: f64,
}

/// Forward-Euler rollout driven by a recorded lead-speed series.
///
/// `v(t+dt) = v(t) + a(t) dt` and `s(t+dt) = s(t) + (v_l(t) - v(t)) dt`. The
/// leader speed in `init` is replaced by `lead_speed[0]`.
pub fn simulate(
    model: &dyn CarFollowing,
    init: CfState,
    lead_speed: &[f64],
    cfg: &SimConfig,
) -> Result<Rollout> {
    let n = lead_speed.len();
    if n < 2 {
        return Err(Error::invalid("lead speed series needs at least 2 samples"));
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {}", cfg.dt)));
    }
    let mut history = Vec::with_capacity(n);
    let mut out = Rollout {
        v: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        v_l: lead_speed.to_vec(),
        a: Vec::with_capacity(n),
        collisions: Vec::new(),
    };
    let mut st = CfState::new(init.s, init.v, lead_speed[0]);
    for i in 0..n {
        st.v_l = lead_speed[i];
        history.push(st);
        let a = cfg.bound(model.accel(&history)?);
        if !a.is_finite() {
            return Err(Error::invalid(format!("{} produced a non-finite acceleration at step {i}", model.name())));
        }
        out.v.push(st.v);
        out.s.push(st.s);
        out.a.push(a);
        if i + 1 < n {
            let (mut s, v) = cfg.step(&st, a);
            if s <= 0.0 {
                out.collisions.push(i + 1);
                s = COLLISION_FLOOR_M;
            }
            st = CfState::new(s, v, st.v_l);
        }
    }
    Ok(out)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::invalid(format!(
            "RMSE length mismatch: {} vs {}",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("RMSE of empty series"));
    }
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Scores a rollout against the ground-truth trajectory it replayed.
pub fn score(rollout: Rollout, truth: &Trajectory) -> Result<SimResult> {
    Ok(SimResult {
        rmse_accel: rmse(&rollout.a, &truth.a)?,
        rmse_speed: rmse(&rollout.v, &truth.v)?,
        rmse_spacing: rmse(&rollout.s, &truth.s)?,
        rollout,
    })
}

/// Closed-loop replay of `truth` followed by scoring.
pub fn replay(model: &dyn CarFollowing, truth: &Trajectory, cfg: &SimConfig) -> Result<SimResult> {
    let cfg = SimConfig { dt: truth.dt, ..*cfg };
    let roll = simulate(model, truth.state(0), &truth.v_l, &cfg)?;
    score(roll, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub rmse_accel: Option<f64>,
    pub rmse_speed: Option<f64>,
    pub rmse_spacing: Option<f64>,
    pub collisions: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<EvalRow>,
}

impl ComparisonTable {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Closed-loop RMSE of every model on `test`; rows keep input order and one
/// failing model does not abort the others.
pub fn evaluate(models: &[&dyn CarFollowing], test: &Trajectory, cfg: &SimConfig) -> Result<ComparisonTable> {
    if models.is_empty() {
        return Err(Error::invalid("evaluation needs at least one model"));
    }
    let rows = models
        .par_iter()
        .map(|m| match replay(*m, test, cfg) {
            Ok(r) => EvalRow {
                model: m.name(),
                rmse_accel: Some(r.rmse_accel),
                rmse_speed: Some(r.rmse_speed),
                rmse_spacing: Some(r.rmse_spacing),
                collisions: r.rollout.collisions.len(),
                error: None,
            },
            Err(e) => EvalRow {
                model: m.name(),
                rmse_accel: None,
                rmse_speed: None,
                rmse_spacing: None,
                collisions: 0,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(ComparisonTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub ring_length: f64,
    /// Initial spacing of each vehicle to its predecessor; sums to `ring_length`.
    pub init_spacing: Vec<f64>,
    pub init_speed: Vec<f64>,
    /// Index into the model list for every vehicle.
    pub assignment: Vec<usize>,
    pub sim: SimConfig,
}

impl RingConfig {
    /// `n` vehicles evenly spaced at a common speed, all driving model 0.
    pub fn uniform(n: usize, ring_length: f64, speed: f64) -> Self {
        Self {
            ring_length,
            init_spacing: vec![ring_length / n as f64; n],
            init_speed: vec![speed; n],
            assignment: vec![0; n],
            sim: SimConfig::default(),
        }
    }

    pub fn n_vehicles(&self) -> usize {
        self.init_spacing.len()
    }

    pub fn validate(&self, n_models: usize) -> Result<()> {
        let n = self.n_vehicles();
        if n < 2 {
            return Err(Error::invalid("a ring needs at least 2 vehicles"));
        }
        if self.init_speed.len() != n || self.assignment.len() != n {
            return Err(Error::invalid("ring speed/assignment lengths differ from vehicle count"));
        }
        if self.init_spacing.iter().any(|&s| !(s > 0.0)) || self.init_speed.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("ring spacings must be positive and speeds non-negative"));
        }
        let total: f64 = self.init_spacing.iter().sum();
        if (total - self.ring_length).abs() > 1e-9 * self.ring_length {
            return Err(Error::invalid(format!(
                "spacings sum to {total}, ring length is {}",
                self.ring_length
            )));
        }
        if let Some(&m) = self.assignment.iter().find(|&&m| m >= n_models) {
            return Err(Error::invalid(format!("model index {m} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingResult {
    /// `speed[i][k]`: speed of vehicle `i` at step `k`.
    pub speed: Vec<Vec<f64>>,
    pub spacing: Vec<Vec<f64>>,
    pub accel: Vec<Vec<f64>>,
    /// First collision as `(step, vehicle)`; the run halts there.
    pub collision: Option<(usize, usize)>,
    pub steps: usize,
}

impl RingResult {
    pub fn total_spacing(&self, step: usize) -> f64 {
        self.spacing.iter().map(|s| s[step]).sum()
    }
}

/// Closed ring where vehicle `i` follows vehicle `i - 1` and vehicle 0 follows
/// vehicle `n - 1`. All vehicles update simultaneously from the previous step.
pub fn ring_simulate(cfg: &RingConfig, models: &[&dyn CarFollowing], duration: f64) -> Result<RingResult> {
    cfg.validate(models.len())?;
    let n = cfg.n_vehicles();
    let dt = cfg.sim.dt;
    let steps = (duration / dt + 1e-9).floor() as usize + 1;
    let lead = |i: usize| if i == 0 { n - 1 } else { i - 1 };

    let mut v = cfg.init_speed.clone();
    let mut s = cfg.init_spacing.clone();
    let mut history: Vec<Vec<CfState>> = vec![Vec::with_capacity(steps); n];
    let mut out = RingResult {
        speed: vec![Vec::with_capacity(steps); n],
        spacing: vec![Vec::with_capacity(steps); n],
        accel: vec![Vec::with_capacity(steps); n],
        collision: None,
        steps: 0,
    };
    for k in 0..steps {
        let mut acc = vec![0.0; n];
        for i in 0..n {
            let st = CfState::new(s[i], v[i], v[lead(i)]);
            history[i].push(st);
            acc[i] = cfg.sim.bound(models[cfg.assignment[i]].accel(&history[i])?);
            out.speed[i].push(v[i]);
            out.spacing[i].push(s[i]);
            out.accel[i].push(acc[i]);
        }
        out.steps = k + 1;
        if k + 1 == steps {
            break;
        }
        let (mut s_next, mut v_next) = (s.clone(), v.clone());
        for i in 0..n {
            let st = history[i][k];
            (s_next[i], v_next[i]) = cfg.sim.step(&st, acc[i]);
        }
        if let Some(i) = s_next.iter().position(|&x| x <= 0.0) {
            out.collision = Some((k + 1, i));
            break;
        }
        s = s_next;
        v = v_next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classic_cf::{ClassicModel, OvrvParams};
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn ovrv_equilibrium_is_a_fixed_point() {
        let p = OvrvParams::EV_ACC;
        let v = 22.0;
        let lead = vec![v; 3000];
        let roll = simulate(&ClassicModel::Ovrv(p), CfState::new(p.equilibrium_spacing(v), v, v), &lead, &SimConfig::default()).unwrap();
        for i in 0..lead.len() {
            assert!((roll.v[i] - v).abs() < 1e-9);
            assert!((roll.s[i] - p.equilibrium_spacing(v)).abs() < 1e-9);
        }
    }

    #[test]
    fn coasting_integrates_relative_speed() {
        let lead: Vec<f64> = (0..200).map(|i| 15.0 + (i as f64 * 0.05).sin()).collect();
        let roll = simulate(&Coasting, CfState::new(30.0, 15.0, lead[0]), &lead, &SimConfig::default()).unwrap();
        let mut s = 30.0;
        for i in 0..lead.len() {
            assert_eq!(roll.v[i], 15.0);
            assert!((roll.s[i] - s).abs() < 1e-12);
            s += (lead[i] - 15.0) * 0.1;
        }
    }

    struct Constant(f64);
    impl CarFollowing for Constant {
        fn name(&self) -> String {
            format!("constant({})", self.0)
        }
        fn accel(&self, _: &[CfState]) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn speed_floor_and_collision_flag() {
        let lead = vec![0.0; 100];
        let roll = simulate(&Constant(-2.0), CfState::new(5.0, 3.0, 0.0), &lead, &SimConfig::default()).unwrap();
        assert!(roll.v.iter().all(|&v| v >= 0.0));
        assert_eq!(*roll.v.last().unwrap(), 0.0);

        let roll = simulate(&Constant(2.0), CfState::new(1.0, 10.0, 0.0), &lead, &SimConfig::default()).unwrap();
        assert_eq!(roll.collisions.first(), Some(&1));
        assert!(roll.s.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn euler_converges_at_first_order() {
        // Smooth OVRV response to a sinusoidal leader, sampled on the coarse grid.
        let p = ClassicModel::Ovrv(OvrvParams::EV_ACC);
        let horizon = 60.0;
        let run = |dt: f64| {
            let n = (horizon / dt).round() as usize + 1;
            let lead: Vec<f64> = (0..n).map(|i| 20.0 + 2.0 * (0.2 * i as f64 * dt).sin()).collect();
            let cfg = SimConfig { dt, ..SimConfig::default() };
            let roll = simulate(&p, CfState::new(30.0, 19.0, 20.0), &lead, &cfg).unwrap();
            let stride = (0.1 / dt).round() as usize;
            roll.s.iter().step_by(stride).copied().collect::<Vec<_>>()
        };
        let reference = run(0.0125);
        let e1 = rmse(&run(0.1), &reference).unwrap();
        let e2 = rmse(&run(0.05), &reference).unwrap();
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.5, "{ratio}");
    }

    #[test]
    fn evaluate_keeps_order_and_isolates_failures() {
        struct Broken;
        impl CarFollowing for Broken {
            fn name(&self) -> String {
                "broken".into()
            }
            fn accel(&self, _: &[CfState]) -> Result<f64> {
                Err(Error::invalid("nope"))
            }
        }
        let p = ClassicModel::Ovrv(OvrvParams::EV_ACC);
        let lead: Vec<f64> = (0..300).map(|i| 20.0 + (i as f64 * 0.02).sin()).collect();
        let truth = simulate(&p, CfState::new(29.0, 20.0, 20.0), &lead, &SimConfig::default())
            .unwrap()
            .to_trajectory(0.1, 0.0)
            .unwrap();
        let table = evaluate(&[&p, &Broken, &p], &truth, &SimConfig::default()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[0], table.rows[2]);
        assert_eq!(table.rows[0].rmse_spacing, Some(0.0));
        assert!(table.rows[1].error.is_some());
    }

    fn ring_ovrv(p: OvrvParams, n: usize, v: f64) -> RingConfig {
        let length = n as f64 * p.equilibrium_spacing(v);
        RingConfig::uniform(n, length, v)
    }

    #[test]
    fn ring_equilibrium_persists() {
        let p = OvrvParams::EV_ACC;
        let cfg = ring_ovrv(p, 22, 15.0);
        let m = ClassicModel::Ovrv(p);
        let res = ring_simulate(&cfg, &[&m], 500.0).unwrap();
        assert!(res.collision.is_none());
        for i in 0..22 {
            assert!(res.speed[i].iter().all(|x| (x - 15.0).abs() < 1e-6));
        }
    }

    fn speed_spread(res: &RingResult, step: usize) -> f64 {
        res.speed.iter().map(|v| v[step]).fold(f64::NEG_INFINITY, f64::max)
            - res.speed.iter().map(|v| v[step]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn ring_wave_decays_iff_string_stable() {
        let stable = OvrvParams {
            k1: 0.1,
            k2: 1.0,
            eta: 5.0,
            tau: 1.2,
        };
        let unstable = OvrvParams::EV_ACC;
        assert!(stable.is_string_stable());
        assert!(!unstable.is_string_stable());

        for (p, expect_decay) in [(stable, true), (unstable, false)] {
            let mut cfg = ring_ovrv(p, 22, 15.0);
            cfg.sim.accel_bounds = None;
            cfg.init_speed[0] -= 2.0;
            let m = ClassicModel::Ovrv(p);
            let res = ring_simulate(&cfg, &[&m], 600.0).unwrap();
            let end = res.steps - 1;
            let spread = speed_spread(&res, end);
            if expect_decay {
                assert!(spread < 0.2, "stable spread {spread}");
            } else {
                assert!(spread > 2.0, "unstable spread {spread}");
            }
        }
    }

    #[test]
    fn ring_rejects_bad_config() {
        let mut cfg = RingConfig::uniform(5, 100.0, 10.0);
        cfg.init_spacing[0] += 1.0;
        let m = ClassicModel::Ovrv(OvrvParams::EV_ACC);
        assert!(ring_simulate(&cfg, &[&m], 1.0).is_err());
        let cfg = RingConfig::uniform(1, 100.0, 10.0);
        assert!(ring_simulate(&cfg, &[&m], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn rmse_symmetric_and_shift_invariant(
            pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..50),
            shift in -100.0f64..100.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = rmse(&a, &b).unwrap();
            prop_assert_eq!(r, rmse(&b, &a).unwrap());
            let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
            prop_assert!((rmse(&a2, &b2).unwrap() - r).abs() < 1e-9);
            prop_assert!(r >= 0.0);
        }

        #[test]
        fn ring_conserves_total_spacing(
            bumps in proptest::collection::vec(-3.0f64..3.0, 8),
            v0 in 5.0f64..20.0,
        ) {
            let p = OvrvParams { k1: 0.1, k2: 0.8, eta: 6.0, tau: 1.0 };
            let mut cfg = ring_ovrv(p, 8, v0);
            for (v, b) in cfg.init_speed.iter_mut().zip(&bumps) {
                *v = (*v + b).max(0.0);
            }
            let m = ClassicModel::Ovrv(p);
            let res = ring_simulate(&cfg, &[&m], 60.0).unwrap();
            for k in 0..res.steps {
                prop_assert!((res.total_spacing(k) - cfg.ring_length).abs() <= 1e-6 * cfg.ring_length);
            }
        }
    }
}
