use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::train::TrainHistory;
use super::{phase_weight, safety_margin, PaaiKind, PhaseConfig};
use crate::classic_cf::{CfState, ClassicModel};
use crate::error::{Error, Result};
use crate::neural::layers::{attention, attention_init, dense_head, head_init, lstm, lstm_init};
use crate::neural::{Graph, Tensor, Var};
use crate::sim::CarFollowing;

/// Bounds applied to every learned prediction, m/s².
pub const OUTPUT_BOUNDS: (f64, f64) = (-5.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub attention_dim: usize,
    pub head_mid: usize,
    /// History length fed to the encoder, in samples.
    pub seq_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            attention_dim: 16,
            head_mid: 16,
            seq_len: 30,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attention_dim == 0 || self.head_mid == 0 || self.seq_len == 0 {
            return Err(Error::invalid(format!("network sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-feature standardisation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Population mean and standard deviation per column; near-constant
    /// columns keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("cannot fit a scaler on no rows"))?;
        let n = rows.len() as f64;
        let k = first.len();
        let mut mean = vec![0.0; k];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut std = vec![0.0; k];
        for r in rows {
            for ((s, x), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (x - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Raw per-step features `[v, s, Δv, m_s]`, plus `a_base` for residual
/// models, oldest step first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    rows: Vec<Vec<f64>>,
}

pub(crate) fn feature_row(st: &CfState, base: Option<&ClassicModel>, phase: &PhaseConfig) -> Result<Vec<f64>> {
    let mut row = vec![st.v, st.s, st.dv(), safety_margin(st.s, st.v, phase)];
    if let Some(b) = base {
        row.push(b.accel(st)?);
    }
    Ok(row)
}

impl FeatureWindow {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("empty feature window"))?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("feature rows must share one width"));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature window holds non-finite values"));
        }
        Ok(Self { rows })
    }

    /// Window over the last `seq_len` states of `history`, left-padded with
    /// the earliest state when the history is shorter.
    pub fn from_history(
        history: &[CfState],
        seq_len: usize,
        base: Option<&ClassicModel>,
        phase: &PhaseConfig,
    ) -> Result<Self> {
        if history.is_empty() || seq_len == 0 {
            return Err(Error::invalid("feature window needs a non-empty history"));
        }
        let start = history.len().saturating_sub(seq_len);
        let recent = &history[start..];
        let pad = seq_len - recent.len();
        let mut rows = Vec::with_capacity(seq_len);
        let first = feature_row(&recent[0], base, phase)?;
        for _ in 0..pad {
            rows.push(first.clone());
        }
        for st in recent {
            rows.push(feature_row(st, base, phase)?);
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }
}

/// Decomposed prediction for one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Clamped final acceleration.
    pub a_hat: f64,
    pub a_base: f64,
    pub a_acc: f64,
    /// Deceleration head; `None` for the Baseline AI model.
    pub a_dec: Option<f64>,
    pub w_phase: f64,
    pub a_nn: f64,
}

/// Handles produced when a model records one sample on a graph.
pub(crate) struct SampleVars {
    pub a_hat: Var,
    pub a_nn: Var,
    pub a_acc: Var,
    pub a_dec: Option<Var>,
}

const LSTM: usize = 0;
const ACC_ATT: usize = 2;
const ACC_HEAD: usize = 6;
const DEC_ATT: usize = 10;
const DEC_HEAD: usize = 14;

/// A Baseline AI or PAAI network with its base law and preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaaiModel {
    pub kind: PaaiKind,
    pub base: Option<ClassicModel>,
    pub network: NetworkConfig,
    pub phase: PhaseConfig,
    pub loss: LossConfig,
    pub scaler: FeatureScaler,
    pub seed: u64,
    params: Vec<Tensor>,
    #[serde(default)]
    pub history: Option<TrainHistory>,
}

impl PaaiModel {
    /// Randomly initialised model; weights drawn from `seed`.
    pub fn new(kind: PaaiKind, base: Option<ClassicModel>, network: NetworkConfig, seed: u64) -> Result<Self> {
        Self::check_base(kind, base.as_ref())?;
        network.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = Self::input_width(kind);
        let mut params: Vec<Tensor> = lstm_init(n_in, network.hidden, &mut rng).into();
        let streams = if kind.is_residual() { 2 } else { 1 };
        for _ in 0..streams {
            params.extend(attention_init(network.hidden, network.attention_dim, &mut rng));
            params.extend(head_init(network.hidden, network.head_mid, &mut rng));
        }
        Ok(Self {
            kind,
            base,
            network,
            phase: PhaseConfig::default(),
            loss: LossConfig::for_kind(kind),
            scaler: FeatureScaler::identity(n_in),
            seed,
            params,
            history: None,
        })
    }

    /// Same architecture with every network parameter set to zero.
    pub fn zeroed(kind: PaaiKind, base: Option<ClassicModel>, network: NetworkConfig) -> Result<Self> {
        let mut m = Self::new(kind, base, network, 0)?;
        m.params.iter_mut().for_each(|p| p.fill(0.0));
        Ok(m)
    }

    fn check_base(kind: PaaiKind, base: Option<&ClassicModel>) -> Result<()> {
        match (kind.base_kind(), base) {
            (None, None) => Ok(()),
            (Some(k), Some(b)) if b.kind() == k => b.validate(),
            (want, got) => Err(Error::invalid(format!(
                "{kind} needs base model {:?}, got {:?}",
                want,
                got.map(|b| b.kind())
            ))),
        }
    }

    pub fn input_width(kind: PaaiKind) -> usize {
        if kind.is_residual() {
            5
        } else {
            4
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let probe = Self::new(self.kind, self.base, self.network, 0).map(|m| m.params);
        probe
            .map(|ps| ps.iter().map(|t| t.shape().to_vec()).collect())
            .unwrap_or_default()
    }

    /// Replaces the parameters after checking their shapes.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        let want = self.expected_shapes();
        let got: Vec<Vec<usize>> = params.iter().map(|t| t.shape().to_vec()).collect();
        if want != got {
            return Err(Error::Shape {
                op: "params",
                expected: want.into_iter().flatten().collect(),
                got: got.into_iter().flatten().collect(),
            });
        }
        Ok(Self { params, ..self.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_base(self.kind, self.base.as_ref())?;
        self.network.validate()?;
        self.phase.validate()?;
        self.loss.validate()?;
        let width = Self::input_width(self.kind);
        if self.scaler.mean.len() != width || self.scaler.std.len() != width {
            return Err(Error::invalid("feature scaler width does not match the model"));
        }
        self.with_params(self.params.clone())?;
        if self.params.iter().flat_map(|t| t.data()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(())
    }

    /// Records the network for one sample. `rows` are normalised features.
    pub(crate) fn record<'p>(
        &'p self,
        g: &mut Graph<'p>,
        rows: &[&[f64]],
        a_base: f64,
        w_phase: f64,
    ) -> Result<SampleVars> {
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(k, t)| g.param(t, k))
            .collect::<Result<_>>()?;
        let xs: Vec<Var> = rows
            .iter()
            .map(|r| g.input(Tensor::vector(r.to_vec())))
            .collect::<Result<_>>()?;
        let quad = |k: usize| [params[k], params[k + 1], params[k + 2], params[k + 3]];
        let hs = lstm(g, params[LSTM], params[LSTM + 1], &xs, self.network.hidden)?;
        let (ctx_acc, _) = attention(g, quad(ACC_ATT), &hs)?;
        let a_acc = dense_head(g, quad(ACC_HEAD), ctx_acc)?;
        if !self.kind.is_residual() {
            return Ok(SampleVars {
                a_hat: a_acc,
                a_nn: a_acc,
                a_acc,
                a_dec: None,
            });
        }
        let (ctx_dec, _) = attention(g, quad(DEC_ATT), &hs)?;
        let a_dec = dense_head(g, quad(DEC_HEAD), ctx_dec)?;
        let acc_part = g.scale(a_acc, w_phase)?;
        let dec_part = g.scale(a_dec, 1.0 - w_phase)?;
        let a_nn = g.add(acc_part, dec_part)?;
        let a_hat = g.scale_shift(a_nn, 1.0, vec![a_base])?;
        Ok(SampleVars {
            a_hat,
            a_nn,
            a_acc,
            a_dec: Some(a_dec),
        })
    }

    fn base_accel(&self, st: &CfState) -> Result<f64> {
        match &self.base {
            Some(b) => b.accel(st),
            None => Ok(0.0),
        }
    }

    pub fn phase_weight_for(&self, st: &CfState) -> f64 {
        phase_weight(st.dv(), safety_margin(st.s, st.v, &self.phase), &self.phase)
    }

    fn check_window(&self, window: &FeatureWindow) -> Result<()> {
        let width = Self::input_width(self.kind);
        if window.len() != self.network.seq_len || window.width() != width {
            return Err(Error::Shape {
                op: "feature_window",
                expected: vec![self.network.seq_len, width],
                got: vec![window.len(), window.width()],
            });
        }
        Ok(())
    }

    /// Prediction with the phase weight forced to `w_phase`.
    pub fn predict_with_weight(&self, window: &FeatureWindow, st: &CfState, w_phase: f64) -> Result<Prediction> {
        self.check_window(window)?;
        let a_base = self.base_accel(st)?;
        let rows: Vec<Vec<f64>> = window.rows().iter().map(|r| self.scaler.apply(r)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let out = self.record(&mut g, &refs, a_base, w_phase)?;
        let raw = g.value(out.a_hat).item();
        let (lo, hi) = OUTPUT_BOUNDS;
        Ok(Prediction {
            a_hat: raw.clamp(lo, hi),
            a_base,
            a_acc: g.value(out.a_acc).item(),
            a_dec: out.a_dec.map(|v| g.value(v).item()),
            w_phase: if self.kind.is_residual() { w_phase } else { 1.0 },
            a_nn: g.value(out.a_nn).item(),
        })
    }

    pub fn predict_detail(&self, window: &FeatureWindow, st: &CfState) -> Result<Prediction> {
        self.predict_with_weight(window, st, self.phase_weight_for(st))
    }

    /// Clamped acceleration for the current state `st`, the last step of `window`.
    pub fn predict(&self, window: &FeatureWindow, st: &CfState) -> Result<f64> {
        Ok(self.predict_detail(window, st)?.a_hat)
    }

    pub fn window(&self, history: &[CfState]) -> Result<FeatureWindow> {
        FeatureWindow::from_history(history, self.network.seq_len, self.base.as_ref(), &self.phase)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl CarFollowing for PaaiModel {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn accel(&self, history: &[CfState]) -> Result<f64> {
        let st = history.last().ok_or_else(|| Error::invalid("empty state history"))?;
        self.predict(&self.window(history)?, st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classic_cf::{IdmParams, OvrvParams};

    fn small() -> NetworkConfig {
        NetworkConfig {
            hidden: 6,
            attention_dim: 4,
            head_mid: 5,
            seq_len: 8,
        }
    }

    fn history() -> Vec<CfState> {
        (0..12)
            .map(|i| {
                let t = i as f64 * 0.1;
                CfState::new(25.0 + t, 14.0 + 0.3 * t.sin(), 14.5 - 0.2 * t)
            })
            .collect()
    }

    #[test]
    fn base_model_must_match_kind() {
        let ovrv = ClassicModel::Ovrv(OvrvParams::EV_ACC);
        assert!(PaaiModel::new(PaaiKind::OvrvPaai, Some(ovrv), small(), 1).is_ok());
        assert!(PaaiModel::new(PaaiKind::IdmPaai, Some(ovrv), small(), 1).is_err());
        assert!(PaaiModel::new(PaaiKind::OvrvPaai, None, small(), 1).is_err());
        assert!(PaaiModel::new(PaaiKind::BaselineAi, Some(ovrv), small(), 1).is_err());
    }

    #[test]
    fn zero_network_returns_base_prediction() {
        for base in [ClassicModel::Ovrv(OvrvParams::EV_ACC), ClassicModel::Idm(IdmParams::EV_ACC)] {
            let kind = if base.kind() == crate::ModelKind::Ovrv { PaaiKind::OvrvPaai } else { PaaiKind::IdmPaai };
            let m = PaaiModel::zeroed(kind, Some(base), small()).unwrap();
            let h = history();
            let st = h.last().unwrap();
            let p = m.predict_detail(&m.window(&h).unwrap(), st).unwrap();
            let (lo, hi) = OUTPUT_BOUNDS;
            assert_eq!(p.a_hat, base.accel(st).unwrap().clamp(lo, hi));
            assert_eq!(p.a_nn, 0.0);
        }
    }

    #[test]
    fn forced_weights_select_one_head() {
        let m = PaaiModel::new(PaaiKind::OvrvPaai, Some(ClassicModel::Ovrv(OvrvParams::EV_ACC)), small(), 4).unwrap();
        let h = history();
        let st = h.last().unwrap();
        let w = m.window(&h).unwrap();
        let one = m.predict_with_weight(&w, st, 1.0).unwrap();
        assert_eq!(one.a_nn, one.a_acc);
        let zero = m.predict_with_weight(&w, st, 0.0).unwrap();
        assert_eq!(zero.a_nn, zero.a_dec.unwrap());
        let mid = m.predict_with_weight(&w, st, 0.3).unwrap();
        let blend = 0.3 * mid.a_acc + 0.7 * mid.a_dec.unwrap();
        assert!((mid.a_nn - blend).abs() < 1e-12);
    }

    #[test]
    fn short_history_is_left_padded() {
        let h = history();
        let phase = PhaseConfig::default();
        let w = FeatureWindow::from_history(&h[..3], 8, None, &phase).unwrap();
        assert_eq!(w.len(), 8);
        for r in &w.rows()[..6] {
            assert_eq!(r, &w.rows()[0]);
        }
        assert_eq!(w.rows()[7][0], h[2].v);
        let full = FeatureWindow::from_history(&h, 8, None, &phase).unwrap();
        assert_eq!(full.rows()[0][1], h[4].s);
    }

    #[test]
    fn wrong_window_shape_is_rejected() {
        let m = PaaiModel::new(PaaiKind::BaselineAi, None, small(), 2).unwrap();
        let h = history();
        let w = FeatureWindow::from_history(&h, 5, None, &m.phase).unwrap();
        assert!(matches!(m.predict(&w, h.last().unwrap()), Err(Error::Shape { .. })));
    }

    #[test]
    fn predictions_are_clamped() {
        let mut m = PaaiModel::zeroed(PaaiKind::BaselineAi, None, small()).unwrap();
        let out_bias = m.params_mut().len() - 1;
        m.params_mut()[out_bias].data_mut()[0] = 40.0;
        let h = history();
        assert_eq!(m.accel(&h).unwrap(), OUTPUT_BOUNDS.1);
        m.params_mut()[out_bias].data_mut()[0] = -40.0;
        assert_eq!(m.accel(&h).unwrap(), OUTPUT_BOUNDS.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = PaaiModel::new(PaaiKind::IdmPaai, Some(ClassicModel::Idm(IdmParams::EV_ACC)), small(), 9).unwrap();
        m.scaler = FeatureScaler {
            mean: vec![0.1 / 3.0; 5],
            std: vec![std::f64::consts::PI; 5],
        };
        let back = PaaiModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let h = history();
        assert_eq!(back.accel(&h).unwrap().to_bits(), m.accel(&h).unwrap().to_bits());
    }

    #[test]
    fn with_params_checks_shapes() {
        let m = PaaiModel::new(PaaiKind::BaselineAi, None, small(), 2).unwrap();
        let mut ps = m.params().to_vec();
        ps.pop();
        assert!(m.with_params(ps).is_err());
        assert!(m.with_params(m.params().to_vec()).is_ok());
    }

    #[test]
    fn scaler_standardises_columns() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let sc = FeatureScaler::fit(&rows).unwrap();
        assert_eq!(sc.mean, vec![2.0, 5.0]);
        assert_eq!(sc.std, vec![1.0, 1.0]);
        assert_eq!(sc.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }
}
