//! LSTM encoder, temporal attention and dense heads as graph builders.
//!
//! Layer functions take parameter handles already registered on a [`Graph`],
//! so a model decides its own slot layout.

use rand::Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `[W: 4H x (I + H), b: 4H]`, gates stacked as input, forget, cell, output.
pub fn lstm_init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> [Tensor; 2] {
    let k = bound(hidden);
    [
        Tensor::uniform(&[4 * hidden, input + hidden], k, rng),
        Tensor::uniform(&[4 * hidden], k, rng),
    ]
}

/// `[W_b: A x H, b_b: A, W_a: 1 x A, b_a: 1]`.
pub fn attention_init<R: Rng + ?Sized>(hidden: usize, dim: usize, rng: &mut R) -> [Tensor; 4] {
    let (kb, ka) = (bound(hidden), bound(dim));
    [
        Tensor::uniform(&[dim, hidden], kb, rng),
        Tensor::uniform(&[dim], kb, rng),
        Tensor::uniform(&[1, dim], ka, rng),
        Tensor::uniform(&[1], ka, rng),
    ]
}

/// `[W_mid: M x H, b_mid: M, W_out: 1 x M, b_out: 1]`.
pub fn head_init<R: Rng + ?Sized>(hidden: usize, mid: usize, rng: &mut R) -> [Tensor; 4] {
    let (kh, km) = (bound(hidden), bound(mid));
    [
        Tensor::uniform(&[mid, hidden], kh, rng),
        Tensor::uniform(&[mid], kh, rng),
        Tensor::uniform(&[1, mid], km, rng),
        Tensor::uniform(&[1], km, rng),
    ]
}

/// One LSTM step built from elementary ops, returning `(h, c)`.
///
/// [`lstm`] uses the fused [`Graph::lstm_gates`] instead; this form is kept
/// as a readable reference.
pub fn lstm_cell(g: &mut Graph<'_>, w: Var, b: Var, x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let xh = g.concat(x, h)?;
    let z = g.affine(w, xh, Some(b))?;
    let zi = g.slice(z, 0, hidden)?;
    let zf = g.slice(z, hidden, hidden)?;
    let zg = g.slice(z, 2 * hidden, hidden)?;
    let zo = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs the LSTM over `xs` from a zero state and returns every hidden state.
pub fn lstm(g: &mut Graph<'_>, w: Var, b: Var, xs: &[Var], hidden: usize) -> Result<Vec<Var>> {
    let mut state = g.input(Tensor::zeros(&[2 * hidden]))?;
    let mut h = g.slice(state, 0, hidden)?;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let xh = g.concat(x, h)?;
        let z = g.affine(w, xh, Some(b))?;
        state = g.lstm_gates(z, state)?;
        h = g.slice(state, 0, hidden)?;
        out.push(h);
    }
    Ok(out)
}

/// Attention over hidden states. Returns `(context, weights)`.
pub fn attention(g: &mut Graph<'_>, p: [Var; 4], hs: &[Var]) -> Result<(Var, Var)> {
    let scores: Vec<Var> = hs.iter().map(|&h| g.attn_score(p, h)).collect::<Result<_>>()?;
    let s = g.stack(&scores)?;
    let alpha = g.softmax(s)?;
    let ctx = g.weighted_sum(alpha, hs)?;
    Ok((ctx, alpha))
}

/// Two-layer scalar head `W_out ReLU(W_mid h + b_mid) + b_out`.
pub fn dense_head(g: &mut Graph<'_>, p: [Var; 4], h: Var) -> Result<Var> {
    let [wm, bm, wo, bo] = p;
    let u = g.affine(wm, h, Some(bm))?;
    let r = g.relu(u)?;
    g.affine(wo, r, Some(bo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn register<'p>(g: &mut Graph<'p>, ps: &'p [Tensor]) -> Vec<Var> {
        ps.iter().enumerate().map(|(k, t)| g.param(t, k).unwrap()).collect()
    }

    fn inputs(g: &mut Graph<'_>, xs: &[Vec<f64>]) -> Vec<Var> {
        xs.iter().map(|x| g.input(Tensor::vector(x.clone())).unwrap()).collect()
    }

    #[test]
    fn all_zero_lstm_stays_at_zero() {
        let ps = [Tensor::zeros(&[12, 5]), Tensor::zeros(&[12])];
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let xs = inputs(&mut g, &[vec![1.0, -2.0], vec![3.0, 0.5]]);
        for h in lstm(&mut g, v[0], v[1], &xs, 3).unwrap() {
            assert!(g.value(h).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn single_step_sequence_equals_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = lstm_init(2, 4, &mut rng);
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let xs = inputs(&mut g, &[vec![0.4, -0.7]]);
        let hs = lstm(&mut g, v[0], v[1], &xs, 4).unwrap();
        let h0 = g.input(Tensor::zeros(&[4])).unwrap();
        let c0 = g.input(Tensor::zeros(&[4])).unwrap();
        let (h, _) = lstm_cell(&mut g, v[0], v[1], xs[0], h0, c0, 4).unwrap();
        assert_eq!(g.value(hs[0]).data(), g.value(h).data());
    }

    #[test]
    fn fused_lstm_matches_elementary_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps = lstm_init(3, 5, &mut rng);
        let xs = vec![vec![0.2, -1.0, 0.7], vec![1.3, 0.4, -0.2], vec![-0.8, 0.9, 0.1]];
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let xv = inputs(&mut g, &xs);
        let fused = lstm(&mut g, v[0], v[1], &xv, 5).unwrap();
        let mut h = g.input(Tensor::zeros(&[5])).unwrap();
        let mut c = g.input(Tensor::zeros(&[5])).unwrap();
        for (t, &x) in xv.iter().enumerate() {
            (h, c) = lstm_cell(&mut g, v[0], v[1], x, h, c, 5).unwrap();
            for (a, b) in g.value(h).data().iter().zip(g.value(fused[t]).data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hidden_states_stay_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = lstm_init(2, 4, &mut rng);
        ps[0].data_mut().iter_mut().for_each(|x| *x *= 50.0);
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let xs = inputs(&mut g, &(0..20).map(|i| vec![i as f64, -(i as f64)]).collect::<Vec<_>>());
        for h in lstm(&mut g, v[0], v[1], &xs, 4).unwrap() {
            assert!(g.value(h).data().iter().all(|x| x.abs() <= 1.0));
        }
    }

    /// Scalar LSTM written out longhand.
    #[test]
    fn scalar_lstm_matches_longhand_recurrence() {
        let w = [0.5, -0.3, 0.8, 0.1, -0.6, 0.9, 0.2, 0.4];
        let b = [0.1, 0.7, -0.2, 0.05];
        let xs = [1.0, -0.5, 2.0, 0.3, -1.2];
        let ps = [Tensor::matrix(4, 2, w.to_vec()).unwrap(), Tensor::vector(b.to_vec())];
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let xv = inputs(&mut g, &xs.iter().map(|x| vec![*x]).collect::<Vec<_>>());
        let hs = lstm(&mut g, v[0], v[1], &xv, 1).unwrap();
        let (mut h, mut c) = (0.0_f64, 0.0_f64);
        for (t, x) in xs.iter().enumerate() {
            let i = sig(w[0] * x + w[1] * h + b[0]);
            let f = sig(w[2] * x + w[3] * h + b[1]);
            let cand = (w[4] * x + w[5] * h + b[2]).tanh();
            let o = sig(w[6] * x + w[7] * h + b[3]);
            c = f * c + i * cand;
            h = o * c.tanh();
            assert!((g.value(hs[t]).item() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_one_state_returns_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = attention_init(3, 4, &mut rng);
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let hs = inputs(&mut g, &[vec![0.3, -1.0, 2.0]]);
        let (ctx, alpha) = attention(&mut g, [v[0], v[1], v[2], v[3]], &hs).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn equal_scores_give_the_mean_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = attention_init(2, 3, &mut rng);
        ps[2].fill(0.0);
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let hs = inputs(&mut g, &[vec![1.0, 0.0], vec![3.0, -2.0], vec![-1.0, 5.0]]);
        let (ctx, alpha) = attention(&mut g, [v[0], v[1], v[2], v[3]], &hs).unwrap();
        for a in g.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = g.value(ctx).data();
        assert!((c[0] - 1.0).abs() < 1e-14 && (c[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn attention_weights_ignore_a_score_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = attention_init(2, 3, &mut rng);
        let mut shifted = ps.clone();
        shifted[3].data_mut()[0] += 7.5;
        let states = [vec![1.0, 0.2], vec![-0.4, 0.9], vec![2.0, -1.5]];
        let weights = |p: &[Tensor; 4]| {
            let mut g = Graph::new();
            let v = register(&mut g, p);
            let hs = inputs(&mut g, &states);
            let (_, a) = attention(&mut g, [v[0], v[1], v[2], v[3]], &hs).unwrap();
            g.value(a).data().to_vec()
        };
        let (a, b) = (weights(&ps), weights(&shifted));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn head_with_zero_weights_returns_its_bias() {
        let ps = [
            Tensor::zeros(&[4, 3]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[1, 4]),
            Tensor::vector(vec![0.37]),
        ];
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let h = g.input(Tensor::vector(vec![5.0, -1.0, 2.0])).unwrap();
        let y = dense_head(&mut g, [v[0], v[1], v[2], v[3]], h).unwrap();
        assert_eq!(g.value(y).item(), 0.37);
    }

    #[test]
    fn head_dead_relu_passes_only_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = head_init(3, 4, &mut rng);
        ps[1].fill(-100.0);
        ps[3].data_mut()[0] = -0.25;
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let h = g.input(Tensor::vector(vec![0.5, 0.5, -0.5])).unwrap();
        let y = dense_head(&mut g, [v[0], v[1], v[2], v[3]], h).unwrap();
        assert_eq!(g.value(y).item(), -0.25);
        let grads = g.backward(y, 1.0).unwrap();
        assert!(grads.wrt(v[0]).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn head_matches_explicit_matmul() {
        let ps = [
            Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
            Tensor::vector(vec![0.1, 0.2]),
            Tensor::matrix(1, 2, vec![3.0, -2.0]).unwrap(),
            Tensor::vector(vec![0.5]),
        ];
        let mut g = Graph::new();
        let v = register(&mut g, &ps);
        let h = g.input(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let y = dense_head(&mut g, [v[0], v[1], v[2], v[3]], h).unwrap();
        // hidden = relu([3.1, -0.3]) = [3.1, 0]
        assert!((g.value(y).item() - (3.0 * 3.1 + 0.5)).abs() < 1e-14);
    }

    fn stack_loss(ps: &[Tensor], xs: &[Vec<f64>]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let v: Vec<Var> = ps.iter().enumerate().map(|(k, t)| g.param(t, k)).collect::<Result<_>>()?;
        let xv: Vec<Var> = xs.iter().map(|x| g.input(Tensor::vector(x.clone()))).collect::<Result<_>>()?;
        let hs = lstm(&mut g, v[0], v[1], &xv, 3)?;
        let (ctx, _) = attention(&mut g, [v[2], v[3], v[4], v[5]], &hs)?;
        let y = dense_head(&mut g, [v[6], v[7], v[8], v[9]], ctx)?;
        let loss = g.smooth_l1_mean(y, vec![0.8])?;
        let grads = g.backward(loss, 1.0)?;
        let mut out: Vec<Tensor> = ps.iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads.accumulate_params(&mut out);
        Ok((g.value(loss).item(), out))
    }

    #[test]
    fn stacked_layers_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps: Vec<Tensor> = lstm_init(2, 3, &mut rng).into();
        ps.extend(attention_init(3, 4, &mut rng));
        ps.extend(head_init(3, 4, &mut rng));
        let xs = vec![vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.8], vec![0.0, 1.1]];
        let (_, analytic) = stack_loss(&ps, &xs).unwrap();
        assert!(analytic.iter().any(|t| t.sum_squares() > 0.0));
        let report = check_gradients(|p| Ok(stack_loss(p, &xs)?.0), &ps, &analytic, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
