//! Low-rank factorized linear layers.
//!
//! A `LoRaLinLayer` replaces a dense M x N weight with the product of an
//! M x r and an r x N factor, where the rank r is a fixed fraction of the
//! smaller dimension. The layer computes the inner product first, so the
//! cost is r(M + N) multiply-adds per sample instead of MN.

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Rank used by a low-rank factorization of an M x N weight:
/// max(2, floor(gamma * min(M, N))).
pub fn rank_for(out_features: usize, in_features: usize, gamma: f64) -> Result<usize> {
    if out_features == 0 || in_features == 0 {
        return Err(Error::Dimension(format!(
            "rank_for: features must be positive, got {}x{}",
            out_features, in_features
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "rank_for: gamma {} outside (0, 1]",
            gamma
        )));
    }
    let min_dim = out_features.min(in_features);
    // The small nudge keeps gridded ratios like 0.6 * 192 from landing one
    // ulp below their exact integer product before the floor.
    let r = (gamma * min_dim as f64 + 1e-9).floor() as usize;
    Ok(r.max(2))
}

/// Parameter difference between a dense M x N layer with bias and its
/// low-rank replacement. Positive values mean the factorization is smaller.
pub fn param_savings(out_features: usize, in_features: usize, gamma: f64) -> Result<i64> {
    let full = (out_features * in_features + out_features) as i64;
    let r = rank_for(out_features, in_features, gamma)?;
    let low = (r * in_features + out_features * r + out_features) as i64;
    Ok(full - low)
}

/// Fill a tensor with Xavier-uniform values: uniform on
/// [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
pub fn xavier_fill(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = bound * (rng.gen::<f64>() * 2.0 - 1.0);
    }
}

/// Dense linear layer: y = W x + b with W of shape [M, N].
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Dimension(format!(
                "linear layer: features must be positive, got {} -> {}",
                in_features, out_features
            )));
        }
        Ok(LinearLayer {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: bias.then(|| Tensor::zeros(&[out_features])),
        })
    }

    /// Xavier-initialize the weight from a dedicated seed. Bias stays zero.
    pub fn xavier_init(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.init_with(&mut rng);
    }

    /// Xavier-initialize from an existing RNG stream.
    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        xavier_fill(&mut self.weight, self.in_features, self.out_features, rng);
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    /// Forward over token rows: x is [T, N], result is [T, M].
    pub fn forward_tokens(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|t| tape.param(t));
        tape.linear(x, w, b)
    }

    /// Forward with recorded parameter handles (used when the caller owns
    /// the parameter registration, e.g. the trainer).
    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> Result<Var> {
        tape.linear(x, w, b)
    }
}

/// Low-rank linear layer: y = W_up (W_down x) + b.
///
/// W_down is [r, N], W_up is [M, r]; r comes from [`rank_for`].
#[derive(Debug, Clone)]
pub struct LoRaLinLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub gamma: f64,
    pub rank: usize,
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub bias: Tensor,
}

impl LoRaLinLayer {
    pub fn new(in_features: usize, out_features: usize, gamma: f64) -> Result<Self> {
        let rank = rank_for(out_features, in_features, gamma)?;
        Ok(LoRaLinLayer {
            in_features,
            out_features,
            gamma,
            rank,
            w_down: Tensor::zeros(&[rank, in_features]),
            w_up: Tensor::zeros(&[out_features, rank]),
            bias: Tensor::zeros(&[out_features]),
        })
    }

    /// Xavier-initialize both factors from a dedicated seed, each with its
    /// own fan-in/fan-out. Bias stays zero.
    pub fn xavier_init(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.init_with(&mut rng);
    }

    /// Xavier-initialize from an existing RNG stream (w_down then w_up).
    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        xavier_fill(&mut self.w_down, self.in_features, self.rank, rng);
        xavier_fill(&mut self.w_up, self.rank, self.out_features, rng);
    }

    /// Trainable parameter count: r*N + M*r + M.
    pub fn parameter_count(&self) -> usize {
        self.rank * self.in_features + self.out_features * self.rank + self.out_features
    }

    /// Sample-column forward: x is [N, S], result is [M, S]. The inner
    /// product W_down x is formed first.
    pub fn forward(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.in_features {
            return Err(Error::Dimension(format!(
                "low-rank forward: input shape {:?} does not match {} input features",
                shape, self.in_features
            )));
        }
        let wd = tape.param(&self.w_down);
        let wu = tape.param(&self.w_up);
        let b = tape.param(&self.bias);
        let hidden = tape.matmul(wd, x)?;
        let y = tape.matmul(wu, hidden)?;
        // bias is per output row; route through the row-bias op via transposes
        let yt = tape.transpose(y)?;
        let yb = tape.add_row_bias(yt, b)?;
        tape.transpose(yb)
    }

    /// Token-row forward: x is [T, N], result is [T, M]. Numerically
    /// identical to [`LoRaLinLayer::forward`] on the transposed input.
    pub fn forward_tokens(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let wd = tape.param(&self.w_down);
        let wu = tape.param(&self.w_up);
        let b = tape.param(&self.bias);
        self.forward_tokens_with(tape, x, wd, wu, b)
    }

    /// Token-row forward with caller-registered parameter handles.
    pub fn forward_tokens_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        w_down: Var,
        w_up: Var,
        bias: Var,
    ) -> Result<Var> {
        let hidden = tape.linear(x, w_down, None)?;
        tape.linear(hidden, w_up, Some(bias))
    }

    /// Dense M x N weight equivalent to the factor product, for comparison
    /// against a full-rank layer.
    pub fn composed_weight(&self) -> Tensor {
        let data = crate::tensor::matmul_raw(
            self.w_up.data(),
            self.w_down.data(),
            self.out_features,
            self.rank,
            self.in_features,
        );
        Tensor::from_vec(&[self.out_features, self.in_features], data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_for_reference_points() {
        assert_eq!(rank_for(576, 192, 0.6).unwrap(), 115);
        assert_eq!(rank_for(512, 512, 0.5).unwrap(), 256);
        assert_eq!(rank_for(8, 8, 0.1).unwrap(), 2);
        assert_eq!(rank_for(192, 576, 1.0).unwrap(), 192);
        assert!(rank_for(10, 10, 0.0).is_err());
        assert!(rank_for(10, 10, 1.5).is_err());
        assert!(rank_for(0, 10, 0.5).is_err());
    }

    #[test]
    fn parameter_count_matches_formula() {
        let layer = LoRaLinLayer::new(192, 576, 0.6).unwrap();
        assert_eq!(layer.rank, 115);
        assert_eq!(layer.parameter_count(), 115 * 192 + 576 * 115 + 576);
        assert_eq!(layer.parameter_count(), 88_896);
        let dense = LinearLayer::new(192, 576, true).unwrap();
        assert_eq!(dense.parameter_count(), 576 * 192 + 576);
        assert_eq!(
            param_savings(576, 192, 0.6).unwrap(),
            dense.parameter_count() as i64 - layer.parameter_count() as i64
        );
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut a = LoRaLinLayer::new(192, 96, 0.5).unwrap();
        let mut b = LoRaLinLayer::new(192, 96, 0.5).unwrap();
        a.xavier_init(7);
        b.xavier_init(7);
        assert_eq!(a.w_down.data(), b.w_down.data());
        assert_eq!(a.w_up.data(), b.w_up.data());
        // w_down is [r, 192] with fan_in 192, fan_out r
        let bound = (6.0 / (192 + a.rank) as f64).sqrt();
        assert!(a.w_down.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        let mut c = LoRaLinLayer::new(192, 96, 0.5).unwrap();
        c.xavier_init(8);
        assert_ne!(a.w_down.data(), c.w_down.data());
    }

    #[test]
    fn xavier_empirical_variance() {
        let mut layer = LinearLayer::new(128, 256, false).unwrap();
        layer.xavier_init(42);
        let n = layer.weight.numel() as f64;
        let mean: f64 = layer.weight.data().iter().sum::<f64>() / n;
        let var: f64 = layer
            .weight
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let want = 2.0 / (128.0 + 256.0);
        assert!(
            (var - want).abs() / want < 0.05,
            "variance {} vs expected {}",
            var,
            want
        );
    }

    #[test]
    fn column_and_token_forward_agree_bitwise() {
        let mut layer = LoRaLinLayer::new(6, 9, 0.5).unwrap();
        layer.xavier_init(3);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x_cols = Tensor::from_fn(&[6, 4], |_| rng.gen::<f64>() - 0.5);

        let mut tape = GradTape::new();
        let xv = tape.constant(&x_cols);
        let y_cols = layer.forward(&mut tape, xv).unwrap();
        let y1 = tape.value(y_cols).data().to_vec();

        // same samples as token rows
        let mut xt = Tensor::zeros(&[4, 6]);
        for i in 0..6 {
            for j in 0..4 {
                xt.data_mut()[j * 6 + i] = x_cols.data()[i * 4 + j];
            }
        }
        let mut tape2 = GradTape::new();
        let xv2 = tape2.constant(&xt);
        let y_tok = layer.forward_tokens(&mut tape2, xv2).unwrap();
        let y2d = tape2.value(y_tok).data();
        for s in 0..4 {
            for m in 0..9 {
                assert_eq!(y1[m * 4 + s], y2d[s * 9 + m]);
            }
        }
    }

    #[test]
    fn full_rank_collapse_matches_dense_layer() {
        let mut layer = LoRaLinLayer::new(7, 5, 1.0).unwrap();
        layer.xavier_init(9);
        assert_eq!(layer.rank, 5);
        let composed = layer.composed_weight();
        let mut dense = LinearLayer::new(7, 5, true).unwrap();
        dense.weight = composed;

        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x = Tensor::from_fn(&[3, 7], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let mut tape = GradTape::new();
        let xv = tape.constant(&x);
        let y_low = layer.forward_tokens(&mut tape, xv).unwrap();
        let y_dense = dense.forward_tokens(&mut tape, xv).unwrap();
        let a = tape.value(y_low).data();
        let b = tape.value(y_dense).data();
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-9, "{} vs {}", u, v);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let layer = LoRaLinLayer::new(6, 9, 0.5).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(&Tensor::zeros(&[5, 4]));
        assert!(layer.forward(&mut tape, x).is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::rank_for;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rank_monotone_in_gamma(m in 1usize..512, n in 1usize..512, steps in 1usize..99) {
            let g1 = steps as f64 / 100.0;
            let g2 = (steps + 1) as f64 / 100.0;
            let r1 = rank_for(m, n, g1).unwrap();
            let r2 = rank_for(m, n, g2).unwrap();
            prop_assert!(r1 <= r2);
        }

        #[test]
        fn rank_bounds(m in 1usize..512, n in 1usize..512, steps in 1usize..=100) {
            let gamma = steps as f64 / 100.0;
            let r = rank_for(m, n, gamma).unwrap();
            prop_assert!(r >= 2);
            prop_assert!(r <= m.min(n).max(2));
        }
    }
}
