//! Network layers and the detector/tagger model builders.
//!
//! Tensors flow through the models channels-last: `[batch, time, freq,
//! maps]`. Both models share the same trunk architecture — six 3×3
//! convolution + batch-norm + ReLU blocks with frequency max-pools of 5, 4
//! and 2 after every second block, collapsing 40 mel bands to a single
//! column while preserving the frame count.

pub mod checkpoint;
pub mod init;
mod model;

pub use init::Initializer;
pub use model::{
    assign_params, build_when, build_who, flatten_grads, flatten_params, Head, ModelGraph, Trunk,
    WhenHead, WhoHead, CONV_L2, GRU_L2, INPUT_BANDS, WHEN_DENSE_L2, WHO_DENSE_L2,
};

use crate::error::Result;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Batch-norm running statistics decay.
pub const BN_MOMENTUM: f64 = 0.99;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-3;

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter handle, in registration order.
pub type ParamList = Vec<(String, Var)>;

/// 3×3 (or any) same-padded convolution with bias, channels last.
pub struct Conv2d {
    pub kernel: Var,
    pub bias: Var,
    pub l2: f64,
}

impl Conv2d {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        kernel_hw: (usize, usize),
        in_maps: usize,
        out_maps: usize,
        l2: f64,
    ) -> Self {
        let (kh, kw) = kernel_hw;
        let fan_in = kh * kw * in_maps;
        let fan_out = kh * kw * out_maps;
        let data = init.glorot_uniform(fan_in, fan_out, fan_in * out_maps);
        let kernel = Tensor::new(
            vec![kh, kw, in_maps, out_maps],
            data.into_iter().map(E::from_f64).collect(),
        )
        .expect("kernel shape")
        .requires_grad();
        let bias = Tensor::zeros(vec![out_maps]).requires_grad();
        Conv2d {
            kernel: tape.leaf(kernel),
            bias: tape.leaf(bias),
            l2,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.kernel)?;
        Ok(tape.add(y, self.bias)?)
    }
}

/// Batch normalisation over the trailing (channel) axis.
///
/// Train mode normalises by the minibatch statistics of each feature map
/// and folds them into the running estimates; eval mode applies the running
/// statistics, which start at mean 0 / variance 1 so evaluating an
/// untrained network is well defined.
pub struct BatchNorm<E: Element> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm<E> {
    pub fn build(tape: &mut Tape<E>, channels: usize) -> Self {
        let gamma = Tensor::full(vec![channels], E::ONE).requires_grad();
        let beta = Tensor::zeros(vec![channels]).requires_grad();
        BatchNorm {
            gamma: tape.leaf(gamma),
            beta: tape.leaf(beta),
            running_mean: vec![E::ZERO; channels],
            running_var: vec![E::ONE; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Mean over every axis except the last.
    fn channel_mean<E2: Element>(tape: &mut Tape<E2>, mut v: Var) -> Result<Var> {
        while tape.value(v).shape().len() > 1 {
            v = tape.reduce_mean(v, 0)?;
        }
        Ok(v)
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let mean = Self::channel_mean(tape, x)?;
                let centred = tape.sub(x, mean)?;
                let sq = tape.mul(centred, centred)?;
                let var = Self::channel_mean(tape, sq)?;
                // Fold the batch statistics into the running estimates.
                let m = E::from_f64(self.momentum);
                let one_m = E::from_f64(1.0 - self.momentum);
                for (r, &b) in self.running_mean.iter_mut().zip(tape.value(mean).data()) {
                    *r = *r * m + b * one_m;
                }
                for (r, &b) in self.running_var.iter_mut().zip(tape.value(var).data()) {
                    *r = *r * m + b * one_m;
                }
                let var_eps = tape.affine(var, 1.0, self.eps);
                let rstd = tape.rsqrt(var_eps);
                let norm = tape.mul(centred, rstd)?;
                let scaled = tape.mul(norm, self.gamma)?;
                Ok(tape.add(scaled, self.beta)?)
            }
            Mode::Eval => {
                let eps = E::from_f64(self.eps);
                let mean = tape.constant(Tensor::new(
                    vec![self.running_mean.len()],
                    self.running_mean.clone(),
                )?);
                let rstd: Vec<E> = self
                    .running_var
                    .iter()
                    .map(|&v| E::ONE / (v + eps).sqrt())
                    .collect();
                let rstd = tape.constant(Tensor::new(vec![rstd.len()], rstd)?);
                let centred = tape.sub(x, mean)?;
                let norm = tape.mul(centred, rstd)?;
                let scaled = tape.mul(norm, self.gamma)?;
                Ok(tape.add(scaled, self.beta)?)
            }
        }
    }
}

/// Fully connected layer `[.., in] -> [.., out]`; callers flatten leading
/// axes, which makes the same struct serve time-distributed use.
pub struct Dense {
    pub kernel: Var,
    pub bias: Var,
    pub l2: f64,
}

impl Dense {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        in_dim: usize,
        out_dim: usize,
        l2: f64,
    ) -> Self {
        let data = init.glorot_uniform(in_dim, out_dim, in_dim * out_dim);
        let kernel = Tensor::new(
            vec![in_dim, out_dim],
            data.into_iter().map(E::from_f64).collect(),
        )
        .expect("kernel shape")
        .requires_grad();
        let bias = Tensor::zeros(vec![out_dim]).requires_grad();
        Dense {
            kernel: tape.leaf(kernel),
            bias: tape.leaf(bias),
            l2,
        }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.kernel)?;
        Ok(tape.add(y, self.bias)?)
    }
}

/// One direction of a GRU: gates `z` (update) and `r` (reset) with sigmoid,
/// candidate with tanh, reset applied before the recurrent candidate
/// projection, and a single bias per gate:
///
/// ```text
/// z = σ(x·Wz + h·Uz + bz)
/// r = σ(x·Wr + h·Ur + br)
/// c = tanh(x·Wc + (r ⊙ h)·Uc + bc)
/// h' = z ⊙ h + (1 − z) ⊙ c
/// ```
pub struct GruDirection {
    /// Input kernel `[in, 3·units]`, gate order z|r|c.
    pub w: Var,
    /// Recurrent kernel for z and r: `[units, 2·units]`.
    pub u_zr: Var,
    /// Recurrent kernel for the candidate: `[units, units]`.
    pub u_c: Var,
    /// Bias `[3·units]`.
    pub b: Var,
    pub units: usize,
}

impl GruDirection {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        in_dim: usize,
        units: usize,
    ) -> Self {
        let to_e = |v: Vec<f64>| -> Vec<E> { v.into_iter().map(E::from_f64).collect() };
        let w = Tensor::new(
            vec![in_dim, 3 * units],
            to_e(init.glorot_uniform(in_dim, 3 * units, in_dim * 3 * units)),
        )
        .expect("w shape")
        .requires_grad();
        let u_zr = Tensor::new(vec![units, 2 * units], to_e(init.orthogonal(units, 2 * units)))
            .expect("u_zr shape")
            .requires_grad();
        let u_c = Tensor::new(vec![units, units], to_e(init.orthogonal(units, units)))
            .expect("u_c shape")
            .requires_grad();
        let b = Tensor::zeros(vec![3 * units]).requires_grad();
        GruDirection {
            w: tape.leaf(w),
            u_zr: tape.leaf(u_zr),
            u_c: tape.leaf(u_c),
            b: tape.leaf(b),
            units,
        }
    }

    /// Run over `[B, T, D]`, optionally consuming time in reverse; output is
    /// `[B, T, units]` aligned with the input's time order either way.
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var, reverse: bool) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (batch, time, dim) = (shape[0], shape[1], shape[2]);
        let h_units = self.units;
        let flat = tape.reshape(x, vec![batch * time, dim])?;
        let proj = tape.matmul(flat, self.w)?;
        let proj = tape.add(proj, self.b)?;
        let proj = tape.reshape(proj, vec![batch, time, 3 * h_units])?;
        let mut h = tape.constant(Tensor::zeros(vec![batch, h_units]));
        let mut steps = Vec::with_capacity(time);
        for i in 0..time {
            let t = if reverse { time - 1 - i } else { i };
            let xt = tape.slice(proj, 1, t, t + 1)?;
            let xt = tape.reshape(xt, vec![batch, 3 * h_units])?;
            let hu = tape.matmul(h, self.u_zr)?;
            let xz = tape.slice(xt, 1, 0, h_units)?;
            let xr = tape.slice(xt, 1, h_units, 2 * h_units)?;
            let xc = tape.slice(xt, 1, 2 * h_units, 3 * h_units)?;
            let hz = tape.slice(hu, 1, 0, h_units)?;
            let hr = tape.slice(hu, 1, h_units, 2 * h_units)?;
            let z_in = tape.add(xz, hz)?;
            let z = tape.sigmoid(z_in);
            let r_in = tape.add(xr, hr)?;
            let r = tape.sigmoid(r_in);
            let rh = tape.mul(r, h)?;
            let cu = tape.matmul(rh, self.u_c)?;
            let c_in = tape.add(xc, cu)?;
            let c = tape.tanh(c_in);
            let zh = tape.mul(z, h)?;
            let inv_z = tape.affine(z, -1.0, 1.0);
            let zc = tape.mul(inv_z, c)?;
            h = tape.add(zh, zc)?;
            steps.push(tape.reshape(h, vec![batch, 1, h_units])?);
        }
        if reverse {
            steps.reverse();
        }
        Ok(tape.concat(&steps, 1)?)
    }
}

/// Bidirectional GRU: forward and time-reversed passes concatenated along
/// the feature axis, `[B, T, D] -> [B, T, 2·units]`.
pub struct BiGru {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
    pub l2: f64,
}

impl BiGru {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        in_dim: usize,
        units: usize,
        l2: f64,
    ) -> Self {
        BiGru {
            fwd: GruDirection::build(tape, init, in_dim, units),
            bwd: GruDirection::build(tape, init, in_dim, units),
            l2,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let f = self.fwd.forward(tape, x, false)?;
        let b = self.bwd.forward(tape, x, true)?;
        Ok(tape.concat(&[f, b], 2)?)
    }
}

/// Mean over the time and frequency axes of `[B, T, F, C]`, yielding `[B, C]`.
pub fn global_average_pool<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let t = tape.reduce_mean(x, 1)?;
    let tf = tape.reduce_mean(t, 1)?;
    Ok(tf)
}

/// Sum of `coeff · Σ w²` over all regularised kernels, as a tape scalar.
pub fn l2_penalty<E: Element>(tape: &mut Tape<E>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, coeff) in terms {
        if coeff == 0.0 {
            continue;
        }
        let sq = tape.mul(w, w)?;
        let s = tape.sum_all(sq);
        let term = tape.affine(s, coeff, 0.0);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar(E::ZERO)))
}

#[cfg(test)]
mod tests {
    use super::model::INPUT_BANDS;
    use super::*;
    use crate::tensor::gradcheck;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Scalar objective `sum(forward(x) ⊙ probe)` checked against central
    /// finite differences over both the parameters and the input.
    fn fd_check_against_forward<F>(
        tape: &mut Tape<f64>,
        params: &[(String, Var)],
        probe_shape: Vec<usize>,
        mut forward: F,
        tol: f64,
    ) where
        F: FnMut(&mut Tape<f64>) -> Var,
    {
        let probe = tape.constant(random_tensor(probe_shape, 999));
        let mark = tape.mark();

        let out = forward(tape);
        let weighted = tape.mul(out, probe).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        let analytic = model::flatten_grads(tape, params);
        let x0 = model::flatten_params(tape, params);
        tape.reset_to(mark);

        let eval = |x: &[f64]| {
            model::assign_params(tape, params, x);
            tape.reset_to(mark);
            let out = forward(tape);
            let weighted = tape.mul(out, probe).unwrap();
            let loss = tape.sum_all(weighted);
            tape.value(loss).item()
        };
        let worst = gradcheck::check(eval, &x0, &analytic, tol)
            .unwrap_or_else(|e| panic!("{e}"));
        assert!(worst < tol);
    }

    #[test]
    fn trunk_frequency_reduction_forty_to_one() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(1);
        let mut trunk = Trunk::build(&mut tape, &mut init, 4);
        let x = tape.constant(random_tensor(vec![2, 8, 40, 1], 3).cast());
        let mut trace = Vec::new();
        let out = trunk
            .forward_traced(&mut tape, x, Mode::Train, &mut trace)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 8, 1, 4]);
        let freq_after_pools: Vec<usize> = trace
            .iter()
            .filter(|(name, _)| name.starts_with("pool"))
            .map(|(_, shape)| shape[2])
            .collect();
        assert_eq!(freq_after_pools, vec![8, 2, 1]);
        // Same-padded convolutions leave both time and frequency untouched.
        for (name, shape) in &trace {
            if name.starts_with("conv") {
                assert_eq!(shape[1], 8, "{name} changed T");
            }
        }
    }

    #[test]
    fn trunk_parameter_counts_match_the_architecture() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(1);
        let trunk = Trunk::build(&mut tape, &mut init, 64);
        let params = trunk.parameters();
        let numel = |name: &str| -> usize {
            params
                .iter()
                .filter(|(n, _)| n.starts_with(name))
                .map(|(_, v)| tape.value(*v).numel())
                .sum()
        };
        assert_eq!(numel("trunk.block1.conv"), 640);
        for i in 2..=6 {
            assert_eq!(numel(&format!("trunk.block{i}.conv")), 36_928);
        }
        assert_eq!(numel("trunk.block1.bn"), 128);
        let total: usize = params.iter().map(|(_, v)| tape.value(*v).numel()).sum();
        assert_eq!(total, 640 + 5 * 36_928 + 6 * 128);
    }

    #[test]
    fn when_model_output_is_per_frame_probabilities() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(2);
        let model = build_when(&mut tape, &mut init, 16, INPUT_BANDS, 4, 3).unwrap();
        let x = tape.constant(random_tensor(vec![2, 16, 40, 1], 5).cast());
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 16]);
        assert!(tape
            .value(out)
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn when_rejects_wrong_band_count() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(2);
        assert!(build_when(&mut tape, &mut init, 16, 39, 4, 3).is_err());
        assert!(build_who(&mut tape, &mut init, 16, 41, 4, 3).is_err());
        assert!(build_who(&mut tape, &mut init, 16, 40, 4, 0).is_err());
    }

    #[test]
    fn zeroed_model_predicts_exactly_one_half() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(2);
        let model = build_when(&mut tape, &mut init, 8, INPUT_BANDS, 4, 3).unwrap();
        let params = model.parameters();
        let zeros = vec![0.0f64; model::flatten_params(&tape, &params).len()];
        model::assign_params(&mut tape, &params, &zeros);
        let x = tape.constant(random_tensor(vec![1, 8, 40, 1], 6).cast());
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn who_with_zero_kernel_predicts_sigmoid_of_bias() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(2);
        let model = build_who(&mut tape, &mut init, 8, INPUT_BANDS, 4, 5).unwrap();
        let params = model.parameters();
        let zeros = vec![0.0f64; model::flatten_params(&tape, &params).len()];
        model::assign_params(&mut tape, &params, &zeros);
        // Distinct biases show through the zero kernel as sigmoid(bias).
        let bias_values = [0.0f32, 1.0, -1.0, 2.5, -0.3];
        let (_, bias_var) = params
            .iter()
            .find(|(n, _)| n == "who.dense.bias")
            .unwrap();
        tape.value_mut(*bias_var)
            .data_mut()
            .copy_from_slice(&bias_values);
        let x = tape.constant(random_tensor(vec![2, 8, 40, 1], 7).cast());
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 5]);
        for row in 0..2 {
            for (c, &b) in bias_values.iter().enumerate() {
                let got = tape.value(out).data()[row * 5 + c];
                assert!((got - b.sigmoid()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn who_inference_is_deterministic() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(4);
        let model = build_who(&mut tape, &mut init, 8, INPUT_BANDS, 4, 87).unwrap();
        let x = tape.constant(random_tensor(vec![1, 8, 40, 1], 8).cast());
        let a = model.forward(&mut tape, x, Mode::Eval).unwrap();
        let a_vals = tape.value(a).data().to_vec();
        let b = model.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(b).data(), a_vals.as_slice());
        assert_eq!(a_vals.len(), 87);
        assert!(a_vals.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bigru_zero_weights_output_zero() {
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(3);
        let gru = BiGru::build(&mut tape, &mut init, 3, 4, 0.0);
        for d in [&gru.fwd, &gru.bwd] {
            for v in [d.w, d.u_zr, d.u_c, d.b] {
                let t = tape.value_mut(v);
                for x in t.data_mut() {
                    *x = 0.0;
                }
            }
        }
        let x = tape.constant(random_tensor(vec![2, 5, 3], 9));
        let out = gru.forward(&mut tape, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_reversal_symmetry() {
        // Reversing the input and swapping the two directional weight sets
        // reverses the output sequence (with the two halves swapped, because
        // the merge is a concatenation).
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(5);
        let gru = BiGru::build(&mut tape, &mut init, 3, 4, 0.0);
        let swapped = BiGru {
            fwd: GruDirection {
                w: gru.bwd.w,
                u_zr: gru.bwd.u_zr,
                u_c: gru.bwd.u_c,
                b: gru.bwd.b,
                units: gru.bwd.units,
            },
            bwd: GruDirection {
                w: gru.fwd.w,
                u_zr: gru.fwd.u_zr,
                u_c: gru.fwd.u_c,
                b: gru.fwd.b,
                units: gru.fwd.units,
            },
            l2: 0.0,
        };
        let (batch, time, dim, units) = (2usize, 5usize, 3usize, 4usize);
        let x = random_tensor(vec![batch, time, dim], 10);
        let mut rev_data = vec![0.0f64; x.numel()];
        for b in 0..batch {
            for t in 0..time {
                for d in 0..dim {
                    rev_data[(b * time + (time - 1 - t)) * dim + d] =
                        x.data()[(b * time + t) * dim + d];
                }
            }
        }
        let xv = tape.constant(x);
        let xr = tape.constant(Tensor::new(vec![batch, time, dim], rev_data).unwrap());
        let out = gru.forward(&mut tape, xv).unwrap();
        let out_swapped = gru_out(&mut tape, &swapped, xr);
        let (o, s) = (tape.value(out).data(), tape.value(out_swapped).data());
        for b in 0..batch {
            for t in 0..time {
                for u in 0..units {
                    let fwd_half = o[(b * time + t) * 2 * units + u];
                    let bwd_half = o[(b * time + t) * 2 * units + units + u];
                    let rt = time - 1 - t;
                    let s_fwd = s[(b * time + rt) * 2 * units + u];
                    let s_bwd = s[(b * time + rt) * 2 * units + units + u];
                    assert!((fwd_half - s_bwd).abs() < 1e-12);
                    assert!((bwd_half - s_fwd).abs() < 1e-12);
                }
            }
        }
    }

    fn gru_out(tape: &mut Tape<f64>, gru: &BiGru, x: Var) -> Var {
        gru.forward(tape, x).unwrap()
    }

    #[test]
    fn batchnorm_train_standardises_each_channel() {
        let mut tape = Tape::<f64>::new();
        let mut bn = BatchNorm::build(&mut tape, 2);
        let x = tape.constant(random_tensor(vec![4, 3, 5, 2], 11));
        let y = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let data = tape.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = data.iter().skip(c).step_by(2).copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-3, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_identity_configuration() {
        let mut tape = Tape::<f64>::new();
        let mut bn = BatchNorm::build(&mut tape, 3);
        bn.eps = 0.0;
        let x = tape.constant(random_tensor(vec![2, 4, 1, 3], 12));
        let y = bn.forward(&mut tape, x, Mode::Eval).unwrap();
        let (xv, yv) = (tape.value(x).data().to_vec(), tape.value(y).data());
        for (a, b) in xv.iter().zip(yv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut tape = Tape::<f64>::new();
        let mut bn = BatchNorm::build(&mut tape, 2);
        let x = tape.leaf(random_tensor(vec![4, 3, 5, 2], 13).requires_grad());
        let params = vec![
            ("x".to_string(), x),
            ("gamma".to_string(), bn.gamma),
            ("beta".to_string(), bn.beta),
        ];
        fd_check_against_forward(
            &mut tape,
            &params,
            vec![4, 3, 5, 2],
            |tape| bn.forward(tape, x, Mode::Train).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn bigru_gradient_matches_finite_differences() {
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(6);
        let gru = BiGru::build(&mut tape, &mut init, 3, 4, 0.0);
        let x = tape.leaf(random_tensor(vec![1, 5, 3], 14).requires_grad());
        let mut params = vec![("x".to_string(), x)];
        for (tag, d) in [("f", &gru.fwd), ("b", &gru.bwd)] {
            params.push((format!("{tag}.w"), d.w));
            params.push((format!("{tag}.u_zr"), d.u_zr));
            params.push((format!("{tag}.u_c"), d.u_c));
            params.push((format!("{tag}.b"), d.b));
        }
        fd_check_against_forward(
            &mut tape,
            &params,
            vec![1, 5, 8],
            |tape| gru.forward(tape, x).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn conv_block_gradient_matches_finite_differences() {
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(7);
        let conv = Conv2d::build(&mut tape, &mut init, (3, 3), 2, 3, 0.0);
        let x = tape.leaf(random_tensor(vec![2, 4, 6, 2], 15).requires_grad());
        let params = vec![
            ("x".to_string(), x),
            ("kernel".to_string(), conv.kernel),
            ("bias".to_string(), conv.bias),
        ];
        fd_check_against_forward(
            &mut tape,
            &params,
            vec![2, 2, 3, 3],
            |tape| {
                let y = conv.forward(tape, x).unwrap();
                let y = tape.relu(y);
                tape.maxpool2d(y, (2, 2)).unwrap()
            },
            1e-4,
        );
    }

    #[test]
    fn checkpoint_roundtrip_restores_the_model_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(21);
        let model = build_when(&mut tape, &mut init, 8, INPUT_BANDS, 4, 3).unwrap();
        // Push the running stats away from their init so they round-trip too.
        let x = tape.constant(random_tensor(vec![2, 8, 40, 1], 22).cast());
        model.forward(&mut tape, x, Mode::Train).unwrap();
        let state = model.state(&tape);
        checkpoint::save(&path, &state).unwrap();

        let mut tape2 = Tape::<f32>::new();
        let mut init2 = Initializer::new(98765);
        let mut model2 = build_when(&mut tape2, &mut init2, 8, INPUT_BANDS, 4, 3).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        model2.restore(&mut tape2, &loaded).unwrap();
        let state2 = model2.state(&tape2);
        assert_eq!(state, state2);

        let path2 = dir.path().join("model2.ckpt");
        checkpoint::save(&path2, &state2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let mut init = Initializer::new(77);
            let model = build_when(&mut tape, &mut init, 8, INPUT_BANDS, 4, 3).unwrap();
            model
                .parameters()
                .iter()
                .flat_map(|(_, v)| tape.value(*v).data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn when_output_length_tracks_any_frame_count() {
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(8);
        let model = build_when(&mut tape, &mut init, 16, INPUT_BANDS, 2, 2).unwrap();
        for t in [1usize, 3, 16, 37] {
            let x = tape.constant(random_tensor(vec![1, t, 40, 1], t as u64).cast());
            let out = model.forward(&mut tape, x, Mode::Eval).unwrap();
            assert_eq!(tape.value(out).shape(), &[1, t], "T = {t}");
        }
    }

    #[test]
    fn l2_penalty_equals_the_manual_kernel_sum() {
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(12);
        let model = build_when(&mut tape, &mut init, 8, INPUT_BANDS, 2, 2).unwrap();
        let terms = model.l2_terms();
        let penalty = l2_penalty(&mut tape, &terms).unwrap();
        let mut manual = 0.0f64;
        for (var, coeff) in &terms {
            let sq: f64 = tape.value(*var).data().iter().map(|w| w * w).sum();
            manual += coeff * sq;
        }
        assert!(
            (tape.value(penalty).item() - manual).abs() < 1e-6,
            "{} vs {manual}",
            tape.value(penalty).item()
        );
        assert!(manual > 0.0);
        // Bias and batch-norm parameters never appear among the terms.
        let named: Vec<String> = model
            .parameters()
            .into_iter()
            .filter(|(_, v)| terms.iter().any(|(tv, _)| tv == v))
            .map(|(n, _)| n)
            .collect();
        assert!(named.iter().all(|n| !n.contains("bias") && !n.contains("bn.")));
    }
}
