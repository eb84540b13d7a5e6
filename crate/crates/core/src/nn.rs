//! Small neural-network building blocks over the tape: dense layers, 3×3
//! convolutions, residual stacks and a deterministic Adam optimizer.

use alloc::vec::Vec;

use crate::graph::{Tape, Var};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dense layer, weight stored input-major (I×O).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / inputs as f64);
        Linear {
            w: Tensor::randn(&[inputs, outputs], std, rng),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 2] {
        if trainable {
            [tape.param(self.w.clone()), tape.param(self.b.clone())]
        } else {
            [tape.leaf(self.w.clone()), tape.leaf(self.b.clone())]
        }
    }

    pub fn forward(tape: &mut Tape, vars: &[Var; 2], x: Var) -> Var {
        let xw = tape.matmul(x, vars[0]);
        tape.add_row(xw, vars[1])
    }
}

/// 3×3 convolution with padding 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / (in_ch * 9) as f64);
        Self::with_std(in_ch, out_ch, stride, std, rng)
    }

    pub fn with_std(in_ch: usize, out_ch: usize, stride: usize, std: f64, rng: &mut Rng) -> Self {
        Conv2d {
            w: Tensor::randn(&[out_ch, in_ch, 3, 3], std, rng),
            b: Tensor::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 2] {
        if trainable {
            [tape.param(self.w.clone()), tape.param(self.b.clone())]
        } else {
            [tape.leaf(self.w.clone()), tape.leaf(self.b.clone())]
        }
    }

    pub fn forward_with(&self, tape: &mut Tape, vars: &[Var; 2], x: Var) -> Var {
        tape.conv2d(x, vars[0], vars[1], self.stride, 1)
    }
}

/// Two-conv residual block at constant width.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        ResBlock {
            c1: Conv2d::new(ch, ch, 1, rng),
            c2: Conv2d::new(ch, ch, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> [[Var; 2]; 2] {
        [self.c1.bind(tape, trainable), self.c2.bind(tape, trainable)]
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[[Var; 2]; 2], x: Var) -> Var {
        let h = self.c1.forward_with(tape, &vars[0], x);
        let h = tape.relu(h);
        let h = self.c2.forward_with(tape, &vars[1], h);
        let sum = tape.add(h, x);
        tape.relu(sum)
    }
}

/// Deterministic Adam. State is positionally matched with the parameter list
/// passed to [`Adam::step`], which must keep a fixed order across steps.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "adam: state reused with different params"
        );
        self.t += 1;
        let b1t = 1.0 - math::powf(self.beta1, self.t as f64);
        let b2t = 1.0 - math::powf(self.beta2, self.t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape());
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                pd[i] -= self.lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Collect gradients for a bound variable list, zeros where a parameter did
/// not participate in the loss.
pub fn harvest_grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn linear_gradcheck() {
        let mut rng = Rng::new(1);
        let layer = Linear::new(4, 3, &mut rng);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);

        let run = |w: &Tensor, b: &Tensor, x: &Tensor, want: &str| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let xv = tape.param(x.clone());
            let y = Linear::forward(&mut tape, &[wv, bv], xv);
            let sq = tape.mul(y, y);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            let g = match want {
                "w" => tape.grad(wv).unwrap().clone(),
                "b" => tape.grad(bv).unwrap().clone(),
                _ => tape.grad(xv).unwrap().clone(),
            };
            (tape.value(loss).item(), g)
        };

        let (_, gw) = run(&layer.w, &layer.b, &x, "w");
        let err = gradcheck::check_grad(
            &layer.w,
            &gw,
            |w| run(w, &layer.b, &x, "w").0,
            gradcheck::FD_STEP,
        );
        assert!(err < gradcheck::FD_TOL, "w rel err {err}");

        let (_, gx) = run(&layer.w, &layer.b, &x, "x");
        let err = gradcheck::check_grad(
            &x,
            &gx,
            |xp| run(&layer.w, &layer.b, xp, "x").0,
            gradcheck::FD_STEP,
        );
        assert!(err < gradcheck::FD_TOL, "x rel err {err}");
    }

    #[test]
    fn conv_and_pool_gradcheck() {
        let mut rng = Rng::new(2);
        let conv = Conv2d::new(2, 3, 2, &mut rng);
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);

        let run = |w: &Tensor, x: &Tensor| -> (f64, Tensor, Tensor) {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let bv = tape.leaf(conv.b.clone());
            let xv = tape.param(x.clone());
            let y = tape.conv2d(xv, wv, bv, conv.stride, 1);
            let y = tape.relu(y);
            let p = tape.mean_hw(y);
            let sq = tape.mul(p, p);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            (
                tape.value(loss).item(),
                tape.grad(wv).unwrap().clone(),
                tape.grad(xv).unwrap().clone(),
            )
        };

        let (_, gw, gx) = run(&conv.w, &x);
        let err_w = gradcheck::check_grad(&conv.w, &gw, |w| run(w, &x).0, gradcheck::FD_STEP);
        assert!(err_w < gradcheck::FD_TOL, "w rel err {err_w}");
        let err_x = gradcheck::check_grad(&x, &gx, |xp| run(&conv.w, xp).0, gradcheck::FD_STEP);
        assert!(err_x < gradcheck::FD_TOL, "x rel err {err_x}");
    }

    #[test]
    fn residual_block_gradcheck() {
        let mut rng = Rng::new(3);
        let block = ResBlock::new(2, &mut rng);
        let x = Tensor::randn(&[1, 2, 4, 4], 0.7, &mut rng);

        let run = |x: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape, false);
            let xv = tape.param(x.clone());
            let y = block.forward(&mut tape, &vars, xv);
            let sq = tape.mul(y, y);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            (tape.value(loss).item(), tape.grad(xv).unwrap().clone())
        };
        let (_, gx) = run(&x);
        let err = gradcheck::check_grad(&x, &gx, |xp| run(xp).0, gradcheck::FD_STEP);
        assert!(err < gradcheck::FD_TOL, "rel err {err}");
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Tensor::from_vec(&[2], alloc::vec![3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let g = Tensor::from_vec(&[2], alloc::vec![2.0 * p.data()[0], 2.0 * p.data()[1]]);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(
            p.data()[0].abs() < 1e-2 && p.data()[1].abs() < 1e-2,
            "{:?}",
            p.data()
        );
    }
}
