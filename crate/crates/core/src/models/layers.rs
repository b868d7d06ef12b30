//! Parameterized layers and the seeded initializer that registers them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvOpts, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Registers parameters with Kaiming-uniform weights (bound `sqrt(6/fan_in)`),
/// zero biases and unit batch-norm scales, in registration order.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.add(name, Tensor::new(shape, data).expect("shape"), true)
    }

    fn zeros(&mut self, name: &str, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[len]), true)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, opts: ConvOpts) -> Conv {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&format!("{name}.w"), &[cout, cin, k, k], bound);
        let b = bias.then(|| self.zeros(&format!("{name}.b"), cout));
        Conv { w, b, opts }
    }

    /// Same-padded `k x k` convolution.
    pub fn conv_same(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        self.conv(name, cin, cout, k, bias, ConvOpts::same(k))
    }

    pub fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvT {
        let fan_in = (cin * k * k) as f64 / (stride * stride) as f64;
        let w = self.uniform(&format!("{name}.w"), &[cin, cout, k, k], (6.0 / fan_in).sqrt());
        let b = self.zeros(&format!("{name}.b"), cout);
        ConvT { w, b, stride }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            var: self.store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false),
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.uniform(&format!("{name}.w"), &[dout, din], (6.0 / din as f64).sqrt());
        let b = self.zeros(&format!("{name}.b"), dout);
        Linear { w, b }
    }

    /// Recurrent weight block: `U(-1/sqrt(H), 1/sqrt(H))` matrices, zero
    /// biases except `+1` on the forget-gate slice when `forget_gate` is set
    /// (gate order `i, f, g, o`).
    pub fn recurrent(&mut self, name: &str, input: usize, hidden: usize, gates: usize, forget_gate: bool) -> Recurrent {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = self.uniform(&format!("{name}.w_ih"), &[gates * hidden, input], bound);
        let w_hh = self.uniform(&format!("{name}.w_hh"), &[gates * hidden, hidden], bound);
        let mut bias = vec![0.0; gates * hidden];
        if forget_gate {
            bias[hidden..2 * hidden].fill(1.0);
        }
        let b_ih = self
            .store
            .add(format!("{name}.b_ih"), Tensor::new(&[gates * hidden], bias).expect("shape"), true);
        let b_hh = self.zeros(&format!("{name}.b_hh"), gates * hidden);
        Recurrent { w_ih, w_hh, b_ih, b_hh }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: ConvOpts,
}

impl Conv {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.opts)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvT {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn apply(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batch_norm(x, g, b, (self.mean, self.var), mode)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Recurrent {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, opts: ConvOpts) -> Self {
        ConvBnRelu {
            conv: b.conv(&format!("{name}.conv"), cin, cout, k, false, opts),
            bn: b.bn(&format!("{name}.bn"), cout),
        }
    }

    pub fn same(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(b, name, cin, cout, k, ConvOpts::same(k))
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.apply(tape, x)?;
        let y = self.bn.apply(tape, y, mode)?;
        Ok(tape.relu(y))
    }
}
