//! Two-layer recurrent rainfall encoders projected onto the bottleneck grid.

use rand::Rng;

use crate::autodiff::{gru_cell, lstm_cell, GruWeights, LstmWeights, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::layers::{Builder, Linear, Recurrent};
use super::RnnKind;

pub(crate) enum Layer {
    Lstm(Recurrent),
    Gru(Recurrent),
    BiLstm(Recurrent, Recurrent),
}

fn lstm_weights(t: &mut Tape, r: &Recurrent) -> LstmWeights {
    LstmWeights {
        w_ih: t.param(r.w_ih),
        w_hh: t.param(r.w_hh),
        b_ih: t.param(r.b_ih),
        b_hh: t.param(r.b_hh),
    }
}

fn gru_weights(t: &mut Tape, r: &Recurrent) -> GruWeights {
    GruWeights {
        w_ih: t.param(r.w_ih),
        w_hh: t.param(r.w_hh),
        b_ih: t.param(r.b_ih),
        b_hh: t.param(r.b_hh),
    }
}

fn run_lstm(t: &mut Tape, w: &LstmWeights, xs: &[Var], n: usize, hidden: usize) -> Result<Vec<Var>> {
    let mut h = t.input(Tensor::zeros(&[n, hidden]));
    let mut c = t.input(Tensor::zeros(&[n, hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_cell(t, x, h, c, w)?;
        out.push(h);
    }
    Ok(out)
}

impl Layer {
    pub fn build(b: &mut Builder, kind: RnnKind, name: &str, input: usize, hidden: usize) -> Self {
        match kind {
            RnnKind::Lstm => Layer::Lstm(b.recurrent(name, input, hidden, 4, true)),
            RnnKind::Gru => Layer::Gru(b.recurrent(name, input, hidden, 3, false)),
            RnnKind::BiLstm => Layer::BiLstm(
                b.recurrent(&format!("{name}.fwd"), input, hidden, 4, true),
                b.recurrent(&format!("{name}.bwd"), input, hidden, 4, true),
            ),
        }
    }

    /// Runs the layer over `xs` (each `[n, in]`). Returns the per-step
    /// outputs and the sequence summary: the last hidden state, or for the
    /// bidirectional layer the forward pass's last state concatenated with
    /// the backward pass's last state.
    pub fn run(&self, t: &mut Tape, xs: &[Var], hidden: usize) -> Result<(Vec<Var>, Var)> {
        let n = t.shape(xs[0])[0];
        match self {
            Layer::Lstm(r) => {
                let w = lstm_weights(t, r);
                let out = run_lstm(t, &w, xs, n, hidden)?;
                let last = *out.last().expect("nonempty");
                Ok((out, last))
            }
            Layer::Gru(r) => {
                let w = gru_weights(t, r);
                let mut h = t.input(Tensor::zeros(&[n, hidden]));
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    h = gru_cell(t, x, h, &w)?;
                    out.push(h);
                }
                Ok((out, h))
            }
            Layer::BiLstm(f, b) => {
                let wf = lstm_weights(t, f);
                let wb = lstm_weights(t, b);
                let fwd = run_lstm(t, &wf, xs, n, hidden)?;
                let rev: Vec<Var> = xs.iter().rev().copied().collect();
                let mut bwd = run_lstm(t, &wb, &rev, n, hidden)?;
                bwd.reverse();
                let summary = t.concat(&[*fwd.last().expect("nonempty"), bwd[0]], 1)?;
                let out = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&a, &b)| t.concat(&[a, b], 1))
                    .collect::<Result<Vec<_>>>()?;
                Ok((out, summary))
            }
        }
    }

    pub fn output_width(kind: RnnKind, hidden: usize) -> usize {
        match kind {
            RnnKind::BiLstm => 2 * hidden,
            _ => hidden,
        }
    }
}

/// layer 1 -> dropout -> layer 2 -> dropout -> LeakyReLU -> FC -> reshape.
pub(crate) struct RainEncoder {
    pub layers: [Layer; 2],
    pub fc: Linear,
    pub hidden: usize,
    /// `(channels, Hb, Wb)` of the projected map.
    pub grid: (usize, usize, usize),
    pub dropout: f64,
    pub slope: f64,
}

impl RainEncoder {
    pub fn build(
        b: &mut Builder,
        kind: RnnKind,
        hidden: usize,
        grid: (usize, usize, usize),
        dropout: f64,
        slope: f64,
    ) -> Self {
        let l1 = Layer::build(b, kind, "rnn.l1", 1, hidden);
        let l2 = Layer::build(b, kind, "rnn.l2", Layer::output_width(kind, hidden), hidden);
        let fc = b.linear("rnn.fc", Layer::output_width(kind, hidden), grid.0 * grid.1 * grid.2);
        RainEncoder {
            layers: [l1, l2],
            fc,
            hidden,
            grid,
            dropout,
            slope,
        }
    }

    /// Summaries for a group of equal-length sequences, `[n, width]`.
    fn summarize(&self, t: &mut Tape, seqs: &[&[f64]], mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        let steps = seqs[0].len();
        let n = seqs.len();
        let xs: Vec<Var> = (0..steps)
            .map(|k| t.input(Tensor::new(&[n, 1], seqs.iter().map(|s| s[k]).collect()).expect("shape")))
            .collect();
        let (out, _) = self.layers[0].run(t, &xs, self.hidden)?;
        let out = out
            .into_iter()
            .map(|v| t.dropout(v, self.dropout, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let (_, summary) = self.layers[1].run(t, &out, self.hidden)?;
        t.dropout(summary, self.dropout, mode, rng)
    }

    /// Encodes one rainfall sequence per sample into `[N, F, Hb, Wb]`.
    /// Sequences of unequal length are run one sample at a time.
    pub fn encode(&self, t: &mut Tape, rain: &[&[f64]], mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if rain.is_empty() || rain.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("rainfall sequence is empty".into()));
        }
        let summary = if rain.iter().all(|s| s.len() == rain[0].len()) {
            self.summarize(t, rain, mode, rng)?
        } else {
            let parts = rain
                .iter()
                .map(|s| self.summarize(t, std::slice::from_ref(s), mode, rng))
                .collect::<Result<Vec<_>>>()?;
            t.concat(&parts, 0)?
        };
        let a = t.leaky_relu(summary, self.slope);
        let y = self.fc.apply(t, a)?;
        let (f, hb, wb) = self.grid;
        t.reshape(y, &[rain.len(), f, hb, wb])
    }
}
