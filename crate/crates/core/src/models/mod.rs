//! Hybrid CNN-RNN surrogates: four encoder-decoder skeletons, three
//! recurrent rainfall encoders, fusion at the CNN bottleneck and the
//! post-processing head.

mod cnn;
mod layers;
mod sequence;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::read_header;
use crate::autodiff::{Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

use cnn::{Cnn, Encoded};
use layers::{Builder, Conv, Linear};
use sequence::RainEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CnnKind {
    Fcn,
    Unet,
    Segnet,
    Deeplab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RnnKind {
    Lstm,
    BiLstm,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Global average pooling, then a fully connected layer of length H*W.
    GapFc,
    /// A 1x1 convolution to one channel.
    Conv1x1,
}

impl CnnKind {
    pub const ALL: [CnnKind; 4] = [CnnKind::Fcn, CnnKind::Unet, CnnKind::Segnet, CnnKind::Deeplab];
    pub fn as_str(self) -> &'static str {
        match self {
            CnnKind::Fcn => "fcn",
            CnnKind::Unet => "unet",
            CnnKind::Segnet => "segnet",
            CnnKind::Deeplab => "deeplabv3plus",
        }
    }
}

impl RnnKind {
    pub const ALL: [RnnKind; 3] = [RnnKind::Lstm, RnnKind::BiLstm, RnnKind::Gru];
    pub fn as_str(self) -> &'static str {
        match self {
            RnnKind::Lstm => "lstm",
            RnnKind::BiLstm => "bilstm",
            RnnKind::Gru => "gru",
        }
    }
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::GapFc => "gap_fc",
            HeadKind::Conv1x1 => "conv1x1",
        }
    }
}

macro_rules! parse_by_name {
    ($t:ty, $all:expr, $what:literal) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let s = s.trim().to_ascii_lowercase();
                $all.into_iter()
                    .find(|k| k.as_str() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} {s:?}", $what)))
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

parse_by_name!(CnnKind, CnnKind::ALL, "cnn kind");
parse_by_name!(RnnKind, RnnKind::ALL, "rnn kind");
parse_by_name!(HeadKind, [HeadKind::GapFc, HeadKind::Conv1x1], "head kind");

/// The 12 (CNN, RNN) pairs in benchmark order.
pub fn all_combos() -> Vec<(CnnKind, RnnKind)> {
    CnnKind::ALL
        .iter()
        .flat_map(|&c| RnnKind::ALL.iter().map(move |&r| (c, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub cnn: CnnKind,
    pub rnn: RnnKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub rnn_hidden: usize,
    pub fusion_channels: usize,
    pub head: HeadKind,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(cnn: CnnKind, rnn: RnnKind, in_channels: usize, height: usize, width: usize) -> Self {
        ModelSpec {
            cnn,
            rnn,
            in_channels,
            height,
            width,
            base_width: 16,
            rnn_hidden: 64,
            fusion_channels: 16,
            head: HeadKind::GapFc,
            dropout: 0.2,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width {} is below 4", self.base_width)));
        }
        if self.rnn_hidden == 0 || self.fusion_channels == 0 {
            return Err(Error::Config("rnn_hidden and fusion_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Dimension(format!(
                "input {}x{} is not divisible by 16",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Geometry of the fusion junction: `(channels, H/16, W/16)`.
    pub fn bottleneck(&self) -> (usize, usize, usize) {
        (
            Cnn::bottleneck_channels(self.cnn, self.base_width),
            self.height / 16,
            self.width / 16,
        )
    }

    /// Space-separated `key=value` tokens, as stored in checkpoint headers.
    pub fn to_meta(&self) -> String {
        format!(
            "cnn={} rnn={} in_channels={} height={} width={} base_width={} rnn_hidden={} fusion_channels={} head={} dropout={} leaky_slope={}",
            self.cnn,
            self.rnn,
            self.in_channels,
            self.height,
            self.width,
            self.base_width,
            self.rnn_hidden,
            self.fusion_channels,
            self.head,
            self.dropout,
            self.leaky_slope
        )
    }

    /// Parses the tokens written by [`ModelSpec::to_meta`]; other tokens are
    /// ignored.
    pub fn from_meta(meta: &str) -> Result<Self> {
        let kv = meta_pairs(meta);
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {k} in checkpoint meta")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {k} in checkpoint meta")))
        };
        Ok(ModelSpec {
            cnn: get("cnn")?.parse()?,
            rnn: get("rnn")?.parse()?,
            in_channels: num("in_channels")?,
            height: num("height")?,
            width: num("width")?,
            base_width: num("base_width")?,
            rnn_hidden: num("rnn_hidden")?,
            fusion_channels: num("fusion_channels")?,
            head: get("head")?.parse()?,
            dropout: real("dropout")?,
            leaky_slope: real("leaky_slope")?,
        })
    }
}

/// `key=value` tokens of a meta line.
pub fn meta_pairs(meta: &str) -> BTreeMap<&str, &str> {
    meta.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect()
}

enum Head {
    GapFc(Linear),
    Conv1x1(Conv),
}

/// Layer layout of a hybrid: parameter handles into a [`ParamStore`].
pub struct Network {
    spec: ModelSpec,
    cnn: Cnn,
    rain: RainEncoder,
    restore: Conv,
    head: Head,
}

pub struct HybridModel {
    store: ParamStore,
    net: Network,
}

impl fmt::Debug for HybridModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridModel")
            .field("spec", &self.net.spec)
            .field("param_count", &self.param_count())
            .finish()
    }
}

impl HybridModel {
    /// Builds and initializes a model; the same spec and seed always give
    /// identical parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let w = spec.base_width;
        let cnn = Cnn::build(&mut b, spec.cnn, spec.in_channels, w);
        let (cb, hb, wb) = spec.bottleneck();
        let rain = RainEncoder::build(
            &mut b,
            spec.rnn,
            spec.rnn_hidden,
            (spec.fusion_channels, hb, wb),
            spec.dropout,
            spec.leaky_slope,
        );
        let restore = b.conv_same("fusion.restore", cb + spec.fusion_channels, cb, 1, true);
        let head = match spec.head {
            HeadKind::GapFc => Head::GapFc(b.linear("head.fc", w, spec.height * spec.width)),
            HeadKind::Conv1x1 => Head::Conv1x1(b.conv_same("head.conv", w, 1, 1, true)),
        };
        Ok(HybridModel {
            store,
            net: Network {
                spec,
                cnn,
                rain,
                restore,
                head,
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }
    pub fn store(&self) -> &ParamStore {
        &self.store
    }
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    pub fn network(&self) -> &Network {
        &self.net
    }
    /// Layout and weights borrowed separately, so a closure can run the
    /// network while the caller mutates the weights between passes.
    pub fn split_mut(&mut self) -> (&Network, &mut ParamStore) {
        (&self.net, &mut self.store)
    }

    /// Sum of all registered tensor sizes, batch-norm running statistics
    /// included.
    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// See [`Network::forward`].
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        rain: &[&[f64]],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        self.net.forward(t, x, rain, mode, rng)
    }

    /// Evaluation-mode forward pass on concrete inputs.
    pub fn predict(&self, x: &Tensor, rain: &[&[f64]]) -> Result<Tensor> {
        let mut t = Tape::new(&self.store);
        let xv = t.input(x.clone());
        // Evaluation mode draws no random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut t, xv, rain, Mode::Eval, &mut rng)?;
        Ok(t.value(y).clone())
    }

    /// Writes the checkpoint; `extra` is appended to the spec's meta tokens.
    pub fn save(&self, path: impl AsRef<Path>, extra: &str) -> Result<()> {
        let meta = format!("{} {}", self.spec().to_meta(), extra);
        self.store.save(path, meta.trim())
    }

    /// Rebuilds the model described by a checkpoint header and loads its
    /// weights. Returns the model and the full meta line.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let header = read_header(&mut std::io::BufReader::new(file))?;
        let spec = ModelSpec::from_meta(&header.meta)?;
        let mut model = HybridModel::new(spec, 0)?;
        let meta = model.store.load(path)?;
        Ok((model, meta))
    }
}

impl Network {
    fn check_input(&self, t: &Tape, x: Var, rain: &[&[f64]]) -> Result<usize> {
        let s = &self.spec;
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.height || shape[3] != s.width {
            return Err(Error::Dimension(format!(
                "model expects [N, {}, {}, {}] input, got {shape:?}",
                s.in_channels, s.height, s.width
            )));
        }
        if rain.len() != shape[0] {
            return Err(Error::Dimension(format!(
                "{} rainfall sequences for a batch of {}",
                rain.len(),
                shape[0]
            )));
        }
        Ok(shape[0])
    }

    /// Runs the hybrid on `x[N, C, H, W]` with one rainfall sequence per
    /// sample and returns `[N, H, W]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        rain: &[&[f64]],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let n = self.check_input(t, x, rain)?;
        let mut enc = self.cnn.encode(t, x, mode)?;
        let r = self.rain.encode(t, rain, mode, rng)?;
        let cat = t.concat_channels(&[enc.bottleneck, r])?;
        enc.bottleneck = self.restore.apply(t, cat)?;
        self.finish(t, enc, n, mode)
    }

    /// The CNN path alone, with no fusion step.
    pub fn forward_cnn_only(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let n = self.check_input(t, x, &vec![&[0.0][..]; t.shape(x)[0]])?;
        let enc = self.cnn.encode(t, x, mode)?;
        self.finish(t, enc, n, mode)
    }

    fn finish(&self, t: &mut Tape, enc: Encoded, n: usize, mode: Mode) -> Result<Var> {
        let y = self.cnn.decode(t, enc, mode)?;
        let (h, w) = (self.spec.height, self.spec.width);
        let y = match &self.head {
            Head::GapFc(fc) => {
                let g = t.global_avg_pool(y)?;
                fc.apply(t, g)?
            }
            Head::Conv1x1(c) => c.apply(t, y)?,
        };
        t.reshape(y, &[n, h, w])
    }
}
