//! The four encoder-decoder skeletons. Every encoder downsamples by 16 and
//! exposes its deepest feature map as the fusion junction; every decoder
//! returns a `base_width`-channel map at input resolution.

use crate::autodiff::{ConvOpts, Mode, Tape, Var};
use crate::error::Result;

use super::layers::{BatchNorm, Builder, Conv, ConvBnRelu, ConvT};
use super::CnnKind;

/// Encoder state carried across the fusion junction.
pub(crate) struct Encoded {
    pub bottleneck: Var,
    /// Skip maps, shallowest first.
    pub skips: Vec<Var>,
    /// SegNet pooling indices with their pre-pool geometry, shallowest first.
    pub pools: Vec<(Vec<usize>, usize, usize)>,
}

pub(crate) enum Cnn {
    Fcn(Fcn),
    Unet(Unet),
    Segnet(Segnet),
    Deeplab(Deeplab),
}

impl Cnn {
    pub fn build(b: &mut Builder, kind: CnnKind, cin: usize, w: usize) -> Self {
        match kind {
            CnnKind::Fcn => Cnn::Fcn(Fcn::build(b, cin, w)),
            CnnKind::Unet => Cnn::Unet(Unet::build(b, cin, w)),
            CnnKind::Segnet => Cnn::Segnet(Segnet::build(b, cin, w)),
            CnnKind::Deeplab => Cnn::Deeplab(Deeplab::build(b, cin, w)),
        }
    }

    /// Channel count at the fusion junction.
    pub fn bottleneck_channels(kind: CnnKind, w: usize) -> usize {
        match kind {
            CnnKind::Fcn => 16 * w,
            _ => 8 * w,
        }
    }

    pub fn encode(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Encoded> {
        match self {
            Cnn::Fcn(m) => m.encode(t, x),
            Cnn::Unet(m) => m.encode(t, x, mode),
            Cnn::Segnet(m) => m.encode(t, x, mode),
            Cnn::Deeplab(m) => m.encode(t, x, mode),
        }
    }

    pub fn decode(&self, t: &mut Tape, e: Encoded, mode: Mode) -> Result<Var> {
        match self {
            Cnn::Fcn(m) => m.decode(t, e),
            Cnn::Unet(m) => m.decode(t, e, mode),
            Cnn::Segnet(m) => m.decode(t, e, mode),
            Cnn::Deeplab(m) => m.decode(t, e, mode),
        }
    }
}

fn pool(t: &mut Tape, x: Var) -> Result<Var> {
    Ok(t.max_pool(x, 2, 2)?.0)
}

/// VGG-style encoder (2, 2, 3, 3 convolutions per stage), convolutionalized
/// fully connected layers, and a transposed-convolution decoder with
/// additive score skips from the pooled maps at H/8, H/4 and H/2.
pub(crate) struct Fcn {
    stages: Vec<Vec<Conv>>,
    fc6: Conv,
    fc7: Conv,
    ups: Vec<ConvT>,
    scores: Vec<Conv>,
}

impl Fcn {
    fn build(b: &mut Builder, cin: usize, w: usize) -> Self {
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut stages = Vec::new();
        let mut c = cin;
        for (s, (&width, &n)) in widths.iter().zip(&[2, 2, 3, 3]).enumerate() {
            let mut convs = Vec::new();
            for i in 0..n {
                convs.push(b.conv_same(&format!("fcn.enc{}.conv{}", s + 1, i + 1), c, width, 3, true));
                c = width;
            }
            stages.push(convs);
        }
        let fc6 = b.conv_same("fcn.fc6", 8 * w, 16 * w, 7, true);
        let fc7 = b.conv_same("fcn.fc7", 16 * w, 16 * w, 1, true);
        let chans = [16 * w, 8 * w, 4 * w, 2 * w, w];
        let ups = (0..4)
            .map(|i| b.conv_t(&format!("fcn.up{}", i + 1), chans[i], chans[i + 1], 2, 2))
            .collect();
        // Skips from pool3, pool2, pool1 projected to the decoder width.
        let scores = [(4 * w, 8 * w), (2 * w, 4 * w), (w, 2 * w)]
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| b.conv_same(&format!("fcn.score{}", 3 - i), ci, co, 1, true))
            .collect();
        Fcn { stages, fc6, fc7, ups, scores }
    }

    fn encode(&self, t: &mut Tape, x: Var) -> Result<Encoded> {
        let mut h = x;
        let mut skips = Vec::new();
        for convs in &self.stages {
            for c in convs {
                let y = c.apply(t, h)?;
                h = t.relu(y);
            }
            h = pool(t, h)?;
            skips.push(h);
        }
        skips.pop();
        let y = self.fc6.apply(t, h)?;
        let y = t.relu(y);
        let y = self.fc7.apply(t, y)?;
        let bottleneck = t.relu(y);
        Ok(Encoded { bottleneck, skips, pools: Vec::new() })
    }

    fn decode(&self, t: &mut Tape, e: Encoded) -> Result<Var> {
        let mut h = e.bottleneck;
        for (i, up) in self.ups.iter().enumerate() {
            h = up.apply(t, h)?;
            if let Some(score) = self.scores.get(i) {
                let s = score.apply(t, e.skips[2 - i])?;
                h = t.add(h, s)?;
            }
        }
        Ok(h)
    }
}

struct DoubleConv(ConvBnRelu, ConvBnRelu);

impl DoubleConv {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        DoubleConv(
            ConvBnRelu::same(b, &format!("{name}.a"), cin, cout, 3),
            ConvBnRelu::same(b, &format!("{name}.b"), cout, cout, 3),
        )
    }

    fn apply(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.0.apply(t, x, mode)?;
        self.1.apply(t, y, mode)
    }
}

/// Four-level U-Net with the deepest level kept at 8w channels, 2x2
/// transposed-convolution upsampling, concatenating skips and a final 1x1
/// convolution.
pub(crate) struct Unet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    ups: Vec<ConvT>,
    up_convs: Vec<DoubleConv>,
    last: Conv,
}

impl Unet {
    fn build(b: &mut Builder, cin: usize, w: usize) -> Self {
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut c = cin;
        let mut down = Vec::new();
        for (s, &width) in widths.iter().enumerate() {
            down.push(DoubleConv::new(b, &format!("unet.down{}", s + 1), c, width));
            c = width;
        }
        let bottom = DoubleConv::new(b, "unet.bottom", 8 * w, 8 * w);
        let mut ups = Vec::new();
        let mut up_convs = Vec::new();
        let outs = [4 * w, 2 * w, w, w];
        let mut c = 8 * w;
        for (i, &skip) in widths.iter().rev().enumerate() {
            ups.push(b.conv_t(&format!("unet.up{}.t", 4 - i), c, c, 2, 2));
            up_convs.push(DoubleConv::new(b, &format!("unet.up{}", 4 - i), c + skip, outs[i]));
            c = outs[i];
        }
        let last = b.conv_same("unet.out", w, w, 1, true);
        Unet { down, bottom, ups, up_convs, last }
    }

    fn encode(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Encoded> {
        let mut h = x;
        let mut skips = Vec::new();
        for dc in &self.down {
            h = dc.apply(t, h, mode)?;
            skips.push(h);
            h = pool(t, h)?;
        }
        let bottleneck = self.bottom.apply(t, h, mode)?;
        Ok(Encoded { bottleneck, skips, pools: Vec::new() })
    }

    fn decode(&self, t: &mut Tape, e: Encoded, mode: Mode) -> Result<Var> {
        let mut h = e.bottleneck;
        for (i, (up, dc)) in self.ups.iter().zip(&self.up_convs).enumerate() {
            let u = up.apply(t, h)?;
            let cat = t.concat_channels(&[u, e.skips[3 - i]])?;
            h = dc.apply(t, cat, mode)?;
        }
        self.last.apply(t, h)
    }
}

/// Eight convolutions in four pooling stages; the decoder mirrors them and
/// upsamples by unpooling with the stored indices.
pub(crate) struct Segnet {
    enc: Vec<[ConvBnRelu; 2]>,
    dec: Vec<[ConvBnRelu; 2]>,
}

impl Segnet {
    fn build(b: &mut Builder, cin: usize, w: usize) -> Self {
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut c = cin;
        let mut enc = Vec::new();
        for (s, &width) in widths.iter().enumerate() {
            let name = format!("segnet.enc{}", s + 1);
            enc.push([
                ConvBnRelu::same(b, &format!("{name}.a"), c, width, 3),
                ConvBnRelu::same(b, &format!("{name}.b"), width, width, 3),
            ]);
            c = width;
        }
        let mut dec = Vec::new();
        for s in (0..4).rev() {
            let name = format!("segnet.dec{}", s + 1);
            let width = widths[s];
            let out = if s == 0 { w } else { widths[s - 1] };
            dec.push([
                ConvBnRelu::same(b, &format!("{name}.a"), width, width, 3),
                ConvBnRelu::same(b, &format!("{name}.b"), width, out, 3),
            ]);
        }
        Segnet { enc, dec }
    }

    fn encode(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Encoded> {
        let mut h = x;
        let mut pools = Vec::new();
        for [a, b] in &self.enc {
            h = a.apply(t, h, mode)?;
            h = b.apply(t, h, mode)?;
            let s = t.shape(h);
            let (ph, pw) = (s[2], s[3]);
            let (p, idx) = t.max_pool(h, 2, 2)?;
            pools.push((idx, ph, pw));
            h = p;
        }
        Ok(Encoded { bottleneck: h, skips: Vec::new(), pools })
    }

    fn decode(&self, t: &mut Tape, e: Encoded, mode: Mode) -> Result<Var> {
        let mut h = e.bottleneck;
        for ([a, b], (idx, ph, pw)) in self.dec.iter().zip(e.pools.iter().rev()) {
            h = t.max_unpool(h, idx, *ph, *pw)?;
            h = a.apply(t, h, mode)?;
            h = b.apply(t, h, mode)?;
        }
        Ok(h)
    }
}

/// Residual basic block; downsampling blocks use a 4x4 stride-2 main
/// convolution and a 2x2 stride-2 projection shortcut.
struct BasicBlock {
    c1: ConvBnRelu,
    c2: Conv,
    bn2: BatchNorm,
    proj: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, down: bool) -> Self {
        let c1 = if down {
            ConvBnRelu::new(b, &format!("{name}.c1"), cin, cout, 4, ConvOpts { stride: 2, pad: 1, dilation: 1 })
        } else {
            ConvBnRelu::same(b, &format!("{name}.c1"), cin, cout, 3)
        };
        let c2 = b.conv_same(&format!("{name}.c2.conv"), cout, cout, 3, false);
        let bn2 = b.bn(&format!("{name}.c2.bn"), cout);
        let proj = (down || cin != cout).then(|| {
            let (k, stride) = if down { (2, 2) } else { (1, 1) };
            (
                b.conv(&format!("{name}.proj.conv"), cin, cout, k, false, ConvOpts { stride, pad: 0, dilation: 1 }),
                b.bn(&format!("{name}.proj.bn"), cout),
            )
        });
        BasicBlock { c1, c2, bn2, proj }
    }

    fn apply(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.c1.apply(t, x, mode)?;
        let y = self.c2.apply(t, y)?;
        let y = self.bn2.apply(t, y, mode)?;
        let short = match &self.proj {
            Some((c, bn)) => {
                let s = c.apply(t, x)?;
                bn.apply(t, s, mode)?
            }
            None => x,
        };
        let s = t.add(y, short)?;
        Ok(t.relu(s))
    }
}

/// Residual backbone (four stages of two basic blocks), atrous spatial
/// pyramid pooling at H/16 and a decoder that merges low-level H/4 features.
pub(crate) struct Deeplab {
    stem: ConvBnRelu,
    stages: Vec<[BasicBlock; 2]>,
    aspp: Vec<ConvBnRelu>,
    image_pool: Conv,
    project: ConvBnRelu,
    up1: ConvT,
    low: ConvBnRelu,
    refine: [ConvBnRelu; 2],
    up2: ConvT,
}

pub(crate) const ASPP_RATES: [usize; 3] = [6, 12, 18];

impl Deeplab {
    fn build(b: &mut Builder, cin: usize, w: usize) -> Self {
        let stem = ConvBnRelu::same(b, "deeplab.stem", cin, w, 3);
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut c = w;
        let mut stages = Vec::new();
        for (s, &width) in widths.iter().enumerate() {
            let name = format!("deeplab.layer{}", s + 1);
            stages.push([
                BasicBlock::new(b, &format!("{name}.0"), c, width, true),
                BasicBlock::new(b, &format!("{name}.1"), width, width, false),
            ]);
            c = width;
        }
        let cb = 8 * w;
        let mut aspp = vec![ConvBnRelu::same(b, "deeplab.aspp.b0", cb, cb, 1)];
        for (i, &r) in ASPP_RATES.iter().enumerate() {
            aspp.push(ConvBnRelu::new(b, &format!("deeplab.aspp.b{}", i + 1), cb, cb, 3, ConvOpts::dilated(3, r)));
        }
        let image_pool = b.conv_same("deeplab.aspp.pool", cb, cb, 1, true);
        let project = ConvBnRelu::same(b, "deeplab.aspp.project", 5 * cb, cb, 1);
        let up1 = b.conv_t("deeplab.dec.up1", cb, 4 * w, 4, 4);
        let low = ConvBnRelu::same(b, "deeplab.dec.low", 2 * w, w, 1);
        let refine = [
            ConvBnRelu::same(b, "deeplab.dec.refine1", 5 * w, 4 * w, 3),
            ConvBnRelu::same(b, "deeplab.dec.refine2", 4 * w, 4 * w, 3),
        ];
        let up2 = b.conv_t("deeplab.dec.up2", 4 * w, w, 4, 4);
        Deeplab { stem, stages, aspp, image_pool, project, up1, low, refine, up2 }
    }

    pub(crate) fn aspp(&self, t: &mut Tape, h: Var, mode: Mode) -> Result<Var> {
        let s = t.shape(h).to_vec();
        let mut branches = Vec::new();
        for br in &self.aspp {
            branches.push(br.apply(t, h, mode)?);
        }
        let g = t.global_avg_pool(h)?;
        let g = t.reshape(g, &[s[0], s[1], 1, 1])?;
        let g = self.image_pool.apply(t, g)?;
        let g = t.relu(g);
        branches.push(t.broadcast_spatial(g, s[2], s[3])?);
        let cat = t.concat_channels(&branches)?;
        self.project.apply(t, cat, mode)
    }

    fn encode(&self, t: &mut Tape, x: Var, mode: Mode) -> Result<Encoded> {
        let mut h = self.stem.apply(t, x, mode)?;
        let mut low = None;
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                h = blk.apply(t, h, mode)?;
            }
            if s == 1 {
                low = Some(h);
            }
        }
        let bottleneck = self.aspp(t, h, mode)?;
        Ok(Encoded { bottleneck, skips: low.into_iter().collect(), pools: Vec::new() })
    }

    fn decode(&self, t: &mut Tape, e: Encoded, mode: Mode) -> Result<Var> {
        let up = self.up1.apply(t, e.bottleneck)?;
        let low = self.low.apply(t, e.skips[0], mode)?;
        let cat = t.concat_channels(&[up, low])?;
        let h = self.refine[0].apply(t, cat, mode)?;
        let h = self.refine[1].apply(t, h, mode)?;
        self.up2.apply(t, h)
    }
}
