//! Desk-scale networks: teacher and student encoder–decoders, the mask
//! autoencoder, and the alignment headers.
//!
//! All parameters live in one [`ParamStore`] under component prefixes
//! (`teacher.`, `student.`, `psae.`, `tan.`, `san.`), which is what freezing
//! and checkpointing operate on.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{param, shape, Error, Result};
use crate::math;
use crate::optim::Adam;
use crate::rng::{derive, normal, rng_from};
use crate::Tensor;

/// Trainable component of the full model bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Teacher,
    Student,
    Psae,
    Tan,
    San,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Teacher,
        Component::Student,
        Component::Psae,
        Component::Tan,
        Component::San,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Teacher => "teacher",
            Component::Student => "student",
            Component::Psae => "psae",
            Component::Tan => "tan",
            Component::San => "san",
        }
    }

    fn stream(&self) -> u64 {
        *self as u64 + 1
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| param(format!("unknown component `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, component: Component, name: &str, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: format!("{}.{}", component, name),
            component,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self, c: Component) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.component == c).map(|(id, _)| id).collect()
    }

    pub fn set_frozen(&mut self, c: Component, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.component == c) {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.params.iter().filter(|p| p.component == c).all(|p| p.frozen)
    }

    pub fn param_count(&self, c: Component) -> usize {
        self.params.iter().filter(|p| p.component == c).map(|p| p.value.len()).sum()
    }

    /// Named copies of every tensor of `c`, in registration order.
    pub fn snapshot(&self, c: Component) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.component == c)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Replaces tensors by name; every name must exist with an identical shape.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in tensors {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            let cur = &self.params[id.0].value;
            if cur.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        for (name, t) in tensors {
            let id = self.find(name).unwrap();
            self.params[id.0].value = t.clone();
        }
        Ok(())
    }

    /// One optimizer step over `ids` (ascending). Refuses frozen parameters.
    pub fn apply(&mut self, ids: &[ParamId], grads: &[Tensor], opt: &mut Adam) -> Result<()> {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        if let Some(id) = ids.iter().find(|id| self.params[id.0].frozen) {
            return Err(Error::FrozenUpdate(self.params[id.0].name.clone()));
        }
        let mut refs: Vec<&mut Tensor> = self
            .params
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| ids.binary_search(&ParamId(*i)).is_ok())
            .map(|(_, p)| &mut p.value)
            .collect();
        let grads: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut refs, &grads);
        Ok(())
    }

    pub fn quantize_f32(&mut self, c: Component) {
        for p in self.params.iter_mut().filter(|p| p.component == c) {
            p.value.quantize_f32();
        }
    }
}

/// Binds store parameters onto a tape, once each.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'s> Session<'s> {
    /// `grad_enabled = false` records no gradient requirement for any parameter.
    pub fn new(store: &'s ParamStore, grad_enabled: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.params.len()],
            grad_enabled,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), self.grad_enabled && !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every bound, trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.tape.requires_grad(v) {
                    return None;
                }
                let g = self
                    .tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                Some((ParamId(i), g))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvT {
    w: ParamId,
    b: ParamId,
}

impl ConvT {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.conv_transpose2d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.linear(x, w, b)
    }
}

/// Registers parameters for one component with seeded He-style init.
struct Builder<'a> {
    store: &'a mut ParamStore,
    component: Component,
    rng: crate::rng::SeededRng,
    count: usize,
}

impl<'a> Builder<'a> {
    fn new(store: &'a mut ParamStore, component: Component, seed: u64) -> Self {
        Self {
            store,
            component,
            rng: rng_from(derive(seed, component.stream())),
            count: 0,
        }
    }

    fn tensor(&mut self, tag: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let std = math::sqrt(gain / fan_in as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * normal(&mut self.rng)).collect();
        self.count += 1;
        let name = format!("{:02}_{}", self.count, tag);
        self.store.add(self.component, &name, Tensor::new(shape, data).unwrap())
    }

    fn bias(&mut self, tag: &str, n: usize) -> ParamId {
        let name = format!("{:02}_{}.b", self.count, tag);
        self.store.add(self.component, &name, Tensor::zeros(&[n]))
    }

    fn conv(&mut self, tag: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let w = self.tensor(&format!("{tag}.w"), &[cout, cin, k, k], cin * k * k, gain);
        let b = self.bias(tag, cout);
        Conv { w, b, stride, pad: k / 2 }
    }

    fn conv_t(&mut self, tag: &str, cin: usize, cout: usize) -> ConvT {
        let w = self.tensor(&format!("{tag}.w"), &[cin, cout, 2, 2], cin, 2.0);
        let b = self.bias(tag, cout);
        ConvT { w, b }
    }

    fn linear(&mut self, tag: &str, fin: usize, fout: usize, gain: f64) -> Linear {
        let w = self.tensor(&format!("{tag}.w"), &[fin, fout], fin, gain);
        let b = self.bias(tag, fout);
        Linear { w, b }
    }
}

/// Sizes of every network. Defaults are desk scale.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    pub psae_widths: Vec<usize>,
    pub header_width: usize,
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            teacher_widths: vec![8, 16, 32, 64],
            student_widths: vec![4, 8, 16],
            psae_widths: vec![8, 16, 16],
            header_width: 32,
            input_size: 128,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 || self.header_width == 0 {
            return Err(param("latent_dim must be at least 2 and header_width positive"));
        }
        for (name, w) in [
            ("teacher_widths", &self.teacher_widths),
            ("student_widths", &self.student_widths),
            ("psae_widths", &self.psae_widths),
        ] {
            if w.is_empty() || w.contains(&0) {
                return Err(param(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        if self.psae_widths.len() != 3 {
            return Err(param("psae_widths must have exactly 3 entries"));
        }
        let depth = self.teacher_widths.len().max(self.student_widths.len()).max(3);
        if self.input_size == 0 || self.input_size % (1 << depth) != 0 {
            return Err(param(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                1 << depth
            )));
        }
        Ok(())
    }
}

/// Which segmentation network a feature or header belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    Teacher,
    Student,
}

impl NetKind {
    pub fn component(&self) -> Component {
        match self {
            NetKind::Teacher => Component::Teacher,
            NetKind::Student => Component::Student,
        }
    }

    pub fn header(&self) -> Component {
        match self {
            NetKind::Teacher => Component::Tan,
            NetKind::Student => Component::San,
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.component().as_str())
    }
}

/// Deepest encoder activation, tagged with the network that produced it.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckFeature {
    pub var: Var,
    pub source: NetKind,
}

/// Output of a segmentation forward pass.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub input: Var,
    pub bottleneck: BottleneckFeature,
    /// Encoder stage outputs above the bottleneck, shallowest first.
    pub skips: Vec<Var>,
    pub prediction: Var,
}

/// Strided encoder–decoder with skip connections and a sigmoid head.
#[derive(Clone, Debug)]
pub struct SegNet {
    kind: NetKind,
    widths: Vec<usize>,
    input_size: usize,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<(ConvT, Conv)>,
    up_final: ConvT,
    fuse: Conv,
    head: Conv,
}

impl SegNet {
    fn build(b: &mut Builder, kind: NetKind, widths: &[usize], input_size: usize) -> Self {
        let mut enc = Vec::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            let down = b.conv(&format!("enc{i}.down"), cin, w, 3, 2, 2.0);
            let conv = b.conv(&format!("enc{i}.conv"), w, w, 3, 1, 2.0);
            enc.push((down, conv));
            cin = w;
        }
        let mut dec = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            let up = b.conv_t(&format!("dec{i}.up"), cin, widths[i]);
            let conv = b.conv(&format!("dec{i}.conv"), 2 * widths[i], widths[i], 3, 1, 2.0);
            dec.push((up, conv));
            cin = widths[i];
        }
        let w0 = widths[0];
        let up_final = b.conv_t("out.up", cin, w0);
        let fuse = b.conv("out.fuse", w0 + 1, w0, 3, 1, 2.0);
        let head = b.conv("out.head", w0, 1, 1, 1, 1.0);
        Self {
            kind,
            widths: widths.to_vec(),
            input_size,
            enc,
            dec,
            up_final,
            fuse,
            head,
        }
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    /// `(channels, height, width)` of the bottleneck feature.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let side = self.input_size >> self.widths.len();
        (*self.widths.last().unwrap(), side, side)
    }

    /// Encoder only: the bottleneck and the skips above it.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<(BottleneckFeature, Vec<Var>)> {
        match *s.tape.shape(x) {
            [_, 1, h, w] if h == self.input_size && w == self.input_size => {}
            ref other => {
                return Err(shape(
                    "forward_segnet",
                    format!("expected [B, 1, {0}, {0}], got {other:?}", self.input_size),
                ))
            }
        }
        let mut h = x;
        let mut stages = Vec::with_capacity(self.enc.len());
        for (down, conv) in &self.enc {
            let d = down.forward(s, h)?;
            let d = s.tape.relu(d);
            let c = conv.forward(s, d)?;
            h = s.tape.relu(c);
            stages.push(h);
        }
        let var = stages.pop().unwrap();
        Ok((BottleneckFeature { var, source: self.kind }, stages))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<SegOutput> {
        let (bottleneck, skips) = self.encode(s, x)?;
        let prediction = self.decode(s, bottleneck.var, &skips, x)?;
        Ok(SegOutput {
            input: x,
            bottleneck,
            skips,
            prediction,
        })
    }

    /// Decoder from a (possibly substituted) bottleneck, reusing encoder skips.
    pub fn decode(&self, s: &mut Session, bottleneck: Var, skips: &[Var], x: Var) -> Result<Var> {
        let (c, hh, ww) = self.bottleneck_shape();
        match *s.tape.shape(bottleneck) {
            [_, bc, bh, bw] if (bc, bh, bw) == (c, hh, ww) => {}
            ref other => {
                return Err(shape(
                    "decode",
                    format!("{} decoder expects bottleneck [B, {c}, {hh}, {ww}], got {other:?}", self.kind),
                ))
            }
        }
        let mut d = bottleneck;
        for ((up, conv), &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let u = up.forward(s, d)?;
            let u = s.tape.relu(u);
            let cat = s.tape.concat_channels(&[u, skip])?;
            let c = conv.forward(s, cat)?;
            d = s.tape.relu(c);
        }
        let u = self.up_final.forward(s, d)?;
        let u = s.tape.relu(u);
        let cat = s.tape.concat_channels(&[u, x])?;
        let f = self.fuse.forward(s, cat)?;
        let f = s.tape.relu(f);
        let logits = self.head.forward(s, f)?;
        Ok(s.tape.sigmoid(logits))
    }
}

/// Convolutional autoencoder over binary masks.
#[derive(Clone, Debug)]
pub struct Psae {
    size: usize,
    latent_dim: usize,
    inner: (usize, usize),
    enc: [Conv; 3],
    enc_fc: Linear,
    dec_fc: Linear,
    dec: [ConvT; 3],
    out: Conv,
}

impl Psae {
    fn build(b: &mut Builder, widths: &[usize], size: usize, latent_dim: usize) -> Self {
        let [w0, w1, w2] = [widths[0], widths[1], widths[2]];
        let side = size / 8;
        let flat = w2 * side * side;
        Self {
            size,
            latent_dim,
            inner: (w2, side),
            enc: [
                b.conv("enc0", 1, w0, 3, 2, 2.0),
                b.conv("enc1", w0, w1, 3, 2, 2.0),
                b.conv("enc2", w1, w2, 3, 2, 2.0),
            ],
            enc_fc: b.linear("enc_fc", flat, latent_dim, 1.0),
            dec_fc: b.linear("dec_fc", latent_dim, flat, 2.0),
            dec: [b.conv_t("dec0", w2, w1), b.conv_t("dec1", w1, w0), b.conv_t("dec2", w0, w0)],
            out: b.conv("out", w0, 1, 3, 1, 1.0),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Mask batch `[B, 1, H, W]` → latent `[B, C]`.
    pub fn encode(&self, s: &mut Session, mask: Var) -> Result<Var> {
        match *s.tape.shape(mask) {
            [_, 1, h, w] if h == self.size && w == self.size => {}
            ref other => return Err(shape("psae_encode", format!("expected [B, 1, {0}, {0}], got {other:?}", self.size))),
        }
        if s.tape.value(mask).data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(param("psae_encode expects a binary mask"));
        }
        let bsz = s.tape.shape(mask)[0];
        let mut h = mask;
        for c in &self.enc {
            let y = c.forward(s, h)?;
            h = s.tape.relu(y);
        }
        let flat = s.tape.reshape(h, &[bsz, self.inner.0 * self.inner.1 * self.inner.1])?;
        let z = self.enc_fc.forward(s, flat)?;
        bounded_latent(s, z)
    }

    /// Latent `[B, C]` → reconstruction `[B, 1, H, W]` in (0, 1).
    pub fn decode(&self, s: &mut Session, latent: Var) -> Result<Var> {
        let bsz = check_latent(s, latent, self.latent_dim, "psae_decode")?;
        // no activation here: a relu at this point kills most of the code early on
        let h = self.dec_fc.forward(s, latent)?;
        let (c, side) = self.inner;
        let mut h = s.tape.reshape(h, &[bsz, c, side, side])?;
        for up in &self.dec {
            let y = up.forward(s, h)?;
            h = s.tape.relu(y);
        }
        let logits = self.out.forward(s, h)?;
        Ok(s.tape.sigmoid(logits))
    }
}

/// Row-standardize then squash. Without the standardization Adam grows the
/// projection until tanh saturates and the code stops carrying information.
fn bounded_latent(s: &mut Session, z: Var) -> Result<Var> {
    let z = s.tape.row_norm(z)?;
    Ok(s.tape.tanh(z))
}

fn check_latent(s: &Session, latent: Var, c: usize, op: &'static str) -> Result<usize> {
    match *s.tape.shape(latent) {
        [b, w] if w == c => Ok(b),
        ref other => Err(shape(op, format!("expected latent [B, {c}], got {other:?}"))),
    }
}

/// Alignment header: encoding header (bottleneck → latent) and decoding
/// header (latent → bottleneck) for one source network.
#[derive(Clone, Debug)]
pub struct AlignNet {
    source: NetKind,
    feature: (usize, usize, usize),
    width: usize,
    latent_dim: usize,
    enc1: Conv,
    enc2: Conv,
    enc_fc: Linear,
    dec_fc: Linear,
    dec1: Conv,
    dec2: Conv,
}

impl AlignNet {
    fn build(b: &mut Builder, source: NetKind, feature: (usize, usize, usize), width: usize, latent_dim: usize) -> Self {
        let (c, h, w) = feature;
        let flat = width * h * w;
        Self {
            source,
            feature,
            width,
            latent_dim,
            enc1: b.conv("enc1", c, width, 3, 1, 2.0),
            enc2: b.conv("enc2", width, width, 3, 1, 2.0),
            enc_fc: b.linear("enc_fc", flat, latent_dim, 1.0),
            dec_fc: b.linear("dec_fc", latent_dim, flat, 2.0),
            dec1: b.conv("dec1", width, width, 3, 1, 2.0),
            dec2: b.conv("dec2", width, c, 3, 1, 1.0),
        }
    }

    pub fn source(&self) -> NetKind {
        self.source
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature
    }

    pub fn encode(&self, s: &mut Session, feature: BottleneckFeature) -> Result<Var> {
        if feature.source != self.source {
            return Err(param(format!(
                "{} header cannot encode {} features",
                self.source.header(),
                feature.source
            )));
        }
        let (c, h, w) = self.feature;
        let bsz = match *s.tape.shape(feature.var) {
            [b, fc, fh, fw] if (fc, fh, fw) == (c, h, w) => b,
            ref other => return Err(shape("msan_encode", format!("expected [B, {c}, {h}, {w}], got {other:?}"))),
        };
        let y = self.enc1.forward(s, feature.var)?;
        let y = s.tape.relu(y);
        let y = self.enc2.forward(s, y)?;
        let y = s.tape.relu(y);
        let flat = s.tape.reshape(y, &[bsz, self.width * h * w])?;
        let z = self.enc_fc.forward(s, flat)?;
        bounded_latent(s, z)
    }

    pub fn decode(&self, s: &mut Session, latent: Var) -> Result<BottleneckFeature> {
        let bsz = check_latent(s, latent, self.latent_dim, "msan_decode")?;
        let (_, h, w) = self.feature;
        let y = self.dec_fc.forward(s, latent)?;
        let y = s.tape.relu(y);
        let y = s.tape.reshape(y, &[bsz, self.width, h, w])?;
        let y = self.dec1.forward(s, y)?;
        let y = s.tape.relu(y);
        let var = self.dec2.forward(s, y)?;
        Ok(BottleneckFeature {
            var,
            source: self.source,
        })
    }
}

/// Every network of the pipeline plus their shared parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub cfg: NetConfig,
    pub store: ParamStore,
    pub teacher: SegNet,
    pub student: SegNet,
    pub psae: Psae,
    pub tan: AlignNet,
    pub san: AlignNet,
}

impl Models {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let size = cfg.input_size;
        let teacher = SegNet::build(&mut Builder::new(&mut store, Component::Teacher, seed), NetKind::Teacher, &cfg.teacher_widths, size);
        let student = SegNet::build(&mut Builder::new(&mut store, Component::Student, seed), NetKind::Student, &cfg.student_widths, size);
        let psae = Psae::build(&mut Builder::new(&mut store, Component::Psae, seed), &cfg.psae_widths, size, cfg.latent_dim);
        let tan = AlignNet::build(
            &mut Builder::new(&mut store, Component::Tan, seed),
            NetKind::Teacher,
            teacher.bottleneck_shape(),
            cfg.header_width,
            cfg.latent_dim,
        );
        let san = AlignNet::build(
            &mut Builder::new(&mut store, Component::San, seed),
            NetKind::Student,
            student.bottleneck_shape(),
            cfg.header_width,
            cfg.latent_dim,
        );
        let tp = store.param_count(Component::Teacher);
        let sp = store.param_count(Component::Student);
        if tp <= sp {
            return Err(param(format!(
                "teacher must have more parameters than the student ({tp} <= {sp})"
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            teacher,
            student,
            psae,
            tan,
            san,
        })
    }

    pub fn segnet(&self, kind: NetKind) -> &SegNet {
        match kind {
            NetKind::Teacher => &self.teacher,
            NetKind::Student => &self.student,
        }
    }

    pub fn header(&self, kind: NetKind) -> &AlignNet {
        match kind {
            NetKind::Teacher => &self.tan,
            NetKind::Student => &self.san,
        }
    }

    /// Re-draws the parameters of one component from `seed`, keeping
    /// its frozen flags.
    pub fn reinit(&mut self, c: Component, seed: u64) -> Result<()> {
        let fresh = Models::new(&self.cfg, seed)?;
        let snap = fresh.store.snapshot(c);
        self.store.load(&snap)
    }

    pub fn param_summary(&self) -> Vec<(String, usize)> {
        Component::ALL
            .iter()
            .map(|c| (c.to_string(), self.store.param_count(*c)))
            .collect()
    }

    /// Eval-mode segmentation of an image batch `[B, 1, H, W]`:
    /// returns (bottleneck values, prediction values).
    pub fn forward_segnet(&self, kind: NetKind, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = Session::new(&self.store, false);
        let x = s.input(images.clone());
        let out = self.segnet(kind).forward(&mut s, x)?;
        Ok((s.tape.value(out.bottleneck.var).clone(), s.tape.value(out.prediction).clone()))
    }

    /// Eval-mode latent of a mask batch.
    pub fn psae_encode(&self, masks: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let m = s.input(masks.clone());
        let z = self.psae.encode(&mut s, m)?;
        Ok(s.tape.value(z).clone())
    }

    pub fn psae_decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let z = s.input(latent.clone());
        let y = self.psae.decode(&mut s, z)?;
        Ok(s.tape.value(y).clone())
    }

    /// Eval-mode header encoding of raw feature values from `source`.
    pub fn msan_encode(&self, header: NetKind, source: NetKind, feature: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let f = s.input(feature.clone());
        let z = self.header(header).encode(&mut s, BottleneckFeature { var: f, source })?;
        Ok(s.tape.value(z).clone())
    }

    pub fn msan_decode(&self, header: NetKind, latent: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let z = s.input(latent.clone());
        let f = self.header(header).decode(&mut s, z)?;
        Ok(s.tape.value(f.var).clone())
    }

    /// Eval-mode latents of images through a network and its header.
    pub fn image_latents(&self, kind: NetKind, images: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let x = s.input(images.clone());
        let out = self.segnet(kind).forward(&mut s, x)?;
        let z = self.header(kind).encode(&mut s, out.bottleneck)?;
        Ok(s.tape.value(z).clone())
    }
}
