//! Small encoder-decoder segmentation network.
//!
//! A stem at full resolution, `depth` encoder stages that each halve the
//! resolution with a stride-2 convolution, and a mirrored decoder that
//! upsamples (nearest), projects, adds the encoder skip and refines. Each
//! block ends with a learnable per-channel affine instead of batch
//! statistics, so student and teacher behave identically in train and eval.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::io::{read_tensor, write_tensor, DType};
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Fails unless `other` has the same names, in order, with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "{} parameters vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::ParamMismatch(format!("name `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Named-tensor archive: magic `CSNT`, `u32` entry count, then per entry
    /// a `u32` name length, the UTF-8 name and one tensor record.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t, DType::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated count"))?;
        let count = u32::from_le_bytes(word) as usize;
        let mut out = ParamSet::default();
        for _ in 0..count {
            r.read_exact(&mut word).map_err(|_| bad("truncated name"))?;
            let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            out.push(name, read_tensor(r)?);
        }
        Ok(out)
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"CSNT";

/// Anything that maps an image batch to per-pixel class logits with a
/// named parameter set. The trainer and the consistency losses are generic
/// over it.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn num_classes(&self) -> usize;

    /// Logits for `x` (`[N,3,H,W]` or `[3,H,W]`), using `params` bound on
    /// the same tape in `self.params()` order.
    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>>;

    /// Logits without recording gradients.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params().bind(&tape, false);
        let out = self.forward(&params, tape.constant(x.clone()))?;
        Ok(out.to_tensor())
    }

    /// Channel-softmax probabilities without recording gradients.
    fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict(x)?.softmax_channels()?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub stem_width: usize,
    /// One width per encoder stage; the length is the depth.
    pub stage_widths: Vec<usize>,
    pub classes: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_width: 8,
            stage_widths: vec![16, 32, 48],
            classes: 4,
        }
    }
}

const KERNEL: usize = 3;

impl ArchDescriptor {
    pub fn depth(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("architecture", format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.depth() == 0 {
            return Err(Error::config("architecture", "depth must be >= 1"));
        }
        if self.in_channels == 0 || self.stem_width == 0 || self.stage_widths.contains(&0) {
            return Err(Error::config("architecture", "channel widths must be non-zero"));
        }
        Ok(())
    }

    /// Width entering stage `i` (the stem width for `i == 0`).
    fn width(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_width
        } else {
            self.stage_widths[i - 1]
        }
    }

    /// `(name, shape)` of every parameter, in forward order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("stem.conv1".into(), self.stem_width, self.in_channels, KERNEL);
        conv("stem.conv2".into(), self.stem_width, self.stem_width, KERNEL);
        for i in 0..self.depth() {
            let (cin, cout) = (self.width(i), self.width(i + 1));
            conv(format!("enc{i}.down"), cout, cin, KERNEL);
            conv(format!("enc{i}.conv"), cout, cout, KERNEL);
        }
        for i in (0..self.depth()).rev() {
            let (cin, cout) = (self.width(i + 1), self.width(i));
            conv(format!("dec{i}.up"), cout, cin, KERNEL);
            conv(format!("dec{i}.conv"), cout, cout, KERNEL);
        }
        conv("head".into(), self.classes, self.stem_width, 1);

        // per-channel affines, one per block, stored after all convolutions
        let mut affine = |name: String, c: usize| {
            out.push((format!("{name}.gain"), vec![c]));
            out.push((format!("{name}.shift"), vec![c]));
        };
        affine("stem.affine".into(), self.stem_width);
        for i in 0..self.depth() {
            affine(format!("enc{i}.affine"), self.width(i + 1));
        }
        for i in (0..self.depth()).rev() {
            affine(format!("dec{i}.affine"), self.width(i));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug)]
pub struct SegNetwork {
    arch: ArchDescriptor,
    params: ParamSet,
    /// Recorded for callers; the network has no stochastic or
    /// statistics-tracking layers, so both modes compute the same function.
    pub mode: Mode,
    index: LayerIndex,
}

/// Positions of each layer's parameters inside the `ParamSet`.
#[derive(Clone, Debug)]
struct LayerIndex {
    stem: [usize; 2],
    enc: Vec<[usize; 2]>,
    dec: Vec<[usize; 2]>,
    head: usize,
    stem_affine: usize,
    enc_affine: Vec<usize>,
    dec_affine: Vec<usize>,
}

impl LayerIndex {
    fn new(arch: &ArchDescriptor) -> Self {
        let d = arch.depth();
        // each conv owns two entries (weight, bias), each affine two (gain, shift)
        let conv = |k: usize| 2 * k;
        let stem = [conv(0), conv(1)];
        let enc = (0..d).map(|i| [conv(2 + 2 * i), conv(3 + 2 * i)]).collect();
        // decoder stages are stored deepest-first
        let dec_base = 2 + 2 * d;
        let dec = (0..d)
            .map(|i| {
                let slot = d - 1 - i;
                [conv(dec_base + 2 * slot), conv(dec_base + 2 * slot + 1)]
            })
            .collect();
        let head = conv(dec_base + 2 * d);
        let aff_base = head + 2;
        let stem_affine = aff_base;
        let enc_affine = (0..d).map(|i| aff_base + 2 * (1 + i)).collect();
        let dec_affine = (0..d).map(|i| aff_base + 2 * (1 + d + (d - 1 - i))).collect();
        Self {
            stem,
            enc,
            dec,
            head,
            stem_affine,
            enc_affine,
            dec_affine,
        }
    }
}

impl SegNetwork {
    /// He-initialised network; biases and shifts start at zero, gains at one.
    pub fn build(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = ParamSet::default();
        for (name, shape) in arch.layout() {
            let value = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            } else if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            params.push(name, value);
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: ArchDescriptor, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let expected = arch.layout();
        if expected.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "architecture needs {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in expected.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::ParamMismatch(format!(
                    "expected `{name}` {shape:?}, found `{pname}` {:?}",
                    t.shape()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::ParamMismatch("non-finite parameter values".into()));
        }
        Ok(Self {
            index: LayerIndex::new(&arch),
            arch,
            params,
            mode: Mode::default(),
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::config(
                    "network input",
                    format!("expected [3,H,W] or [N,3,H,W], got {shape:?}"),
                ))
            }
        };
        if c != self.arch.in_channels {
            return Err(Error::config(
                "network input",
                format!("expected {} channels, got {c}", self.arch.in_channels),
            ));
        }
        let f = self.arch.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                divisor: f,
            });
        }
        Ok(())
    }

    /// Writes `path` (named-tensor archive) and `path.json` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.params.write_to(&mut w)?;
        w.flush()?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.arch)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch: ArchDescriptor = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let params = ParamSet::read_from(&mut BufReader::new(File::open(path)?))?;
        Self::from_params(arch, params)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Network for SegNetwork {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        if p.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "bound {} parameters, network has {}",
                p.len(),
                self.params.len()
            )));
        }
        let ix = &self.index;
        let conv = |x: Var<'t>, at: usize, spec: Conv2dSpec| x.conv2d(p[at], p[at + 1], spec);
        let affine = |x: Var<'t>, at: usize| x.channel_affine(p[at], p[at + 1]);
        let same = Conv2dSpec::same(KERNEL);
        let down = Conv2dSpec::strided(KERNEL, 2);

        let mut h = conv(x, ix.stem[0], same)?.relu();
        h = affine(conv(h, ix.stem[1], same)?, ix.stem_affine)?.relu();
        let mut skips = vec![h];
        for i in 0..self.arch.depth() {
            h = conv(h, ix.enc[i][0], down)?.relu();
            h = affine(conv(h, ix.enc[i][1], same)?, ix.enc_affine[i])?.relu();
            skips.push(h);
        }
        for i in (0..self.arch.depth()).rev() {
            h = conv(h.upsample2x()?, ix.dec[i][0], same)?;
            h = h.add(skips[i])?.relu();
            h = affine(conv(h, ix.dec[i][1], same)?, ix.dec_affine[i])?.relu();
        }
        Ok(conv(h, ix.head, Conv2dSpec::same(1))?)
    }
}
