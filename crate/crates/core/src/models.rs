//! Target vectors, tiled class inputs, and the three networks: the U-Net
//! generator, the PatchGAN-style discriminator, and the victim classifier.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Side length of the square kernels used by every conv / deconv layer.
pub const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PADDING: usize = 1;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Binary selection of the attack classes that must appear in the output.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TargetVector {
    bits: Vec<bool>,
}

impl TargetVector {
    pub fn new(bits: Vec<bool>) -> Self {
        TargetVector { bits }
    }

    pub fn zeros(n: usize) -> Self {
        TargetVector { bits: vec![false; n] }
    }

    pub fn from_indices(n: usize, active: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in active {
            if i >= n {
                return Err(Error::shape(format!("class index {i} out of range for {n} classes")));
            }
            if bits[i] {
                return Err(Error::shape(format!("class index {i} listed twice")));
            }
            bits[i] = true;
        }
        Ok(TargetVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_null(&self) -> bool {
        self.popcount() == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn to_reals<T: Real>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

/// Draws the batch's target: the zero vector with probability `p_null`,
/// otherwise `k ~ U{1..max_mixed}` distinct classes chosen uniformly.
pub fn sample_target<R: Rng + ?Sized>(n: usize, p_null: f64, max_mixed: usize, rng: &mut R) -> Result<TargetVector> {
    if !(0.0..1.0).contains(&p_null) {
        return Err(Error::shape(format!("p_null must lie in [0, 1), got {p_null}")));
    }
    if max_mixed == 0 || max_mixed > n {
        return Err(Error::shape(format!("max_mixed must lie in 1..={n}, got {max_mixed}")));
    }
    if rng.random::<f64>() < p_null {
        return Ok(TargetVector::zeros(n));
    }
    let k = rng.random_range(1..=max_mixed);
    let picks = index::sample(rng, n, k);
    TargetVector::from_indices(n, &picks.into_vec())
}

/// Parameters of the per-element mixture `½N(+μ, σ²) + ½N(−μ, σ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileMixture {
    pub mean: f64,
    pub variance: f64,
}

impl Default for TileMixture {
    fn default() -> Self {
        TileMixture {
            mean: 1.0,
            variance: 2.0,
        }
    }
}

/// Random `[n, s, s]` class tile: zero planes for inactive classes, mixture
/// noise for active ones. It is also the generator's only noise source.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTile<T: Real = f32> {
    pub tile: Tensor<T>,
}

pub fn sample_class_tile<T: Real, R: Rng + ?Sized>(t: &TargetVector, s: usize, rng: &mut R) -> Result<ClassTile<T>> {
    sample_class_tile_with(t, s, TileMixture::default(), rng)
}

pub fn sample_class_tile_with<T: Real, R: Rng + ?Sized>(
    t: &TargetVector,
    s: usize,
    mix: TileMixture,
    rng: &mut R,
) -> Result<ClassTile<T>> {
    if s == 0 || t.is_empty() {
        return Err(Error::shape("tile side and class count must be positive"));
    }
    let normal = Normal::new(0.0, mix.variance.sqrt())
        .map_err(|e| Error::Config(format!("tile mixture variance: {e}")))?;
    let plane = s * s;
    let mut data = vec![T::zero(); t.len() * plane];
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        if !t.get(i) {
            continue;
        }
        for x in chunk {
            let centre = if rng.random::<bool>() { mix.mean } else { -mix.mean };
            *x = T::lit(centre + normal.sample(rng));
        }
    }
    Ok(ClassTile {
        tile: Tensor::new(&[t.len(), s, s], data, false)?,
    })
}

/// Stacks per-item tiles into a `[B, n, s, s]` batch tensor.
pub fn stack_tiles<T: Real>(tiles: &[ClassTile<T>]) -> Result<Tensor<T>> {
    let first = tiles.first().ok_or_else(|| Error::shape("no tiles to stack"))?;
    let shape = first.tile.shape().to_vec();
    let mut data = Vec::with_capacity(tiles.len() * first.tile.numel());
    for t in tiles {
        if t.tile.shape() != shape.as_slice() {
            return Err(Error::shape("tiles of differing shapes"));
        }
        data.extend_from_slice(t.tile.data());
    }
    let mut full = vec![tiles.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Prelu,
    Tanh,
    Sigmoid,
}

/// One weight-normalized conv or deconv layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    /// Encoder layer whose output is concatenated after this decoder layer.
    pub skip: Option<usize>,
}

impl LayerSpec {
    fn down(name: String, cin: usize, cout: usize, activation: Activation) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            activation,
            skip: None,
        }
    }

    fn up(name: String, cin: usize, cout: usize, activation: Activation, skip: Option<usize>) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            skip,
            ..Self::down(name, cin, cout, activation)
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::Deconv => [self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }
}

fn schedule(i: usize, base: usize, cap: usize) -> usize {
    base.saturating_mul(1usize << i.min(30)).min(cap)
}

/// Tile side for a given substrate size (`S / 64`).
pub fn tile_side(substrate_size: usize) -> Result<usize> {
    if substrate_size == 0 || substrate_size % 64 != 0 {
        return Err(Error::shape(format!(
            "substrate size must be a positive multiple of 64, got {substrate_size}"
        )));
    }
    Ok(substrate_size / 64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub substrate_size: usize,
    pub n: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

impl GeneratorSpec {
    /// Encoder halves `S` down to `2s`; the decoder doubles the `s×s` tile
    /// back to `S`, concatenating the matching encoder map after every layer
    /// but the last.
    pub fn new(substrate_size: usize, n: usize, base_channels: usize, channel_cap: usize) -> Result<Self> {
        let s = tile_side(substrate_size)?;
        if n == 0 || base_channels == 0 || channel_cap == 0 {
            return Err(Error::shape("class count and channel sizes must be positive"));
        }
        // S = s · 2^levels, decoder has `levels` layers, encoder one fewer.
        let levels = (substrate_size / s).trailing_zeros() as usize;
        let depth = levels - 1;
        let ch = |i| schedule(i, base_channels, channel_cap);
        let encoder = (0..depth)
            .map(|i| {
                let cin = if i == 0 { 3 } else { ch(i - 1) };
                LayerSpec::down(format!("gen.enc{i}"), cin, ch(i), Activation::Prelu)
            })
            .collect();
        let mut decoder = Vec::with_capacity(levels);
        let mut cin = n;
        for j in 0..levels {
            if j + 1 == levels {
                decoder.push(LayerSpec::up(format!("gen.dec{j}"), cin, 3, Activation::Tanh, None));
            } else {
                let skip = depth - 1 - j;
                let cout = ch(skip);
                decoder.push(LayerSpec::up(format!("gen.dec{j}"), cin, cout, Activation::Prelu, Some(skip)));
                cin = cout + ch(skip);
            }
        }
        Ok(GeneratorSpec {
            substrate_size,
            n,
            encoder,
            decoder,
        })
    }

    pub fn tile_side(&self) -> usize {
        self.substrate_size / 64
    }

    fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(&self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub substrate_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl DiscriminatorSpec {
    pub fn new(substrate_size: usize, base_channels: usize, channel_cap: usize, depth: usize) -> Result<Self> {
        if depth == 0 || substrate_size >> depth == 0 || substrate_size % (1 << depth) != 0 {
            return Err(Error::shape(format!(
                "discriminator depth {depth} does not divide substrate size {substrate_size}"
            )));
        }
        let layers = (0..depth)
            .map(|i| {
                let cin = if i == 0 { 6 } else { schedule(i - 1, base_channels, channel_cap) };
                if i + 1 == depth {
                    LayerSpec::down(format!("disc.l{i}"), cin, 1, Activation::Sigmoid)
                } else {
                    let cout = schedule(i, base_channels, channel_cap);
                    LayerSpec::down(format!("disc.l{i}"), cin, cout, Activation::Prelu)
                }
            })
            .collect();
        Ok(DiscriminatorSpec { substrate_size, layers })
    }

    /// Side of the output patch grid.
    pub fn patch_side(&self) -> usize {
        self.substrate_size >> self.layers.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_size: usize,
    pub n_total: usize,
    pub convs: Vec<LayerSpec>,
    pub hidden: usize,
}

impl ClassifierSpec {
    /// Three stride-2 conv layers, then a PReLU hidden layer and a softmax head.
    pub fn new(input_size: usize, n_total: usize, base_channels: usize, hidden: usize) -> Result<Self> {
        if input_size == 0 || input_size % 8 != 0 {
            return Err(Error::shape(format!(
                "classifier input size must be a positive multiple of 8, got {input_size}"
            )));
        }
        if n_total < 2 || base_channels == 0 || hidden == 0 {
            return Err(Error::shape("classifier needs ≥ 2 classes and positive widths"));
        }
        let convs = (0..3)
            .map(|i| {
                let cin = if i == 0 { 3 } else { base_channels << (i - 1) };
                LayerSpec::down(format!("cls.conv{i}"), cin, base_channels << i, Activation::Prelu)
            })
            .collect();
        Ok(ClassifierSpec {
            input_size,
            n_total,
            convs,
            hidden,
        })
    }

    fn flat_features(&self) -> usize {
        let side = self.input_size >> self.convs.len();
        self.convs.last().map_or(3, |l| l.out_channels) * side * side
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every tensor on the tape. Frozen sets become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    let mut t = t.clone();
                    t.set_requires_grad(true);
                    tape.leaf_owned(t)
                } else {
                    tape.constant(t.shape(), t.data().to_vec()).expect("parameter shape is valid")
                }
            })
            .collect()
    }

    /// Adds the tape's leaf gradients into each tensor's gradient buffer.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let n = t.numel();
                    t.accumulate_grad(&vec![T::zero(); n])?
                }
            }
        }
        Ok(())
    }

    /// Sets every weight-norm gain (`*.g`) to `value`.
    pub fn fill_gains(&mut self, value: T) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.ends_with(".g") {
                t.data_mut().fill(value);
            }
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    /// Hash of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for x in t.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Checks names and shapes against a freshly initialized reference.
    fn conforms_to(&self, reference: &ParamSet<T>) -> Result<()> {
        for (name, t) in reference.iter() {
            match self.get(name) {
                Some(mine) if mine.shape() == t.shape() => {}
                Some(mine) => {
                    return Err(Error::shape(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        mine.shape()
                    )))
                }
                None => return Err(Error::shape(format!("missing parameter {name}"))),
            }
        }
        if self.len() != reference.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, found {}",
                reference.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Reorders `self` to follow `reference`'s order.
    fn aligned_to(mut self, reference: &ParamSet<T>) -> Result<Self> {
        self.conforms_to(reference)?;
        let mut out = ParamSet::default();
        for name in reference.names() {
            let i = self.index_of(name).expect("conformance checked");
            out.push(name.clone(), self.tensors[i].clone());
        }
        self.tensors.clear();
        Ok(out)
    }
}

fn normal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data, true).expect("shape is valid")
}

/// Indices of one layer's tensors inside its network's [`ParamSet`].
#[derive(Clone, Copy, Debug)]
struct LayerParams {
    v: usize,
    g: usize,
    b: usize,
    a: Option<usize>,
}

fn init_layer<T: Real, R: Rng + ?Sized>(spec: &LayerSpec, params: &mut ParamSet<T>, rng: &mut R) -> LayerParams {
    let shape = spec.weight_shape();
    let v = normal_tensor::<T, _>(&shape, INIT_STD, rng);
    let cout = spec.out_channels;
    let mut norms = vec![T::zero(); cout];
    let inner = spec.kernel * spec.kernel;
    for (i, x) in v.data().iter().enumerate() {
        let o = match spec.kind {
            LayerKind::Conv => i / (spec.in_channels * inner),
            LayerKind::Deconv => (i / inner) % cout,
        };
        norms[o] += *x * *x;
    }
    let g = Tensor::new(&[cout], norms.into_iter().map(|s| s.sqrt()).collect(), true).expect("gain shape");
    let b = Tensor::new(&[cout], vec![T::zero(); cout], true).expect("bias shape");
    let v = params.push(format!("{}.v", spec.name), v);
    let g = params.push(format!("{}.g", spec.name), g);
    let b = params.push(format!("{}.b", spec.name), b);
    let a = (spec.activation == Activation::Prelu).then(|| {
        let a = Tensor::new(&[1], vec![T::lit(PRELU_INIT)], true).expect("slope shape");
        params.push(format!("{}.a", spec.name), a)
    });
    LayerParams { v, g, b, a }
}

fn layer_forward<T: Real>(tape: &mut Tape<T>, spec: &LayerSpec, lp: LayerParams, vars: &[Var], x: Var) -> Result<Var> {
    let (v, g, b) = (vars[lp.v], vars[lp.g], vars[lp.b]);
    let y = match spec.kind {
        LayerKind::Conv => tape.conv2d_wn(x, v, g, b, spec.stride, spec.padding)?,
        LayerKind::Deconv => tape.conv_transpose2d_wn(x, v, g, b, spec.stride, spec.padding)?,
    };
    Ok(match spec.activation {
        Activation::Prelu => tape.prelu(y, vars[lp.a.expect("prelu layer has a slope")])?,
        Activation::Tanh => tape.tanh(y),
        Activation::Sigmoid => tape.sigmoid(y),
    })
}

fn build_layers<T: Real, R: Rng + ?Sized>(
    specs: impl Iterator<Item = LayerSpec>,
    params: &mut ParamSet<T>,
    rng: &mut R,
) -> Vec<LayerParams> {
    specs.map(|s| init_layer(&s, params, rng)).collect()
}

fn check_image(what: &str, tape_shape: &[usize], channels: usize, side: usize) -> Result<usize> {
    match *tape_shape {
        [b, c, h, w] if c == channels && h == side && w == side => Ok(b),
        _ => Err(Error::shape(format!(
            "{what}: expected [B, {channels}, {side}, {side}], got {tape_shape:?}"
        ))),
    }
}

/// U-Net generator `G(substrate, tile)`.
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
    layout: Vec<LayerParams>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let layout = build_layers(spec.layers().cloned(), &mut params, rng);
        Generator { spec, params, layout }
    }

    /// Rebuilds a generator around stored parameters.
    pub fn from_params(spec: GeneratorSpec, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::new(spec, &mut rng);
        let params = params.aligned_to(&reference.params)?;
        Ok(Generator { params, ..reference })
    }

    /// `substrate [B, 3, S, S]`, `tile [B, n, s, s]` → `[B, 3, S, S]` in (−1, 1).
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], substrate: Var, tile: Var) -> Result<Var> {
        let s = self.spec.substrate_size;
        let batch = check_image("generator substrate", tape.shape(substrate), 3, s)?;
        let tb = check_image("generator tile", tape.shape(tile), self.spec.n, self.spec.tile_side())?;
        if tb != batch {
            return Err(Error::shape(format!("{tb} tiles for a batch of {batch} substrates")));
        }
        let (enc_lp, dec_lp) = self.layout.split_at(self.spec.encoder.len());
        let mut feats = Vec::with_capacity(enc_lp.len());
        let mut x = substrate;
        for (spec, &lp) in self.spec.encoder.iter().zip(enc_lp) {
            x = layer_forward(tape, spec, lp, vars, x)?;
            feats.push(x);
        }
        let mut h = tile;
        for (spec, &lp) in self.spec.decoder.iter().zip(dec_lp) {
            h = layer_forward(tape, spec, lp, vars, h)?;
            if let Some(k) = spec.skip {
                h = tape.concat_channels(h, feats[k])?;
            }
        }
        Ok(h)
    }

    /// Forward pass outside training.
    pub fn generate(&self, substrate: &Tensor<T>, tile: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(substrate.shape(), substrate.data().to_vec())?;
        let t = tape.constant(tile.shape(), tile.data().to_vec())?;
        let y = self.forward(&mut tape, &vars, x, t)?;
        Ok(tape.to_tensor(y))
    }
}

/// Patch discriminator `D(substrate, image)`.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
    layout: Vec<LayerParams>,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let layout = build_layers(spec.layers.iter().cloned(), &mut params, rng);
        Discriminator { spec, params, layout }
    }

    pub fn from_params(spec: DiscriminatorSpec, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::new(spec, &mut rng);
        let params = params.aligned_to(&reference.params)?;
        Ok(Discriminator { params, ..reference })
    }

    /// Returns patch probabilities `[B, 1, P, P]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], substrate: Var, image: Var) -> Result<Var> {
        if tape.shape(substrate) != tape.shape(image) {
            return Err(Error::shape(format!(
                "discriminator inputs differ: {:?} vs {:?}",
                tape.shape(substrate),
                tape.shape(image)
            )));
        }
        check_image("discriminator input", tape.shape(image), 3, self.spec.substrate_size)?;
        let mut x = tape.concat_channels(substrate, image)?;
        for (spec, &lp) in self.spec.layers.iter().zip(&self.layout) {
            x = layer_forward(tape, spec, lp, vars, x)?;
        }
        Ok(x)
    }
}

/// Victim image classifier with a softmax head over `n_total` classes.
#[derive(Clone, Debug)]
pub struct Classifier<T: Real = f32> {
    pub spec: ClassifierSpec,
    pub params: ParamSet<T>,
    layout: Vec<LayerParams>,
    dense: [usize; 5],
}

impl<T: Real> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let layout = build_layers(spec.convs.iter().cloned(), &mut params, rng);
        let flat = spec.flat_features();
        let w1 = params.push("cls.fc0.w".into(), normal_tensor(&[spec.hidden, flat], INIT_STD, rng));
        let b1 = params.push("cls.fc0.b".into(), Tensor::new(&[spec.hidden], vec![T::zero(); spec.hidden], true).unwrap());
        let a = params.push("cls.fc0.a".into(), Tensor::new(&[1], vec![T::lit(PRELU_INIT)], true).unwrap());
        let w2 = params.push("cls.fc1.w".into(), normal_tensor(&[spec.n_total, spec.hidden], INIT_STD, rng));
        let b2 = params.push(
            "cls.fc1.b".into(),
            Tensor::new(&[spec.n_total], vec![T::zero(); spec.n_total], true).unwrap(),
        );
        Classifier {
            spec,
            params,
            layout,
            dense: [w1, b1, a, w2, b2],
        }
    }

    pub fn from_params(spec: ClassifierSpec, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::new(spec, &mut rng);
        let params = params.aligned_to(&reference.params)?;
        Ok(Classifier { params, ..reference })
    }

    /// Unnormalized class scores `[B, n_total]` for `image [B, 3, c, c]`.
    pub fn logits(&self, tape: &mut Tape<T>, vars: &[Var], image: Var) -> Result<Var> {
        let batch = check_image("classifier input", tape.shape(image), 3, self.spec.input_size)?;
        let mut x = image;
        for (spec, &lp) in self.spec.convs.iter().zip(&self.layout) {
            x = layer_forward(tape, spec, lp, vars, x)?;
        }
        let flat = tape.reshape(x, &[batch, self.spec.flat_features()])?;
        let [w1, b1, a, w2, b2] = self.dense;
        let h = tape.linear(flat, vars[w1], vars[b1])?;
        let h = tape.prelu(h, vars[a])?;
        tape.linear(h, vars[w2], vars[b2])
    }

    /// Class probabilities `[B, n_total]`; rows sum to one.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], image: Var) -> Result<Var> {
        let logits = self.logits(tape, vars, image)?;
        tape.softmax(logits)
    }

    /// Probabilities for a batch of images outside training.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        let p = self.forward(&mut tape, &vars, x)?;
        Ok(tape.to_tensor(p))
    }
}
