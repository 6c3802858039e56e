//! Generator, discriminator and linear heads as parameter bundles plus the
//! procedures that lay them out on a [`Graph`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Bindings, Graph, NodeRef, Shape};

/// Slope of the negative branch of every LeakyReLU unless configured.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_HIDDEN_G: usize = 4096;
pub const DEFAULT_HIDDEN_D_GAN: usize = 1024;
pub const DEFAULT_HIDDEN_D_WGAN: usize = 4096;
/// Standard deviation of the truncated normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FGNW";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: input dim {got} does not chain with previous output {expected}")]
    DimChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: bias has shape {got}, expected 1x{expected}")]
    BiasShape {
        layer: usize,
        expected: usize,
        got: Shape,
    },
    #[error("layer {layer}: non-finite parameter")]
    NonFinite { layer: usize },
    #[error("{layers} layers but {activations} activations")]
    ActivationCount { layers: usize, activations: usize },
    #[error("network has no layers")]
    Empty,
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u16),
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("checkpoint: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint: {0}")]
    Layout(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            NetError::Truncated
        } else {
            NetError::Io(e)
        }
    }
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeRef) -> std::result::Result<NodeRef, AutodiffError> {
        match self {
            Activation::LeakyRelu(k) => g.leaky_relu(x, k),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// One affine layer: `x·weight + bias` with `weight` of shape `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array,
    pub bias: Array,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: Array::zeros((inputs, outputs)),
            bias: Array::zeros((1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Weights and biases of a multilayer perceptron with its activation schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetError::Empty);
        }
        if layers.len() != activations.len() {
            return Err(NetError::ActivationCount {
                layers: layers.len(),
                activations: activations.len(),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 && layers[i - 1].outputs() != layer.inputs() {
                return Err(NetError::DimChain {
                    layer: i,
                    expected: layers[i - 1].outputs(),
                    got: layer.inputs(),
                });
            }
            if layer.bias.dim() != (1, layer.outputs()) {
                return Err(NetError::BiasShape {
                    layer: i,
                    expected: layer.outputs(),
                    got: Shape::of(&layer.bias.view()),
                });
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(NetError::NonFinite { layer: i });
            }
        }
        Ok(MlpParams {
            layers,
            activations,
        })
    }

    /// Generator layout: LeakyReLU hidden layer, ReLU output.
    pub fn generator(layers: Vec<Layer>, slope: f64) -> Result<Self> {
        let n = layers.len();
        let mut acts = vec![Activation::LeakyRelu(slope); n.saturating_sub(1)];
        acts.push(Activation::Relu);
        Self::new(layers, acts)
    }

    /// Discriminator layout: LeakyReLU hidden layers, then sigmoid (GAN) or
    /// identity (critic).
    pub fn discriminator(layers: Vec<Layer>, slope: f64, variant: NetVariant) -> Result<Self> {
        let n = layers.len();
        let mut acts = vec![Activation::LeakyRelu(slope); n.saturating_sub(1)];
        acts.push(match variant {
            NetVariant::Gan => Activation::Sigmoid,
            NetVariant::Wgan => Activation::Identity,
        });
        Self::new(layers, acts)
    }

    /// Single affine layer without activation (logits / scores).
    pub fn linear(layer: Layer) -> Result<Self> {
        Self::new(vec![layer], vec![Activation::Identity])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Parameter arrays in layer order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Declares one input node per parameter array and binds it.
    pub fn attach<'a>(&'a self, g: &mut Graph, bindings: &mut Bindings<'a>) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = g.input(Shape::new(l.inputs(), l.outputs()));
                let b = g.input(Shape::new(1, l.outputs()));
                bindings.bind(w, &l.weight).bind(b, &l.bias);
                (w, b)
            })
            .collect();
        MlpNodes {
            layers,
            activations: self.activations.clone(),
        }
    }

    /// Graph-free forward pass on a batch of rows.
    pub fn apply(&self, x: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let nodes = self.attach(&mut g, &mut b);
        let xin = g.input(Shape::new(x.nrows(), x.ncols()));
        b.bind(xin, x);
        let out = nodes.forward(&mut g, xin)?;
        Ok(g.forward(&b)?.to_owned(out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&self.layers, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Graph nodes standing for an [`MlpParams`] bundle.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    layers: Vec<(NodeRef, NodeRef)>,
    activations: Vec<Activation>,
}

impl MlpNodes {
    /// Parameter nodes in the same order as [`MlpParams::tensors`].
    pub fn params(&self) -> Vec<NodeRef> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef) -> Result<NodeRef> {
        let mut h = x;
        for (&(w, b), act) in self.layers.iter().zip(&self.activations) {
            let a = g.matmul(h, w)?;
            let a = g.add(a, b)?;
            h = act.apply(g, a)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetVariant {
    Gan,
    Wgan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    Generator,
    Discriminator,
}

/// Architecture of a generator/discriminator pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub d_x: usize,
    pub d_c: usize,
    pub d_z: usize,
    pub hidden_g: usize,
    pub hidden_d: usize,
    pub variant: NetVariant,
    pub leaky_slope: f64,
}

impl NetSpec {
    /// Defaults: noise as wide as the class embedding, 4096 generator hidden
    /// units, 1024 (GAN) or 4096 (critic) discriminator hidden units.
    pub fn new(d_x: usize, d_c: usize, variant: NetVariant) -> Self {
        NetSpec {
            d_x,
            d_c,
            d_z: d_c,
            hidden_g: DEFAULT_HIDDEN_G,
            hidden_d: match variant {
                NetVariant::Gan => DEFAULT_HIDDEN_D_GAN,
                NetVariant::Wgan => DEFAULT_HIDDEN_D_WGAN,
            },
            variant,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn with_hidden(mut self, hidden_g: usize, hidden_d: usize) -> Self {
        self.hidden_g = hidden_g;
        self.hidden_d = hidden_d;
        self
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

/// Weights ~ N(0, 0.02²) truncated at ±2σ, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &NetSpec, role: NetRole, rng: &mut R) -> MlpParams {
    let dims = match role {
        NetRole::Generator => [spec.d_z + spec.d_c, spec.hidden_g, spec.d_x],
        NetRole::Discriminator => [spec.d_x + spec.d_c, spec.hidden_d, 1],
    };
    let layers = dims
        .windows(2)
        .map(|w| Layer {
            weight: Array2::from_shape_simple_fn((w[0], w[1]), || {
                truncated_normal(rng, INIT_STD)
            }),
            bias: Array::zeros((1, w[1])),
        })
        .collect();
    match role {
        NetRole::Generator => MlpParams::generator(layers, spec.leaky_slope),
        NetRole::Discriminator => MlpParams::discriminator(layers, spec.leaky_slope, spec.variant),
    }
    .expect("dimensions chain by construction")
}

/// `G(z, c)`: the generator applied to the concatenation `[z; c]`.
pub fn generator_forward(
    g: &mut Graph,
    gen: &MlpNodes,
    z: NodeRef,
    c: NodeRef,
) -> Result<NodeRef> {
    let input = g.concat(z, c)?;
    gen.forward(g, input)
}

/// `D(x, c)`: the discriminator applied to `[x; c]`. Output is `B×1`.
pub fn discriminator_forward(
    g: &mut Graph,
    disc: &MlpNodes,
    x: NodeRef,
    c: NodeRef,
) -> Result<NodeRef> {
    let input = g.concat(x, c)?;
    disc.forward(g, input)
}

/// Writes layers in the `FGNW` checkpoint layout (little-endian).
pub fn write_checkpoint<W: Write>(layers: &[Layer], w: &mut W) -> Result<()> {
    let count = u16::try_from(layers.len())
        .map_err(|_| NetError::Layout(format!("{} layers exceed u16", layers.len())))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for layer in layers {
        for dim in [layer.inputs(), layer.outputs()] {
            let dim = u32::try_from(dim)
                .map_err(|_| NetError::Layout(format!("dimension {dim} exceeds u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

// Reads through `take` so a corrupt header cannot force a huge allocation.
fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let bytes = n
        .checked_mul(8)
        .ok_or_else(|| NetError::Layout(format!("{n} values overflow")))?;
    let mut buf = Vec::new();
    Read::take(&mut *r, bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads an `FGNW` checkpoint; the whole stream must be consumed.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<Layer>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic(magic));
    }
    let version = read_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::BadVersion(version));
    }
    let count = read_u16(r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let size = rows
            .checked_mul(cols)
            .ok_or_else(|| NetError::Layout(format!("{rows}x{cols} layer overflows")))?;
        let weights = read_f64s(r, size)?;
        let bias = read_f64s(r, cols)?;
        layers.push(Layer {
            weight: Array::from_shape_vec((rows, cols), weights).expect("sized above"),
            bias: Array::from_shape_vec((1, cols), bias).expect("sized above"),
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NetError::TrailingBytes(rest.len()));
    }
    Ok(layers)
}

pub fn load_layers(path: impl AsRef<Path>) -> Result<Vec<Layer>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(p: &MlpParams) -> Vec<(usize, usize)> {
        p.layers().iter().map(|l| l.weight.dim()).collect()
    }

    #[test]
    fn cub_generator_dims() {
        // Small hidden width keeps the test cheap; the layout is what matters.
        let spec = NetSpec::new(2048, 312, NetVariant::Wgan);
        assert_eq!(spec.d_z, 312);
        assert_eq!(spec.hidden_g, 4096);
        let spec = spec.with_hidden(16, 16);
        let g = init_params(&spec, NetRole::Generator, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(dims(&g), vec![(624, 16), (16, 2048)]);
    }

    #[test]
    fn gan_discriminator_dims() {
        let spec = NetSpec::new(2048, 312, NetVariant::Gan);
        assert_eq!(spec.hidden_d, 1024);
        assert_eq!(NetSpec::new(2048, 312, NetVariant::Wgan).hidden_d, 4096);
        let d = init_params(&spec, NetRole::Discriminator, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(dims(&d), vec![(2360, 1024), (1024, 1)]);
        assert_eq!(d.activations()[1], Activation::Sigmoid);
    }

    #[test]
    fn init_is_seeded_truncated_and_bias_free() {
        let spec = NetSpec::new(6, 3, NetVariant::Wgan).with_hidden(20, 20);
        let a = init_params(&spec, NetRole::Generator, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_params(&spec, NetRole::Generator, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for l in a.layers() {
            assert!(l.weight.iter().all(|w| w.abs() <= 2.0 * INIT_STD));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    fn zero_net(d_in: usize, hidden: usize, d_out: usize) -> Vec<Layer> {
        vec![Layer::zeros(d_in, hidden), Layer::zeros(hidden, d_out)]
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let g = MlpParams::generator(zero_net(6, 4, 5), 0.2).unwrap();
        let mut graph = Graph::new();
        let mut b = Bindings::new();
        let nodes = g.attach(&mut graph, &mut b);
        let z = graph.input(Shape::new(5, 3));
        let c = graph.input(Shape::new(5, 3));
        let out = generator_forward(&mut graph, &nodes, z, c).unwrap();
        let zv = Array::ones((5, 3));
        b.bind(z, &zv).bind(c, &zv);
        let v = graph.forward(&b).unwrap().to_owned(out);
        assert_eq!(v.dim(), (5, 5));
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn discriminator_outputs_at_zero_params() {
        for (variant, expected) in [(NetVariant::Gan, 0.5), (NetVariant::Wgan, 0.0)] {
            let d = MlpParams::discriminator(zero_net(5, 4, 1), 0.2, variant).unwrap();
            let x = Array::from_elem((3, 5), 1.7);
            let out = d.apply(&x).unwrap();
            assert!(out.iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn dim_chain_is_enforced() {
        let layers = vec![Layer::zeros(3, 4), Layer::zeros(5, 1)];
        assert!(matches!(
            MlpParams::generator(layers, 0.2),
            Err(NetError::DimChain { layer: 1, .. })
        ));
        let mut bad = zero_net(2, 2, 1);
        bad[0].weight[[0, 0]] = f64::NAN;
        assert!(matches!(
            MlpParams::generator(bad, 0.2),
            Err(NetError::NonFinite { layer: 0 })
        ));
    }

    #[test]
    fn checkpoint_layout_is_exact() {
        let layer = Layer {
            weight: ndarray::array![[1.0, 2.0]],
            bias: ndarray::array![[0.5, -0.5]],
        };
        let mut buf = Vec::new();
        write_checkpoint(&[layer.clone()], &mut buf).unwrap();
        let mut expected = b"FGNW".to_vec();
        expected.extend(1u16.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        for v in [1.0f64, 2.0, 0.5, -0.5] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(buf, expected);
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), vec![layer]);
    }

    #[test]
    fn checkpoint_framing_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&zero_net(3, 2, 1), &mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(NetError::Truncated)));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(
            read_checkpoint(&mut extra.as_slice()),
            Err(NetError::TrailingBytes(1))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(NetError::BadMagic(_))));
        let mut ver = buf;
        ver[4] = 9;
        assert!(matches!(read_checkpoint(&mut ver.as_slice()), Err(NetError::BadVersion(9))));
    }
}
