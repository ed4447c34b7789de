use std::io::{Read, Write};

use super::layer::{Layer, LayerSpec, Param};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Every intermediate output of one forward pass.
///
/// `outputs[0]` is the input, `outputs[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations<T = f32> {
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.outputs[0]
    }

    /// Output of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer + 1]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("activations hold at least the input")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs.pop().expect("activations hold at least the input")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Where a layer sequence currently sits: spatial maps or flat vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Any,
    Spatial(usize),
    Flat(usize),
}

/// A sequential stack of layers with named tap points.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
    taps: Vec<(String, usize)>,
}

impl<T: Scalar> Network<T> {
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_chain(specs)?;
        let mut rng = crate::rng(seed);
        let layers = specs.iter().map(|&s| Layer::init(s, &mut rng)).collect();
        Ok(Network {
            layers,
            taps: Vec::new(),
        })
    }

    /// Names the output of `layer` so it can be fetched from activations.
    pub fn with_tap(mut self, name: &str, layer: usize) -> Result<Self> {
        if layer >= self.layers.len() {
            return Err(Error::invalid(format!(
                "tap '{name}' points at layer {layer} of {}",
                self.layers.len()
            )));
        }
        self.taps.retain(|(n, _)| n != name);
        self.taps.push((name.to_string(), layer));
        Ok(self)
    }

    pub fn tap_index(&self, name: &str) -> Option<usize> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, i)| i)
    }

    pub fn tapped<'a>(&self, acts: &'a Activations<T>, name: &str) -> Option<&'a Tensor<T>> {
        self.tap_index(name).map(|i| acts.layer_output(i))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            taps: self.taps.clone(),
        }
    }

    /// Runs every layer, keeping all outputs for [`Network::backward`].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Activations<T>> {
        self.forward_to(input, self.layers.len())
    }

    /// Runs only the first `end` layers.
    pub fn forward_to(&self, input: &Tensor<T>, end: usize) -> Result<Activations<T>> {
        if input.batch() == 0 {
            return Err(Error::invalid("forward on an empty batch"));
        }
        let mut outputs = Vec::with_capacity(end + 1);
        outputs.push(input.clone());
        for (i, layer) in self.layers[..end].iter().enumerate() {
            let y = layer.forward(i, outputs.last().expect("non-empty"))?;
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} ({})", layer.spec.name())));
            }
            outputs.push(y);
        }
        Ok(Activations { outputs })
    }

    /// Backpropagates `grad_out` (w.r.t. the final output) through all layers.
    pub fn backward(&mut self, acts: &Activations<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let end = self.layers.len();
        self.backward_from(acts, end, grad_out)
    }

    /// Backpropagates a gradient w.r.t. the output of layer `end - 1`,
    /// skipping layers `end..`. Parameter gradients accumulate.
    pub fn backward_from(&mut self, acts: &Activations<T>, end: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if end > self.layers.len() || acts.len() < end + 1 || acts.is_empty() {
            return Err(Error::invalid(
                "backward needs the cached activations of a forward pass over the same layers",
            ));
        }
        let mut g = grad.clone();
        for i in (0..end).rev() {
            let x = &acts.outputs[i];
            let y = &acts.outputs[i + 1];
            g = self.layers[i].backward(x, y, &g)?;
        }
        Ok(g)
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    let mut flow = Flow::Any;
    for (i, spec) in specs.iter().enumerate() {
        let bad = |need: &str| {
            Err(Error::invalid(format!(
                "layer {i} ({}) expects {need} input but previous layers produce {flow:?}",
                spec.name()
            )))
        };
        flow = match (*spec, flow) {
            (LayerSpec::Conv2d { out_ch, .. }, Flow::Any) => Flow::Spatial(out_ch),
            (LayerSpec::Conv2d { in_ch, out_ch }, Flow::Spatial(c)) if c == in_ch => Flow::Spatial(out_ch),
            (LayerSpec::Conv2d { in_ch, .. }, _) => return bad(&format!("{in_ch}-channel spatial")),
            (LayerSpec::Dense { out_dim, .. }, Flow::Any) => Flow::Flat(out_dim),
            (LayerSpec::Dense { in_dim, out_dim }, Flow::Flat(d)) if d == in_dim => Flow::Flat(out_dim),
            (LayerSpec::Dense { in_dim, .. }, _) => return bad(&format!("{in_dim}-wide flat")),
            (LayerSpec::GlobalAvgPool, Flow::Spatial(c)) => Flow::Flat(c),
            (LayerSpec::GlobalAvgPool, Flow::Any) => Flow::Any,
            (LayerSpec::GlobalAvgPool, _) => return bad("spatial"),
            (_, f) => f,
        };
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PAALNN1\0";

fn layer_tag(spec: &LayerSpec) -> (u32, [u32; 2]) {
    match *spec {
        LayerSpec::Conv2d { in_ch, out_ch } => (0, [in_ch as u32, out_ch as u32]),
        LayerSpec::Dense { in_dim, out_dim } => (1, [in_dim as u32, out_dim as u32]),
        LayerSpec::Relu => (2, [0, 0]),
        LayerSpec::Sigmoid => (3, [0, 0]),
        LayerSpec::ChannelSoftmax => (4, [0, 0]),
        LayerSpec::GlobalAvgPool => (5, [0, 0]),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

impl Network<f32> {
    /// Writes the checkpoint format: magic, `u32` layer count, per layer a
    /// `u32` tag plus two `u32` extents, then every parameter buffer as raw
    /// little-endian `f32` in layer order (weight before bias).
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let (tag, ext) = layer_tag(&layer.spec);
            w.write_all(&tag.to_le_bytes())?;
            for e in ext {
                w.write_all(&e.to_le_bytes())?;
            }
        }
        for p in self.params() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores layer specs and parameter values. Gradients and optimizer
    /// moments start from zero; taps are not stored.
    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let n = read_u32(r)? as usize;
        let mut specs = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let tag = read_u32(r)?;
            let a = read_u32(r)? as usize;
            let b = read_u32(r)? as usize;
            specs.push(match tag {
                0 => LayerSpec::Conv2d { in_ch: a, out_ch: b },
                1 => LayerSpec::Dense { in_dim: a, out_dim: b },
                2 => LayerSpec::Relu,
                3 => LayerSpec::Sigmoid,
                4 => LayerSpec::ChannelSoftmax,
                5 => LayerSpec::GlobalAvgPool,
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            });
        }
        let mut net = Network::<f32>::new(&specs, 0)?;
        for p in net.params_mut() {
            for v in p.value.data_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Format("truncated checkpoint".into()))?;
                *v = f32::from_le_bytes(b);
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        Network::new(
            &[
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { in_dim: 2, out_dim: 3 },
                LayerSpec::Sigmoid,
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn rejects_inconsistent_chain() {
        let err = Network::<f32>::new(
            &[
                LayerSpec::Conv2d { in_ch: 1, out_ch: 8 },
                LayerSpec::Conv2d { in_ch: 4, out_ch: 2 },
            ],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1 (Conv2d)"), "{err}");
        assert!(Network::<f32>::new(&[LayerSpec::Dense { in_dim: 2, out_dim: 2 }, LayerSpec::GlobalAvgPool], 0).is_err());
    }

    #[test]
    fn tap_must_name_existing_layer() {
        assert!(tiny().with_tap("feat", 5).is_err());
        let net = tiny().with_tap("feat", 1).unwrap();
        let acts = net.forward(&Tensor::filled(&[2, 1, 4, 4], 0.5)).unwrap();
        assert_eq!(net.tapped(&acts, "feat").unwrap().shape(), &[2, 2, 4, 4]);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut net = tiny();
        let acts = Activations { outputs: Vec::new() };
        assert!(net.backward(&acts, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut net = tiny();
        let acts = net.forward(&Tensor::filled(&[2, 1, 4, 4], 0.3)).unwrap();
        net.backward(&acts, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(net.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn dense_sum_loss_grad_is_outer_product() {
        // loss = sum(W x + b) => dW[o][i] = x[i], db[o] = 1
        let mut net = Network::<f64>::new(&[LayerSpec::Dense { in_dim: 2, out_dim: 2 }], 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap();
        let acts = net.forward(&x).unwrap();
        net.backward(&acts, &Tensor::filled(&[1, 2], 1.0)).unwrap();
        let layer = &net.layers()[0];
        assert_eq!(layer.params[0].grad.data(), &[3.0, -2.0, 3.0, -2.0]);
        assert_eq!(layer.params[1].grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_reports_non_finite() {
        let mut net = tiny();
        net.params_mut().next().unwrap().value.data_mut()[0] = f32::NAN;
        let err = net.forward(&Tensor::filled(&[1, 1, 4, 4], 1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"PAALNN1\0");
        assert_eq!(buf.len(), 8 + 4 + 5 * 12 + net.param_count() * 4);
        let back = Network::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.specs(), net.specs());
        for (a, b) in back.params().zip(net.params()) {
            assert_eq!(a.value, b.value);
        }
        buf[0] = b'X';
        assert!(Network::load(&mut buf.as_slice()).unwrap_err().to_string().contains("bad magic"));
    }
}
