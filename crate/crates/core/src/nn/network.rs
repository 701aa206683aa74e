use rand::Rng;

use super::layers::{Layer, LayerSpec, Mode, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Where a node reads one of its inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Input(usize),
    Node(usize),
}

#[derive(Debug, Clone)]
struct Node {
    layer: Layer,
    inputs: Vec<Src>,
    out_item: Vec<usize>,
}

/// Builds a [`Network`] as a DAG. Nodes can only read from network inputs
/// or from nodes added before them, so every graph is acyclic.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    input_items: Vec<Vec<usize>>,
    nodes: Vec<(LayerSpec, Vec<Src>, Vec<usize>)>,
}

impl NetworkBuilder {
    /// `input_items` are per-item shapes, without the batch axis.
    pub fn new(input_items: &[&[usize]]) -> Self {
        NetworkBuilder {
            input_items: input_items.iter().map(|s| s.to_vec()).collect(),
            nodes: Vec::new(),
        }
    }

    pub fn input(&self, index: usize) -> Src {
        Src::Input(index)
    }

    pub fn shape_of(&self, src: Src) -> &[usize] {
        match src {
            Src::Input(i) => &self.input_items[i],
            Src::Node(i) => &self.nodes[i].2,
        }
    }

    pub fn add(&mut self, spec: LayerSpec, inputs: &[Src]) -> Result<Src> {
        spec.validate()?;
        let mut shapes = Vec::with_capacity(inputs.len());
        for &src in inputs {
            match src {
                Src::Input(i) if i >= self.input_items.len() => {
                    return Err(Error::Shape(format!("network has no input {i}")));
                }
                Src::Node(i) if i >= self.nodes.len() => {
                    return Err(Error::Shape(format!("node {i} does not exist yet")));
                }
                _ => {}
            }
            shapes.push(self.shape_of(src).to_vec());
        }
        let out = spec.output_shape(&shapes)?;
        self.nodes.push((spec, inputs.to_vec(), out));
        Ok(Src::Node(self.nodes.len() - 1))
    }

    /// Shorthand for a single-input layer.
    pub fn then(&mut self, spec: LayerSpec, from: Src) -> Result<Src> {
        self.add(spec, &[from])
    }

    pub fn build<R: Rng + ?Sized>(self, output: Src, rng: &mut R) -> Result<Network> {
        if let Src::Node(i) = output {
            if i >= self.nodes.len() {
                return Err(Error::Shape(format!("output node {i} does not exist")));
            }
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (spec, inputs, out_item) in self.nodes {
            nodes.push(Node {
                layer: Layer::new(spec, rng)?,
                inputs,
                out_item,
            });
        }
        Ok(Network {
            input_items: self.input_items,
            nodes,
            output,
            cache: None,
        })
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Tensor>,
    acts: Vec<Tensor>,
}

/// A layer graph with parameters, gradient buffers, and a forward cache.
#[derive(Debug, Clone)]
pub struct Network {
    input_items: Vec<Vec<usize>>,
    nodes: Vec<Node>,
    output: Src,
    cache: Option<ForwardCache>,
}

impl Network {
    pub fn input_items(&self) -> &[Vec<usize>] {
        &self.input_items
    }

    pub fn output_item(&self) -> &[usize] {
        match self.output {
            Src::Input(i) => &self.input_items[i],
            Src::Node(i) => &self.nodes[i].out_item,
        }
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.nodes.iter().map(|n| &n.layer.spec)
    }

    fn check_inputs(&self, inputs: &[&Tensor]) -> Result<usize> {
        if inputs.len() != self.input_items.len() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_items.len(),
                inputs.len()
            )));
        }
        let batch = inputs[0].batch();
        for (i, (t, want)) in inputs.iter().zip(&self.input_items).enumerate() {
            if t.shape().len() != want.len() + 1 || &t.shape()[1..] != want.as_slice() || t.batch() != batch {
                return Err(Error::Shape(format!(
                    "input {i}: got {:?}, expected [batch={batch}, {:?}]",
                    t.shape(),
                    want
                )));
            }
        }
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(batch)
    }

    /// Forward pass that caches activations for [`Network::backward`].
    pub fn forward(&mut self, inputs: &[&Tensor], mode: Mode) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for idx in 0..self.nodes.len() {
            let node = &mut self.nodes[idx];
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input(i) => &owned[i],
                    Src::Node(i) => &acts[i],
                })
                .collect();
            let y = node.layer.forward(&args, &node.out_item, mode)?;
            y.ensure_finite(&format!("node {idx} ({})", self.nodes[idx].layer.spec.kind()))?;
            acts.push(y);
        }
        let out = match self.output {
            Src::Input(i) => owned[i].clone(),
            Src::Node(i) => acts[i].clone(),
        };
        self.cache = Some(ForwardCache { inputs: owned, acts });
        Ok(out)
    }

    /// Eval-mode forward pass on a shared reference; no caching.
    pub fn infer(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input(i) => inputs[i],
                    Src::Node(i) => &acts[i],
                })
                .collect();
            let y = node.layer.infer(&args, &node.out_item)?;
            y.ensure_finite(&format!("node {idx} ({})", node.layer.spec.kind()))?;
            acts.push(y);
        }
        Ok(match self.output {
            Src::Input(i) => inputs[i].clone(),
            Src::Node(i) => acts.swap_remove(i),
        })
    }

    /// Backpropagate `output_grad`; parameter gradients accumulate.
    /// Returns the gradient for every network input.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<Vec<Tensor>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let out_shape = match self.output {
            Src::Input(i) => cache.inputs[i].shape(),
            Src::Node(i) => cache.acts[i].shape(),
        };
        if output_grad.shape() != out_shape {
            return Err(Error::Shape(format!(
                "output grad {:?} vs output {:?}",
                output_grad.shape(),
                out_shape
            )));
        }
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut input_grads: Vec<Tensor> = cache.inputs.iter().map(Tensor::zeros_like).collect();
        match self.output {
            Src::Input(i) => input_grads[i].add_assign(output_grad),
            Src::Node(i) => node_grads[i] = Some(output_grad.clone()),
        }
        let ForwardCache { inputs, acts } = self.cache.take().expect("checked above");
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[idx].take() else {
                continue;
            };
            let srcs = self.nodes[idx].inputs.clone();
            let args: Vec<&Tensor> = srcs
                .iter()
                .map(|s| match *s {
                    Src::Input(i) => &inputs[i],
                    Src::Node(i) => &acts[i],
                })
                .collect();
            let grads = self.nodes[idx].layer.backward(&args, &acts[idx], &grad)?;
            for (src, g) in srcs.iter().zip(grads) {
                match *src {
                    Src::Input(i) => input_grads[i].add_assign(&g),
                    Src::Node(i) => match &mut node_grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    },
                }
            }
        }
        self.cache = Some(ForwardCache { inputs, acts });
        Ok(input_grads)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            for (_, p) in node.layer.params_mut() {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Trainable parameters in a stable order with stable names.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for (name, p) in node.layer.params() {
                out.push((format!("{i}.{}.{name}", node.layer.spec.kind()), p));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let kind = node.layer.spec.kind();
            for (name, p) in node.layer.params_mut() {
                out.push((format!("{i}.{kind}.{name}"), p));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Every persistent tensor: parameters plus batch-norm running statistics.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone(), p.value.clone()))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bn) = &node.layer.bn {
                let c = bn.running_mean.len();
                out.push((format!("{i}.bn.running_mean"), vec![c], bn.running_mean.clone()));
                out.push((format!("{i}.bn.running_var"), vec![c], bn.running_var.clone()));
            }
        }
        out
    }

    /// Load tensors produced by [`Network::state`] on an identically built network.
    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let kind = node.layer.spec.kind();
            for (name, p) in node.layer.params_mut() {
                let key = format!("{i}.{kind}.{name}");
                let (shape, data) = lookup(&key).ok_or_else(|| Error::Input(format!("missing tensor {key}")))?;
                if shape != p.shape {
                    return Err(Error::Shape(format!("{key}: stored {shape:?}, model {:?}", p.shape)));
                }
                p.value = data;
            }
            if let Some(bn) = &mut node.layer.bn {
                for (suffix, target) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                    let key = format!("{i}.bn.{suffix}");
                    let (shape, data) = lookup(&key).ok_or_else(|| Error::Input(format!("missing tensor {key}")))?;
                    if shape != [target.len()] {
                        return Err(Error::Shape(format!("{key}: stored {shape:?}")));
                    }
                    *target = data;
                }
            }
        }
        self.cache = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_unet() -> Network {
        let mut b = NetworkBuilder::new(&[&[2, 8, 8]]);
        let x = b.input(0);
        let d1 = b.then(LayerSpec::conv(2, 4, 4, 2, 1), x).unwrap();
        let a1 = b.then(LayerSpec::lrelu(), d1).unwrap();
        let u1 = b.then(LayerSpec::conv_transpose(4, 3, 4, 2, 1), a1).unwrap();
        let cat = b.add(LayerSpec::Concat, &[u1, x]).unwrap();
        let out = b.then(LayerSpec::conv(5, 1, 3, 1, 1), cat).unwrap();
        b.build(out, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn builder_rejects_mismatched_concat() {
        let mut b = NetworkBuilder::new(&[&[2, 8, 8]]);
        let x = b.input(0);
        let d = b.then(LayerSpec::conv(2, 4, 4, 2, 1), x).unwrap();
        assert!(b.add(LayerSpec::Concat, &[d, x]).is_err());
        assert!(b.add(LayerSpec::lrelu(), &[Src::Node(7)]).is_err());
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut net = small_unet();
        let g = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(net.backward(&g), Err(Error::MissingCache)));
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut net = small_unet();
        let x = Tensor::from_vec(&[2, 2, 8, 8], (0..256).map(|v| (v as f32).sin()).collect()).unwrap();
        net.forward(&[&x], Mode::Train).unwrap();
        net.backward(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        for (_, p) in net.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut net = small_unet();
        let x = Tensor::from_vec(&[1, 2, 8, 8], (0..128).map(|v| (v as f32 * 0.3).cos()).collect()).unwrap();
        net.forward(&[&x], Mode::Train).unwrap();
        let g = Tensor::filled(&[1, 1, 8, 8], 0.5);
        net.backward(&g).unwrap();
        let once: Vec<f32> = net.params()[0].1.grad.clone();
        net.backward(&g).unwrap();
        for (a, b) in net.params()[0].1.grad.iter().zip(&once) {
            assert!((a - 2.0 * b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_matches_infer() {
        let mut net = small_unet();
        let x = Tensor::from_vec(&[1, 2, 8, 8], (0..128).map(|v| (v as f32 * 0.3).cos()).collect()).unwrap();
        let a = net.forward(&[&x], Mode::Eval).unwrap();
        let b = net.forward(&[&x], Mode::Eval).unwrap();
        let c = net.infer(&[&x]).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = small_unet();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(net.infer(&[&x]).is_err());
    }
}
