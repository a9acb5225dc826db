use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::layer::{Cache, Layer, LayerKind, Skip};
use crate::tensor::Matrix;

/// An ordered list of layers with the forward caches of the last pass.
///
/// Residual connections are expressed as [`LayerKind::ResidualAdd`] layers
/// that refer back to the input of an earlier layer (or to an external
/// matrix). A stack may also export the input of one of its layers as a
/// second output; the edge half of a split model uses this to ship the
/// residual operand of the split block.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<Layer>,
    export_at: Option<usize>,
    caches: Vec<Option<Cache>>,
    saved_inputs: BTreeMap<usize, Matrix>,
    epoch: u64,
    cached_epoch: Option<u64>,
}

/// Gradients returned by [`LayerStack::backward_with`].
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub input: Matrix,
    /// Gradient of the external residual operand, if the stack consumed one.
    pub external: Option<Matrix>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let stack = Self {
            caches: vec![None; layers.len()],
            layers,
            export_at: None,
            saved_inputs: BTreeMap::new(),
            epoch: 0,
            cached_epoch: None,
        };
        stack.validate()?;
        Ok(stack)
    }

    fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerKind::ResidualAdd { skip: Skip::Layer(j) } = layer.kind {
                if j >= i {
                    return Err(Error::Config(format!(
                        "{} (index {i}) refers forward to layer {j}",
                        layer.name
                    )));
                }
            }
        }
        if let Some(e) = self.export_at {
            if e >= self.layers.len() {
                return Err(Error::Config(format!("export index {e} out of range")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn export_at(&self) -> Option<usize> {
        self.export_at
    }

    pub fn set_export(&mut self, index: Option<usize>) -> Result<()> {
        self.export_at = index;
        self.validate()
    }

    /// Whether any residual layer reads an external operand.
    pub fn needs_external(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.kind == LayerKind::ResidualAdd { skip: Skip::External })
    }

    /// Replaces `range` with `new_layers`, re-pointing residual references.
    /// Fails if a surviving residual refers into the removed range.
    pub fn splice(&mut self, range: std::ops::Range<usize>, new_layers: Vec<Layer>) -> Result<()> {
        let removed = range.len();
        let added = new_layers.len();
        let remap = |j: usize| -> Option<usize> {
            if j < range.start {
                Some(j)
            } else if j >= range.end {
                Some(j + added - removed)
            } else {
                None
            }
        };
        let n = self.layers.len();
        let mut layers = Vec::with_capacity(n + added - removed);
        for (i, mut layer) in std::mem::take(&mut self.layers).into_iter().enumerate() {
            if i == range.start {
                layers.extend(new_layers.iter().cloned());
            }
            if range.contains(&i) {
                continue;
            }
            if let LayerKind::ResidualAdd { skip: Skip::Layer(j) } = layer.kind {
                let k = remap(j).ok_or_else(|| {
                    Error::Config(format!("{} would lose its residual source", layer.name))
                })?;
                layer.kind = LayerKind::ResidualAdd { skip: Skip::Layer(k) };
            }
            layers.push(layer);
        }
        if range.start >= n {
            layers.extend(new_layers);
        }
        self.layers = layers;
        self.export_at = self.export_at.and_then(remap);
        self.reset_caches();
        self.validate()
    }

    /// Consumes the stack and splits it into `[0, at)` and `[at, len)`.
    /// Residual references crossing the cut become [`Skip::External`] in the
    /// upper half, and the lower half exports the corresponding input.
    pub fn split_at(self, at: usize) -> Result<(LayerStack, LayerStack)> {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut crossing = None;
        for (i, mut layer) in self.layers.into_iter().enumerate() {
            if i < at {
                lower.push(layer);
                continue;
            }
            if let LayerKind::ResidualAdd { skip: Skip::Layer(j) } = layer.kind {
                if j < at {
                    if crossing.is_some_and(|c| c != j) {
                        return Err(Error::Plan(
                            "more than one residual crosses the split".into(),
                        ));
                    }
                    crossing = Some(j);
                    layer.kind = LayerKind::ResidualAdd { skip: Skip::External };
                } else {
                    layer.kind = LayerKind::ResidualAdd { skip: Skip::Layer(j - at) };
                }
            }
            upper.push(layer);
        }
        let mut lower = LayerStack::new(lower)?;
        lower.set_export(crossing)?;
        Ok((lower, LayerStack::new(upper)?))
    }

    /// Joins two stacks produced by [`split_at`](Self::split_at).
    pub fn concat(lower: LayerStack, upper: LayerStack) -> Result<LayerStack> {
        let at = lower.len();
        let export = lower.export_at;
        let mut layers = lower.layers;
        for mut layer in upper.layers {
            match layer.kind {
                LayerKind::ResidualAdd { skip: Skip::External } => {
                    let j = export.ok_or_else(|| {
                        Error::Plan("upper half needs an operand the lower half does not export".into())
                    })?;
                    layer.kind = LayerKind::ResidualAdd { skip: Skip::Layer(j) };
                }
                LayerKind::ResidualAdd { skip: Skip::Layer(j) } => {
                    layer.kind = LayerKind::ResidualAdd { skip: Skip::Layer(j + at) };
                }
                _ => {}
            }
            layers.push(layer);
        }
        LayerStack::new(layers)
    }

    fn reset_caches(&mut self) {
        self.caches = vec![None; self.layers.len()];
        self.saved_inputs.clear();
        self.cached_epoch = None;
    }

    fn skip_sources(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ResidualAdd { skip: Skip::Layer(j) } => Some(j),
                _ => None,
            })
            .collect();
        v.extend(self.export_at);
        v
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward_with(x, None)
    }

    /// Runs every layer in order, caching what backward needs.
    pub fn forward_with(&mut self, x: &Matrix, external: Option<&Matrix>) -> Result<Matrix> {
        if self.needs_external() && external.is_none() {
            return Err(Error::Shape("stack needs an external residual operand".into()));
        }
        self.reset_caches();
        self.epoch += 1;
        let sources = self.skip_sources();
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            if sources.contains(&i) {
                self.saved_inputs.insert(i, h.clone());
            }
            let skip = match self.layers[i].kind {
                LayerKind::ResidualAdd { skip: Skip::Layer(j) } => self.saved_inputs.get(&j),
                LayerKind::ResidualAdd { skip: Skip::External } => external,
                _ => None,
            };
            let (out, cache) = self.layers[i].forward(&h, skip)?;
            self.caches[i] = Some(cache);
            h = out;
        }
        self.cached_epoch = Some(self.epoch);
        Ok(h)
    }

    /// The input of the export layer captured by the last forward.
    pub fn exported(&self) -> Option<&Matrix> {
        self.export_at.and_then(|i| self.saved_inputs.get(&i))
    }

    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        Ok(self.backward_with(d_out, None)?.input)
    }

    /// Back-propagates `d_out` through every layer, writing parameter
    /// gradients. `d_export` is the gradient arriving at the exported
    /// input from outside the stack.
    pub fn backward_with(&mut self, d_out: &Matrix, d_export: Option<&Matrix>) -> Result<InputGrads> {
        if self.cached_epoch != Some(self.epoch) {
            return Err(Error::BackwardBeforeForward(format!(
                "stack epoch {}, cached {:?}",
                self.epoch, self.cached_epoch
            )));
        }
        self.cached_epoch = None;
        let mut pending: BTreeMap<usize, Matrix> = BTreeMap::new();
        if let Some(g) = d_export {
            let at = self
                .export_at
                .ok_or_else(|| Error::Shape("gradient for an export this stack lacks".into()))?;
            pending.insert(at, g.clone());
        }
        let mut external = None;
        let mut grad = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let cache = self.caches[i]
                .take()
                .ok_or_else(|| Error::BackwardBeforeForward(self.layers[i].name.clone()))?;
            match self.layers[i].kind {
                LayerKind::ResidualAdd { skip: Skip::Layer(j) } => {
                    accumulate(&mut pending, j, &grad)?;
                }
                LayerKind::ResidualAdd { skip: Skip::External } => {
                    external = Some(grad.clone());
                }
                _ => {}
            }
            grad = self.layers[i].backward(cache, &grad)?;
            if let Some(extra) = pending.remove(&i) {
                grad.add_assign(&extra)?;
            }
        }
        self.saved_inputs.clear();
        Ok(InputGrads {
            input: grad,
            external,
        })
    }

    /// Clears gradients and the "populated" marks.
    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            for p in &mut layer.params {
                p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
            }
            layer.has_grads = false;
        }
    }

    /// `(qualified name, value)` for every parameter, in stack order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |p| (format!("{}.{}", l.name, p.name), &p.value)))
            .collect()
    }

    /// Overwrites parameters from `(qualified name, value)` entries. Every
    /// parameter must be supplied exactly once with a matching shape.
    pub fn load_params(&mut self, entries: Vec<(String, Matrix)>) -> Result<()> {
        let mut by_name: BTreeMap<String, Matrix> = BTreeMap::new();
        for (name, m) in entries {
            if by_name.insert(name.clone(), m).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        for layer in &mut self.layers {
            for p in &mut layer.params {
                let key = format!("{}.{}", layer.name, p.name);
                let m = by_name
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
                if m.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: stored {}x{}, model expects {}x{}",
                        m.rows(),
                        m.cols(),
                        p.value.rows(),
                        p.value.cols()
                    )));
                }
                p.value = m;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("entry {extra} matches no parameter")));
        }
        self.reset_caches();
        Ok(())
    }
}

fn accumulate(pending: &mut BTreeMap<usize, Matrix>, at: usize, g: &Matrix) -> Result<()> {
    match pending.get_mut(&at) {
        Some(acc) => acc.add_assign(g),
        None => {
            pending.insert(at, g.clone());
            Ok(())
        }
    }
}
