//! Small classifier zoo: two MLPs and two CNNs, cross-entropy loss, plain
//! SGD training, and a binary checkpoint format.
//!
//! Architectures are deliberately small and pooling-free so attack studies
//! run in seconds on a single core. A trained [`Model`] is immutable and can
//! be shared across threads for inference; training mutates one model on one
//! thread.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{evaluate, evaluate_all, gradient, Bindings, Expr};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    MlpSmall,
    MlpWide,
    CnnSmall,
    CnnDeep,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::MlpSmall, Arch::MlpWide, Arch::CnnSmall, Arch::CnnDeep];

    pub fn id(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp-small",
            Arch::MlpWide => "mlp-wide",
            Arch::CnnSmall => "cnn-small",
            Arch::CnnDeep => "cnn-deep",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

/// Architecture id plus the concrete input geometry and class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `[h, w, c]`
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_shape: &[usize], classes: usize) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "input shape must be [h,w,c], got {input_shape:?}"
            )));
        }
        if classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        Ok(ModelSpec {
            arch,
            input_shape: input_shape.to_vec(),
            classes,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub final_accuracy: f32,
    pub seed: u64,
}

/// Layer template; `Dense { out: 0 }` marks the final logit layer.
#[derive(Clone, Debug)]
enum Layer {
    /// square kernel `[kh,kh,ci,co]` + bias `[co]`, zero padding
    Conv { kh: usize, co: usize, pad: usize },
    /// weight `[in,out]` + bias `[out]`, preceded by a flatten when needed
    Dense { out: usize },
}

fn layers(arch: Arch) -> Vec<Layer> {
    match arch {
        Arch::MlpSmall => vec![Layer::Dense { out: 128 }, Layer::Dense { out: 0 }],
        Arch::MlpWide => vec![Layer::Dense { out: 512 }, Layer::Dense { out: 0 }],
        Arch::CnnSmall => vec![
            Layer::Conv { kh: 5, co: 8, pad: 0 },
            Layer::Dense { out: 0 },
        ],
        Arch::CnnDeep => vec![
            Layer::Conv { kh: 3, co: 6, pad: 0 },
            Layer::Conv { kh: 3, co: 12, pad: 0 },
            Layer::Dense { out: 0 },
        ],
    }
}

/// Resolved parameter list: `(name, shape, fan_in)` in forward order.
fn param_template(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>, usize)>> {
    let (mut h, mut w, mut c) = (
        spec.input_shape[0],
        spec.input_shape[1],
        spec.input_shape[2],
    );
    let mut out = Vec::new();
    for (i, layer) in layers(spec.arch).into_iter().enumerate() {
        match layer {
            Layer::Conv { kh, co, pad } => {
                if h + 2 * pad < kh || w + 2 * pad < kh {
                    return Err(Error::shape(format!(
                        "{}: {kh}x{kh} kernel does not fit {h}x{w} input",
                        spec.arch.id()
                    )));
                }
                let fan_in = kh * kh * c;
                out.push((format!("w{i}"), vec![kh, kh, c, co], fan_in));
                out.push((format!("b{i}"), vec![co], fan_in));
                h = h + 2 * pad + 1 - kh;
                w = w + 2 * pad + 1 - kh;
                c = co;
            }
            Layer::Dense { out: width } => {
                let fan_in = h * w * c;
                let width = if width == 0 { spec.classes } else { width };
                out.push((format!("w{i}"), vec![fan_in, width], fan_in));
                out.push((format!("b{i}"), vec![width], fan_in));
                h = 1;
                w = width;
                c = 1;
            }
        }
    }
    Ok(out)
}

/// A classifier: spec, named parameters in forward order, training metadata.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    params: Vec<(String, Tensor)>,
    pub meta: TrainingMeta,
}

impl Model {
    pub fn id(&self) -> &str {
        self.spec.arch.id()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Logits for an input expression, with parameters baked in as
    /// constants. This is the path attacks and evaluation use: only the
    /// input (or a perturbation feeding it) is differentiable.
    pub fn logits(&self, input: &Expr) -> Result<Expr> {
        let params: Vec<Expr> = self
            .params
            .iter()
            .map(|(_, t)| Expr::constant(t.clone()))
            .collect();
        self.forward(input, &params)
    }

    /// Logits with parameters as named variables, for training. Bind values
    /// with [`Model::bind_params`].
    pub fn logits_with_param_vars(&self, input: &Expr) -> Result<(Expr, Vec<Expr>)> {
        let params: Vec<Expr> = self
            .params
            .iter()
            .map(|(n, t)| Expr::var(n.clone(), t.shape()))
            .collect();
        Ok((self.forward(input, &params)?, params))
    }

    pub fn bind_params(&self, bindings: &mut Bindings) {
        for (name, tensor) in &self.params {
            bindings.insert(name.clone(), tensor.clone());
        }
    }

    fn forward(&self, input: &Expr, params: &[Expr]) -> Result<Expr> {
        self.forward_impl(input, params, &mut None)
    }

    fn forward_impl(
        &self,
        input: &Expr,
        params: &[Expr],
        relu_preacts: &mut Option<Vec<Expr>>,
    ) -> Result<Expr> {
        let batch = input.shape()[0];
        let mut expected = vec![batch];
        expected.extend_from_slice(&self.spec.input_shape);
        if input.shape() != expected {
            return Err(Error::shape(format!(
                "{} expects input {:?}, got {:?}",
                self.id(),
                expected,
                input.shape()
            )));
        }

        let record = |z: &Expr, sink: &mut Option<Vec<Expr>>| {
            if let Some(list) = sink {
                list.push(z.clone());
            }
        };

        let mut x = input.clone();
        let mut p = params.iter();
        let mut flat = false;
        for layer in layers(self.spec.arch) {
            let (weight, bias) = (p.next().unwrap(), p.next().unwrap());
            match layer {
                Layer::Conv { pad, .. } => {
                    let z = x.conv2d(weight, pad)?;
                    let spatial = z.shape()[..3].to_vec();
                    let z = z.add(&bias.broadcast_prefix(&spatial)?)?;
                    record(&z, relu_preacts);
                    x = z.relu();
                }
                Layer::Dense { out } => {
                    if !flat {
                        let features: usize = x.shape()[1..].iter().product();
                        x = x.reshape(&[batch, features])?;
                        flat = true;
                    }
                    let z = x.matmul(weight)?.add(&bias.broadcast_prefix(&[batch])?)?;
                    // hidden layers get relu; the final (logit) layer does not
                    x = if out == 0 {
                        z
                    } else {
                        record(&z, relu_preacts);
                        z.relu()
                    };
                }
            }
        }
        Ok(x)
    }

    /// Smallest |preactivation| feeding any relu on this batch: the margin
    /// to the nearest kink. Useful for choosing points where the loss is
    /// locally smooth (finite-difference oracles need that).
    pub fn min_relu_margin(&self, images: &Tensor) -> Result<f32> {
        let x = Expr::constant(images.clone());
        let params: Vec<Expr> = self
            .params
            .iter()
            .map(|(_, t)| Expr::constant(t.clone()))
            .collect();
        let mut preacts = Some(Vec::new());
        self.forward_impl(&x, &params, &mut preacts)?;
        let mut margin = f32::INFINITY;
        for z in preacts.unwrap() {
            let v = evaluate(&z, &Bindings::new())?;
            margin = v.data().iter().fold(margin, |m, &x| m.min(x.abs()));
        }
        Ok(margin)
    }

    /// Class predictions (argmax of logits; ties resolve to the lowest id).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let x = Expr::constant(images.clone());
        let logits = evaluate(&self.logits(&x)?, &Bindings::new())?;
        let k = self.spec.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Initialize a model with the seeded uniform fan-in scheme: every
/// parameter of a layer is drawn from `U(−1/√fan_in, 1/√fan_in)`.
/// Bit-identical for a fixed `(spec, seed)`.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    let template = param_template(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(template.len());
    for (name, shape, fan_in) in template {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        params.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(Model {
        spec,
        params,
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

/// A scalar loss graph over named variables: the batch image variable, the
/// parameter variables, and bindings holding their current values.
pub struct LossGraph {
    pub loss: Expr,
    pub image_var: Expr,
    pub param_vars: Vec<Expr>,
    pub bindings: Bindings,
}

/// Mean cross-entropy of the model on a labelled batch, differentiable with
/// respect to both the parameters and the image input.
pub fn loss_graph(model: &Model, images: &Tensor, labels: &[usize]) -> Result<LossGraph> {
    if images.shape().len() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "batch of {:?} images with {} labels",
            images.shape(),
            labels.len()
        )));
    }
    let image_var = Expr::var("x", images.shape());
    let (logits, param_vars) = model.logits_with_param_vars(&image_var)?;
    let loss = logits.softmax_cross_entropy(labels)?.mean();
    let mut bindings = Bindings::new().bind("x", images.clone());
    model.bind_params(&mut bindings);
    Ok(LossGraph {
        loss,
        image_var,
        param_vars,
        bindings,
    })
}

/// Fraction of images classified correctly: exact counting, chunked so
/// memory stays flat.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    accuracy_on(model, &dataset.images, &dataset.labels)
}

pub(crate) fn accuracy_on(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = images.shape()[0];
    let img_len: usize = images.shape()[1..].iter().product();
    let chunk = 500;
    let mut correct = 0usize;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&images.shape()[1..]);
        let batch = Tensor::from_parts(
            shape,
            images.data()[start * img_len..end * img_len].to_vec(),
        );
        let preds = model.predict(&batch)?;
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Cap on images used per epoch (0 = full training split).
    pub limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 5,
            batch: 64,
            seed: 0,
            limit: 0,
        }
    }
}

/// Plain SGD over the training split, recording held-out accuracy per epoch.
///
/// Deterministic per seed on a single thread; the final held-out accuracy is
/// stored in the model's metadata. Divergence (non-finite loss) is reported
/// with the epoch that produced it.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    heldout: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let n = if cfg.limit > 0 {
        cfg.limit.min(train_set.len())
    } else {
        train_set.len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(n);

        for batch_idx in order.chunks(cfg.batch) {
            let (images, labels) = train_set.gather(batch_idx);
            let graph = loss_graph(model, &images, &labels)?;
            let grads = gradient(&graph.loss, &graph.param_vars)?;

            let mut requests = vec![graph.loss.clone()];
            requests.extend(grads);
            let mut values = evaluate_all(&requests, &graph.bindings).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;

            let loss_value = values.remove(0).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss became {loss_value}"),
                });
            }
            for ((_, param), grad) in model.params.iter_mut().zip(values) {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= cfg.lr * g;
                }
            }
        }
        history.push(accuracy(model, heldout)?);
    }

    model.meta = TrainingMeta {
        epochs: cfg.epochs as u32,
        final_accuracy: history.last().copied().unwrap_or(0.0) as f32,
        seed: cfg.seed,
    };
    Ok(history)
}

// --- checkpoint format ----------------------------------------------------
//
// magic "MAPF" | version u32 LE | arch id (u32 len + utf8) |
// input shape (u32 rank + u32 extents) | classes u32 |
// meta (epochs u32, final accuracy f32, seed u64) | tensor count u32 |
// per tensor: name (u32 len + utf8) | rank u32 | extents u32 each |
// raw f32 LE data.

const MODEL_MAGIC: [u8; 4] = *b"MAPF";
const FORMAT_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::format(&self.path, "truncated file")),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.bytes.len()
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(&self.path, "non-utf8 string field"))
    }

    pub(crate) fn error(&self, detail: impl Into<String>) -> Error {
        Error::format(&self.path, detail)
    }
}

pub(crate) fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_string(out, name);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name = r.string()?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((name, Tensor::from_parts(shape, data)))
}

pub(crate) fn encode_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(out, name, t);
    }
}

pub(crate) fn decode_tensors(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_tensor(r)?);
    }
    Ok(out)
}

/// Validate magic and version, returning a reader positioned after both.
pub(crate) fn open_reader<'a>(bytes: &'a [u8], path: &Path, magic: &[u8; 4]) -> Result<Reader<'a>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let found = r.take(4)?;
    if found != magic {
        return Err(r.error(format!("bad magic {found:02x?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.error(format!(
            "version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(r)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_string(&mut out, model.spec.arch.id());
    out.extend_from_slice(&(model.spec.input_shape.len() as u32).to_le_bytes());
    for &d in &model.spec.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.spec.classes as u32).to_le_bytes());
    out.extend_from_slice(&model.meta.epochs.to_le_bytes());
    out.extend_from_slice(&model.meta.final_accuracy.to_le_bytes());
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    encode_tensors(&mut out, &model.params);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = open_reader(&bytes, path, &MODEL_MAGIC)?;

    let arch = Arch::parse(&r.string()?)?;
    let rank = r.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let classes = r.u32()? as usize;
    let meta = TrainingMeta {
        epochs: r.u32()?,
        final_accuracy: r.f32()?,
        seed: r.u64()?,
    };
    let params = decode_tensors(&mut r)?;
    if r.pos != r.len() {
        return Err(r.error("trailing bytes after tensor data"));
    }

    let spec = ModelSpec::new(arch, &input_shape, classes)?;
    let expected = param_template(&spec)?;
    if expected.len() != params.len()
        || expected
            .iter()
            .zip(&params)
            .any(|((name, shape, _), (n, t))| name != n || shape.as_slice() != t.shape())
    {
        return Err(Error::format(
            path.display().to_string(),
            "parameter names/shapes do not match the architecture",
        ));
    }
    for (name, t) in &params {
        t.ensure_finite(name)?;
    }
    Ok(Model { spec, params, meta })
}
