//! Perturbation algorithms: single-step and iterated sign attacks, the
//! universal-perturbation baseline, and meta perturbation training.
//!
//! A meta adversarial perturbation (MAP) is an image-agnostic tensor `v`
//! trained so that one gradient-ascent step on a new batch turns it into a
//! strong per-image attack. Training ascends the post-adaptation loss with
//! respect to the initialization:
//!
//! - inner update:  `v' = v + α ∇_v L(f, B + v)` (raw gradient, repeatable),
//! - meta update:   `v  ← Π_ε(v + β ∇_v L(f, B' + v'))`,
//!
//! where the meta-gradient flows through `v'` (a second-order derivative,
//! computed by nesting [`gradient`]) unless first-order mode is enabled,
//! and `Π_ε` clamps every element to `[−ε, ε]`.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{evaluate, evaluate_all, gradient, Bindings, Expr};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{loss_graph, Model};
use crate::tensor::Tensor;

/// The l∞ budget used throughout the experiments: 8/255 in pixel units.
pub const DEFAULT_EPSILON: f32 = 8.0 / 255.0;

/// Step/budget bundle for sign-based attacks.
#[derive(Clone, Copy, Debug)]
pub struct AttackBudget {
    /// Maximum l∞ magnitude in pixel units.
    pub epsilon: f32,
    /// Per-iteration step size (γ); conventionally ε/T for iterated attacks.
    pub step: f32,
    /// Iteration count T.
    pub iterations: usize,
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.step <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon and step must be positive, got ε={} γ={}",
                self.epsilon, self.step
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        Ok(())
    }

    /// The conventional iterated-attack budget: γ = ε/T.
    pub fn iterated(epsilon: f32, iterations: usize) -> Self {
        AttackBudget {
            epsilon,
            step: epsilon / iterations as f32,
            iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Map,
    Uap,
    Zero,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Map => "map",
            Algorithm::Uap => "uap",
            Algorithm::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Algorithm::Map),
            "uap" => Ok(Algorithm::Uap),
            "zero" => Ok(Algorithm::Zero),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Where a perturbation came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub model_id: String,
    /// |D|: number of images the perturbation was trained on.
    pub subset_size: usize,
    pub seed: u64,
}

/// An image-agnostic perturbation with its budget and provenance.
#[derive(Clone, Debug)]
pub struct Perturbation {
    /// Image-shaped tensor `[h, w, c]`.
    pub v: Tensor,
    pub epsilon: f32,
    pub provenance: Provenance,
}

impl Perturbation {
    /// The all-zero perturbation (clean baseline carrier).
    pub fn zero(image_shape: &[usize], epsilon: f32) -> Self {
        Perturbation {
            v: Tensor::zeros(image_shape),
            epsilon,
            provenance: Provenance {
                algorithm: Algorithm::Zero,
                model_id: String::new(),
                subset_size: 0,
                seed: 0,
            },
        }
    }

    /// Exact feasibility check: every element within `[−ε, ε]`.
    pub fn validate(&self) -> Result<()> {
        if self.v.max_abs() <= self.epsilon {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "perturbation exceeds its budget: max |v| = {} > ε = {}",
                self.v.max_abs(),
                self.epsilon
            )))
        }
    }
}

/// Elementwise projection onto the l∞ ball of radius `epsilon`:
/// idempotent, monotone, and the identity on feasible tensors.
pub fn project(v: &Tensor, epsilon: f32) -> Tensor {
    v.map(|x| x.clamp(-epsilon, epsilon))
}

/// Mean model loss of a constant batch shifted by a single image-shaped
/// perturbation expression. Parameters enter as constants, so the only
/// differentiable path is through the perturbation.
fn perturbed_batch_loss(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    v: &Expr,
) -> Result<Expr> {
    let n = images.shape()[0];
    let batch = Expr::constant(images.clone());
    let shifted = batch.add(&v.broadcast_prefix(&[n])?)?;
    Ok(model.logits(&shifted)?.softmax_cross_entropy(labels)?.mean())
}

/// Gradient of the mean batch loss with respect to the input images.
fn batch_input_gradient(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let graph = loss_graph(model, images, labels)?;
    let g = gradient(&graph.loss, &[graph.image_var])?.pop().unwrap();
    evaluate(&g, &graph.bindings)
}

fn add_signed_step(images: &Tensor, grad: &Tensor, step: f32) -> Tensor {
    let data = images
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| x + step * crate::autodiff::kernels::sign(g))
        .collect();
    Tensor::from_parts(images.shape().to_vec(), data)
}

fn clamp_unit(images: &Tensor) -> Tensor {
    images.map(|x| x.clamp(0.0, 1.0))
}

/// One signed ascent step of size `step` on every image, clamped back to
/// the valid pixel range: `x' = clamp₀₁(x + step · sign(∇_x L))`.
///
/// The sign convention makes this a no-op wherever the gradient is zero.
pub fn fgsm_step(model: &Model, images: &Tensor, labels: &[usize], step: f32) -> Result<Tensor> {
    let grad = batch_input_gradient(model, images, labels)?;
    Ok(clamp_unit(&add_signed_step(images, &grad, step)))
}

/// Iterated signed ascent: `T` repetitions of a `γ`-sized step with the
/// accumulated offset projected onto the ε-ball after each step, then one
/// final clamp to `[0,1]`. With `T = 1, γ = ε` this reduces bit-exactly to
/// [`fgsm_step`] followed by projection.
pub fn iterated_attack(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    budget: &AttackBudget,
) -> Result<Tensor> {
    budget.validate()?;
    let mut delta = Tensor::zeros(images.shape());
    for _ in 0..budget.iterations {
        let current = add_tensors(images, &delta);
        let grad = batch_input_gradient(model, &current, labels)?;
        delta = project(&add_signed_step(&delta, &grad, budget.step), budget.epsilon);
    }
    Ok(clamp_unit(&add_tensors(images, &delta)))
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Chain `steps` differentiable inner updates onto `v`:
/// `u ← u + α ∇_u loss(u)`, with the gradient taken at each intermediate
/// perturbation. The result remains a function of `v`, so a meta-objective
/// built on it can be differentiated through the whole chain.
pub fn adapt_expr(
    inner_loss: &dyn Fn(&Expr) -> Result<Expr>,
    v: &Expr,
    alpha: f32,
    steps: usize,
) -> Result<Expr> {
    let mut u = v.clone();
    for _ in 0..steps {
        let loss = inner_loss(&u)?;
        let g = gradient(&loss, &[u.clone()])?.pop().unwrap();
        u = u.add(&g.scale(alpha))?;
    }
    Ok(u)
}

/// Numeric (non-differentiable) version of [`adapt_expr`]: ascend the mean
/// batch loss from `v` for `steps` raw-gradient steps of size `alpha`.
pub fn adapt_perturbation(
    model: &Model,
    v: &Tensor,
    images: &Tensor,
    labels: &[usize],
    alpha: f32,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("adaptation needs at least one step".into()));
    }
    let mut current = v.clone();
    for _ in 0..steps {
        let var = Expr::var("v", current.shape());
        let loss = perturbed_batch_loss(model, images, labels, &var)?;
        let g = gradient(&loss, &[var])?.pop().unwrap();
        let bindings = Bindings::new().bind("v", current.clone());
        let gv = evaluate(&g, &bindings)?;
        current = Tensor::from_parts(
            current.shape().to_vec(),
            current
                .data()
                .iter()
                .zip(gv.data())
                .map(|(&a, &b)| a + alpha * b)
                .collect(),
        );
    }
    Ok(current)
}

/// Value of the meta-objective and its gradient with respect to the
/// initialization `v`, for arbitrary inner/outer loss builders.
///
/// In exact mode the inner chain is built symbolically and the returned
/// gradient includes the curvature term contributed by `∇_v v'`. In
/// first-order mode the adapted perturbation is computed numerically and
/// the outer gradient is evaluated at it with `∇_v v'` treated as the
/// identity. The two agree whenever the inner loss is linear in `v`.
pub fn meta_value_and_gradient(
    inner_loss: &dyn Fn(&Expr) -> Result<Expr>,
    outer_loss: &dyn Fn(&Expr) -> Result<Expr>,
    v: &Tensor,
    alpha: f32,
    inner_steps: usize,
    first_order: bool,
) -> Result<(f32, Tensor)> {
    if first_order {
        // Numeric inner chain.
        let mut adapted = v.clone();
        for _ in 0..inner_steps {
            let var = Expr::var("v", adapted.shape());
            let loss = inner_loss(&var)?;
            let g = gradient(&loss, &[var])?.pop().unwrap();
            let gv = evaluate(&g, &Bindings::new().bind("v", adapted.clone()))?;
            adapted = Tensor::from_parts(
                adapted.shape().to_vec(),
                adapted
                    .data()
                    .iter()
                    .zip(gv.data())
                    .map(|(&a, &b)| a + alpha * b)
                    .collect(),
            );
        }
        let var = Expr::var("v_adapted", adapted.shape());
        let meta = outer_loss(&var)?;
        let g = gradient(&meta, &[var])?.pop().unwrap();
        let bindings = Bindings::new().bind("v_adapted", adapted);
        let values = evaluate_all(&[meta, g], &bindings)?;
        Ok((values[0].scalar_value(), values[1].clone()))
    } else {
        let var = Expr::var("v", v.shape());
        let adapted = adapt_expr(inner_loss, &var, alpha, inner_steps)?;
        let meta = outer_loss(&adapted)?;
        let g = gradient(&meta, &[var])?.pop().unwrap();
        let bindings = Bindings::new().bind("v", v.clone());
        let values = evaluate_all(&[meta, g], &bindings)?;
        Ok((values[0].scalar_value(), values[1].clone()))
    }
}

/// Meta-training configuration.
#[derive(Clone, Copy, Debug)]
pub struct MapConfig {
    /// Inner (adaptation) step size α.
    pub alpha: f32,
    /// Meta step size β.
    pub beta: f32,
    /// Inner gradient-ascent steps per meta update.
    pub inner_steps: usize,
    /// Passes over the training subset; each minibatch yields one meta update.
    pub meta_iterations: usize,
    /// |B|: adaptation minibatch size.
    pub batch: usize,
    /// |B'|: meta minibatch size
    pub meta_batch: usize,
    /// Drop the curvature term of the meta-gradient.
    pub first_order: bool,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            alpha: DEFAULT_EPSILON,
            beta: 0.01,
            inner_steps: 1,
            meta_iterations: 50,
            batch: 10,
            meta_batch: 10,
            first_order: false,
            seed: 0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        if self.inner_steps == 0 || self.batch == 0 || self.meta_batch == 0 {
            return Err(Error::Config(
                "inner_steps and batch sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Train a meta perturbation on the subset `d`.
///
/// Starts from a seeded uniform initialization in `[−ε, ε]`, then for every
/// minibatch `B` of each pass: adapt (`inner_steps` raw-gradient steps of
/// size α), sample an independent minibatch `B'` (overlap with `B`
/// permitted), ascend the post-adaptation loss with step β, and project
/// back onto the ε-ball. Bit-identical for a fixed seed.
pub fn map_train(
    model: &Model,
    d: &Dataset,
    cfg: &MapConfig,
    epsilon: f32,
) -> Result<Perturbation> {
    cfg.validate()?;
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive: {epsilon}")));
    }
    if d.is_empty() {
        return Err(Error::Dataset("perturbation training set is empty".into()));
    }

    let image_shape = d.image_shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Vec<f32> = (0..image_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-epsilon..epsilon))
        .collect();
    let mut v = project(&Tensor::from_parts(image_shape.clone(), init), epsilon);

    for _ in 0..cfg.meta_iterations {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rng);

        for batch_indices in order.chunks(cfg.batch) {
            let (bx, by) = d.gather(batch_indices);
            let meta_indices: Vec<usize> =
                (0..cfg.meta_batch).map(|_| rng.gen_range(0..d.len())).collect();
            let (mx, my) = d.gather(&meta_indices);

            let inner = |u: &Expr| perturbed_batch_loss(model, &bx, &by, u);
            let outer = |u: &Expr| perturbed_batch_loss(model, &mx, &my, u);
            let (_, meta_grad) = meta_value_and_gradient(
                &inner,
                &outer,
                &v,
                cfg.alpha,
                cfg.inner_steps,
                cfg.first_order,
            )?;

            let ascended = Tensor::from_parts(
                image_shape.clone(),
                v.data()
                    .iter()
                    .zip(meta_grad.data())
                    .map(|(&a, &g)| a + cfg.beta * g)
                    .collect(),
            );
            v = project(&ascended, epsilon);
        }
    }

    let perturbation = Perturbation {
        v,
        epsilon,
        provenance: Provenance {
            algorithm: Algorithm::Map,
            model_id: model.id().to_string(),
            subset_size: d.len(),
            seed: cfg.seed,
        },
    };
    perturbation.validate()?;
    Ok(perturbation)
}

/// Minibatch size used when iterating the subset for the UAP baseline,
/// matching the meta-training default.
const UAP_BATCH: usize = 10;

/// Universal-perturbation baseline: signed-gradient ascent of the mean loss
/// over `d`, projected onto the ε-ball after every minibatch update. The
/// result is applied by pure addition at evaluation time — no per-image
/// adaptation. `epochs = 0` returns the zero perturbation.
pub fn uap_train(
    model: &Model,
    d: &Dataset,
    budget: &AttackBudget,
    epochs: usize,
    seed: u64,
) -> Result<Perturbation> {
    budget.validate()?;
    if d.is_empty() {
        return Err(Error::Dataset("perturbation training set is empty".into()));
    }

    let image_shape = d.image_shape().to_vec();
    let mut v = Tensor::zeros(&image_shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rng);
        for batch_indices in order.chunks(UAP_BATCH) {
            let (bx, by) = d.gather(batch_indices);
            let var = Expr::var("v", &image_shape);
            let loss = perturbed_batch_loss(model, &bx, &by, &var)?;
            let g = gradient(&loss, &[var])?.pop().unwrap();
            let gv = evaluate(&g, &Bindings::new().bind("v", v.clone()))?;
            v = project(&add_signed_step(&v, &gv, budget.step), budget.epsilon);
        }
    }

    let perturbation = Perturbation {
        v,
        epsilon: budget.epsilon,
        provenance: Provenance {
            algorithm: Algorithm::Uap,
            model_id: model.id().to_string(),
            subset_size: d.len(),
            seed,
        },
    };
    perturbation.validate()?;
    Ok(perturbation)
}

/// Evaluation-time attack with a perturbation as initialization: one signed
/// ascent step of size α taken at `x + v`, with the per-image offset
/// projected onto the ε-ball and the result clamped to valid pixels:
///
/// `δ = Π_ε(v + α sign(∇_x L(f, x + v, y)))`, `x' = clamp₀₁(x + δ)`.
///
/// With `v = 0` this is exactly a (projected) single-step sign attack.
pub fn attack_with_init(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    init: &Perturbation,
    alpha: f32,
    epsilon: f32,
) -> Result<Tensor> {
    if init.v.max_abs() > epsilon {
        return Err(Error::Config(format!(
            "initialization exceeds the ε-ball: {} > {}",
            init.v.max_abs(),
            epsilon
        )));
    }
    let n = images.shape()[0];
    let img_len: usize = images.shape()[1..].iter().product();
    if init.v.shape() != &images.shape()[1..] {
        return Err(Error::shape(format!(
            "perturbation {:?} does not match images {:?}",
            init.v.shape(),
            images.shape()
        )));
    }

    // Gradient at the shifted batch x + v.
    let mut shifted = Vec::with_capacity(images.numel());
    for i in 0..n {
        let row = &images.data()[i * img_len..(i + 1) * img_len];
        shifted.extend(row.iter().zip(init.v.data()).map(|(&x, &p)| x + p));
    }
    let shifted = Tensor::from_parts(images.shape().to_vec(), shifted);
    let grad = batch_input_gradient(model, &shifted, labels)?;

    let mut out = Vec::with_capacity(images.numel());
    for i in 0..n {
        let x_row = &images.data()[i * img_len..(i + 1) * img_len];
        let g_row = &grad.data()[i * img_len..(i + 1) * img_len];
        for j in 0..img_len {
            let delta = (init.v.data()[j] + alpha * crate::autodiff::kernels::sign(g_row[j]))
                .clamp(-epsilon, epsilon);
            out.push((x_row[j] + delta).clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::from_parts(images.shape().to_vec(), out))
}

// --- perturbation files -----------------------------------------------------
//
// magic "MAPP" | version u32 LE | epsilon f32 | algorithm string |
// source model id string | subset size u32 | seed u64 |
// tensor container (same encoding as model checkpoints) holding "v".

const PERTURBATION_MAGIC: [u8; 4] = *b"MAPP";

pub fn save_perturbation(p: &Perturbation, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&PERTURBATION_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&p.epsilon.to_le_bytes());
    crate::models::push_string(&mut out, p.provenance.algorithm.as_str());
    crate::models::push_string(&mut out, &p.provenance.model_id);
    out.extend_from_slice(&(p.provenance.subset_size as u32).to_le_bytes());
    out.extend_from_slice(&p.provenance.seed.to_le_bytes());
    crate::models::encode_tensors(&mut out, &[("v".to_string(), p.v.clone())]);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_perturbation(path: &Path) -> Result<Perturbation> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = crate::models::open_reader(&bytes, path, &PERTURBATION_MAGIC)?;

    let epsilon = r.f32()?;
    let algorithm = Algorithm::parse(&r.string()?)
        .map_err(|_| r.error("unknown algorithm tag"))?;
    let model_id = r.string()?;
    let subset_size = r.u32()? as usize;
    let seed = r.u64()?;
    let mut tensors = crate::models::decode_tensors(&mut r)?;
    if r.pos != r.len() {
        return Err(r.error("trailing bytes after tensor data"));
    }
    if tensors.len() != 1 || tensors[0].0 != "v" {
        return Err(r.error("expected exactly one tensor named `v`"));
    }
    let v = tensors.pop().unwrap().1;
    v.ensure_finite("perturbation v")?;

    let p = Perturbation {
        v,
        epsilon,
        provenance: Provenance {
            algorithm,
            model_id,
            subset_size,
            seed,
        },
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::models::{build_model, Arch, ModelSpec};

    const EPS: f32 = DEFAULT_EPSILON;

    #[test]
    fn project_clamps_and_is_idempotent() {
        let v = Tensor::from_parts(vec![2], vec![0.1, -0.5]);
        let p = project(&v, EPS);
        assert_eq!(p.data(), &[EPS, -EPS]);

        let feasible = Tensor::from_parts(vec![3], vec![0.01, -0.02, 0.0]);
        assert_eq!(project(&feasible, EPS).data(), feasible.data());

        let pp = project(&p, EPS);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&pp));
    }

    fn tiny_model() -> Model {
        let spec = ModelSpec::new(Arch::MlpSmall, &[2, 2, 1], 3).unwrap();
        build_model(spec, 42).unwrap()
    }

    fn tiny_batch() -> (Tensor, Vec<usize>) {
        let images = Tensor::from_parts(
            vec![3, 2, 2, 1],
            vec![0.2, 0.8, 0.4, 0.6, 0.1, 0.3, 0.9, 0.5, 0.7, 0.2, 0.6, 0.4],
        );
        (images, vec![0, 1, 2])
    }

    #[test]
    fn fgsm_is_a_no_op_on_zero_gradient() {
        // A model with a zeroed final layer produces constant logits, so the
        // input gradient vanishes and sign(0) = 0 leaves pixels unchanged.
        let spec = ModelSpec::new(Arch::MlpSmall, &[2, 2, 1], 3).unwrap();
        let mut model = build_model(spec, 1).unwrap();
        for (name, t) in model.params_mut() {
            if name == "w1" || name == "b1" {
                t.data_mut().fill(0.0);
            }
        }

        let (images, labels) = tiny_batch();
        let attacked = fgsm_step(&model, &images, &labels, EPS).unwrap();
        assert_eq!(attacked.data(), images.data());
    }

    #[test]
    fn logistic_direction_matches_hand_derivation() {
        // Two-class linear logits on one pixel: z = [w x, 0].
        // Loss for label 0 is softplus(−w x); d/dx = −w σ(−w x), so the
        // ascent direction is −sign(w) for label 0 and +sign(w) for label 1.
        let x = Expr::var("x", &[1, 1]);
        let w = 1.7f32;
        let weights = Expr::constant(Tensor::from_parts(vec![1, 2], vec![w, 0.0]));
        let logits = x.matmul(&weights).unwrap();
        for (label, expected_sign) in [(0usize, -1.0f32), (1usize, 1.0f32)] {
            let loss = logits.softmax_cross_entropy(&[label]).unwrap().mean();
            let g = gradient(&loss, &[x.clone()]).unwrap().pop().unwrap();
            let gv = evaluate(&g, &Bindings::new().bind("x", Tensor::from_parts(vec![1, 1], vec![0.4])))
                .unwrap();
            assert_eq!(crate::autodiff::kernels::sign(gv.data()[0]), expected_sign);
        }
    }

    #[test]
    fn iterated_t1_equals_fgsm_plus_projection_bit_exact() {
        let model = tiny_model();
        let (images, labels) = tiny_batch();
        let budget = AttackBudget {
            epsilon: EPS,
            step: EPS,
            iterations: 1,
        };
        let a = iterated_attack(&model, &images, &labels, &budget).unwrap();
        let f = fgsm_step(&model, &images, &labels, EPS).unwrap();
        // fgsm offsets are already within the ε-ball, so projection is the
        // identity on them.
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&f));
    }

    #[test]
    fn iterated_attack_respects_the_ball() {
        let model = tiny_model();
        let (images, labels) = tiny_batch();
        let budget = AttackBudget::iterated(EPS, 5);
        let attacked = iterated_attack(&model, &images, &labels, &budget).unwrap();
        for (a, x) in attacked.data().iter().zip(images.data()) {
            assert!((a - x).abs() <= EPS + 1e-7);
        }
    }

    #[test]
    fn zero_alpha_adaptation_is_identity() {
        let model = tiny_model();
        let (images, labels) = tiny_batch();
        let v = Tensor::from_parts(vec![2, 2, 1], vec![0.01, -0.02, 0.0, 0.005]);
        let adapted = adapt_perturbation(&model, &v, &images, &labels, 0.0, 1).unwrap();
        assert_eq!(adapted.data(), v.data());
    }

    #[test]
    fn quadratic_surrogate_adapts_to_the_hand_derived_point() {
        // loss(v) = −Σ (v − c)²  ⇒  one ascent step: v − 2α(v − c).
        let c = Tensor::from_parts(vec![4], vec![0.3, -0.1, 0.2, 0.0]);
        let inner = |u: &Expr| -> Result<Expr> {
            let c = Expr::constant(c.clone());
            let d = u.sub(&c)?;
            Ok(d.mul(&d)?.sum().scale(-1.0))
        };
        let v0 = Tensor::from_parts(vec![4], vec![0.5, 0.5, -0.5, 0.25]);
        let alpha = 0.05f32;
        let var = Expr::var("v", &[4]);
        let adapted = adapt_expr(&inner, &var, alpha, 1).unwrap();
        let got = evaluate(&adapted, &Bindings::new().bind("v", v0.clone())).unwrap();
        for ((&v, &cv), &g) in v0.data().iter().zip(c.data()).zip(got.data()) {
            let expected = v - 2.0 * alpha * (v - cv);
            assert!((g - expected).abs() < 1e-6, "got {g}, expected {expected}");
        }
    }

    #[test]
    fn small_ascent_step_does_not_decrease_the_loss() {
        // Smooth surrogate (linear logits + cross-entropy), α = 1e-3.
        let (images, labels) = tiny_batch();
        let model = tiny_model();
        let v0 = Tensor::zeros(&[2, 2, 1]);
        let loss_at = |v: &Tensor| -> f32 {
            let var = Expr::var("v", v.shape());
            let loss = perturbed_batch_loss(&model, &images, &labels, &var).unwrap();
            evaluate(&loss, &Bindings::new().bind("v", v.clone()))
                .unwrap()
                .scalar_value()
        };
        let adapted = adapt_perturbation(&model, &v0, &images, &labels, 1e-3, 1).unwrap();
        assert!(loss_at(&adapted) >= loss_at(&v0) - 1e-6);
    }

    #[test]
    fn first_and_second_order_agree_for_linear_inner_loss() {
        // inner(v) = <w, v>: the inner Hessian vanishes, so both modes give
        // the same meta-gradient.
        let w = Tensor::from_parts(vec![3], vec![0.5, -1.0, 2.0]);
        let inner = |u: &Expr| -> Result<Expr> {
            Ok(u.mul(&Expr::constant(w.clone()))?.sum())
        };
        // outer(v) = sum((v − t)²), a curved objective.
        let t = Tensor::from_parts(vec![3], vec![0.1, 0.2, 0.3]);
        let outer = |u: &Expr| -> Result<Expr> {
            let d = u.sub(&Expr::constant(t.clone()))?;
            Ok(d.mul(&d)?.sum())
        };
        let v = Tensor::from_parts(vec![3], vec![0.05, -0.1, 0.2]);
        let (val_exact, g_exact) =
            meta_value_and_gradient(&inner, &outer, &v, 0.01, 1, false).unwrap();
        let (val_fo, g_fo) = meta_value_and_gradient(&inner, &outer, &v, 0.01, 1, true).unwrap();
        assert!((val_exact - val_fo).abs() < 1e-6);
        for (a, b) in g_exact.data().iter().zip(g_fo.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn modes_differ_when_the_inner_loss_is_curved() {
        let inner = |u: &Expr| -> Result<Expr> { Ok(u.mul(u)?.sum()) };
        let outer = |u: &Expr| -> Result<Expr> {
            let c = Expr::constant(Tensor::from_parts(vec![2], vec![1.0, -2.0]));
            Ok(u.mul(&c)?.sum())
        };
        let v = Tensor::from_parts(vec![2], vec![0.3, 0.4]);
        // v' = v + α·2v = (1+2α)v; outer = <c, v'>;
        // exact meta-grad = (1+2α)c, first-order = c.
        let alpha = 0.25f32;
        let (_, g_exact) = meta_value_and_gradient(&inner, &outer, &v, alpha, 1, false).unwrap();
        let (_, g_fo) = meta_value_and_gradient(&inner, &outer, &v, alpha, 1, true).unwrap();
        assert!((g_exact.data()[0] - 1.5).abs() < 1e-6);
        assert!((g_fo.data()[0] - 1.0).abs() < 1e-6);
        assert!((g_exact.data()[1] + 3.0).abs() < 1e-6);
        assert!((g_fo.data()[1] + 2.0).abs() < 1e-6);
    }

    fn tiny_subset() -> Dataset {
        let mut data = Vec::new();
        for i in 0..12 {
            data.extend([0.1 * (i as f32 % 7.0), 0.5, 0.3, 0.8]);
        }
        Dataset {
            images: Tensor::from_parts(vec![12, 2, 2, 1], data),
            labels: (0..12).map(|i| i % 3).collect(),
            split: Split::Train,
            source: "mem".into(),
            num_classes: 3,
        }
    }

    #[test]
    fn zero_meta_iterations_returns_the_projected_initialization() {
        let model = tiny_model();
        let d = tiny_subset();
        let cfg = MapConfig {
            meta_iterations: 0,
            seed: 5,
            ..MapConfig::default()
        };
        let p = map_train(&model, &d, &cfg, EPS).unwrap();
        // Reconstruct the same seeded initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expected: Vec<f32> = (0..4).map(|_| rng.gen_range(-EPS..EPS)).collect();
        assert_eq!(p.v.data(), expected.as_slice());
        assert_eq!(p.provenance.algorithm, Algorithm::Map);
    }

    #[test]
    fn map_training_is_deterministic_and_feasible() {
        let model = tiny_model();
        let d = tiny_subset();
        let cfg = MapConfig {
            meta_iterations: 3,
            batch: 4,
            meta_batch: 4,
            seed: 9,
            ..MapConfig::default()
        };
        let a = map_train(&model, &d, &cfg, EPS).unwrap();
        let b = map_train(&model, &d, &cfg, EPS).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.v), bits(&b.v));
        assert!(a.v.max_abs() <= EPS);
        a.validate().unwrap();
    }

    #[test]
    fn uap_with_zero_epochs_is_the_zero_perturbation() {
        let model = tiny_model();
        let d = tiny_subset();
        let budget = AttackBudget {
            epsilon: EPS,
            step: EPS / 4.0,
            iterations: 1,
        };
        let p = uap_train(&model, &d, &budget, 0, 3).unwrap();
        assert!(p.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uap_stays_feasible_through_training() {
        let model = tiny_model();
        let d = tiny_subset();
        let budget = AttackBudget {
            epsilon: EPS,
            step: EPS / 2.0,
            iterations: 1,
        };
        let p = uap_train(&model, &d, &budget, 5, 3).unwrap();
        assert!(p.v.max_abs() <= EPS);
        p.validate().unwrap();
    }

    #[test]
    fn attack_with_zero_init_reduces_to_projected_fgsm() {
        let model = tiny_model();
        let (images, labels) = tiny_batch();
        let zero = Perturbation::zero(&[2, 2, 1], EPS);
        let a = attack_with_init(&model, &images, &labels, &zero, EPS, EPS).unwrap();
        let f = fgsm_step(&model, &images, &labels, EPS).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&f));
    }

    #[test]
    fn attack_with_init_respects_the_ball() {
        let model = tiny_model();
        let (images, labels) = tiny_batch();
        let d = tiny_subset();
        let cfg = MapConfig {
            meta_iterations: 2,
            batch: 4,
            meta_batch: 4,
            seed: 1,
            ..MapConfig::default()
        };
        let p = map_train(&model, &d, &cfg, EPS).unwrap();
        let attacked = attack_with_init(&model, &images, &labels, &p, EPS, EPS).unwrap();
        for (a, x) in attacked.data().iter().zip(images.data()) {
            assert!((a - x).abs() <= EPS + 1e-7);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn perturbation_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mapp");
        let p = Perturbation {
            v: Tensor::from_parts(vec![2, 2, 1], vec![0.01, -0.02, 0.03, 0.0]),
            epsilon: EPS,
            provenance: Provenance {
                algorithm: Algorithm::Map,
                model_id: "cnn-small".into(),
                subset_size: 100,
                seed: 77,
            },
        };
        save_perturbation(&p, &path).unwrap();
        let loaded = load_perturbation(&path).unwrap();
        assert_eq!(loaded.provenance, p.provenance);
        assert_eq!(loaded.epsilon, p.epsilon);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.v), bits(&p.v));

        // Model files and perturbation files are distinguishable by magic.
        assert!(crate::models::load_model(&path).is_err());
    }
}
