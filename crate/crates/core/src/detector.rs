//! A small dense detector: one MLP shared across anchors maps the `P×P` RGB
//! patch centered on each anchor to `K` class logits and 4 ltrb offsets.
//! Gradients are derived by hand, and SGD with momentum and weight decay
//! updates the parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AnchorGrid;
use crate::numerics::Grid2;
use crate::synthdata::RgbImage;

/// Initial bias of every classification output; σ(-2) ≈ 0.12.
pub const CLS_BIAS_INIT: f64 = -2.0;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub patch: usize,
    pub stride: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.num_classes == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "patch={} stride={} hidden={:?} K={}",
            self.patch, self.stride, self.hidden, self.num_classes
        )
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.gen_range(-limit..=limit)),
            bias: Array1::zeros(outputs),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// Detector weights. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: Architecture,
    pub trunk: Vec<Dense>,
    pub cls_head: Dense,
    pub loc_head: Dense,
}

pub type Gradients = DetectorParams;

impl DetectorParams {
    /// Glorot-uniform weights, zero biases, classification bias at [`CLS_BIAS_INIT`].
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = arch.input_dim();
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        for &w in &arch.hidden {
            trunk.push(Dense::glorot(fan_in, w, &mut rng));
            fan_in = w;
        }
        let mut cls_head = Dense::glorot(fan_in, arch.num_classes, &mut rng);
        cls_head.bias.fill(CLS_BIAS_INIT);
        let loc_head = Dense::glorot(fan_in, 4, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            trunk,
            cls_head,
            loc_head,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut fan_in = arch.input_dim();
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        for &w in &arch.hidden {
            trunk.push(Dense::zeros(fan_in, w));
            fan_in = w;
        }
        Ok(Self {
            arch: arch.clone(),
            trunk,
            cls_head: Dense::zeros(fan_in, arch.num_classes),
            loc_head: Dense::zeros(fan_in, 4),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("architecture already validated")
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("trunk.{i}"), d))
            .chain([("cls_head".to_string(), &self.cls_head), ("loc_head".to_string(), &self.loc_head)])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain([&mut self.cls_head, &mut self.loc_head])
    }

    /// Every parameter tensor as `(name, flat row-major values)`.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, d) in self.layers() {
            out.push((format!("{name}.weight"), d.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), d.bias.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for d in self.layers_mut() {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += factor * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &DetectorParams, factor: f64) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchitectureMismatch {
                expected: self.arch.to_string(),
                found: other.arch.to_string(),
            });
        }
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-anchor class logits (`n × K`) and ltrb offsets (`n × 4`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Grid2,
    pub offsets: Grid2,
}

/// Activations kept for the backward pass: the input patches followed by
/// every post-ReLU trunk output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

/// `n × 3P²` matrix of zero-padded patches centered on each anchor, with
/// pixel values scaled to `[0, 1]`.
pub fn extract_patches(image: &RgbImage, anchors: &AnchorGrid, patch: usize) -> Result<Array2<f64>> {
    let (aw, ah) = anchors.image_size();
    if image.width() != aw || image.height() != ah {
        return Err(Error::invalid(format!(
            "image is {}x{} but anchors were built for {aw}x{ah}",
            image.width(),
            image.height()
        )));
    }
    let dim = 3 * patch * patch;
    let half = patch as f64 / 2.0;
    let mut out = Array2::zeros((anchors.len(), dim));
    for (row, &(cx, cy)) in out.axis_iter_mut(Axis(0)).zip(anchors.points()) {
        let row = row.into_slice().expect("standard layout");
        let x0 = (cx - half).round() as isize;
        let y0 = (cy - half).round() as isize;
        for dy in 0..patch {
            let y = y0 + dy as isize;
            if y < 0 || y >= image.height() as isize {
                continue;
            }
            for dx in 0..patch {
                let x = x0 + dx as isize;
                if x < 0 || x >= image.width() as isize {
                    continue;
                }
                let px = image.pixel(x as usize, y as usize);
                let base = (dy * patch + dx) * 3;
                for c in 0..3 {
                    row[base + c] = px[c] as f64 / 255.0;
                }
            }
        }
    }
    Ok(out)
}

fn to_grid(a: Array2<f64>) -> Grid2 {
    let (r, c) = a.dim();
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Grid2::from_vec(r, c, data).expect("network outputs are finite")
}

fn view(g: &Grid2) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape(g.shape(), g.data()).expect("grid data matches its shape")
}

/// Forward pass over precomputed patch features.
pub fn forward_features(params: &DetectorParams, features: &Array2<f64>) -> Result<(Prediction, ForwardCache)> {
    if features.ncols() != params.arch.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} columns, network expects {}",
            features.ncols(),
            params.arch.input_dim()
        )));
    }
    let mut activations = Vec::with_capacity(params.trunk.len() + 1);
    activations.push(features.clone());
    for layer in &params.trunk {
        let mut z = layer.apply(activations.last().expect("non-empty"));
        z.mapv_inplace(|v| v.max(0.0));
        activations.push(z);
    }
    let last = activations.last().expect("non-empty");
    let logits = params.cls_head.apply(last);
    let offsets = params.loc_head.apply(last);
    if logits.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("network produced non-finite outputs"));
    }
    Ok((
        Prediction {
            logits: to_grid(logits),
            offsets: to_grid(offsets),
        },
        ForwardCache { activations },
    ))
}

/// Forward pass on an image.
pub fn forward(params: &DetectorParams, image: &RgbImage, anchors: &AnchorGrid) -> Result<(Prediction, ForwardCache)> {
    if anchors.stride() as usize != params.arch.stride {
        return Err(Error::invalid(format!(
            "anchor stride {} does not match network stride {}",
            anchors.stride(),
            params.arch.stride
        )));
    }
    let features = extract_patches(image, anchors, params.arch.patch)?;
    forward_features(params, &features)
}

fn dense_grads(grad_out: &ArrayView2<f64>, input: &Array2<f64>) -> Dense {
    Dense {
        weight: grad_out.t().dot(input),
        bias: grad_out.sum_axis(Axis(0)),
    }
}

/// Reverse-mode gradients of `Σ grad_logits ⊙ logits + Σ grad_offsets ⊙ offsets`.
pub fn backward(
    params: &DetectorParams,
    cache: &ForwardCache,
    grad_logits: &Grid2,
    grad_offsets: &Grid2,
) -> Result<Gradients> {
    let n = cache.activations[0].nrows();
    grad_logits.expect_shape((n, params.arch.num_classes), "logit gradient")?;
    grad_offsets.expect_shape((n, 4), "offset gradient")?;
    if cache.activations.len() != params.trunk.len() + 1 {
        return Err(Error::invalid("forward cache does not belong to these parameters"));
    }
    let g_cls = view(grad_logits);
    let g_loc = view(grad_offsets);
    let last = cache.activations.last().expect("non-empty");

    let cls_head = dense_grads(&g_cls, last);
    let loc_head = dense_grads(&g_loc, last);
    let mut grad_act = g_cls.dot(&params.cls_head.weight) + g_loc.dot(&params.loc_head.weight);

    let mut trunk = Vec::with_capacity(params.trunk.len());
    for k in (0..params.trunk.len()).rev() {
        let out = &cache.activations[k + 1];
        Zip::from(&mut grad_act).and(out).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let input = &cache.activations[k];
        trunk.push(dense_grads(&grad_act.view(), input));
        if k > 0 {
            grad_act = grad_act.dot(&params.trunk[k].weight);
        }
    }
    trunk.reverse();
    Ok(Gradients {
        arch: params.arch.clone(),
        trunk,
        cls_head,
        loc_head,
    })
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: DetectorParams,
}

impl OptimizerState {
    pub fn new(params: &DetectorParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &DetectorParams {
        &self.velocity
    }
}

/// `v ← μ·v + g + λ·θ`, then `θ ← θ - η·v`.
pub fn sgd_step(params: &mut DetectorParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if params.arch != grads.arch || params.arch != state.velocity.arch {
        return Err(Error::ArchitectureMismatch {
            expected: params.arch.to_string(),
            found: grads.arch.to_string(),
        });
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    let grads = grads.tensors();
    for ((p, v), (_, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(grads)
    {
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ArchitectureRecord {
    patch: usize,
    strides: Vec<usize>,
    widths: Vec<usize>,
    #[serde(rename = "K")]
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    architecture: ArchitectureRecord,
    params: BTreeMap<String, Vec<f64>>,
    rng_seed: u64,
    epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub rng_seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn expect_architecture(&self, arch: &Architecture) -> Result<()> {
        if &self.params.arch != arch {
            return Err(Error::ArchitectureMismatch {
                expected: arch.to_string(),
                found: self.params.arch.to_string(),
            });
        }
        Ok(())
    }
}

/// Writes parameters as JSON; `serde_json` emits shortest round-trip
/// decimals, so loading reproduces every value bit for bit.
pub fn save_checkpoint(path: &Path, params: &DetectorParams, rng_seed: u64, epoch: usize) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        architecture: ArchitectureRecord {
            patch: params.arch.patch,
            strides: vec![params.arch.stride],
            widths: params.arch.hidden.clone(),
            num_classes: params.arch.num_classes,
        },
        params: params
            .tensors()
            .into_iter()
            .map(|(name, t)| (name, t.to_vec()))
            .collect(),
        rng_seed,
        epoch,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e.to_string()))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse(
            "format_version",
            format!("unsupported version {}", file.format_version),
        ));
    }
    let [stride] = file.architecture.strides[..] else {
        return Err(Error::parse(
            "architecture.strides",
            "exactly one stride level is supported",
        ));
    };
    let arch = Architecture {
        patch: file.architecture.patch,
        stride,
        hidden: file.architecture.widths.clone(),
        num_classes: file.architecture.num_classes,
    };
    arch.validate()
        .map_err(|e| Error::parse("architecture", e.to_string()))?;
    let mut params = DetectorParams::zeros(&arch)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = file.params.keys().find(|k| !names.contains(k)) {
        return Err(Error::parse(format!("params.{extra}"), "unexpected tensor"));
    }
    for (name, dst) in names.iter().zip(params.tensors_mut()) {
        let src = file
            .params
            .get(name)
            .ok_or_else(|| Error::parse(format!("params.{name}"), "missing tensor"))?;
        if src.len() != dst.len() {
            return Err(Error::parse(
                format!("params.{name}"),
                format!("{} values, architecture needs {}", src.len(), dst.len()),
            ));
        }
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(format!("params.{name}"), "non-finite value"));
        }
        dst.copy_from_slice(src);
    }
    Ok(Checkpoint {
        params,
        rng_seed: file.rng_seed,
        epoch: file.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_anchor_grid;
    use crate::numerics::{compare_gradients, finite_diff_grad, DEFAULT_FD_STEP};
    use crate::synthdata::{generate_scene, SceneSpec};

    fn tiny_arch() -> Architecture {
        Architecture {
            patch: 4,
            stride: 8,
            hidden: vec![5, 3],
            num_classes: 2,
        }
    }

    #[test]
    fn zero_weights_output_biases() {
        let arch = tiny_arch();
        let mut p = DetectorParams::zeros(&arch).unwrap();
        p.cls_head.bias = Array1::from(vec![0.25, -1.0]);
        p.loc_head.bias = Array1::from(vec![0.1, 0.2, 0.3, 0.4]);
        let anchors = build_anchor_grid(16, 16, 8).unwrap();
        let img = generate_scene(1, &SceneSpec { width: 16, height: 16, max_size: 16, ..SceneSpec::default() })
            .unwrap()
            .image;
        let (pred, _) = forward(&p, &img, &anchors).unwrap();
        for i in 0..4 {
            assert_eq!(pred.logits.row(i), &[0.25, -1.0]);
            assert_eq!(pred.offsets.row(i), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn identical_patches_identical_rows() {
        let arch = tiny_arch();
        let p = DetectorParams::init(&arch, 3).unwrap();
        let anchors = build_anchor_grid(32, 16, 8).unwrap();
        let mut img = RgbImage::new(32, 16);
        for y in 0..16 {
            for x in 0..32 {
                img.put_pixel(x, y, [200, 10, 90]);
            }
        }
        // Interior anchors (12,4)/(20,4) and (12,12)/(20,12) see identical uniform patches.
        let (pred, _) = forward(&p, &img, &anchors).unwrap();
        assert_eq!(pred.logits.row(1), pred.logits.row(2));
        assert_eq!(pred.offsets.row(5), pred.offsets.row(6));
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = Architecture { patch: 16, stride: 8, hidden: vec![16], num_classes: 3 };
        let anchors = build_anchor_grid(64, 64, 8).unwrap();
        let img = generate_scene(5, &SceneSpec::default()).unwrap().image;
        let a = forward(&DetectorParams::init(&arch, 9).unwrap(), &img, &anchors).unwrap().0;
        let b = forward(&DetectorParams::init(&arch, 9).unwrap(), &img, &anchors).unwrap().0;
        let bits = |g: &Grid2| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        assert_eq!(bits(&a.offsets), bits(&b.offsets));
    }

    #[test]
    fn forward_rejects_mismatched_image() {
        let p = DetectorParams::init(&tiny_arch(), 0).unwrap();
        let anchors = build_anchor_grid(16, 16, 8).unwrap();
        assert!(forward(&p, &RgbImage::new(24, 16), &anchors).is_err());
        let other = build_anchor_grid(16, 16, 4).unwrap();
        assert!(forward(&p, &RgbImage::new(16, 16), &other).is_err());
    }

    #[test]
    fn zero_output_gradients_give_zero_parameter_gradients() {
        let p = DetectorParams::init(&tiny_arch(), 1).unwrap();
        let anchors = build_anchor_grid(16, 16, 8).unwrap();
        let (_, cache) = forward(&p, &RgbImage::new(16, 16), &anchors).unwrap();
        let g = backward(&p, &cache, &Grid2::zeros(4, 2), &Grid2::zeros(4, 4)).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_hidden_unit_chain_rule_by_hand() {
        // Input dim 3·1·1 = 3, one hidden ReLU unit, K = 1.
        let arch = Architecture { patch: 1, stride: 8, hidden: vec![1], num_classes: 1 };
        let mut p = DetectorParams::zeros(&arch).unwrap();
        p.trunk[0].weight = Array2::from_shape_vec((1, 3), vec![0.5, -0.25, 1.0]).unwrap();
        p.trunk[0].bias = Array1::from(vec![0.1]);
        p.cls_head.weight = Array2::from_shape_vec((1, 1), vec![2.0]).unwrap();
        p.loc_head.weight = Array2::from_shape_vec((4, 1), vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.2, 0.4, 0.6]).unwrap();
        let (pred, cache) = forward_features(&p, &x).unwrap();
        // z = 0.1 + 0.2·0.5 − 0.4·0.25 + 0.6 = 0.7, h = 0.7.
        assert!((pred.logits.get(0, 0) - 1.4).abs() < 1e-15);
        let g_l = Grid2::from_vec(1, 1, vec![1.0]).unwrap();
        let g_o = Grid2::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let g = backward(&p, &cache, &g_l, &g_o).unwrap();
        // dL/dh = 2·1 + (−1)·1 = 1 → dW1 = x, db1 = 1.
        assert_eq!(g.trunk[0].weight.as_slice().unwrap(), &[0.2, 0.4, 0.6]);
        assert_eq!(g.trunk[0].bias[0], 1.0);
        assert!((g.cls_head.weight[[0, 0]] - 0.7).abs() < 1e-15);
        assert!((g.loc_head.weight[[1, 0]] - 0.7).abs() < 1e-15);
        assert_eq!(g.loc_head.weight[[0, 0]], 0.0);
    }

    /// Every parameter of a random small network against central differences
    /// of a fixed linear functional of the outputs.
    #[test]
    fn backward_matches_finite_differences() {
        let arch = tiny_arch();
        let anchors = build_anchor_grid(16, 16, 8).unwrap();
        let img = generate_scene(2, &SceneSpec { width: 16, height: 16, max_size: 16, ..SceneSpec::default() })
            .unwrap()
            .image;
        let features = extract_patches(&img, &anchors, arch.patch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let p = DetectorParams::init(&arch, trial).unwrap();
            let gl = Grid2::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let go = Grid2::from_vec(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (_, cache) = forward_features(&p, &features).unwrap();
            let analytic = backward(&p, &cache, &gl, &go).unwrap();
            let objective = |q: &DetectorParams| {
                let (pred, _) = forward_features(q, &features).unwrap();
                pred.logits.data().iter().zip(gl.data()).map(|(a, b)| a * b).sum::<f64>()
                    + pred.offsets.data().iter().zip(go.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            for (t, (name, g)) in analytic.tensors().into_iter().enumerate() {
                let x = Grid2::from_vec(1, g.len(), p.tensors()[t].1.to_vec()).unwrap();
                let numeric = finite_diff_grad(
                    |v| {
                        let mut q = p.clone();
                        q.tensors_mut()[t].copy_from_slice(v.data());
                        objective(&q)
                    },
                    &x,
                    DEFAULT_FD_STEP,
                )
                .unwrap();
                let a = Grid2::from_vec(1, g.len(), g.to_vec()).unwrap();
                let rep = compare_gradients(&a, &numeric, 1e-4).unwrap();
                assert!(rep.passed, "{name}: {rep:?}");
            }
        }
    }

    #[test]
    fn sgd_examples() {
        let arch = Architecture { patch: 1, stride: 8, hidden: vec![], num_classes: 1 };
        let mut p = DetectorParams::zeros(&arch).unwrap();
        p.cls_head.bias[0] = 5.0;

        // Zero grads, zero velocity, no decay: unchanged.
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.1, 0.9, 0.0);
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p, before);

        // lr 0.1, grad 1 on a scalar 5.0 → 4.9.
        let mut g = p.zeros_like();
        g.cls_head.bias[0] = 1.0;
        let mut st = OptimizerState::new(&p, 0.1, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p.cls_head.bias[0] - 4.9).abs() < 1e-15);

        // Two momentum steps, hand-unrolled:
        // v1 = 1 + 0.01·5 = 1.05,  θ1 = 5 − 0.1·1.05 = 4.895
        // v2 = 0.9·1.05 + 1 + 0.01·4.895 = 1.99395,  θ2 = 4.895 − 0.199395 = 4.695605
        p.cls_head.bias[0] = 5.0;
        let mut st = OptimizerState::new(&p, 0.1, 0.9, 0.01);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p.cls_head.bias[0] - 4.895).abs() < 1e-14);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p.cls_head.bias[0] - 4.695_605).abs() < 1e-14);
        assert!((st.velocity().cls_head.bias[0] - 1.993_95).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = DetectorParams::init(&tiny_arch(), 77).unwrap();
        save_checkpoint(&path, &p, 77, 12).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 12);
        assert_eq!(ck.rng_seed, 77);
        for ((_, a), (_, b)) in p.tensors().iter().zip(ck.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(ck.expect_architecture(&tiny_arch()).is_ok());
        let other = Architecture { hidden: vec![7], ..tiny_arch() };
        assert!(matches!(ck.expect_architecture(&other), Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn malformed_checkpoints_name_the_field() {
        let p = DetectorParams::init(&tiny_arch(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &p, 1, 0).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["params"]["trunk.1.bias"] = serde_json::json!([1.0]);
        match parse_checkpoint(&v.to_string()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "params.trunk.1.bias"),
            other => panic!("{other:?}"),
        }
        v["architecture"]["widths"] = serde_json::json!([5]);
        assert!(matches!(parse_checkpoint(&v.to_string()), Err(Error::Parse { .. })));
        assert!(matches!(parse_checkpoint("{\"format_version\": 1}"), Err(Error::Parse { .. })));
    }
}
