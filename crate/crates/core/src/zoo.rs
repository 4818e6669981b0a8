//! Target architectures as pure parameter specifications.
//!
//! A target network here owns no trainable state: [`build_spec`] describes
//! the exact tensors a forward pass consumes, and [`forward`] evaluates the
//! network on externally supplied parameter tensors. When those tensors
//! carry tape provenance, gradients flow through them into whatever
//! produced them; the forward itself introduces no trainable leaves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvKernel,
    ConvBias,
    FcWeight,
    FcBias,
    LstmGateWeight,
    LstmGateBias,
    LrdU,
    LrdV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParam {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl LayerParam {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered layer tensors plus the flat offsets they occupy inside the
/// concatenated parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterSpec {
    layers: Vec<LayerParam>,
    offsets: Vec<usize>,
    flat_size: usize,
}

impl ParameterSpec {
    pub fn new(layers: Vec<LayerParam>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0usize;
        for l in &layers {
            if l.shape.is_empty() || l.shape.iter().any(|&e| e == 0) {
                return Err(Error::Config(format!(
                    "layer {} has a zero or empty extent: {:?}",
                    l.name, l.shape
                )));
            }
            offsets.push(off);
            off += l.size();
        }
        Ok(ParameterSpec {
            layers,
            offsets,
            flat_size: off,
        })
    }

    pub fn layers(&self) -> &[LayerParam] {
        &self.layers
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    pub fn flat_size(&self) -> usize {
        self.flat_size
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Consecutive layer indices grouped by the name prefix before '.',
    /// i.e. ("conv1", kernel+bias), ("fc1", weight+bias), ...
    pub fn layer_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let prefix = l.name.split('.').next().unwrap_or(&l.name).to_string();
            match out.last_mut() {
                Some((p, r)) if *p == prefix => r.end = i + 1,
                _ => out.push((prefix, i..i + 1)),
            }
        }
        out
    }

    /// Replace selected fully connected weights W[m,n] with factor pairs
    /// U[m,r], V[n,r]. The generator then emits the factors instead of the
    /// dense matrix, shrinking that layer's share of the flat vector from
    /// m*n to r*(m+n).
    pub fn with_lrd(&self, ranks: &std::collections::BTreeMap<String, usize>) -> Result<Self> {
        for name in ranks.keys() {
            match self.find(&format!("{name}.weight")) {
                Some(i) if self.layers[i].role == ParamRole::FcWeight => {}
                _ => {
                    return Err(Error::Config(format!(
                        "lrd rank given for {name}, which is not a fully connected layer"
                    )))
                }
            }
        }
        let mut layers = Vec::new();
        for l in &self.layers {
            let prefix = l.name.split('.').next().unwrap_or(&l.name);
            if l.role == ParamRole::FcWeight {
                if let Some(&r) = ranks.get(prefix) {
                    let (m, n) = (l.shape[0], l.shape[1]);
                    if r == 0 {
                        return Err(Error::Config(format!("lrd rank for {prefix} must be >= 1")));
                    }
                    if r > m.min(n) {
                        return Err(Error::Config(format!(
                            "lrd rank {r} for {prefix} exceeds min({m}, {n})"
                        )));
                    }
                    layers.push(LayerParam {
                        name: format!("{prefix}.lrd_u"),
                        role: ParamRole::LrdU,
                        shape: vec![m, r],
                    });
                    layers.push(LayerParam {
                        name: format!("{prefix}.lrd_v"),
                        role: ParamRole::LrdV,
                        shape: vec![n, r],
                    });
                    continue;
                }
            }
            layers.push(l.clone());
        }
        ParameterSpec::new(layers)
    }
}

fn default_cnn_in_channels() -> usize {
    1
}
fn default_cnn_image() -> usize {
    28
}
fn default_cnn_kernel() -> usize {
    5
}
fn default_classes() -> usize {
    10
}
fn default_horizon() -> usize {
    1
}
fn default_cnn_small_c1() -> usize {
    8
}
fn default_cnn_small_c2() -> usize {
    16
}
fn default_cnn_small_hidden() -> usize {
    394
}
fn default_cnn_large_c1() -> usize {
    16
}
fn default_cnn_large_c2() -> usize {
    32
}
fn default_cnn_large_hidden() -> usize {
    1003
}

/// Architecture kind plus hyperparameters; the derived [`ParameterSpec`]
/// is a deterministic function of these fields.
///
/// The two CNN presets land within 0.05% of 108,618 and 537,994 flat
/// parameters respectively at their defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetArchitecture {
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    CnnSmall {
        #[serde(default = "default_cnn_in_channels")]
        in_channels: usize,
        #[serde(default = "default_cnn_image")]
        image: usize,
        #[serde(default = "default_cnn_small_c1")]
        c1: usize,
        #[serde(default = "default_cnn_small_c2")]
        c2: usize,
        #[serde(default = "default_cnn_kernel")]
        kernel: usize,
        #[serde(default = "default_cnn_small_hidden")]
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    CnnLarge {
        #[serde(default = "default_cnn_in_channels")]
        in_channels: usize,
        #[serde(default = "default_cnn_image")]
        image: usize,
        #[serde(default = "default_cnn_large_c1")]
        c1: usize,
        #[serde(default = "default_cnn_large_c2")]
        c2: usize,
        #[serde(default = "default_cnn_kernel")]
        kernel: usize,
        #[serde(default = "default_cnn_large_hidden")]
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Lstm {
        input: usize,
        hidden: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
}

struct CnnDims {
    in_channels: usize,
    image: usize,
    c1: usize,
    c2: usize,
    kernel: usize,
    hidden: usize,
    classes: usize,
    s1: usize,
    p1: usize,
    s2: usize,
    p2: usize,
    flat: usize,
}

fn cnn_dims(
    in_channels: usize,
    image: usize,
    c1: usize,
    c2: usize,
    kernel: usize,
    hidden: usize,
    classes: usize,
) -> Result<CnnDims> {
    for (name, v) in [
        ("in_channels", in_channels),
        ("image", image),
        ("c1", c1),
        ("c2", c2),
        ("kernel", kernel),
        ("hidden", hidden),
        ("classes", classes),
    ] {
        if v == 0 {
            return Err(Error::Config(format!("cnn hyperparameter {name} must be positive")));
        }
    }
    let s1 = image
        .checked_sub(kernel - 1)
        .filter(|&v| v >= 2)
        .ok_or_else(|| Error::Config(format!("kernel {kernel} too large for image {image}")))?;
    let p1 = s1 / 2;
    let s2 = p1
        .checked_sub(kernel - 1)
        .filter(|&v| v >= 2)
        .ok_or_else(|| Error::Config(format!("kernel {kernel} too large after first pool ({p1})")))?;
    let p2 = s2 / 2;
    Ok(CnnDims {
        in_channels,
        image,
        c1,
        c2,
        kernel,
        hidden,
        classes,
        s1,
        p1,
        s2,
        p2,
        flat: c2 * p2 * p2,
    })
}

impl TargetArchitecture {
    fn cnn_dims(&self) -> Option<Result<CnnDims>> {
        match *self {
            TargetArchitecture::CnnSmall {
                in_channels,
                image,
                c1,
                c2,
                kernel,
                hidden,
                classes,
            }
            | TargetArchitecture::CnnLarge {
                in_channels,
                image,
                c1,
                c2,
                kernel,
                hidden,
                classes,
            } => Some(cnn_dims(in_channels, image, c1, c2, kernel, hidden, classes)),
            _ => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            TargetArchitecture::Mlp { classes, .. }
            | TargetArchitecture::CnnSmall { classes, .. }
            | TargetArchitecture::CnnLarge { classes, .. } => Some(*classes),
            TargetArchitecture::Lstm { .. } => None,
        }
    }
}

/// Derive the full parameter specification for an architecture. Ordering
/// is layer order with weights before biases, which fixes the flat layout
/// the generator writes into.
pub fn build_spec(arch: &TargetArchitecture) -> Result<ParameterSpec> {
    let mut layers = Vec::new();
    match arch {
        TargetArchitecture::Mlp { input, hidden, classes } => {
            if *input == 0 || *classes == 0 || hidden.iter().any(|&h| h == 0) {
                return Err(Error::Config("mlp extents must be positive".into()));
            }
            let mut prev = *input;
            for (i, &h) in hidden.iter().enumerate() {
                layers.push(LayerParam {
                    name: format!("fc{}.weight", i + 1),
                    role: ParamRole::FcWeight,
                    shape: vec![h, prev],
                });
                layers.push(LayerParam {
                    name: format!("fc{}.bias", i + 1),
                    role: ParamRole::FcBias,
                    shape: vec![h],
                });
                prev = h;
            }
            let last = hidden.len() + 1;
            layers.push(LayerParam {
                name: format!("fc{last}.weight"),
                role: ParamRole::FcWeight,
                shape: vec![*classes, prev],
            });
            layers.push(LayerParam {
                name: format!("fc{last}.bias"),
                role: ParamRole::FcBias,
                shape: vec![*classes],
            });
        }
        TargetArchitecture::CnnSmall { .. } | TargetArchitecture::CnnLarge { .. } => {
            let d = arch.cnn_dims().unwrap()?;
            layers.push(LayerParam {
                name: "conv1.kernel".into(),
                role: ParamRole::ConvKernel,
                shape: vec![d.c1, d.in_channels, d.kernel, d.kernel],
            });
            layers.push(LayerParam {
                name: "conv1.bias".into(),
                role: ParamRole::ConvBias,
                shape: vec![d.c1],
            });
            layers.push(LayerParam {
                name: "conv2.kernel".into(),
                role: ParamRole::ConvKernel,
                shape: vec![d.c2, d.c1, d.kernel, d.kernel],
            });
            layers.push(LayerParam {
                name: "conv2.bias".into(),
                role: ParamRole::ConvBias,
                shape: vec![d.c2],
            });
            layers.push(LayerParam {
                name: "fc1.weight".into(),
                role: ParamRole::FcWeight,
                shape: vec![d.hidden, d.flat],
            });
            layers.push(LayerParam {
                name: "fc1.bias".into(),
                role: ParamRole::FcBias,
                shape: vec![d.hidden],
            });
            layers.push(LayerParam {
                name: "fc2.weight".into(),
                role: ParamRole::FcWeight,
                shape: vec![d.classes, d.hidden],
            });
            layers.push(LayerParam {
                name: "fc2.bias".into(),
                role: ParamRole::FcBias,
                shape: vec![d.classes],
            });
        }
        TargetArchitecture::Lstm { input, hidden, horizon } => {
            if *input == 0 || *hidden == 0 || *horizon == 0 {
                return Err(Error::Config("lstm extents must be positive".into()));
            }
            if horizon > hidden {
                return Err(Error::Config(format!(
                    "lstm horizon {horizon} exceeds hidden size {hidden} (readout projects the leading hidden coordinates)"
                )));
            }
            layers.push(LayerParam {
                name: "lstm.w_ih".into(),
                role: ParamRole::LstmGateWeight,
                shape: vec![4 * hidden, *input],
            });
            layers.push(LayerParam {
                name: "lstm.w_hh".into(),
                role: ParamRole::LstmGateWeight,
                shape: vec![4 * hidden, *hidden],
            });
            layers.push(LayerParam {
                name: "lstm.bias".into(),
                role: ParamRole::LstmGateBias,
                shape: vec![4 * hidden],
            });
        }
    }
    ParameterSpec::new(layers)
}

fn check_params<F: Scalar>(
    tape: &Tape<F>,
    spec: &ParameterSpec,
    params: &[Var],
) -> Result<()> {
    if params.len() != spec.layers().len() {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, got {}",
            spec.layers().len(),
            params.len()
        )));
    }
    for (l, &v) in spec.layers().iter().zip(params) {
        if tape.value(v).shape() != l.shape.as_slice() {
            return Err(Error::Contract(format!(
                "layer {}: expected shape {:?}, got {:?}",
                l.name,
                l.shape,
                tape.value(v).shape()
            )));
        }
    }
    Ok(())
}

/// Forward pass with dense parameters, in spec order.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    arch: &TargetArchitecture,
    params: &[Var],
    x: Var,
) -> Result<Var> {
    let spec = build_spec(arch)?;
    forward_spec(tape, arch, &spec, params, x)
}

/// Forward pass where `ranks` maps fully connected layer prefixes to a
/// low-rank factorization: the corresponding params are (U, V) pairs and
/// the dense weight is never materialized.
pub fn forward_lrd<F: Scalar>(
    tape: &mut Tape<F>,
    arch: &TargetArchitecture,
    ranks: &std::collections::BTreeMap<String, usize>,
    params: &[Var],
    x: Var,
) -> Result<Var> {
    let spec = build_spec(arch)?.with_lrd(ranks)?;
    forward_spec(tape, arch, &spec, params, x)
}

/// Shared forward walk over a (possibly low-rank) spec.
pub fn forward_spec<F: Scalar>(
    tape: &mut Tape<F>,
    arch: &TargetArchitecture,
    spec: &ParameterSpec,
    params: &[Var],
    x: Var,
) -> Result<Var> {
    check_params(tape, spec, params)?;
    match arch {
        TargetArchitecture::Mlp { hidden, .. } => {
            let groups = spec.layer_groups();
            let mut h = x;
            for (gi, (_, range)) in groups.iter().enumerate() {
                h = fc_apply(tape, spec, params, range.clone(), h)?;
                if gi + 1 < hidden.len() + 1 {
                    h = tape.relu(h);
                }
            }
            Ok(h)
        }
        TargetArchitecture::CnnSmall { .. } | TargetArchitecture::CnnLarge { .. } => {
            let d = arch.cnn_dims().unwrap()?;
            let n = tape.value(x).shape()[0];
            let ximg = if tape.value(x).shape().len() == 2 {
                tape.reshape(x, vec![n, d.in_channels, d.image, d.image])?
            } else {
                x
            };
            let groups = spec.layer_groups();
            let mut h = ximg;
            // conv1, conv2 groups then fc groups
            for (name, range) in &groups {
                if name.starts_with("conv") {
                    let kernel = params[range.start];
                    let bias = params[range.start + 1];
                    h = tape.conv2d(h, kernel, 1, 0)?;
                    h = tape.conv_bias_add(h, bias)?;
                    h = tape.relu(h);
                    h = tape.max_pool2d(h, 2, 2)?;
                } else {
                    let hs = tape.value(h).shape().to_vec();
                    if hs.len() == 4 {
                        h = tape.reshape(h, vec![n, d.flat])?;
                    }
                    h = fc_apply(tape, spec, params, range.clone(), h)?;
                    if *name != "fc2" {
                        h = tape.relu(h);
                    }
                }
            }
            let _ = (d.s1, d.p1, d.s2, d.p2);
            Ok(h)
        }
        TargetArchitecture::Lstm { input, hidden, horizon } => {
            let (din, dh) = (*input, *hidden);
            let xs = tape.value(x).shape().to_vec();
            if xs.len() != 2 || xs[1] % din != 0 {
                return Err(Error::Contract(format!(
                    "lstm input must be [N, window*{din}], got {xs:?}"
                )));
            }
            let steps = xs[1] / din;
            let n = xs[0];
            let w_ih = params[0];
            let w_hh = params[1];
            let bias = params[2];
            let w_ih_t = tape.transpose(w_ih)?;
            let w_hh_t = tape.transpose(w_hh)?;
            let mut h = tape.constant(Tensor::zeros(vec![n, dh]));
            let mut c = tape.constant(Tensor::zeros(vec![n, dh]));
            for t in 0..steps {
                let xt = tape.slice_cols(x, t * din, din)?;
                let gx = tape.matmul(xt, w_ih_t)?;
                let gh = tape.matmul(h, w_hh_t)?;
                let gsum = tape.add(gx, gh)?;
                let gates = tape.add_row_broadcast(gsum, bias)?;
                // gate order: input, forget, cell, output
                let gi_ = tape.slice_cols(gates, 0, dh)?;
                let gf_ = tape.slice_cols(gates, dh, dh)?;
                let gg_ = tape.slice_cols(gates, 2 * dh, dh)?;
                let go_ = tape.slice_cols(gates, 3 * dh, dh)?;
                let i_g = tape.sigmoid(gi_);
                let f_g = tape.sigmoid(gf_);
                let g_g = tape.tanh(gg_);
                let o_g = tape.sigmoid(go_);
                let fc_ = tape.mul(f_g, c)?;
                let ig_ = tape.mul(i_g, g_g)?;
                c = tape.add(fc_, ig_)?;
                let ct = tape.tanh(c);
                h = tape.mul(o_g, ct)?;
            }
            // parameter-free readout: leading hidden coordinates
            tape.slice_cols(h, 0, *horizon)
        }
    }
}

/// Apply one fully connected group (dense or factor pair) to `h`.
fn fc_apply<F: Scalar>(
    tape: &mut Tape<F>,
    spec: &ParameterSpec,
    params: &[Var],
    range: std::ops::Range<usize>,
    h: Var,
) -> Result<Var> {
    let first = &spec.layers()[range.start];
    match first.role {
        ParamRole::FcWeight => {
            let w = params[range.start];
            let b = params[range.start + 1];
            let wt = tape.transpose(w)?;
            let y = tape.matmul(h, wt)?;
            tape.add_row_broadcast(y, b)
        }
        ParamRole::LrdU => {
            let u = params[range.start];
            let v = params[range.start + 1];
            let b = params[range.start + 2];
            let (us, vs) = (
                tape.value(u).shape().to_vec(),
                tape.value(v).shape().to_vec(),
            );
            if us[1] != vs[1] {
                return Err(Error::Contract(format!(
                    "{}: factor rank mismatch, U has {}, V has {}",
                    first.name, us[1], vs[1]
                )));
            }
            // y = x (U V^T)^T = (x V) U^T
            let xv = tape.matmul(h, v)?;
            let ut = tape.transpose(u)?;
            let y = tape.matmul(xv, ut)?;
            tape.add_row_broadcast(y, b)
        }
        _ => Err(Error::Contract(format!(
            "layer group starting at {} is not fully connected",
            first.name
        ))),
    }
}

/// Conventional initialization for baseline (directly trained) runs:
/// Kaiming-uniform weights, zero biases.
pub fn init_params<F: Scalar>(arch: &TargetArchitecture, rng: &mut SeedRng) -> Result<Vec<Tensor<F>>> {
    let spec = build_spec(arch)?;
    let mut out = Vec::with_capacity(spec.layers().len());
    for l in spec.layers() {
        let t = match l.role {
            ParamRole::ConvBias | ParamRole::FcBias | ParamRole::LstmGateBias => {
                Tensor::zeros(l.shape.clone())
            }
            _ => {
                let fan_in: usize = l.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let data: Vec<F> = (0..l.size())
                    .map(|_| F::from_f64((rng.uniform() * 2.0 - 1.0) * bound))
                    .collect();
                Tensor::new(l.shape.clone(), data)?
            }
        };
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_spec_flat_size() {
        let arch = TargetArchitecture::Mlp {
            input: 784,
            hidden: vec![128],
            classes: 10,
        };
        let spec = build_spec(&arch).unwrap();
        assert_eq!(spec.flat_size(), 784 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(spec.flat_size(), 101_770);
    }

    #[test]
    fn lstm_spec_flat_size() {
        let arch = TargetArchitecture::Lstm {
            input: 8,
            hidden: 32,
            horizon: 1,
        };
        let spec = build_spec(&arch).unwrap();
        // 4*(32*(8+32)) gate weights + 4*32 gate biases
        assert_eq!(spec.flat_size(), 5248);
    }

    #[test]
    fn cnn_small_matches_reference_count_within_5_percent() {
        let arch = TargetArchitecture::CnnSmall {
            in_channels: 1,
            image: 28,
            c1: 8,
            c2: 16,
            kernel: 5,
            hidden: 394,
            classes: 10,
        };
        let spec = build_spec(&arch).unwrap();
        assert_eq!(spec.flat_size(), 108_632);
        let rel = (spec.flat_size() as f64 - 108_618.0).abs() / 108_618.0;
        assert!(rel < 0.05, "rel {rel}");
    }

    #[test]
    fn cnn_large_matches_reference_count_within_5_percent() {
        let arch = TargetArchitecture::CnnLarge {
            in_channels: 1,
            image: 28,
            c1: 16,
            c2: 32,
            kernel: 5,
            hidden: 1003,
            classes: 10,
        };
        let spec = build_spec(&arch).unwrap();
        assert_eq!(spec.flat_size(), 537_827);
        let rel = (spec.flat_size() as f64 - 537_994.0).abs() / 537_994.0;
        assert!(rel < 0.05, "rel {rel}");
    }

    #[test]
    fn zero_extent_is_config_error() {
        let arch = TargetArchitecture::Mlp {
            input: 0,
            hidden: vec![4],
            classes: 2,
        };
        assert!(matches!(build_spec(&arch), Err(Error::Config(_))));
    }

    #[test]
    fn offsets_tile_the_flat_vector() {
        let arch = TargetArchitecture::CnnSmall {
            in_channels: 1,
            image: 28,
            c1: 8,
            c2: 16,
            kernel: 5,
            hidden: 394,
            classes: 10,
        };
        let spec = build_spec(&arch).unwrap();
        let mut off = 0;
        for (i, l) in spec.layers().iter().enumerate() {
            assert_eq!(spec.offset(i), off);
            off += l.size();
        }
        assert_eq!(off, spec.flat_size());
    }

    #[test]
    fn mlp_zero_params_zero_logits() {
        let arch = TargetArchitecture::Mlp {
            input: 4,
            hidden: vec![3],
            classes: 2,
        };
        let spec = build_spec(&arch).unwrap();
        let mut tape = Tape::<f64>::new();
        let params: Vec<Var> = spec
            .layers()
            .iter()
            .map(|l| tape.constant(Tensor::zeros(l.shape.clone())))
            .collect();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap());
        let y = forward(&mut tape, &arch, &params, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let arch = TargetArchitecture::Mlp {
            input: 3,
            hidden: vec![],
            classes: 3,
        };
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = tape.constant(Tensor::zeros(vec![3]));
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 4.0, 0.0, -1.0]).unwrap());
        let y = forward(&mut tape, &arch, &[w, b], x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn wrong_shape_names_offending_layer() {
        let arch = TargetArchitecture::Mlp {
            input: 4,
            hidden: vec![3],
            classes: 2,
        };
        let mut tape = Tape::<f64>::new();
        let w1 = tape.constant(Tensor::zeros(vec![3, 4]));
        let b1 = tape.constant(Tensor::zeros(vec![3]));
        let w2 = tape.constant(Tensor::zeros(vec![2, 999]));
        let b2 = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let err = forward(&mut tape, &arch, &[w1, b1, w2, b2], x)
            .unwrap_err()
            .to_string();
        assert!(err.contains("fc2.weight"), "{err}");
    }

    #[test]
    fn lrd_parameter_count_arithmetic() {
        // m=100, n=200, r=16 -> 16*300 = 4800 vs 20,000 dense
        let arch = TargetArchitecture::Mlp {
            input: 200,
            hidden: vec![],
            classes: 100,
        };
        let spec = build_spec(&arch).unwrap();
        let mut ranks = std::collections::BTreeMap::new();
        ranks.insert("fc1".to_string(), 16usize);
        let lrd = spec.with_lrd(&ranks).unwrap();
        let u = &lrd.layers()[lrd.find("fc1.lrd_u").unwrap()];
        let v = &lrd.layers()[lrd.find("fc1.lrd_v").unwrap()];
        assert_eq!(u.size() + v.size(), 16 * (100 + 200));
        assert_eq!(spec.layers()[0].size(), 20_000);
    }

    #[test]
    fn lrd_rank_zero_forbidden() {
        let arch = TargetArchitecture::Mlp {
            input: 3,
            hidden: vec![],
            classes: 4,
        };
        let spec = build_spec(&arch).unwrap();
        let mut ranks = std::collections::BTreeMap::new();
        ranks.insert("fc1".to_string(), 0usize);
        assert!(matches!(spec.with_lrd(&ranks), Err(Error::Config(_))));
    }

    #[test]
    fn lrd_rank_mismatch_is_contract_error() {
        let arch = TargetArchitecture::Mlp {
            input: 3,
            hidden: vec![],
            classes: 4,
        };
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::zeros(vec![4, 2]));
        let v = tape.constant(Tensor::zeros(vec![3, 1])); // mismatched rank
        let b = tape.constant(Tensor::zeros(vec![4]));
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let mut ranks = std::collections::BTreeMap::new();
        ranks.insert("fc1".to_string(), 2usize);
        // build the lrd spec with rank 2 but hand a rank-1 V
        let err = forward_lrd(&mut tape, &arch, &ranks, &[u, v, b], x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn groups_pair_weights_with_biases() {
        let arch = TargetArchitecture::CnnSmall {
            in_channels: 1,
            image: 28,
            c1: 8,
            c2: 16,
            kernel: 5,
            hidden: 394,
            classes: 10,
        };
        let spec = build_spec(&arch).unwrap();
        let groups = spec.layer_groups();
        let names: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["conv1", "conv2", "fc1", "fc2"]);
        assert!(groups.iter().all(|(_, r)| r.len() == 2));
    }

    #[test]
    fn forward_is_pure() {
        let arch = TargetArchitecture::Lstm {
            input: 2,
            hidden: 5,
            horizon: 1,
        };
        let spec = build_spec(&arch).unwrap();
        let mut rng = SeedRng::from_seed(3);
        let params_t: Vec<Tensor<f64>> = spec
            .layers()
            .iter()
            .map(|l| {
                let data: Vec<f64> = (0..l.size()).map(|_| rng.standard_normal() * 0.3).collect();
                Tensor::new(l.shape.clone(), data).unwrap()
            })
            .collect();
        let x_t = Tensor::<f64>::new(vec![3, 8], (0..24).map(|i| (i as f64) * 0.1).collect()).unwrap();

        let run = || {
            let mut tape = Tape::<f64>::new();
            let params: Vec<Var> = params_t.iter().map(|t| tape.constant(t.clone())).collect();
            let x = tape.constant(x_t.clone());
            let y = forward(&mut tape, &arch, &params, x).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
