//! Feature extractor: three untied convolutional branches over
//! overlapping 64×64 patches, merged by two FC layers into a unit-norm
//! 64-d feature. Siamese use is plain parameter reuse — both images of
//! a pair go through the same `ExtractorParams`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metric::FeatureVector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_HEIGHT: usize = 128;
pub const INPUT_WIDTH: usize = 64;
pub const PATCH_SIZE: usize = 64;
pub const NUM_BRANCHES: usize = 3;
pub const FEATURE_DIM: usize = 64;

/// Half-open row windows of the three patches: top, middle, bottom.
/// Adjacent windows overlap by 32 rows and together cover all 128 rows.
pub const PATCH_ROWS: [(usize, usize); NUM_BRANCHES] = [(0, 64), (32, 96), (64, 128)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Network hyperparameters. `default()` is a compact configuration that
/// trains in seconds on a desktop CPU; `large()` is a wider variant for
/// longer runs. Output dimension is pinned to 64 to match the metric
/// layer's square W.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub conv3: ConvSpec,
    pub hidden_width: usize,
    pub relu_after_conv: bool,
    pub tied_branches: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            conv1: ConvSpec { filters: 8, kernel: 5, stride: 1 },
            conv2: ConvSpec { filters: 16, kernel: 5, stride: 1 },
            conv3: ConvSpec { filters: 16, kernel: 3, stride: 1 },
            hidden_width: 96,
            relu_after_conv: true,
            tied_branches: false,
        }
    }
}

impl ExtractorConfig {
    /// Wider variant: 32 filters per conv layer, 500-wide hidden FC.
    pub fn large() -> Self {
        ExtractorConfig {
            conv1: ConvSpec { filters: 32, kernel: 5, stride: 1 },
            conv2: ConvSpec { filters: 32, kernel: 5, stride: 1 },
            conv3: ConvSpec { filters: 32, kernel: 3, stride: 1 },
            hidden_width: 500,
            relu_after_conv: true,
            tied_branches: false,
        }
    }

    /// Extra small variant for quick ablation sweeps and tests.
    pub fn tiny() -> Self {
        ExtractorConfig {
            conv1: ConvSpec { filters: 4, kernel: 5, stride: 1 },
            conv2: ConvSpec { filters: 8, kernel: 3, stride: 1 },
            conv3: ConvSpec { filters: 8, kernel: 3, stride: 1 },
            hidden_width: 48,
            relu_after_conv: true,
            tied_branches: false,
        }
    }

    /// Spatial sizes through one branch: conv→pool→conv→pool→conv.
    /// Errors if a pooling stage would see an odd extent or a kernel
    /// outgrows its input.
    pub fn branch_plan(&self) -> Result<BranchPlan> {
        let mut size = PATCH_SIZE;
        let mut stage = |spec: &ConvSpec, pool: bool| -> Result<usize> {
            if spec.kernel > size {
                return Err(Error::Precondition(format!(
                    "conv kernel {} larger than input extent {size}",
                    spec.kernel
                )));
            }
            size = (size - spec.kernel) / spec.stride + 1;
            if pool {
                if size % 2 != 0 {
                    return Err(Error::Precondition(format!(
                        "pooling stage needs an even extent, got {size}"
                    )));
                }
                size /= 2;
            }
            Ok(size)
        };
        let after1 = stage(&self.conv1, true)?;
        let after2 = stage(&self.conv2, true)?;
        let after3 = stage(&self.conv3, false)?;
        Ok(BranchPlan {
            after_conv1: after1,
            after_conv2: after2,
            after_conv3: after3,
            flat_len: self.conv3.filters * after3 * after3,
        })
    }

    pub fn concat_len(&self) -> Result<usize> {
        Ok(self.branch_plan()?.flat_len * NUM_BRANCHES)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BranchPlan {
    pub after_conv1: usize,
    pub after_conv2: usize,
    pub after_conv3: usize,
    pub flat_len: usize,
}

/// Parameters of one convolutional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<S: Scalar> {
    pub conv1_w: Tensor<S>,
    pub conv1_b: Tensor<S>,
    pub conv2_w: Tensor<S>,
    pub conv2_b: Tensor<S>,
    pub conv3_w: Tensor<S>,
    pub conv3_b: Tensor<S>,
}

/// Full extractor parameter set. `branches` holds three entries in the
/// untied configuration and a single shared entry when tied.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams<S: Scalar> {
    pub branches: Vec<BranchParams<S>>,
    pub fc1_w: Tensor<S>,
    pub fc1_b: Tensor<S>,
    pub fc2_w: Tensor<S>,
    pub fc2_b: Tensor<S>,
}

impl<S: Scalar> ExtractorParams<S> {
    /// Stable (name, tensor) enumeration used by the optimizer and the
    /// checkpoint writer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.conv1.w"), &b.conv1_w));
            out.push((format!("branch{i}.conv1.b"), &b.conv1_b));
            out.push((format!("branch{i}.conv2.w"), &b.conv2_w));
            out.push((format!("branch{i}.conv2.b"), &b.conv2_b));
            out.push((format!("branch{i}.conv3.w"), &b.conv3_w));
            out.push((format!("branch{i}.conv3.b"), &b.conv3_b));
        }
        out.push(("fc1.w".into(), &self.fc1_w));
        out.push(("fc1.b".into(), &self.fc1_b));
        out.push(("fc2.w".into(), &self.fc2_w));
        out.push(("fc2.b".into(), &self.fc2_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for b in &mut self.branches {
            out.push(&mut b.conv1_w);
            out.push(&mut b.conv1_b);
            out.push(&mut b.conv2_w);
            out.push(&mut b.conv2_b);
            out.push(&mut b.conv3_w);
            out.push(&mut b.conv3_b);
        }
        out.push(&mut self.fc1_w);
        out.push(&mut self.fc1_b);
        out.push(&mut self.fc2_w);
        out.push(&mut self.fc2_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
}

fn uniform_tensor<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/volume agree")
}

/// Glorot-uniform initialization: weights uniform in
/// ±√(6/(fan_in+fan_out)), biases zero. Deterministic per seed.
pub fn init_params<S: Scalar>(config: &ExtractorConfig, seed: u64) -> Result<ExtractorParams<S>> {
    let plan = config.branch_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch_count = if config.tied_branches { 1 } else { NUM_BRANCHES };
    let conv_bound = |in_c: usize, spec: &ConvSpec| {
        let fan_in = in_c * spec.kernel * spec.kernel;
        let fan_out = spec.filters * spec.kernel * spec.kernel;
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    let mut branches = Vec::with_capacity(branch_count);
    for _ in 0..branch_count {
        let c1 = &config.conv1;
        let c2 = &config.conv2;
        let c3 = &config.conv3;
        branches.push(BranchParams {
            conv1_w: uniform_tensor(
                &[c1.filters, INPUT_CHANNELS, c1.kernel, c1.kernel],
                conv_bound(INPUT_CHANNELS, c1),
                &mut rng,
            ),
            conv1_b: Tensor::zeros(&[c1.filters]),
            conv2_w: uniform_tensor(
                &[c2.filters, c1.filters, c2.kernel, c2.kernel],
                conv_bound(c1.filters, c2),
                &mut rng,
            ),
            conv2_b: Tensor::zeros(&[c2.filters]),
            conv3_w: uniform_tensor(
                &[c3.filters, c2.filters, c3.kernel, c3.kernel],
                conv_bound(c2.filters, c3),
                &mut rng,
            ),
            conv3_b: Tensor::zeros(&[c3.filters]),
        });
    }
    let concat = plan.flat_len * NUM_BRANCHES;
    let fc1_bound = (6.0 / (concat + config.hidden_width) as f64).sqrt();
    let fc2_bound = (6.0 / (config.hidden_width + FEATURE_DIM) as f64).sqrt();
    Ok(ExtractorParams {
        branches,
        fc1_w: uniform_tensor(&[config.hidden_width, concat], fc1_bound, &mut rng),
        fc1_b: Tensor::zeros(&[config.hidden_width]),
        fc2_w: uniform_tensor(&[FEATURE_DIM, config.hidden_width], fc2_bound, &mut rng),
        fc2_b: Tensor::zeros(&[FEATURE_DIM]),
    })
}

/// Splits a 3×128×64 image into the three overlapping 3×64×64 patches.
pub fn split_patches<S: Scalar>(image: &Tensor<S>) -> Result<[Tensor<S>; NUM_BRANCHES]> {
    let expected = [INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH];
    if image.shape() != expected {
        return Err(Error::dimension("split_patches", image.shape(), &expected));
    }
    let data = image.data();
    let mut patches = Vec::with_capacity(NUM_BRANCHES);
    for (r0, r1) in PATCH_ROWS {
        let mut p = Vec::with_capacity(INPUT_CHANNELS * PATCH_SIZE * INPUT_WIDTH);
        for c in 0..INPUT_CHANNELS {
            let base = c * INPUT_HEIGHT * INPUT_WIDTH;
            p.extend_from_slice(&data[base + r0 * INPUT_WIDTH..base + r1 * INPUT_WIDTH]);
        }
        patches.push(Tensor::from_vec(&[INPUT_CHANNELS, PATCH_SIZE, INPUT_WIDTH], p)?);
    }
    Ok(patches.try_into().expect("exactly three patches"))
}

/// Parameter leaves bound onto a graph for one forward/backward pass.
pub struct BoundParams {
    pub branches: Vec<BoundBranch>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub struct BoundBranch {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
}

pub fn bind_params<S: Scalar>(g: &mut Graph<S>, params: &ExtractorParams<S>) -> BoundParams {
    BoundParams {
        branches: params
            .branches
            .iter()
            .map(|b| BoundBranch {
                conv1_w: g.leaf(&b.conv1_w),
                conv1_b: g.leaf(&b.conv1_b),
                conv2_w: g.leaf(&b.conv2_w),
                conv2_b: g.leaf(&b.conv2_b),
                conv3_w: g.leaf(&b.conv3_w),
                conv3_b: g.leaf(&b.conv3_b),
            })
            .collect(),
        fc1_w: g.leaf(&params.fc1_w),
        fc1_b: g.leaf(&params.fc1_b),
        fc2_w: g.leaf(&params.fc2_w),
        fc2_b: g.leaf(&params.fc2_b),
    }
}

/// Reads accumulated gradients back into a params-shaped container.
pub fn read_grads<S: Scalar>(
    g: &Graph<S>,
    bound: &BoundParams,
    template: &ExtractorParams<S>,
) -> ExtractorParams<S> {
    let grad_tensor = |v: Var, t: &Tensor<S>| {
        Tensor::from_vec(t.shape(), g.grad(v).to_vec()).expect("grad shares shape")
    };
    ExtractorParams {
        branches: bound
            .branches
            .iter()
            .zip(&template.branches)
            .map(|(bv, bt)| BranchParams {
                conv1_w: grad_tensor(bv.conv1_w, &bt.conv1_w),
                conv1_b: grad_tensor(bv.conv1_b, &bt.conv1_b),
                conv2_w: grad_tensor(bv.conv2_w, &bt.conv2_w),
                conv2_b: grad_tensor(bv.conv2_b, &bt.conv2_b),
                conv3_w: grad_tensor(bv.conv3_w, &bt.conv3_w),
                conv3_b: grad_tensor(bv.conv3_b, &bt.conv3_b),
            })
            .collect(),
        fc1_w: grad_tensor(bound.fc1_w, &template.fc1_w),
        fc1_b: grad_tensor(bound.fc1_b, &template.fc1_b),
        fc2_w: grad_tensor(bound.fc2_w, &template.fc2_w),
        fc2_b: grad_tensor(bound.fc2_b, &template.fc2_b),
    }
}

fn branch_graph<S: Scalar>(
    g: &mut Graph<S>,
    config: &ExtractorConfig,
    branch: &BoundBranch,
    patch: Var,
) -> Result<Var> {
    let act = |g: &mut Graph<S>, v: Var| if config.relu_after_conv { g.relu(v) } else { v };
    let c1 = g.conv2d(patch, branch.conv1_w, config.conv1.stride)?;
    let c1 = g.bias_channel(c1, branch.conv1_b)?;
    let c1 = act(g, c1);
    let p1 = g.maxpool2(c1)?;
    let c2 = g.conv2d(p1, branch.conv2_w, config.conv2.stride)?;
    let c2 = g.bias_channel(c2, branch.conv2_b)?;
    let c2 = act(g, c2);
    let p2 = g.maxpool2(c2)?;
    let c3 = g.conv2d(p2, branch.conv3_w, config.conv3.stride)?;
    let c3 = g.bias_channel(c3, branch.conv3_b)?;
    let c3 = act(g, c3);
    // concat with a single input flattens the map
    g.concat(&[c3])
}

/// Builds the full forward pass on `g` and returns the unnormalized
/// 64-d output node.
pub fn forward_prenorm<S: Scalar>(
    g: &mut Graph<S>,
    config: &ExtractorConfig,
    bound: &BoundParams,
    image: &Tensor<S>,
) -> Result<Var> {
    let patches = split_patches(image)?;
    let mut flats = Vec::with_capacity(NUM_BRANCHES);
    for (i, patch) in patches.iter().enumerate() {
        let branch = if config.tied_branches {
            &bound.branches[0]
        } else {
            &bound.branches[i]
        };
        let pv = g.leaf(patch);
        flats.push(branch_graph(g, config, branch, pv)?);
    }
    let merged = g.concat(&flats)?;
    let h = g.linear(merged, bound.fc1_w, bound.fc1_b)?;
    let h = g.relu(h);
    g.linear(h, bound.fc2_w, bound.fc2_b)
}

/// Same as [`forward_prenorm`] but ending in the L2 normalization that
/// feeds the metric layers.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &ExtractorConfig,
    bound: &BoundParams,
    image: &Tensor<S>,
) -> Result<Var> {
    let pre = forward_prenorm(g, config, bound, image)?;
    g.l2normalize(pre)
}

/// One branch applied to a single patch, forward only.
pub fn branch_forward<S: Scalar>(
    patch: &Tensor<S>,
    branch: &BranchParams<S>,
    config: &ExtractorConfig,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let bound = BoundBranch {
        conv1_w: g.leaf(&branch.conv1_w),
        conv1_b: g.leaf(&branch.conv1_b),
        conv2_w: g.leaf(&branch.conv2_w),
        conv2_b: g.leaf(&branch.conv2_b),
        conv3_w: g.leaf(&branch.conv3_w),
        conv3_b: g.leaf(&branch.conv3_b),
    };
    let pv = g.leaf(patch);
    let out = branch_graph(&mut g, config, &bound, pv)?;
    Ok(g.value(out).clone())
}

/// Full forward pass to a unit-norm feature, forward only.
pub fn extract<S: Scalar>(
    image: &Tensor<S>,
    params: &ExtractorParams<S>,
    config: &ExtractorConfig,
) -> Result<FeatureVector<S>> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let out = forward(&mut g, config, &bound, image)?;
    Ok(FeatureVector::from_normalized(g.value(out).data().to_vec()))
}

/// Siamese pair: both images through the same parameter set.
pub fn extract_pair<S: Scalar>(
    i1: &Tensor<S>,
    i2: &Tensor<S>,
    params: &ExtractorParams<S>,
    config: &ExtractorConfig,
) -> Result<(FeatureVector<S>, FeatureVector<S>)> {
    Ok((extract(i1, params, config)?, extract(i2, params, config)?))
}
