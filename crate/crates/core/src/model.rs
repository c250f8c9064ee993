//! The descriptor network and its triplet evaluation mode.
//!
//! The stack is fixed: 7×7 convolution → tanh → 2×2 max-pool → 6×6
//! convolution → tanh → flatten → linear → tanh. The standard configuration
//! takes 32×32 patches through 32 and 64 convolution planes into a 128- or
//! 256-dimensional descriptor; smaller plane counts and input sizes are
//! supported for cheap test networks built from the same ops.
//!
//! There is no learned metric layer: descriptors are compared with the plain
//! L2 distance as they come out of the final tanh.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

pub const CONV1_KERNEL: usize = 7;
pub const CONV2_KERNEL: usize = 6;

/// Architecture hyperparameters. `standard(d)` is the configuration every
/// real run uses; custom sizes exist so gradient checks can run on networks
/// small enough to finite-difference exhaustively.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub conv1_planes: usize,
    pub conv2_planes: usize,
    pub descriptor_dim: usize,
}

impl NetworkConfig {
    /// 32×32 input, 32 then 64 convolution planes, descriptor of `d`
    /// dimensions (128 or 256 in the full-size runs).
    pub fn standard(descriptor_dim: usize) -> Result<Self> {
        Self::custom(32, 32, 64, descriptor_dim)
    }

    pub fn custom(
        input_size: usize,
        conv1_planes: usize,
        conv2_planes: usize,
        descriptor_dim: usize,
    ) -> Result<Self> {
        let cfg = NetworkConfig {
            input_size,
            conv1_planes,
            conv2_planes,
            descriptor_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.descriptor_dim < 1 {
            return Err(Error::invalid("network config", "descriptor_dim must be >= 1"));
        }
        if self.conv1_planes < 1 || self.conv2_planes < 1 {
            return Err(Error::invalid("network config", "plane counts must be >= 1"));
        }
        let s = self.input_size;
        if s < CONV1_KERNEL {
            return Err(Error::invalid(
                "network config",
                format!("input size {s} smaller than first kernel {CONV1_KERNEL}"),
            ));
        }
        let c1 = s - CONV1_KERNEL + 1;
        if c1 % 2 != 0 {
            return Err(Error::invalid(
                "network config",
                format!("first conv output {c1} is odd and cannot be 2x2-pooled"),
            ));
        }
        let pooled = c1 / 2;
        if pooled < CONV2_KERNEL {
            return Err(Error::invalid(
                "network config",
                format!("pooled extent {pooled} smaller than second kernel {CONV2_KERNEL}"),
            ));
        }
        Ok(())
    }

    /// Spatial extent after the first convolution.
    pub fn conv1_out(&self) -> usize {
        self.input_size - CONV1_KERNEL + 1
    }

    /// Spatial extent after pooling.
    pub fn pooled(&self) -> usize {
        self.conv1_out() / 2
    }

    /// Spatial extent after the second convolution.
    pub fn conv2_out(&self) -> usize {
        self.pooled() - CONV2_KERNEL + 1
    }

    /// Values entering the linear layer. 4096 for the standard network.
    pub fn flatten_size(&self) -> usize {
        self.conv2_planes * self.conv2_out() * self.conv2_out()
    }

    /// The shape of every stage, in order, derived from the input extent
    /// under valid convolution and stride-2 pooling.
    pub fn shape_ledger(&self) -> Vec<(&'static str, Vec<usize>)> {
        let s = self.input_size;
        let c1 = self.conv1_out();
        let p = self.pooled();
        let c2 = self.conv2_out();
        vec![
            ("input", vec![1, s, s]),
            ("conv1", vec![self.conv1_planes, c1, c1]),
            ("tanh1", vec![self.conv1_planes, c1, c1]),
            ("pool", vec![self.conv1_planes, p, p]),
            ("conv2", vec![self.conv2_planes, c2, c2]),
            ("tanh2", vec![self.conv2_planes, c2, c2]),
            ("flatten", vec![self.flatten_size()]),
            ("linear", vec![self.descriptor_dim]),
            ("tanh3", vec![self.descriptor_dim]),
        ]
    }
}

/// All learnable tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

/// Standard-architecture initialization; see [`init_params_with`].
pub fn init_params(seed: u64, descriptor_dim: usize) -> Result<NetworkParams<f32>> {
    init_params_with(NetworkConfig::standard(descriptor_dim)?, seed)
}

/// Draws every weight and bias uniformly in ±1/√fan_in of its layer,
/// deterministically from the seed.
pub fn init_params_with<T: Scalar>(config: NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize], fan_in: usize| -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
    };
    let c1 = config.conv1_planes;
    let c2 = config.conv2_planes;
    let d = config.descriptor_dim;
    let fan1 = CONV1_KERNEL * CONV1_KERNEL;
    let fan2 = c1 * CONV2_KERNEL * CONV2_KERNEL;
    let fan3 = config.flatten_size();
    Ok(NetworkParams {
        config,
        conv1_w: draw(&[c1, 1, CONV1_KERNEL, CONV1_KERNEL], fan1),
        conv1_b: draw(&[c1], fan1),
        conv2_w: draw(&[c2, c1, CONV2_KERNEL, CONV2_KERNEL], fan2),
        conv2_b: draw(&[c2], fan2),
        fc_w: draw(&[d, fan3], fan3),
        fc_b: draw(&[d], fan3),
    })
}

impl<T: Scalar> NetworkParams<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters as one flat vector, in declaration order.
    pub fn flatten_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten_values`].
    pub fn from_flat(config: NetworkConfig, values: &[T]) -> Result<Self> {
        let template = init_params_with::<T>(config, 0)?;
        let mut out = template;
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            if offset + n > values.len() {
                return Err(Error::invalid("params from flat", "too few values"));
            }
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::invalid("params from flat", "too many values"));
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            fc_w: self.fc_w.cast(),
            fc_b: self.fc_b.cast(),
        }
    }
}

/// Gradients for every tensor in [`NetworkParams`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamGrads<T: Scalar = f32> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        ParamGrads {
            conv1_w: Tensor::zeros(params.conv1_w.shape()),
            conv1_b: Tensor::zeros(params.conv1_b.shape()),
            conv2_w: Tensor::zeros(params.conv2_w.shape()),
            conv2_b: Tensor::zeros(params.conv2_b.shape()),
            fc_w: Tensor::zeros(params.fc_w.shape()),
            fc_b: Tensor::zeros(params.fc_b.shape()),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    /// Elementwise accumulation of another gradient set.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = *d + *s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn flatten_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace<T: Scalar = f32> {
    input: Tensor<T>,
    conv1_tanh: Tensor<T>,
    pool_idx: ops::PoolIndices,
    pool_out: Tensor<T>,
    flat: Tensor<T>,
    desc: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn descriptors(&self) -> &Tensor<T> {
        &self.desc
    }

    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }
}

fn check_patch_shape<T: Scalar>(params: &NetworkParams<T>, patch: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = patch.dims4("describe")?;
    if c != 1 {
        return Err(Error::shape("describe", "channels", 1, c));
    }
    let s = params.config.input_size;
    if h != s {
        return Err(Error::shape("describe", "rows", s, h));
    }
    if w != s {
        return Err(Error::shape("describe", "cols", s, w));
    }
    Ok(())
}

/// Runs the stack and keeps the intermediates needed for a backward pass.
pub fn describe_with_trace<T: Scalar>(
    params: &NetworkParams<T>,
    patch: &Tensor<T>,
) -> Result<ForwardTrace<T>> {
    check_patch_shape(params, patch)?;
    let b = patch.shape()[0];
    let conv1 = ops::conv2d_forward(patch, &params.conv1_w, &params.conv1_b)?;
    let conv1_tanh = ops::tanh_forward(&conv1);
    let (pool_out, pool_idx) = ops::maxpool2_forward(&conv1_tanh)?;
    let conv2 = ops::conv2d_forward(&pool_out, &params.conv2_w, &params.conv2_b)?;
    let conv2_tanh = ops::tanh_forward(&conv2);
    let flat = conv2_tanh.reshape(&[b, params.config.flatten_size()])?;
    let lin = ops::linear_forward(&flat, &params.fc_w, &params.fc_b)?;
    let desc = ops::tanh_forward(&lin);
    Ok(ForwardTrace {
        input: patch.clone(),
        conv1_tanh,
        pool_idx,
        pool_out,
        flat,
        desc,
    })
}

/// Descriptor batch for a patch batch: the single-branch evaluation used at
/// extraction time. Every coordinate lies in (−1, 1).
pub fn describe<T: Scalar>(params: &NetworkParams<T>, patch: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(describe_with_trace(params, patch)?.desc)
}

/// Three shared-weight evaluations of the same network, one per triplet
/// branch. Identical to three independent [`describe`] calls.
pub fn describe_triplet<T: Scalar>(
    params: &NetworkParams<T>,
    p1: &Tensor<T>,
    p2: &Tensor<T>,
    n: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let b = p1.shape()[0];
    for (name, t) in [("p2", p2), ("n", n)] {
        if t.shape().first() != Some(&b) {
            return Err(Error::invalid(
                "describe triplet",
                format!("branch {name} batch size {} != {b}", t.shape()[0]),
            ));
        }
    }
    Ok((
        describe(params, p1)?,
        describe(params, p2)?,
        describe(params, n)?,
    ))
}

/// Backpropagates a descriptor cotangent through one branch, returning the
/// parameter gradients of that branch. Triplet training calls this once per
/// branch and accumulates, since all branches share the one weight set.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    desc_grad: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    trace.desc.require_same_shape(desc_grad, "model backward")?;
    let b = trace.batch_size();

    let lin_grad = ops::tanh_backward(&trace.desc, desc_grad)?;
    let fc = ops::linear_backward(&trace.flat, &params.fc_w, &lin_grad)?;

    let conv2_tanh_grad = ops::tanh_backward(&trace.flat, &fc.input)?;
    let c2out = params.config.conv2_out();
    let conv2_grad_4d =
        conv2_tanh_grad.reshape(&[b, params.config.conv2_planes, c2out, c2out])?;
    let conv2 = ops::conv2d_backward(&trace.pool_out, &params.conv2_w, &conv2_grad_4d)?;

    let pool_grad = ops::maxpool2_backward(&trace.pool_idx, &conv2.input)?;
    let conv1_grad = ops::tanh_backward(&trace.conv1_tanh, &pool_grad)?;
    let (conv1_w_grad, conv1_b_grad) =
        ops::conv2d_backward_params(&trace.input, &params.conv1_w, &conv1_grad)?;

    Ok(ParamGrads {
        conv1_w: conv1_w_grad,
        conv1_b: conv1_b_grad,
        conv2_w: conv2.weight,
        conv2_b: conv2.bias,
        fc_w: fc.weight,
        fc_b: fc.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::losses::{self, TripletDistances};

    #[test]
    fn shape_ledger_closes_for_the_standard_network() {
        let cfg = NetworkConfig::standard(128).unwrap();
        assert_eq!(cfg.conv1_out(), 26);
        assert_eq!(cfg.pooled(), 13);
        assert_eq!(cfg.conv2_out(), 8);
        assert_eq!(cfg.flatten_size(), 4096);
        let ledger = cfg.shape_ledger();
        assert_eq!(ledger[1], ("conv1", vec![32, 26, 26]));
        assert_eq!(ledger[3], ("pool", vec![32, 13, 13]));
        assert_eq!(ledger[4], ("conv2", vec![64, 8, 8]));
        assert_eq!(ledger[6], ("flatten", vec![4096]));
    }

    #[test]
    fn bad_configs_are_rejected() {
        // 31 -> conv1 out 25 is odd.
        assert!(NetworkConfig::custom(31, 4, 4, 16).is_err());
        // Pooled extent too small for the 6x6 kernel.
        assert!(NetworkConfig::custom(16, 4, 4, 16).is_err());
        assert!(NetworkConfig::custom(32, 4, 4, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(42, 128).unwrap();
        let b = init_params(42, 128).unwrap();
        assert_eq!(a, b);
        let c = init_params(43, 128).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_and_bounds() {
        let p = init_params(1, 128).unwrap();
        assert_eq!(p.fc_w.shape(), &[128, 4096]);
        assert_eq!(p.conv1_w.shape(), &[32, 1, 7, 7]);
        assert_eq!(p.conv2_w.shape(), &[64, 32, 6, 6]);
        let bound1 = 1.0 / 49f32.sqrt();
        assert!(p.conv1_w.iter().chain(p.conv1_b.iter()).all(|v| v.abs() <= bound1));
        let bound2 = 1.0 / (32.0f32 * 36.0).sqrt();
        assert!(p.conv2_w.iter().chain(p.conv2_b.iter()).all(|v| v.abs() <= bound2));
        let bound3 = 1.0 / 4096f32.sqrt();
        assert!(p.fc_w.iter().chain(p.fc_b.iter()).all(|v| v.abs() <= bound3));
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::custom(18, 2, 3, 4).unwrap()
    }

    fn ramp_patch(cfg: &NetworkConfig, batch: usize, phase: f32) -> Tensor<f32> {
        let s = cfg.input_size;
        Tensor::from_fn(&[batch, 1, s, s], |i| {
            (0.37 * (i as f32) + phase).sin() * 0.5
        })
    }

    #[test]
    fn describe_output_range_and_shape() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 3).unwrap();
        let patch = ramp_patch(&cfg, 5, 0.0);
        let desc = describe(&params, &patch).unwrap();
        assert_eq!(desc.shape(), &[5, 4]);
        assert!(desc.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn duplicated_patch_gives_identical_rows() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 3).unwrap();
        let one = ramp_patch(&cfg, 1, 0.3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 1, 18, 18], data).unwrap();
        let desc = describe(&params, &two).unwrap();
        let d = cfg.descriptor_dim;
        assert_eq!(&desc.data()[..d], &desc.data()[d..]);
    }

    #[test]
    fn describe_equals_manual_ledger_composition() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 9).unwrap();
        let patch = ramp_patch(&cfg, 2, 1.0);
        let got = describe(&params, &patch).unwrap();

        let conv1 = ops::conv2d_forward(&patch, &params.conv1_w, &params.conv1_b).unwrap();
        let t1 = ops::tanh_forward(&conv1);
        let (pool, _) = ops::maxpool2_forward(&t1).unwrap();
        let conv2 = ops::conv2d_forward(&pool, &params.conv2_w, &params.conv2_b).unwrap();
        let t2 = ops::tanh_forward(&conv2);
        let flat = t2.reshape(&[2, cfg.flatten_size()]).unwrap();
        let lin = ops::linear_forward(&flat, &params.fc_w, &params.fc_b).unwrap();
        let want = ops::tanh_forward(&lin);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn wrong_spatial_extent_is_rejected() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 3).unwrap();
        let patch = Tensor::<f32>::zeros(&[1, 1, 20, 18]);
        let err = describe(&params, &patch).unwrap_err();
        assert!(err.to_string().contains("rows"), "{err}");
        let patch = Tensor::<f32>::zeros(&[1, 2, 18, 18]);
        assert!(describe(&params, &patch).is_err());
    }

    #[test]
    fn triplet_equals_three_single_branch_calls() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 5).unwrap();
        let p1 = ramp_patch(&cfg, 3, 0.0);
        let p2 = ramp_patch(&cfg, 3, 0.5);
        let n = ramp_patch(&cfg, 3, 2.0);
        let (d1, d2, dn) = describe_triplet(&params, &p1, &p2, &n).unwrap();
        assert_eq!(d1.data(), describe(&params, &p1).unwrap().data());
        assert_eq!(d2.data(), describe(&params, &p2).unwrap().data());
        assert_eq!(dn.data(), describe(&params, &n).unwrap().data());

        // Shared weights: identical branches produce identical descriptors.
        let (e1, e2, _) = describe_triplet(&params, &p1, &p1, &n).unwrap();
        assert_eq!(e1.data(), e2.data());

        let short = ramp_patch(&cfg, 2, 0.0);
        assert!(describe_triplet(&params, &p1, &short, &n).is_err());
    }

    /// Soft-PN loss of one triplet as a scalar function of the flattened
    /// parameter vector, with its analytic gradient accumulated across all
    /// three shared-weight branches.
    fn triplet_loss_and_grad(
        cfg: NetworkConfig,
        flat_params: &Tensor<f64>,
        p1: &Tensor<f64>,
        p2: &Tensor<f64>,
        n: &Tensor<f64>,
    ) -> crate::Result<(f64, Tensor<f64>)> {
        let params = NetworkParams::from_flat(cfg, flat_params.data())?;
        let tr1 = describe_with_trace(&params, p1)?;
        let tr2 = describe_with_trace(&params, p2)?;
        let trn = describe_with_trace(&params, n)?;
        let (d1, d2, dn) = (
            tr1.descriptors().data(),
            tr2.descriptors().data(),
            trn.descriptors().data(),
        );
        let pos = ops::l2_distance_slice(d1, d2);
        let neg1 = ops::l2_distance_slice(d1, dn);
        let neg2 = ops::l2_distance_slice(d2, dn);
        let t = TripletDistances::new(pos, neg1, neg2)?;
        let loss = losses::softpn_loss(&t)?;
        let g = losses::softpn_backward(&t)?;

        let dim = cfg.descriptor_dim;
        let mut g1 = vec![0.0f64; dim];
        let mut g2 = vec![0.0f64; dim];
        let mut gn = vec![0.0f64; dim];
        ops::l2_grad_accumulate(d1, d2, pos, g.pos, &mut g1, &mut g2);
        ops::l2_grad_accumulate(d1, dn, neg1, g.neg1, &mut g1, &mut gn);
        ops::l2_grad_accumulate(d2, dn, neg2, g.neg2, &mut g2, &mut gn);

        let mut grads = backward(&params, &tr1, &Tensor::from_vec(&[1, dim], g1)?)?;
        grads.accumulate(&backward(&params, &tr2, &Tensor::from_vec(&[1, dim], g2)?)?);
        grads.accumulate(&backward(&params, &trn, &Tensor::from_vec(&[1, dim], gn)?)?);
        Ok((loss, Tensor::from_vec(
            &[flat_params.len()],
            grads.flatten_values(),
        )?))
    }

    #[test]
    fn end_to_end_triplet_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let params = init_params_with::<f64>(cfg, 21).unwrap();
        let s = cfg.input_size;
        let mk = |phase: f64| {
            Tensor::<f64>::from_fn(&[1, 1, s, s], |i| (0.31 * (i as f64) + phase).sin() * 0.4)
        };
        let (p1, p2, n) = (mk(0.0), mk(0.15), mk(3.0));
        let at = Tensor::from_vec(&[params.param_count()], params.flatten_values()).unwrap();
        let err = grad_check(
            |flat| triplet_loss_and_grad(cfg, flat, &p1, &p2, &n),
            &at,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "end-to-end rel error {err}");
    }

    #[test]
    fn flat_round_trip() {
        let cfg = tiny_config();
        let params = init_params_with::<f32>(cfg, 77).unwrap();
        let flat = params.flatten_values();
        let back = NetworkParams::from_flat(cfg, &flat).unwrap();
        assert_eq!(params, back);
        assert!(NetworkParams::<f32>::from_flat(cfg, &flat[1..]).is_err());
    }
}
