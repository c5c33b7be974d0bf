//! Dense block unit, spatial attention unit, the blur-attention module that
//! gates one with the other, and the residual chain that strings modules
//! together.

use bag_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{BagError, Result};
use crate::nn::{Conv2d, Fwd, Norm, NormKind, ParamInit, RELU_GAIN};

/// Channel width of the blur-attention network.
pub const FEATURE_CHANNELS: usize = 72;
/// Convolution layers in a dense block unit.
pub const DBU_LAYERS: usize = 6;
/// Kernel size of the attention convolution.
pub const SAU_KERNEL: usize = 7;

fn require_finite(what: &str, x: &Tensor) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(BagError::NonFinite(format!("{what} input {:?}", x.shape())))
    }
}

/// A `[N, 1, H, W]` gating map with every entry strictly inside `(0, 1)`.
#[derive(Clone, Debug)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim(2)
    }

    pub fn width(&self) -> usize {
        self.0.dim(3)
    }

    /// Values of sample `n` in row-major order.
    pub fn plane(&self, n: usize) -> &[f64] {
        let len = self.height() * self.width();
        &self.0.data()[n * len..(n + 1) * len]
    }

    pub fn detach(&self) -> AttentionMap {
        AttentionMap(self.0.detach())
    }
}

/// Six 3x3 conv + norm + ReLU layers, each fed the concatenation of the block
/// input and every earlier layer's output. The block emits the last layer's
/// map, so input and output widths match.
#[derive(Clone, Debug)]
pub struct DenseBlockUnit {
    layers: Vec<(Conv2d, Norm)>,
    channels: usize,
}

impl DenseBlockUnit {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize, depth: usize, norm: NormKind) -> Self {
        let layers = (0..depth)
            .map(|k| {
                let conv = Conv2d::same(
                    init,
                    &format!("{name}.conv{k}"),
                    channels * (k + 1),
                    channels,
                    3,
                    RELU_GAIN,
                );
                let norm = Norm::new(init, &format!("{name}.norm{k}"), norm, channels);
                (conv, norm)
            })
            .collect();
        Self { layers, channels }
    }

    /// The standard unit: 6 layers, 72 channels, instance normalization.
    pub fn standard(init: &mut ParamInit, name: &str) -> Self {
        Self::new(init, name, FEATURE_CHANNELS, DBU_LAYERS, NormKind::Instance)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn conv_count(&self) -> usize {
        self.layers.len()
    }

    /// Input width of each layer.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|(c, _)| c.in_ch).collect()
    }

    pub fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.channels {
            return Err(BagError::Structural(format!(
                "dense block expects {} channels, got shape {:?}",
                self.channels,
                x.shape()
            )));
        }
        require_finite("dense block", x)?;
        let mut features = vec![x.clone()];
        let mut last = x.clone();
        for (conv, norm) in &self.layers {
            let input = if features.len() == 1 {
                x.clone()
            } else {
                Tensor::concat(&features, 1)
            };
            last = norm.forward(fx, &conv.forward(fx, &input)?)?.relu();
            features.push(last.clone());
        }
        Ok(last)
    }
}

/// Channel-wise max and mean, stacked as a `[N, 2, H, W]` map.
pub fn pool_channels(x: &Tensor) -> Tensor {
    Tensor::concat(&[x.max_axis(1), x.mean_axes(&[1])], 1)
}

/// Max/mean channel pooling, a 7x7 convolution and a sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttentionUnit {
    conv: Conv2d,
}

impl SpatialAttentionUnit {
    pub fn new(init: &mut ParamInit, name: &str) -> Self {
        Self {
            conv: Conv2d::same(init, &format!("{name}.conv"), 2, 1, SAU_KERNEL, 1.0),
        }
    }

    pub fn conv_count(&self) -> usize {
        1
    }

    pub fn forward(&self, fx: &Fwd, f: &Tensor) -> Result<AttentionMap> {
        if f.rank() != 4 || f.dim(1) == 0 {
            return Err(BagError::Structural(format!("attention input shaped {:?}", f.shape())));
        }
        let logits = self.conv.forward(fx, &pool_channels(f))?;
        Ok(AttentionMap(logits.sigmoid()))
    }
}

/// Gates every channel of `f` with the same spatial map.
pub fn apply_attention(a: &AttentionMap, f: &Tensor) -> Result<Tensor> {
    let (t, shape) = (a.tensor(), f.shape());
    if f.rank() != 4 || t.dim(0) != shape[0] || t.dim(2) != shape[2] || t.dim(3) != shape[3] {
        return Err(BagError::Structural(format!(
            "attention {:?} does not align with features {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(f.mul(t))
}

/// Dense block unit followed by spatial attention over its output.
#[derive(Clone, Debug)]
pub struct BlurAttentionModule {
    pub dbu: DenseBlockUnit,
    pub sau: SpatialAttentionUnit,
}

impl BlurAttentionModule {
    pub fn new(init: &mut ParamInit, name: &str) -> Self {
        Self {
            dbu: DenseBlockUnit::standard(init, &format!("{name}.dbu")),
            sau: SpatialAttentionUnit::new(init, &format!("{name}.sau")),
        }
    }

    pub fn conv_count(&self) -> usize {
        self.dbu.conv_count() + self.sau.conv_count()
    }

    pub fn forward(&self, fx: &Fwd, f_in: &Tensor) -> Result<(Tensor, AttentionMap)> {
        let features = self.dbu.forward(fx, f_in)?;
        let a = self.sau.forward(fx, &features)?;
        Ok((apply_attention(&a, &features)?, a))
    }
}

/// The residual branch `F` of one chained module.
pub trait ResidualFunction {
    fn residual(&self, fx: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)>;
}

impl ResidualFunction for BlurAttentionModule {
    fn residual(&self, fx: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)> {
        let (f, a) = self.forward(fx, x)?;
        Ok((f, Some(a)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    /// `x_{k+1} = y_k`
    OneLevel,
    /// `x_{k+1} = y_k + x_1`
    Multilevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub module_count: usize,
    pub connection_kind: ConnectionKind,
}

impl ChainSpec {
    pub fn new(module_count: usize, connection_kind: ConnectionKind) -> Result<Self> {
        if module_count == 0 {
            return Err(BagError::Structural("a chain needs at least one module".into()));
        }
        Ok(Self {
            module_count,
            connection_kind,
        })
    }
}

/// Runs `y_k = F_k(x_k) + x_k` over the modules, feeding the next module
/// either `y_k` alone or `y_k + x_1`. Returns `y_M` and the attention maps in
/// module order.
pub fn multilevel_chain<M: ResidualFunction>(
    fx: &Fwd,
    x: &Tensor,
    modules: &[M],
    spec: ChainSpec,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    if modules.is_empty() || modules.len() != spec.module_count {
        return Err(BagError::Structural(format!(
            "chain expects {} modules, got {}",
            spec.module_count,
            modules.len()
        )));
    }
    let mut maps = Vec::new();
    let mut input = x.clone();
    let mut y = x.clone();
    for (k, module) in modules.iter().enumerate() {
        let (f, a) = module.residual(fx, &input)?;
        if f.shape() != input.shape() {
            return Err(BagError::Structural(format!(
                "module {k} maps {:?} to {:?}",
                input.shape(),
                f.shape()
            )));
        }
        maps.extend(a);
        y = f.add(&input);
        input = match spec.connection_kind {
            ConnectionKind::OneLevel => y.clone(),
            ConnectionKind::Multilevel => y.add(x),
        };
    }
    Ok((y, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, check_param_grads};
    use crate::nn::ParamSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    /// Random multiples of 2^-10, so small integer multiples are exact.
    fn dyadic(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-1024i32..=1024) as f64 / 1024.0)
            .collect();
        Tensor::from_vec(data, shape)
    }

    fn zero_biases(params: &ParamSet) -> ParamSet {
        let mut out = params.clone();
        for (name, t) in params.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                out.insert(name, Tensor::zeros(t.shape()));
            }
        }
        out
    }

    struct Zero;
    struct Identity;
    struct Constant(f64);

    impl ResidualFunction for Zero {
        fn residual(&self, _: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)> {
            Ok((Tensor::zeros(x.shape()), None))
        }
    }

    impl ResidualFunction for Identity {
        fn residual(&self, _: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)> {
            Ok((x.clone(), None))
        }
    }

    impl ResidualFunction for Constant {
        fn residual(&self, _: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)> {
            Ok((Tensor::full(x.shape(), self.0), None))
        }
    }

    fn empty() -> (ParamSet, ParamSet) {
        (ParamSet::new(), ParamSet::new())
    }

    #[test]
    fn dbu_zero_input_gives_zero_output() {
        let mut init = ParamInit::new(1);
        let dbu = DenseBlockUnit::standard(&mut init, "dbu");
        let (params, buffers) = init.finish();
        let fx = Fwd::eval(&params, &buffers);
        let y = dbu.forward(&fx, &Tensor::zeros(&[1, 72, 5, 6])).unwrap();
        assert_eq!(y.shape(), &[1, 72, 5, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dbu_layer_widths_follow_dense_concatenation() {
        let mut init = ParamInit::new(1);
        let dbu = DenseBlockUnit::standard(&mut init, "dbu");
        let widths: Vec<usize> = (1..=6).map(|k| 72 * k).collect();
        assert_eq!(dbu.layer_input_channels(), widths);
        assert_eq!(dbu.layer_input_channels()[5], 432);
        assert_eq!(dbu.conv_count(), 6);
        let (params, _) = init.finish();
        for k in 0..6 {
            assert_eq!(
                params.get(&format!("dbu.conv{k}.weight")).unwrap().shape(),
                &[72, 72 * (k + 1), 3, 3]
            );
        }
    }

    #[test]
    fn dbu_preserves_shape_and_rejects_bad_input() {
        let mut init = ParamInit::new(2);
        let dbu = DenseBlockUnit::standard(&mut init, "dbu");
        let (params, buffers) = init.finish();
        let fx = Fwd::eval(&params, &buffers);
        for (h, w) in [(1, 1), (3, 7), (16, 16)] {
            let y = dbu.forward(&fx, &random(&[1, 72, h, w], 3)).unwrap();
            assert_eq!(y.shape(), &[1, 72, h, w]);
            assert!(y.all_finite());
        }
        let err = dbu.forward(&fx, &Tensor::zeros(&[1, 71, 4, 4])).unwrap_err();
        assert!(matches!(err, BagError::Structural(_)));
        let mut bad = vec![0.0; 72 * 16];
        bad[5] = f64::NAN;
        let err = dbu.forward(&fx, &Tensor::from_vec(bad, &[1, 72, 4, 4])).unwrap_err();
        assert!(matches!(err, BagError::NonFinite(_)));
    }

    #[test]
    fn dbu_input_gradient_matches_finite_differences() {
        let mut init = ParamInit::new(4);
        let dbu = DenseBlockUnit::standard(&mut init, "dbu");
        let (params, buffers) = init.finish();
        let x = random(&[1, 72, 8, 8], 5);
        let report = check_input_grad(
            &x,
            |t| dbu.forward(&Fwd::eval(&params, &buffers), t).map(|y| y.sum()),
            24,
            1e-3,
            6,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn dbu_parameter_gradients_match_finite_differences() {
        let mut init = ParamInit::new(7);
        let dbu = DenseBlockUnit::new(&mut init, "dbu", 4, 6, NormKind::Instance);
        let (params, buffers) = init.finish();
        let x = random(&[1, 4, 5, 5], 8);
        let weights = random(&[1, 4, 5, 5], 9);
        let report = check_param_grads(
            &params,
            |p| dbu.forward(&Fwd::eval(p, &buffers), &x).map(|y| y.mul(&weights).sum()),
            4,
            1e-3,
            10,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn pooled_maps_match_per_pixel_loop() {
        let x = random(&[1, 3, 4, 4], 11);
        let pooled = pool_channels(&x);
        let d = x.data();
        for p in 0..16 {
            let vals = [d[p], d[16 + p], d[32 + p]];
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
            assert_eq!(pooled.data()[p], max);
            assert_eq!(pooled.data()[16 + p], mean);
        }
    }

    #[test]
    fn sau_constant_input_gives_uniform_interior() {
        let mut init = ParamInit::new(12);
        let sau = SpatialAttentionUnit::new(&mut init, "sau");
        let (params, buffers) = init.finish();
        let a = sau
            .forward(&Fwd::eval(&params, &buffers), &Tensor::full(&[1, 5, 12, 12], 0.7))
            .unwrap();
        assert_eq!(a.tensor().shape(), &[1, 1, 12, 12]);
        let p = a.plane(0);
        let centre = p[3 * 12 + 3];
        for y in 3..9 {
            for x in 3..9 {
                assert!((p[y * 12 + x] - centre).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sau_gradients_match_finite_differences() {
        let mut init = ParamInit::new(13);
        let sau = SpatialAttentionUnit::new(&mut init, "sau");
        let (params, buffers) = init.finish();
        let x = random(&[1, 3, 6, 6], 14);
        let w = random(&[1, 1, 6, 6], 15);
        let fx = Fwd::eval(&params, &buffers);
        let report = check_input_grad(&x, |t| Ok(sau.forward(&fx, t)?.tensor().mul(&w).sum()), 108, 1e-3, 16).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
        let report = check_param_grads(
            &params,
            |p| Ok(sau.forward(&Fwd::eval(p, &buffers), &x)?.tensor().mul(&w).sum()),
            20,
            1e-3,
            17,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn attention_product_matches_scalar_loop() {
        let f = random(&[1, 2, 2, 2], 18);
        let a = AttentionMap(random(&[1, 1, 2, 2], 19).sigmoid());
        let out = apply_attention(&a, &f).unwrap();
        for c in 0..2 {
            for p in 0..4 {
                assert_eq!(out.data()[c * 4 + p], a.tensor().data()[p] * f.data()[c * 4 + p]);
            }
        }
        let ones = AttentionMap(Tensor::ones(&[1, 1, 2, 2]));
        assert_eq!(apply_attention(&ones, &f).unwrap().data(), f.data());
        let zeros = AttentionMap(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(apply_attention(&zeros, &f).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_attention(&a, &random(&[1, 2, 3, 2], 1)).is_err());
    }

    #[test]
    fn bam_output_is_attention_times_dbu_bitwise() {
        let mut init = ParamInit::new(20);
        let bam = BlurAttentionModule::new(&mut init, "bam");
        assert_eq!(bam.conv_count(), 7);
        let (params, buffers) = init.finish();
        let fx = Fwd::eval(&params, &buffers);
        let x = random(&[1, 72, 6, 5], 21);
        let (out, a) = bam.forward(&fx, &x).unwrap();
        let features = bam.dbu.forward(&fx, &x).unwrap();
        assert_eq!(a.height(), 6);
        assert_eq!(a.width(), 5);
        for c in 0..72 {
            for p in 0..30 {
                let expected = a.plane(0)[p] * features.data()[c * 30 + p];
                assert_eq!(out.data()[c * 30 + p].to_bits(), expected.to_bits());
            }
        }
        assert!(a.plane(0).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn chain_of_one_zero_module_is_identity() {
        let (p, b) = empty();
        let fx = Fwd::eval(&p, &b);
        let x = random(&[1, 3, 4, 4], 22);
        for kind in [ConnectionKind::OneLevel, ConnectionKind::Multilevel] {
            let (y, maps) = multilevel_chain(&fx, &x, &[Zero], ChainSpec::new(1, kind).unwrap()).unwrap();
            assert_eq!(y.data(), x.data());
            assert!(maps.is_empty());
        }
    }

    #[test]
    fn chain_unrolls_to_closed_forms() {
        let (p, b) = empty();
        let fx = Fwd::eval(&p, &b);
        let x = dyadic(&[1, 3, 5, 5], 23);
        let multi = ChainSpec::new(4, ConnectionKind::Multilevel).unwrap();
        let one = ChainSpec::new(4, ConnectionKind::OneLevel).unwrap();
        let (y, _) = multilevel_chain(&fx, &x, &[Zero, Zero, Zero, Zero], multi).unwrap();
        assert_eq!(y.data(), x.scale(4.0).data());
        let (y, _) = multilevel_chain(&fx, &x, &[Zero, Zero, Zero, Zero], one).unwrap();
        assert_eq!(y.data(), x.data());
        let (y, _) = multilevel_chain(&fx, &x, &[Identity, Identity, Identity, Identity], multi).unwrap();
        assert_eq!(y.data(), x.scale(30.0).data());
        let (y, _) = multilevel_chain(&fx, &x, &[Identity, Identity, Identity, Identity], one).unwrap();
        assert_eq!(y.data(), x.scale(16.0).data());
    }

    #[test]
    fn chain_rejects_empty_and_mismatched_specs() {
        let (p, b) = empty();
        let fx = Fwd::eval(&p, &b);
        let x = random(&[1, 1, 2, 2], 24);
        assert!(ChainSpec::new(0, ConnectionKind::Multilevel).is_err());
        let spec = ChainSpec::new(2, ConnectionKind::Multilevel).unwrap();
        assert!(multilevel_chain::<Zero>(&fx, &x, &[], spec).is_err());
        assert!(multilevel_chain(&fx, &x, &[Zero], spec).is_err());
    }

    #[test]
    fn chain_of_bams_collects_maps_in_order() {
        let mut init = ParamInit::new(25);
        let modules: Vec<_> = (0..4)
            .map(|k| BlurAttentionModule::new(&mut init, &format!("m{k}")))
            .collect();
        let (params, buffers) = init.finish();
        let params = zero_biases(&params);
        let fx = Fwd::eval(&params, &buffers);
        let x = random(&[1, 72, 4, 4], 26);
        let spec = ChainSpec::new(4, ConnectionKind::Multilevel).unwrap();
        let (y, maps) = multilevel_chain(&fx, &x, &modules, spec).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(maps.len(), 4);
        let (_, first) = modules[0].forward(&fx, &x).unwrap();
        assert_eq!(maps[0].tensor().data(), first.tensor().data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_is_strictly_inside_unit_interval(
            c in 1usize..5, h in 1usize..9, w in 1usize..9, scale in 0.0f64..1e4, seed in 0u64..1000,
        ) {
            let mut init = ParamInit::new(seed);
            let sau = SpatialAttentionUnit::new(&mut init, "sau");
            let (params, buffers) = init.finish();
            let x = random(&[1, c, h, w], seed).scale(scale);
            let a = sau.forward(&Fwd::eval(&params, &buffers), &x).unwrap();
            prop_assert_eq!(a.tensor().shape(), &[1, 1, h, w]);
            prop_assert!(a.plane(0).iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn chain_with_constant_modules_matches_recurrence(
            m in 1usize..6, c in -2.0f64..2.0, seed in 0u64..1000,
        ) {
            let (p, b) = empty();
            let fx = Fwd::eval(&p, &b);
            let x = random(&[1, 2, 3, 3], seed);
            let modules: Vec<Constant> = (0..m).map(|_| Constant(c)).collect();
            let spec = ChainSpec::new(m, ConnectionKind::Multilevel).unwrap();
            let (y, _) = multilevel_chain(&fx, &x, &modules, spec).unwrap();
            // y_k = c + x_k, x_{k+1} = y_k + x  =>  y_M = M c + M x
            for (got, xv) in y.data().iter().zip(x.data()) {
                let expected = m as f64 * (c + xv);
                prop_assert!((got - expected).abs() < 1e-12);
            }
        }
    }
}
