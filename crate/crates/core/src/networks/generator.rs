use bag_autograd::{no_grad, Tensor};

use crate::ablation::{TransformModule, VariantSpec};
use crate::blocks::{multilevel_chain, AttentionMap, ChainSpec, FEATURE_CHANNELS};
use crate::error::{BagError, Result};
use crate::image::Image;
use crate::nn::{Conv2d, ConvTranspose2d, Fwd, Norm, NormKind, ParamInit, ParamSet, RELU_GAIN};

/// Output widths of the three encoder convolutions.
pub const ENCODER_WIDTHS: [usize; 3] = [18, 36, FEATURE_CHANNELS];

const HEAD: &str = "head";

pub struct GeneratorOutput {
    /// `clamp(input + residual, -1, 1)`
    pub restored: Tensor,
    /// The tanh-bounded residual added to the input.
    pub residual: Tensor,
    /// One map per attention-equipped module, in chain order.
    pub attention: Vec<AttentionMap>,
}

/// Encoder, chain of transformation modules, decoder, global skip.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: VariantSpec,
    encoder: Vec<(Conv2d, Norm)>,
    modules: Vec<TransformModule>,
    decoder: Vec<(ConvTranspose2d, Norm)>,
    head: ConvTranspose2d,
}

impl Generator {
    pub fn new(spec: &VariantSpec, init: &mut ParamInit) -> Result<Self> {
        spec.validate()?;
        let [w1, w2, w3] = ENCODER_WIDTHS;
        let enc = |init: &mut ParamInit, k: usize, cin: usize, cout: usize, kernel: usize, stride: usize| {
            let name = format!("enc{k}");
            let conv = Conv2d::new(
                init,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                stride,
                kernel / 2,
                RELU_GAIN,
            );
            (conv, Norm::new(init, &format!("{name}.norm"), NormKind::Instance, cout))
        };
        let encoder = vec![
            enc(init, 0, 3, w1, 7, 1),
            enc(init, 1, w1, w2, 3, 2),
            enc(init, 2, w2, w3, 3, 2),
        ];
        let modules = (0..spec.module_count)
            .map(|k| TransformModule::new(init, &format!("chain.m{k}"), spec))
            .collect();
        let dec = |init: &mut ParamInit, k: usize, cin: usize, cout: usize| {
            let name = format!("dec{k}");
            let conv = ConvTranspose2d::new(init, &format!("{name}.conv"), cin, cout, 3, 2, 1, 1, RELU_GAIN);
            (conv, Norm::new(init, &format!("{name}.norm"), NormKind::Instance, cout))
        };
        let decoder = vec![dec(init, 0, w3, w2), dec(init, 1, w2, w1)];
        let head = ConvTranspose2d::new(init, HEAD, w1, 3, 7, 1, 3, 0, 1.0);
        Ok(Self {
            spec: *spec,
            encoder,
            modules,
            decoder,
            head,
        })
    }

    /// Builds the generator with freshly initialized parameters and buffers.
    pub fn init(spec: &VariantSpec, seed: u64) -> Result<(Self, ParamSet, ParamSet)> {
        let mut init = ParamInit::new(seed);
        let g = Self::new(spec, &mut init)?;
        let (params, buffers) = init.finish();
        Ok((g, params, buffers))
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn modules(&self) -> &[TransformModule] {
        &self.modules
    }

    /// Parameters of the final projection producing the residual.
    pub fn head_param_names(&self) -> [&str; 2] {
        [self.head.weight_name(), self.head.bias_name()]
    }

    /// Sets the final projection to zero, making the generator an identity map.
    pub fn zero_head(&self, params: &mut ParamSet) -> Result<()> {
        for name in self.head_param_names() {
            let shape = params.require(name)?.shape().to_vec();
            params.insert(name, Tensor::parameter(vec![0.0; shape.iter().product()], &shape));
        }
        Ok(())
    }

    pub fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<GeneratorOutput> {
        if x.rank() != 4 || x.dim(1) != 3 {
            return Err(BagError::Structural(format!(
                "generator expects [N, 3, H, W], got {:?}",
                x.shape()
            )));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(BagError::Structural(format!(
                "image size {h}x{w}: height and width must be positive multiples of 4"
            )));
        }
        if !x.all_finite() {
            return Err(BagError::NonFinite("generator input".into()));
        }
        let mut f = x.clone();
        for (conv, norm) in &self.encoder {
            f = norm.forward(fx, &conv.forward(fx, &f)?)?.relu();
        }
        let chain = ChainSpec::new(self.modules.len(), self.spec.connection_kind)?;
        let (mut f, attention) = multilevel_chain(fx, &f, &self.modules, chain)?;
        for (conv, norm) in &self.decoder {
            f = norm.forward(fx, &conv.forward(fx, &f)?)?.relu();
        }
        let residual = self.head.forward(fx, &f)?.tanh();
        let restored = x.add(&residual).clamp(-1.0, 1.0);
        Ok(GeneratorOutput {
            restored,
            residual,
            attention,
        })
    }

    /// Inference on one image: the restored image and its attention maps.
    pub fn restore(
        &self,
        params: &ParamSet,
        buffers: &ParamSet,
        blurred: &Image,
    ) -> Result<(Image, Vec<AttentionMap>)> {
        let out = no_grad(|| self.forward(&Fwd::eval(params, buffers), &blurred.to_tensor()))?;
        Ok((Image::from_tensor(&out.restored, 0)?, out.attention))
    }
}
