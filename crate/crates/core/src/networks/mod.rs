//! U-Net and pre/post-processor networks with closed-form complexity counts.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{NodeId, Padding, Real, Shape, Tape, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

/// U-Net hyperparameters. `decoder_channels[0]` is the bottom block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub cin: usize,
    pub cout: usize,
    #[serde(default = "default_filter")]
    pub filter: usize,
    #[serde(default = "default_layers")]
    pub layers_per_block: usize,
}

fn default_filter() -> usize {
    3
}

fn default_layers() -> usize {
    2
}

/// One convolution in construction order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDesc {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    /// Number of 2x downsamplings before this layer runs.
    pub level: usize,
    pub relu: bool,
}

impl ConvDesc {
    pub fn params(&self) -> usize {
        self.k * self.k * self.cin * self.cout + self.cout
    }

    /// Multiply-accumulates per pixel at the layer's own resolution.
    pub fn macs(&self) -> usize {
        self.params()
    }

    fn kernel_shape(&self) -> Shape {
        Shape::new(self.k, self.k, self.cin, self.cout)
    }

    fn bias_shape(&self) -> Shape {
        Shape::new(1, 1, 1, self.cout)
    }
}

impl UNetSpec {
    pub fn new(encoder: Vec<usize>, decoder: Vec<usize>, cin: usize, cout: usize) -> Result<Self> {
        let spec = UNetSpec {
            encoder_channels: encoder,
            decoder_channels: decoder,
            cin,
            cout,
            filter: 3,
            layers_per_block: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parse the `"[32, 64];[128, 64, 32]"` notation.
    pub fn parse(text: &str, cin: usize, cout: usize) -> Result<Self> {
        let (enc, dec) = text
            .split_once(';')
            .ok_or_else(|| invalid(format!("expected '[encoder];[decoder]', got {text:?}")))?;
        let list = |s: &str| -> Result<Vec<usize>> {
            let inner = s.trim().trim_start_matches(['[', '(']).trim_end_matches([']', ')']);
            inner
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| invalid(format!("bad channel count {v:?} in {text:?}"))))
                .collect()
        };
        UNetSpec::new(list(enc)?, list(dec)?, cin, cout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(invalid("U-Net needs at least one encoder block"));
        }
        if self.decoder_channels.len() != self.encoder_channels.len() + 1 {
            return Err(invalid(format!(
                "decoder has {} entries, expected encoder length + 1 = {}",
                self.decoder_channels.len(),
                self.encoder_channels.len() + 1
            )));
        }
        let all = self.encoder_channels.iter().chain(&self.decoder_channels).chain([&self.cin, &self.cout]);
        if all.into_iter().any(|&c| c == 0) {
            return Err(invalid("channel counts must be at least 1"));
        }
        if self.filter == 0 || self.filter % 2 == 0 {
            return Err(invalid(format!("filter size must be odd, got {}", self.filter)));
        }
        if self.layers_per_block == 0 {
            return Err(invalid("layers_per_block must be at least 1"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels()
    }

    fn block(&self, cin: usize, cout: usize, level: usize, out: &mut Vec<ConvDesc>) {
        let k = self.filter;
        out.push(ConvDesc { k, cin, cout, level, relu: true });
        for _ in 1..self.layers_per_block {
            out.push(ConvDesc { k, cin: cout, cout, level, relu: true });
        }
    }

    pub fn conv_layers(&self) -> Vec<ConvDesc> {
        let enc = &self.encoder_channels;
        let dec = &self.decoder_channels;
        let e = enc.len();
        let mut layers = Vec::new();
        let mut c = self.cin;
        for (level, &ch) in enc.iter().enumerate() {
            self.block(c, ch, level, &mut layers);
            c = ch;
        }
        self.block(c, dec[0], e, &mut layers);
        for j in 1..=e {
            let level = e - j;
            self.block(dec[j - 1] + enc[level], dec[j], level, &mut layers);
        }
        layers.push(ConvDesc { k: self.filter, cin: dec[e], cout: self.cout, level: 0, relu: false });
        layers
    }
}

pub fn count_params(spec: &UNetSpec) -> usize {
    spec.conv_layers().iter().map(ConvDesc::params).sum()
}

/// MACs per full-resolution pixel; each layer's count is scaled by its
/// resolution and rounded down.
pub fn count_macs_per_pixel(spec: &UNetSpec) -> usize {
    spec.conv_layers().iter().map(|l| l.macs() >> (2 * l.level)).sum()
}

fn unet_forward<T: Real>(spec: &UNetSpec, tape: &mut Tape<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let s = tape.shape(x);
    let m = spec.required_multiple();
    if s.h % m != 0 || s.w % m != 0 {
        return Err(Error::NotDivisible { h: s.h, w: s.w, multiple: m, levels: spec.levels() });
    }
    if s.c != spec.cin {
        return Err(Error::ShapeMismatch { op: "unet", dim: "input channels", expected: spec.cin, found: s.c });
    }
    let layers = spec.conv_layers();
    let mut p = params.chunks_exact(2);
    let mut conv = |tape: &mut Tape<T>, x: NodeId, desc: &ConvDesc| -> Result<NodeId> {
        let kb = p.next().expect("parameter list matches layers");
        let y = tape.conv2d(x, kb[0], kb[1], 1, Padding::Same)?;
        Ok(if desc.relu { tape.relu(y) } else { y })
    };
    let lpb = spec.layers_per_block;
    let mut it = layers.iter();
    let mut run_block = |tape: &mut Tape<T>, mut h: NodeId| -> Result<NodeId> {
        for _ in 0..lpb {
            h = conv(tape, h, it.next().expect("block layer"))?;
        }
        Ok(h)
    };
    let e = spec.levels();
    let mut skips = Vec::with_capacity(e);
    let mut h = x;
    for _ in 0..e {
        h = run_block(tape, h)?;
        skips.push(h);
        h = tape.avg_downsample2(h)?;
    }
    h = run_block(tape, h)?;
    for level in (0..e).rev() {
        let up = tape.bilinear_upsample2(h)?;
        let cat = tape.concat_channels(&[up, skips[level]])?;
        h = run_block(tape, cat)?;
    }
    drop(run_block);
    conv(tape, h, layers.last().expect("final layer"))
}

fn mlp_layers(cin: usize, hidden: &[usize], cout: usize) -> Vec<ConvDesc> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut c = cin;
    for &hch in hidden {
        layers.push(ConvDesc { k: 1, cin: c, cout: hch, level: 0, relu: true });
        c = hch;
    }
    layers.push(ConvDesc { k: 1, cin: c, cout, level: 0, relu: false });
    layers
}

/// Pre/post-processor: U-Net branch plus an optional pointwise MLP branch,
/// summed, then optionally clamped (straight-through).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub unet: UNetSpec,
    /// Hidden widths of the 1x1 branch; `None` disables it.
    #[serde(default = "default_mlp")]
    pub mlp_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub output_range: Option<(f64, f64)>,
}

fn default_mlp() -> Option<Vec<usize>> {
    Some(vec![16, 16])
}

impl ProcessorSpec {
    pub fn new(unet: UNetSpec) -> Self {
        ProcessorSpec { unet, mlp_hidden: default_mlp(), output_range: None }
    }

    /// The slim configuration: U-Net([32];[32,32]) plus a [16,16] MLP.
    pub fn slim(cin: usize, cout: usize) -> Self {
        ProcessorSpec::new(UNetSpec::new(vec![32], vec![32, 32], cin, cout).expect("valid slim spec"))
    }

    pub fn cin(&self) -> usize {
        self.unet.cin
    }

    pub fn cout(&self) -> usize {
        self.unet.cout
    }

    pub fn conv_layers(&self) -> Vec<ConvDesc> {
        let mut layers = self.unet.conv_layers();
        if let Some(hidden) = &self.mlp_hidden {
            layers.extend(mlp_layers(self.unet.cin, hidden, self.unet.cout));
        }
        layers
    }

    pub fn param_shapes(&self) -> Vec<Shape> {
        self.conv_layers().iter().flat_map(|l| [l.kernel_shape(), l.bias_shape()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(ConvDesc::params).sum()
    }

    pub fn macs_per_pixel(&self) -> usize {
        self.conv_layers().iter().map(|l| l.macs() >> (2 * l.level)).sum()
    }
}

/// A processor with materialized parameters (kernel, bias per conv in
/// construction order).
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: ProcessorSpec,
    pub params: Vec<Tensor<T>>,
}

/// Bare U-Net without the pointwise branch.
pub fn build_unet<T: Real>(spec: &UNetSpec, rng: &mut impl Rng) -> Result<Network<T>> {
    spec.validate()?;
    build_processor(&ProcessorSpec { unet: spec.clone(), mlp_hidden: None, output_range: None }, rng)
}

fn validate_processor(spec: &ProcessorSpec) -> Result<()> {
    spec.unet.validate()?;
    if let Some((lo, hi)) = spec.output_range {
        if !(lo < hi) {
            return Err(invalid(format!("output range ({lo}, {hi}) is empty")));
        }
    }
    if spec.mlp_hidden.as_ref().is_some_and(|h| h.contains(&0)) {
        return Err(invalid("MLP widths must be at least 1"));
    }
    Ok(())
}

/// Fan-in scaled uniform weights, zero biases.
pub fn build_processor<T: Real>(spec: &ProcessorSpec, rng: &mut impl Rng) -> Result<Network<T>> {
    validate_processor(spec)?;
    let mut params = Vec::new();
    for layer in spec.conv_layers() {
        let fan_in = (layer.k * layer.k * layer.cin) as f64;
        let gain = if layer.relu { 6.0 } else { 3.0 };
        let bound = (gain / fan_in).sqrt();
        let kernel = Tensor::from_fn(layer.kernel_shape(), |_, _, _, _| T::lit(rng.random_range(-bound..bound)));
        params.push(kernel);
        params.push(Tensor::zeros(layer.bias_shape()));
    }
    Ok(Network { spec: spec.clone(), params })
}

impl<T: Real> Network<T> {
    /// All-zero parameters.
    pub fn zeros(spec: &ProcessorSpec) -> Result<Self> {
        validate_processor(spec)?;
        Ok(Network { spec: spec.clone(), params: spec.param_shapes().into_iter().map(Tensor::zeros).collect() })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Put the parameters on a tape, as trainable leaves or frozen constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let n_unet = 2 * self.spec.unet.conv_layers().len();
        if params.len() != self.params.len() {
            return Err(invalid(format!("expected {} parameter nodes, got {}", self.params.len(), params.len())));
        }
        let mut y = unet_forward(&self.spec.unet, tape, &params[..n_unet], x)?;
        if let Some(hidden) = &self.spec.mlp_hidden {
            let layers = mlp_layers(self.spec.unet.cin, hidden, self.spec.unet.cout);
            let mut h = x;
            for (layer, kb) in layers.iter().zip(params[n_unet..].chunks_exact(2)) {
                h = tape.conv2d(h, kb[0], kb[1], 1, Padding::Same)?;
                if layer.relu {
                    h = tape.relu(h);
                }
            }
            y = tape.add(y, h)?;
        }
        if let Some((lo, hi)) = self.spec.output_range {
            y = tape.clamp_st(y, T::lit(lo), T::lit(hi))?;
        }
        Ok(y)
    }

    /// Evaluate without recording gradients.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let y = self.forward(&mut tape, &ids, xi)?;
        Ok(tape.value(y).clone())
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Overwrite parameters from a flat buffer in construction order.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { spec: self.spec.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Zero the final convolution of every branch.
    pub fn zero_output_layers(&mut self) {
        let n_unet = 2 * self.spec.unet.conv_layers().len();
        let mut finals = vec![n_unet - 2, n_unet - 1];
        if self.spec.mlp_hidden.is_some() {
            let n = self.params.len();
            finals.extend([n - 2, n - 1]);
        }
        for i in finals {
            self.params[i].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl Network<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&mut w, &self.spec, &self.flat_params())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let (spec, flat): (ProcessorSpec, Vec<f32>) = read_checkpoint(&mut std::io::BufReader::new(file))?;
        let mut net = Network::<f32>::zeros(&spec)?;
        net.set_flat_params(&flat).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TABLE: [(&str, usize, usize); 7] = [
        ("[32,64,128,256];[512,256,128,64,32]", 7_847_491, 213_943),
        ("[32,64];[128,64,32]", 472_387, 112_531),
        ("[16,32,64,128];[256,128,64,32,16]", 1_963_043, 53_981),
        ("[16,32];[64,32,16]", 118_691, 28_619),
        ("[8,16,32,64];[128,64,32,16,8]", 491_347, 13_743),
        ("[8,16];[32,16,8]", 29_971, 7_399),
        ("[32];[32,32]", 57_219, 43_347),
    ];

    #[test]
    fn complexity_table() {
        for (text, params, macs) in TABLE {
            let spec = UNetSpec::parse(text, 3, 3).unwrap();
            assert_eq!(count_params(&spec), params, "{text}");
            assert_eq!(count_macs_per_pixel(&spec), macs, "{text}");
        }
    }

    #[test]
    fn materialized_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (text, params, _) in TABLE.iter().skip(1) {
            let spec = UNetSpec::parse(text, 3, 3).unwrap();
            let net = build_unet::<f32>(&spec, &mut rng).unwrap();
            assert_eq!(net.param_count(), *params);
        }
        for _ in 0..50 {
            let e = rng.random_range(1..4);
            let enc: Vec<usize> = (0..e).map(|_| rng.random_range(1..9)).collect();
            let dec: Vec<usize> = (0..=e).map(|_| rng.random_range(1..9)).collect();
            let mut spec = UNetSpec::new(enc, dec, rng.random_range(1..4), rng.random_range(1..4)).unwrap();
            spec.filter = [1, 3, 5][rng.random_range(0..3)];
            spec.layers_per_block = rng.random_range(1..4);
            let net = build_unet::<f32>(&spec, &mut rng).unwrap();
            assert_eq!(net.param_count(), count_params(&spec), "{spec:?}");
        }
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let spec = UNetSpec::parse("[4,4];[4,4,4]", 1, 1).unwrap();
        let net = build_unet::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let err = net.apply(&Tensor::zeros(Shape::image(12, 10, 1))).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }

    #[test]
    fn zeroed_outputs_give_bias_constant_and_gradients_reach_everything() {
        let spec = ProcessorSpec::new(UNetSpec::parse("[4];[4,4]", 3, 2).unwrap());
        let mut net = build_processor::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        net.zero_output_layers();
        let n = net.params.len();
        let unet_bias = 2 * spec.unet.conv_layers().len() - 1;
        net.params[unet_bias].data_mut().copy_from_slice(&[0.25, -0.5]);
        net.params[n - 1].data_mut().copy_from_slice(&[0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(Shape::image(8, 8, 3), |_, _, _, _| rng.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let ids = net.bind(&mut tape, true);
        let xi = tape.constant(x);
        let y = net.forward(&mut tape, &ids, xi).unwrap();
        assert_eq!(tape.shape(y), Shape::image(8, 8, 2));
        for px in tape.value(y).data().chunks(2) {
            assert_eq!(px, &[0.75, -0.5]);
        }
        let t = tape.constant(Tensor::full(Shape::image(8, 8, 2), 0.3));
        let loss = tape.mse(y, t).unwrap();
        tape.backward(loss).unwrap();
        // Zeroed final kernels receive gradient; earlier layers do not until
        // those kernels move, so check the output layers and biases.
        for &i in &[unet_bias - 1, unet_bias, n - 2, n - 1] {
            assert!(tape.grad(ids[i]).unwrap().iter().any(|&g| g != 0.0), "param {i}");
        }
    }

    #[test]
    fn single_channel_output_shape() {
        let net = build_processor::<f32>(&ProcessorSpec::slim(3, 1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let y = net.apply(&Tensor::zeros(Shape::image(16, 16, 3))).unwrap();
        assert_eq!(y.shape(), Shape::image(16, 16, 1));
    }

    #[test]
    fn processor_gradient_check() {
        let mut spec = ProcessorSpec::new(UNetSpec::parse("[3];[3,2]", 2, 2).unwrap());
        spec.mlp_hidden = Some(vec![3]);
        let net = build_processor::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(Shape::image(4, 4, 2), |_, _, _, _| rng.random_range(-1.0..1.0));
        let target = Tensor::from_fn(Shape::image(4, 4, 2), |_, _, _, _| rng.random_range(-1.0..1.0));
        let mut inputs = net.params.clone();
        inputs.push(x);
        let report = check_gradients(
            &inputs,
            |tape, ids| {
                let (p, x) = ids.split_at(ids.len() - 1);
                let y = net.forward(tape, p, x[0])?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            },
            &GradCheck::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let spec = ProcessorSpec::new(UNetSpec::parse("[4];[4,4]", 1, 1).unwrap());
        let net = build_processor::<f64>(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let big = Tensor::from_fn(Shape::image(56, 56, 1), |_, _, _, _| rng.random_range(0.0..1.0));
        let crop = |oy: usize, ox: usize| Tensor::from_fn(Shape::image(48, 48, 1), |_, y, x, _| big.at(0, y + oy, x + ox, 0));
        let a = net.apply(&crop(0, 0)).unwrap();
        let b = net.apply(&crop(2, 4)).unwrap();
        // Compare outside the receptive-field reach of the crop borders.
        for y in 18..26 {
            for x in 18..26 {
                assert!((a.at(0, y + 2, x + 4, 0) - b.at(0, y, x, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.swck");
        let net = build_processor::<f32>(&ProcessorSpec::slim(3, 1), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        net.save(&path).unwrap();
        assert_eq!(Network::load(&path).unwrap(), net);
    }
}
