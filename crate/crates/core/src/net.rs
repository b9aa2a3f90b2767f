//! The decomposition network and its weight file format.
//!
//! The input image is concatenated with its per-pixel channel maximum, passed
//! through a trunk of padded 3×3 convolution blocks and a narrower neck, then
//! split into two heads: a 3-channel reflectance head and a 1-channel shading
//! head, both ending in a sigmoid. Every convolution is preceded by reflection
//! padding, so outputs have the input's spatial size.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::conv::{conv2d_forward, reflect_pad_forward};
use crate::autograd::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

/// Smallest accepted input side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub trunk_blocks: usize,
    pub trunk_filters: usize,
    pub kernel: usize,
    pub neck_filters: usize,
    pub head_filters: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            trunk_blocks: 5,
            trunk_filters: 64,
            kernel: 3,
            neck_filters: 32,
            head_filters: vec![16, 8, 4],
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_blocks == 0 {
            return Err(Error::invalid("network needs at least one trunk block"));
        }
        if self.trunk_filters == 0 || self.neck_filters == 0 || self.head_filters.contains(&0) {
            return Err(Error::invalid("filter counts must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::invalid("leaky slope must be finite"));
        }
        Ok(())
    }

    /// Equality ignoring the initialization seed.
    pub fn same_architecture(&self, other: &NetConfig) -> bool {
        let strip = |c: &NetConfig| NetConfig { seed: 0, ..c.clone() };
        strip(self) == strip(other)
    }

    /// `(name, c_in, c_out, activation)` for every conv layer, in order.
    fn layer_specs(&self) -> Vec<(String, usize, usize, Activation)> {
        let lrelu = Activation::LeakyRelu(self.leaky_slope);
        let mut specs = Vec::new();
        let mut c = 4;
        for i in 0..self.trunk_blocks {
            specs.push((format!("trunk.{i}"), c, self.trunk_filters, lrelu));
            c = self.trunk_filters;
        }
        specs.push(("neck".to_string(), c, self.neck_filters, lrelu));
        for (head, out) in [("reflectance", 3), ("shading", 1)] {
            let mut c = self.neck_filters;
            for (i, &f) in self.head_filters.iter().enumerate() {
                specs.push((format!("{head}.{i}"), c, f, lrelu));
                c = f;
            }
            specs.push((format!("{head}.out"), c, out, Activation::Sigmoid));
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// `(k, k, c_in, c_out)`.
    pub kernel: Tensor,
    /// `(1, 1, 1, c_out)`.
    pub bias: Tensor,
    pub activation: Activation,
}

/// All trainable weights of a network built from a [`NetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    config: NetConfig,
    layers: Vec<ConvLayer>,
}

/// Graph handles for every layer's kernel and bias.
#[derive(Clone, Debug)]
pub struct ParamNodes(pub Vec<(NodeId, NodeId)>);

impl NetworkParams {
    /// Fresh weights: uniform in `±√(6 / fan_in)`, zero biases.
    pub fn build(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|(name, cin, cout, activation)| {
                let bound = (6.0 / (k * k * cin) as f64).sqrt();
                let shape = Shape::new(k, k, cin, cout);
                let data = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
                ConvLayer {
                    name,
                    kernel: Tensor::new(shape, data).expect("length matches shape"),
                    bias: Tensor::zeros(Shape::new(1, 1, 1, cout)),
                    activation,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.numel() + l.bias.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.kernel.is_finite() && l.bias.is_finite())
    }

    /// Flattened `(name, values)` pairs in a stable order.
    pub fn named_arrays(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.kernel.data()),
                    (format!("{}.bias", l.name), l.bias.data()),
                ]
            })
            .collect()
    }

    /// Mutable views in [`NetworkParams::named_arrays`] order.
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.kernel.data_mut(), l.bias.data_mut()])
            .collect()
    }

    fn trunk_len(&self) -> usize {
        self.config.trunk_blocks + 1
    }

    fn head_len(&self) -> usize {
        self.config.head_filters.len() + 1
    }

    /// Registers every kernel and bias as a graph leaf.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.layers
                .iter()
                .map(|l| (g.leaf(l.kernel.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
                .collect(),
        )
    }

    /// Records the forward pass on `g`. Returns `(reflectance, shading)`.
    pub fn forward_graph(&self, g: &mut Graph, nodes: &ParamNodes, image: NodeId) -> Result<(NodeId, NodeId)> {
        check_input(g.shape(image))?;
        let pad = self.config.kernel / 2;
        let layer = |g: &mut Graph, i: usize, x: NodeId| -> Result<NodeId> {
            let (k, b) = nodes.0[i];
            let p = g.reflection_pad(x, pad)?;
            let y = g.conv2d(p, k, b)?;
            Ok(match self.layers[i].activation {
                Activation::LeakyRelu(s) => g.leaky_relu(y, s),
                Activation::Sigmoid => g.sigmoid(y),
            })
        };
        let m = g.channel_max(image);
        let mut x = g.concat(&[image, m])?;
        for i in 0..self.trunk_len() {
            x = layer(g, i, x)?;
        }
        let mut heads = [x, x];
        for (h, out) in heads.iter_mut().enumerate() {
            let start = self.trunk_len() + h * self.head_len();
            for i in start..start + self.head_len() {
                *out = layer(g, i, *out)?;
            }
        }
        Ok((heads[0], heads[1]))
    }

    /// Inference on an `(N, H, W, 3)` batch without recording a graph, so only
    /// the current activation is kept alive.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        check_input(image.shape())?;
        let pad = self.config.kernel / 2;
        let apply = |i: usize, x: &Tensor| -> Result<Tensor> {
            let l = &self.layers[i];
            let p = reflect_pad_forward(x, pad)?;
            let mut y = conv2d_forward(&p, &l.kernel, &l.bias)?;
            for v in y.data_mut() {
                *v = match l.activation {
                    Activation::LeakyRelu(s) => {
                        if *v > 0.0 {
                            *v
                        } else {
                            s * *v
                        }
                    }
                    Activation::Sigmoid => crate::autograd::sigmoid(*v),
                };
            }
            Ok(y)
        };
        let mut data = Vec::with_capacity(image.numel() / 3 * 4);
        for px in image.data().chunks_exact(3) {
            data.extend_from_slice(px);
            data.push(px.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut x = Tensor::new(image.shape().with_channels(4), data)?;
        for i in 0..self.trunk_len() {
            x = apply(i, &x)?;
        }
        let mut outs = Vec::with_capacity(2);
        for h in 0..2 {
            let start = self.trunk_len() + h * self.head_len();
            let mut y = apply(start, &x)?;
            for i in start + 1..start + self.head_len() {
                y = apply(i, &y)?;
            }
            outs.push(y);
        }
        let s = outs.pop().expect("two heads");
        let r = outs.pop().expect("two heads");
        Ok((r, s))
    }

    /// Copies values from a flat list in [`NetworkParams::named_arrays`] order.
    fn assign(&mut self, arrays: &mut std::collections::HashMap<String, Vec<f64>>, path: &Path) -> Result<()> {
        for l in &mut self.layers {
            for (suffix, t) in [("weight", &mut l.kernel), ("bias", &mut l.bias)] {
                let name = format!("{}.{suffix}", l.name);
                let data = arrays.remove(&name).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing array {name}"),
                })?;
                if data.len() != t.numel() {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("array {name} has {} values, expected {}", data.len(), t.numel()),
                    });
                }
                t.data_mut().copy_from_slice(&data);
            }
        }
        Ok(())
    }
}

fn check_input(shape: Shape) -> Result<()> {
    if shape.c() != 3 {
        return Err(Error::shape(format!("network input must have 3 channels, got {shape}")));
    }
    if shape.h() < MIN_SIDE || shape.w() < MIN_SIDE {
        return Err(Error::shape(format!(
            "network input must be at least {MIN_SIDE}x{MIN_SIDE}, got {shape}"
        )));
    }
    Ok(())
}

const MAGIC: &[u8; 7] = b"IIDNET1";

/// Parsed contents of a weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub config: NetConfig,
    /// Opaque trainer state stored alongside checkpoints.
    pub train_state: Option<serde_json::Value>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<serde_json::Value>,
}

/// Layout: magic, `u32` header length, JSON header, `u32` array count, then per
/// array `u32` name length, UTF-8 name, `u64` value count, little-endian `f64`
/// values; finally a CRC-32 of everything before it.
pub fn write_weight_file(path: impl AsRef<Path>, file: &WeightFile) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        config: file.config.clone(),
        train_state: file.train_state.clone(),
    })
    .map_err(|e| Error::invalid(format!("cannot encode weight header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(file.arrays.len() as u32).to_le_bytes());
    for (name, values) in &file.arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "unexpected end of data".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<WeightFile> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err("not an IIDNET1 weight file"));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
        path,
    };
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| format_err(&format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| format_err("array name is not UTF-8"))?
            .to_string();
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err("array too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, values));
    }
    if r.pos != body.len() {
        return Err(format_err("trailing bytes after arrays"));
    }
    Ok(WeightFile {
        config: header.config,
        train_state: header.train_state,
        arrays,
    })
}

impl WeightFile {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            config: params.config.clone(),
            train_state: None,
            arrays: params
                .named_arrays()
                .into_iter()
                .map(|(n, v)| (n, v.to_vec()))
                .collect(),
        }
    }

    /// Rebuilds network weights; extra arrays (e.g. optimizer state) are
    /// returned untouched.
    pub fn into_params(self, path: &Path) -> Result<(NetworkParams, Vec<(String, Vec<f64>)>)> {
        let mut params = NetworkParams::build(&self.config)?;
        let weight_names: std::collections::HashSet<String> =
            params.named_arrays().into_iter().map(|(n, _)| n).collect();
        let (mine, rest): (Vec<_>, Vec<_>) = self.arrays.into_iter().partition(|(n, _)| weight_names.contains(n));
        let mut map = mine.into_iter().collect();
        params.assign(&mut map, path)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("weights in {}", path.display())));
        }
        Ok((params, rest))
    }
}

pub fn save_weights(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    write_weight_file(path, &WeightFile::from_params(params))
}

/// Loads weights with whatever architecture the file declares.
pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    Ok(read_weight_file(path)?.into_params(path)?.0)
}

/// Loads weights and fails unless the file's architecture equals `expected`.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<NetworkParams> {
    let path = path.as_ref();
    let file = read_weight_file(path)?;
    if !file.config.same_architecture(expected) {
        return Err(Error::ConfigMismatch {
            expected: format!("{expected:?}"),
            found: format!("{:?}", file.config),
        });
    }
    Ok(file.into_params(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sample_point;

    /// Closed-form parameter count: one `k²·c_in·c_out + c_out` term per layer.
    fn closed_form_count(c: &NetConfig) -> usize {
        let conv = |cin: usize, cout: usize| c.kernel * c.kernel * cin * cout + cout;
        let trunk = conv(4, c.trunk_filters) + (c.trunk_blocks - 1) * conv(c.trunk_filters, c.trunk_filters);
        let neck = conv(c.trunk_filters, c.neck_filters);
        let head = |out: usize| {
            let mut chans = vec![c.neck_filters];
            chans.extend(&c.head_filters);
            chans.push(out);
            chans.windows(2).map(|w| conv(w[0], w[1])).sum::<usize>()
        };
        trunk + neck + head(3) + head(1)
    }

    fn small_config() -> NetConfig {
        NetConfig {
            trunk_blocks: 2,
            trunk_filters: 8,
            neck_filters: 6,
            head_filters: vec![4],
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn default_parameter_count() {
        let p = NetworkParams::build(&NetConfig::default()).unwrap();
        assert_eq!(p.param_count(), closed_form_count(&NetConfig::default()));
        assert_eq!(p.param_count(), 180_844);
        assert_eq!(p.layers().len(), 5 + 1 + 4 + 4);
        let small = small_config();
        assert_eq!(NetworkParams::build(&small).unwrap().param_count(), closed_form_count(&small));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = NetworkParams::build(&small_config()).unwrap();
        let b = NetworkParams::build(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::build(&NetConfig { seed: 4, ..small_config() }).unwrap();
        assert_ne!(a, c);
        for l in a.layers() {
            let [k, _, cin, _] = l.kernel.shape().0;
            let bound = (6.0 / (k * k * cin) as f64).sqrt();
            assert!(l.kernel.data().iter().all(|v| v.abs() < bound));
            assert!(l.bias.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            NetConfig { trunk_filters: 0, ..NetConfig::default() },
            NetConfig { neck_filters: 0, ..NetConfig::default() },
            NetConfig { head_filters: vec![16, 0, 4], ..NetConfig::default() },
            NetConfig { kernel: 4, ..NetConfig::default() },
            NetConfig { trunk_blocks: 0, ..NetConfig::default() },
        ] {
            assert!(NetworkParams::build(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn output_shapes_and_range() {
        let p = NetworkParams::build(&NetConfig::default()).unwrap();
        let x = sample_point(Shape::new(1, 64, 64, 3), 0.0, 1.0, 1);
        let (r, s) = p.forward(&x).unwrap();
        assert_eq!(r.shape(), Shape::new(1, 64, 64, 3));
        assert_eq!(s.shape(), Shape::new(1, 64, 64, 1));
        assert!(r.data().iter().chain(s.data()).all(|v| *v > 0.0 && *v < 1.0));
        assert!(p.forward(&sample_point(Shape::new(1, 7, 9, 3), 0.0, 1.0, 1)).is_err());
        assert!(p.forward(&sample_point(Shape::new(1, 9, 9, 1), 0.0, 1.0, 1)).is_err());
    }

    #[test]
    fn streaming_forward_matches_graph() {
        let p = NetworkParams::build(&small_config()).unwrap();
        let x = sample_point(Shape::new(2, 9, 11, 3), 0.0, 1.0, 2);
        let (r, s) = p.forward(&x).unwrap();
        let mut g = Graph::new();
        let nodes = p.attach(&mut g, false);
        let xi = g.constant(x);
        let (gr, gs) = p.forward_graph(&mut g, &nodes, xi).unwrap();
        assert_eq!(g.value(gr), &r);
        assert_eq!(g.value(gs), &s);
    }

    #[test]
    fn translation_consistent() {
        let p = NetworkParams::build(&NetConfig::default()).unwrap();
        let big = sample_point(Shape::new(1, 40, 41, 3), 0.0, 1.0, 5);
        let crop = |x0: usize| {
            let mut d = Vec::new();
            for y in 0..40 {
                let row = &big.data()[(y * 41 + x0) * 3..(y * 41 + x0 + 40) * 3];
                d.extend_from_slice(row);
            }
            Tensor::new(Shape::new(1, 40, 40, 3), d).unwrap()
        };
        let (ra, sa) = p.forward(&crop(0)).unwrap();
        let (rb, sb) = p.forward(&crop(1)).unwrap();
        // ten padded 3×3 layers: border effects reach 10 pixels in
        let reach = 10;
        for (a, b, c) in [(&ra, &rb, 3), (&sa, &sb, 1)] {
            for y in reach..40 - reach {
                for x in reach..40 - reach - 1 {
                    for ch in 0..c {
                        let va = a.data()[(y * 40 + x + 1) * c + ch];
                        let vb = b.data()[(y * 40 + x) * c + ch];
                        assert!((va - vb).abs() < 1e-9, "({y},{x},{ch}) {va} vs {vb}");
                    }
                }
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.iidnet");
        let p = NetworkParams::build(&small_config()).unwrap();
        save_weights(&p, &path).unwrap();
        let q = load_weights(&path).unwrap();
        assert_eq!(p, q);
        let x = sample_point(Shape::new(1, 8, 8, 3), 0.0, 1.0, 9);
        assert_eq!(p.forward(&x).unwrap(), q.forward(&x).unwrap());
        assert_eq!(load_weights_for(&path, &NetConfig { seed: 99, ..small_config() }).unwrap(), p);
    }

    #[test]
    fn corrupt_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.iidnet");
        let p = NetworkParams::build(&small_config()).unwrap();
        save_weights(&p, &path).unwrap();

        let mismatch = load_weights_for(&path, &NetConfig::default());
        assert!(matches!(mismatch, Err(Error::ConfigMismatch { .. })), "{mismatch:?}");

        let bytes = fs::read(&path).unwrap();
        let trunc = dir.path().join("t.iidnet");
        fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&trunc), Err(Error::Checksum(_))));

        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        fs::write(&trunc, &flipped).unwrap();
        assert!(matches!(load_weights(&trunc), Err(Error::Checksum(_))));

        fs::write(&trunc, b"PNG....").unwrap();
        assert!(matches!(load_weights(&trunc), Err(Error::Format { .. })));
        assert!(matches!(load_weights(dir.path().join("none")), Err(Error::NotFound(_))));
    }
}
