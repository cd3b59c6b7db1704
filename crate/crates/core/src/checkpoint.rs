//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EBFLOW1\n"
//! u32 manifest length, manifest text (one line per layer: kind, dim, set, hyperparameters)
//! u32 tensor count, then per tensor:
//!     u32 name length, name, u32 ndim, u64 × ndim dims, f64 × len values
//! ```
//!
//! A text sidecar `<path>.manifest` records the MaP preprocess count, the
//! prior and the run seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    Actnorm, AffineCoupling, FlowLayer, FullyConnected, LayerKind, LogitPreprocess, Mlp,
    SmoothLeakyRelu,
};
use crate::model::FlowModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EBFLOW1\n";

/// Contents of the sidecar manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sidecar {
    pub dim: usize,
    pub layers: usize,
    pub preprocess_count: usize,
    pub prior: String,
    pub seed: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn layer_line(layer: &FlowLayer) -> String {
    let kind = layer.kind();
    let mut line = format!(
        "kind={} dim={} set={}",
        kind.name(),
        layer.dim(),
        kind.set().tag()
    );
    match layer {
        FlowLayer::Actnorm(a) => line.push_str(&format!(" initialized={}", a.initialized)),
        FlowLayer::FullyConnected(_) => {}
        FlowLayer::SmoothLeakyRelu(s) => line.push_str(&format!(" alpha={:?}", s.alpha)),
        FlowLayer::AffineCoupling(c) => line.push_str(&format!(
            " flip={} hidden={} depth={}",
            c.flip,
            c.scale_net.hidden(),
            c.scale_net.depth()
        )),
        FlowLayer::LogitPreprocess(l) => line.push_str(&format!(
            " lambda={:?} lo={:?} hi={:?}",
            l.lambda, l.lo, l.hi
        )),
    }
    line
}

fn parse_fields(line: &str) -> Result<BTreeMap<&str, &str>> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest field {kv:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(fields: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    fields
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest line missing {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {:?}", fields[key])))
}

/// Rebuilds a layer skeleton from its manifest line; parameters are filled later.
fn layer_from_line(line: &str) -> Result<FlowLayer> {
    let f = parse_fields(line)?;
    let kind_name: String = field(&f, "kind")?;
    let kind = LayerKind::from_name(&kind_name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown layer kind {kind_name:?}")))?;
    let dim: usize = field(&f, "dim")?;
    let set: String = field(&f, "set")?;
    if set != kind.set().tag() {
        return Err(Error::Checkpoint(format!(
            "layer {kind_name} tagged {set}, expected {}",
            kind.set().tag()
        )));
    }
    Ok(match kind {
        LayerKind::Actnorm => {
            let mut a = Actnorm::identity(dim);
            a.initialized = field(&f, "initialized")?;
            FlowLayer::Actnorm(a)
        }
        LayerKind::FullyConnected => FlowLayer::FullyConnected(FullyConnected::identity(dim)),
        LayerKind::SmoothLeakyRelu => {
            FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(dim, field(&f, "alpha")?)?)
        }
        LayerKind::AffineCoupling => {
            let flip: bool = field(&f, "flip")?;
            let hidden: usize = field(&f, "hidden")?;
            let depth: usize = field(&f, "depth")?;
            let mut c = AffineCoupling::new(dim, flip, hidden, &mut ChaCha8Rng::seed_from_u64(0))?;
            let (da, db) = (c.transformed_dim(), dim - c.transformed_dim());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            c.scale_net = Mlp::new(db, hidden, depth, da, 0.0, &mut rng);
            c.shift_net = Mlp::new(db, hidden, depth, da, 0.0, &mut rng);
            FlowLayer::AffineCoupling(c)
        }
        LayerKind::LogitPreprocess => FlowLayer::LogitPreprocess(LogitPreprocess::new(
            dim,
            field(&f, "lambda")?,
            field(&f, "lo")?,
            field(&f, "hi")?,
        )?),
    })
}

/// Writes the checkpoint and its sidecar manifest.
pub fn save(path: &Path, model: &FlowModel, seed: Option<u64>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let manifest: String = model
        .layers()
        .iter()
        .map(|l| layer_line(l) + "\n")
        .collect();
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    let names = model.parameter_names();
    let params = model.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(params) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;

    let mut side = format!(
        "format=EBFLOW1\ndim={}\nlayers={}\npreprocess_count={}\nprior={}\n",
        model.dim(),
        model.len(),
        model.preprocess_count(),
        model.prior().name()
    );
    if let Some(s) = seed {
        side.push_str(&format!("seed={s}\n"));
    }
    fs::write(sidecar_path(path), side)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let kv: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed sidecar line {l:?}")))
        })
        .collect::<Result<_>>()?;
    if kv.get("format") != Some(&"EBFLOW1") {
        return Err(Error::Checkpoint("sidecar is not an EBFLOW1 manifest".into()));
    }
    Ok(Sidecar {
        dim: field(&kv, "dim")?,
        layers: field(&kv, "layers")?,
        preprocess_count: field(&kv, "preprocess_count")?,
        prior: field(&kv, "prior")?,
        seed: kv.get("seed").map(|s| s.parse()).transpose().map_err(|_| {
            Error::Checkpoint("bad seed in sidecar".into())
        })?,
    })
}

/// Loads a checkpoint written by [`save`], including its sidecar.
pub fn load(path: &Path) -> Result<(FlowModel, Sidecar)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an EBFLOW1 checkpoint",
            path.display()
        )));
    }
    let mlen = r.u32()?;
    let manifest = r.str(mlen)?;
    let layers = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(layer_from_line)
        .collect::<Result<Vec<_>>>()?;
    let side = read_sidecar(path)?;
    let mut model = FlowModel::new(layers, side.preprocess_count)?;
    if side.dim != model.dim() || side.layers != model.len() {
        return Err(Error::Checkpoint(format!(
            "sidecar describes {} layers of dim {}, checkpoint has {} of dim {}",
            side.layers,
            side.dim,
            model.len(),
            model.dim()
        )));
    }

    let count = r.u32()?;
    let expected = model.parameter_names();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, layer manifest implies {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for want in &expected {
        let nlen = r.u32()?;
        let name = r.str(nlen)?;
        if name != want {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} found where {want:?} was expected"
            )));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    model.set_parameters(&values)?;
    Ok((model, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters_and_sidecar() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = FlowModel::glow(2, 2, 8, &mut rng)
            .unwrap()
            .with_logit_preprocess(0.01, -4.0, 4.0)
            .unwrap();
        let noisy: Vec<Tensor> = model
            .clone_parameters()
            .iter()
            .map(|t| t.map(|v| v + 0.01))
            .collect();
        model.set_parameters(&noisy).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, Some(17)).unwrap();
        let (back, side) = load(&path).unwrap();
        assert_eq!(side.preprocess_count, 1);
        assert_eq!(side.seed, Some(17));
        assert_eq!(side.prior, "standard_normal");
        assert_eq!(back.clone_parameters(), model.clone_parameters());
        assert_eq!(back.parameter_names(), model.parameter_names());
        let x = Tensor::matrix(2, 2, vec![0.1, -0.3, 1.2, 0.7]).unwrap();
        assert_eq!(back.log_prob(&x).unwrap(), model.log_prob(&x).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTAFLOW").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let model = FlowModel::identity(2);
        save(&path, &model, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io(_))
        ));
    }
}
