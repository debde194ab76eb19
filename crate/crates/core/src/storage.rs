//! On-disk formats.
//!
//! Tensor file: `LSAT`, version `u8 = 1`, dtype `u8 = 1` (f32 LE), ndim `u8`,
//! ndim × `u32` LE dims, then the row-major payload.
//!
//! Model and map files: `u32` LE header length, a JSON header, then one
//! tensor file per blob in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{sample_factors, Dataset, DatasetManifest, SIDE};
use crate::mapping::{FitMeta, LinearMap};
use crate::models::{AnyModel, GanModel, ModelKind, StyleProxyModel, SvaeModel, VaeModel};
use crate::numerics::{Activation, Layer, Net, RngState, Tensor};
use crate::support::SupportSet;

pub const MAGIC: [u8; 4] = *b"LSAT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::ShapeMismatch(format!(
            "{} dimensions exceed the format limit",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(TENSOR_VERSION);
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::Truncated {
            needed: pos.saturating_add(n),
            found: bytes.len(),
        })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Reads one tensor from the front of `bytes`; returns it and the bytes used.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let version = take(bytes, &mut pos, 1)?[0];
    if version != TENSOR_VERSION {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: TENSOR_VERSION as u32,
        });
    }
    let dtype = take(bytes, &mut pos, 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::DtypeMismatch(dtype));
    }
    let ndim = take(bytes, &mut pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = take(bytes, &mut pos, 4)?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows")))?;
    let payload = take(bytes, &mut pos, count)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((Tensor::new(shape, data)?, pos))
}

/// Reads a tensor that must fill `bytes` exactly.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Header(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t)?)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

fn encode_container<H: Serialize>(header: &H, blobs: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len =
        u32::try_from(json.len()).map_err(|_| Error::Header("header exceeds 4 GiB".into()))?;
    let mut out = len.to_le_bytes().to_vec();
    out.extend(json);
    for b in blobs {
        out.extend(encode_tensor(b)?);
    }
    Ok(out)
}

fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let mut pos = 0;
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(take(bytes, &mut pos, len)?)?;
    let version = header
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Header("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let mut blobs = Vec::new();
    while pos < bytes.len() {
        let (t, used) = decode_tensor_prefix(&bytes[pos..])?;
        blobs.push(t);
        pos += used;
    }
    Ok((header, blobs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub role: String,
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub seed: u64,
    pub hyperparameters: BTreeMap<String, f64>,
    /// Networks in blob order; each contributes weight then bias per layer.
    pub nets: Vec<NetSpec>,
}

fn net_spec(role: &str, net: &Net) -> NetSpec {
    NetSpec {
        role: role.to_string(),
        dims: net.dims(),
        activations: net.layers.iter().map(|l| l.activation).collect(),
    }
}

fn model_parts(model: &AnyModel) -> (ModelHeader, Vec<&Net>) {
    let mut hyper = BTreeMap::new();
    let (kind, latent_dim, seed, nets): (ModelKind, usize, u64, Vec<(&str, &Net)>) = match model {
        AnyModel::Vae(m) => {
            hyper.insert("gamma".to_string(), m.gamma);
            (
                ModelKind::Vae,
                m.latent_dim,
                m.seed,
                vec![("encoder", &m.encoder), ("decoder", &m.decoder)],
            )
        }
        AnyModel::Svae(m) => {
            hyper.insert("gamma".to_string(), m.gamma);
            (
                ModelKind::Svae,
                m.latent_dim,
                m.seed,
                vec![("encoder", &m.encoder), ("decoder", &m.decoder)],
            )
        }
        AnyModel::Gan(m) => {
            let mut nets = vec![
                ("generator", &m.generator),
                ("discriminator", &m.discriminator),
            ];
            if let Some(r) = &m.recoder {
                nets.push(("recoder", r));
            }
            (ModelKind::Gan, m.latent_dim, m.seed, nets)
        }
        AnyModel::StyleProxy(m) => {
            let mut nets = vec![
                ("mapping", &m.mapping),
                ("synthesis", &m.synthesis),
                ("discriminator", &m.discriminator),
            ];
            if let Some(r) = &m.w_recoder {
                nets.push(("w-recoder", r));
            }
            (ModelKind::StyleProxy, m.latent_dim, m.seed, nets)
        }
    };
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        kind,
        latent_dim,
        seed,
        hyperparameters: hyper,
        nets: nets.iter().map(|(r, n)| net_spec(r, n)).collect(),
    };
    (header, nets.into_iter().map(|(_, n)| n).collect())
}

pub fn encode_model(model: &AnyModel) -> Result<Vec<u8>> {
    let (header, nets) = model_parts(model);
    let blobs: Vec<&Tensor> = nets
        .iter()
        .flat_map(|n| n.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
        .collect();
    encode_container(&header, &blobs)
}

fn build_net(spec: &NetSpec, blobs: &mut std::vec::IntoIter<Tensor>) -> Result<Net> {
    if spec.dims.len() != spec.activations.len() + 1 || spec.activations.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} widths for {} activations",
            spec.role,
            spec.dims.len(),
            spec.activations.len()
        )));
    }
    let mut layers = Vec::new();
    for (l, act) in spec.activations.iter().enumerate() {
        let (d_in, d_out) = (spec.dims[l], spec.dims[l + 1]);
        let missing = || Error::ShapeMismatch(format!("{}: missing blob for layer {l}", spec.role));
        let weight = blobs.next().ok_or_else(missing)?;
        let bias = blobs.next().ok_or_else(missing)?;
        if weight.shape() != [d_out, d_in] || bias.shape() != [d_out] {
            return Err(Error::ShapeMismatch(format!(
                "{} layer {l}: header says {d_out}×{d_in}, blobs are {:?} and {:?}",
                spec.role,
                weight.shape(),
                bias.shape()
            )));
        }
        layers.push(Layer {
            weight,
            bias,
            activation: *act,
        });
    }
    Net::from_layers(layers).map_err(|e| Error::ShapeMismatch(format!("{}: {e}", spec.role)))
}

pub fn decode_model(bytes: &[u8]) -> Result<AnyModel> {
    let (value, blobs) = decode_container(bytes)?;
    let header: ModelHeader = serde_json::from_value(value)?;
    let mut it = blobs.into_iter();
    let mut nets: BTreeMap<String, Net> = BTreeMap::new();
    for spec in &header.nets {
        if nets
            .insert(spec.role.clone(), build_net(spec, &mut it)?)
            .is_some()
        {
            return Err(Error::Header(format!(
                "network role {} repeated",
                spec.role
            )));
        }
    }
    if it.next().is_some() {
        return Err(Error::ShapeMismatch(
            "more blobs than the header declares".into(),
        ));
    }
    let mut take_net = |role: &str| {
        nets.remove(role).ok_or_else(|| {
            Error::Header(format!(
                "{:?} model is missing its {role} network",
                header.kind
            ))
        })
    };
    let gamma = || {
        header
            .hyperparameters
            .get("gamma")
            .copied()
            .ok_or_else(|| Error::Header("missing gamma".into()))
    };
    let model = match header.kind {
        ModelKind::Vae => AnyModel::Vae(VaeModel::new(
            take_net("encoder")?,
            take_net("decoder")?,
            gamma()?,
            header.seed,
        )?),
        ModelKind::Svae => AnyModel::Svae(SvaeModel::new(
            take_net("encoder")?,
            take_net("decoder")?,
            gamma()?,
            header.seed,
        )?),
        ModelKind::Gan => {
            let (g, d) = (take_net("generator")?, take_net("discriminator")?);
            AnyModel::Gan(GanModel::new(g, d, take_net("recoder").ok(), header.seed)?)
        }
        ModelKind::StyleProxy => {
            let (m, s, d) = (
                take_net("mapping")?,
                take_net("synthesis")?,
                take_net("discriminator")?,
            );
            AnyModel::StyleProxy(StyleProxyModel::new(
                m,
                s,
                d,
                take_net("w-recoder").ok(),
                header.seed,
            )?)
        }
    };
    if !nets.is_empty() {
        return Err(Error::Header(format!(
            "unexpected networks {:?}",
            nets.keys().collect::<Vec<_>>()
        )));
    }
    let stored = match &model {
        AnyModel::Vae(m) => m.latent_dim,
        AnyModel::Svae(m) => m.latent_dim,
        AnyModel::Gan(m) => m.latent_dim,
        AnyModel::StyleProxy(m) => m.latent_dim,
    };
    if stored != header.latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "header latent_dim {} but networks imply {stored}",
            header.latent_dim
        )));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &AnyModel) -> Result<()> {
    Ok(fs::write(path, encode_model(model)?)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    decode_model(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    format_version: u32,
    kind: String,
    src_id: String,
    dst_id: String,
    src_dim: usize,
    dst_dim: usize,
    bias: bool,
    meta: FitMeta,
}

const MAP_KIND: &str = "linear-map";

pub fn encode_map(map: &LinearMap) -> Result<Vec<u8>> {
    let header = MapHeader {
        format_version: FORMAT_VERSION,
        kind: MAP_KIND.into(),
        src_id: map.src_id.clone(),
        dst_id: map.dst_id.clone(),
        src_dim: map.src_dim(),
        dst_dim: map.dst_dim(),
        bias: map.bias.is_some(),
        meta: map.meta.clone(),
    };
    let bias = map
        .bias
        .as_ref()
        .map(|b| Tensor::new(vec![b.len()], b.clone()))
        .transpose()?;
    let mut blobs = vec![&map.a];
    blobs.extend(bias.as_ref());
    encode_container(&header, &blobs)
}

pub fn decode_map(bytes: &[u8]) -> Result<LinearMap> {
    let (value, blobs) = decode_container(bytes)?;
    let h: MapHeader = serde_json::from_value(value)?;
    if h.kind != MAP_KIND {
        return Err(Error::Header(format!(
            "expected a {MAP_KIND} file, found {}",
            h.kind
        )));
    }
    let expected = 1 + usize::from(h.bias);
    if blobs.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{expected} blobs declared, {} present",
            blobs.len()
        )));
    }
    let mut it = blobs.into_iter();
    let a = it.next().expect("counted");
    if a.shape() != [h.dst_dim, h.src_dim] {
        return Err(Error::ShapeMismatch(format!(
            "map header says {}×{}, blob is {:?}",
            h.dst_dim,
            h.src_dim,
            a.shape()
        )));
    }
    let bias = match it.next() {
        Some(b) if b.shape() == [h.dst_dim] => Some(b.into_data()),
        Some(b) => {
            return Err(Error::ShapeMismatch(format!(
                "bias blob {:?} for {} outputs",
                b.shape(),
                h.dst_dim
            )))
        }
        None => None,
    };
    Ok(LinearMap {
        a,
        bias,
        src_id: h.src_id,
        dst_id: h.dst_id,
        meta: h.meta,
    })
}

pub fn save_map(path: impl AsRef<Path>, map: &LinearMap) -> Result<()> {
    Ok(fs::write(path, encode_map(map)?)?)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<LinearMap> {
    decode_map(&fs::read(path)?)
}

/// Binary 8-bit PGM of a `h × w` image; each value maps to `floor(255·v + 0.5)`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [n] if *n == SIDE * SIDE => (SIDE, SIDE),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "PGM needs a 2-D image, got {s:?}"
            )))
        }
    };
    if let Some(v) = image.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "pixel value {v} outside [0, 1]"
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| libm::floor(255.0 * v as f64 + 0.5) as u8),
    );
    Ok(out)
}

pub fn write_image_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(image)?)?)
}

pub const DATASET_IMAGES: &str = "images.lsat";
pub const DATASET_MANIFEST: &str = "manifest.json";

/// Images as a tensor file plus a JSON manifest.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_tensor(dir.join(DATASET_IMAGES), &dataset.images)?;
    fs::write(
        dir.join(DATASET_MANIFEST),
        serde_json::to_string_pretty(&dataset.manifest())? + "\n",
    )?;
    Ok(())
}

/// Factors are regenerated from the manifest seed; the checksum then
/// verifies images and factors together.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(DATASET_MANIFEST))?)?;
    let images = read_tensor(dir.join(DATASET_IMAGES))?;
    if images.shape() != [manifest.n, SIDE, SIDE] {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares {} images of {SIDE}×{SIDE}, file holds {:?}",
            manifest.n,
            images.shape()
        )));
    }
    let factors = sample_factors(&mut RngState::new(manifest.seed), manifest.n)?;
    let ds = Dataset {
        images,
        factors,
        seed: manifest.seed,
    };
    if ds.checksum() != manifest.checksum {
        return Err(Error::Header(format!(
            "dataset in {} fails its checksum",
            dir.display()
        )));
    }
    Ok(ds)
}

pub fn save_support_set(path: impl AsRef<Path>, s: &SupportSet) -> Result<()> {
    Ok(fs::write(path, s.to_json()? + "\n")?)
}

pub fn load_support_set(path: impl AsRef<Path>) -> Result<SupportSet> {
    SupportSet::from_json(&fs::read_to_string(path)?)
}
