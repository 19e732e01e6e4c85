//! Bit-exact on-disk formats and the flat key=value configuration file.
//!
//! Every binary format is a UTF-8 text header (one `key value...` line per
//! field, closed by a line reading `end`) followed by a raw little-endian
//! f32 payload. Headers are plain text so artifacts stay inspectable;
//! payloads are fixed-endian so files are platform independent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{make_circular_geometry, ScanGeometry};
use crate::math::Vec3;
use crate::model::{ModelConfig, ModelParams};
use crate::projector::ProjectionStack;
use crate::scalar::Scalar;
use crate::volume::VoxelVolume;

pub const VOLUME_MAGIC: &str = "GSDIF-VOL v1";
pub const PROJ_MAGIC: &str = "GSDIF-PROJ v1";
pub const CHECKPOINT_MAGIC: &str = "GSDIF-CKPT v1";

const HEADER_END: &str = "end";

/// Parsed text header: magic line plus ordered `key values` rows.
struct Header {
    fields: Vec<(String, Vec<String>)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&[String]> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Parse(format!("missing header field '{key}'")))
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let vals = self.get(key)?;
        if vals.len() != 1 {
            return Err(Error::Parse(format!(
                "field '{key}' expects one value, got {}",
                vals.len()
            )));
        }
        vals[0]
            .parse()
            .map_err(|_| Error::Parse(format!("cannot parse '{}' for field '{key}'", vals[0])))
    }

    fn triple(&self, key: &str) -> Result<[f64; 3]> {
        let vals = self.get(key)?;
        if vals.len() != 3 {
            return Err(Error::Parse(format!(
                "field '{key}' expects three values, got {}",
                vals.len()
            )));
        }
        let mut out = [0.0; 3];
        for (o, v) in out.iter_mut().zip(vals) {
            *o = v
                .parse()
                .map_err(|_| Error::Parse(format!("cannot parse '{v}' for field '{key}'")))?;
        }
        Ok(out)
    }
}

/// Split a file into (header, payload) and verify the magic line.
fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header, &'a [u8])> {
    // The header is ASCII lines; find the terminating "end" line.
    let mut offset = 0usize;
    let mut lines: Vec<&str> = Vec::new();
    let mut payload_start = None;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("unterminated header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Parse("non-UTF-8 header line".into()))?;
        offset += nl + 1;
        if line == HEADER_END {
            payload_start = Some(offset);
            break;
        }
        lines.push(line);
    }
    let payload_start =
        payload_start.ok_or_else(|| Error::Parse("header missing 'end' line".into()))?;
    if lines.is_empty() {
        return Err(Error::Parse("empty header".into()));
    }
    if lines[0] != magic {
        return Err(Error::BadMagic {
            expected: magic.to_string(),
            found: lines[0].chars().take(32).collect(),
        });
    }
    let mut fields = Vec::new();
    for line in &lines[1..] {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace().map(str::to_string);
        let key = parts
            .next()
            .ok_or_else(|| Error::Parse("blank header field".into()))?;
        fields.push((key, parts.collect()));
    }
    Ok((Header { fields }, &bytes[payload_start..]))
}

fn check_payload(payload: &[u8], expected_floats: usize) -> Result<()> {
    let expected = expected_floats * 4;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Parse(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }
    Ok(())
}

fn floats_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn save_volume<P: AsRef<Path>>(path: P, vol: &VoxelVolume) -> Result<()> {
    let mut out = String::new();
    out.push_str(VOLUME_MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "dims {} {} {}\n",
        vol.dims.0, vol.dims.1, vol.dims.2
    ));
    out.push_str(&format!(
        "spacing_mm {} {} {}\n",
        vol.spacing[0], vol.spacing[1], vol.spacing[2]
    ));
    out.push_str(&format!(
        "origin_mm {} {} {}\n",
        vol.origin[0], vol.origin[1], vol.origin[2]
    ));
    out.push_str("dtype f32le\n");
    out.push_str(HEADER_END);
    out.push('\n');
    let mut bytes = out.into_bytes();
    bytes.extend(floats_to_bytes(&vol.data));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_volume<P: AsRef<Path>>(path: P) -> Result<VoxelVolume> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse_header(&bytes, VOLUME_MAGIC)?;
    let dims_raw = header.get("dims")?;
    if dims_raw.len() != 3 {
        return Err(Error::Parse("dims expects three values".into()));
    }
    let dims: Vec<usize> = dims_raw
        .iter()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad dim '{v}'")))
        })
        .collect::<Result<_>>()?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("zero volume dim in {dims:?}")));
    }
    let dtype: String = header.scalar("dtype")?;
    if dtype != "f32le" {
        return Err(Error::Parse(format!("unsupported dtype '{dtype}'")));
    }
    let spacing = header.triple("spacing_mm")?;
    let origin = header.triple("origin_mm")?;
    if spacing.iter().any(|&s| s <= 0.0) {
        return Err(Error::ShapeMismatch(format!("non-positive spacing {spacing:?}")));
    }
    check_payload(payload, dims[0] * dims[1] * dims[2])?;
    Ok(VoxelVolume {
        dims: (dims[0], dims[1], dims[2]),
        spacing,
        origin,
        data: bytes_to_floats(payload),
    })
}

pub fn save_projections<P: AsRef<Path>>(path: P, stack: &ProjectionStack) -> Result<()> {
    let g = &stack.geometry;
    let mut out = String::new();
    out.push_str(PROJ_MAGIC);
    out.push('\n');
    out.push_str(&format!("n_views {}\n", g.n_views));
    out.push_str(&format!("sid_mm {}\n", g.sid));
    out.push_str(&format!("sdd_mm {}\n", g.sdd));
    out.push_str(&format!("det_nu {}\n", g.det_shape.0));
    out.push_str(&format!("det_nv {}\n", g.det_shape.1));
    out.push_str(&format!("det_spacing_mm {}\n", g.det_spacing));
    out.push_str(HEADER_END);
    out.push('\n');
    let mut bytes = out.into_bytes();
    for img in &stack.data {
        bytes.extend(floats_to_bytes(img));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_projections<P: AsRef<Path>>(path: P) -> Result<ProjectionStack> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse_header(&bytes, PROJ_MAGIC)?;
    let n_views: usize = header.scalar("n_views")?;
    let sid: f64 = header.scalar("sid_mm")?;
    let sdd: f64 = header.scalar("sdd_mm")?;
    let n_u: usize = header.scalar("det_nu")?;
    let n_v: usize = header.scalar("det_nv")?;
    let det_spacing: f64 = header.scalar("det_spacing_mm")?;
    let geometry = make_circular_geometry(n_views, sid, sdd, (n_u, n_v), det_spacing)?;
    check_payload(payload, n_views * n_u * n_v)?;
    let flat = bytes_to_floats(payload);
    let data = flat.chunks(n_u * n_v).map(|c| c.to_vec()).collect();
    Ok(ProjectionStack { geometry, data })
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

fn config_echo(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("k_views {}\n", cfg.k_views));
    out.push_str(&format!("det_nu {}\n", cfg.det_shape.0));
    out.push_str(&format!("det_nv {}\n", cfg.det_shape.1));
    out.push_str(&format!("c {}\n", cfg.c));
    out.push_str(&format!("c_t {}\n", cfg.c_t));
    out.push_str(&format!("c_g {}\n", cfg.c_g));
    out.push_str(&format!("v {}\n", cfg.v));
    out.push_str(&format!("enable_gaussians {}\n", bool_str(cfg.enable_gaussians)));
    out.push_str(&format!(
        "encoder_widths {} {} {} {}\n",
        cfg.encoder_widths[0], cfg.encoder_widths[1], cfg.encoder_widths[2], cfg.encoder_widths[3]
    ));
    let fmt_list = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&format!(
        "gauss_head_hidden {}\n",
        fmt_list(&cfg.gauss_head_hidden)
    ));
    out.push_str(&format!(
        "atten_head_hidden {}\n",
        fmt_list(&cfg.atten_head_hidden)
    ));
    out.push_str(&format!("nearest_k {}\n", cfg.nearest_k));
    out.push_str(&format!("epochs {}\n", cfg.epochs));
    out.push_str(&format!("points_per_sample {}\n", cfg.points_per_sample));
    out.push_str(&format!("lr0 {}\n", cfg.lr0));
    out.push_str(&format!("momentum {}\n", cfg.momentum));
    out
}

fn config_from_header(header: &Header) -> Result<ModelConfig> {
    let usize_list = |key: &str| -> Result<Vec<usize>> {
        header
            .get(key)?
            .iter()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad value '{v}' for '{key}'")))
            })
            .collect()
    };
    let widths = usize_list("encoder_widths")?;
    if widths.len() != 4 {
        return Err(Error::Parse("encoder_widths expects four values".into()));
    }
    let gauss_raw: String = header.scalar("enable_gaussians")?;
    let enable_gaussians = match gauss_raw.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(Error::Parse(format!("bad boolean '{other}'"))),
    };
    Ok(ModelConfig {
        k_views: header.scalar("k_views")?,
        det_shape: (header.scalar("det_nu")?, header.scalar("det_nv")?),
        c: header.scalar("c")?,
        c_t: header.scalar("c_t")?,
        c_g: header.scalar("c_g")?,
        v: header.scalar("v")?,
        enable_gaussians,
        encoder_widths: [widths[0], widths[1], widths[2], widths[3]],
        gauss_head_hidden: usize_list("gauss_head_hidden")?,
        atten_head_hidden: usize_list("atten_head_hidden")?,
        nearest_k: header.scalar("nearest_k")?,
        epochs: header.scalar("epochs")?,
        points_per_sample: header.scalar("points_per_sample")?,
        lr0: header.scalar("lr0")?,
        momentum: header.scalar("momentum")?,
    })
}

pub fn save_checkpoint<P: AsRef<Path>, T: Scalar>(
    path: P,
    params: &mut ModelParams<T>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&config_echo(&params.config));
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    params.for_each_param(&mut |name, p| {
        tensors.push((name.to_string(), p.value.shape.clone(), p.value.to_f32_vec()));
    });
    for (name, shape, _) in &tensors {
        let dims = shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!("tensor {name} {dims}\n"));
    }
    out.push_str(HEADER_END);
    out.push('\n');
    let mut bytes = out.into_bytes();
    for (_, _, data) in &tensors {
        bytes.extend(floats_to_bytes(data));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>, T: Scalar>(path: P) -> Result<ModelParams<T>> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse_header(&bytes, CHECKPOINT_MAGIC)?;
    let config = config_from_header(&header)?;
    // Saved tensor manifest, in file order.
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    for (key, vals) in &header.fields {
        if key != "tensor" {
            continue;
        }
        if vals.is_empty() {
            return Err(Error::Parse("tensor line missing name".into()));
        }
        let name = vals[0].clone();
        let shape = vals[1..]
            .iter()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad tensor dim '{v}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        manifest.push((name, shape));
    }
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    check_payload(payload, total)?;
    let flat = bytes_to_floats(payload);

    let mut params = ModelParams::<T>::init(config, 0)?;
    let mut slices: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let mut offset = 0usize;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        if slices
            .insert(name.clone(), (shape, flat[offset..offset + n].to_vec()))
            .is_some()
        {
            return Err(Error::ShapeMismatch(format!("duplicate tensor '{name}'")));
        }
        offset += n;
    }
    let mut missing: Vec<String> = Vec::new();
    let mut error: Option<Error> = None;
    params.for_each_param(&mut |name, p| {
        if error.is_some() {
            return;
        }
        match slices.remove(name) {
            Some((shape, data)) => {
                if shape != p.value.shape {
                    error = Some(Error::ShapeMismatch(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        shape, p.value.shape
                    )));
                    return;
                }
                p.value = Tensor::from_f32_slice(&shape, &data).expect("shape checked");
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !slices.is_empty() {
        let extra: Vec<String> = slices.keys().cloned().collect();
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(params)
}

/// Flat sectioned key=value configuration text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    /// section -> key -> value, both ordered for stable serialization.
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let section = current
                .clone()
                .ok_or_else(|| Error::Parse(format!("config line {}: key before any [section]", lineno + 1)))?;
            sections
                .entry(section)
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { sections })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, kv) in &self.sections {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, section: &str, key: &str) -> Result<&str> {
        self.sections
            .get(section)
            .and_then(|kv| kv.get(key))
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("missing config key [{section}] {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.get(section, key)?;
        raw.parse().map_err(|_| {
            Error::Parse(format!("cannot parse [{section}] {key} = '{raw}'"))
        })
    }

    pub fn get_usize_list(&self, section: &str, key: &str) -> Result<Vec<usize>> {
        self.get(section, key)?
            .split_whitespace()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad value '{v}' in [{section}] {key}")))
            })
            .collect()
    }

    fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }
}

/// Desk-scale default configuration with every tunable present.
pub fn default_config() -> Config {
    let m = ModelConfig::default();
    let t = crate::tto::TtoConfig::default();
    let s = crate::baselines::SartConfig::default();
    let mut c = Config::default();

    c.set("geometry", "n_views", m.k_views);
    c.set("geometry", "sid_mm", 1000.0);
    c.set("geometry", "sdd_mm", 1500.0);
    c.set("geometry", "det_nu", m.det_shape.0);
    c.set("geometry", "det_nv", m.det_shape.1);
    c.set("geometry", "det_spacing_mm", 3.0);

    c.set("model", "c", m.c);
    c.set("model", "c_t", m.c_t);
    c.set("model", "c_g", m.c_g);
    c.set("model", "v", m.v);
    c.set("model", "enable_gaussians", bool_str(m.enable_gaussians));
    c.set("model", "encoder_widths", "16 32 64 128");
    c.set("model", "gauss_head_hidden", "128");
    c.set("model", "atten_head_hidden", "64 64");
    c.set("model", "nearest_k", m.nearest_k);

    c.set("training", "epochs", m.epochs);
    c.set("training", "points_per_sample", m.points_per_sample);
    c.set("training", "lr0", m.lr0);
    c.set("training", "momentum", m.momentum);
    c.set("training", "drr_n_r", 512);

    c.set("tto", "steps", t.steps);
    c.set("tto", "lr", t.lr);
    c.set("tto", "rays_per_step", t.rays_per_step);
    c.set("tto", "n_r", t.n_r);

    c.set("sart", "iterations", s.iterations);
    c.set("sart", "relaxation", s.relaxation);
    c.set("sart", "n_r", s.n_r);

    c
}

/// Build the scan geometry from the `[geometry]` section.
pub fn geometry_from_config(c: &Config) -> Result<ScanGeometry> {
    make_circular_geometry(
        c.get_parsed("geometry", "n_views")?,
        c.get_parsed("geometry", "sid_mm")?,
        c.get_parsed("geometry", "sdd_mm")?,
        (
            c.get_parsed("geometry", "det_nu")?,
            c.get_parsed("geometry", "det_nv")?,
        ),
        c.get_parsed("geometry", "det_spacing_mm")?,
    )
}

/// Build the model configuration from `[geometry]`, `[model]`, `[training]`.
pub fn model_config_from_config(c: &Config) -> Result<ModelConfig> {
    let widths = c.get_usize_list("model", "encoder_widths")?;
    if widths.len() != 4 {
        return Err(Error::Parse("encoder_widths expects four values".into()));
    }
    let cfg = ModelConfig {
        k_views: c.get_parsed("geometry", "n_views")?,
        det_shape: (
            c.get_parsed("geometry", "det_nu")?,
            c.get_parsed("geometry", "det_nv")?,
        ),
        c: c.get_parsed("model", "c")?,
        c_t: widths[3],
        c_g: c.get_parsed("model", "c_g")?,
        v: c.get_parsed("model", "v")?,
        enable_gaussians: c.get("model", "enable_gaussians")? == "true",
        encoder_widths: [widths[0], widths[1], widths[2], widths[3]],
        gauss_head_hidden: c.get_usize_list("model", "gauss_head_hidden")?,
        atten_head_hidden: c.get_usize_list("model", "atten_head_hidden")?,
        nearest_k: c.get_parsed("model", "nearest_k")?,
        epochs: c.get_parsed("training", "epochs")?,
        points_per_sample: c.get_parsed("training", "points_per_sample")?,
        lr0: c.get_parsed("training", "lr0")?,
        momentum: c.get_parsed("training", "momentum")?,
    };
    // c_t mirrors the last encoder width; an explicit key may override.
    let cfg = match c.get_parsed::<usize>("model", "c_t") {
        Ok(c_t) => ModelConfig { c_t, ..cfg },
        Err(_) => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn tto_config_from_config(c: &Config) -> Result<crate::tto::TtoConfig> {
    Ok(crate::tto::TtoConfig {
        steps: c.get_parsed("tto", "steps")?,
        lr: c.get_parsed("tto", "lr")?,
        rays_per_step: c.get_parsed("tto", "rays_per_step")?,
        n_r: c.get_parsed("tto", "n_r")?,
    })
}

pub fn sart_config_from_config(c: &Config) -> Result<crate::baselines::SartConfig> {
    Ok(crate::baselines::SartConfig {
        iterations: c.get_parsed("sart", "iterations")?,
        relaxation: c.get_parsed("sart", "relaxation")?,
        n_r: c.get_parsed("sart", "n_r")?,
    })
}

/// The Gaussian-field / reconstruction bounding box implied by a volume
/// described by dims and spacing centered on the isocenter.
pub fn centered_bounds(dims: (usize, usize, usize), spacing: Vec3) -> (Vec3, Vec3) {
    VoxelVolume::centered(dims, spacing).bounds()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, random_phantom_spec};
    use tempfile::tempdir;

    #[test]
    fn volume_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.vol");
        let vol =
            generate_phantom(&random_phantom_spec(3, 20.0), (16, 16, 16), [2.5; 3]).unwrap();
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(vol, back);
        // Bytes on disk are stable across a rewrite.
        let b1 = std::fs::read(&path).unwrap();
        save_volume(&path, &back).unwrap();
        assert_eq!(b1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.vol");
        std::fs::write(&path, b"XXXX\nend\n").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::BadMagic { .. })));
        assert!(matches!(load_projections(&path), Err(Error::BadMagic { .. })));
        assert!(matches!(
            load_checkpoint::<_, f32>(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let vol =
            generate_phantom(&random_phantom_spec(4, 20.0), (8, 8, 8), [2.0; 3]).unwrap();
        save_volume(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn projection_round_trip() {
        use crate::geometry::make_circular_geometry;
        use crate::projector::drr;
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.proj");
        let vol =
            generate_phantom(&random_phantom_spec(5, 20.0), (8, 8, 8), [4.0; 3]).unwrap();
        let geom = make_circular_geometry(3, 1000.0, 1500.0, (12, 10), 6.0).unwrap();
        let stack = drr(&vol, &geom, 32).unwrap();
        save_projections(&path, &stack).unwrap();
        let back = load_projections(&path).unwrap();
        assert_eq!(stack, back);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_errors() {
        use crate::model::{ModelConfig, ModelParams};
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            k_views: 2,
            det_shape: (16, 16),
            c: 6,
            c_t: 16,
            c_g: 4,
            v: 2,
            enable_gaussians: true,
            encoder_widths: [4, 6, 8, 16],
            gauss_head_hidden: vec![16],
            atten_head_hidden: vec![12],
            nearest_k: 3,
            epochs: 1,
            points_per_sample: 8,
            lr0: 0.01,
            momentum: 0.98,
        };
        let mut params: ModelParams<f32> = ModelParams::init(cfg, 77).unwrap();
        save_checkpoint(&path, &mut params).unwrap();
        let mut back: ModelParams<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, params.config);
        assert_eq!(back.enc[0].w.value.data, params.enc[0].w.value.data);
        assert_eq!(
            back.atten_head.layers[1].b.value.data,
            params.atten_head.layers[1].b.value.data
        );
        // Save of the loaded model is byte-identical.
        let b1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &mut back).unwrap();
        assert_eq!(b1, std::fs::read(&path2).unwrap());

        // Renaming a tensor makes the manifest inconsistent.
        let text = String::from_utf8_lossy(&b1).to_string();
        let corrupted = text.replacen("tensor enc0.w", "tensor enc0.q", 1);
        assert_ne!(text, corrupted);
        let path3 = dir.path().join("bad.ckpt");
        let split = b1.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let mut bytes = corrupted.as_bytes()[..split].to_vec();
        bytes.extend_from_slice(&b1[split..]);
        std::fs::write(&path3, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<_, f32>(&path3),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_round_trip() {
        let c = default_config();
        let text = c.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(c, back);
        assert!(geometry_from_config(&c).is_ok());
        assert!(model_config_from_config(&c).is_ok());
        assert!(tto_config_from_config(&c).is_ok());
        assert!(sart_config_from_config(&c).is_ok());
    }

    #[test]
    fn config_parse_errors() {
        assert!(Config::parse("key = 1\n").is_err());
        assert!(Config::parse("[a]\nnot a pair\n").is_err());
        let c = Config::parse("[a]\nx = 1\n# comment\n\n").unwrap();
        assert_eq!(c.get("a", "x").unwrap(), "1");
        assert!(c.get("a", "y").is_err());
    }
}
