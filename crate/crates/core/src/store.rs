//! Activation storage: NPY v1.0 arrays (one file per layer) and the JSON
//! dataset manifest that groups the layers of one model.
//!
//! Only the subset of NPY needed for activations is supported: version 1.0,
//! `f4`/`f8` floats of either byte order, C or Fortran order. Fortran-order
//! files are transposed to row-major on read. Files are always written as
//! little-endian `f4`, C order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The NPY magic string.
pub const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Raw output of one layer for `n` examples, `n×p` or `n×c×h×w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer_id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    /// Set when the source file held `f8` data that was narrowed to `f4`.
    pub narrowed: bool,
}

impl ActivationTensor {
    pub fn new(layer_id: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let tensor = ActivationTensor {
            layer_id: layer_id.into(),
            shape,
            values,
            narrowed: false,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    /// Number of examples (leading dimension).
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Product of the non-leading dimensions.
    pub fn features(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(&self.shape)?;
        let expected: usize = self.shape.iter().product();
        if expected != self.values.len() {
            return Err(Error::Validation(format!(
                "shape {:?} implies {} values, found {}",
                self.shape,
                expected,
                self.values.len()
            )));
        }
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value {
                index,
                value: self.values[index] as f64,
            });
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::Validation(format!(
            "activation tensors must be rank 2 or 4, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Validation(format!(
            "shape entries must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FloatKind {
    F4,
    F8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

/// Parsed NPY header.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyHeader {
    pub descr: String,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Byte offset of the first data byte.
    pub data_offset: usize,
}

impl NpyHeader {
    fn dtype(&self) -> Result<(FloatKind, ByteOrder)> {
        let d = self.descr.as_str();
        if d.len() < 2 {
            return Err(Error::Dtype(self.descr.clone()));
        }
        let (order, kind) = d.split_at(1);
        let order = match order {
            "<" | "=" | "|" => ByteOrder::Little,
            ">" => ByteOrder::Big,
            _ => return Err(Error::Dtype(self.descr.clone())),
        };
        let kind = match kind {
            "f4" => FloatKind::F4,
            "f8" => FloatKind::F8,
            _ => return Err(Error::Dtype(self.descr.clone())),
        };
        Ok((kind, order))
    }
}

/// Parses the magic, version and header dict of an NPY buffer.
pub fn parse_header(bytes: &[u8]) -> Result<NpyHeader> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Format(format!(
            "unsupported NPY version {major}.{minor} (only 1.0)"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = 10 + header_len;
    if bytes.len() < data_offset {
        return Err(Error::Format("truncated NPY header".into()));
    }
    let text = std::str::from_utf8(&bytes[10..data_offset])
        .map_err(|_| Error::Format("NPY header is not ASCII".into()))?;
    let dict = HeaderDict::parse(text)?;
    Ok(NpyHeader {
        descr: dict.descr,
        fortran_order: dict.fortran_order,
        shape: dict.shape,
        data_offset,
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the python-literal dict, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (3, 2), }`.
    fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("bad NPY header dict ({msg}): {text:?}"));
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| bad("not a dict"))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
            let after = after
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| bad("expected ':'"))?
                .trim_start();
            let after = match key {
                "descr" => {
                    let (v, a) = take_quoted(after).ok_or_else(|| bad("descr"))?;
                    descr = Some(v.to_owned());
                    a
                }
                "fortran_order" => {
                    if let Some(a) = after.strip_prefix("True") {
                        fortran_order = Some(true);
                        a
                    } else if let Some(a) = after.strip_prefix("False") {
                        fortran_order = Some(false);
                        a
                    } else {
                        return Err(bad("fortran_order"));
                    }
                }
                "shape" => {
                    let inner_end = after.find(')').ok_or_else(|| bad("shape"))?;
                    let inner = after
                        .strip_prefix('(')
                        .ok_or_else(|| bad("shape"))?
                        .get(..inner_end - 1)
                        .ok_or_else(|| bad("shape"))?;
                    let dims = inner
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim_end_matches('L').parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("shape entry"))?;
                    shape = Some(dims);
                    &after[inner_end + 1..]
                }
                _ => return Err(bad("unknown key")),
            };
            rest = after.trim_start();
            if let Some(r) = rest.strip_prefix(',') {
                rest = r.trim_start();
            } else if !rest.is_empty() {
                return Err(bad("expected ','"));
            }
        }
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| bad("missing descr"))?,
            fortran_order: fortran_order.ok_or_else(|| bad("missing fortran_order"))?,
            shape: shape.ok_or_else(|| bad("missing shape"))?,
        })
    }
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let end = s[1..].find(quote)? + 1;
    Some((&s[1..end], &s[end + 1..]))
}

/// Decodes a complete NPY buffer into a tensor.
pub fn decode_npy(bytes: &[u8], layer_id: &str) -> Result<ActivationTensor> {
    let header = parse_header(bytes)?;
    let (kind, order) = header.dtype()?;
    validate_shape(&header.shape).map_err(|e| match e {
        Error::Validation(m) => Error::Format(m),
        other => other,
    })?;
    let count: usize = header.shape.iter().product();
    let width = match kind {
        FloatKind::F4 => 4,
        FloatKind::F8 => 8,
    };
    let data = &bytes[header.data_offset..];
    if data.len() != count * width {
        return Err(Error::Format(format!(
            "header shape {:?} needs {} bytes of data, file holds {}",
            header.shape,
            count * width,
            data.len()
        )));
    }

    let mut values: Vec<f32> = Vec::with_capacity(count);
    for chunk in data.chunks_exact(width) {
        let v = match (kind, order) {
            (FloatKind::F4, ByteOrder::Little) => f32::from_le_bytes(chunk.try_into().unwrap()),
            (FloatKind::F4, ByteOrder::Big) => f32::from_be_bytes(chunk.try_into().unwrap()),
            (FloatKind::F8, ByteOrder::Little) => {
                f64::from_le_bytes(chunk.try_into().unwrap()) as f32
            }
            (FloatKind::F8, ByteOrder::Big) => f64::from_be_bytes(chunk.try_into().unwrap()) as f32,
        };
        values.push(v);
    }
    if header.fortran_order {
        values = fortran_to_c(&values, &header.shape);
    }
    // Non-finite check on the row-major layout so the reported index is stable.
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Value {
            index,
            value: values[index] as f64,
        });
    }
    Ok(ActivationTensor {
        layer_id: layer_id.to_owned(),
        shape: header.shape,
        values,
        narrowed: kind == FloatKind::F8,
    })
}

fn fortran_to_c(values: &[f32], shape: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    // Column-major strides.
    let mut f_strides = vec![1usize; rank];
    for k in 1..rank {
        f_strides[k] = f_strides[k - 1] * shape[k - 1];
    }
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..values.len() {
        let offset: usize = idx.iter().zip(&f_strides).map(|(i, s)| i * s).sum();
        out.push(values[offset]);
        // Increment the row-major multi-index.
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

/// Encodes a tensor as NPY v1.0, `<f4`, C order.
pub fn encode_npy(tensor: &ActivationTensor) -> Result<Vec<u8>> {
    tensor.validate()?;
    let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // Pad so that magic + version + len + header is a multiple of 64, ending in '\n'.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + tensor.values.len() * 4);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &tensor.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads one layer file. The layer id is taken from the file stem.
pub fn read_array(path: impl AsRef<Path>) -> Result<ActivationTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let layer_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tensor = decode_npy(&bytes, &layer_id)?;
    if tensor.narrowed {
        log::warn!("{}: f8 data narrowed to f4", path.display());
    }
    Ok(tensor)
}

/// Reads only the header of an NPY file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 10];
    file.read_exact(&mut prefix)
        .map_err(|_| Error::Format(format!("{}: too short for NPY", path.display())))?;
    let header_len = u16::from_le_bytes([prefix[8], prefix[9]]) as usize;
    let mut buf = prefix.to_vec();
    buf.resize(10 + header_len, 0);
    file.read_exact(&mut buf[10..])
        .map_err(|_| Error::Format(format!("{}: truncated NPY header", path.display())))?;
    parse_header(&buf)
}

pub fn write_array(tensor: &ActivationTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_npy(tensor)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// One layer entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    /// Path of the NPY file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub shape: Vec<usize>,
}

/// A model: its ordered layer files plus optional per-example metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model_name: String,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<BTreeMap<i64, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_assets: Option<Vec<String>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Example count shared by all layers.
    pub fn n(&self) -> usize {
        self.layers.first().map(|l| l.shape[0]).unwrap_or(0)
    }

    pub fn layer_path(&self, entry: &LayerEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn layer(&self, id: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Loads the tensor of a layer, keeping the manifest's layer id.
    pub fn load_layer(&self, entry: &LayerEntry) -> Result<ActivationTensor> {
        let mut tensor = read_array(self.layer_path(entry))?;
        tensor.layer_id = entry.id.clone();
        if tensor.shape != entry.shape {
            return Err(Error::manifest(
                Some(&entry.id),
                format!("file shape {:?} != manifest shape {:?}", tensor.shape, entry.shape),
            ));
        }
        Ok(tensor)
    }

    /// Checks every manifest invariant, opening each layer header.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::manifest(None, "manifest lists no layers"));
        }
        let mut seen = std::collections::HashSet::new();
        let n = self.layers[0].shape.first().copied().unwrap_or(0);
        for entry in &self.layers {
            let id = Some(entry.id.as_str());
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::manifest(id, "duplicate layer id"));
            }
            validate_shape(&entry.shape).map_err(|e| Error::manifest(id, e.to_string()))?;
            let path = self.layer_path(entry);
            if !path.is_file() {
                return Err(Error::manifest(
                    id,
                    format!("layer file {} does not exist", path.display()),
                ));
            }
            let header = read_header(&path).map_err(|e| Error::manifest(id, e.to_string()))?;
            if header.shape != entry.shape {
                return Err(Error::manifest(
                    id,
                    format!(
                        "header shape {:?} does not match manifest shape {:?}",
                        header.shape, entry.shape
                    ),
                ));
            }
            if entry.shape[0] != n {
                return Err(Error::manifest(
                    id,
                    format!("layer has n={} but first layer has n={n}", entry.shape[0]),
                ));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::manifest(
                    None,
                    format!("labels has length {} but n={n}", labels.len()),
                ));
            }
        }
        if let Some(assets) = &self.example_assets {
            if assets.len() != n {
                return Err(Error::manifest(
                    None,
                    format!("example_assets has length {} but n={n}", assets.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::manifest(None, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Loads and eagerly validates a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::manifest(None, format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_with(descr: &str, fortran: bool, shape: &str, data: &[u8]) -> Vec<u8> {
        let header = format!("{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}\n",
            if fortran { "True" } else { "False" });
        let mut out = NPY_MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f4_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn reads_declared_header() {
        let bytes = npy_with("<f4", false, "(3, 2)", &f4_bytes(&[1., 2., 3., 4., 5., 6.]));
        let t = decode_npy(&bytes, "l").unwrap();
        assert_eq!(t.shape, vec![3, 2]);
        assert_eq!(t.values, vec![1., 2., 3., 4., 5., 6.]);
        assert!(!t.narrowed);
    }

    #[test]
    fn fortran_order_is_transposed() {
        // Column-major storage of [[1,2],[3,4],[5,6]].
        let bytes = npy_with("<f4", true, "(3, 2)", &f4_bytes(&[1., 3., 5., 2., 4., 6.]));
        let t = decode_npy(&bytes, "l").unwrap();
        assert_eq!(t.values, vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn f8_is_narrowed() {
        let data: Vec<u8> = [0.5f64, -1.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        let t = decode_npy(&npy_with("<f8", false, "(2, 1)", &data), "l").unwrap();
        assert!(t.narrowed);
        assert_eq!(t.values, vec![0.5, -1.25]);
    }

    #[test]
    fn big_endian_f4() {
        let data: Vec<u8> = [1.5f32, 2.0].iter().flat_map(|v| v.to_be_bytes()).collect();
        let t = decode_npy(&npy_with(">f4", false, "(2, 1)", &data), "l").unwrap();
        assert_eq!(t.values, vec![1.5, 2.0]);
    }

    #[test]
    fn length_mismatch_is_format_error() {
        let bytes = npy_with("<f4", false, "(2, 2)", &f4_bytes(&[1., 2., 3.]));
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Format(_))));
        let bytes = npy_with("<f4", false, "(2, 2)", &f4_bytes(&[1., 2., 3., 4., 5.]));
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = npy_with("<f4", false, "(1, 1)", &f4_bytes(&[1.]));
        bytes[1] = b'X';
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Format(_))));
        let mut bytes = npy_with("<f4", false, "(1, 1)", &f4_bytes(&[1.]));
        bytes[6] = 2;
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Format(_))));
        assert!(matches!(decode_npy(b"\x93NUM", "l"), Err(Error::Format(_))));
    }

    #[test]
    fn integer_dtype_rejected() {
        let bytes = npy_with("<i4", false, "(1, 1)", &[0, 0, 0, 0]);
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Dtype(_))));
    }

    #[test]
    fn nan_reports_first_index() {
        let bytes = npy_with("<f4", false, "(2, 2)", &f4_bytes(&[1., 2., f32::NAN, f32::INFINITY]));
        match decode_npy(&bytes, "l") {
            Err(Error::Value { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected value error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_rank_rejected() {
        let bytes = npy_with("<f4", false, "(3,)", &f4_bytes(&[1., 2., 3.]));
        assert!(matches!(decode_npy(&bytes, "l"), Err(Error::Format(_))));
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let t = ActivationTensor::new("x", vec![2, 3, 4, 4], vec![0.25; 96]).unwrap();
        let bytes = encode_npy(&t).unwrap();
        let header = parse_header(&bytes).unwrap();
        assert_eq!(header.data_offset % 64, 0);
        assert_eq!(header.descr, "<f4");
        assert_eq!(bytes[header.data_offset - 1], b'\n');
    }

    #[test]
    fn empty_shape_is_validation_error() {
        let t = ActivationTensor {
            layer_id: "x".into(),
            shape: vec![],
            values: vec![],
            narrowed: false,
        };
        assert!(matches!(encode_npy(&t), Err(Error::Validation(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let t = ActivationTensor::new("x", vec![1, 1], vec![0.0]).unwrap();
        let err = write_array(&t, "/nonexistent-dir/for/sure/x.npy").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
