//! File formats: tensors (JSON header plus little-endian `f64` payload, or
//! inline nested arrays) and networks (a single JSON document).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::networks::{Activation, FeatureMap, Network, RnnCell, RnnNet, ShallowNet};
use crate::tensor::cap::check_capacity;
use crate::tensor::DenseTensor;
use crate::xi::Xi;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { path: path.into(), message: message.into() }
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            Error::Json(inner)
        } else {
            schema(path, inner.to_string())
        }
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Value>,
}

/// Sibling payload file of a tensor header: same path with extension `bin`.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes a tensor. With `inline` the values are nested JSON arrays inside
/// the header; otherwise they go to the sibling `.bin` file.
pub fn write_tensor(path: &Path, t: &DenseTensor, inline: bool) -> Result<()> {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
        order: "row-major".into(),
        data: inline.then(|| nest(t.shape(), t.data())),
    };
    if !inline {
        let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        write_atomic(&payload_path(path), &bytes)?;
    }
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn nest(shape: &[usize], data: &[f64]) -> Value {
    match shape {
        [] => Value::from(data[0]),
        [_] => Value::from(data.to_vec()),
        [n, rest @ ..] => {
            let stride = data.len() / n.max(&1);
            Value::Array((0..*n).map(|i| nest(rest, &data[i * stride..(i + 1) * stride])).collect())
        }
    }
}

fn flatten(v: &Value, shape: &[usize], path: &str, out: &mut Vec<f64>) -> Result<()> {
    match (shape, v) {
        ([], Value::Number(x)) => {
            out.push(x.as_f64().ok_or_else(|| schema(path, "not a finite number"))?);
            Ok(())
        }
        ([n, rest @ ..], Value::Array(items)) if items.len() == *n => {
            for (i, item) in items.iter().enumerate() {
                flatten(item, rest, &format!("{path}[{i}]"), out)?;
            }
            Ok(())
        }
        _ => Err(schema(path, format!("does not match shape {shape:?}"))),
    }
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let text = fs::read_to_string(path)?;
    let header: TensorHeader = parse(&text)?;
    if header.dtype != "f64" {
        return Err(schema("dtype", format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(schema("order", format!("unsupported order `{}`", header.order)));
    }
    let len = check_capacity(&header.shape)?;
    let data = match &header.data {
        Some(v) => {
            let mut out = Vec::with_capacity(len);
            flatten(v, &header.shape, "data", &mut out)?;
            out
        }
        None => {
            let bytes = fs::read(payload_path(path))?;
            if bytes.len() != 8 * len {
                return Err(schema("data", format!("payload has {} bytes, shape needs {}", bytes.len(), 8 * len)));
            }
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        }
    };
    DenseTensor::new(header.shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ArrayFile {
    fn of(t: &DenseTensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    fn tensor(&self, path: &str) -> Result<DenseTensor> {
        check_capacity(&self.shape)?;
        DenseTensor::new(self.shape.clone(), self.data.clone()).map_err(|e| schema(path, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Shallow,
    Rnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum FeatureMapFile {
    Template {
        #[serde(rename = "F")]
        f: ArrayFile,
    },
    Affine {
        #[serde(rename = "A")]
        a: ArrayFile,
        b: Vec<f64>,
        #[serde(default)]
        sigma: Activation,
    },
}

/// Named weight arrays, serialized in the order they were produced.
#[derive(Clone, Debug, PartialEq, Default)]
struct Weights(Vec<(String, ArrayFile)>);

impl Serialize for Weights {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Weights {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Weights;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of named weight arrays")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Weights, A::Error> {
                let mut out: Vec<(String, ArrayFile)> = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, ArrayFile>()? {
                    if out.iter().any(|(name, _)| *name == k) {
                        return Err(serde::de::Error::custom(format!("duplicate weight `{k}`")));
                    }
                    out.push((k, v));
                }
                Ok(Weights(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    kind: Kind,
    xi: Xi,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "M")]
    m: usize,
    ranks: Vec<usize>,
    #[serde(default)]
    shared: bool,
    feature_map: FeatureMapFile,
    weights: Weights,
}

/// Weight names of the stored cells: `C.t` / `G.t` (1-based) for unshared
/// networks and `.1`, `.mid`, `.T` suffixes for shared ones.
fn cell_names(steps: usize, shared: bool) -> Vec<String> {
    if shared && steps >= 3 {
        vec!["1".into(), "mid".into(), "T".into()]
    } else {
        (1..=steps).map(|t| t.to_string()).collect()
    }
}

fn feature_map_file(fm: &FeatureMap) -> FeatureMapFile {
    match fm {
        FeatureMap::Template { f } => FeatureMapFile::Template { f: ArrayFile::of(f) },
        FeatureMap::Affine { a, b, sigma } => {
            FeatureMapFile::Affine { a: ArrayFile::of(a), b: b.clone(), sigma: *sigma }
        }
    }
}

fn to_file(net: &Network) -> NetworkFile {
    match net {
        Network::Shallow(n) => {
            let mut w = vec![("lambda".to_string(), ArrayFile { shape: vec![n.rank()], data: n.lambdas.clone() })];
            for (t, f) in n.factors.iter().enumerate() {
                w.push((format!("V.{}", t + 1), ArrayFile::of(f)));
            }
            NetworkFile {
                kind: Kind::Shallow,
                xi: n.xi,
                t: n.len(),
                m: n.feature_map.dim(),
                ranks: vec![n.rank()],
                shared: false,
                feature_map: feature_map_file(&n.feature_map),
                weights: Weights(w),
            }
        }
        Network::Rnn(n) => {
            let names = cell_names(n.len(), n.shared);
            let mut w = Vec::with_capacity(2 * names.len());
            for (name, c) in names.iter().zip(&n.cells) {
                w.push((format!("C.{name}"), ArrayFile::of(&c.input)));
            }
            for (name, c) in names.iter().zip(&n.cells) {
                w.push((format!("G.{name}"), ArrayFile::of(&c.core)));
            }
            NetworkFile {
                kind: Kind::Rnn,
                xi: n.xi,
                t: n.len(),
                m: n.input_dim(),
                ranks: n.ranks(),
                shared: n.shared,
                feature_map: feature_map_file(&n.feature_map),
                weights: Weights(w),
            }
        }
    }
}

fn from_file(file: NetworkFile) -> Result<Network> {
    let fm = match &file.feature_map {
        FeatureMapFile::Template { f } => FeatureMap::Template { f: f.tensor("feature_map.F")? },
        FeatureMapFile::Affine { a, b, sigma } => {
            FeatureMap::Affine { a: a.tensor("feature_map.A")?, b: b.clone(), sigma: *sigma }
        }
    };
    fm.check().map_err(|e| schema("feature_map", e.to_string()))?;
    if fm.dim() != file.m {
        return Err(schema("M", format!("declared {} but feature map has dimension {}", file.m, fm.dim())));
    }
    if file.t == 0 {
        return Err(schema("T", "must be at least 1"));
    }
    let mut weights = file.weights.0;
    let mut take = |name: &str| -> Result<DenseTensor> {
        let pos =
            weights.iter().position(|(k, _)| k == name).ok_or_else(|| schema(format!("weights.{name}"), "missing"))?;
        let (_, arr) = weights.remove(pos);
        arr.tensor(&format!("weights.{name}"))
    };
    let net: Network = match file.kind {
        Kind::Shallow => {
            if file.shared {
                return Err(schema("shared", "shallow networks cannot be shared"));
            }
            let lambdas = take("lambda")?.into_data();
            let factors = (1..=file.t).map(|t| take(&format!("V.{t}"))).collect::<Result<Vec<_>>>()?;
            if file.ranks != [lambdas.len()] {
                return Err(schema("ranks", format!("expected [{}]", lambdas.len())));
            }
            let n = ShallowNet { xi: file.xi, lambdas, factors, feature_map: fm };
            report(n.validate(), |loc| {
                if loc == "lambdas" {
                    return "weights.lambda".into();
                }
                match loc.strip_prefix("factors[").and_then(|r| r.strip_suffix(']')) {
                    Some(t) => format!("weights.V.{}", t.parse::<usize>().map_or(0, |t| t + 1)),
                    None => loc.to_string(),
                }
            })?;
            n.into()
        }
        Kind::Rnn => {
            let names = cell_names(file.t, file.shared);
            let inputs = names.iter().map(|n| take(&format!("C.{n}"))).collect::<Result<Vec<_>>>()?;
            let cores = names.iter().map(|n| take(&format!("G.{n}"))).collect::<Result<Vec<_>>>()?;
            let cells: Vec<RnnCell> =
                inputs.into_iter().zip(cores).map(|(input, core)| RnnCell { input, core }).collect();
            let n =
                RnnNet { xi: file.xi, steps: file.t, cells, shared: file.shared, h0: file.xi.unit(), feature_map: fm };
            report(n.validate(), |loc| {
                let first =
                    |p: &str| loc.strip_prefix(p).and_then(|r| r.split(',').next()?.trim().parse::<usize>().ok());
                if let Some(s) = first("cell ") {
                    format!("weights.C.{}", names.get(s).map_or("?", String::as_str))
                } else if let Some(t) = first("cores ").or_else(|| first("core ")) {
                    let s = n.cell_index(t.saturating_sub(1));
                    format!("weights.G.{}", names.get(s).map_or("?", String::as_str))
                } else {
                    loc.to_string()
                }
            })?;
            if n.ranks() != file.ranks {
                return Err(schema("ranks", format!("declared {:?}, cores give {:?}", file.ranks, n.ranks())));
            }
            n.into()
        }
    };
    if let Some((k, _)) = weights.first() {
        return Err(schema(format!("weights.{k}"), "unknown weight"));
    }
    Ok(net)
}

/// Turns the first structural violation into a schema error whose path
/// names the offending weight array.
fn report(v: Vec<crate::networks::Violation>, path: impl Fn(&str) -> String) -> Result<()> {
    match v.first() {
        None => Ok(()),
        Some(first) => Err(schema(path(&first.location), format!("{}: {}", first.location, first.message))),
    }
}

/// Canonical pretty-printed JSON with a trailing newline.
pub fn network_to_json(net: &Network) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_file(net))?;
    s.push('\n');
    Ok(s)
}

pub fn network_from_json(text: &str) -> Result<Network> {
    from_file(parse(text)?)
}

pub fn read_network(path: &Path) -> Result<Network> {
    network_from_json(&fs::read_to_string(path)?)
}

pub fn write_network(path: &Path, net: &Network) -> Result<()> {
    write_atomic(path, network_to_json(net)?.as_bytes())
}

/// Parses any JSON config with field-path diagnostics.
pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    parse(text)
}

/// Names of every weight array a network file would contain.
pub fn weight_names(net: &Network) -> BTreeSet<String> {
    to_file(net).weights.0.into_iter().map(|(k, _)| k).collect()
}
