use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array1;

use super::{Architecture, CfrModel, LayerSpec};
use crate::data::fmt_real;
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "cfr-model";

fn fmt_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(|l| format!(" {}:{}", l.width, l.activation)).collect()
}

fn parse_layers(fields: &[String]) -> Result<Vec<LayerSpec>> {
    fields
        .iter()
        .map(|f| {
            let (w, a) = f.split_once(':').ok_or_else(|| CfrError::ModelFormat(format!("bad layer '{f}'")))?;
            let width = w.parse().map_err(|_| CfrError::ModelFormat(format!("bad layer width '{w}'")))?;
            let activation = a.parse().map_err(|_| CfrError::ModelFormat(format!("bad activation '{a}'")))?;
            Ok(LayerSpec { width, activation })
        })
        .collect()
}

/// Writes the architecture header followed by one parameter per line at 17
/// significant digits, which round-trips exactly.
pub fn write_model<S: Scalar, W: Write>(model: &CfrModel<S>, mut w: W) -> std::io::Result<()> {
    let arch = model.architecture();
    writeln!(w, "{MAGIC} {MODEL_FORMAT_VERSION}")?;
    writeln!(w, "input_dim {}", arch.input_dim)?;
    writeln!(w, "rep{}", fmt_layers(&arch.rep_layers))?;
    writeln!(w, "head{}", fmt_layers(&arch.head_layers))?;
    match &arch.weight_head_layers {
        Some(l) => writeln!(w, "weight_head{}", fmt_layers(l))?,
        None => writeln!(w, "weight_head none")?,
    }
    writeln!(w, "seed {}", model.seed)?;
    writeln!(w, "params {}", model.params.len())?;
    for p in model.params.iter() {
        writeln!(w, "{}", fmt_real(*p))?;
    }
    Ok(())
}

pub fn save_model<S: Scalar>(model: &CfrModel<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CfrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).and_then(|_| w.flush()).map_err(|e| CfrError::io(path, e))
}

pub fn read_model<S: Scalar, R: Read>(r: R) -> Result<CfrModel<S>> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |what: &str| -> Result<String> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(CfrError::ModelFormat(format!("reading {what}: {e}"))),
            None => Err(CfrError::ModelFormat(format!("unexpected end of file before {what}"))),
        }
    };
    let header = next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| CfrError::ModelFormat(format!("not a model file (header '{header}')")))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(CfrError::ModelFormat(format!("unsupported model format version {version}")));
    }
    let mut keyed = |key: &str| -> Result<Vec<String>> {
        let line = next(key)?;
        let mut fields = line.split_whitespace().map(str::to_string);
        match fields.next() {
            Some(k) if k == key => Ok(fields.collect()),
            _ => Err(CfrError::ModelFormat(format!("expected '{key}' line, got '{line}'"))),
        }
    };
    let single = |v: Vec<String>, key: &str| -> Result<String> {
        match v.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(CfrError::ModelFormat(format!("'{key}' takes one value"))),
        }
    };
    let input_dim = single(keyed("input_dim")?, "input_dim")?
        .parse()
        .map_err(|_| CfrError::ModelFormat("bad input_dim".into()))?;
    let rep_layers = parse_layers(&keyed("rep")?)?;
    let head_layers = parse_layers(&keyed("head")?)?;
    let wh = keyed("weight_head")?;
    let weight_head_layers = if wh == ["none"] { None } else { Some(parse_layers(&wh)?) };
    let seed = single(keyed("seed")?, "seed")?.parse().map_err(|_| CfrError::ModelFormat("bad seed".into()))?;
    let count: usize = single(keyed("params")?, "params")?
        .parse()
        .map_err(|_| CfrError::ModelFormat("bad parameter count".into()))?;
    let arch = Architecture { input_dim, rep_layers, head_layers, weight_head_layers };
    arch.validate().map_err(|e| CfrError::ModelFormat(e.to_string()))?;
    if arch.parameter_count() != count {
        return Err(CfrError::ModelFormat(format!("header declares {count} parameters, architecture has {}", arch.parameter_count())));
    }
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let line = next("parameters")?;
        let v = line
            .trim()
            .parse::<S>()
            .map_err(|_| CfrError::ModelFormat(format!("parameter {i}: cannot parse '{line}'")))?;
        params.push(v);
    }
    CfrModel::from_parameters(&arch, Array1::from(params), seed)
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<CfrModel<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfrError::io(path, e))?;
    read_model(file)
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for arch in [
            Architecture::new(3, &[], &[2]),
            Architecture::new(4, &[5, 3], &[4, 2]).with_weight_head(&[3]),
        ] {
            let mut model = init_model::<f64>(&arch, 77).unwrap();
            model.params.mapv_inplace(|v| v * std::f64::consts::PI + 1e-300);
            let mut buf = Vec::new();
            write_model(&model, &mut buf).unwrap();
            let back: CfrModel<f64> = read_model(buf.as_slice()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn malformed_files() {
        let model = init_model::<f64>(&Architecture::new(2, &[2], &[2]), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_model::<f64, _>(truncated.as_bytes()), Err(CfrError::ModelFormat(_))));
        let wrong_version = text.replacen("cfr-model 1", "cfr-model 9", 1);
        assert!(read_model::<f64, _>(wrong_version.as_bytes()).is_err());
        assert!(read_model::<f64, _>("hello".as_bytes()).is_err());
    }
}
