//! Model checkpoints: a text manifest describing the graph plus one DWTF file
//! per parameter tensor.
//!
//! ```text
//! dwt-model 1
//! input channels=4
//! node name=enc1 kind=conv inputs=input kernel=5 cin=4 cout=16 weight=dn.enc1.weight.dwtf bias=dn.enc1.bias.dwtf
//! node name=enc1_relu kind=relu inputs=enc1
//! output enc1_relu
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use dwt_core::io::{read_field_raw, write_field_raw};

use crate::error::{NnError, Result};
use crate::graph::{Conv, Layer, Model};
use crate::tensor::{Real, Tensor};

const HEADER: &str = "dwt-model 1";

fn ckpt_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> NnError {
    NnError::Checkpoint(format!("{}:{line}: {msg}", path.display()))
}

fn io_err(path: &Path, e: std::io::Error) -> NnError {
    NnError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `<dir>/<stem>.manifest` and the parameter files next to it.
/// Returns the manifest path.
pub fn save_model<T: Real>(model: &Model<T>, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut text = format!("{HEADER}\ninput channels={}\n", model.input_channels());
    let nodes = model.nodes();
    for node in &nodes[1..] {
        let inputs: Vec<&str> = node.inputs.iter().map(|&i| nodes[i].name.as_str()).collect();
        text.push_str(&format!(
            "node name={} kind={} inputs={}",
            node.name,
            node.layer.kind(),
            inputs.join(",")
        ));
        if let Layer::Conv(c) = &node.layer {
            let wf = format!("{stem}.{}.weight.dwtf", node.name);
            let bf = format!("{stem}.{}.bias.dwtf", node.name);
            write_tensor(&c.weight.value, &dir.join(&wf))?;
            write_tensor(&c.bias.value, &dir.join(&bf))?;
            text.push_str(&format!(
                " kernel={} cin={} cout={} weight={wf} bias={bf}",
                c.kernel, c.cin, c.cout
            ));
        }
        text.push('\n');
    }
    text.push_str(&format!("output {}\n", nodes[model.output()].name));
    let path = dir.join(format!("{stem}.manifest"));
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn write_tensor<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let values: Vec<f32> = t.data().iter().map(|v| v.f64() as f32).collect();
    write_field_raw(path, &t.shape(), &values)?;
    Ok(())
}

fn read_tensor<T: Real>(path: &Path, shape: [usize; 4]) -> Result<Tensor<T>> {
    let field = read_field_raw(path)?;
    if field.dims != shape {
        return Err(NnError::Checkpoint(format!(
            "{}: dims {:?}, expected {:?}",
            path.display(),
            field.dims,
            shape
        )));
    }
    Ok(Tensor::from_vec(
        shape,
        field.values.iter().map(|&v| T::of(v as f64)).collect(),
    ))
}

fn parse_kv<'a>(path: &Path, line: usize, tokens: &[&'a str]) -> Result<HashMap<&'a str, &'a str>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| ckpt_err(path, line, format!("expected key=value, found `{t}`")))
        })
        .collect()
}

fn field<'a>(kv: &HashMap<&str, &'a str>, key: &str, path: &Path, line: usize) -> Result<&'a str> {
    kv.get(key)
        .copied()
        .ok_or_else(|| ckpt_err(path, line, format!("missing `{key}`")))
}

fn number(kv: &HashMap<&str, &str>, key: &str, path: &Path, line: usize) -> Result<usize> {
    let v = field(kv, key, path, line)?;
    v.parse()
        .map_err(|_| ckpt_err(path, line, format!("`{key}` is not a count: `{v}`")))
}

/// Rebuilds a model from a manifest written by [`save_model`].
pub fn load_model<T: Real>(manifest: &Path) -> Result<Model<T>> {
    let text = fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(ckpt_err(manifest, 1, format!("expected `{HEADER}`"))),
    }
    let mut model: Option<Model<T>> = None;
    let mut output: Option<String> = None;
    for (ln, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "input" => {
                let kv = parse_kv(manifest, ln, &tokens[1..])?;
                model = Some(Model::new(number(&kv, "channels", manifest, ln)?));
            }
            "node" => {
                let m = model
                    .as_mut()
                    .ok_or_else(|| ckpt_err(manifest, ln, "node before input line"))?;
                let kv = parse_kv(manifest, ln, &tokens[1..])?;
                let name = field(&kv, "name", manifest, ln)?;
                let kind = field(&kv, "kind", manifest, ln)?;
                let inputs_s = field(&kv, "inputs", manifest, ln)?;
                let mut inputs = Vec::new();
                for s in inputs_s.split(',').filter(|s| !s.is_empty()) {
                    inputs.push(
                        m.find(s)
                            .ok_or_else(|| ckpt_err(manifest, ln, format!("unknown input node `{s}`")))?,
                    );
                }
                let layer = match kind {
                    "conv" => {
                        let kernel = number(&kv, "kernel", manifest, ln)?;
                        let cin = number(&kv, "cin", manifest, ln)?;
                        let cout = number(&kv, "cout", manifest, ln)?;
                        let mut c = Conv::new(kernel, cin, cout);
                        c.weight.value = read_tensor(
                            &dir.join(field(&kv, "weight", manifest, ln)?),
                            [cout, cin, kernel, kernel],
                        )?;
                        c.bias.value =
                            read_tensor(&dir.join(field(&kv, "bias", manifest, ln)?), [cout, 1, 1, 1])?;
                        Layer::Conv(c)
                    }
                    "relu" => Layer::Relu,
                    "avgpool2" => Layer::AvgPool2,
                    "upsample2" => Layer::Upsample2,
                    "upsample_to" => Layer::UpsampleTo,
                    "bilinear_to" => Layer::BilinearTo,
                    "concat" => Layer::Concat,
                    "unit_normalize" => Layer::UnitNormalize,
                    "softmax" => Layer::Softmax,
                    other => return Err(ckpt_err(manifest, ln, format!("unknown layer kind `{other}`"))),
                };
                m.add(name, layer, &inputs)
                    .map_err(|e| ckpt_err(manifest, ln, e))?;
            }
            "output" => {
                output = tokens.get(1).map(|s| s.to_string());
            }
            other => return Err(ckpt_err(manifest, ln, format!("unknown directive `{other}`"))),
        }
    }
    let mut model = model.ok_or_else(|| ckpt_err(manifest, 0, "no input line"))?;
    if let Some(name) = output {
        let id = model
            .find(&name)
            .ok_or_else(|| ckpt_err(manifest, 0, format!("unknown output node `{name}`")))?;
        model.set_output(id)?;
    }
    Ok(model)
}
