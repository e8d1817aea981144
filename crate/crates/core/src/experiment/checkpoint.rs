//! Flat little-endian f64 parameter dumps with a text manifest.
//!
//! `<name>.bin` holds every parameter tensor back to back; `<name>.manifest`
//! has one line per tensor: `<name> <d0>x<d1>x... <offset>`, where the
//! offset counts reals from the start of the dump.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, ParamId, ParamSlot};

fn tensor_name(id: ParamId) -> String {
    let slot = match id.slot {
        ParamSlot::Weight => "weight",
        ParamSlot::Bias => "bias",
    };
    format!("layer{}.{slot}", id.layer)
}

fn param_ids(net: &Network) -> Vec<ParamId> {
    (0..net.layers().len())
        .filter(|&i| net.layer_params(i).is_some())
        .flat_map(|i| [ParamId::weight(i), ParamId::bias(i)])
        .collect()
}

pub fn save_checkpoint(dir: &Path, name: &str, net: &Network) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut manifest = String::new();
    let mut offset = 0usize;
    for id in param_ids(net) {
        let t = net.param(id).expect("listed parameter");
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        manifest.push_str(&format!("{} {} {offset}\n", tensor_name(id), shape.join("x")));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    std::fs::write(dir.join(format!("{name}.bin")), bytes)?;
    std::fs::write(dir.join(format!("{name}.manifest")), manifest)?;
    Ok(())
}

/// Load a checkpoint into a copy of `template`, checking every tensor's name and shape.
pub fn load_checkpoint(dir: &Path, name: &str, template: &Network) -> Result<Network> {
    let bytes = std::fs::read(dir.join(format!("{name}.bin")))?;
    let manifest = std::fs::read_to_string(dir.join(format!("{name}.manifest")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!("checkpoint {name}.bin is not a whole number of reals")));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let ids = param_ids(template);
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != ids.len() {
        return Err(Error::Input(format!(
            "checkpoint {name} lists {} tensors, model has {}",
            lines.len(),
            ids.len()
        )));
    }
    let mut net = template.clone();
    for (line, id) in lines.iter().zip(ids) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let t = net.param_mut(id).expect("listed parameter");
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let expected_shape = shape.join("x");
        let [tname, tshape, toffset] = fields[..] else {
            return Err(Error::Input(format!("malformed manifest line `{line}`")));
        };
        if tname != tensor_name(id) || tshape != expected_shape {
            return Err(Error::Input(format!(
                "manifest entry `{line}` does not match {} {expected_shape}",
                tensor_name(id)
            )));
        }
        let offset: usize = toffset
            .parse()
            .map_err(|_| Error::Input(format!("bad offset in manifest line `{line}`")))?;
        let src = values
            .get(offset..offset + t.len())
            .ok_or_else(|| Error::Input(format!("tensor {tname} runs past the end of {name}.bin")))?;
        t.data_mut().copy_from_slice(src);
    }
    Ok(net)
}
