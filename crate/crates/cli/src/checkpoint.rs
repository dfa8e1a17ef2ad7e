//! Checkpoint persistence: a structured text header followed by the
//! raw little-endian f64 payload in manifest order. Round-trips are
//! bitwise exact.

use std::io::{Read as _, Write as _};
use std::path::Path;

use anyhow::{bail, Context, Result};
use uio_core::ParamSet;

const FORMAT_LINE: &str = "uio-ckpt v1";

pub fn save(path: &Path, model_line: &str, params: &ParamSet) -> Result<()> {
    let mut header = String::new();
    header.push_str(FORMAT_LINE);
    header.push('\n');
    header.push_str("model ");
    header.push_str(model_line);
    header.push('\n');
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    let mut manifest = String::new();
    let mut count = 0usize;
    for (name, param) in params.iter() {
        let shape = param
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "param {name} {shape} {offset} {}\n",
            if param.trainable { 1 } else { 0 }
        ));
        for &v in &param.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += param.values.len();
        count += 1;
    }
    header.push_str(&format!("params {count}\n"));
    header.push_str(&manifest);
    header.push_str(&format!("payload {offset}\n"));

    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    drop(file);

    // The format promises bitwise round-trips; check it at every write.
    let (_, reloaded) = load(path)?;
    for (name, param) in params.iter() {
        let back = reloaded.get(name);
        if back.values.iter().map(|v| v.to_bits()).ne(param.values.iter().map(|v| v.to_bits())) {
            bail!("checkpoint round-trip mismatch for `{name}`");
        }
    }
    Ok(())
}

/// Returns the stored model line and the reconstructed parameters.
pub fn load(path: &Path) -> Result<(String, ParamSet)> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let mut cursor = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let start = cursor;
        while cursor < bytes.len() && bytes[cursor] != b'\n' {
            cursor += 1;
        }
        if cursor == bytes.len() {
            bail!("truncated checkpoint header");
        }
        let line = std::str::from_utf8(&bytes[start..cursor])
            .context("non-utf8 checkpoint header")?
            .to_string();
        cursor += 1;
        Ok(line)
    };

    let format = next_line(&bytes)?;
    if format != FORMAT_LINE {
        bail!("unsupported checkpoint format `{format}`");
    }
    let model_line = next_line(&bytes)?;
    let model_line = model_line
        .strip_prefix("model ")
        .context("missing model line")?
        .to_string();
    let params_line = next_line(&bytes)?;
    let count: usize = params_line
        .strip_prefix("params ")
        .context("missing params line")?
        .parse()?;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        trainable: bool,
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes)?;
        let mut fields = line.split_whitespace();
        let tag = fields.next();
        if tag != Some("param") {
            bail!("expected param line, got `{line}`");
        }
        let name = fields.next().context("param name")?.to_string();
        let shape = fields
            .next()
            .context("param shape")?
            .split('x')
            .map(|d| d.parse::<usize>().context("shape dim"))
            .collect::<Result<Vec<_>>>()?;
        let offset: usize = fields.next().context("param offset")?.parse()?;
        let trainable = fields.next().context("param trainable flag")? == "1";
        manifest.push(Entry {
            name,
            shape,
            offset,
            trainable,
        });
    }
    let payload_line = next_line(&bytes)?;
    let total: usize = payload_line
        .strip_prefix("payload ")
        .context("missing payload line")?
        .parse()?;
    let payload = &bytes[cursor..];
    if payload.len() != total * 8 {
        bail!(
            "payload size mismatch: header says {total} scalars, file has {} bytes",
            payload.len()
        );
    }

    let mut params = ParamSet::new();
    for entry in manifest {
        let len: usize = entry.shape.iter().product();
        if entry.offset + len > total {
            bail!("param `{}` extends past payload", entry.name);
        }
        let values = payload[entry.offset * 8..(entry.offset + len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, values, entry.shape, entry.trainable);
    }
    Ok((model_line, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use uio_core::{SegmentModel, ToyRnn, ToyTransformer, TransformerConfig};

    fn roundtrip(params: &ParamSet, label: &str) {
        let dir = std::env::temp_dir().join("uio-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{label}.ckpt"));
        save(&path, label, params).unwrap();
        let (model_line, loaded) = load(&path).unwrap();
        assert_eq!(model_line, label);
        let names: Vec<_> = params.names().cloned().collect();
        let loaded_names: Vec<_> = loaded.names().cloned().collect();
        assert_eq!(names, loaded_names, "manifest order must be preserved");
        for name in &names {
            let a = params.get(name);
            let b = loaded.get(name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(
                a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{name} must round-trip bitwise"
            );
        }
    }

    #[test]
    fn bitwise_roundtrip_both_models() {
        roundtrip(&ToyRnn::default().init_params(7), "toy-rnn");
        let model = ToyTransformer::new(TransformerConfig::default());
        roundtrip(&model.init_params(7), "toy-transformer");
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("uio-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(load(&path).is_err());
    }
}
