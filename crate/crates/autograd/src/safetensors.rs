//! Reader for `.safetensors` weight files (F32, F16 and BF16 tensors).

use std::collections::BTreeMap;
use std::path::Path;

use crate::archive::TensorMap;
use crate::{Error, Result};

#[derive(serde::Deserialize)]
struct Info {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) as u32) << 31;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let frac = (bits & 0x3ff) as u32;
    let out = match exp {
        0 if frac == 0 => sign,
        0 => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | (e << 23) | ((f & 0x3ff) << 13)
        }
        0x1f => sign | 0x7f80_0000 | (frac << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(out)
}

pub fn read(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<TensorMap> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Archive("safetensors: truncated".into()))?;
    let n = u64::from_le_bytes(len_bytes) as usize;
    let header = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Archive("safetensors: truncated header".into()))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header)?;
    let data = &bytes[8 + n..];
    let mut out = TensorMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let info: Info = serde_json::from_value(value)?;
        let [start, end] = info.data_offsets;
        let chunk = data
            .get(start..end)
            .ok_or_else(|| Error::Archive(format!("safetensors: {name} out of bounds")))?;
        let values: Vec<f32> = match info.dtype.as_str() {
            "F32" => chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            "F16" => chunk
                .chunks_exact(2)
                .map(|b| f16_to_f32(u16::from_le_bytes([b[0], b[1]])))
                .collect(),
            "BF16" => chunk
                .chunks_exact(2)
                .map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16))
                .collect(),
            other => {
                return Err(Error::Archive(format!(
                    "safetensors: {name} has unsupported dtype {other}"
                )))
            }
        };
        if values.len() != info.shape.iter().product::<usize>() {
            return Err(Error::Archive(format!("safetensors: {name} size mismatch")));
        }
        out.insert(name, (info.shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(entries: &[(&str, &str, Vec<usize>, Vec<u8>)]) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut payload = Vec::new();
        for (name, dtype, shape, bytes) in entries {
            let start = payload.len();
            payload.extend_from_slice(bytes);
            header.insert(
                name.to_string(),
                serde_json::json!({"dtype": dtype, "shape": shape, "data_offsets": [start, payload.len()]}),
            );
        }
        header.insert("__metadata__".into(), serde_json::json!({"format": "pt"}));
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = (h.len() as u64).to_le_bytes().to_vec();
        out.extend(h);
        out.extend(payload);
        out
    }

    #[test]
    fn parses_f32_and_f16() {
        let f32s: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        // 1.0, -0.5, 65504 (max half), smallest subnormal
        let f16s: Vec<u8> = [0x3c00u16, 0xb800, 0x7bff, 0x0001]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let bytes = encode(&[("a", "F32", vec![2], f32s), ("b", "F16", vec![2, 2], f16s)]);
        let map = parse(&bytes).unwrap();
        assert_eq!(map["a"], (vec![2], vec![1.5, -2.0]));
        let b = &map["b"].1;
        assert_eq!(&b[..3], &[1.0, -0.5, 65504.0]);
        assert!((b[3] - 5.960_464_5e-8).abs() < 1e-12);
    }

    #[test]
    fn rejects_unknown_dtype() {
        let bytes = encode(&[("a", "I64", vec![1], vec![0; 8])]);
        assert!(parse(&bytes).is_err());
    }
}
