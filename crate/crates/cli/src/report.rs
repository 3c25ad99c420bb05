//! Canonical JSON reports: sorted keys, floats rounded to 12 significant
//! digits, non-finite numbers refused.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Bumped on any change to the report layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("non-finite number {value} at {path}")]
    NonFinite { path: String, value: f64 },
    #[error("map key at {0} is not a string")]
    Key(String),
    #[error("serializing report: {0}")]
    Serialize(String),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Rounds to 12 significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    format!("{v:.11e}").parse().expect("formatted float parses")
}

fn convert(v: serde_value::Value, path: &str) -> Result<Value, ReportError> {
    use serde_value::Value as V;
    let float = |f: f64| -> Result<Value, ReportError> {
        if !f.is_finite() {
            return Err(ReportError::NonFinite {
                path: path.to_owned(),
                value: f,
            });
        }
        Ok(Value::Number(Number::from_f64(round_sig(f)).expect("finite")))
    };
    Ok(match v {
        V::Bool(b) => Value::Bool(b),
        V::U8(n) => n.into(),
        V::U16(n) => n.into(),
        V::U32(n) => n.into(),
        V::U64(n) => n.into(),
        V::I8(n) => n.into(),
        V::I16(n) => n.into(),
        V::I32(n) => n.into(),
        V::I64(n) => n.into(),
        V::F32(f) => float(f64::from(f))?,
        V::F64(f) => float(f)?,
        V::Char(c) => Value::String(c.to_string()),
        V::String(s) => Value::String(s),
        V::Unit => Value::Null,
        V::Option(None) => Value::Null,
        V::Option(Some(b)) | V::Newtype(b) => convert(*b, path)?,
        V::Seq(items) => Value::Array(
            items
                .into_iter()
                .enumerate()
                .map(|(i, x)| convert(x, &format!("{path}[{i}]")))
                .collect::<Result<_, _>>()?,
        ),
        V::Map(m) => {
            let mut out = Map::new();
            for (k, x) in m {
                let key = match k {
                    V::String(s) => s,
                    V::U64(n) => n.to_string(),
                    V::U32(n) => n.to_string(),
                    V::Char(c) => c.to_string(),
                    _ => return Err(ReportError::Key(path.to_owned())),
                };
                let child = convert(x, &format!("{path}.{key}"))?;
                out.insert(key, child);
            }
            Value::Object(out)
        }
        V::Bytes(b) => Value::Array(b.into_iter().map(Value::from).collect()),
    })
}

/// Canonical JSON value of `x`; errors on NaN or infinity anywhere.
pub fn canonical_value<T: Serialize>(x: &T) -> Result<Value, ReportError> {
    let v = serde_value::to_value(x).map_err(|e| ReportError::Serialize(e.to_string()))?;
    convert(v, "$")
}

/// Keys sorted (serde_json's default map is ordered), two-space indent,
/// trailing newline.
pub fn canonical_string<T: Serialize>(x: &T) -> Result<String, ReportError> {
    let v = canonical_value(x)?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| ReportError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    /// SHA-256 of the canonical effective configuration.
    pub config_sha256: String,
    pub config: Value,
    pub seed: u64,
    pub flags: Value,
    pub results: Value,
}

impl Report {
    pub fn new<F: Serialize, R: Serialize>(
        command: &str,
        config: &ExperimentConfig,
        flags: &F,
        results: &R,
    ) -> Result<Self, ReportError> {
        let config_json = canonical_string(config)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_owned(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            config: canonical_value(config)?,
            seed: config.seed,
            flags: canonical_value(flags)?,
            results: canonical_value(results)?,
        })
    }

    pub fn to_canonical_string(&self) -> Result<String, ReportError> {
        canonical_string(self)
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Serialize(e.to_string()))
    }
}

pub fn emit_report(report: &Report, path: &Path) -> Result<(), ReportError> {
    let text = report.to_canonical_string()?;
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[derive(Serialize)]
    struct Sample {
        zeta: f64,
        alpha: Vec<f64>,
        name: &'static str,
        nested: BTreeMap<String, Option<f64>>,
    }

    fn sample(v: f64) -> Sample {
        Sample {
            zeta: v,
            alpha: vec![1.0 / 3.0, 2.0, 1e-20],
            name: "x",
            nested: [("b".to_string(), None), ("a".to_string(), Some(0.1 + 0.2))].into(),
        }
    }

    #[test]
    fn keys_sorted_and_floats_rounded() {
        let s = canonical_string(&sample(123456.789012345678)).unwrap();
        assert!(s.find("\"alpha\"").unwrap() < s.find("\"name\"").unwrap());
        assert!(s.find("\"name\"").unwrap() < s.find("\"zeta\"").unwrap());
        assert!(s.contains("123456.789012\n") || s.contains("123456.789012,"), "{s}");
        assert!(s.contains("0.333333333333"));
        assert!(s.contains("0.3,") || s.contains("0.3\n"));
        assert_eq!(s, canonical_string(&sample(123456.789012345678)).unwrap());
    }

    #[test]
    fn non_finite_is_refused_with_path() {
        match canonical_string(&sample(f64::NAN)).unwrap_err() {
            ReportError::NonFinite { path, .. } => assert_eq!(path, "$.zeta"),
            e => panic!("{e}"),
        }
        let mut bad = sample(1.0);
        bad.nested.insert("c".into(), Some(f64::INFINITY));
        assert!(matches!(canonical_string(&bad), Err(ReportError::NonFinite { .. })));
    }

    #[test]
    fn rounding_is_idempotent() {
        for v in [1.0 / 7.0, -2.5e-300, 6.02214076e23, 0.1 + 0.2] {
            let r = round_sig(v);
            assert_eq!(round_sig(r), r);
            assert!(((r - v) / v).abs() < 1e-11);
        }
    }
}
