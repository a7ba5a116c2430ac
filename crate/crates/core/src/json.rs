//! Self-describing JSON documents.
//!
//! Every persisted type is wrapped as `{"schema_version": 1, "kind": ..., ...}`.
//! Floats are written with 17 significant digits so a write/read cycle
//! reproduces every bit.

use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Pretty-printing formatter that writes `f64` as `{:.16e}`.
pub struct Sig17Formatter<'a> {
    pretty: PrettyFormatter<'a>,
}

impl Default for Sig17Formatter<'_> {
    fn default() -> Self {
        Self { pretty: PrettyFormatter::with_indent(b"  ") }
    }
}

impl Formatter for Sig17Formatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

/// Serializes any value with the 17-digit formatter (no envelope).
pub fn to_string_sig17<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17Formatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema_version: u32,
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    schema_version: u32,
    kind: String,
    #[serde(flatten)]
    body: T,
}

/// A type persisted as a versioned JSON document.
pub trait Document: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn to_json(&self) -> Result<String> {
        to_string_sig17(&EnvelopeOut { schema_version: SCHEMA_VERSION, kind: Self::KIND, body: self })
    }

    fn from_json(text: &str) -> Result<Self> {
        let env: EnvelopeIn<Self> = serde_json::from_str(text)?;
        if env.schema_version != SCHEMA_VERSION {
            return Err(LabError::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                env.schema_version
            )));
        }
        if env.kind != Self::KIND {
            return Err(LabError::invalid(format!("expected a {} document, found {}", Self::KIND, env.kind)));
        }
        Ok(env.body)
    }

    fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

macro_rules! document {
    ($t:ty, $kind:literal) => {
        impl Document for $t {
            const KIND: &'static str = $kind;
        }
    };
}

document!(crate::model::Environment, "environment");
document!(crate::model::Policy, "policy");
document!(crate::model::RewardTable, "reward_table");
document!(crate::model::PreferenceModel, "preference_model");
document!(crate::model::PreferenceDataset, "preference_dataset");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use proptest::prelude::*;

    #[test]
    fn floats_use_17_significant_digits() {
        let s = to_string_sig17(&vec![0.1_f64, 2.0 / 3.0]).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("6.6666666666666663e-1"), "{s}");
    }

    #[test]
    fn envelope_checks_kind_and_version() {
        let p = Policy::uniform(&VocabShape(vec![2]));
        let text = p.to_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert!(text.contains("\"kind\": \"policy\""));
        assert!(RewardTable::from_json(&text).is_err());
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(Policy::from_json(&bumped).is_err());
    }

    #[test]
    fn zero_mass_logits_survive() {
        let p = Policy::deterministic(&VocabShape(vec![3, 2]), &[2, 0]).unwrap();
        let back = Policy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn preference_models_round_trip() {
        let models = vec![
            PreferenceModel::Bt(RewardTable::new(vec![vec![0.3, -0.1]], 1.0).unwrap()),
            PreferenceModel::table(vec![vec![vec![0.5, 0.7], vec![0.3, 0.5]]]).unwrap(),
            PreferenceModel::misspecified_table(vec![vec![vec![0.1, 0.7], vec![0.9, 0.2]]], "x").unwrap(),
            PreferenceModel::misspecified_constant(1.0).unwrap(),
        ];
        for m in models {
            assert_eq!(PreferenceModel::from_json(&m.to_json().unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn invalid_documents_are_rejected_on_read() {
        let bad = r#"{"schema_version":1,"kind":"preference_model","model":"table","values":[[[0.5,0.9],[0.3,0.5]]]}"#;
        assert!(PreferenceModel::from_json(bad).is_err());
    }

    proptest! {
        #[test]
        fn policy_json_is_bit_faithful(logits in proptest::collection::vec(
            proptest::collection::vec(-30.0f64..30.0, 1..6), 1..4)) {
            let p = Policy::from_logits(logits).unwrap();
            let back = Policy::from_json(&p.to_json().unwrap()).unwrap();
            for (a, b) in p.logits().iter().flatten().zip(back.logits().iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
