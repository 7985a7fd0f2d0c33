//! Serde helpers shared across modules.

/// Serializes a `BTreeMap` with a non-string key as an ordered list of
/// `(key, value)` entries. JSON objects require string keys; entry lists keep
/// the formats self-describing and the byte output deterministic.
pub mod vec_map {
    use std::collections::BTreeMap;

    use serde::de::Deserializer;
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};

    pub fn serialize<S, K, V>(map: &BTreeMap<K, V>, ser: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        K: Serialize + Ord,
        V: Serialize,
    {
        ser.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D, K, V>(de: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        D: Deserializer<'de>,
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
    {
        let entries: Vec<(K, V)> = Vec::deserialize(de)?;
        Ok(entries.into_iter().collect())
    }
}
