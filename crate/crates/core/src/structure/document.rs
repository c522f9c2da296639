use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{FactorChain, GroupConvSpec, PermutationSpec};

pub const CHAIN_DOCUMENT_VERSION: u32 = 1;

/// JSON form of a [`FactorChain`].
///
/// `c_in`/`c_out` may be omitted for strict factors, where they equal
/// `g * k_in` and `g * k_out`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDocument {
    pub version: u32,
    pub channels: usize,
    pub factors: Vec<FactorDocument>,
    pub interleaves: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trailing: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDocument {
    pub k_in: usize,
    pub k_out: usize,
    pub s: usize,
    pub g: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
}

impl From<&GroupConvSpec> for FactorDocument {
    fn from(spec: &GroupConvSpec) -> Self {
        let strict = spec.is_strict();
        FactorDocument {
            k_in: spec.branch_width_in,
            k_out: spec.branch_width_out,
            s: spec.spatial_taps,
            g: spec.branches,
            c_in: (!strict).then_some(spec.channels_in),
            c_out: (!strict).then_some(spec.channels_out),
        }
    }
}

impl FactorDocument {
    fn to_spec(&self) -> Result<GroupConvSpec> {
        let spec = GroupConvSpec {
            channels_in: self.c_in.unwrap_or(self.g * self.k_in),
            channels_out: self.c_out.unwrap_or(self.g * self.k_out),
            branch_width_in: self.k_in,
            branch_width_out: self.k_out,
            spatial_taps: self.s,
            branches: self.g,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<&FactorChain> for ChainDocument {
    fn from(chain: &FactorChain) -> Self {
        ChainDocument {
            version: CHAIN_DOCUMENT_VERSION,
            channels: chain.channels_in(),
            factors: chain.factors().iter().map(FactorDocument::from).collect(),
            interleaves: chain
                .interleaves()
                .iter()
                .map(|p| p.map().to_vec())
                .collect(),
            trailing: chain.trailing().map(|p| p.map().to_vec()),
        }
    }
}

impl TryFrom<&ChainDocument> for FactorChain {
    type Error = Error;

    fn try_from(doc: &ChainDocument) -> Result<Self> {
        if doc.version != CHAIN_DOCUMENT_VERSION {
            return Err(Error::Format(format!(
                "unsupported chain document version {}",
                doc.version
            )));
        }
        let factors = doc
            .factors
            .iter()
            .map(FactorDocument::to_spec)
            .collect::<Result<Vec<_>>>()?;
        if factors.first().map(|f| f.channels_in) != Some(doc.channels) {
            return Err(Error::structural(format!(
                "document declares {} channels but the first factor reads {:?}",
                doc.channels,
                factors.first().map(|f| f.channels_in)
            )));
        }
        let interleaves = doc
            .interleaves
            .iter()
            .map(|m| PermutationSpec::new(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let trailing = doc
            .trailing
            .as_ref()
            .map(|m| PermutationSpec::new(m.clone()))
            .transpose()?;
        FactorChain::new(factors, interleaves, trailing)
    }
}

impl FactorChain {
    pub fn to_document(&self) -> ChainDocument {
        ChainDocument::from(self)
    }

    pub fn from_document(doc: &ChainDocument) -> Result<Self> {
        Self::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("chain document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ChainDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_document() {
        let text = r#"{"version":1,"channels":4,
            "factors":[{"k_in":2,"k_out":2,"s":1,"g":2},{"k_in":2,"k_out":2,"s":1,"g":2}],
            "interleaves":[[0,2,1,3]]}"#;
        let chain = FactorChain::from_json(text).unwrap();
        assert_eq!(chain.depth(), 2);
        assert_eq!(chain.interleaves()[0].map(), &[0, 2, 1, 3]);
    }

    #[test]
    fn rejects_bad_documents() {
        let wrong_channels = r#"{"version":1,"channels":6,
            "factors":[{"k_in":2,"k_out":2,"s":1,"g":2}],"interleaves":[]}"#;
        assert!(matches!(
            FactorChain::from_json(wrong_channels),
            Err(Error::Structural(_))
        ));
        let bad_perm = r#"{"version":1,"channels":4,
            "factors":[{"k_in":2,"k_out":2,"s":1,"g":2},{"k_in":2,"k_out":2,"s":1,"g":2}],
            "interleaves":[[0,0,1,3]]}"#;
        assert!(FactorChain::from_json(bad_perm).is_err());
        let unknown = r#"{"version":1,"channels":4,"factors":[],"interleaves":[],"x":1}"#;
        assert!(matches!(
            FactorChain::from_json(unknown),
            Err(Error::Json(_))
        ));
        let version = r#"{"version":9,"channels":4,
            "factors":[{"k_in":2,"k_out":2,"s":1,"g":2}],"interleaves":[]}"#;
        assert!(matches!(
            FactorChain::from_json(version),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn loose_factor_keeps_channel_counts() {
        let spec = GroupConvSpec::loose(10, 10, 4, 4, 1).unwrap();
        let chain = FactorChain::single(spec).unwrap();
        let doc = chain.to_document();
        assert_eq!(doc.factors[0].c_in, Some(10));
        assert_eq!(FactorChain::from_document(&doc).unwrap(), chain);
    }
}
