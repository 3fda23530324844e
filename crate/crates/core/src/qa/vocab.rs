//! Answer tokens and the closed answer vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Overall severity of destruction, ordered from least to most severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeverityLevel {
    NoDamage,
    Minor,
    Moderate,
    Severe,
    Extensive,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 5] = [
        SeverityLevel::NoDamage,
        SeverityLevel::Minor,
        SeverityLevel::Moderate,
        SeverityLevel::Severe,
        SeverityLevel::Extensive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLevel::NoDamage => "No damage",
            SeverityLevel::Minor => "Minor damage",
            SeverityLevel::Moderate => "Moderate damage",
            SeverityLevel::Severe => "Severe damage",
            SeverityLevel::Extensive => "Extensive damage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialPattern {
    ConcentratedInOneArea,
    SpreadThroughout,
    /// Degenerate case: the mask has no damaged or destroyed pixels.
    NoDestruction,
}

impl SpatialPattern {
    pub const ALL: [SpatialPattern; 3] = [
        SpatialPattern::ConcentratedInOneArea,
        SpatialPattern::SpreadThroughout,
        SpatialPattern::NoDestruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialPattern::ConcentratedInOneArea => "Concentrated in one area",
            SpatialPattern::SpreadThroughout => "Spread throughout",
            SpatialPattern::NoDestruction => "No destruction",
        }
    }
}

/// Decile interval `[10k, 10(k+1))`, with 100 folded into the top bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PercentBucket(u8);

impl PercentBucket {
    pub fn new(decile: u8) -> Option<Self> {
        (decile < 10).then_some(Self(decile))
    }

    pub fn decile(self) -> u8 {
        self.0
    }

    pub fn label(self) -> String {
        format!("{}-{}%", 10 * self.0 as u32, 10 * (self.0 as u32 + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResilienceClass {
    High,
    Moderate,
    Low,
}

impl ResilienceClass {
    pub const ALL: [ResilienceClass; 3] = [
        ResilienceClass::High,
        ResilienceClass::Moderate,
        ResilienceClass::Low,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResilienceClass::High => "High resilience",
            ResilienceClass::Moderate => "Moderate resilience",
            ResilienceClass::Low => "Low resilience",
        }
    }
}

/// Scale of the recovery response a scene calls for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseLevel {
    Major,
    Minor,
}

impl ResponseLevel {
    pub fn name(self) -> &'static str {
        match self {
            ResponseLevel::Major => "Major response",
            ResponseLevel::Minor => "Minor response",
        }
    }
}

/// One answer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnswerToken {
    Yes,
    No,
    Damaged,
    Destroyed,
    Intact,
    Affected,
    Severity(SeverityLevel),
    Spatial(SpatialPattern),
    Percent(PercentBucket),
    Resilience(ResilienceClass),
    Response(ResponseLevel),
    /// Degenerate case: the scene contains no building pixels.
    NoBuildings,
}

impl AnswerToken {
    pub fn yes_no(flag: bool) -> Self {
        if flag {
            AnswerToken::Yes
        } else {
            AnswerToken::No
        }
    }

    pub fn as_str(&self) -> std::borrow::Cow<'static, str> {
        use std::borrow::Cow;
        match self {
            AnswerToken::Yes => Cow::Borrowed("Yes"),
            AnswerToken::No => Cow::Borrowed("No"),
            AnswerToken::Damaged => Cow::Borrowed("Damaged"),
            AnswerToken::Destroyed => Cow::Borrowed("Destroyed"),
            AnswerToken::Intact => Cow::Borrowed("Intact"),
            AnswerToken::Affected => Cow::Borrowed("Affected"),
            AnswerToken::Severity(s) => Cow::Borrowed(s.name()),
            AnswerToken::Spatial(s) => Cow::Borrowed(s.name()),
            AnswerToken::Percent(b) => Cow::Owned(b.label()),
            AnswerToken::Resilience(r) => Cow::Borrowed(r.name()),
            AnswerToken::Response(r) => Cow::Borrowed(r.name()),
            AnswerToken::NoBuildings => Cow::Borrowed("No buildings"),
        }
    }
}

impl fmt::Display for AnswerToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown answer token {0:?}")]
pub struct UnknownToken(pub String);

impl FromStr for AnswerToken {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnswerVocabulary::standard()
            .lookup(s)
            .ok_or_else(|| UnknownToken(s.to_string()))
    }
}

impl Serialize for AnswerToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for AnswerToken {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, closed set of answer classes with stable indices.
#[derive(Debug, Clone)]
pub struct AnswerVocabulary {
    tokens: Vec<AnswerToken>,
    by_name: HashMap<String, usize>,
}

impl AnswerVocabulary {
    /// Every token any answer rule can emit, in a fixed order.
    pub fn standard() -> &'static AnswerVocabulary {
        static VOCAB: OnceLock<AnswerVocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens = vec![
                AnswerToken::Yes,
                AnswerToken::No,
                AnswerToken::Damaged,
                AnswerToken::Destroyed,
                AnswerToken::Intact,
                AnswerToken::Affected,
            ];
            tokens.extend(SeverityLevel::ALL.map(AnswerToken::Severity));
            tokens.extend(SpatialPattern::ALL.map(AnswerToken::Spatial));
            tokens.extend((0..10).map(|k| AnswerToken::Percent(PercentBucket(k))));
            tokens.extend(ResilienceClass::ALL.map(AnswerToken::Resilience));
            tokens.push(AnswerToken::Response(ResponseLevel::Major));
            tokens.push(AnswerToken::Response(ResponseLevel::Minor));
            tokens.push(AnswerToken::NoBuildings);
            AnswerVocabulary::from_tokens(tokens)
        })
    }

    fn from_tokens(tokens: Vec<AnswerToken>) -> Self {
        let by_name = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str().into_owned(), i))
            .collect();
        Self { tokens, by_name }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[AnswerToken] {
        &self.tokens
    }

    pub fn index_of(&self, token: AnswerToken) -> usize {
        self.by_name[token.as_str().as_ref()]
    }

    pub fn token(&self, index: usize) -> Option<AnswerToken> {
        self.tokens.get(index).copied()
    }

    pub fn lookup(&self, name: &str) -> Option<AnswerToken> {
        self.by_name.get(name).map(|&i| self.tokens[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_dense_and_stable() {
        let v = AnswerVocabulary::standard();
        assert_eq!(v.len(), 30);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.index_of(*t), i);
            assert_eq!(v.token(i), Some(*t));
            assert_eq!(t.to_string().parse::<AnswerToken>().unwrap(), *t);
        }
        assert_eq!(v.index_of(AnswerToken::Yes), 0);
        assert_eq!(v.index_of(AnswerToken::NoBuildings), 29);
    }

    #[test]
    fn bucket_labels() {
        assert_eq!(PercentBucket(0).label(), "0-10%");
        assert_eq!(PercentBucket(9).label(), "90-100%");
        assert!(PercentBucket::new(10).is_none());
    }

    #[test]
    fn unknown_token_rejected() {
        assert!("Maybe".parse::<AnswerToken>().is_err());
        assert!(serde_json::from_str::<AnswerToken>("\"yes\"").is_err());
        assert_eq!(
            serde_json::from_str::<AnswerToken>("\"40-50%\"").unwrap(),
            AnswerToken::Percent(PercentBucket(4))
        );
    }
}
