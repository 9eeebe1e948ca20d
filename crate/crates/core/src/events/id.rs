use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use ulid::{Generator, Ulid};

static GENERATOR: Mutex<Option<Generator>> = Mutex::new(None);

/// 26-character Crockford base32 identifier with a millisecond timestamp
/// prefix. Ids minted by one process sort in creation order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(Ulid);

impl EventId {
    pub fn new() -> Self {
        let mut guard = GENERATOR.lock().unwrap_or_else(|p| p.into_inner());
        let generator = guard.get_or_insert_with(Generator::new);
        // Overflow only happens after 2^80 ids inside one millisecond.
        let id = generator.generate().unwrap_or_else(|_| Ulid::new());
        EventId(id)
    }

    pub fn from_parts(timestamp_ms: u64, random: u128) -> Self {
        EventId(Ulid::from_parts(timestamp_ms, random))
    }

    pub fn parse(text: &str) -> Option<Self> {
        if text.len() != 26 {
            return None;
        }
        Ulid::from_string(text).ok().map(EventId)
    }
}

impl Default for EventId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EventId({})", self.0)
    }
}

impl Serialize for EventId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EventId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        EventId::parse(&text)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid event id `{text}`")))
    }
}
