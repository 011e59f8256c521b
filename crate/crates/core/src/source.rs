//! The four separation targets and a small fixed-order map keyed by them.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One of the four stems a mixture decomposes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceId {
    Vocals,
    Drums,
    Bass,
    Other,
}

impl SourceId {
    /// All sources in the fixed task order used throughout the crate.
    pub const ALL: [SourceId; 4] = [
        SourceId::Vocals,
        SourceId::Drums,
        SourceId::Bass,
        SourceId::Other,
    ];

    pub fn index(self) -> usize {
        match self {
            SourceId::Vocals => 0,
            SourceId::Drums => 1,
            SourceId::Bass => 2,
            SourceId::Other => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceId::Vocals => "vocals",
            SourceId::Drums => "drums",
            SourceId::Bass => "bass",
            SourceId::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<SourceId> {
        SourceId::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A value per source, iterated in the fixed `SourceId::ALL` order.
///
/// Used instead of a hash map so that iteration order (and therefore every
/// floating-point reduction that walks the sources) is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSource<T> {
    items: [T; 4],
}

impl<T> PerSource<T> {
    pub fn new(items: [T; 4]) -> Self {
        Self { items }
    }

    pub fn from_fn(mut f: impl FnMut(SourceId) -> T) -> Self {
        Self {
            items: [
                f(SourceId::Vocals),
                f(SourceId::Drums),
                f(SourceId::Bass),
                f(SourceId::Other),
            ],
        }
    }

    pub fn try_from_fn<E>(
        mut f: impl FnMut(SourceId) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        Ok(Self {
            items: [
                f(SourceId::Vocals)?,
                f(SourceId::Drums)?,
                f(SourceId::Bass)?,
                f(SourceId::Other)?,
            ],
        })
    }

    pub fn get(&self, source: SourceId) -> &T {
        &self.items[source.index()]
    }

    pub fn get_mut(&mut self, source: SourceId) -> &mut T {
        &mut self.items[source.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (SourceId, &T)> {
        SourceId::ALL.into_iter().zip(self.items.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (SourceId, &mut T)> {
        SourceId::ALL.into_iter().zip(self.items.iter_mut())
    }

    pub fn map<U>(&self, mut f: impl FnMut(SourceId, &T) -> U) -> PerSource<U> {
        PerSource::from_fn(|s| f(s, self.get(s)))
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

impl<T> std::ops::Index<SourceId> for PerSource<T> {
    type Output = T;
    fn index(&self, source: SourceId) -> &T {
        self.get(source)
    }
}

impl<T> std::ops::IndexMut<SourceId> for PerSource<T> {
    fn index_mut(&mut self, source: SourceId) -> &mut T {
        self.get_mut(source)
    }
}
