use std::collections::BTreeMap;

use crate::Error;

/// Name-keyed table of interchangeable strategies.
///
/// `F` is usually a constructor (`fn(...) -> Box<dyn Trait>`), so a strategy is
/// picked at runtime from a config value or CLI flag.
pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<&'static str, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: F) -> &mut Self {
        let previous = self.entries.insert(name, factory);
        assert!(previous.is_none(), "{} '{name}' registered twice", self.kind);
        self
    }

    pub fn with(mut self, name: &'static str, factory: F) -> Self {
        self.register(name, factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F, Error> {
        self.entries.get(name).ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
