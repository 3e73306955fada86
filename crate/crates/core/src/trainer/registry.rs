use crate::error::{Error, Result};

/// Named strategies selected at runtime, kept in registration order.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(String, Box<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds or replaces the entry called `name`.
    pub fn register(&mut self, name: &str, item: Box<T>) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = item,
            None => self.entries.push((name.to_string(), item)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, item)| item.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown {} `{name}` (available: {})",
                    self.kind,
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}
