//! Name → factory tables for pluggable strategies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

/// Builds trait objects of type `T` by name from arguments `A`.
pub struct Registry<T: ?Sized, A> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Adds or replaces the factory under `name`.
    pub fn register(&mut self, name: &str, factory: impl Fn(&A) -> Result<Box<T>> + Send + Sync + 'static) -> &mut Self {
        self.entries.insert(name.to_owned(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Registered names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(f) => f(args),
            None => Err(Error::Usage(format!(
                "unknown {} '{name}' (known: {})",
                self.kind,
                self.names().join(", ")
            ))),
        }
    }
}
