//! Name-keyed factories for interchangeable strategies.
//!
//! A spec string is `name` or `name:argument`; the factory registered under
//! `name` receives the argument (empty when absent).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

type Factory<T> = Box<dyn Fn(&str) -> Result<Arc<T>> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    /// An empty registry; `kind` names the strategy family in errors.
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces the factory for `name`.
    pub fn register(&mut self, name: &str, factory: impl Fn(&str) -> Result<Arc<T>> + Send + Sync + 'static) {
        self.factories.insert(name.to_owned(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &str) -> Result<Arc<T>> {
        let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let factory = self.factories.get(name.trim()).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::Config(format!("unknown {} `{name}` (known: {})", self.kind, known.join(", ")))
        })?;
        factory(arg.trim())
    }
}

/// Fails when a factory that takes no argument received one.
pub(crate) fn no_arg(kind: &str, arg: &str) -> Result<()> {
    if arg.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{kind} takes no argument, got `{arg}`")))
    }
}
