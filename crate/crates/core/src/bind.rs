//! Binding stored parameters onto a tape.

use numkit::{ParamStore, Scalar, Tape, Var};

use crate::error::{Error, Result};

/// Which bound parameters receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    /// Only names starting with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|x| name.starts_with(x.as_str())),
        }
    }
}

/// Reads parameters from a store and registers them on a tape under
/// `prefix + name`, so two models can share one tape.
pub struct Binder<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub prefix: &'a str,
    pub trainable: Trainable,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            prefix: "",
            trainable: Trainable::All,
        }
    }

    pub fn with(store: &'a ParamStore<F>, prefix: &'a str, trainable: Trainable) -> Self {
        Self {
            store,
            prefix,
            trainable,
        }
    }

    pub fn get(&self, tape: &mut Tape<F>, name: &str) -> Result<Var> {
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))?;
        let full = format!("{}{}", self.prefix, name);
        Ok(tape.param_with(&full, value, self.trainable.allows(name)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }
}
