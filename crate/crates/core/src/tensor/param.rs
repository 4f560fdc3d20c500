use super::{ContainerEntry, Real, Tensor};

/// A named trainable tensor.
///
/// `decay_exempt` is set exactly for the per-vertex weighting matrices and
/// their factorized parts. `trainable = false` freezes the tensor: it is
/// recorded as a constant and skipped by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub decay_exempt: bool,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            decay_exempt: false,
            trainable: true,
        }
    }

    pub fn decay_exempt(mut self) -> Self {
        self.decay_exempt = true;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn to_entry(&self) -> ContainerEntry {
        ContainerEntry::from_tensor(&self.name, &self.value)
            .with_flags(self.decay_exempt, self.trainable)
    }
}
