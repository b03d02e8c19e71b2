use crate::tensor::Tensor;

/// Ordered record of named intermediate feature maps from one forward pass.
///
/// Every entry is stored in `[N, C, H, W]` layout at the padded working
/// resolution, so all entries of one trace share their sample positions.
#[derive(Clone, Debug, Default)]
pub struct ActivationTrace {
    entries: Vec<(String, Tensor)>,
}

impl ActivationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor) {
        debug_assert!(self.get(&name).is_none(), "duplicate trace entry {name}");
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}
