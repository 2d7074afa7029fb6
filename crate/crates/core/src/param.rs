//! Roles of learnable tensors, used by initialization and weight decay.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense or convolution weight drawn with the base std.
    Weight,
    /// Residual output projection drawn with the depth-scaled std.
    ScaledWeight,
    Embedding,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, Self::Weight | Self::ScaledWeight | Self::Embedding)
    }
}
