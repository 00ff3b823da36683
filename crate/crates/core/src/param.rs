use crate::tensor::{Element, Tensor};

/// A trainable tensor with its checkpoint name.
#[derive(Clone, Debug)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (matrix weights only).
    pub decay: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, tensor: &Tensor<T>, decay: bool) -> Self {
        Param {
            name: name.into(),
            tensor: tensor.clone(),
            decay,
        }
    }
}
