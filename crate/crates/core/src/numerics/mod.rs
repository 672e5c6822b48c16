//! Dense tensors, a reverse-mode gradient tape and a finite-difference oracle.

pub mod check;
pub mod tape;
pub mod tensor;

pub use tape::{GradTape, Reduction, Var};
pub use tensor::{
    argmax, matmul, relu, softmax, softmax_cross_entropy, softmax_cross_entropy_grad, softmax_row,
    Tensor,
};
