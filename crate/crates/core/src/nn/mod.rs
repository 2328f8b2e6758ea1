//! A small differentiable kernel with hand-written backward passes.
//!
//! Every layer exposes `forward`, which returns its output plus whatever cache the
//! backward pass needs, and `backward`, which accumulates parameter gradients into a
//! [`Grads`] buffer and returns the gradient with respect to its inputs. Parameters live
//! in a [`ParamStore`] addressed by [`ParamId`].

mod attention;
mod layers;
mod params;
mod tensor;

pub use attention::{AttentionCache, AttentionInputGrads, Neighbor, TemporalAttention};
pub use layers::{
    bce_loss, bce_with_logit, linear, linear_backward, Gru, GruCache, Linear, LinkHead, LinkHeadCache,
    TimeEncoder, BCE_EPS,
};
pub use params::{xavier_uniform, AdamConfig, Grads, ParamId, ParamStore};
pub use tensor::{dot, sigmoid, Tensor2};

pub(crate) use params::{read_exact, read_u32};
