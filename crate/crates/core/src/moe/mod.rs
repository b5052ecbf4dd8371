//! The mixture-of-low-rank-experts layer.
//!
//! [`GoatLayer`] holds a frozen base weight, `E` low-rank experts and a
//! linear top-k router. At initialization the base weight is shifted by
//! `W_res = (1/E)Σ sᵢ·bⁱaⁱ`, so that averaging over routing decisions the
//! layer realises exactly the pretrained weight.
//!
//! Gradients are computed by hand ([`GoatLayer::backward`]); the top-k set
//! of a token is treated as constant, and the balance loss reaches the
//! router only through the mean softmax probabilities.

mod balance;
mod init;
mod layer;
mod router;
mod snapshot;

pub use balance::{balance_loss, load_fractions, mean_probabilities, BalanceContext};
pub use init::{
    build_goat_layer, compute_w_res, compute_w_res_scaled, goat_s_scales, theoretical_scale,
    LayerConfig, ScaleDenominator, Variant,
};
pub use layer::{router_backward, GoatLayer, LayerGrads, LayerMeta};
pub use router::{restricted_softmax, route_logits, softmax, RouteResult, Router, ROUTER_INIT_STD};
pub use snapshot::{Manifest, MANIFEST};
