//! Semantic tokens: the grid type, extractors, and token-level losses.

mod extractor;
mod grid;
mod rank;

pub use extractor::{
    extract_batch_as, extract_tokens, extractor_by_name, PatchEmbedExtractor, TokenExtractor,
    ToyExtractor,
};
pub use grid::{exact_sqrt, tokens_to_spatial, tokens_to_spatial_batch, TokenGrid, TOKEN_MAGIC, TOKEN_VERSION};
pub use rank::{
    rank_loss, rank_loss_batch, rank_loss_matrix, soft_rank, soft_rank_batch, soft_rank_matrix,
    token_mse, token_mse_batch, SINGULAR_VALUE_FLOOR,
};
