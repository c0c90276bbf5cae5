#include "aplab/embedding.hpp"

namespace ap::metrics {

EmbeddingTable embeddings_from_model(const lm::Model& model) {
    const auto& cfg = model.params.cfg;
    EmbeddingTable table(cfg.embed_dim);
    for (TokenId id = 0; id < cfg.vocab_size; ++id) {
        const float* row = model.params.tok_embed.data() + std::size_t(id) * cfg.embed_dim;
        table.set(id, std::vector<float>(row, row + cfg.embed_dim));
    }
    return table;
}

} // namespace ap::metrics
