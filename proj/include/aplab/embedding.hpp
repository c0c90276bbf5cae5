#pragma once

#include "aplab/checkpoint.hpp"
#include "aplab/metrics.hpp"

namespace ap::metrics {

// Default static-embedding provider: one vector per vocabulary entry, taken
// from the model's input embedding matrix.
EmbeddingTable embeddings_from_model(const lm::Model& model);

} // namespace ap::metrics
