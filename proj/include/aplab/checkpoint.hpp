#pragma once

#include <string>

#include "aplab/model.hpp"
#include "aplab/vocab.hpp"

#include <json.hpp>

namespace ap::lm {

// A trained model plus the vocabulary it was trained against.
struct Model {
    corpus::Vocab vocab;
    ParamsF params;

    StopPolicy sentence_stop() const { return StopPolicy{vocab.sentence_end_ids()}; }
};

// Checkpoint layout (little-endian):
//   magic "APLM" | u32 version | u32 vocab_size, context_len, embed_dim,
//   n_layers, n_heads | f32 arrays in for_each_tensor order.
// A JSON sidecar at <path>.json carries the dims, the id-ordered vocabulary
// and free-form metadata; the pair is self-contained.
void save_checkpoint(const Model& model, const std::string& path,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());

Model load_checkpoint(const std::string& path);

nlohmann::ordered_json load_checkpoint_meta(const std::string& path);

} // namespace ap::lm
