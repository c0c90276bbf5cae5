#include "aplab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ap::lm {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

constexpr char kMagic[4] = {'A', 'P', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path,
                     const nlohmann::ordered_json& meta) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::io, "cannot write checkpoint: " + path);
        out.write(kMagic, 4);
        write_u32(out, kVersion);
        const auto& cfg = model.params.cfg;
        write_u32(out, cfg.vocab_size);
        write_u32(out, cfg.context_len);
        write_u32(out, cfg.embed_dim);
        write_u32(out, cfg.n_layers);
        write_u32(out, cfg.n_heads);
        model.params.for_each_tensor([&](const std::vector<float>& t) {
            out.write(reinterpret_cast<const char*>(t.data()),
                      static_cast<std::streamsize>(t.size() * sizeof(float)));
        });
        require(out.good(), ErrorKind::io, "checkpoint write failed: " + path);
    }

    nlohmann::ordered_json side;
    side["format"] = "aplab-checkpoint";
    side["version"] = kVersion;
    side["model"] = {{"vocab_size", model.params.cfg.vocab_size},
                     {"context_len", model.params.cfg.context_len},
                     {"embed_dim", model.params.cfg.embed_dim},
                     {"n_layers", model.params.cfg.n_layers},
                     {"n_heads", model.params.cfg.n_heads},
                     {"param_count", model.params.param_count()}};
    side["vocab"] = model.vocab.tokens();
    side["meta"] = meta;
    std::ofstream js(path + ".json", std::ios::binary | std::ios::trunc);
    require(js.good(), ErrorKind::io, "cannot write checkpoint sidecar: " + path + ".json");
    js << side.dump(2) << '\n';
    require(js.good(), ErrorKind::io, "sidecar write failed");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, kMagic, 4) == 0, ErrorKind::io,
            "not an aplab checkpoint: " + path);
    require(read_u32(in) == kVersion, ErrorKind::io, "unsupported checkpoint version");
    ModelConfig cfg;
    cfg.vocab_size = read_u32(in);
    cfg.context_len = read_u32(in);
    cfg.embed_dim = read_u32(in);
    cfg.n_layers = read_u32(in);
    cfg.n_heads = read_u32(in);
    require(in.good(), ErrorKind::io, "truncated checkpoint header");
    cfg.validate();

    Model model;
    model.params = ParamsF::zeros(cfg);
    model.params.for_each_tensor([&](std::vector<float>& t) {
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    require(in.good(), ErrorKind::io, "truncated checkpoint weights: " + path);
    model.params.check_finite("loaded checkpoint");

    auto side = load_checkpoint_meta(path);
    require(side.contains("vocab") && side["vocab"].is_array(), ErrorKind::io,
            "checkpoint sidecar missing vocab");
    std::vector<std::string> tokens = side["vocab"].get<std::vector<std::string>>();
    require(tokens.size() == cfg.vocab_size, ErrorKind::io,
            "sidecar vocab size does not match checkpoint dims");
    model.vocab = corpus::Vocab::from_token_list(std::move(tokens));
    return model;
}

nlohmann::ordered_json load_checkpoint_meta(const std::string& path) {
    std::ifstream js(path + ".json", std::ios::binary);
    require(js.good(), ErrorKind::io, "cannot open checkpoint sidecar: " + path + ".json");
    nlohmann::ordered_json side;
    try {
        js >> side;
    } catch (const std::exception& e) {
        fail(ErrorKind::io, std::string("malformed checkpoint sidecar: ") + e.what());
    }
    return side;
}

} // namespace ap::lm
