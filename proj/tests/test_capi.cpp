#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "aplab.h"
#include "support/corpusgen.hpp"

namespace fs = std::filesystem;

namespace {

struct Fixture {
    fs::path root;
    std::string corpus;
    std::string ckpt;

    Fixture() {
        root = fs::temp_directory_path() / "aplab_capi_test";
        fs::remove_all(root);
        fs::create_directories(root);
        testsupport::CorpusSpec spec;
        spec.sentences = 40;
        spec.seed = 77;
        corpus = (root / "corpus.txt").string();
        std::ofstream out(corpus, std::ios::binary);
        out << testsupport::generate_corpus(spec);
        out.close();
        ckpt = (root / "model.ckpt").string();
        std::string corpus_json = "[\"" + corpus + "\"]";
        const char* options = R"({
          "model": {"vocab_size": 320, "context_len": 48, "embed_dim": 16, "n_layers": 1, "n_heads": 2},
          "train": {"steps": 60, "batch_size": 4}
        })";
        REQUIRE(ap_train(corpus_json.c_str(), options, 5, ckpt.c_str()) == AP_OK);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

} // namespace

TEST_CASE("version and error strings exist") {
    CHECK(ap_version() != nullptr);
    CHECK(ap_last_error() != nullptr);
}

TEST_CASE("train then open a checkpoint through the C surface") {
    Fixture& f = fixture();
    CHECK(fs::exists(f.ckpt));
    CHECK(fs::exists(f.ckpt + ".json"));

    ap_model* model = nullptr;
    REQUIRE(ap_model_open(f.ckpt.c_str(), &model) == AP_OK);
    uint32_t vocab = 0, context = 0;
    CHECK(ap_model_vocab_size(model, &vocab) == AP_OK);
    CHECK(ap_model_context_len(model, &context) == AP_OK);
    CHECK(vocab > 3);
    CHECK(context == 48);

    const char* tok = nullptr;
    REQUIRE(ap_model_token_string(model, 1, &tok) == AP_OK);
    CHECK(std::string(tok) == "<|endoftext|>");
    CHECK(ap_model_token_string(model, vocab + 10, &tok) == AP_ERR_INVALID_ARGUMENT);
    CHECK(std::string(ap_last_error()).size() > 0);

    // tokenize/detokenize round trip at the id level
    std::vector<uint32_t> ids(64);
    size_t n = 0;
    REQUIRE(ap_model_tokenize(model, "the miller carried the baskets .", ids.data(), ids.size(),
                              &n) == AP_OK);
    REQUIRE(n >= 6);
    char text[256];
    size_t text_len = 0;
    REQUIRE(ap_model_detokenize(model, ids.data(), n, text, sizeof(text), &text_len) == AP_OK);
    std::vector<uint32_t> ids2(64);
    size_t n2 = 0;
    REQUIRE(ap_model_tokenize(model, text, ids2.data(), ids2.size(), &n2) == AP_OK);
    REQUIRE(n2 == n);
    CHECK(std::memcmp(ids.data(), ids2.data(), n * sizeof(uint32_t)) == 0);

    // buffer too small is reported, with the needed size
    size_t need = 0;
    CHECK(ap_model_tokenize(model, "the miller carried", ids.data(), 1, &need) ==
          AP_ERR_INVALID_ARGUMENT);
    CHECK(need == 3);

    ap_model_free(model);
}

TEST_CASE("local backend: loss, decode, grad are consistent") {
    Fixture& f = fixture();
    ap_model* model = nullptr;
    REQUIRE(ap_model_open(f.ckpt.c_str(), &model) == AP_OK);
    uint32_t vocab = 0;
    ap_model_vocab_size(model, &vocab);

    ap_backend* be = nullptr;
    REQUIRE(ap_backend_local(model, &be) == AP_OK);
    int grad_ok = 0;
    CHECK(ap_backend_supports_grad(be, &grad_ok) == AP_OK);
    CHECK(grad_ok == 1);

    uint32_t prompt[3] = {5, 9, 12};
    uint32_t target[2] = {6, 7};
    double loss = 0.0;
    REQUIRE(ap_backend_loss(be, prompt, 3, target, 2, &loss) == AP_OK);
    CHECK(loss >= 0.0);

    std::vector<float> grad(3 * vocab);
    double loss2 = 0.0;
    REQUIRE(ap_backend_grad(be, prompt, 3, target, 2, grad.data(), &loss2) == AP_OK);
    CHECK(loss2 == loss);

    uint32_t out[16];
    size_t out_len = 0;
    int stopped = 0, truncated = 0;
    REQUIRE(ap_backend_decode(be, prompt, 3, 8, nullptr, 0, out, 16, &out_len, &stopped,
                              &truncated) == AP_OK);
    CHECK(out_len >= 1);
    uint32_t out_b[16];
    size_t out_len_b = 0;
    REQUIRE(ap_backend_decode(be, prompt, 3, 8, nullptr, 0, out_b, 16, &out_len_b, nullptr,
                              nullptr) == AP_OK);
    REQUIRE(out_len_b == out_len);
    CHECK(std::memcmp(out, out_b, out_len * sizeof(uint32_t)) == 0);

    // invalid token ids are rejected
    uint32_t bad[1] = {vocab + 5};
    CHECK(ap_backend_loss(be, bad, 1, target, 2, &loss) == AP_ERR_INVALID_ARGUMENT);

    ap_backend_free(be);
    ap_model_free(model);
}

TEST_CASE("server + remote backend through the C surface") {
    Fixture& f = fixture();
    ap_model* model = nullptr;
    REQUIRE(ap_model_open(f.ckpt.c_str(), &model) == AP_OK);

    ap_server* server = nullptr;
    REQUIRE(ap_server_start(model, "127.0.0.1", 0, 2, nullptr, 1, &server) == AP_OK);
    int port = 0;
    REQUIRE(ap_server_port(server, &port) == AP_OK);
    CHECK(port > 0);

    std::string url = "http://127.0.0.1:" + std::to_string(port);
    ap_backend* remote = nullptr;
    REQUIRE(ap_backend_remote(model, url.c_str(), 5000, 1, nullptr, 1, &remote) == AP_OK);
    ap_backend* local = nullptr;
    REQUIRE(ap_backend_local(model, &local) == AP_OK);

    uint32_t prompt[2] = {4, 8};
    uint32_t target[2] = {5, 6};
    double remote_loss = 0.0, local_loss = 0.0;
    REQUIRE(ap_backend_loss(remote, prompt, 2, target, 2, &remote_loss) == AP_OK);
    REQUIRE(ap_backend_loss(local, prompt, 2, target, 2, &local_loss) == AP_OK);
    CHECK(remote_loss == local_loss);

    ap_backend_free(remote);
    ap_backend_free(local);
    ap_server_stop(server);
    ap_model_free(model);
}

TEST_CASE("error paths surface proper status codes") {
    ap_model* model = nullptr;
    CHECK(ap_model_open("/no/such/checkpoint.bin", &model) == AP_ERR_IO);
    CHECK(std::string(ap_last_error()).find("checkpoint") != std::string::npos);

    CHECK(ap_train(nullptr, nullptr, 0, nullptr) == AP_ERR_INVALID_ARGUMENT);
    CHECK(ap_train("not json", nullptr, 0, "x.ckpt") == AP_ERR_CONFIG);

    char* manifest = nullptr;
    CHECK(ap_pipeline_run("/no/such/config.json", nullptr, nullptr, 0, &manifest) ==
          AP_ERR_CONFIG);
}

TEST_CASE("standalone dataset op via the C surface") {
    Fixture& f = fixture();
    std::string out = (f.root / "dataset.jsonl").string();
    const char* options = R"({
      "sample_count": 8,
      "filters": {"min_prompt_len": 10, "max_prompt_len": 18, "min_cont_len": 1,
                   "memorization_bleu_max": 1.0, "max_new": 6}
    })";
    REQUIRE(ap_dataset(f.ckpt.c_str(), nullptr, options, 3, out.c_str()) == AP_OK);
    CHECK(fs::exists(out));
}
