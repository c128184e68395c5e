#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "prunekit/model.hpp"
#include "prunekit/prune.hpp"

using namespace prunekit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab = 64;
    cfg.d_model = 16;
    cfg.n_blocks = 2;
    cfg.n_heads = 4;
    cfg.head_dim = 4;
    cfg.d_mlp = 32;
    cfg.max_seq = 16;
    return cfg;
}

void zero_weights(Model &m) {
    auto zero = [](Tensor2 &t) { std::fill(t.data().begin(), t.data().end(), 0.0f); };
    zero(m.tok_emb);
    zero(m.pos_emb);
    for (Block &b : m.blocks) {
        zero(b.wq);
        zero(b.wk);
        zero(b.wv);
        zero(b.wo);
        zero(b.w_gate);
        zero(b.w_up);
        zero(b.w_down);
    }
    zero(m.w_out);
}

// Straight-line reference forward: per-position double-precision vectors, no
// hooks, independent of the batched implementation.
std::vector<std::vector<double>> oracle_forward(const Model &m,
                                                const std::vector<int> &ids) {
    const int len = int(ids.size());
    const int d = m.cfg.d_model;
    std::vector<std::vector<double>> x(static_cast<size_t>(len), std::vector<double>(static_cast<size_t>(d)));
    for (int t = 0; t < len; ++t) {
        for (int i = 0; i < d; ++i) {
            x[size_t(t)][size_t(i)] = double(m.tok_emb.at(ids[size_t(t)], i)) +
                                      double(m.pos_emb.at(t, i));
        }
    }
    auto rmsnorm = [&](const std::vector<double> &v, const std::vector<float> &g) {
        double ms = 0.0;
        for (double e : v) ms += e * e;
        ms /= double(v.size());
        const double inv = 1.0 / std::sqrt(ms + 1e-6);
        std::vector<double> out(v.size());
        for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv * double(g[i]);
        return out;
    };
    for (const Block &b : m.blocks) {
        const int hd = m.cfg.head_dim;
        const int aw = b.n_heads_live * hd;
        // attention
        std::vector<std::vector<double>> q(static_cast<size_t>(len)), k(static_cast<size_t>(len)), v(static_cast<size_t>(len));
        for (int t = 0; t < len; ++t) {
            const std::vector<double> h = rmsnorm(x[size_t(t)], b.norm1);
            q[size_t(t)].assign(size_t(aw), 0.0);
            k[size_t(t)].assign(size_t(aw), 0.0);
            v[size_t(t)].assign(size_t(aw), 0.0);
            for (int o = 0; o < aw; ++o) {
                for (int i = 0; i < d; ++i) {
                    q[size_t(t)][size_t(o)] += h[size_t(i)] * double(b.wq.at(o, i));
                    k[size_t(t)][size_t(o)] += h[size_t(i)] * double(b.wk.at(o, i));
                    v[size_t(t)][size_t(o)] += h[size_t(i)] * double(b.wv.at(o, i));
                }
            }
        }
        for (int t = 0; t < len; ++t) {
            std::vector<double> attn(size_t(aw), 0.0);
            for (int h = 0; h < b.n_heads_live; ++h) {
                std::vector<double> logits(static_cast<size_t>(t) + 1);
                double mx = -1e300;
                for (int j = 0; j <= t; ++j) {
                    double dot = 0.0;
                    for (int e = 0; e < hd; ++e) {
                        dot += q[size_t(t)][size_t(h * hd + e)] *
                               k[size_t(j)][size_t(h * hd + e)];
                    }
                    logits[size_t(j)] = dot / std::sqrt(double(hd));
                    mx = std::max(mx, logits[size_t(j)]);
                }
                double denom = 0.0;
                for (int j = 0; j <= t; ++j) denom += std::exp(logits[size_t(j)] - mx);
                for (int j = 0; j <= t; ++j) {
                    const double w = std::exp(logits[size_t(j)] - mx) / denom;
                    for (int e = 0; e < hd; ++e) {
                        attn[size_t(h * hd + e)] += w * v[size_t(j)][size_t(h * hd + e)];
                    }
                }
            }
            for (int o = 0; o < d; ++o) {
                double acc = double(b.bo[size_t(o)]);
                for (int c = 0; c < aw; ++c) acc += attn[size_t(c)] * double(b.wo.at(o, c));
                x[size_t(t)][size_t(o)] += acc;
            }
        }
        // gated mlp
        for (int t = 0; t < len; ++t) {
            const std::vector<double> h = rmsnorm(x[size_t(t)], b.norm2);
            std::vector<double> act(static_cast<size_t>(b.d_mlp_live));
            for (int c = 0; c < b.d_mlp_live; ++c) {
                double g = 0.0, u = 0.0;
                for (int i = 0; i < d; ++i) {
                    g += h[size_t(i)] * double(b.w_gate.at(c, i));
                    u += h[size_t(i)] * double(b.w_up.at(c, i));
                }
                act[size_t(c)] = (g / (1.0 + std::exp(-g))) * u;
            }
            for (int o = 0; o < d; ++o) {
                double acc = double(b.bd[size_t(o)]);
                for (int c = 0; c < b.d_mlp_live; ++c) {
                    acc += act[size_t(c)] * double(b.w_down.at(o, c));
                }
                x[size_t(t)][size_t(o)] += acc;
            }
        }
    }
    std::vector<std::vector<double>> logits(static_cast<size_t>(len),
                                            std::vector<double>(static_cast<size_t>(m.cfg.vocab)));
    for (int t = 0; t < len; ++t) {
        const std::vector<double> y = rmsnorm(x[size_t(t)], m.final_norm);
        for (int o = 0; o < m.cfg.vocab; ++o) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += y[size_t(i)] * double(m.w_out.at(o, i));
            logits[size_t(t)][size_t(o)] = acc;
        }
    }
    return logits;
}

std::string temp_path(const std::string &name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("init is deterministic per seed") {
    Rng a(1);
    Rng b(1);
    const Model ma = init_model(tiny_config(), a);
    const Model mb = init_model(tiny_config(), b);
    CHECK(model_hash(ma) == model_hash(mb));
    Rng c(2);
    const Model mc = init_model(tiny_config(), c);
    CHECK(model_hash(ma) != model_hash(mc));
}

TEST_CASE("init shapes follow the config") {
    ModelConfig cfg = tiny_config();
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.head_dim = 4;
    Rng rng(3);
    const Model m = init_model(cfg, rng);
    CHECK(m.blocks[0].wq.rows() == 16);
    CHECK(m.blocks[0].wq.cols() == 16);
    CHECK(m.blocks[0].wo.rows() == 16);
    CHECK(m.blocks[0].w_gate.rows() == cfg.d_mlp);
    CHECK(m.blocks[0].w_down.cols() == cfg.d_mlp);
}

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.n_heads = 3; // 16 % 3 != 0
    Rng rng(1);
    CHECK_THROWS_AS(init_model(cfg, rng), ConfigError);
    cfg = tiny_config();
    cfg.n_blocks = 0;
    CHECK_THROWS_AS(init_model(cfg, rng), ConfigError);
}

TEST_CASE("param_count matches the serialized payload") {
    Rng rng(5);
    const Model m = init_model(tiny_config(), rng);
    const auto bytes = model_to_bytes(m);
    // payload after magic, version, header length and header text
    uint32_t hlen = uint32_t(bytes[8]) | (uint32_t(bytes[9]) << 8) |
                    (uint32_t(bytes[10]) << 16) | (uint32_t(bytes[11]) << 24);
    const long long payload = (long long)bytes.size() - 12 - hlen;
    CHECK(payload == 4 * param_count(m));
}

TEST_CASE("zero-weight model yields zero logits and taps") {
    Rng rng(5);
    Model m = init_model(tiny_config(), rng);
    zero_weights(m);
    std::vector<int> ids = {1, 2, 3, 4};
    std::vector<ActivationTap> taps;
    const Tensor2 logits = forward(m, ids, &taps);
    for (float v : logits.data()) CHECK(v == 0.0f);
    REQUIRE(taps.size() == 4); // 2 per block
    for (const auto &tap : taps) {
        for (float v : tap.values.data()) CHECK(v == 0.0f);
    }
}

TEST_CASE("length-1 attention is the token's value projection") {
    Rng rng(6);
    const Model m = init_model(tiny_config(), rng);
    std::vector<int> ids = {7};
    std::vector<ActivationTap> taps;
    forward(m, ids, &taps);

    // recompute v for the single position of block 0 by hand
    const Block &b = m.blocks[0];
    std::vector<double> x(static_cast<size_t>(m.cfg.d_model));
    for (int i = 0; i < m.cfg.d_model; ++i) {
        x[size_t(i)] = double(m.tok_emb.at(7, i)) + double(m.pos_emb.at(0, i));
    }
    double ms = 0.0;
    for (double e : x) ms += e * e;
    ms /= double(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    const int aw = b.n_heads_live * m.cfg.head_dim;
    for (int o = 0; o < aw; ++o) {
        double acc = 0.0;
        for (int i = 0; i < m.cfg.d_model; ++i) {
            acc += x[size_t(i)] * inv * double(b.norm1[size_t(i)]) * double(b.wv.at(o, i));
        }
        CHECK(std::abs(double(taps[0].values.at(0, o)) - acc) < 1e-5);
    }
}

TEST_CASE("forward matches the straight-line oracle") {
    Rng rng(8);
    const Model m = init_model(tiny_config(), rng);
    std::vector<int> ids = {5, 0, 63, 17, 2, 9, 33, 8};
    const Tensor2 logits = forward(m, ids);
    const auto want = oracle_forward(m, ids);
    for (int t = 0; t < logits.rows(); ++t) {
        for (int j = 0; j < logits.cols(); ++j) {
            CHECK(std::abs(double(logits.at(t, j)) - want[size_t(t)][size_t(j)]) < 1e-4);
        }
    }
}

TEST_CASE("causality: later tokens never affect earlier logits") {
    Rng rng(9);
    const Model m = init_model(tiny_config(), rng);
    std::vector<int> ids = {5, 6, 7, 8, 9, 10};
    const Tensor2 base = forward(m, ids);
    for (int cut = 1; cut < int(ids.size()); ++cut) {
        std::vector<int> perturbed = ids;
        perturbed[size_t(cut)] = (ids[size_t(cut)] + 13) % m.cfg.vocab;
        const Tensor2 alt = forward(m, perturbed);
        for (int t = 0; t < cut; ++t) {
            for (int j = 0; j < base.cols(); ++j) {
                CHECK(base.at(t, j) == alt.at(t, j));
            }
        }
    }
}

TEST_CASE("forward input validation") {
    Rng rng(10);
    const Model m = init_model(tiny_config(), rng);
    std::vector<int> bad = {0, 64};
    CHECK_THROWS_AS(forward(m, bad), InputError);
    std::vector<int> negative = {-1};
    CHECK_THROWS_AS(forward(m, negative), InputError);
    std::vector<int> too_long(size_t(m.cfg.max_seq) + 1, 0);
    CHECK_THROWS_AS(forward(m, too_long), InputError);
    std::vector<int> empty;
    CHECK_THROWS_AS(forward(m, empty), InputError);
}

TEST_CASE("save/load round-trip is bit-identical") {
    Rng rng(11);
    const Model m = init_model(tiny_config(), rng);
    const std::string path = temp_path("pk_model_rt.pkit");
    save_model(m, path);
    const Model loaded = load_model(path);
    const std::string path2 = temp_path("pk_model_rt2.pkit");
    save_model(loaded, path2);
    std::ifstream f1(path, std::ios::binary);
    std::ifstream f2(path2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), {});
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("corrupted magic and truncation are rejected") {
    Rng rng(12);
    const Model m = init_model(tiny_config(), rng);
    auto bytes = model_to_bytes(m);
    auto corrupted = bytes;
    corrupted[0] = 'X';
    CHECK_THROWS_AS(model_from_bytes(corrupted), FormatError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    CHECK_THROWS_AS(model_from_bytes(truncated), FormatError);
    auto extended = bytes;
    extended.push_back(0);
    CHECK_THROWS_AS(model_from_bytes(extended), FormatError);
}

TEST_CASE("pruned model with non-uniform shapes round-trips") {
    Rng rng(13);
    Model m = init_model(tiny_config(), rng);

    // drop 3 MLP channels in block 0 and one head in block 1
    PruneMask mlp_mask;
    mlp_mask.site = {0, SiteKind::MlpChannels};
    mlp_mask.keep.assign(size_t(m.cfg.d_mlp), 1);
    mlp_mask.keep[3] = mlp_mask.keep[7] = mlp_mask.keep[8] = 0;
    BiasVector zero_bias;
    zero_bias.site = mlp_mask.site;
    zero_bias.values.assign(size_t(m.cfg.d_model), 0.0f);
    apply_prune(m, mlp_mask.site, mlp_mask, zero_bias);

    PruneMask head_mask;
    head_mask.site = {1, SiteKind::AttnHeads};
    head_mask.keep = {1, 0, 1, 1};
    zero_bias.site = head_mask.site;
    apply_prune(m, head_mask.site, head_mask, zero_bias);

    CHECK(m.blocks[0].d_mlp_live == 29);
    CHECK(m.blocks[1].n_heads_live == 3);

    const auto bytes = model_to_bytes(m);
    const Model loaded = model_from_bytes(bytes);
    CHECK(model_to_bytes(loaded) == bytes);

    // forward still type-checks with non-uniform live shapes
    std::vector<int> ids = {1, 2, 3};
    const Tensor2 logits = forward(loaded, ids);
    CHECK(logits.rows() == 3);
    CHECK(logits.cols() == m.cfg.vocab);
    CHECK(logits.all_finite());
}
