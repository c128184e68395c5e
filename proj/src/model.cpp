#include "prunekit/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace prunekit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'K', 'I', 'T'};
constexpr uint32_t kFormatVersion = 1;
constexpr float kNormEps = 1e-6f;

// x scaled per row to unit RMS, then by the per-feature gain.
Tensor2 rms_norm(const Tensor2 &x, const std::vector<float> &gain) {
    Tensor2 out(x.rows(), x.cols());
    for (int t = 0; t < x.rows(); ++t) {
        const float *in = x.row(t);
        float *o = out.row(t);
        double ms = 0.0;
        for (int i = 0; i < x.cols(); ++i) ms += double(in[i]) * double(in[i]);
        ms /= double(x.cols());
        const double inv = 1.0 / std::sqrt(ms + double(kNormEps));
        for (int i = 0; i < x.cols(); ++i) {
            o[i] = float(double(in[i]) * inv * double(gain[i]));
        }
    }
    return out;
}

void add_bias_inplace(Tensor2 &x, const std::vector<float> &bias) {
    for (int t = 0; t < x.rows(); ++t) {
        float *row = x.row(t);
        for (int i = 0; i < x.cols(); ++i) row[i] += bias[i];
    }
}

void add_inplace(Tensor2 &x, const Tensor2 &y) {
    for (size_t i = 0; i < x.size(); ++i) x.data()[i] += y.data()[i];
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

// Causal multi-head attention over already projected q/k/v, all shaped
// (len x n_heads*head_dim). Softmax runs over the prefix j <= t per row, so
// no sentinel infinities are ever stored.
Tensor2 causal_attention(const Tensor2 &q, const Tensor2 &k, const Tensor2 &v,
                         int n_heads, int head_dim) {
    const int len = q.rows();
    Tensor2 out(len, q.cols());
    const double scale = 1.0 / std::sqrt(double(head_dim));
    std::vector<double> w(len);
    for (int h = 0; h < n_heads; ++h) {
        const int base = h * head_dim;
        for (int t = 0; t < len; ++t) {
            double mx = -1e300;
            for (int j = 0; j <= t; ++j) {
                double dot = 0.0;
                for (int d = 0; d < head_dim; ++d) {
                    dot += double(q.at(t, base + d)) * double(k.at(j, base + d));
                }
                w[j] = dot * scale;
                if (w[j] > mx) mx = w[j];
            }
            double sum = 0.0;
            for (int j = 0; j <= t; ++j) {
                w[j] = std::exp(w[j] - mx);
                sum += w[j];
            }
            for (int d = 0; d < head_dim; ++d) {
                double acc = 0.0;
                for (int j = 0; j <= t; ++j) {
                    acc += (w[j] / sum) * double(v.at(j, base + d));
                }
                out.at(t, base + d) = float(acc);
            }
        }
    }
    return out;
}

void append_u32(std::vector<uint8_t> &out, uint32_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t((v >> 8) & 0xff));
    out.push_back(uint8_t((v >> 16) & 0xff));
    out.push_back(uint8_t((v >> 24) & 0xff));
}

void append_f32(std::vector<uint8_t> &out, float f) {
    append_u32(out, std::bit_cast<uint32_t>(f));
}

struct ByteReader {
    const std::vector<uint8_t> &bytes;
    size_t pos = 0;

    uint32_t read_u32() {
        if (pos + 4 > bytes.size()) throw FormatError("model file truncated");
        uint32_t v = uint32_t(bytes[pos]) | (uint32_t(bytes[pos + 1]) << 8) |
                     (uint32_t(bytes[pos + 2]) << 16) |
                     (uint32_t(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    float read_f32() { return std::bit_cast<float>(read_u32()); }

    void read_floats(float *dst, size_t n) {
        for (size_t i = 0; i < n; ++i) dst[i] = read_f32();
    }
};

void append_tensor(std::vector<uint8_t> &out, const Tensor2 &t) {
    for (float f : t.data()) append_f32(out, f);
}

void append_vec(std::vector<uint8_t> &out, const std::vector<float> &v) {
    for (float f : v) append_f32(out, f);
}

Tensor2 read_tensor(ByteReader &r, int rows, int cols) {
    Tensor2 t(rows, cols);
    r.read_floats(t.data().data(), t.size());
    return t;
}

std::vector<float> read_vec(ByteReader &r, int n) {
    std::vector<float> v(static_cast<size_t>(n));
    r.read_floats(v.data(), v.size());
    return v;
}

} // namespace

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string &what) {
        if (!ok) throw ConfigError("invalid model config: " + what);
    };
    need(vocab >= 1, "vocab must be >= 1");
    need(d_model >= 1, "d_model must be >= 1");
    need(n_blocks >= 1, "n_blocks must be >= 1");
    need(n_heads >= 1, "n_heads must be >= 1");
    need(head_dim >= 1, "head_dim must be >= 1");
    need(d_mlp >= 1, "d_mlp must be >= 1");
    need(max_seq >= 1, "max_seq must be >= 1");
    need(d_model == n_heads * head_dim,
         "d_model (" + std::to_string(d_model) + ") must equal n_heads*head_dim (" +
             std::to_string(n_heads * head_dim) + ")");
}

std::string site_kind_name(SiteKind k) {
    return k == SiteKind::AttnHeads ? "attn" : "mlp";
}

std::vector<PruneSite> prune_sites(const Model &m) {
    std::vector<PruneSite> sites;
    sites.reserve(m.blocks.size() * 2);
    for (int b = 0; b < int(m.blocks.size()); ++b) {
        sites.push_back({b, SiteKind::AttnHeads});
        sites.push_back({b, SiteKind::MlpChannels});
    }
    return sites;
}

int site_index(const Model &m, PruneSite site) {
    (void)m;
    return site.block * 2 + (site.kind == SiteKind::MlpChannels ? 1 : 0);
}

int site_channels(const Model &m, PruneSite site) {
    const Block &b = m.blocks.at(site.block);
    return site.kind == SiteKind::AttnHeads ? b.n_heads_live * m.cfg.head_dim
                                            : b.d_mlp_live;
}

int site_units(const Model &m, PruneSite site) {
    const Block &b = m.blocks.at(site.block);
    return site.kind == SiteKind::AttnHeads ? b.n_heads_live : b.d_mlp_live;
}

Model init_model(const ModelConfig &cfg, Rng &rng) {
    cfg.validate();
    constexpr float kInitStd = 0.02f;
    Model m;
    m.cfg = cfg;
    // draw order is part of the determinism contract: embeddings, then each
    // block's wq, wk, wv, wo, w_gate, w_up, w_down, then the output matrix
    m.tok_emb = rng.normal(cfg.vocab, cfg.d_model, kInitStd);
    m.pos_emb = rng.normal(cfg.max_seq, cfg.d_model, kInitStd);
    const int attn_width = cfg.n_heads * cfg.head_dim;
    m.blocks.resize(size_t(cfg.n_blocks));
    for (Block &b : m.blocks) {
        b.norm1.assign(size_t(cfg.d_model), 1.0f);
        b.norm2.assign(size_t(cfg.d_model), 1.0f);
        b.wq = rng.normal(attn_width, cfg.d_model, kInitStd);
        b.wk = rng.normal(attn_width, cfg.d_model, kInitStd);
        b.wv = rng.normal(attn_width, cfg.d_model, kInitStd);
        b.wo = rng.normal(cfg.d_model, attn_width, kInitStd);
        b.bo.assign(size_t(cfg.d_model), 0.0f);
        b.w_gate = rng.normal(cfg.d_mlp, cfg.d_model, kInitStd);
        b.w_up = rng.normal(cfg.d_mlp, cfg.d_model, kInitStd);
        b.w_down = rng.normal(cfg.d_model, cfg.d_mlp, kInitStd);
        b.bd.assign(size_t(cfg.d_model), 0.0f);
        b.n_heads_live = cfg.n_heads;
        b.d_mlp_live = cfg.d_mlp;
    }
    m.final_norm.assign(size_t(cfg.d_model), 1.0f);
    m.w_out = rng.normal(cfg.vocab, cfg.d_model, kInitStd);
    return m;
}

Tensor2 forward(const Model &m, std::span<const int> tokens,
                std::vector<ActivationTap> *taps) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (int(tokens.size()) > m.cfg.max_seq) {
        throw InputError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq " + std::to_string(m.cfg.max_seq));
    }
    const int len = int(tokens.size());
    Tensor2 x(len, m.cfg.d_model);
    for (int t = 0; t < len; ++t) {
        const int id = tokens[t];
        if (id < 0 || id >= m.cfg.vocab) {
            throw InputError("token id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(m.cfg.vocab) + ")");
        }
        const float *e = m.tok_emb.row(id);
        const float *p = m.pos_emb.row(t);
        float *o = x.row(t);
        for (int i = 0; i < m.cfg.d_model; ++i) o[i] = e[i] + p[i];
    }

    if (taps) {
        taps->clear();
        taps->reserve(m.blocks.size() * 2);
    }

    for (int bi = 0; bi < int(m.blocks.size()); ++bi) {
        const Block &b = m.blocks[bi];

        Tensor2 h = rms_norm(x, b.norm1);
        Tensor2 q = matmul_nt(h, b.wq);
        Tensor2 k = matmul_nt(h, b.wk);
        Tensor2 v = matmul_nt(h, b.wv);
        Tensor2 attn_in =
            causal_attention(q, k, v, b.n_heads_live, m.cfg.head_dim);
        if (taps) taps->push_back({{bi, SiteKind::AttnHeads}, attn_in});
        Tensor2 attn_out = matmul_nt(attn_in, b.wo);
        add_bias_inplace(attn_out, b.bo);
        add_inplace(x, attn_out);

        Tensor2 h2 = rms_norm(x, b.norm2);
        Tensor2 g = matmul_nt(h2, b.w_gate);
        Tensor2 u = matmul_nt(h2, b.w_up);
        Tensor2 act(len, b.d_mlp_live);
        for (size_t i = 0; i < act.size(); ++i) {
            act.data()[i] = float(silu(double(g.data()[i])) * double(u.data()[i]));
        }
        if (taps) taps->push_back({{bi, SiteKind::MlpChannels}, act});
        Tensor2 mlp_out = matmul_nt(act, b.w_down);
        add_bias_inplace(mlp_out, b.bd);
        add_inplace(x, mlp_out);
    }

    Tensor2 y = rms_norm(x, m.final_norm);
    return matmul_nt(y, m.w_out);
}

std::vector<uint8_t> model_to_bytes(const Model &m) {
    json header;
    header["config"] = {{"vocab", m.cfg.vocab},     {"d_model", m.cfg.d_model},
                        {"n_blocks", m.cfg.n_blocks}, {"n_heads", m.cfg.n_heads},
                        {"head_dim", m.cfg.head_dim}, {"d_mlp", m.cfg.d_mlp},
                        {"max_seq", m.cfg.max_seq}};
    json live = json::array();
    for (const Block &b : m.blocks) {
        live.push_back({{"n_heads", b.n_heads_live}, {"d_mlp", b.d_mlp_live}});
    }
    header["blocks"] = live;
    const std::string htext = header.dump();

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    append_u32(out, kFormatVersion);
    append_u32(out, uint32_t(htext.size()));
    out.insert(out.end(), htext.begin(), htext.end());

    append_tensor(out, m.tok_emb);
    append_tensor(out, m.pos_emb);
    for (const Block &b : m.blocks) {
        append_vec(out, b.norm1);
        append_vec(out, b.norm2);
        append_tensor(out, b.wq);
        append_tensor(out, b.wk);
        append_tensor(out, b.wv);
        append_tensor(out, b.wo);
        append_vec(out, b.bo);
        append_tensor(out, b.w_gate);
        append_tensor(out, b.w_up);
        append_tensor(out, b.w_down);
        append_vec(out, b.bd);
    }
    append_vec(out, m.final_norm);
    append_tensor(out, m.w_out);
    return out;
}

Model model_from_bytes(const std::vector<uint8_t> &bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not a PKIT model file (bad magic)");
    }
    ByteReader r{bytes, 4};
    const uint32_t version = r.read_u32();
    if (version != kFormatVersion) {
        throw FormatError("unsupported model format version " +
                          std::to_string(version));
    }
    const uint32_t hlen = r.read_u32();
    if (r.pos + hlen > bytes.size()) throw FormatError("model file truncated");
    json header;
    try {
        header = json::parse(bytes.begin() + long(r.pos),
                             bytes.begin() + long(r.pos + hlen));
    } catch (const json::exception &e) {
        throw FormatError(std::string("bad model header: ") + e.what());
    }
    r.pos += hlen;

    Model m;
    try {
        const json &c = header.at("config");
        m.cfg.vocab = c.at("vocab").get<int>();
        m.cfg.d_model = c.at("d_model").get<int>();
        m.cfg.n_blocks = c.at("n_blocks").get<int>();
        m.cfg.n_heads = c.at("n_heads").get<int>();
        m.cfg.head_dim = c.at("head_dim").get<int>();
        m.cfg.d_mlp = c.at("d_mlp").get<int>();
        m.cfg.max_seq = c.at("max_seq").get<int>();
        m.cfg.validate();

        const json &live = header.at("blocks");
        if (int(live.size()) != m.cfg.n_blocks) {
            throw FormatError("live-shape table has " +
                              std::to_string(live.size()) + " entries, config says " +
                              std::to_string(m.cfg.n_blocks) + " blocks");
        }
        m.blocks.resize(live.size());
        for (size_t i = 0; i < live.size(); ++i) {
            Block &b = m.blocks[i];
            b.n_heads_live = live[i].at("n_heads").get<int>();
            b.d_mlp_live = live[i].at("d_mlp").get<int>();
            if (b.n_heads_live < 1 || b.n_heads_live > m.cfg.n_heads ||
                b.d_mlp_live < 1 || b.d_mlp_live > m.cfg.d_mlp) {
                throw FormatError("block " + std::to_string(i) +
                                  " live shapes out of range");
            }
        }
    } catch (const json::exception &e) {
        throw FormatError(std::string("bad model header: ") + e.what());
    }

    m.tok_emb = read_tensor(r, m.cfg.vocab, m.cfg.d_model);
    m.pos_emb = read_tensor(r, m.cfg.max_seq, m.cfg.d_model);
    for (Block &b : m.blocks) {
        const int attn_width = b.n_heads_live * m.cfg.head_dim;
        b.norm1 = read_vec(r, m.cfg.d_model);
        b.norm2 = read_vec(r, m.cfg.d_model);
        b.wq = read_tensor(r, attn_width, m.cfg.d_model);
        b.wk = read_tensor(r, attn_width, m.cfg.d_model);
        b.wv = read_tensor(r, attn_width, m.cfg.d_model);
        b.wo = read_tensor(r, m.cfg.d_model, attn_width);
        b.bo = read_vec(r, m.cfg.d_model);
        b.w_gate = read_tensor(r, b.d_mlp_live, m.cfg.d_model);
        b.w_up = read_tensor(r, b.d_mlp_live, m.cfg.d_model);
        b.w_down = read_tensor(r, m.cfg.d_model, b.d_mlp_live);
        b.bd = read_vec(r, m.cfg.d_model);
    }
    m.final_norm = read_vec(r, m.cfg.d_model);
    m.w_out = read_tensor(r, m.cfg.vocab, m.cfg.d_model);
    if (r.pos != bytes.size()) {
        throw FormatError("model file has " +
                          std::to_string(bytes.size() - r.pos) +
                          " trailing bytes");
    }
    return m;
}

void save_model(const Model &m, const std::string &path) {
    const std::vector<uint8_t> bytes = model_to_bytes(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char *>(bytes.data()), long(bytes.size()));
    if (!f) throw InputError("failed writing " + path);
}

Model load_model(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return model_from_bytes(bytes);
}

uint64_t model_hash(const Model &m) {
    const std::vector<uint8_t> bytes = model_to_bytes(m);
    uint64_t h = 1469598103934665603ULL;
    for (uint8_t byte : bytes) {
        h ^= byte;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    static const char *digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[size_t(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

} // namespace prunekit
