#include "prunekit/prune.hpp"

#include <algorithm>
#include <numeric>

namespace prunekit {

namespace {

const Tensor2 &consuming_matrix(const Model &m, PruneSite site) {
    const Block &b = m.blocks.at(site.block);
    return site.kind == SiteKind::AttnHeads ? b.wo : b.w_down;
}

Tensor2 keep_rows(const Tensor2 &t, const std::vector<int> &rows) {
    Tensor2 out(int(rows.size()), t.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
        const float *src = t.row(rows[i]);
        std::copy(src, src + t.cols(), out.row(int(i)));
    }
    return out;
}

Tensor2 keep_cols(const Tensor2 &t, const std::vector<int> &cols) {
    Tensor2 out(t.rows(), int(cols.size()));
    for (int r = 0; r < t.rows(); ++r) {
        const float *src = t.row(r);
        float *dst = out.row(r);
        for (size_t i = 0; i < cols.size(); ++i) dst[i] = src[cols[i]];
    }
    return out;
}

} // namespace

int PruneMask::live() const {
    int n = 0;
    for (uint8_t k : keep) n += k ? 1 : 0;
    return n;
}

FluctuationScores score(const MixedStats &stats, const Model &m,
                        PruneSite site) {
    const int si = site_index(m, site);
    if (si >= int(stats.variance.size())) {
        throw ShapeError("statistics cover " +
                         std::to_string(stats.variance.size()) +
                         " sites, none for site index " + std::to_string(si));
    }
    const std::vector<float> &var = stats.variance[size_t(si)];
    const Tensor2 &w = consuming_matrix(m, site);
    if (int(var.size()) != w.cols()) {
        throw ShapeError("statistics width " + std::to_string(var.size()) +
                         " does not match live channels " +
                         std::to_string(w.cols()) + " at block " +
                         std::to_string(site.block) + " " +
                         site_kind_name(site.kind));
    }

    FluctuationScores out;
    out.site = site;
    out.per_channel.resize(var.size());
    for (int j = 0; j < w.cols(); ++j) {
        double norm_sq = 0.0;
        for (int o = 0; o < w.rows(); ++o) {
            norm_sq += double(w.at(o, j)) * double(w.at(o, j));
        }
        out.per_channel[size_t(j)] = float(double(var[size_t(j)]) * norm_sq);
    }
    if (site.kind == SiteKind::MlpChannels) {
        out.per_unit = out.per_channel;
    } else {
        const int hd = m.cfg.head_dim;
        const int heads = m.blocks.at(site.block).n_heads_live;
        out.per_unit.resize(size_t(heads));
        for (int h = 0; h < heads; ++h) {
            double acc = 0.0;
            for (int d = 0; d < hd; ++d) {
                acc += double(out.per_channel[size_t(h * hd + d)]);
            }
            out.per_unit[size_t(h)] = float(acc);
        }
    }
    return out;
}

PruneMask all_keep_mask(const Model &m, PruneSite site) {
    PruneMask mask;
    mask.site = site;
    mask.keep.assign(size_t(site_units(m, site)), 1);
    return mask;
}

PruneMask select_mask(const FluctuationScores &scores, int target_live,
                      const PruneMask &prior) {
    const size_t n = scores.per_unit.size();
    if (prior.keep.size() != n) {
        throw ShapeError("prior mask has " + std::to_string(prior.keep.size()) +
                         " units, scores have " + std::to_string(n));
    }
    if (target_live < 1) {
        throw ConfigError("target_live must be >= 1: a site is never emptied");
    }
    if (target_live > prior.live()) {
        throw ConfigError("target_live " + std::to_string(target_live) +
                          " exceeds the " + std::to_string(prior.live()) +
                          " units the prior mask retains");
    }
    std::vector<int> candidates;
    candidates.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        if (prior.keep[i]) candidates.push_back(int(i));
    }
    // highest score first; equal scores keep the higher index so the lower
    // index is pruned first
    std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        const float sa = scores.per_unit[size_t(a)];
        const float sb = scores.per_unit[size_t(b)];
        if (sa != sb) return sa > sb;
        return a > b;
    });
    PruneMask out;
    out.site = scores.site;
    out.keep.assign(n, 0);
    for (int i = 0; i < target_live; ++i) out.keep[size_t(candidates[size_t(i)])] = 1;
    return out;
}

std::vector<uint8_t> expand_unit_mask(const Model &m, PruneSite site,
                                      const std::vector<uint8_t> &unit_keep) {
    if (int(unit_keep.size()) != site_units(m, site)) {
        throw ShapeError("mask has " + std::to_string(unit_keep.size()) +
                         " units, site has " +
                         std::to_string(site_units(m, site)));
    }
    if (site.kind == SiteKind::MlpChannels) return unit_keep;
    std::vector<uint8_t> channels(unit_keep.size() * size_t(m.cfg.head_dim));
    for (size_t h = 0; h < unit_keep.size(); ++h) {
        for (int d = 0; d < m.cfg.head_dim; ++d) {
            channels[h * size_t(m.cfg.head_dim) + size_t(d)] = unit_keep[h];
        }
    }
    return channels;
}

std::vector<float> bias_from_mean(const Tensor2 &w,
                                  const std::vector<uint8_t> &keep_channels,
                                  const std::vector<float> &mean) {
    if (int(keep_channels.size()) != w.cols() || mean.size() != keep_channels.size()) {
        throw ShapeError("bias inputs disagree: matrix " + w.shape_str() +
                         ", mask " + std::to_string(keep_channels.size()) +
                         ", mean " + std::to_string(mean.size()));
    }
    std::vector<float> bias(size_t(w.rows()), 0.0f);
    for (int o = 0; o < w.rows(); ++o) {
        const float *row = w.row(o);
        double acc = 0.0;
        for (int j = 0; j < w.cols(); ++j) {
            if (!keep_channels[size_t(j)]) {
                acc += double(row[j]) * double(mean[size_t(j)]);
            }
        }
        bias[size_t(o)] = float(acc);
    }
    return bias;
}

BiasVector compensate(const Model &m, PruneSite site, const PruneMask &mask,
                      const MixedStats &stats) {
    const int si = site_index(m, site);
    if (si >= int(stats.mean.size())) {
        throw ShapeError("statistics cover " + std::to_string(stats.mean.size()) +
                         " sites, none for site index " + std::to_string(si));
    }
    const std::vector<uint8_t> keep_ch = expand_unit_mask(m, site, mask.keep);
    BiasVector out;
    out.site = site;
    out.values =
        bias_from_mean(consuming_matrix(m, site), keep_ch, stats.mean[size_t(si)]);
    return out;
}

void apply_prune(Model &m, PruneSite site, const PruneMask &mask,
                 const BiasVector &bias) {
    Block &b = m.blocks.at(site.block);
    if (int(mask.keep.size()) != site_units(m, site)) {
        throw ShapeError("mask has " + std::to_string(mask.keep.size()) +
                         " units, site currently has " +
                         std::to_string(site_units(m, site)));
    }
    if (int(bias.values.size()) != m.cfg.d_model) {
        throw ShapeError("bias length " + std::to_string(bias.values.size()) +
                         " does not match d_model " +
                         std::to_string(m.cfg.d_model));
    }
    if (mask.live() < 1) {
        throw ConfigError("mask would empty block " + std::to_string(site.block) +
                          " " + site_kind_name(site.kind));
    }

    if (site.kind == SiteKind::AttnHeads) {
        std::vector<int> head_rows; // surviving rows of wq/wk/wv
        std::vector<int> keep_cols_idx;
        for (size_t h = 0; h < mask.keep.size(); ++h) {
            if (!mask.keep[h]) continue;
            for (int d = 0; d < m.cfg.head_dim; ++d) {
                head_rows.push_back(int(h) * m.cfg.head_dim + d);
            }
        }
        keep_cols_idx = head_rows; // wo columns match qkv rows
        b.wq = keep_rows(b.wq, head_rows);
        b.wk = keep_rows(b.wk, head_rows);
        b.wv = keep_rows(b.wv, head_rows);
        b.wo = keep_cols(b.wo, keep_cols_idx);
        b.n_heads_live = mask.live();
        for (int o = 0; o < m.cfg.d_model; ++o) b.bo[size_t(o)] += bias.values[size_t(o)];
    } else {
        std::vector<int> idx;
        for (size_t c = 0; c < mask.keep.size(); ++c) {
            if (mask.keep[c]) idx.push_back(int(c));
        }
        b.w_gate = keep_rows(b.w_gate, idx);
        b.w_up = keep_rows(b.w_up, idx);
        b.w_down = keep_cols(b.w_down, idx);
        b.d_mlp_live = mask.live();
        for (int o = 0; o < m.cfg.d_model; ++o) b.bd[size_t(o)] += bias.values[size_t(o)];
    }
}

long long param_count(const Model &m) {
    const long long d = m.cfg.d_model;
    long long total = 0;
    total += (long long)m.cfg.vocab * d;   // tok_emb
    total += (long long)m.cfg.max_seq * d; // pos_emb
    for (const Block &b : m.blocks) {
        const long long aw = (long long)b.n_heads_live * m.cfg.head_dim;
        total += 2 * d;          // norms
        total += 3 * aw * d;     // wq, wk, wv
        total += d * aw;         // wo
        total += d;              // bo
        total += 2 * (long long)b.d_mlp_live * d; // w_gate, w_up
        total += d * (long long)b.d_mlp_live;     // w_down
        total += d;              // bd
    }
    total += d;                            // final_norm
    total += (long long)m.cfg.vocab * d;   // w_out
    return total;
}

long long prunable_param_count(const Model &m) {
    const long long d = m.cfg.d_model;
    long long total = 0;
    for (const Block &b : m.blocks) {
        total += 4LL * b.n_heads_live * m.cfg.head_dim * d;
        total += 3LL * b.d_mlp_live * d;
    }
    return total;
}

} // namespace prunekit
