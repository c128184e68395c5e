#include "prunekit/calib.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include <json.hpp>

namespace prunekit {

using nlohmann::json;

std::vector<DomainSpec> load_manifest(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open mixture manifest " + path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception &e) {
        throw FormatError("bad manifest " + path + ": " + e.what());
    }
    if (!doc.is_array() || doc.empty()) {
        throw FormatError("manifest " + path + " must be a non-empty JSON array");
    }
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<DomainSpec> out;
    for (const json &entry : doc) {
        DomainSpec d;
        try {
            d.domain = entry.at("domain").get<std::string>();
            d.path = entry.at("path").get<std::string>();
            d.alpha = entry.value("alpha", 1.0);
        } catch (const json::exception &e) {
            throw FormatError("bad manifest entry in " + path + ": " + e.what());
        }
        if (std::filesystem::path(d.path).is_relative()) {
            d.path = (base / d.path).string();
        }
        out.push_back(std::move(d));
    }
    // validate weights up front; callers receive the normalized vector
    normalized_alphas(out);
    return out;
}

std::vector<double> normalized_alphas(const std::vector<DomainSpec> &domains) {
    double sum = 0.0;
    for (const DomainSpec &d : domains) {
        if (d.alpha < 0 || !std::isfinite(d.alpha)) {
            throw ConfigError("domain '" + d.domain + "' has invalid weight " +
                              std::to_string(d.alpha));
        }
        sum += d.alpha;
    }
    if (sum <= 0) throw ConfigError("mixture weights sum to zero");
    std::vector<double> out;
    out.reserve(domains.size());
    for (const DomainSpec &d : domains) out.push_back(d.alpha / sum);
    return out;
}

std::vector<std::vector<int>> load_corpus(const DomainSpec &spec, int seq_len,
                                          int n_samples, Rng &rng) {
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (n_samples < 0) throw ConfigError("n_samples must be >= 0");
    std::ifstream f(spec.path, std::ios::binary);
    if (!f) {
        throw InputError("domain '" + spec.domain + "': cannot open corpus " +
                         spec.path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (int(bytes.size()) < seq_len) {
        throw InputError("domain '" + spec.domain + "': corpus has " +
                         std::to_string(bytes.size()) + " bytes, need at least " +
                         std::to_string(seq_len));
    }
    std::vector<std::vector<int>> out;
    out.reserve(size_t(n_samples));
    const uint64_t span = bytes.size() - size_t(seq_len) + 1;
    for (int s = 0; s < n_samples; ++s) {
        const size_t off = size_t(rng.below(span));
        std::vector<int> seq(static_cast<size_t>(seq_len));
        for (int i = 0; i < seq_len; ++i) seq[size_t(i)] = bytes[off + size_t(i)];
        out.push_back(std::move(seq));
    }
    return out;
}

ChannelStats::ChannelStats(int width)
    : mean_(size_t(width), 0.0), m2_(size_t(width), 0.0) {
    if (width < 1) throw ShapeError("ChannelStats width must be >= 1");
}

void ChannelStats::accumulate(const Tensor2 &rows) {
    if (rows.cols() != width()) {
        throw ShapeError("stats width " + std::to_string(width()) +
                         " does not match tap width " +
                         std::to_string(rows.cols()));
    }
    for (int r = 0; r < rows.rows(); ++r) {
        const float *row = rows.row(r);
        ++count_;
        const double inv_n = 1.0 / double(count_);
        for (int j = 0; j < rows.cols(); ++j) {
            const double x = double(row[j]);
            const double delta = x - mean_[size_t(j)];
            mean_[size_t(j)] += delta * inv_n;
            m2_[size_t(j)] += delta * (x - mean_[size_t(j)]);
        }
    }
}

void ChannelStats::merge(const ChannelStats &other) {
    if (other.width() != width()) {
        throw ShapeError("cannot merge stats of widths " +
                         std::to_string(width()) + " and " +
                         std::to_string(other.width()));
    }
    if (other.count_ == 0) return;
    if (count_ == 0) {
        *this = other;
        return;
    }
    const double na = double(count_);
    const double nb = double(other.count_);
    const double n = na + nb;
    for (size_t j = 0; j < mean_.size(); ++j) {
        const double delta = other.mean_[j] - mean_[j];
        mean_[j] += delta * (nb / n);
        m2_[j] += other.m2_[j] + delta * delta * (na * nb / n);
    }
    count_ += other.count_;
}

float ChannelStats::variance(int j) const {
    if (count_ < 2) {
        throw InputError("variance undefined: " + std::to_string(count_) +
                         " observations (need >= 2)");
    }
    return float(m2_[size_t(j)] / double(count_ - 1));
}

std::vector<float> ChannelStats::means() const {
    std::vector<float> out(mean_.size());
    for (size_t j = 0; j < mean_.size(); ++j) out[j] = float(mean_[j]);
    return out;
}

std::vector<float> ChannelStats::variances() const {
    std::vector<float> out(mean_.size());
    for (size_t j = 0; j < mean_.size(); ++j) out[j] = variance(int(j));
    return out;
}

float SiteStats::variance(int j) const {
    if (count < 2) {
        throw InputError("variance undefined: " + std::to_string(count) +
                         " observations (need >= 2)");
    }
    return float(double(m2[size_t(j)]) / double(count - 1));
}

std::vector<float> SiteStats::variances() const {
    std::vector<float> out(mean.size());
    for (size_t j = 0; j < mean.size(); ++j) out[j] = variance(int(j));
    return out;
}

SiteStats finalize(const ChannelStats &cs) {
    SiteStats s;
    s.count = cs.count();
    s.mean.resize(size_t(cs.width()));
    s.m2.resize(size_t(cs.width()));
    for (int j = 0; j < cs.width(); ++j) {
        s.mean[size_t(j)] = cs.mean(j);
        s.m2[size_t(j)] = cs.m2(j);
    }
    return s;
}

namespace {

void parallel_for(int n, int threads, const std::function<void(int)> &fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    };
    std::vector<std::thread> pool;
    const int nw = std::min(threads, n);
    pool.reserve(size_t(nw));
    for (int w = 0; w < nw; ++w) pool.emplace_back(worker);
    for (auto &t : pool) t.join();
}

} // namespace

DomainStats collect_domain_stats(const Model &m,
                                 const std::vector<DomainSpec> &domains,
                                 const CollectOptions &opts) {
    if (domains.empty()) throw ConfigError("at least one domain is required");
    Rng rng(opts.seed);
    std::vector<std::vector<std::vector<int>>> sequences;
    std::vector<std::string> ids;
    sequences.reserve(domains.size());
    for (const DomainSpec &d : domains) {
        sequences.push_back(load_corpus(d, opts.seq_len, opts.n_samples, rng));
        ids.push_back(d.domain);
    }
    return collect_domain_stats(m, sequences, ids, opts.threads);
}

DomainStats collect_domain_stats(
    const Model &m, const std::vector<std::vector<std::vector<int>>> &sequences,
    const std::vector<std::string> &domain_ids, int threads) {
    if (sequences.size() != domain_ids.size()) {
        throw ConfigError("sequence lists and domain ids disagree");
    }
    const std::vector<PruneSite> sites = prune_sites(m);
    DomainStats out;
    out.domain_ids = domain_ids;
    out.per_domain.resize(sequences.size());

    for (size_t k = 0; k < sequences.size(); ++k) {
        const auto &seqs = sequences[k];
        // one accumulator per sequence per site, merged in sequence order so
        // the result is independent of the thread count
        std::vector<std::vector<ChannelStats>> slots(seqs.size());
        parallel_for(int(seqs.size()), threads, [&](int si) {
            std::vector<ActivationTap> taps;
            forward(m, seqs[size_t(si)], &taps);
            std::vector<ChannelStats> &mine = slots[size_t(si)];
            mine.reserve(sites.size());
            for (const ActivationTap &tap : taps) {
                ChannelStats cs(tap.values.cols());
                cs.accumulate(tap.values);
                mine.push_back(std::move(cs));
            }
        });

        std::vector<ChannelStats> merged(sites.size());
        for (size_t s = 0; s < sites.size(); ++s) {
            merged[s] = ChannelStats(site_channels(m, sites[s]));
        }
        for (auto &slot : slots) {
            for (size_t s = 0; s < sites.size(); ++s) merged[s].merge(slot[s]);
        }
        std::vector<SiteStats> &dst = out.per_domain[k];
        dst.reserve(sites.size());
        for (size_t s = 0; s < sites.size(); ++s) {
            if (merged[s].count() < 2) {
                throw InputError("domain '" + domain_ids[k] +
                                 "': insufficient data (" +
                                 std::to_string(merged[s].count()) +
                                 " token observations, need >= 2)");
            }
            dst.push_back(finalize(merged[s]));
        }
    }
    return out;
}

MixedStats mix_stats(const DomainStats &ds, const std::vector<double> &alphas) {
    if (ds.per_domain.empty()) throw ConfigError("no domain statistics to mix");
    if (alphas.size() != ds.per_domain.size()) {
        throw ConfigError("got " + std::to_string(alphas.size()) +
                          " weights for " + std::to_string(ds.per_domain.size()) +
                          " domains");
    }
    double sum = 0.0;
    for (double a : alphas) {
        if (a < 0 || !std::isfinite(a)) throw ConfigError("negative mixture weight");
        sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("mixture weights must sum to 1 (got " +
                          std::to_string(sum) + ")");
    }

    const size_t n_sites = ds.per_domain[0].size();
    for (size_t k = 1; k < ds.per_domain.size(); ++k) {
        if (ds.per_domain[k].size() != n_sites) {
            throw ShapeError("domain '" + ds.domain_ids[k] +
                             "' is missing sites present in other domains");
        }
    }

    MixedStats mixed;
    mixed.mean.resize(n_sites);
    mixed.variance.resize(n_sites);
    for (size_t s = 0; s < n_sites; ++s) {
        const size_t width = ds.per_domain[0][s].mean.size();
        for (size_t k = 1; k < ds.per_domain.size(); ++k) {
            if (ds.per_domain[k][s].mean.size() != width) {
                throw ShapeError("domain '" + ds.domain_ids[k] + "' site " +
                                 std::to_string(s) + " width mismatch");
            }
        }
        std::vector<float> &mean = mixed.mean[s];
        std::vector<float> &var = mixed.variance[s];
        mean.resize(width);
        var.resize(width);
        for (size_t j = 0; j < width; ++j) {
            double macc = 0.0;
            double vacc = 0.0;
            for (size_t k = 0; k < ds.per_domain.size(); ++k) {
                macc += alphas[k] * double(ds.per_domain[k][s].mean[j]);
                vacc += alphas[k] * double(ds.per_domain[k][s].variance(int(j)));
            }
            mean[j] = float(macc);
            var[j] = float(vacc);
        }
    }
    return mixed;
}

namespace {

constexpr char kCacheMagic[4] = {'P', 'K', 'S', 'C'};
constexpr uint32_t kCacheVersion = 1;

void append_u32(std::vector<uint8_t> &out, uint32_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t((v >> 8) & 0xff));
    out.push_back(uint8_t((v >> 16) & 0xff));
    out.push_back(uint8_t((v >> 24) & 0xff));
}

void append_f32_vec(std::vector<uint8_t> &out, const std::vector<float> &v) {
    for (float f : v) append_u32(out, std::bit_cast<uint32_t>(f));
}

} // namespace

void save_stats_cache(const std::string &path, const DomainStats &ds,
                      uint64_t model_hash, uint64_t seed, int seq_len,
                      int n_samples) {
    json header;
    header["model_hash"] = hash_hex(model_hash);
    header["seed"] = seed;
    header["seq_len"] = seq_len;
    header["n_samples"] = n_samples;
    json domains = json::array();
    for (size_t k = 0; k < ds.per_domain.size(); ++k) {
        json sites = json::array();
        for (const SiteStats &s : ds.per_domain[k]) {
            sites.push_back({{"count", s.count}, {"width", int(s.mean.size())}});
        }
        domains.push_back({{"domain", ds.domain_ids[k]}, {"sites", sites}});
    }
    header["domains"] = domains;
    const std::string htext = header.dump();

    std::vector<uint8_t> bytes;
    bytes.insert(bytes.end(), kCacheMagic, kCacheMagic + 4);
    append_u32(bytes, kCacheVersion);
    append_u32(bytes, uint32_t(htext.size()));
    bytes.insert(bytes.end(), htext.begin(), htext.end());
    for (const auto &sites : ds.per_domain) {
        for (const SiteStats &s : sites) {
            append_f32_vec(bytes, s.mean);
            append_f32_vec(bytes, s.m2);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char *>(bytes.data()), long(bytes.size()));
    if (!f) throw InputError("failed writing " + path);
}

bool load_stats_cache(const std::string &path, uint64_t model_hash,
                      uint64_t seed, int seq_len, int n_samples,
                      const std::vector<std::string> &domain_ids,
                      DomainStats *out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCacheMagic, 4) != 0) {
        throw FormatError("not a stats cache file: " + path);
    }
    size_t pos = 4;
    auto read_u32 = [&]() {
        if (pos + 4 > bytes.size()) throw FormatError("stats cache truncated");
        uint32_t v = uint32_t(bytes[pos]) | (uint32_t(bytes[pos + 1]) << 8) |
                     (uint32_t(bytes[pos + 2]) << 16) |
                     (uint32_t(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    };
    if (read_u32() != kCacheVersion) return false;
    const uint32_t hlen = read_u32();
    if (pos + hlen > bytes.size()) throw FormatError("stats cache truncated");
    json header;
    try {
        header = json::parse(bytes.begin() + long(pos), bytes.begin() + long(pos + hlen));
    } catch (const json::exception &e) {
        throw FormatError(std::string("bad stats cache header: ") + e.what());
    }
    pos += hlen;

    // key check: every field must match or the cache is a miss
    if (header.value("model_hash", "") != hash_hex(model_hash)) return false;
    if (header.value("seed", uint64_t(0)) != seed) return false;
    if (header.value("seq_len", -1) != seq_len) return false;
    if (header.value("n_samples", -1) != n_samples) return false;
    const json &domains = header.at("domains");
    if (domains.size() != domain_ids.size()) return false;
    for (size_t k = 0; k < domain_ids.size(); ++k) {
        if (domains[k].value("domain", "") != domain_ids[k]) return false;
    }

    DomainStats ds;
    ds.domain_ids = domain_ids;
    ds.per_domain.resize(domain_ids.size());
    for (size_t k = 0; k < domain_ids.size(); ++k) {
        for (const json &sj : domains[k].at("sites")) {
            SiteStats s;
            s.count = sj.at("count").get<long long>();
            const int width = sj.at("width").get<int>();
            s.mean.resize(size_t(width));
            s.m2.resize(size_t(width));
            if (pos + size_t(width) * 8 > bytes.size()) {
                throw FormatError("stats cache truncated");
            }
            for (float &v : s.mean) v = std::bit_cast<float>(read_u32());
            for (float &v : s.m2) v = std::bit_cast<float>(read_u32());
            ds.per_domain[k].push_back(std::move(s));
        }
    }
    if (pos != bytes.size()) throw FormatError("stats cache has trailing bytes");
    *out = std::move(ds);
    return true;
}

} // namespace prunekit
