#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prunekit/model.hpp"

namespace prunekit {

// One calibration domain: a raw-bytes corpus file plus its mixture weight.
struct DomainSpec {
    std::string domain;
    std::string path;
    double alpha = 1.0;
};

// Mixture manifest: JSON array of {"domain", "path", "alpha"}. Relative paths
// resolve against the manifest's directory; alphas are normalized to sum 1.
std::vector<DomainSpec> load_manifest(const std::string &path);

// Weights >= 0 scaled to sum 1 within 1e-9. Throws ConfigError on a negative
// weight or an all-zero vector.
std::vector<double> normalized_alphas(const std::vector<DomainSpec> &domains);

// n_samples windows of exactly seq_len byte-tokens at uniform random offsets.
// Deterministic per rng state; throws InputError naming the domain when the
// file is missing or shorter than seq_len.
std::vector<std::vector<int>> load_corpus(const DomainSpec &spec, int seq_len,
                                          int n_samples, Rng &rng);

// Streaming per-channel mean/variance (Welford), mergeable (Chan). Internal
// accumulation in double; merging two accumulators equals accumulating the
// concatenated stream within float tolerance.
class ChannelStats {
  public:
    ChannelStats() = default;
    explicit ChannelStats(int width);

    int width() const { return int(mean_.size()); }
    long long count() const { return count_; }

    // One Welford update per row of the tap; count grows by rows.
    void accumulate(const Tensor2 &rows);
    void merge(const ChannelStats &other);

    float mean(int j) const { return float(mean_[size_t(j)]); }
    float m2(int j) const { return float(m2_[size_t(j)]); }
    // Bessel-corrected; requires count >= 2.
    float variance(int j) const;

    std::vector<float> means() const;
    std::vector<float> variances() const;

  private:
    long long count_ = 0;
    std::vector<double> mean_, m2_;
};

// Finalized float snapshot of one site's statistics. Rounding to float here
// makes cache round-trips lossless and keeps downstream math identical
// whether stats came from a fresh pass or from disk.
struct SiteStats {
    long long count = 0;
    std::vector<float> mean;
    std::vector<float> m2;

    float variance(int j) const;
    std::vector<float> variances() const;
};

SiteStats finalize(const ChannelStats &cs);

// Per-domain, per-site statistics, all observed through the same model state.
struct DomainStats {
    std::vector<std::string> domain_ids;
    std::vector<std::vector<SiteStats>> per_domain; // [domain][site]
};

// Alpha-weighted combination across domains, per site.
struct MixedStats {
    std::vector<std::vector<float>> mean;     // [site][channel]
    std::vector<std::vector<float>> variance; // [site][channel]
};

struct CollectOptions {
    int seq_len = 64;
    int n_samples = 32;
    uint64_t seed = 0;
    int threads = 1;
};

// Forwards every domain's sequences through the model (read-only) and
// accumulates per-site statistics. Per-sequence accumulators are merged in
// sequence order, so the result does not depend on the thread count.
DomainStats collect_domain_stats(const Model &m,
                                 const std::vector<DomainSpec> &domains,
                                 const CollectOptions &opts);

// Same, over already loaded sequences (one list per domain). Lets the
// iterative loop reuse identical sample offsets across steps.
DomainStats collect_domain_stats(
    const Model &m, const std::vector<std::vector<std::vector<int>>> &sequences,
    const std::vector<std::string> &domain_ids, int threads);

// Elementwise weighted sums: mixed mean = sum_k alpha_k * mean_k and mixed
// variance = sum_k alpha_k * variance_k, exactly in that form.
MixedStats mix_stats(const DomainStats &ds, const std::vector<double> &alphas);

// Stats cache file: JSON header + little-endian f32 mean/m2 blobs per site
// per domain, keyed by model hash + seed. Hits require every key field to
// match; anything else is a miss and the caller recollects.
void save_stats_cache(const std::string &path, const DomainStats &ds,
                      uint64_t model_hash, uint64_t seed, int seq_len,
                      int n_samples);
bool load_stats_cache(const std::string &path, uint64_t model_hash,
                      uint64_t seed, int seq_len, int n_samples,
                      const std::vector<std::string> &domain_ids,
                      DomainStats *out);

} // namespace prunekit
