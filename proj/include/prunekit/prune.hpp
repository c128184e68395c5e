#pragma once

#include "prunekit/calib.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

// Per-channel fluctuation: input variance times squared L2 norm of the
// consuming matrix column. per_unit aggregates channels into prunable units
// (identity for MLP channels, per-head sums for attention).
struct FluctuationScores {
    PruneSite site;
    std::vector<float> per_channel;
    std::vector<float> per_unit;
};

// Binary keep/drop decision over a site's prunable units (1 = retain).
struct PruneMask {
    PruneSite site;
    std::vector<uint8_t> keep;

    int live() const;
};

// Compensation bias for the consuming projection's output: W * ((1-m) * mean)
// over the dropped channels. Returned by compensate(), folded in by
// apply_prune().
struct BiasVector {
    PruneSite site;
    std::vector<float> values; // d_model
};

FluctuationScores score(const MixedStats &stats, const Model &m, PruneSite site);

PruneMask all_keep_mask(const Model &m, PruneSite site);

// Keeps the target_live highest-scoring units among those the prior mask
// retains; units the prior dropped stay dropped. Equal scores prune the lower
// index first. target_live < 1 is a ConfigError: a site is never emptied.
PruneMask select_mask(const FluctuationScores &scores, int target_live,
                      const PruneMask &prior);

// Head masks cover head_dim consecutive channels each.
std::vector<uint8_t> expand_unit_mask(const Model &m, PruneSite site,
                                      const std::vector<uint8_t> &unit_keep);

// Core of the compensation: b[o] = sum over dropped channels j of
// W[o, j] * mean[j]. Shared by the model-site path and by tests that build
// bare linear layers.
std::vector<float> bias_from_mean(const Tensor2 &w,
                                  const std::vector<uint8_t> &keep_channels,
                                  const std::vector<float> &mean);

BiasVector compensate(const Model &m, PruneSite site, const PruneMask &mask,
                      const MixedStats &stats);

// Physically shrinks the site's matrices and folds the bias into the
// consuming projection's output bias. Requires exclusive access to the model.
void apply_prune(Model &m, PruneSite site, const PruneMask &mask,
                 const BiasVector &bias);

// Every stored float: embeddings, blocks (live shapes), norms, biases, output
// matrix.
long long param_count(const Model &m);

// Parameters owned by prunable units: per head 4*head_dim*d_model, per MLP
// channel 3*d_model. Ratio bookkeeping runs against this count.
long long prunable_param_count(const Model &m);

} // namespace prunekit
